import { ServiceClient } from "./api.js";
import { Explorer } from "./explorer.js";

declare global {
  interface Window {
    EXPLORER_API?: string;
    explorer?: Explorer;
  }
}

const base = window.EXPLORER_API ?? "";
const host = document.getElementById("app");
if (host) {
  const explorer = new Explorer(document, host, new ServiceClient(base));
  window.explorer = explorer;
  void explorer.refresh();
}
