import type { FanPayload, PreviewPayload, StrategyPayload } from "./types.js";

const WIDTH = 560;
const HEIGHT = 320;
const MARGIN = { left: 52, right: 12, top: 14, bottom: 30 };
const BAND_FILL = ["#dbeafe", "#bfdbfe", "#93c5fd", "#60a5fa"];

export interface RenderOptions {
  /** lock the y-range (used by compare mode to share axes) */
  yMax?: number;
  approx?: boolean;
  overlay?: StrategyPayload | null;
}

/**
 * Nine-decile fan rendered as SVG. The chart never computes finance: every
 * plotted number comes straight from a service payload, and the exact inputs
 * are exposed on data attributes and on `lastPayload` so tests can verify
 * the pass-through.
 */
export class FanChart {
  readonly root: HTMLElement;
  lastPayload: FanPayload | PreviewPayload | null = null;
  lastOverlay: StrategyPayload | null = null;

  constructor(doc: Document, title: string) {
    this.root = doc.createElement("figure");
    this.root.className = "fan-chart";
    const caption = doc.createElement("figcaption");
    caption.textContent = title;
    this.root.append(caption);
  }

  yMax(): number {
    const payload = this.lastPayload;
    if (!payload) return 0;
    return Math.max(...payload.deciles[payload.deciles.length - 1]);
  }

  /** decile-90 minus decile-10 readout at an offset from retirement. */
  widthAt(yearOffset: number): number {
    const payload = this.lastPayload;
    if (!payload) return NaN;
    const j = Math.min(yearOffset, payload.years.length - 1);
    return payload.deciles[8][j] - payload.deciles[0][j];
  }

  render(payload: FanPayload | PreviewPayload, opts: RenderOptions = {}): void {
    this.lastPayload = payload;
    this.lastOverlay = opts.overlay ?? null;
    const doc = this.root.ownerDocument;
    this.root.querySelector("svg")?.remove();
    this.root.querySelector(".gain-readout")?.remove();
    this.root.querySelector(".approx-badge")?.remove();

    const { years, deciles } = payload;
    const yTop = opts.yMax ?? Math.max(...deciles[8], 1e-9);
    const x = (j: number) =>
      MARGIN.left +
      ((WIDTH - MARGIN.left - MARGIN.right) * j) / Math.max(years.length - 1, 1);
    const y = (v: number) =>
      HEIGHT - MARGIN.bottom - ((HEIGHT - MARGIN.top - MARGIN.bottom) * v) / yTop;

    const svg = doc.createElementNS("http://www.w3.org/2000/svg", "svg");
    svg.setAttribute("viewBox", `0 0 ${WIDTH} ${HEIGHT}`);
    svg.setAttribute("width", String(WIDTH));
    svg.setAttribute("height", String(HEIGHT));
    // exact payload numbers, extractable by tests and tooling
    svg.dataset.years = JSON.stringify(years);
    svg.dataset.deciles = JSON.stringify(deciles);

    for (let band = 0; band < 4; band++) {
      const lower = deciles[band];
      const upper = deciles[8 - band];
      const pts = years.map((_, j) => `${x(j)},${y(upper[j])}`);
      const back = years
        .map((_, j) => `${x(years.length - 1 - j)},${y(lower[years.length - 1 - j])}`)
        .join(" ");
      const poly = doc.createElementNS("http://www.w3.org/2000/svg", "polygon");
      poly.setAttribute("points", `${pts.join(" ")} ${back}`);
      poly.setAttribute("fill", BAND_FILL[band]);
      poly.setAttribute("stroke", "none");
      svg.append(poly);
    }
    deciles.forEach((row, d) => {
      const line = doc.createElementNS("http://www.w3.org/2000/svg", "polyline");
      line.setAttribute("points", years.map((_, j) => `${x(j)},${y(row[j])}`).join(" "));
      line.setAttribute("fill", "none");
      line.setAttribute("stroke", d === 4 ? "#1d4ed8" : "#64748b");
      line.setAttribute("stroke-width", d === 4 ? "2" : "1");
      line.dataset.decile = String((d + 1) * 10);
      line.dataset.values = JSON.stringify(row);
      svg.append(line);
    });
    if (opts.overlay) {
      const line = doc.createElementNS("http://www.w3.org/2000/svg", "polyline");
      line.setAttribute(
        "points",
        opts.overlay.years.map((_, j) => `${x(j)},${y(opts.overlay!.consumption[j])}`).join(" "),
      );
      line.setAttribute("fill", "none");
      line.setAttribute("stroke", "#dc2626");
      line.setAttribute("stroke-dasharray", "5 3");
      line.classList.add("strategy-overlay");
      line.dataset.values = JSON.stringify(opts.overlay.consumption);
      svg.append(line);
    }
    this.root.append(svg);

    const gain = doc.createElement("div");
    gain.className = "gain-readout";
    gain.dataset.l = String(payload.gain.L);
    gain.dataset.se = String(payload.gain.se);
    gain.textContent = `gain L = ${payload.gain.L.toPrecision(6)} ± ${payload.gain.se.toPrecision(3)} (rel SE)`;
    this.root.append(gain);

    if (opts.approx) {
      const badge = doc.createElement("span");
      badge.className = "approx-badge";
      badge.textContent = "approximate preview (nearest cached parameters)";
      this.root.append(badge);
    }
  }

  clear(): void {
    this.lastPayload = null;
    this.root.querySelector("svg")?.remove();
    this.root.querySelector(".gain-readout")?.remove();
    this.root.querySelector(".approx-badge")?.remove();
  }
}
