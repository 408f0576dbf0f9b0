import type { PrefParams } from "./types.js";

/** Parameter lattice offered by the service; sliders must match it exactly. */
export const SWEEP_BOX = {
  alpha: { min: 1e-7, max: 1e-2 },
  rho: { min: -2.0, max: -0.1 },
  a: { min: 0.1, max: 1.0 },
} as const;

export const WEALTH_RANGE = { min: 1.0, max: 40.0 };

export interface SliderSpec {
  id: string;
  label: string;
  /** slider position range (what the <input type=range> holds) */
  posMin: number;
  posMax: number;
  step: number;
  toValue(pos: number): number;
  toPos(value: number): number;
  format(value: number): string;
}

/** Risk aversion runs on a log scale: five decades in the box. */
export const ALPHA_SLIDER: SliderSpec = {
  id: "alpha",
  label: "risk aversion α",
  posMin: Math.log10(SWEEP_BOX.alpha.min),
  posMax: Math.log10(SWEEP_BOX.alpha.max),
  step: 0.05,
  toValue: (pos) => Math.pow(10, pos),
  toPos: (value) => Math.log10(value),
  format: (value) => value.toExponential(2),
};

export const RHO_SLIDER: SliderSpec = {
  id: "rho",
  label: "satiation ρ",
  posMin: SWEEP_BOX.rho.min,
  posMax: SWEEP_BOX.rho.max,
  step: 0.01,
  toValue: (pos) => pos,
  toPos: (value) => value,
  format: (value) => value.toFixed(2),
};

export const A_SLIDER: SliderSpec = {
  id: "a",
  label: "adequacy level a",
  posMin: SWEEP_BOX.a.min,
  posMax: SWEEP_BOX.a.max,
  step: 0.01,
  toValue: (pos) => pos,
  toPos: (value) => value,
  format: (value) => value.toFixed(2),
};

export const WEALTH_SLIDER: SliderSpec = {
  id: "wealth",
  label: "initial wealth (salary units)",
  posMin: WEALTH_RANGE.min,
  posMax: WEALTH_RANGE.max,
  step: 0.5,
  toValue: (pos) => pos,
  toPos: (value) => value,
  format: (value) => value.toFixed(1),
};

export const PARAM_SLIDERS: SliderSpec[] = [ALPHA_SLIDER, RHO_SLIDER, A_SLIDER];

export function clampParams(p: PrefParams): PrefParams {
  const clip = (v: number, lo: number, hi: number) => Math.min(Math.max(v, lo), hi);
  return {
    alpha: clip(p.alpha, SWEEP_BOX.alpha.min, SWEEP_BOX.alpha.max),
    rho: clip(p.rho, SWEEP_BOX.rho.min, SWEEP_BOX.rho.max),
    a: clip(p.a, SWEEP_BOX.a.min, SWEEP_BOX.a.max),
  };
}

/** Build one labelled <input type=range> wired to the spec's value mapping. */
export function buildSlider(
  doc: Document,
  spec: SliderSpec,
  initial: number,
  onChange: (value: number) => void,
): { root: HTMLElement; input: HTMLInputElement; setValue(v: number): void } {
  const root = doc.createElement("div");
  root.className = "slider";
  const label = doc.createElement("label");
  label.htmlFor = `slider-${spec.id}`;
  const input = doc.createElement("input");
  input.type = "range";
  input.id = `slider-${spec.id}`;
  input.min = String(spec.posMin);
  input.max = String(spec.posMax);
  input.step = String(spec.step);
  const readout = doc.createElement("output");
  readout.className = "readout";
  const error = doc.createElement("div");
  error.className = "slider-error";
  error.hidden = true;

  const show = (value: number) => {
    label.textContent = spec.label;
    readout.textContent = spec.format(value);
    // the displayed number and the request payload come from the same value
    input.dataset.value = String(value);
  };
  const setValue = (value: number) => {
    input.value = String(spec.toPos(value));
    show(value);
  };
  input.addEventListener("input", () => {
    const value = spec.toValue(Number(input.value));
    show(value);
    onChange(value);
  });
  setValue(initial);
  root.append(label, input, readout, error);
  return { root, input, setValue };
}

export function showSliderError(root: HTMLElement, message: string | null): void {
  const el = root.querySelector<HTMLElement>(".slider-error");
  if (!el) return;
  el.hidden = message === null;
  el.textContent = message ?? "";
}
