export interface PrefParams {
  alpha: number;
  rho: number;
  a: number;
}

export interface GainInfo {
  L: number;
  se: number;
}

export interface FanPayload {
  years: number[];
  deciles: number[][]; // 9 rows, 10%..90%
  gain: GainInfo;
  meta: {
    params: PrefParams;
    seed: number;
    n_scenarios: number;
    initial_wealth: number;
    snapped_wealth: number;
    grid: number;
    solver_nlv: number;
  };
}

export interface PreviewPayload {
  approx: true;
  source_params: PrefParams;
  years: number[];
  deciles: number[][];
  gain: GainInfo;
}

export interface SolveResponse {
  job_id: string;
  state: "queued" | "running" | "done" | "failed";
  error?: string;
  preview?: PreviewPayload;
}

export interface StrategyPayload {
  years: number[];
  consumption: number[];
  dispersion: number[];
}
