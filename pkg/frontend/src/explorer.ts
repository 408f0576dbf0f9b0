import { ApiError, ServiceClient } from "./api.js";
import { FanChart } from "./fanChart.js";
import {
  ALPHA_SLIDER,
  A_SLIDER,
  PARAM_SLIDERS,
  RHO_SLIDER,
  WEALTH_SLIDER,
  buildSlider,
  showSliderError,
} from "./sliders.js";
import type { FanPayload, PrefParams, SolveResponse } from "./types.js";

export const DEFAULT_PARAMS: PrefParams = { alpha: 5e-5, rho: -2.0, a: 0.4 };
export const DEFAULT_WEALTH = 12.0;
const DEBOUNCE_MS = 250;

interface PaneState {
  chart: FanChart;
  payload: FanPayload | null;
  jobId: string | null;
}

/**
 * Explorer view: sliders steer the preference triple and initial wealth;
 * every change debounces into at most one in-flight solve request, polls the
 * job, and renders the fan straight from the payload. Pinning freezes the
 * current pane for side-by-side comparison with synchronized axes.
 */
export class Explorer {
  params: PrefParams = { ...DEFAULT_PARAMS };
  wealth = DEFAULT_WEALTH;

  readonly current: PaneState;
  readonly pinned: PaneState;
  private sliderRoots = new Map<string, HTMLElement>();
  private debounceTimer: ReturnType<typeof setTimeout> | null = null;
  private inFlight = false;
  private pendingRefresh = false;
  private generation = 0;
  readonly status: HTMLElement;

  constructor(
    private doc: Document,
    host: HTMLElement,
    private client: ServiceClient,
    private percentile = 50,
  ) {
    const controls = doc.createElement("div");
    controls.className = "controls";
    for (const spec of PARAM_SLIDERS) {
      const initial =
        spec === ALPHA_SLIDER
          ? this.params.alpha
          : spec === RHO_SLIDER
            ? this.params.rho
            : this.params.a;
      const slider = buildSlider(doc, spec, initial, (value) => {
        if (spec === ALPHA_SLIDER) this.params.alpha = value;
        else if (spec === RHO_SLIDER) this.params.rho = value;
        else if (spec === A_SLIDER) this.params.a = value;
        this.scheduleRefresh();
      });
      this.sliderRoots.set(spec.id, slider.root);
      controls.append(slider.root);
    }
    const wealthSlider = buildSlider(doc, WEALTH_SLIDER, this.wealth, (value) => {
      this.wealth = value;
      this.scheduleRefresh();
    });
    this.sliderRoots.set(WEALTH_SLIDER.id, wealthSlider.root);
    controls.append(wealthSlider.root);

    const pinButton = doc.createElement("button");
    pinButton.id = "pin-toggle";
    pinButton.textContent = "pin for comparison";
    pinButton.addEventListener("click", () => this.togglePin());
    controls.append(pinButton);

    this.status = doc.createElement("div");
    this.status.id = "status-line";
    controls.append(this.status);

    const panes = doc.createElement("div");
    panes.className = "panes";
    this.current = { chart: new FanChart(doc, "current"), payload: null, jobId: null };
    this.pinned = { chart: new FanChart(doc, "pinned"), payload: null, jobId: null };
    this.pinned.chart.root.hidden = true;
    panes.append(this.current.chart.root, this.pinned.chart.root);

    host.append(controls, panes);
  }

  /** Collapse rapid slider movement into one request. */
  scheduleRefresh(): void {
    if (this.debounceTimer !== null) clearTimeout(this.debounceTimer);
    this.debounceTimer = setTimeout(() => {
      this.debounceTimer = null;
      void this.refresh();
    }, DEBOUNCE_MS);
  }

  async refresh(): Promise<void> {
    if (this.inFlight) {
      this.pendingRefresh = true;
      return;
    }
    this.inFlight = true;
    const generation = ++this.generation;
    const params = { ...this.params };
    const overrides = { initial_wealth: this.wealth };
    this.clearErrors();
    try {
      this.status.textContent = "solving…";
      const submitted: SolveResponse = await this.client.solve(params, overrides);
      if (submitted.state !== "done" && submitted.preview) {
        this.current.chart.render(submitted.preview, { approx: true });
      }
      const payload = await this.client.waitForFan(submitted.job_id);
      if (generation === this.generation) {
        this.current.payload = payload;
        this.current.jobId = submitted.job_id;
        this.renderPanes();
        this.status.textContent = "ready";
      }
    } catch (err) {
      if (generation === this.generation) this.showError(err);
    } finally {
      this.inFlight = false;
      if (this.pendingRefresh) {
        this.pendingRefresh = false;
        void this.refresh();
      }
    }
  }

  private renderPanes(): void {
    const panes = [this.current, this.pinned].filter((p) => p.payload !== null);
    // axis lock: both panes share the maximum y-range across panes
    const yMax = Math.max(...panes.map((p) => Math.max(...p.payload!.deciles[8])));
    for (const pane of panes) {
      pane.chart.render(pane.payload!, {
        yMax: this.pinned.payload ? yMax : undefined,
      });
    }
  }

  async togglePin(): Promise<void> {
    if (this.pinned.payload) {
      this.pinned.payload = null;
      this.pinned.jobId = null;
      this.pinned.chart.clear();
      this.pinned.chart.root.hidden = true;
      this.renderPanes();
      return;
    }
    if (!this.current.payload) return;
    this.pinned.payload = this.current.payload;
    this.pinned.jobId = this.current.jobId;
    this.pinned.chart.root.hidden = false;
    this.renderPanes();
    await this.overlayStrategies();
  }

  /** Compare mode: overlay the per-year consumption series at a percentile. */
  private async overlayStrategies(): Promise<void> {
    const panes = [this.current, this.pinned];
    if (panes.some((p) => !p.jobId || !p.payload)) return;
    const yMax = Math.max(...panes.map((p) => Math.max(...p.payload!.deciles[8])));
    for (const pane of panes) {
      try {
        const strat = await this.client.strategy(pane.jobId!, this.percentile);
        pane.chart.render(pane.payload!, { yMax, overlay: strat });
      } catch (err) {
        const card = this.doc.createElement("div");
        card.className = "pane-error";
        card.textContent = `strategy unavailable: ${String(err)}`;
        pane.chart.root.append(card);
      }
    }
  }

  /** Decile-width readout used by the comparison view. */
  compareWidths(yearOffset = 10): { current: number; pinned: number } | null {
    if (!this.current.payload || !this.pinned.payload) return null;
    return {
      current: this.current.chart.widthAt(yearOffset),
      pinned: this.pinned.chart.widthAt(yearOffset),
    };
  }

  private clearErrors(): void {
    for (const root of this.sliderRoots.values()) showSliderError(root, null);
  }

  private showError(err: unknown): void {
    if (err instanceof ApiError && err.status === 400) {
      const message = String(err.detail ?? err.message);
      const field = ["alpha", "rho", "a"].find((k) => message.includes(k));
      const root = this.sliderRoots.get(field ?? "alpha");
      if (root) showSliderError(root, message);
      this.status.textContent = "rejected";
      return;
    }
    this.status.textContent = `error: ${String(
      err instanceof ApiError ? err.message : err,
    )}`;
  }
}
