import type { FanPayload, PrefParams, SolveResponse, StrategyPayload } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public detail: unknown) {
    super(typeof detail === "string" ? detail : JSON.stringify(detail));
  }
}

export interface PollOptions {
  initialMs?: number;
  maxMs?: number;
  backoff?: number;
  signal?: AbortSignal;
}

/** Thin typed client over the results service. */
export class ServiceClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: typeof fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    const body = await res.json().catch(() => null);
    if (!res.ok) {
      throw new ApiError(res.status, body?.detail ?? body);
    }
    return body as T;
  }

  solve(params: PrefParams, overrides?: Record<string, number>): Promise<SolveResponse> {
    const body: Record<string, unknown> = { ...params };
    if (overrides && Object.keys(overrides).length > 0) body.overrides = overrides;
    return this.request<SolveResponse>("/api/solve", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  fan(jobId: string): Promise<FanPayload> {
    return this.request<FanPayload>(`/api/fan?job_id=${encodeURIComponent(jobId)}`);
  }

  strategy(jobId: string, percentile: number): Promise<StrategyPayload> {
    return this.request<StrategyPayload>(
      `/api/strategy?job_id=${encodeURIComponent(jobId)}&percentile=${percentile}`,
    );
  }

  /**
   * Poll the fan endpoint until the job finishes. Poll interval starts at
   * 500 ms and backs off exponentially to 5 s for long cold solves.
   */
  async waitForFan(jobId: string, opts: PollOptions = {}): Promise<FanPayload> {
    const initial = opts.initialMs ?? 500;
    const max = opts.maxMs ?? 5000;
    const factor = opts.backoff ?? 1.6;
    let wait = initial;
    for (;;) {
      try {
        return await this.fan(jobId);
      } catch (err) {
        if (!(err instanceof ApiError) || err.status !== 409) throw err;
        const detail = err.detail as { state?: string } | undefined;
        if (detail?.state === "failed") throw err;
      }
      if (opts.signal?.aborted) throw new DOMException("aborted", "AbortError");
      await new Promise((resolve) => setTimeout(resolve, wait));
      wait = Math.min(wait * factor, max);
    }
  }
}
