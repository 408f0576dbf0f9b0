"""Monte Carlo engine: accumulation under fixed strategies, on-grid
decumulation under a solved policy table, replacement-ratio fan diagrams and
parameter sweeps.

Decumulation wealth never leaves the solver's grid: each year the policy's
payoff breakpoints map the uniform market coordinate of the shock straight to
the next grid state, so one solved table serves every scenario. Mortality
enters through the gain weights only; consumption paths cover the full
retirement horizon.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .actuarial import MortalityTable
from .market import MarketParams, wealth_step_log
from .preferences import EkmParams, GainEstimate, estimate_gain
from .solver import PolicyTable, SolveResult, WealthGrid, solve_decumulation

DECILES = np.arange(10, 100, 10)

# substream tags so accumulation and decumulation draws never overlap
STREAM_ACCUMULATION = 0
STREAM_DECUMULATION = 1


@dataclass(frozen=True)
class ScenarioBatch:
    """Reproducible scenario shocks: same seed and shape always give the same
    draws, independent of worker count (counter-based Philox substreams)."""

    n_scenarios: int
    seed: int

    def __post_init__(self):
        if self.n_scenarios < 1:
            raise ValueError("need at least one scenario")

    def normals(self, stream: int, years: int) -> np.ndarray:
        gen = np.random.Generator(np.random.Philox(key=[self.seed, stream]))
        return gen.standard_normal((self.n_scenarios, years))


@dataclass(frozen=True)
class AccumulationConfig:
    """Pre-retirement plan: contributions as a salary fraction at the start of
    each year, fixed investment weight (scalar or per-age glidepath). Salaries
    are normalized so the final (retirement-date) salary is 1."""

    start_age: int
    contribution_rate: float
    salary_growth: float = 0.0
    fixed_pi: float | tuple = 0.6

    def __post_init__(self):
        if not 0.0 <= self.contribution_rate <= 1.0:
            raise ValueError("contribution rate must lie in [0, 1]")

    def weights(self, years: int) -> np.ndarray:
        pi = np.broadcast_to(np.asarray(self.fixed_pi, dtype=float), (years,))
        return np.array(pi)


@dataclass
class FanDiagram:
    """Replacement-ratio deciles per retirement year plus the gain estimate."""

    years: np.ndarray
    deciles: np.ndarray  # (9, horizon), rows are the 10%..90% deciles
    gain: GainEstimate
    meta: dict = field(default_factory=dict)

    def width(self, year_index: int) -> float:
        return float(self.deciles[-1, year_index] - self.deciles[0, year_index])


@dataclass
class DecumulationResult:
    consumption: np.ndarray  # (n_scenarios, horizon), salary units
    wealth: np.ndarray  # (n_scenarios, horizon), grid wealth at each age
    start_wealth: np.ndarray  # snapped per-scenario starting wealth


def simulate_accumulation(
    cfg: AccumulationConfig,
    m: MarketParams,
    batch: ScenarioBatch,
    retirement_age: int = 65,
    w0: float = 0.0,
) -> np.ndarray:
    """Wealth per scenario at each age from start to retirement, shape
    (n_scenarios, years + 1); the last column is wealth at retirement."""
    years = retirement_age - cfg.start_age
    if years <= 0:
        raise ValueError("start_age must precede retirement")
    eps = batch.normals(STREAM_ACCUMULATION, years)
    pi = cfg.weights(years)
    salary = (1.0 + cfg.salary_growth) ** np.arange(-years, 0, dtype=float)
    path = np.empty((batch.n_scenarios, years + 1))
    w = np.full(batch.n_scenarios, float(w0))
    path[:, 0] = w
    for j in range(years):
        w = w + cfg.contribution_rate * salary[j]
        w = np.exp(wealth_step_log(np.log(w), float(pi[j]), eps[:, j], m))
        path[:, j + 1] = w
    return path


def simulate_decumulation(
    policy: PolicyTable,
    batch: ScenarioBatch,
    w0,
) -> DecumulationResult:
    """Follow the solved policy on its own grid.

    w0 may be a scalar or one value per scenario; it snaps down to the grid.
    Consumption amounts are recorded for the full horizon; wealth states stay
    on the solver grid by construction.
    """
    horizon = policy.horizon
    x = policy.grid.points
    w0_arr = np.broadcast_to(np.asarray(w0, dtype=float), (batch.n_scenarios,))
    if w0_arr.ndim != 1:
        raise ValueError("w0 must be a scalar or a vector over scenarios")
    start_state = np.empty(batch.n_scenarios, dtype=int)
    for w in np.unique(w0_arr):
        start_state[w0_arr == w] = policy.start_index(float(w))
    state = start_state.copy()

    eps = batch.normals(STREAM_DECUMULATION, horizon)
    sign = 1.0 if policy.market.mu >= policy.market.r else -1.0

    consumption = np.empty((batch.n_scenarios, horizon))
    wealth = np.empty((batch.n_scenarios, horizon))
    for t in range(horizon):
        per = policy.policies[t]
        wealth[:, t] = x[state]
        consumption[:, t] = np.exp(per.log_c[state])
        if t == horizon - 1:
            break
        slog_u = nm.slog_norm_cdf(sign * eps[:, t])
        nxt = np.empty_like(state)
        for b in np.unique(state):
            rows = state == b
            nxt[rows] = per.next_state(int(b), slog_u[rows])
        state = nxt
    return DecumulationResult(
        consumption=consumption, wealth=wealth, start_wealth=x[start_state]
    )


def simulate_fixed_rule(
    w0: float,
    consume_frac: float,
    pi: float,
    table: MortalityTable,
    m: MarketParams,
    batch: ScenarioBatch,
) -> np.ndarray:
    """Reference strategy: consume a fixed fraction of wealth each year and
    invest the rest at a constant weight, with tontine credits. Always
    feasible; used as a dominance benchmark against solved policies."""
    if not 0.0 < consume_frac < 1.0:
        raise ValueError("consume_frac must lie in (0, 1)")
    horizon = table.horizon
    eps = batch.normals(STREAM_DECUMULATION, horizon)
    w = np.full(batch.n_scenarios, float(w0))
    consumption = np.empty((batch.n_scenarios, horizon))
    for t in range(horizon):
        c = consume_frac * w
        consumption[:, t] = c
        if t == horizon - 1:
            break
        credited = (w - c) / float(table.survival[t])
        w = np.exp(wealth_step_log(np.log(credited), pi, eps[:, t], m))
    return consumption


def fan_from_paths(
    paths: np.ndarray,
    table: MortalityTable,
    prefs: EkmParams,
    dt: float = 1.0,
    meta: dict | None = None,
) -> FanDiagram:
    """Decile fan of the replacement ratio (= consumption in salary units)
    per retirement year, with the Monte Carlo gain attached."""
    paths = np.asarray(paths, dtype=float)
    if paths.shape[0] < 10:
        raise ValueError("need at least 10 scenarios for deciles")
    deciles = np.percentile(paths, DECILES, axis=0)
    gain = estimate_gain(paths, table, prefs, dt)
    return FanDiagram(
        years=table.ages.copy(),
        deciles=deciles,
        gain=gain,
        meta=dict(meta or {}),
    )


@dataclass
class SweepEntry:
    prefs: EkmParams
    fan: FanDiagram | None
    solver_nlv: float | None
    error: str | None = None


def run_lifecycle(
    prefs: EkmParams,
    table: MortalityTable,
    m: MarketParams,
    base_grid: WealthGrid,
    w0: float,
    batch: ScenarioBatch,
    refinements: int = 2,
    early_stop_tol: float | None = 1e-4,
) -> tuple[SolveResult, DecumulationResult, FanDiagram]:
    """Solve, simulate and summarize one preference triple."""
    solved = solve_decumulation(
        table, m, prefs, base_grid,
        refinements=refinements, early_stop_tol=early_stop_tol,
    )
    sim = simulate_decumulation(solved.policy, batch, w0)
    fan = fan_from_paths(
        sim.consumption, table, prefs, m.dt,
        meta={
            "alpha": prefs.alpha, "rho": prefs.rho, "a": prefs.a,
            "seed": batch.seed, "n_scenarios": batch.n_scenarios,
            "initial_wealth": w0,
            "snapped_wealth": float(sim.start_wealth[0]),
            "grid_size": solved.policy.grid.size,
            "solver_nlv": solved.policy.value_nlv(w0),
        },
    )
    return solved, sim, fan


def _sweep_one(args) -> SweepEntry:
    (prefs, table, m, base_grid, w0, batch, refinements) = args
    try:
        solved, _, fan = run_lifecycle(
            prefs, table, m, base_grid, w0, batch, refinements=refinements
        )
        return SweepEntry(
            prefs=prefs, fan=fan, solver_nlv=solved.policy.value_nlv(w0)
        )
    except Exception as exc:  # isolate per-triple failures
        return SweepEntry(prefs=prefs, fan=None, solver_nlv=None, error=str(exc))


def sweep(
    triples,
    table: MortalityTable,
    m: MarketParams,
    base_grid: WealthGrid,
    w0: float,
    batch: ScenarioBatch,
    refinements: int = 2,
    workers: int = 0,
) -> list:
    """Solve + simulate each preference triple; failures are isolated per
    triple. Deterministic for a fixed batch regardless of worker count."""
    jobs = [
        (prefs, table, m, base_grid, w0, batch, refinements) for prefs in triples
    ]
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_one, jobs))
    return [_sweep_one(job) for job in jobs]


def gain_matches_solver(
    fan: FanDiagram, solver_nlv: float, n_se: float = 3.0
) -> bool:
    """Self-consistency: the Monte Carlo gain of the simulated policy should
    sit within n_se standard errors of the solver value -exp(-nlv)."""
    spread = abs(math.expm1(-solver_nlv - fan.gain.log_neg_gain))
    return spread <= n_se * fan.gain.se_rel
