"""Provably convergent backward-induction solver for the decumulation problem.

The value function at each age is a concave, increasing, piecewise-linear
function on a fixed wealth grid, stored through the overflow-safe encoding
nlv = -log(-v). Each one-period problem is solved by convex duality: candidate
optimal payoffs are step functions of the uniform market coordinate whose
breakpoints come from the dual slopes of the continuation value, indexed by a
multiplier eta; the budget equation log w(eta) = log w pins eta down by
bisection. Refining the grid (geometric midpoints, nested) produces monotone
lower approximations converging to the true value.

All quantities with exponential scale live in logs; probabilities live in the
symmetric slog encoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .actuarial import MortalityTable
from .market import MarketParams
from .preferences import EkmParams, inv_marginal_log, period_utility

LOG10 = math.log(10.0)

# bisection bracket for the log dual multiplier, grown geometrically on demand
ETA_BRACKET_START = 40.0
ETA_BRACKET_LIMIT = 300.0
ROOT_TOL = 1e-11
MONOTONE_SLACK = 1e-9


class SolverError(RuntimeError):
    """Raised when a one-period problem cannot be solved numerically."""


class InfeasibleStartError(ValueError):
    """Raised when an initial wealth cannot fund any admissible plan."""


@dataclass(frozen=True)
class WealthGrid:
    """Strictly increasing positive wealth points shared by all time steps."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("wealth grid needs at least two points")
        if pts[0] <= 0.0 or np.any(np.diff(pts) <= 0.0):
            raise ValueError("wealth grid must be strictly increasing and positive")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return int(self.points.size)

    @staticmethod
    def geometric(x_min: float, x_max: float, n: int) -> "WealthGrid":
        return WealthGrid(np.geomspace(x_min, x_max, n))

    def refined(self) -> "WealthGrid":
        """Insert geometric midpoints; the result is a strict superset."""
        x = self.points
        mids = np.sqrt(x[:-1] * x[1:])
        return WealthGrid(np.sort(np.concatenate([x, mids])))

    def is_refinement_of(self, other: "WealthGrid") -> bool:
        return bool(np.all(np.isin(other.points, self.points)))


@dataclass
class ValueLayer:
    """Piecewise-linear concave value function on a grid.

    nlv[i] = -log(-v(x_i)) is nondecreasing (v increasing) and may be -inf at
    the bottom of the grid (infeasible budgets). The function is -inf below
    x_0, linear in v between nodes and constant above x_{N-1}.
    """

    grid: WealthGrid
    nlv: np.ndarray

    def __post_init__(self):
        self.nlv = np.asarray(self.nlv, dtype=float)
        if self.nlv.shape != (self.grid.size,):
            raise ValueError("one value per grid point required")

    def neg_log(self) -> np.ndarray:
        """log(-v(x_i)), nonincreasing."""
        return -self.nlv

    def validate(self, slack: float = MONOTONE_SLACK) -> None:
        """Check monotonicity of the values and concavity of the chords.

        Tolerances are noise-aware: a chord between nodes whose values agree
        to near machine precision has an essentially undetermined log slope,
        so its share of slack grows as the value gap shrinks.
        """
        finite_vals = self.nlv[np.isfinite(self.nlv)]
        tol = slack * np.maximum(1.0, np.abs(finite_vals[:-1])) if finite_vals.size else 0.0
        if finite_vals.size > 1 and np.any(np.diff(finite_vals) < -tol):
            raise SolverError("value layer is not monotone increasing")
        slopes = dual_slopes(self)
        finite = np.isfinite(slopes)
        idx = np.where(finite)[0]
        if idx.size > 1:
            s = slopes[idx]
            noise = 1e-12 * np.maximum(1.0, np.abs(self.nlv))
            gap = np.abs(np.diff(self.nlv))
            with np.errstate(divide="ignore", invalid="ignore"):
                slope_noise = np.where(
                    gap > 0, (noise[:-1] + noise[1:]) / gap, np.inf
                )
            pair_tol = (
                slack * np.maximum(1.0, np.abs(s[:-1]))
                + slope_noise[idx[:-1]]
                + slope_noise[idx[1:]]
            )
            if np.any(np.diff(s) > pair_tol):
                raise SolverError("value layer is not concave (slopes increase)")
        # -inf slopes (flat segments) are only admissible at the top
        neg_inf = np.where(slopes == -np.inf)[0]
        if neg_inf.size and (
            not np.all(np.diff(neg_inf) == 1) or neg_inf[-1] != slopes.size - 1
        ):
            raise SolverError("flat value segments below the top of the grid")

    def nlv_at(self, w: float) -> float:
        """Value at arbitrary wealth: -inf below the grid, linear in v between
        nodes (stably, via log-space mixing), constant above the top."""
        x = self.grid.points
        if w < x[0]:
            return -math.inf
        if w >= x[-1]:
            return float(self.nlv[-1])
        j = int(np.searchsorted(x, w, side="right") - 1)
        if w == x[j]:
            return float(self.nlv[j])
        lam = (w - x[j]) / (x[j + 1] - x[j])
        neg = self.neg_log()
        mixed = np.logaddexp(
            math.log1p(-lam) + neg[j], math.log(lam) + neg[j + 1]
        )
        return float(-mixed)

    def value_at(self, w: float) -> float:
        return nm.log_to_neg_value(self.nlv_at(w))


def terminal_layer(grid: WealthGrid, p: EkmParams, dt: float = 1.0) -> ValueLayer:
    """Final decision age: consume everything, nlv = alpha * u(x_i) * dt."""
    with np.errstate(over="ignore"):
        nlv = p.alpha * period_utility(grid.points, p) * dt
    return ValueLayer(grid=grid, nlv=nlv)


def dual_slopes(v: ValueLayer) -> np.ndarray:
    """log of the chord slopes of v between consecutive grid points.

    Nonincreasing by concavity; +inf above infinite-valued states and -inf on
    flat segments (admissible only at the top of the grid).
    """
    neg = v.neg_log()
    x = v.grid.points
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out = nm.log_diff_exp(neg[:-1], neg[1:]) - np.log(np.diff(x))
    # two adjacent -inf values: the whole segment is forbidden, slope +inf
    both_inf = ~np.isfinite(neg[:-1]) & (neg[:-1] > 0)
    out = np.where(both_inf, np.inf, out)
    return out


@dataclass
class PeriodPolicy:
    """Optimal one-period controls for every grid budget at one age.

    log_c is the log consumption amount. For non-terminal ages, pay_lo and
    edges_slog describe the payoff step function of the uniform market
    coordinate: budget row b moves to grid state pay_lo[b] + k when the slog
    of the draw lands between edges_slog[b][k] and edges_slog[b][k+1] (draws
    outside the stored window, total mass below the truncation level, clamp
    to the nearest stored state). Infeasible budgets carry NaN controls.
    """

    log_eta: np.ndarray
    log_c: np.ndarray
    pay_lo: np.ndarray
    edges_slog: list
    terminal: bool = False

    def n_budgets(self) -> int:
        return int(self.log_c.size)

    def feasible(self) -> np.ndarray:
        return ~np.isnan(self.log_c)

    def next_state(self, b: int, slog_draws: np.ndarray) -> np.ndarray:
        """Grid indices after one period, starting from budget index b."""
        if self.terminal:
            raise ValueError("terminal period has no continuation")
        edges = self.edges_slog[b]
        if edges is None:
            raise ValueError(f"budget index {b} is infeasible")
        k = np.searchsorted(edges, slog_draws, side="left") - 1
        return self.pay_lo[b] + np.clip(k, 0, edges.size - 2)


@dataclass
class PolicyTable:
    """Solved decumulation problem: per-age value layers and period policies
    on one shared wealth grid."""

    grid: WealthGrid
    market: MarketParams
    prefs: EkmParams
    mortality: MortalityTable
    layers: list
    policies: list

    @property
    def horizon(self) -> int:
        return len(self.layers)

    def start_index(self, w0: float) -> int:
        """Snap initial wealth down to the grid (conservative) and check that
        the snapped state can fund an admissible plan."""
        x = self.grid.points
        k = int(np.searchsorted(x, w0, side="right") - 1)
        if k < 0:
            raise InfeasibleStartError(
                f"initial wealth {w0} lies below the grid minimum {x[0]}"
            )
        if not np.isfinite(self.layers[0].nlv[k]):
            raise InfeasibleStartError(
                f"initial wealth {w0} cannot fund any admissible plan"
            )
        return k

    def value_nlv(self, w0: float) -> float:
        """Solver value (nlv encoding) at the snapped start state."""
        return float(self.layers[0].nlv[self.start_index(w0)])


@dataclass
class SolveResult:
    policy: PolicyTable
    refinement_grids: list
    refinement_values: list  # per refinement: (horizon, grid size) nlv matrix
    refinement_deltas: list  # max relative value change at shared nodes


def _masked_logsumexp(terms: np.ndarray, extra=None) -> np.ndarray:
    """Row-wise logsumexp over (B, K) terms (with -inf as missing), optionally
    including one extra per-row term."""
    if extra is not None:
        terms = np.concatenate([terms, np.asarray(extra)[:, None]], axis=1)
    m = np.max(terms, axis=1)
    out = m.copy()
    ok = np.isfinite(m)
    if np.any(ok):
        t = terms[ok] - m[ok, None]
        out[ok] = m[ok] + np.log(np.sum(np.exp(t), axis=1))
    return out


class _PeriodProblem:
    """One backward-induction step, vectorized across all grid budgets."""

    def __init__(
        self,
        v_next: ValueLayer,
        survival: float,
        m: MarketParams,
        p: EkmParams,
        trunc_scale: float = 1.0,
        warm_eta: np.ndarray | None = None,
    ):
        self.warm_eta = warm_eta
        self.v_next = v_next
        self.s = float(survival)
        self.m = m
        self.p = p
        self.x = v_next.grid.points
        self.n = self.x.size
        self.log_x = np.log(self.x)
        self.neg = v_next.neg_log()
        self.scale = m.excess_scale
        self.log_s = math.log(self.s) if self.s > 0.0 else -math.inf
        self.log_1ms = math.log1p(-self.s) if self.s < 1.0 else -math.inf
        self.log_alpha = math.log(p.alpha)
        self.log_dt = math.log(m.dt)
        self.rdt = m.r * m.dt

        finite = np.isfinite(v_next.nlv)
        if not np.any(finite):
            raise SolverError("continuation value is -inf everywhere")
        self.first_finite = int(np.argmax(finite))

        # floating-point noise can wobble chord slopes where the value is
        # nearly flat; the dual construction needs the concave hull, so clip
        # slopes to be nonincreasing (a conservative, noise-scale change)
        self.slopes = np.minimum.accumulate(dual_slopes(v_next))
        # ascending key for window searches: t(edge j) = c + neg_slope[j]
        self.neg_slope = -self.slopes

        # breakpoint truncation level: eps = 1e-10 / max finite |v|, capped on
        # both sides. The shock-space window uses the Gaussian-equivalent
        # width sqrt(2 |log eps|) >= |ndtri(eps)|, itself capped at 12: beyond
        # that the Gaussian tail dominates any value growth along the dual
        # slopes, so truncation error stays far below relative precision even
        # when eps itself underflows.
        if trunc_scale <= 0.0:
            raise ValueError("trunc_scale must be positive")
        log_eps = (
            math.log(trunc_scale) - 10.0 * LOG10 + float(v_next.nlv[self.first_finite])
        )
        self.log_eps = min(log_eps, -7.0 * LOG10)
        self.z_eps = -math.sqrt(2.0 * min(-self.log_eps, 45.0))
        if self.scale > 0.0:
            self.tau_lo = self.scale * (self.z_eps + 0.5 * self.scale)
            self.tau_hi = self.scale * (-self.z_eps + 0.5 * self.scale)
        else:
            self.tau_lo = self.tau_hi = 0.0

    # -- window machinery ---------------------------------------------------

    def _windows(self, c: np.ndarray):
        """Active payoff index range [p_lo, p_hi] per budget, per the
        truncation remark (edges outside carry negligible mass)."""
        k_lo = np.searchsorted(self.neg_slope, self.tau_lo - c, side="left")
        k_hi = np.searchsorted(self.neg_slope, self.tau_hi - c, side="right")
        p_lo = np.maximum(k_lo - 1, 0)
        p_hi = np.minimum(k_hi, self.n - 1)
        return p_lo, p_hi

    def _edge_z(self, c: np.ndarray, p_lo: np.ndarray, width: int):
        """Shock-space positions of the payoff breakpoints in the window.

        Edge 0 and edge n map to -/+inf (the payoff floor and ceiling)."""
        edge = p_lo[:, None] + np.arange(width + 1)[None, :]
        j = np.clip(edge - 1, 0, self.n - 2)
        t_val = c[:, None] + self.neg_slope[j]
        if self.scale > 0.0:
            with np.errstate(invalid="ignore"):
                z = -0.5 * self.scale + t_val / self.scale
        else:
            z = np.where(t_val >= 0.0, np.inf, -np.inf)
        z = np.where(edge == 0, -np.inf, np.where(edge >= self.n, np.inf, z))
        return edge, z

    def evaluate(self, log_eta: np.ndarray, want_edges: bool = False):
        """A, log C, log w and the breakpoint window for a vector of
        candidate multipliers (one per budget row)."""
        c = log_eta - self.rdt
        p_lo, p_hi = self._windows(c)
        width = int(np.max(p_hi - p_lo)) + 1
        edge, z_u = self._edge_z(c, p_lo, width)

        pay = edge[:, :-1]  # payoff index per slot
        valid = pay <= p_hi[:, None]
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            if self.scale > 0.0:
                log_du = nm.log_norm_mass(z_u[:, :-1], z_u[:, 1:])
                log_dq = nm.log_norm_mass(
                    z_u[:, :-1] + self.scale, z_u[:, 1:] + self.scale
                )
            else:
                log_du = np.where(z_u[:, 1:] > z_u[:, :-1], 0.0, -np.inf)
                log_dq = log_du
        mass = valid & (log_du > -np.inf)
        neg_pay = self.neg[np.clip(pay, 0, self.n - 1)]
        a_terms = np.where(mass, self.log_s + neg_pay + log_du, -np.inf)
        a_val = _masked_logsumexp(a_terms, np.full(c.size, self.log_1ms))

        log_c_amt = (log_eta - self.log_dt - a_val - self.log_alpha) / (
            self.p.rho - 1.0
        )
        w_terms = np.where(
            valid & (log_dq > -np.inf),
            self.log_s - self.rdt + self.log_x[np.clip(pay, 0, self.n - 1)] + log_dq,
            -np.inf,
        )
        log_w = _masked_logsumexp(w_terms, log_c_amt)
        out = {
            "a": a_val,
            "log_c": log_c_amt,
            "log_w": log_w,
            "p_lo": p_lo,
            "p_hi": p_hi,
        }
        if want_edges:
            if self.scale > 0.0:
                with np.errstate(invalid="ignore"):
                    slog_u = nm.slog_norm_cdf(z_u)
            else:
                slog_u = np.where(z_u > 0, np.inf, -np.inf)
            slog_u = np.where(
                edge == 0, -np.inf, np.where(edge >= self.n, np.inf, slog_u)
            )
            out["slog_u"] = slog_u
        return out

    # -- root finding ---------------------------------------------------------

    def _initial_brackets(self, idx: np.ndarray, boundary: float):
        """Per-budget multiplier brackets guaranteeing a sign change.

        From log eta = (rho-1) log C + log dt + A + log alpha with A confined
        between its best and worst continuation mixes: the low end forces
        C >= 2x (so w > x), the high end forces C below half the headroom
        above the minimum budget while concentrating the payoff at the grid
        floor. The multiplier scale grows with the continuation value's
        magnitude, so fixed bounds cannot work.
        """
        finite_neg = self.neg[np.isfinite(self.v_next.nlv)]
        a_lo = np.logaddexp(self.log_1ms, self.log_s + finite_neg.min())
        a_hi = np.logaddexp(self.log_1ms, self.log_s + finite_neg.max())
        rho1 = self.p.rho - 1.0
        log_x_b = self.log_x[idx]
        lo = np.minimum(
            -ETA_BRACKET_START,
            rho1 * (nm.LOG2 + log_x_b) + self.log_dt + a_lo + self.log_alpha,
        ) - 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            gap = nm.log_diff_exp(log_x_b, np.full_like(log_x_b, boundary))
        finite_slopes = self.slopes[np.isfinite(self.slopes)]
        slope_cap = float(finite_slopes.max()) if finite_slopes.size else 0.0
        # shock width pushing all but ~gap/4 of the payoff price to the floor
        z_need = np.sqrt(
            2.0
            * np.clip(
                math.log(4.0 * self.n * self.x[-1]) - gap, 0.0, 5000.0
            )
        )
        hi = np.maximum.reduce(
            [
                np.full_like(lo, ETA_BRACKET_START),
                self.rdt + slope_cap + self.scale * (z_need + 0.5 * self.scale) + 1.0,
                rho1 * (gap - 2.0 * nm.LOG2) + self.log_dt + a_hi + self.log_alpha,
            ]
        ) + 1.0
        return lo, hi

    def solve_budgets(self):
        """Solve the one-period problem at every feasible grid budget."""
        n = self.n
        log_budget = self.log_x
        boundary = self.log_s - self.rdt + self.log_x[self.first_finite]
        feasible = log_budget > boundary

        nlv_new = np.full(n, -np.inf)
        log_eta_out = np.full(n, np.nan)
        log_c_out = np.full(n, np.nan)
        pay_lo_out = np.full(n, -1, dtype=int)
        edges_out: list = [None] * n

        idx = np.where(feasible)[0]
        if idx.size == 0:
            raise SolverError("no feasible budget on the grid at this age")
        target = log_budget[idx]

        lo, hi = self._initial_brackets(idx, boundary)
        if self.warm_eta is not None:
            # nested refinement: the coarse grid's multipliers bracket the
            # fine roots tightly; keep derived brackets where they do not
            warm = self.warm_eta[idx]
            w_ok = np.isfinite(warm)
            w_lo = np.where(w_ok, warm - 0.5, lo)
            w_hi = np.where(w_ok, warm + 0.5, hi)
            g_wlo = self.evaluate(w_lo)["log_w"] - target
            g_whi = self.evaluate(w_hi)["log_w"] - target
            good = w_ok & (g_wlo > 0.0) & (g_whi < 0.0)
            lo = np.where(good, w_lo, lo)
            hi = np.where(good, w_hi, hi)
        g_lo = self.evaluate(lo)["log_w"] - target
        g_hi = self.evaluate(hi)["log_w"] - target
        limit = max(ETA_BRACKET_LIMIT, float(np.max(np.abs(np.concatenate([lo, hi])))))
        for _ in range(16):
            grow_lo = g_lo <= 0.0
            grow_hi = g_hi >= 0.0
            if not (np.any(grow_lo) or np.any(grow_hi)):
                break
            span = np.maximum(hi - lo, 1.0)
            lo = np.where(grow_lo, np.maximum(lo - span, -8 * limit), lo)
            hi = np.where(grow_hi, np.minimum(hi + span, 8 * limit), hi)
            g_lo = self.evaluate(lo)["log_w"] - target
            g_hi = self.evaluate(hi)["log_w"] - target
        if np.any(g_lo <= 0.0) or np.any(g_hi >= 0.0):
            row = int(np.argmax((g_lo <= 0.0) | (g_hi >= 0.0)))
            raise SolverError(
                f"dual bracket failed at budget x={self.x[idx[row]]:.6g}: "
                f"log w over eta bracket [{lo[row]:.4g}, {hi[row]:.4g}] spans "
                f"[{g_hi[row] + target[row]:.6g}, {g_lo[row] + target[row]:.6g}], "
                f"budget log {target[row]:.6g} not straddled"
            )

        # lock-step bisection: G(lo) > 0 > G(hi) is preserved throughout;
        # converged rows drop out of the evaluation batch. Width below one
        # ulp of the multiplier magnitude buys nothing (the budget equation
        # itself is computed from differences at that scale).
        active = np.arange(idx.size)
        for _ in range(200):
            if active.size == 0:
                break
            mid = 0.5 * (lo[active] + hi[active])
            g_mid = self.evaluate(mid)["log_w"] - target[active]
            pos = g_mid > 0.0
            lo[active] = np.where(pos, mid, lo[active])
            hi[active] = np.where(pos, hi[active], mid)
            floor = np.maximum(1e-13, 4e-16 * np.abs(lo[active]))
            active = active[(hi[active] - lo[active]) >= floor]

        log_eta = 0.5 * (lo + hi)
        out = self.evaluate(log_eta)
        # residual beyond tolerance means the bisection landed on a jump
        # (window transition between states with astronomical value gaps, or
        # a dual-slope tie in a driftless market); the closed-form candidates
        # below cover those regimes, so the row is just not a champion yet
        residual = np.abs(out["log_w"] - target)
        champ_value = self._values_from(out)
        champ_value = np.where(
            residual <= self._root_tol(out["a"], 1e-9), champ_value, -np.inf
        )
        champ_eta = log_eta.copy()

        # the budget equation is not monotone in the multiplier wherever the
        # consumption response to a dual-slope crossing outweighs the payoff
        # price step, so several roots with different values can coexist.
        # Enumerate closed-form pinned-payoff candidates plus probes across
        # each transition zone, refine every bracketed sign change, and keep
        # the best-value root per budget.
        cand_rows, cand_eta = self._candidate_probes(idx, target)
        if cand_rows.size:
            c_out = self.evaluate(cand_eta)
            c_g = c_out["log_w"] - target[cand_rows]
            c_value = np.where(
                np.abs(c_g) <= self._root_tol(c_out["a"], 1e-10),
                self._values_from(c_out),
                -np.inf,
            )
            self._absorb(champ_value, champ_eta, cand_rows, cand_eta, c_value)

            r_rows, r_eta = self._refine_brackets(cand_rows, cand_eta, c_g, target)
            if r_rows.size:
                r_out = self.evaluate(r_eta)
                r_value = np.where(
                    np.abs(r_out["log_w"] - target[r_rows])
                    <= self._root_tol(r_out["a"], 1e-9),
                    self._values_from(r_out),
                    -np.inf,
                )
                self._absorb(champ_value, champ_eta, r_rows, r_eta, r_value)

        out = self.evaluate(champ_eta, want_edges=True)
        value = self._values_from(out)
        for row in range(idx.size):
            b = int(idx[row])
            if not np.isfinite(champ_value[row]):
                if self.scale == 0.0:
                    self._resolve_tie_row(
                        b, row, target, log_eta, nlv_new, log_eta_out,
                        log_c_out, pay_lo_out, edges_out,
                    )
                    continue
                raise SolverError(
                    f"no admissible budget root at x={self.x[b]:.6g}"
                )
            nlv_new[b] = value[row]
            log_eta_out[b] = champ_eta[row]
            log_c_out[b] = out["log_c"][row]
            lo_p, hi_p = int(out["p_lo"][row]), int(out["p_hi"][row])
            edges = out["slog_u"][row, : hi_p - lo_p + 2].astype(float).copy()
            # drop zero-mass payoffs at the window ends so sampling never
            # lands on a state the policy assigns no probability
            while edges.size > 2 and edges[1] == edges[0]:
                edges = edges[1:]
                lo_p += 1
            while edges.size > 2 and edges[-1] == edges[-2]:
                edges = edges[:-1]
            pay_lo_out[b] = lo_p
            edges_out[b] = edges
        return nlv_new, PeriodPolicy(
            log_eta=log_eta_out,
            log_c=log_c_out,
            pay_lo=pay_lo_out,
            edges_slog=edges_out,
        )

    @staticmethod
    def _root_tol(a_val: np.ndarray, floor: float) -> np.ndarray:
        """Budget-residual acceptance tolerance.

        The multiplier rides on top of the continuation magnitude (log eta =
        A + moderate), so recovering their difference costs one ulp of |A|;
        at astronomical value scales that floor, not 1e-10, is the honest
        attainable precision.
        """
        return np.maximum(floor, 4e-16 * np.abs(a_val))

    @staticmethod
    def _absorb(champ_value, champ_eta, rows, etas, values):
        """Fold candidate roots into the per-row champions (max value)."""
        order = np.argsort(values, kind="stable")
        rows, etas, values = rows[order], etas[order], values[order]
        better = values > champ_value[rows]
        champ_value[rows[better]] = values[better]
        champ_eta[rows[better]] = etas[better]

    def _values_from(self, out) -> np.ndarray:
        """nlv value alpha u(C) dt - A at evaluated multiplier rows."""
        c_amt = np.exp(out["log_c"])
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            util = period_utility(np.where(c_amt > 0, c_amt, 1.0), self.p)
            util = np.where(c_amt > 0, util, -np.inf)
        return self.p.alpha * util * self.m.dt - out["a"]

    def _candidate_probes(self, idx: np.ndarray, target: np.ndarray):
        """Candidate multipliers per budget row.

        For each payoff state k affordable within the budget, the closed-form
        multiplier pinning the payoff at k is log eta = log alpha +
        (rho-1) log(x_b - price_k) + log dt + A_k. Candidates whose multiplier
        lands in or near the segment (anchors[k], anchors[k-1]) are kept,
        together with probe offsets spanning the Gaussian transition zones of
        the neighbouring anchors, so both pinned and mixed roots get found.
        """
        neg = self.neg
        n = self.n
        anchors = self.rdt + self.slopes
        seg_lo = np.concatenate([anchors, [-np.inf]])
        seg_hi = np.concatenate([[np.inf], anchors])
        slop = 2.0 * self.scale + 0.1
        if self.scale > 0.0:
            offsets = self.scale * np.array([-1.0, 1.0, -2.5, 2.5, -5.0, 5.0])
        else:
            offsets = np.empty(0)

        a_k = np.logaddexp(self.log_1ms, self.log_s + neg)
        price = self.log_s - self.rdt + self.log_x
        rho1 = self.p.rho - 1.0
        # consumption expansion factor when the payoff drops one state across
        # edge j; a transition zone can only hold extra roots when that
        # expansion outweighs the payoff price step (with a safety factor)
        with np.errstate(invalid="ignore", over="ignore"):
            jump = np.expm1(np.maximum(a_k[:-1] - a_k[1:], 0.0) / (1.0 - self.p.rho))
        price_step = math.exp(self.log_s - self.rdt) * np.diff(self.x)

        rows, etas = [], []
        for k in range(n):
            if not np.isfinite(a_k[k]):
                continue
            with np.errstate(invalid="ignore", divide="ignore"):
                ok = target > price[k]
                if not np.any(ok):
                    continue
                log_c = nm.log_diff_exp(
                    np.maximum(target, price[k]), np.full_like(target, price[k])
                )
            le = self.log_alpha + rho1 * log_c + self.log_dt + a_k[k]
            keep = ok & (le > seg_lo[k] - slop) & (le < seg_hi[k] + slop)
            if not np.any(keep):
                continue
            base_rows = np.where(keep)[0]
            rows.append(base_rows)
            etas.append(le[keep])
            if offsets.size and k < n - 1:
                c_amt = np.exp(log_c[keep])
                wiggly = 2.0 * c_amt * jump[k] > price_step[k]
                if np.any(wiggly):
                    zone_rows = base_rows[wiggly]
                    zone_eta = anchors[k] + offsets
                    rows.append(np.repeat(zone_rows, offsets.size))
                    etas.append(np.tile(zone_eta, zone_rows.size))
        if not rows:
            return np.empty(0, dtype=int), np.empty(0)
        return np.concatenate(rows), np.concatenate(etas)

    def _refine_brackets(self, rows, etas, g, target):
        """Bisect every sign change between consecutive probes of one budget
        row; each bracket holds at least one further root."""
        order = np.lexsort((etas, rows))
        rows, etas, g = rows[order], etas[order], g[order]
        same_row = rows[1:] == rows[:-1]
        flip = same_row & (np.sign(g[1:]) != np.sign(g[:-1]))
        left = np.where(flip)[0]
        if left.size == 0:
            return np.empty(0, dtype=int), np.empty(0)
        b_rows = rows[left]
        lo, hi = etas[left].copy(), etas[left + 1].copy()
        g_lo = g[left].copy()
        tgt = target[b_rows]
        active = np.arange(b_rows.size)
        for _ in range(90):
            if active.size == 0:
                break
            mid = 0.5 * (lo[active] + hi[active])
            g_mid = self.evaluate(mid)["log_w"] - tgt[active]
            same = np.sign(g_mid) == np.sign(g_lo[active])
            lo[active] = np.where(same, mid, lo[active])
            g_lo[active] = np.where(same, g_mid, g_lo[active])
            hi[active] = np.where(same, hi[active], mid)
            floor = np.maximum(1e-13, 4e-16 * np.abs(lo[active]))
            active = active[(hi[active] - lo[active]) >= floor]
        return b_rows, 0.5 * (lo + hi)

    def _resolve_tie_row(
        self, b, row, target, log_eta, nlv_new, log_eta_out,
        log_c_out, pay_lo_out, edges_out,
    ):
        """Driftless market: when no exact root exists, the budget falls on a
        jump across a dual slope tie; split the payoff mass across the two
        adjacent grid states (the value is linear on that segment, so any
        split meeting the budget is a Kuhn-Tucker point)."""
        le = float(log_eta[row])
        c = le - self.rdt
        j_star = int(np.argmin(np.abs(c + self.neg_slope)))
        if j_star + 1 >= self.n:
            raise SolverError(f"tie at the top of the grid for budget {b}")
        theta_lo, theta_hi = 0.0, 1.0
        g_lo = self._tie_log_w(le, j_star, theta_lo) - target[row]
        g_hi = self._tie_log_w(le, j_star, theta_hi) - target[row]
        if not (g_lo > 0.0 > g_hi):
            raise SolverError(
                f"tie split bracket failed at budget x={self.x[b]:.6g} "
                f"(endpoints {g_lo:.3g}, {g_hi:.3g})"
            )
        for _ in range(120):
            mid = 0.5 * (theta_lo + theta_hi)
            if self._tie_log_w(le, j_star, mid) - target[row] > 0.0:
                theta_lo = mid
            else:
                theta_hi = mid
        theta = 0.5 * (theta_lo + theta_hi)
        a_val, log_c_amt, _ = self._tie_parts(le, j_star, theta)
        c_amt = math.exp(log_c_amt)
        value = (
            self.p.alpha * float(period_utility(c_amt, self.p)) * self.m.dt
            - a_val
        )
        nlv_new[b] = value
        log_eta_out[b] = le
        log_c_out[b] = log_c_amt
        pay_lo_out[b] = j_star
        edges_out[b] = np.array([-np.inf, nm.prob_to_slog(theta), np.inf])

    def _tie_parts(self, log_eta: float, j: int, theta: float):
        with np.errstate(divide="ignore"):
            log_th = math.log(theta) if theta > 0 else -math.inf
            log_1mth = math.log1p(-theta) if theta < 1 else -math.inf
        a_val = nm.logsumexp(
            [
                self.log_1ms,
                self.log_s + log_th + self.neg[j],
                self.log_s + log_1mth + self.neg[j + 1],
            ]
        )
        log_c_amt = (log_eta - self.log_dt - a_val - self.log_alpha) / (
            self.p.rho - 1.0
        )
        log_w = nm.logsumexp(
            [
                log_c_amt,
                self.log_s - self.rdt + self.log_x[j] + log_th,
                self.log_s - self.rdt + self.log_x[j + 1] + log_1mth,
            ]
        )
        return a_val, log_c_amt, log_w

    def _tie_log_w(self, log_eta: float, j: int, theta: float) -> float:
        return self._tie_parts(log_eta, j, theta)[2]


def one_period_step(
    v_next: ValueLayer,
    survival: float,
    m: MarketParams,
    p: EkmParams,
    trunc_scale: float = 1.0,
    warm_eta: np.ndarray | None = None,
):
    """Solve one backward step: value layer and period policy at the earlier
    age, for every budget on the continuation grid."""
    if not 0.0 <= survival <= 1.0:
        raise ValueError(f"survival must lie in [0, 1], got {survival}")
    problem = _PeriodProblem(v_next, survival, m, p, trunc_scale, warm_eta)
    nlv_new, policy = problem.solve_budgets()
    layer = ValueLayer(grid=v_next.grid, nlv=nlv_new)
    layer.validate()
    return layer, policy


def _warm_eta_from(prev: "PolicyTable | None", t: int, grid: WealthGrid):
    """Interpolate a coarser refinement's multipliers onto this grid."""
    if prev is None:
        return None
    coarse = prev.policies[t]
    if coarse.terminal:
        return None
    ok = np.isfinite(coarse.log_eta)
    if ok.sum() < 2:
        return None
    src_x = np.log(prev.grid.points[ok])
    warm = np.interp(
        np.log(grid.points), src_x, coarse.log_eta[ok], left=np.nan, right=np.nan
    )
    return warm


def backward_induction(
    grid: WealthGrid,
    table: MortalityTable,
    m: MarketParams,
    p: EkmParams,
    trunc_scale: float = 1.0,
    warm_from: "PolicyTable | None" = None,
) -> PolicyTable:
    """Solve every age from the certain-death terminal layer back to
    retirement on one grid."""
    horizon = table.horizon
    layers = [None] * horizon
    policies = [None] * horizon
    layers[-1] = terminal_layer(grid, p, m.dt)
    policies[-1] = PeriodPolicy(
        log_eta=np.full(grid.size, np.nan),
        log_c=np.log(grid.points),
        pay_lo=np.full(grid.size, -1, dtype=int),
        edges_slog=[None] * grid.size,
        terminal=True,
    )
    for t in range(horizon - 2, -1, -1):
        layers[t], policies[t] = one_period_step(
            layers[t + 1], float(table.survival[t]), m, p, trunc_scale,
            warm_eta=_warm_eta_from(warm_from, t, grid),
        )
    return PolicyTable(
        grid=grid, market=m, prefs=p, mortality=table,
        layers=layers, policies=policies,
    )


def default_grid(p: EkmParams, initial_wealth: float, n: int = 128) -> WealthGrid:
    """Geometric grid covering everything from deep scarcity to wealth far
    above any plausible start."""
    x_min = 1e-3 * p.a
    x_max = max(50.0, 20.0 * initial_wealth)
    return WealthGrid.geometric(x_min, x_max, n)


def relative_value_change(nlv_old: np.ndarray, nlv_new: np.ndarray) -> np.ndarray:
    """|v_new - v_old| / |v_old| expressed through the nlv encoding:
    |exp(-(nlv_new - nlv_old)) - 1|."""
    with np.errstate(invalid="ignore", over="ignore"):
        out = np.abs(np.expm1(-(np.asarray(nlv_new) - np.asarray(nlv_old))))
    both_inf = ~np.isfinite(nlv_old) & ~np.isfinite(nlv_new)
    return np.where(both_inf, 0.0, out)


def solve_decumulation(
    table: MortalityTable,
    m: MarketParams,
    p: EkmParams,
    base_grid: WealthGrid,
    refinements: int = 2,
    early_stop_tol: float | None = 1e-4,
    trunc_scale: float = 1.0,
) -> SolveResult:
    """Backward induction on a nested schedule of grids.

    Values are monotone nondecreasing across refinements (each refined layer
    is a tighter lower approximation of the true value). Stops early once the
    retirement-age value moves by less than ``early_stop_tol`` relative at
    shared nodes, unless ``early_stop_tol`` is None.
    """
    grids = [base_grid]
    for _ in range(refinements):
        grids.append(grids[-1].refined())

    result_policy = None
    snapshot_grids: list = []
    snapshots: list = []
    deltas: list = []
    prev = None
    for grid in grids:
        policy_table = backward_induction(
            grid, table, m, p, trunc_scale, warm_from=result_policy
        )
        values = np.stack([layer.nlv for layer in policy_table.layers])
        snapshot_grids.append(grid)
        snapshots.append(values)
        result_policy = policy_table
        if prev is not None:
            prev_grid, prev_values = prev
            shared = np.searchsorted(grid.points, prev_grid.points)
            fine_vals = values[:, shared]
            # refinement can move the feasibility boundary, flipping shared
            # nodes from -inf to finite; convergence is only meaningful on
            # nodes feasible in both passes
            both = np.isfinite(prev_values) & np.isfinite(fine_vals)
            delta = float(
                np.max(
                    np.where(
                        both, relative_value_change(prev_values, fine_vals), 0.0
                    )
                )
            )
            deltas.append(delta)
            if early_stop_tol is not None and delta < early_stop_tol:
                break
        prev = (grid, values)
    return SolveResult(
        policy=result_policy,
        refinement_grids=snapshot_grids,
        refinement_values=snapshots,
        refinement_deltas=deltas,
    )


def budget_identity_gap(policy: PolicyTable, t: int) -> float:
    """Max relative gap of C + s e^{-r dt} sum x_k dQ_k against the budget,
    recomputed from the emitted policy at age index t."""
    per = policy.policies[t]
    if per.terminal:
        c = np.exp(per.log_c)
        return float(np.max(np.abs(c / policy.grid.points - 1.0)))
    m = policy.market
    s = float(policy.mortality.survival[t])
    scale = m.excess_scale
    gaps = []
    for b in range(per.n_budgets()):
        edges = per.edges_slog[b]
        if edges is None:
            continue
        u = np.array([nm.slog_to_prob(float(e)) for e in edges])
        if scale > 0.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                z = nm.norm_ppf(u)
            slog_q = nm.slog_norm_cdf(z + scale)
            slog_q = np.where(u <= 0.0, -np.inf, np.where(u >= 1.0, np.inf, slog_q))
        else:
            slog_q = np.array([nm.prob_to_slog(float(v)) for v in u])
        log_dq = nm.slog_interval_log(slog_q[:-1], slog_q[1:])
        pays = per.pay_lo[b] + np.arange(edges.size - 1)
        terms = np.where(
            log_dq > -np.inf,
            math.log(s) - m.r * m.dt + np.log(policy.grid.points[pays]) + log_dq,
            -np.inf,
        )
        log_w = float(_masked_logsumexp(terms[None, :], [per.log_c[b]])[0])
        gaps.append(abs(math.expm1(log_w - math.log(policy.grid.points[b]))))
    return float(max(gaps)) if gaps else 0.0


def dense_eta_scan(
    v_next: ValueLayer,
    survival: float,
    m: MarketParams,
    p: EkmParams,
    lo: float = -ETA_BRACKET_START,
    hi: float = ETA_BRACKET_START,
    n: int = 2001,
):
    """Diagnostic: log w(eta) on a dense multiplier grid (uniqueness of the
    budget root is not guaranteed by theory, only located by bisection)."""
    problem = _PeriodProblem(v_next, survival, m, p)
    etas = np.linspace(lo, hi, n)
    log_w = np.array(
        [float(problem.evaluate(np.array([e]))["log_w"][0]) for e in etas]
    )
    return etas, log_w
