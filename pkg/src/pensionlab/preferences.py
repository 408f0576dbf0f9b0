"""Exponential Kihlstrom-Mirman preferences.

The gain of a consumption plan is E[-exp(-alpha * sum_t u(C_t) dt)] with
period utility u(c) = c^rho / rho - a^rho / rho, rho < 0. Risk aversion
(alpha), satiation (rho) and the adequacy level (a) are the triple a user
steers. Because the gain is a negative exponential, every aggregate here is
carried in log space: the estimator returns L = log(-gain) plus the relative
standard error of the underlying sample mean.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .actuarial import MortalityTable

# parameter lattice offered by the interactive product (solver itself only
# needs alpha > 0, rho < 0, a > 0)
SWEEP_BOX = {
    "alpha": (1e-7, 1e-2),
    "rho": (-2.0, -0.1),
    "a": (0.1, 1.0),
}


@dataclass(frozen=True)
class EkmParams:
    """Preference triple: risk aversion alpha > 0, satiation rho < 0,
    adequacy level a > 0 (in final-salary units)."""

    alpha: float = 5e-5
    rho: float = -2.0
    a: float = 0.4

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.rho >= 0.0:
            raise ValueError(f"rho must be negative, got {self.rho}")
        if self.a <= 0.0:
            raise ValueError(f"adequacy level must be positive, got {self.a}")

    def in_sweep_box(self) -> bool:
        return all(
            lo <= getattr(self, k) <= hi for k, (lo, hi) in SWEEP_BOX.items()
        )


def period_utility(c, p: EkmParams):
    """u(c) = c^rho / rho - a^rho / rho; zero at the adequacy level, -inf at
    zero consumption, increasing and strictly concave for rho < 0."""
    c_arr = np.asarray(c, dtype=float)
    if np.any(c_arr < 0.0):
        raise ValueError("consumption must be nonnegative")
    with np.errstate(divide="ignore", over="ignore"):
        out = np.where(
            c_arr > 0.0,
            c_arr ** p.rho / p.rho - p.a ** p.rho / p.rho,
            -np.inf,
        )
    return float(out) if np.ndim(c) == 0 else out


def inv_marginal_log(y, p: EkmParams):
    """log of the inverse marginal utility at log-price y.

    For u'(c) = c^(rho-1) the inverse is c = q^(1/(rho-1)), so in logs this is
    simply y / (rho - 1). Satisfies the limits c -> inf as the price drops to
    zero and c -> 0 as it blows up.
    """
    return np.asarray(y, dtype=float) / (p.rho - 1.0) if np.ndim(y) else y / (p.rho - 1.0)


def inv_marginal_log_power(y, coeff: float, n: float, shift: float = 0.0):
    """log inverse marginal for the general family u(x) = coeff*(x-shift)^n + b.

    Handles the shifted branches without overflow: the unshifted root is
    exp((y - log(coeff*n)) / (n-1)) and the shift is added or subtracted in
    log space. Returns -inf where the root falls at or below a negative shift.
    """
    if coeff * n <= 0.0:
        raise ValueError("coeff * n must be positive for an increasing utility")
    y_arr = np.asarray(y, dtype=float)
    base = (y_arr - math.log(coeff * n)) / (n - 1.0)
    if shift == 0.0:
        out = base
    elif shift > 0.0:
        out = np.logaddexp(base, math.log(shift))
    else:
        log_neg = math.log(-shift)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(
                base > log_neg,
                nm.log_diff_exp(np.maximum(base, log_neg), log_neg),
                -np.inf,
            )
    return float(out) if np.ndim(y) == 0 else out


@dataclass(frozen=True)
class GainEstimate:
    """Monte Carlo gain in log form: the gain itself is -exp(log_neg_gain);
    se_rel is the relative standard error of the sample mean it came from."""

    log_neg_gain: float
    se_rel: float

    @property
    def gain(self) -> float:
        return -math.exp(self.log_neg_gain)


def scenario_log_utilities(
    paths: np.ndarray, table: MortalityTable, p: EkmParams, dt: float = 1.0
) -> np.ndarray:
    """Per-scenario v(s) = logsumexp_t [log w_t - alpha * sum_{j<=t} u(C_j) dt]
    where w_t is the unconditional death-in-year weight."""
    paths = np.asarray(paths, dtype=float)
    if paths.ndim != 2:
        raise ValueError("consumption paths must be a scenarios-by-years matrix")
    if paths.shape[1] != table.horizon:
        raise ValueError(
            f"paths cover {paths.shape[1]} years but the table has {table.horizon}"
        )
    if np.any(paths <= 0.0):
        if np.any(paths < 0.0):
            raise ValueError("negative consumption in paths")
        warnings.warn(
            "zero consumption gives -inf utility; gain collapses to -inf",
            RuntimeWarning,
            stacklevel=2,
        )
    util = period_utility(paths, p)
    accum = np.cumsum(util, axis=1) * (p.alpha * dt)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_w = np.log(table.death_weight)
        terms = np.where(
            table.death_weight[None, :] > 0.0, log_w[None, :] - accum, -np.inf
        )
    m = np.max(terms, axis=1)
    v = m.copy()  # rows with max +/-inf pass straight through
    finite = np.isfinite(m)
    if np.any(finite):
        t_f = terms[finite] - m[finite, None]
        v[finite] = m[finite] + np.log(np.sum(np.exp(t_f), axis=1))
    return v


def estimate_gain(
    paths: np.ndarray, table: MortalityTable, p: EkmParams, dt: float = 1.0
) -> GainEstimate:
    """Estimate the gain over simulated consumption paths.

    Returns L = logsumexp_s v(s) - log N (the gain is -exp(L)) and the
    relative standard error of the sample mean of exp(v), computed with a
    log-domain two-pass variance so nothing overflows.
    """
    v = scenario_log_utilities(paths, table, p, dt)
    n = v.size
    if n < 2:
        raise ValueError("need at least two scenarios for a standard error")
    log_mean = nm.logsumexp(v) - math.log(n)
    if not math.isfinite(log_mean):
        return GainEstimate(log_neg_gain=log_mean, se_rel=math.nan)
    sq = np.array([nm.log_squared_diff_exp(float(vs), log_mean) for vs in v])
    log_var = nm.logsumexp(sq) - math.log(n - 1)
    log_se = 0.5 * log_var - 0.5 * math.log(n)
    return GainEstimate(log_neg_gain=log_mean, se_rel=math.exp(log_se - log_mean))


def compare_gains(
    g_a: GainEstimate, g_b: GainEstimate, tol_factor: float = 0.01
) -> bool:
    """True when |gain_a - gain_b| <= tol_factor * SE(gain_b), in log space.

    With gains -exp(L) and SE(gain_b) = se_rel_b * exp(L_b) this reduces to
    |exp(L_a - L_b) - 1| <= tol_factor * se_rel_b, which never overflows.
    """
    if not (math.isfinite(g_a.log_neg_gain) and math.isfinite(g_b.log_neg_gain)):
        raise ValueError("compare_gains needs finite gain estimates")
    spread = abs(math.expm1(g_a.log_neg_gain - g_b.log_neg_gain))
    return spread <= tol_factor * g_b.se_rel
