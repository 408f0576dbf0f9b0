"""Log-domain scalar primitives shared by every other module.

All quantities that can overflow or underflow in plain floating point are
kept in one of three encodings:

* plain logs ``log x`` for positive quantities,
* the symmetric probability encoding ``slog`` (see :func:`prob_to_slog`),
* the negative-value encoding ``nlv`` (see :func:`neg_value_to_log`),

with ``-inf`` as the canonical representation of ``log 0`` throughout.
Every function here is pure and safe to call from concurrent workers.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

LOG2 = math.log(2.0)
NEG_INF = float("-inf")


class BracketError(ValueError):
    """Raised when a root bracket shows no sign change after expansion."""

    def __init__(self, msg: str, lo: float, hi: float, f_lo: float, f_hi: float):
        super().__init__(f"{msg} (bracket [{lo}, {hi}], f: [{f_lo}, {f_hi}])")
        self.lo, self.hi = lo, hi
        self.f_lo, self.f_hi = f_lo, f_hi


def logsumexp(terms) -> float:
    """log(sum(exp(terms))) for a non-empty sequence, shift-invariant and
    overflow-free. Terms may include -inf (ignored mass)."""
    t = np.asarray(terms, dtype=float)
    if t.size == 0:
        raise ValueError("logsumexp of an empty sequence")
    m = np.max(t)
    if not np.isfinite(m):
        # all -inf, or a +inf dominates
        return float(m)
    return float(m + np.log(np.sum(np.exp(t - m))))


def logsumexp2(a: float, b: float) -> float:
    """Two-term logsumexp; np.logaddexp with the -inf conventions intact."""
    return float(np.logaddexp(a, b))


def _log1m_exp(d):
    """log(1 - exp(d)) for d <= 0, full relative precision on both ends.

    Near d = 0 the rounding of exp(d) at the 1+d level would destroy the
    difference, so the expm1 form is used there (Maechler's split).
    """
    with np.errstate(invalid="ignore", divide="ignore"):
        small = d > -LOG2  # 1 - e^d < 1/2: cancellation regime
        out = np.where(
            small,
            np.log(-np.expm1(np.where(small, d, -1.0))),
            np.log1p(-np.exp(np.where(small, -1.0, d))),
        )
    return out


def log_diff_exp(a, b):
    """log(exp(a) - exp(b)) for a >= b, i.e. a + log1p(-exp(b - a)).

    Returns -inf when a == b; raises on a < b. Accepts arrays (elementwise).
    """
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    if np.any(a_arr < b_arr):
        raise ValueError("log_diff_exp requires a >= b (negative difference)")
    with np.errstate(invalid="ignore", divide="ignore"):
        d = b_arr - a_arr  # <= 0, possibly nan for (-inf, -inf) or (inf, inf)
        # equal infinite endpoints represent a zero difference
        d = np.where(a_arr == b_arr, -np.inf, d)
        out = a_arr + _log1m_exp(d)
        out = np.where(a_arr == b_arr, -np.inf, out)
    if np.ndim(a) == 0 and np.ndim(b) == 0:
        return float(out)
    return out


def log_squared_diff_exp(a: float, b: float) -> float:
    """log((exp(a) - exp(b))^2) = 2*[max + log1p(-exp(min - max))].

    Symmetric in (a, b); equal arguments give -inf (a genuine zero, not an
    error). Either argument may be -inf but not both.
    """
    if a == b:
        if a == NEG_INF:
            raise ValueError("log_squared_diff_exp(-inf, -inf) is undefined")
        return NEG_INF
    hi, lo = (a, b) if a > b else (b, a)
    return 2.0 * (hi + float(_log1m_exp(np.float64(lo - hi))))


def prob_to_slog(u: float) -> float:
    """Symmetric log encoding of a probability.

    Maps [0, 1] bijectively onto the extended reals: log(2u) for u <= 1/2 and
    -log(2 - 2u) above, so 0 -> -inf, 1/2 -> 0, 1 -> +inf and
    slog(1 - u) == -slog(u).
    """
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"probability outside [0, 1]: {u}")
    if u <= 0.5:
        return math.log(2.0 * u) if u > 0.0 else NEG_INF
    v = 2.0 - 2.0 * u
    return -math.log(v) if v > 0.0 else math.inf


def slog_to_prob(y: float) -> float:
    """Inverse of :func:`prob_to_slog`, exact on both branches."""
    if y <= 0.0:
        return 0.5 * math.exp(y)
    return 1.0 - 0.5 * math.exp(-y)


def log_from_slog(y):
    """log(u) from the slog encoding of u (elementwise)."""
    y = np.asarray(y, dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        out = np.where(y <= 0.0, y - LOG2, np.log1p(-0.5 * np.exp(-y)))
    return out if out.ndim else float(out)


def log1m_from_slog(y):
    """log(1 - u) from the slog encoding of u (elementwise)."""
    return log_from_slog(-np.asarray(y, dtype=float))


def slog_interval_log(y_lo, y_hi):
    """log(u_hi - u_lo) for probabilities given in slog encoding, y_hi >= y_lo.

    Works down to differences of ~1e-300 without cancellation by picking the
    branch in which both endpoints are well represented.
    """
    y_lo = np.asarray(y_lo, dtype=float)
    y_hi = np.asarray(y_hi, dtype=float)
    scalar = y_lo.ndim == 0 and y_hi.ndim == 0
    y_lo, y_hi = np.broadcast_arrays(np.atleast_1d(y_lo), np.atleast_1d(y_hi))
    if np.any(y_hi < y_lo):
        raise ValueError("slog_interval_log requires y_hi >= y_lo")
    out = np.empty(y_lo.shape, dtype=float)

    both_lo = y_hi <= 0.0
    both_hi = y_lo >= 0.0
    straddle = ~(both_lo | both_hi)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        if np.any(both_lo):
            out[both_lo] = log_diff_exp(y_hi[both_lo], y_lo[both_lo]) - LOG2
        if np.any(both_hi):
            out[both_hi] = log_diff_exp(-y_lo[both_hi], -y_hi[both_hi]) - LOG2
        if np.any(straddle):
            # u_hi - u_lo = [(2 u_hi - 1) + (1 - 2 u_lo)] / 2
            hi_part = np.log1p(-np.exp(-y_hi[straddle]))
            lo_part = np.log1p(-np.exp(y_lo[straddle]))
            out[straddle] = np.logaddexp(hi_part, lo_part) - LOG2
    return float(out[0]) if scalar else out


def log_norm_cdf(x):
    """log(Phi(x)), accurate in both tails (elementwise)."""
    out = log_ndtr(np.asarray(x, dtype=float))
    return float(out) if np.ndim(x) == 0 else out


def log_norm_mass(z_lo, z_hi):
    """log(Phi(z_hi) - Phi(z_lo)) for z_hi >= z_lo, stable in both tails.

    Works on the tail whose CDF values are small so the subtraction never
    cancels; the straddling case uses the complement in linear space where
    both tails are moderate.
    """
    z_lo = np.asarray(z_lo, dtype=float)
    z_hi = np.asarray(z_hi, dtype=float)
    scalar = z_lo.ndim == 0 and z_hi.ndim == 0
    z_lo, z_hi = np.broadcast_arrays(np.atleast_1d(z_lo), np.atleast_1d(z_hi))
    out = np.empty(z_lo.shape, dtype=float)
    neg = z_hi <= 0.0
    pos = z_lo >= 0.0
    mid = ~(neg | pos)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        if np.any(neg):
            out[neg] = log_diff_exp(log_ndtr(z_hi[neg]), log_ndtr(z_lo[neg]))
        if np.any(pos):
            out[pos] = log_diff_exp(log_ndtr(-z_lo[pos]), log_ndtr(-z_hi[pos]))
        if np.any(mid):
            out[mid] = np.log1p(-(ndtr(-z_hi[mid]) + ndtr(z_lo[mid])))
    return float(out[0]) if scalar else out


def slog_norm_cdf(x):
    """slog(Phi(x)): log(2 Phi(x)) for x <= 0, -log(2 Phi(-x)) for x > 0."""
    x_arr = np.asarray(x, dtype=float)
    with np.errstate(invalid="ignore"):
        out = np.where(
            x_arr <= 0.0,
            LOG2 + log_ndtr(x_arr),
            -(LOG2 + log_ndtr(-x_arr)),
        )
    return float(out[()]) if np.ndim(x) == 0 else out


def norm_ppf(u):
    """Phi^{-1}(u); endpoints map to -inf/+inf."""
    out = ndtri(np.asarray(u, dtype=float))
    return float(out) if np.ndim(u) == 0 else out


def neg_value_to_log(v: float) -> float:
    """Encode a value v <= 0 as -log(-v) (increasing in v; -inf stays -inf)."""
    if v > 0.0:
        raise ValueError(f"neg_value_to_log requires v <= 0, got {v}")
    if v == 0.0:
        return math.inf
    return -math.log(-v) if v != NEG_INF else NEG_INF


def log_to_neg_value(y: float) -> float:
    """Inverse of :func:`neg_value_to_log`: y -> -exp(-y)."""
    return -math.exp(-y) if y != math.inf else 0.0


def bisect_root(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-12,
    max_expand: int = 0,
    expand_limit: float = math.inf,
) -> float:
    """Deterministic bisection on [lo, hi] with f(lo)*f(hi) <= 0.

    If the initial bracket has no sign change and ``max_expand`` > 0, the
    bracket is grown geometrically about its midpoint up to ``expand_limit``
    before giving up with a :class:`BracketError`. Returns the midpoint of the
    final bracket of width <= tol.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    f_lo, f_hi = f(lo), f(hi)
    expansions = 0
    while f_lo * f_hi > 0.0:
        if expansions >= max_expand:
            raise BracketError("no sign change on bracket", lo, hi, f_lo, f_hi)
        mid = 0.5 * (lo + hi)
        half = 1.5 * max(0.5 * (hi - lo), 1.0)
        lo = max(mid - half, -expand_limit)
        hi = min(mid + half, expand_limit)
        f_lo, f_hi = f(lo), f(hi)
        expansions += 1
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        f_mid = f(mid)
        if f_mid == 0.0:
            return mid
        if f_lo * f_mid < 0.0:
            hi, f_hi = mid, f_mid
        else:
            lo, f_lo = mid, f_mid
    return 0.5 * (lo + hi)
