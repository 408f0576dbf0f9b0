"""Black-Scholes market: one-period wealth evolution, the risk-neutral CDF of
the abstract uniform market coordinate, and its pricing kernel.

All functions are pure over an immutable :class:`MarketParams` record. The
abstract coordinate U is uniform under the physical measure and has CDF
:func:`risk_neutral_cdf` under the risk-neutral measure, so survival-contingent
payoffs written as step functions of U price through
:func:`log_pricing_kernel`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .numerics import norm_ppf


@dataclass(frozen=True)
class MarketParams:
    """Drift, volatility, risk-free rate (per year) and rebalancing period.

    Defaults are working values for exploration, not calibrated estimates.
    """

    mu: float = 0.05
    sigma: float = 0.2
    r: float = 0.01
    dt: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def excess_scale(self) -> float:
        """Market-price-of-risk scale |mu - r| sqrt(dt) / sigma (>= 0)."""
        return abs(self.mu - self.r) * math.sqrt(self.dt) / self.sigma


def risk_neutral_cdf(z, m: MarketParams):
    """CDF of the uniform market coordinate under the risk-neutral measure:
    Phi(excess_scale + Phi^{-1}(z)). Increasing, with fixed points 0 and 1."""
    z_arr = np.asarray(z, dtype=float)
    if np.any((z_arr < 0.0) | (z_arr > 1.0)):
        raise ValueError("risk_neutral_cdf argument outside [0, 1]")
    scale = m.excess_scale
    if scale == 0.0:
        out = z_arr.copy()
    else:
        with np.errstate(invalid="ignore"):
            out = ndtr(scale + norm_ppf(z_arr))
        out = np.where(z_arr == 0.0, 0.0, np.where(z_arr == 1.0, 1.0, out))
    return float(out) if np.ndim(z) == 0 else out


def log_pricing_kernel(u, m: MarketParams):
    """log of the risk-neutral density of U: -excess_scale^2/2 - excess_scale *
    Phi^{-1}(u). Decreasing in u when the market carries a risk premium."""
    u_arr = np.asarray(u, dtype=float)
    if np.any((u_arr < 0.0) | (u_arr > 1.0)):
        raise ValueError("log_pricing_kernel argument outside [0, 1]")
    scale = m.excess_scale
    with np.errstate(invalid="ignore"):
        out = -0.5 * scale * scale - scale * norm_ppf(u_arr)
    return float(out) if np.ndim(u) == 0 else out


def wealth_step_log(log_w, pi, eps, m: MarketParams):
    """One-period log-wealth update under a fixed weight pi in the risky asset.

    log w' = log w + (pi mu + (1-pi) r - (pi sigma)^2 / 2) dt
             + pi sigma sqrt(dt) eps.
    Wealth stays positive by construction.
    """
    drift = (pi * m.mu + (1.0 - pi) * m.r - 0.5 * (pi * m.sigma) ** 2) * m.dt
    vol = pi * m.sigma * math.sqrt(m.dt)
    return log_w + drift + vol * np.asarray(eps, dtype=float)


def shock_to_uniform(eps, m: MarketParams):
    """Map a standard-normal shock to the abstract uniform coordinate.

    Oriented so that the risk-neutral CDF of the result is exactly
    :func:`risk_neutral_cdf`: U = Phi(eps) when mu >= r, Phi(-eps) otherwise
    (good market outcomes always sit at high U).
    """
    sign = 1.0 if m.mu >= m.r else -1.0
    out = ndtr(sign * np.asarray(eps, dtype=float))
    return float(out) if np.ndim(eps) == 0 else out
