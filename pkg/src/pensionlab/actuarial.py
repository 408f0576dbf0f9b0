"""Mortality data, survival factors, tontine longevity credits and the
adequate-funding level.

Tables hold one row per integer age from retirement to a terminal age where
death is certain, so the planning horizon is always finite. All wealth and
consumption amounts in the package are measured in units of final salary,
which makes the replacement ratio equal to the consumption amount.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .market import MarketParams

# Gompertz-Makeham hazard defaults for the shipped table (ages 65-120)
GM_A = 0.0002
GM_B = 2.7e-6
GM_C = 1.124
DEFAULT_RETIREMENT_AGE = 65
DEFAULT_MAX_AGE = 120


class MortalityDataError(ValueError):
    """Raised when a mortality CSV fails validation."""


def gompertz_makeham_q(age) -> np.ndarray:
    """Annual death probability 1 - exp(-(A + B c^age)) under the default
    Gompertz-Makeham hazard."""
    hazard = GM_A + GM_B * np.power(GM_C, np.asarray(age, dtype=float))
    return -np.expm1(-hazard)


@dataclass(frozen=True)
class MortalityTable:
    """Conditional annual death probabilities from retirement to certain death.

    q[t] is the probability of dying in year ``retirement_age + t`` given
    survival to its start. The final entry must be 1 and no earlier entry may
    be, so unconditional death weights sum to one and wealth dynamics never
    continue past a certain-death year.
    """

    retirement_age: int
    q: np.ndarray
    survival: np.ndarray = field(init=False, repr=False)
    death_weight: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 1 or q.size < 1:
            raise MortalityDataError("mortality table needs at least one year")
        if np.any((q < 0.0) | (q > 1.0)):
            bad = int(np.argmax((q < 0.0) | (q > 1.0)))
            raise MortalityDataError(
                f"death probability outside [0, 1] at age {self.retirement_age + bad}"
            )
        if q[-1] != 1.0:
            raise MortalityDataError(
                f"terminal death probability must be 1, got {q[-1]} at age "
                f"{self.retirement_age + q.size - 1}"
            )
        if q.size > 1 and np.any(q[:-1] >= 1.0):
            bad = int(np.argmax(q[:-1] >= 1.0))
            raise MortalityDataError(
                f"certain death before the terminal age (age {self.retirement_age + bad})"
            )
        q = q.copy()
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        s = 1.0 - q
        alive = np.concatenate([[1.0], np.cumprod(s[:-1])])
        w = q * alive
        for arr in (s, w):
            arr.setflags(write=False)
        object.__setattr__(self, "survival", s)
        object.__setattr__(self, "death_weight", w)

    @property
    def horizon(self) -> int:
        return int(self.q.size)

    @property
    def max_age(self) -> int:
        return self.retirement_age + self.horizon - 1

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.retirement_age, self.max_age + 1)


def load_mortality(path) -> MortalityTable:
    """Load and validate a mortality table from a CSV with header ``age,qx``.

    Ages must be contiguous integers; probabilities are validated by
    :class:`MortalityTable`. Errors carry the offending row number.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header[:2]] != ["age", "qx"]:
            raise MortalityDataError(f"{path}: expected header 'age,qx', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                age = int(row[0])
                qx = float(row[1])
            except (IndexError, ValueError) as exc:
                raise MortalityDataError(f"{path}: malformed row {lineno}: {row}") from exc
            rows.append((lineno, age, qx))
    if not rows:
        raise MortalityDataError(f"{path}: no data rows")
    for (ln_a, age_a, _), (ln_b, age_b, _) in zip(rows, rows[1:]):
        if age_b != age_a + 1:
            raise MortalityDataError(
                f"{path}: ages not contiguous between rows {ln_a} and {ln_b} "
                f"({age_a} -> {age_b})"
            )
    try:
        return MortalityTable(
            retirement_age=rows[0][1], q=np.array([r[2] for r in rows])
        )
    except MortalityDataError as exc:
        raise MortalityDataError(f"{path}: {exc}") from exc


def default_table_path() -> Path:
    return Path(resources.files("pensionlab").joinpath("data/mortality_default.csv"))


def default_table() -> MortalityTable:
    """The shipped Gompertz-Makeham table, ages 65-120 (56 yearly points)."""
    return load_mortality(default_table_path())


def write_default_table(path) -> None:
    """Regenerate the shipped default table from the hazard formula."""
    ages = np.arange(DEFAULT_RETIREMENT_AGE, DEFAULT_MAX_AGE + 1)
    q = gompertz_makeham_q(ages)
    q[-1] = 1.0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["age", "qx"])
        for age, qx in zip(ages, q):
            writer.writerow([int(age), repr(float(qx))])


def tontine_credit(t: int, table: MortalityTable) -> float:
    """Fractional wealth credit q_t / (1 - q_t) paid to period-t survivors.

    Survival-weighted credited wealth is conserved: (1-q)(1 + credit) = 1.
    """
    q = float(table.q[t])
    if q >= 1.0:
        raise ValueError(
            f"tontine credit undefined in the terminal period (q=1 at index {t})"
        )
    return q / (1.0 - q)


def adequate_funding(a: float, m: MarketParams, table: MortalityTable) -> float:
    """Wealth at retirement that sustains consumption ``a`` risk-free with
    tontine credits: a * sum_t exp(-r t dt) * prod_{j<t} s_j."""
    if a <= 0.0:
        raise ValueError(f"adequacy level must be positive, got {a}")
    t = np.arange(table.horizon)
    discount = np.exp(-m.r * m.dt * t)
    alive = np.concatenate([[1.0], np.cumprod(table.survival[:-1])])
    return float(a * np.sum(discount * alive))
