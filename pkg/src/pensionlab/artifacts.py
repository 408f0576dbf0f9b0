"""Run configuration, persistence of solved policies, and tabular exports.

Config files are JSON documents validated against a schema (unknown keys are
rejected, errors carry JSON-pointer paths) with defaults filled in. Policy
artifacts are version-stamped JSON with a content checksum; floats round-trip
bitwise, with non-finite values encoded as string tokens. Writes are atomic
(write-temp-then-rename).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from .actuarial import MortalityTable, default_table, load_mortality
from .market import MarketParams
from .preferences import SWEEP_BOX, EkmParams
from .simulator import AccumulationConfig, FanDiagram
from .solver import PeriodPolicy, PolicyTable, ValueLayer, WealthGrid

POLICY_FORMAT_VERSION = 1

DEFAULT_CONFIG = {
    "market": {"mu": 0.05, "sigma": 0.2, "r": 0.01, "dt": 1.0},
    "mortality": "default",
    "preferences": {"alpha": 5e-5, "rho": -2.0, "a": 0.4},
    "grid": {"base_size": 128, "refinements": 2, "early_stop_tol": 1e-4},
    "simulation": {"n_scenarios": 100_000, "seed": 20240501},
    "initial_wealth": 12.0,
    "accumulation": None,
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "market": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mu": {"type": "number"},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "r": {"type": "number"},
                "dt": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "mortality": {"type": "string"},
        "preferences": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number"},
                "rho": {"type": "number"},
                "a": {"type": "number"},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "base_size": {"type": "integer", "minimum": 8},
                "refinements": {"type": "integer", "minimum": 0, "maximum": 8},
                "early_stop_tol": {
                    "type": ["number", "null"], "exclusiveMinimum": 0
                },
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_scenarios": {"type": "integer", "minimum": 10},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "initial_wealth": {"type": "number", "exclusiveMinimum": 0},
        "accumulation": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "properties": {
                "start_age": {"type": "integer", "minimum": 18},
                "contribution_rate": {"type": "number", "minimum": 0, "maximum": 1},
                "salary_growth": {"type": "number"},
                "fixed_pi": {
                    "anyOf": [
                        {"type": "number"},
                        {"type": "array", "items": {"type": "number"}},
                    ]
                },
            },
        },
    },
}

_VALIDATOR = Draft202012Validator(CONFIG_SCHEMA)


class ConfigError(ValueError):
    """Configuration failed validation; message carries JSON-pointer paths."""


class ArtifactError(ValueError):
    """A persisted artifact is unreadable, corrupt or from another version."""


def check_sweep_box(prefs: dict, pointer: str = "/preferences") -> None:
    for key, (lo, hi) in SWEEP_BOX.items():
        val = prefs[key]
        if not lo <= val <= hi:
            raise ConfigError(
                f"{pointer}/{key}: {val} outside the supported sweep box "
                f"[{lo}, {hi}]"
            )


def _merge_defaults(raw: dict) -> dict:
    merged = {}
    for key, default in DEFAULT_CONFIG.items():
        if isinstance(default, dict) and isinstance(raw.get(key), dict):
            merged[key] = {**default, **raw[key]}
        elif key in raw:
            merged[key] = raw[key]
        else:
            merged[key] = json.loads(json.dumps(default))
    for key in raw:
        if key not in DEFAULT_CONFIG:
            merged[key] = raw[key]  # will be rejected by the schema
    return merged


@dataclass
class RunConfig:
    """Fully validated run configuration with loaded mortality table."""

    market: MarketParams
    mortality_path: str
    table: MortalityTable
    prefs: EkmParams
    grid_base_size: int
    grid_refinements: int
    early_stop_tol: float | None
    n_scenarios: int
    seed: int
    initial_wealth: float
    accumulation: AccumulationConfig | None
    raw: dict = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "market": {
                "mu": self.market.mu, "sigma": self.market.sigma,
                "r": self.market.r, "dt": self.market.dt,
            },
            "mortality": self.mortality_path,
            "preferences": {
                "alpha": self.prefs.alpha, "rho": self.prefs.rho, "a": self.prefs.a
            },
            "grid": {
                "base_size": self.grid_base_size,
                "refinements": self.grid_refinements,
                "early_stop_tol": self.early_stop_tol,
            },
            "simulation": {"n_scenarios": self.n_scenarios, "seed": self.seed},
            "initial_wealth": self.initial_wealth,
            "accumulation": None
            if self.accumulation is None
            else {
                "start_age": self.accumulation.start_age,
                "contribution_rate": self.accumulation.contribution_rate,
                "salary_growth": self.accumulation.salary_growth,
                "fixed_pi": self.accumulation.fixed_pi
                if np.isscalar(self.accumulation.fixed_pi)
                else list(self.accumulation.fixed_pi),
            },
        }
        return out


def config_from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    merged = _merge_defaults(raw)
    errors = sorted(_VALIDATOR.iter_errors(merged), key=lambda e: list(e.path))
    if errors:
        msgs = []
        for err in errors:
            pointer = "/" + "/".join(str(p) for p in err.path)
            msgs.append(f"{pointer or '/'}: {err.message}")
        raise ConfigError("; ".join(msgs))
    check_sweep_box(merged["preferences"])

    market = MarketParams(**merged["market"])
    mortality = merged["mortality"]
    if mortality == "default":
        table = default_table()
    else:
        path = Path(mortality)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"/mortality: file not found: {path}")
        table = load_mortality(path)
    prefs = EkmParams(**merged["preferences"])
    acc = merged["accumulation"]
    acc_cfg = None
    if acc is not None:
        acc_cfg = AccumulationConfig(
            start_age=acc["start_age"],
            contribution_rate=acc["contribution_rate"],
            salary_growth=acc.get("salary_growth", 0.0),
            fixed_pi=tuple(acc["fixed_pi"])
            if isinstance(acc.get("fixed_pi", 0.6), list)
            else acc.get("fixed_pi", 0.6),
        )
        if acc_cfg.start_age >= table.retirement_age:
            raise ConfigError(
                "/accumulation/start_age: must precede the retirement age "
                f"{table.retirement_age}"
            )
    return RunConfig(
        market=market,
        mortality_path=mortality,
        table=table,
        prefs=prefs,
        grid_base_size=merged["grid"]["base_size"],
        grid_refinements=merged["grid"]["refinements"],
        early_stop_tol=merged["grid"]["early_stop_tol"],
        n_scenarios=merged["simulation"]["n_scenarios"],
        seed=merged["simulation"]["seed"],
        initial_wealth=merged["initial_wealth"],
        accumulation=acc_cfg,
        raw=merged,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(raw, base_dir=path.parent)


# -- float-exact JSON encoding ------------------------------------------------


def _enc(x: float):
    x = float(x)
    if math.isfinite(x):
        return x
    if math.isnan(x):
        return "nan"
    return "inf" if x > 0 else "-inf"


def _dec(x) -> float:
    if isinstance(x, str):
        return {"nan": math.nan, "inf": math.inf, "-inf": -math.inf}[x]
    return float(x)


def _enc_arr(arr) -> list:
    return [_enc(v) for v in np.asarray(arr, dtype=float).ravel()]


def _dec_arr(vals) -> np.ndarray:
    return np.array([_dec(v) for v in vals], dtype=float)


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _checksum(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_policy(policy: PolicyTable, path) -> None:
    """Persist a solved policy table losslessly (bitwise float round-trip)."""
    payload = {
        "format_version": POLICY_FORMAT_VERSION,
        "market": {
            "mu": policy.market.mu, "sigma": policy.market.sigma,
            "r": policy.market.r, "dt": policy.market.dt,
        },
        "preferences": {
            "alpha": policy.prefs.alpha, "rho": policy.prefs.rho,
            "a": policy.prefs.a,
        },
        "retirement_age": policy.mortality.retirement_age,
        "mortality_q": _enc_arr(policy.mortality.q),
        "grid": _enc_arr(policy.grid.points),
        "layers_nlv": [_enc_arr(layer.nlv) for layer in policy.layers],
        "policies": [
            {
                "terminal": per.terminal,
                "log_eta": _enc_arr(per.log_eta),
                "log_c": _enc_arr(per.log_c),
                "pay_lo": [int(v) for v in per.pay_lo],
                "edges": [
                    None if e is None else _enc_arr(e) for e in per.edges_slog
                ],
            }
            for per in policy.policies
        ],
    }
    doc = {"checksum": _checksum(payload), **payload}
    _atomic_write(Path(path), json.dumps(doc, indent=1))


def load_policy(path) -> PolicyTable:
    """Load a saved policy, verifying checksum, version and type invariants."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: unreadable policy file: {exc}") from exc
    stored_sum = doc.pop("checksum", None)
    if stored_sum is None or stored_sum != _checksum(doc):
        raise ArtifactError(f"{path}: checksum mismatch (corrupt or edited file)")
    if doc.get("format_version") != POLICY_FORMAT_VERSION:
        raise ArtifactError(
            f"{path}: format version {doc.get('format_version')} unsupported "
            f"(expected {POLICY_FORMAT_VERSION})"
        )
    market = MarketParams(**doc["market"])
    prefs = EkmParams(**doc["preferences"])
    table = MortalityTable(doc["retirement_age"], _dec_arr(doc["mortality_q"]))
    grid = WealthGrid(_dec_arr(doc["grid"]))
    layers = []
    for vals in doc["layers_nlv"]:
        layer = ValueLayer(grid=grid, nlv=_dec_arr(vals))
        layer.validate()
        layers.append(layer)
    policies = []
    for raw in doc["policies"]:
        edges = []
        for e in raw["edges"]:
            if e is None:
                edges.append(None)
                continue
            arr = _dec_arr(e)
            if np.any(np.diff(arr) < 0):
                raise ArtifactError(f"{path}: breakpoints not monotone")
            edges.append(arr)
        policies.append(
            PeriodPolicy(
                log_eta=_dec_arr(raw["log_eta"]),
                log_c=_dec_arr(raw["log_c"]),
                pay_lo=np.array(raw["pay_lo"], dtype=int),
                edges_slog=edges,
                terminal=bool(raw["terminal"]),
            )
        )
    if len(layers) != table.horizon or len(policies) != table.horizon:
        raise ArtifactError(f"{path}: horizon mismatch between table and layers")
    return PolicyTable(
        grid=grid, market=market, prefs=prefs, mortality=table,
        layers=layers, policies=policies,
    )


def export_fan_csv(fan: FanDiagram, path) -> Path:
    """Write `year,decile,replacement_ratio` rows (9 per year, full precision)
    plus a JSON sidecar with the gain estimate and metadata."""
    path = Path(path)
    rows = []
    for j, year in enumerate(fan.years):
        for d, decile in enumerate(range(10, 100, 10)):
            rows.append((int(year), decile, repr(float(fan.deciles[d, j]))))
    with tempfile.NamedTemporaryFile(
        "w", dir=path.parent, prefix=".tmp-", suffix=".csv",
        delete=False, encoding="utf-8", newline="",
    ) as fh:
        writer = csv.writer(fh)
        writer.writerow(["year", "decile", "replacement_ratio"])
        writer.writerows(rows)
        tmp = fh.name
    os.replace(tmp, path)
    sidecar = path.with_name(path.name + ".meta.json")
    meta = {
        "gain": {
            "log_neg_gain": _enc(fan.gain.log_neg_gain),
            "se_rel": _enc(fan.gain.se_rel),
        },
        "meta": {
            k: (_enc(v) if isinstance(v, float) else v)
            for k, v in fan.meta.items()
        },
    }
    _atomic_write(sidecar, json.dumps(meta, indent=1, sort_keys=True))
    return sidecar


def read_fan_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a fan CSV back into (years, deciles) arrays."""
    years, rows = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            year = int(row["year"])
            if year not in rows:
                years.append(year)
                rows[year] = {}
            rows[year][int(row["decile"])] = float(row["replacement_ratio"])
    deciles = np.array(
        [[rows[y][d] for y in years] for d in range(10, 100, 10)]
    )
    return np.array(years), deciles
