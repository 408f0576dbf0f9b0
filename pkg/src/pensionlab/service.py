"""HTTP facade for interactive exploration.

Solves are expensive, so the service keys every (preference triple, effective
config) request to a deterministic job id, runs cold solves on a small worker
pool, and persists finished fan diagrams to a disk cache that survives
restarts. Status polls never block behind a running solve. While a cold job
runs, the response carries the nearest cached fan labelled ``approx: true`` so
a UI can render a preview honestly.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, ConfigDict

from .artifacts import RunConfig, check_sweep_box, ConfigError
from .preferences import SWEEP_BOX, EkmParams
from .simulator import ScenarioBatch, run_lifecycle
from .solver import WealthGrid

OVERRIDE_KEYS = {"initial_wealth", "n_scenarios", "seed"}
PERCENTILES = list(range(10, 100, 10))


class SolveRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float
    rho: float
    a: float
    overrides: dict | None = None


@dataclass
class JobRecord:
    id: str
    params: dict
    state: str = "queued"  # queued -> running -> done | failed
    error: str | None = None
    payload: dict | None = None  # fan + strategy data once done

    def public_state(self) -> dict:
        out = {"job_id": self.id, "state": self.state}
        if self.error:
            out["error"] = self.error
        return out


def _config_digest(config: RunConfig) -> str:
    return hashlib.sha256(
        json.dumps(config.to_dict(), sort_keys=True).encode()
    ).hexdigest()[:16]


def job_key(alpha: float, rho: float, a: float, overrides: dict, digest: str) -> str:
    body = {
        "alpha": float(alpha), "rho": float(rho), "a": float(a),
        "overrides": {k: overrides[k] for k in sorted(overrides)},
        "config": digest,
    }
    return hashlib.sha256(
        json.dumps(body, sort_keys=True).encode()
    ).hexdigest()[:24]


def compute_job_payload(config: RunConfig, params: dict) -> dict:
    """Solve + simulate one triple and assemble the wire payload.

    Runs the exact same lifecycle as the CLI so cached values match batch
    outputs byte for byte.
    """
    overrides = params.get("overrides", {})
    prefs = EkmParams(alpha=params["alpha"], rho=params["rho"], a=params["a"])
    w0 = float(overrides.get("initial_wealth", config.initial_wealth))
    n = int(overrides.get("n_scenarios", config.n_scenarios))
    seed = int(overrides.get("seed", config.seed))
    from .solver import default_grid

    base = default_grid(prefs, w0, config.grid_base_size)
    batch = ScenarioBatch(n, seed)
    solved, sim, fan = run_lifecycle(
        prefs, config.table, config.market, base, w0, batch,
        refinements=config.grid_refinements,
        early_stop_tol=config.early_stop_tol,
    )
    dispersion = np.zeros(fan.years.size)
    if fan.years.size > 1:
        dispersion[:-1] = sim.wealth[:, 1:].std(axis=0, ddof=1)
    return {
        "years": [int(y) for y in fan.years],
        "deciles": [[float(v) for v in row] for row in fan.deciles],
        "gain": {
            "L": float(fan.gain.log_neg_gain),
            "se": float(fan.gain.se_rel),
        },
        "meta": {
            "params": {"alpha": prefs.alpha, "rho": prefs.rho, "a": prefs.a},
            "seed": seed,
            "n_scenarios": n,
            "initial_wealth": w0,
            "snapped_wealth": float(sim.start_wealth[0]),
            "grid": int(solved.policy.grid.size),
            "solver_nlv": float(solved.policy.value_nlv(w0)),
        },
        "dispersion": [float(v) for v in dispersion],
    }


class JobRegistry:
    """Single-writer job table with a persistent fan cache."""

    def __init__(
        self,
        config: RunConfig,
        cache_dir: Path | None,
        workers: int = 1,
        queue_limit: int = 16,
    ):
        self.config = config
        self.digest = _config_digest(config)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.queue_limit = queue_limit
        self.jobs: dict[str, JobRecord] = {}
        self.lock = threading.Lock()
        self.pool = ThreadPoolExecutor(max_workers=workers)
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            self._load_cache()

    # -- cache ---------------------------------------------------------------

    def _cache_path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def _load_cache(self) -> None:
        for path in sorted(self.cache_dir.glob("*.json")):
            try:
                doc = json.loads(path.read_text())
                if doc.get("config") != self.digest:
                    continue
                rec = JobRecord(
                    id=doc["job_id"], params=doc["params"],
                    state="done", payload=doc["payload"],
                )
                self.jobs[rec.id] = rec
            except (json.JSONDecodeError, KeyError):
                continue

    def _persist(self, rec: JobRecord) -> None:
        if not self.cache_dir or rec.payload is None:
            return
        doc = {
            "job_id": rec.id,
            "config": self.digest,
            "params": rec.params,
            "payload": rec.payload,
        }
        self._cache_path(rec.id).write_text(json.dumps(doc))

    # -- job lifecycle ---------------------------------------------------------

    def submit(self, alpha: float, rho: float, a: float, overrides: dict) -> JobRecord:
        key = job_key(alpha, rho, a, overrides, self.digest)
        with self.lock:
            if key in self.jobs:
                return self.jobs[key]
            depth = sum(1 for j in self.jobs.values() if j.state in ("queued", "running"))
            if depth >= self.queue_limit:
                raise QueueFull(depth)
            rec = JobRecord(
                id=key,
                params={"alpha": alpha, "rho": rho, "a": a, "overrides": overrides},
            )
            self.jobs[key] = rec
        self.pool.submit(self._run, rec)
        return rec

    def _run(self, rec: JobRecord) -> None:
        with self.lock:
            rec.state = "running"
        try:
            payload = compute_job_payload(self.config, rec.params)
        except Exception as exc:
            with self.lock:
                rec.state = "failed"
                rec.error = f"{type(exc).__name__}: {exc}"
            return
        with self.lock:
            rec.payload = payload
            rec.state = "done"
        self._persist(rec)

    def get(self, job_id: str) -> JobRecord | None:
        with self.lock:
            return self.jobs.get(job_id)

    def nearest_done(self, alpha: float, rho: float, a: float) -> JobRecord | None:
        """Nearest finished job in normalized (log alpha, rho, a) space."""
        best, best_d = None, math.inf
        a_lo, a_hi = SWEEP_BOX["alpha"]
        r_lo, r_hi = SWEEP_BOX["rho"]
        aa_lo, aa_hi = SWEEP_BOX["a"]
        la_span = math.log10(a_hi) - math.log10(a_lo)
        with self.lock:
            done = [j for j in self.jobs.values() if j.state == "done"]
        for job in done:
            p = job.params
            d = (
                ((math.log10(p["alpha"]) - math.log10(alpha)) / la_span) ** 2
                + ((p["rho"] - rho) / (r_hi - r_lo)) ** 2
                + ((p["a"] - a) / (aa_hi - aa_lo)) ** 2
            )
            if d < best_d:
                best, best_d = job, d
        return best


class QueueFull(RuntimeError):
    def __init__(self, depth: int):
        super().__init__(f"solve queue is full ({depth} pending)")
        self.depth = depth


def _validate_triple(alpha: float, rho: float, a: float) -> None:
    try:
        check_sweep_box({"alpha": alpha, "rho": rho, "a": a}, pointer="")
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def _validate_overrides(overrides: dict | None, config: RunConfig) -> dict:
    if not overrides:
        return {}
    unknown = set(overrides) - OVERRIDE_KEYS
    if unknown:
        raise HTTPException(
            status_code=400,
            detail=f"unknown override keys: {sorted(unknown)} "
            f"(allowed: {sorted(OVERRIDE_KEYS)})",
        )
    out = {}
    if "initial_wealth" in overrides:
        w0 = float(overrides["initial_wealth"])
        if not w0 > 0:
            raise HTTPException(400, detail="initial_wealth must be positive")
        out["initial_wealth"] = w0
    if "n_scenarios" in overrides:
        n = int(overrides["n_scenarios"])
        if not 10 <= n <= 2_000_000:
            raise HTTPException(400, detail="n_scenarios must lie in [10, 2e6]")
        out["n_scenarios"] = n
    if "seed" in overrides:
        out["seed"] = int(overrides["seed"])
    return out


def _preview_from(job: JobRecord | None) -> dict | None:
    if job is None or job.payload is None:
        return None
    return {
        "approx": True,
        "source_params": job.payload["meta"]["params"],
        "years": job.payload["years"],
        "deciles": job.payload["deciles"],
        "gain": job.payload["gain"],
    }


def create_app(
    config: RunConfig,
    cache_dir=None,
    workers: int = 1,
    queue_limit: int = 16,
) -> FastAPI:
    registry = JobRegistry(
        config, cache_dir, workers=workers, queue_limit=queue_limit
    )
    app = FastAPI(
        title="pensionlab service",
        description="Parameter-keyed pension outcome explorer backend",
        version="0.1.0",
    )
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.registry = registry

    @app.post("/api/solve")
    def solve(req: SolveRequest):
        _validate_triple(req.alpha, req.rho, req.a)
        overrides = _validate_overrides(req.overrides, config)
        try:
            rec = registry.submit(req.alpha, req.rho, req.a, overrides)
        except QueueFull as exc:
            raise HTTPException(status_code=429, detail=str(exc)) from exc
        out = rec.public_state()
        if rec.state != "done":
            preview = _preview_from(
                registry.nearest_done(req.alpha, req.rho, req.a)
            )
            if preview is not None:
                out["preview"] = preview
        return out

    @app.get("/api/fan")
    def fan(job_id: str = Query(...)):
        rec = registry.get(job_id)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id}")
        if rec.state != "done":
            detail = rec.public_state()
            p = rec.params
            preview = _preview_from(
                registry.nearest_done(p["alpha"], p["rho"], p["a"])
            )
            if preview is not None:
                detail["preview"] = preview
            raise HTTPException(status_code=409, detail=detail)
        payload = rec.payload
        return {
            "years": payload["years"],
            "deciles": payload["deciles"],
            "gain": payload["gain"],
            "meta": payload["meta"],
        }

    @app.get("/api/strategy")
    def strategy(job_id: str = Query(...), percentile: int = Query(...)):
        if percentile not in PERCENTILES:
            raise HTTPException(
                status_code=400,
                detail=f"percentile must be one of {PERCENTILES}",
            )
        rec = registry.get(job_id)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id}")
        if rec.state != "done":
            raise HTTPException(status_code=409, detail=rec.public_state())
        payload = rec.payload
        row = PERCENTILES.index(percentile)
        return {
            "years": payload["years"],
            "consumption": payload["deciles"][row],
            "dispersion": payload["dispersion"],
        }

    @app.get("/api/health")
    def health():
        return {"status": "ok", "jobs": len(registry.jobs)}

    return app


def warm_cache(config: RunConfig, cache_dir, triples, workers: int = 1) -> list:
    """Precompute fan payloads for a lattice of triples into the disk cache.

    Used by the sweep CLI so interactive sessions start warm.
    """
    registry = JobRegistry(config, cache_dir, workers=workers, queue_limit=10**9)
    records = [
        registry.submit(t[0], t[1], t[2], {}) for t in triples
    ]
    registry.pool.shutdown(wait=True)
    return records
