"""Batch entry points mirroring the service: solve, fan, validate, sweep and
serve. Every line on stdout is one JSON object; numbers are echoed at full
precision. Exit codes: 0 ok, 1 validation FAIL, 2 config error, 3 solver
error, 4 infeasible initial wealth.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .actuarial import adequate_funding
from .artifacts import (
    ArtifactError,
    ConfigError,
    RunConfig,
    export_fan_csv,
    load_config,
    load_policy,
    save_policy,
)
from .market import MarketParams
from .preferences import EkmParams, estimate_gain
from .simulator import (
    ScenarioBatch,
    fan_from_paths,
    gain_matches_solver,
    simulate_decumulation,
    simulate_fixed_rule,
)
from .solver import (
    InfeasibleStartError,
    SolverError,
    WealthGrid,
    backward_induction,
    budget_identity_gap,
    default_grid,
    solve_decumulation,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INFEASIBLE = 4

EDGE_TRIPLES = [(0.2, -2.0, 0.4), (5e-5, -0.1, 0.4)]


def emit(obj: dict) -> None:
    print(json.dumps(obj), flush=True)


def cmd_solve(args) -> int:
    config = load_config(args.config)
    base = default_grid(
        config.prefs, config.initial_wealth, config.grid_base_size
    )
    result = solve_decumulation(
        config.table, config.market, config.prefs, base,
        refinements=config.grid_refinements,
        early_stop_tol=config.early_stop_tol,
    )
    for k, delta in enumerate(result.refinement_deltas):
        emit(
            {
                "event": "refinement",
                "step": k + 1,
                "grid_size": result.refinement_grids[k + 1].size,
                "max_rel_value_change": delta,
            }
        )
    save_policy(result.policy, args.out)
    emit(
        {
            "event": "result",
            "policy": str(args.out),
            "grid_size": result.policy.grid.size,
            "value_nlv_at_w0": result.policy.value_nlv(config.initial_wealth),
            "initial_wealth": config.initial_wealth,
        }
    )
    return EXIT_OK


def cmd_fan(args) -> int:
    policy = load_policy(args.policy)
    batch = ScenarioBatch(args.n, args.seed)
    w0 = args.w0
    sim = simulate_decumulation(policy, batch, w0)
    fan = fan_from_paths(
        sim.consumption, policy.mortality, policy.prefs, policy.market.dt,
        meta={
            "alpha": policy.prefs.alpha, "rho": policy.prefs.rho,
            "a": policy.prefs.a, "seed": args.seed, "n_scenarios": args.n,
            "initial_wealth": w0,
            "snapped_wealth": float(sim.start_wealth[0]),
            "solver_nlv": policy.value_nlv(w0),
        },
    )
    sidecar = export_fan_csv(fan, args.out)
    consistent = gain_matches_solver(fan, policy.value_nlv(w0), n_se=3.0)
    emit(
        {
            "event": "result",
            "fan": str(args.out),
            "sidecar": str(sidecar),
            "gain_log_neg": fan.gain.log_neg_gain,
            "gain_se_rel": fan.gain.se_rel,
            "solver_nlv": policy.value_nlv(w0),
            "self_consistency": "PASS" if consistent else "FAIL",
        }
    )
    return EXIT_OK if consistent else EXIT_FAIL


def _validate_policy_file(path: str) -> list:
    checks = []
    try:
        policy = load_policy(path)
        checks.append(("policy_invariants", True, f"{path} validates"))
        gap = max(
            budget_identity_gap(policy, t) for t in range(policy.horizon)
        )
        checks.append(
            ("policy_budget_identity", gap <= 1e-8, f"max gap {gap:.3g}")
        )
    except (ArtifactError, SolverError) as exc:
        checks.append(("policy_invariants", False, str(exc)))
    return checks


def _validate_triple(
    prefs: EkmParams, config: RunConfig, grid_size: int, n_scenarios: int
) -> list:
    from .preferences import period_utility
    from .solver import ValueLayer, one_period_step, terminal_layer

    checks = []
    label = f"alpha={prefs.alpha:g},rho={prefs.rho:g},a={prefs.a:g}"
    m = config.market
    table = config.table

    # deterministic one-period oracle in a driftless market
    flat = MarketParams(mu=m.r, sigma=m.sigma, r=m.r, dt=m.dt)
    grid = default_grid(prefs, config.initial_wealth, min(grid_size, 64))
    v1 = terminal_layer(grid, prefs, m.dt)
    v0, _ = one_period_step(v1, 1.0, flat, prefs)
    x = grid.points
    neg = v1.neg_log()
    worst = 0.0
    factor = math.exp(-m.r * m.dt)
    for i in range(0, x.size, max(1, x.size // 16)):
        budget = x[i]
        c = np.geomspace(budget * 1e-10, budget * (1 - 1e-12), 100_000)
        kinks = budget - factor * x
        c = np.sort(np.concatenate([c, kinks[kinks > 0]]))
        f = (budget - c) / factor
        cont = np.interp(f, x, np.exp(neg - neg.max()), left=np.inf)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            vals = prefs.alpha * period_utility(c, prefs) * m.dt - (
                np.log(cont) + neg.max()
            )
        best = float(np.max(vals))
        if np.isfinite(v0.nlv[i]) and np.isfinite(best):
            worst = max(worst, abs(math.expm1(-(v0.nlv[i] - best))))
    checks.append(
        ("oracle_equivalence", worst < 1e-6, f"{label}: max rel dev {worst:.3g}")
    )

    # full solve at reduced scale: identities and shape invariants
    base = default_grid(prefs, config.initial_wealth, grid_size)
    policy = backward_induction(grid=base, table=table, m=m, p=prefs)
    gap = max(budget_identity_gap(policy, t) for t in range(policy.horizon))
    checks.append(("budget_identity", gap <= 1e-8, f"{label}: max gap {gap:.3g}"))
    try:
        for layer in policy.layers:
            layer.validate()
        checks.append(("concavity", True, f"{label}: all layers concave"))
    except SolverError as exc:
        checks.append(("concavity", False, f"{label}: {exc}"))

    # truncation insensitivity
    alt = backward_induction(
        grid=base, table=table, m=m, p=prefs, trunc_scale=0.01
    )
    diffs = [
        np.max(
            np.abs(a.nlv - b.nlv)[np.isfinite(a.nlv) & np.isfinite(b.nlv)],
            initial=0.0,
        )
        for a, b in zip(policy.layers, alt.layers)
    ]
    checks.append(
        (
            "truncation_insensitivity",
            max(diffs) < 1e-6,
            f"{label}: max value shift {max(diffs):.3g}",
        )
    )

    # Monte Carlo self-consistency at the configured start wealth
    batch = ScenarioBatch(n_scenarios, config.seed)
    sim = simulate_decumulation(policy, batch, config.initial_wealth)
    est = estimate_gain(sim.consumption, table, prefs, m.dt)
    nlv = policy.value_nlv(config.initial_wealth)
    spread = abs(math.expm1(-nlv - est.log_neg_gain))
    checks.append(
        (
            "self_consistency",
            spread <= 3 * est.se_rel,
            f"{label}: |gain spread| {spread:.3g} vs 3se {3 * est.se_rel:.3g}",
        )
    )
    return checks


def cmd_validate(args) -> int:
    config = load_config(args.config)
    checks = []
    if args.policy:
        checks.extend(_validate_policy_file(args.policy))
    triples = [config.prefs]
    if args.edge_cases:
        triples += [EkmParams(*t) for t in EDGE_TRIPLES]
    for prefs in triples:
        checks.extend(
            _validate_triple(prefs, config, args.grid_size, args.n)
        )
    ok = True
    for name, passed, detail in checks:
        ok &= passed
        emit(
            {
                "property": name,
                "status": "PASS" if passed else "FAIL",
                "detail": detail,
            }
        )
    emit({"event": "result", "status": "PASS" if ok else "FAIL"})
    return EXIT_OK if ok else EXIT_FAIL


def _lattice(values: str | None, fallback: float) -> list:
    if not values:
        return [fallback]
    return [float(v) for v in values.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    alphas = _lattice(args.grid_alpha, config.prefs.alpha)
    rhos = _lattice(args.grid_rho, config.prefs.rho)
    adequacies = _lattice(args.grid_a, config.prefs.a)
    triples = [(a, r, q) for a in alphas for r in rhos for q in adequacies]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    from .service import warm_cache

    records = warm_cache(
        config,
        args.cache_dir or out_dir / "cache",
        triples,
        workers=args.workers,
    )
    failures = 0
    for rec in records:
        if rec.state != "done":
            failures += 1
            emit(
                {
                    "event": "triple",
                    "params": rec.params,
                    "status": "FAIL",
                    "error": rec.error,
                }
            )
            continue
        payload = rec.payload
        name = "fan_a{alpha:g}_r{rho:g}_q{a:g}.csv".format(**rec.params)
        years = np.array(payload["years"])
        deciles = np.array(payload["deciles"])
        from .preferences import GainEstimate
        from .simulator import FanDiagram

        fan = FanDiagram(
            years=years,
            deciles=deciles,
            gain=GainEstimate(payload["gain"]["L"], payload["gain"]["se"]),
            meta=payload["meta"],
        )
        export_fan_csv(fan, out_dir / name)
        emit(
            {
                "event": "triple",
                "params": rec.params,
                "status": "done",
                "fan": str(out_dir / name),
                "gain": payload["gain"],
                "solver_nlv": payload["meta"]["solver_nlv"],
            }
        )
    emit({"event": "result", "triples": len(records), "failures": failures})
    return EXIT_OK if failures == 0 else EXIT_SOLVER


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    config = load_config(args.config)
    app = create_app(
        config,
        cache_dir=args.cache_dir,
        workers=args.workers,
        queue_limit=args.queue_limit,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def cmd_adequacy(args) -> int:
    config = load_config(args.config)
    level = adequate_funding(config.prefs.a, config.market, config.table)
    emit({"event": "result", "adequate_funding": level, "a": config.prefs.a})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pensionlab",
        description="Pension decumulation laboratory: solver, simulator, "
        "sweeps and results service",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="solve a decumulation policy")
    p_solve.add_argument("--config", required=True)
    p_solve.add_argument("--out", required=True)
    p_solve.set_defaults(func=cmd_solve)

    p_fan = sub.add_parser("fan", help="simulate a policy and export deciles")
    p_fan.add_argument("--policy", required=True)
    p_fan.add_argument("--n", type=int, default=100_000)
    p_fan.add_argument("--seed", type=int, default=7)
    p_fan.add_argument("--w0", type=float, default=12.0)
    p_fan.add_argument("--out", required=True)
    p_fan.set_defaults(func=cmd_fan)

    p_val = sub.add_parser("validate", help="run the property suite")
    p_val.add_argument("--config", required=True)
    p_val.add_argument("--policy", help="also validate a saved policy file")
    p_val.add_argument("--edge-cases", action="store_true")
    p_val.add_argument("--grid-size", type=int, default=48)
    p_val.add_argument("--n", type=int, default=20_000)
    p_val.set_defaults(func=cmd_validate)

    p_sweep = sub.add_parser("sweep", help="solve a lattice of triples")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--grid-alpha")
    p_sweep.add_argument("--grid-rho")
    p_sweep.add_argument("--grid-a")
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.add_argument("--cache-dir")
    p_sweep.set_defaults(func=cmd_sweep)

    p_serve = sub.add_parser("serve", help="run the results service")
    p_serve.add_argument("--config", required=True)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.add_argument("--cache-dir")
    p_serve.add_argument("--workers", type=int, default=1)
    p_serve.add_argument("--queue-limit", type=int, default=16)
    p_serve.set_defaults(func=cmd_serve)

    p_adq = sub.add_parser("adequacy", help="print the adequate funding level")
    p_adq.add_argument("--config", required=True)
    p_adq.set_defaults(func=cmd_adequacy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        emit({"event": "error", "kind": "config", "message": str(exc)})
        return EXIT_CONFIG
    except ArtifactError as exc:
        emit({"event": "error", "kind": "artifact", "message": str(exc)})
        return EXIT_CONFIG
    except InfeasibleStartError as exc:
        emit({"event": "error", "kind": "infeasible", "message": str(exc)})
        return EXIT_INFEASIBLE
    except SolverError as exc:
        emit({"event": "error", "kind": "solver", "message": str(exc)})
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
