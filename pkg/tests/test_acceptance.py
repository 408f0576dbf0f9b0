"""Acceptance suite: every criterion at its stated scale and tolerance.

Runs entirely against the library and CLI surfaces (no UI involved). Each
criterion prints one PASS/FAIL line; run with `pytest tests/test_acceptance.py
-v -s` to see them. The suite is deliberately heavier than the unit tests
(several minutes end to end).
"""

import json
import math
import time

import numpy as np
import pytest

from pensionlab import numerics as nm
from pensionlab.actuarial import MortalityTable, adequate_funding, default_table
from pensionlab.cli import main as cli_main
from pensionlab.market import MarketParams, log_pricing_kernel, shock_to_uniform
from pensionlab.preferences import EkmParams, estimate_gain, period_utility
from pensionlab.simulator import (
    ScenarioBatch,
    run_lifecycle,
    simulate_decumulation,
    simulate_fixed_rule,
)
from pensionlab.solver import (
    WealthGrid,
    backward_induction,
    budget_identity_gap,
    default_grid,
    relative_value_change,
    solve_decumulation,
    terminal_layer,
)

MARKET = MarketParams(mu=0.05, sigma=0.2, r=0.01, dt=1.0)
DEFAULT_PREFS = EkmParams(alpha=5e-5, rho=-2.0, a=0.4)
EDGE_SATIATED = EkmParams(alpha=0.2, rho=-2.0, a=0.4)
EDGE_NEUTRAL = EkmParams(alpha=5e-5, rho=-0.1, a=0.4)
W0 = 12.0
SEED = 20240501
N_SCENARIOS = 100_000


def report(criterion: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {criterion}: {status} {detail}")


def certain_table(years: int) -> MortalityTable:
    q = np.zeros(years)
    q[-1] = 1.0
    return MortalityTable(65, q)


# -- shared expensive solves ---------------------------------------------------


@pytest.fixture(scope="module")
def default_solved():
    base = default_grid(DEFAULT_PREFS, W0, 64)
    return solve_decumulation(
        default_table(), MARKET, DEFAULT_PREFS, base,
        refinements=2, early_stop_tol=None,
    )


@pytest.fixture(scope="module")
def satiated_solved():
    # high risk aversion needs a finer grid: the piecewise-linear chord error
    # compounds across the horizon in proportion to the value curvature
    base = WealthGrid.geometric(1e-3 * 0.4, 260.0, 128)
    return solve_decumulation(
        default_table(), MARKET, EDGE_SATIATED, base,
        refinements=2, early_stop_tol=None,
    )


@pytest.fixture(scope="module")
def refinement_solved():
    base = default_grid(DEFAULT_PREFS, W0, 128)
    return solve_decumulation(
        default_table(), MARKET, DEFAULT_PREFS, base,
        refinements=3, early_stop_tol=None,
    )


def nested_flat_oracle(grid, prefs, m, years, n_points=1_000_000):
    """Brute-force nested 1-D consumption grid search (criterion 1 oracle).

    Each stage searches a geometric consumption grid (plus the continuation
    kink points, where corner optima sit) against the piecewise-linear
    continuation interpolated in value space. The search grid is shared
    across budgets up to scale and the wealth grid is geometric, so utility
    powers are precomputed once and interpolation indices come from log-grid
    arithmetic rather than binary search.
    """
    x = grid.points
    n = x.size
    lx0 = math.log(x[0])
    dlx = math.log(x[1] / x[0])  # geometric grid: uniform log spacing
    factor = math.exp(-m.r * m.dt)  # certain survival
    adequacy_term = prefs.a ** prefs.rho / prefs.rho

    g = np.geomspace(1e-10, 1.0 - 1e-12, n_points)  # consumption fractions
    g_pow = g ** prefs.rho
    h = (1.0 - g) / factor  # continuation wealth fractions
    log_h = np.log(h)

    layer = prefs.alpha * period_utility(x, prefs) * m.dt

    def stage_value(budget, exp_neg, scale):
        # geometric part: c = budget * g, f = budget * h
        pos = (math.log(budget) + log_h - lx0) / dlx
        idx = np.clip(pos.astype(int), 0, n - 2)
        f = budget * h
        lam = (f - x[idx]) / (x[idx + 1] - x[idx])
        cont = exp_neg[idx] * (1.0 - lam) + exp_neg[idx + 1] * lam
        cont = np.where(f < x[0], np.inf, np.where(f >= x[-1], exp_neg[-1], cont))
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            u = (budget ** prefs.rho) * g_pow / prefs.rho - adequacy_term
            vals = prefs.alpha * u * m.dt - (np.log(cont) + scale)
        best = float(np.max(vals))
        # kink part: consumption landing the continuation exactly on a node
        kinks = budget - factor * x
        keep = kinks > 0
        if np.any(keep):
            u_k = period_utility(kinks[keep], prefs)
            with np.errstate(divide="ignore"):
                vals_k = prefs.alpha * u_k * m.dt - (
                    np.log(exp_neg[keep]) + scale
                )
            best = max(best, float(np.max(vals_k)))
        return best

    for _ in range(years - 1):
        neg = -layer
        scale = neg.max()
        exp_neg = np.exp(neg - scale)
        layer = np.array([stage_value(b, exp_neg, scale) for b in x])
    return layer


class TestCriterion1DeterministicOracle:
    def test_flat_market_matches_brute_force(self):
        started = time.monotonic()
        flat = MarketParams(mu=0.01, sigma=0.2, r=0.01, dt=1.0)
        grid = WealthGrid.geometric(0.02, 40.0, 512)
        worst = 0.0
        for years in (1, 2, 3):
            table = certain_table(years)
            policy = backward_induction(grid, table, flat, DEFAULT_PREFS)
            oracle = nested_flat_oracle(grid, DEFAULT_PREFS, flat, years)
            got = policy.layers[0].nlv
            both = np.isfinite(got) & np.isfinite(oracle)
            assert np.array_equal(np.isfinite(got), np.isfinite(oracle))
            dev = np.abs(got[both] - oracle[both]) / np.maximum(
                np.abs(oracle[both]), 1e-3
            )
            worst = max(worst, float(dev.max()))
        elapsed = time.monotonic() - started
        passed = worst <= 1e-6 and elapsed < 60.0
        report(
            "criterion-1 deterministic oracle equivalence",
            passed,
            f"(max rel dev {worst:.3g}, runtime {elapsed:.1f}s)",
        )
        assert worst <= 1e-6
        assert elapsed < 60.0


class TestCriterion2SelfConsistency:
    def test_policy_gain_and_strategy_dominance(
        self, default_solved, satiated_solved
    ):
        started = time.monotonic()
        batch = ScenarioBatch(N_SCENARIOS, SEED)
        table = default_table()

        edge_neutral_solved = solve_decumulation(
            table, MARKET, EDGE_NEUTRAL, default_grid(EDGE_NEUTRAL, W0, 64),
            refinements=2, early_stop_tol=None,
        )
        cases = [
            (DEFAULT_PREFS, default_solved),
            (EDGE_SATIATED, satiated_solved),
            (EDGE_NEUTRAL, edge_neutral_solved),
        ]
        rules = [
            (0.03, 0.0), (0.03, 0.5), (0.05, 0.0), (0.05, 0.5), (0.05, 1.0),
            (0.08, 0.0), (0.08, 0.5), (0.12, 0.5), (0.12, 1.0), (0.2, 0.5),
        ]
        all_ok = True
        details = []
        for prefs, solved in cases:
            nlv = solved.policy.value_nlv(W0)
            sim = simulate_decumulation(solved.policy, batch, W0)
            est = estimate_gain(sim.consumption, table, prefs, MARKET.dt)
            spread = abs(math.expm1(-nlv - est.log_neg_gain))
            two_sided = spread <= 3.0 * est.se_rel
            dominance = True
            for frac, pi in rules:
                paths = simulate_fixed_rule(W0, frac, pi, table, MARKET, batch)
                rule_est = estimate_gain(paths, table, prefs, MARKET.dt)
                # rule gain <= solver value + 3 SE (log_neg is -log(-gain))
                if rule_est.log_neg_gain < -nlv - 3.0 * rule_est.se_rel:
                    dominance = False
            ok = two_sided and dominance
            all_ok &= ok
            details.append(
                f"alpha={prefs.alpha:g},rho={prefs.rho:g}: spread/se "
                f"{spread / max(est.se_rel, 1e-300):.2f}, dominance {dominance}"
            )
        elapsed = time.monotonic() - started
        passed = all_ok and elapsed < 600.0
        report(
            "criterion-2 stochastic self-consistency",
            passed,
            f"({'; '.join(details)}; runtime {elapsed:.0f}s)",
        )
        assert all_ok
        assert elapsed < 600.0


class TestCriterion3ConvergenceMonotonicity:
    def test_refinements_monotone_and_converged(self, refinement_solved):
        result = refinement_solved
        assert len(result.refinement_values) == 4
        monotone = True
        for k in range(1, 4):
            coarse_grid = result.refinement_grids[k - 1]
            fine_grid = result.refinement_grids[k]
            shared = np.searchsorted(fine_grid.points, coarse_grid.points)
            coarse = result.refinement_values[k - 1]
            fine = result.refinement_values[k][:, shared]
            both = np.isfinite(coarse) & np.isfinite(fine)
            slack = 1e-9 * np.maximum(1.0, np.abs(coarse[both]))
            if not np.all(fine[both] >= coarse[both] - slack):
                monotone = False
        # final step change for wealth at or above the adequacy level
        coarse_grid = result.refinement_grids[-2]
        fine_grid = result.refinement_grids[-1]
        shared = np.searchsorted(fine_grid.points, coarse_grid.points)
        sel = coarse_grid.points >= DEFAULT_PREFS.a
        coarse = result.refinement_values[-2][:, sel]
        fine = result.refinement_values[-1][:, shared[sel]]
        final_delta = float(np.max(relative_value_change(coarse, fine)))
        passed = monotone and final_delta < 1e-4
        report(
            "criterion-3 convergence monotonicity",
            passed,
            f"(monotone {monotone}, final step delta {final_delta:.3g})",
        )
        assert monotone
        assert final_delta < 1e-4


class TestCriterion4Identities:
    def test_budget_identity_every_grid_point(self, refinement_solved):
        policy = refinement_solved.policy
        gap = max(budget_identity_gap(policy, t) for t in range(policy.horizon))
        passed = gap <= 1e-8
        report(
            "criterion-4a per-period budget identity",
            passed,
            f"(max relative gap {gap:.3g} over {policy.horizon} ages x "
            f"{policy.grid.size} budgets)",
        )
        assert gap <= 1e-8

    def test_kernel_quadrature(self):
        from scipy import integrate
        from scipy.special import ndtr

        density = lambda z: math.exp(
            log_pricing_kernel(float(ndtr(z)), MARKET)
        ) * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        val, _ = integrate.quad(density, -37, 37, limit=300, epsabs=1e-13)
        passed = abs(val - 1.0) < 1e-9
        report(
            "criterion-4b pricing kernel integrates to one",
            passed,
            f"(integral {val!r})",
        )
        assert abs(val - 1.0) < 1e-9

    def test_kernel_monte_carlo(self):
        rng = np.random.Generator(np.random.Philox(key=[SEED, 99]))
        eps = rng.standard_normal(1_000_000)
        q = np.exp(log_pricing_kernel(shock_to_uniform(eps, MARKET), MARKET))
        se = q.std(ddof=1) / math.sqrt(eps.size)
        dev = abs(q.mean() - 1.0)
        passed = dev < 4 * se
        report(
            "criterion-4c kernel expectation under P",
            passed,
            f"(|mean-1| {dev:.2e} vs 4se {4 * se:.2e})",
        )
        assert dev < 4 * se

    def test_truncation_insensitivity(self):
        table = default_table()
        base = default_grid(DEFAULT_PREFS, W0, 128)
        a = backward_induction(base, table, MARKET, DEFAULT_PREFS, trunc_scale=1.0)
        b = backward_induction(base, table, MARKET, DEFAULT_PREFS, trunc_scale=0.01)
        worst = 0.0
        for la, lb in zip(a.layers, b.layers):
            both = np.isfinite(la.nlv) & np.isfinite(lb.nlv)
            worst = max(worst, float(np.max(np.abs(la.nlv[both] - lb.nlv[both]))))
        passed = worst < 1e-6
        report(
            "criterion-4d truncation insensitivity",
            passed,
            f"(max value shift {worst:.3g})",
        )
        assert worst < 1e-6


class TestCriterion5Sensitivity:
    def test_fan_width_decreasing_in_alpha(self):
        started = time.monotonic()
        batch = ScenarioBatch(N_SCENARIOS, SEED)
        table = default_table()
        widths = {}
        for alpha in (1e-7, 5e-5, 1e-2):
            prefs = EkmParams(alpha, -2.0, 0.4)
            _, _, fan = run_lifecycle(
                prefs, table, MARKET, default_grid(prefs, W0, 64), W0, batch,
                refinements=2, early_stop_tol=None,
            )
            widths[alpha] = fan.width(10)
        decreasing = widths[1e-7] > widths[5e-5] > widths[1e-2]
        elapsed = time.monotonic() - started
        report(
            "criterion-5i fan width decreasing in alpha",
            decreasing,
            f"(widths at +10y: {widths}; runtime {elapsed:.0f}s)",
        )
        assert decreasing

    def test_high_alpha_adequacy_behaviour(self, satiated_solved):
        table = default_table()
        v_adq = adequate_funding(0.4, MARKET, table)
        batch = ScenarioBatch(N_SCENARIOS, SEED)

        rich = simulate_decumulation(satiated_solved.policy, batch, 1.5 * v_adq)
        mean_c = float(rich.consumption[:, 1:20].mean())
        rich_ok = abs(mean_c - 0.4) <= 0.05 * 0.4

        poor = simulate_decumulation(satiated_solved.policy, batch, 0.5 * v_adq)
        year1 = float(poor.consumption[:, 0].mean())
        sustainable = 0.5 * v_adq / (v_adq / 0.4)
        poor_ok = year1 < sustainable

        passed = rich_ok and poor_ok
        report(
            "criterion-5ii high-alpha adequacy behaviour",
            passed,
            f"(rich mean c years 2-20 {mean_c:.4f} vs a=0.4; poor year-1 "
            f"{year1:.4f} vs sustainable {sustainable:.4f})",
        )
        assert rich_ok
        assert poor_ok


class TestCriterion6Determinism:
    def test_repeated_runs_bitwise_identical(self, tmp_path, capsys):
        table = tmp_path / "table.csv"
        rows = [f"{65 + i},0.0{5 + i}" for i in range(5)] + ["70,1.0"]
        table.write_text("age,qx\n" + "\n".join(rows) + "\n")
        cfg = tmp_path / "config.json"
        cfg.write_text(
            json.dumps(
                {
                    "mortality": str(table),
                    "grid": {"base_size": 32, "refinements": 1,
                             "early_stop_tol": None},
                    "simulation": {"n_scenarios": 2000, "seed": 5},
                    "initial_wealth": 6.0,
                }
            )
        )
        pol_a, pol_b = tmp_path / "a.json", tmp_path / "b.json"
        assert cli_main(["solve", "--config", str(cfg), "--out", str(pol_a)]) == 0
        assert cli_main(["solve", "--config", str(cfg), "--out", str(pol_b)]) == 0
        fan_a, fan_b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (fan_a, fan_b):
            code = cli_main(
                [
                    "fan", "--policy", str(pol_a), "--n", "20000",
                    "--seed", "7", "--w0", "6.0", "--out", str(out),
                ]
            )
            assert code == 0
        capsys.readouterr()
        policies_equal = pol_a.read_bytes() == pol_b.read_bytes()
        fans_equal = fan_a.read_bytes() == fan_b.read_bytes()
        passed = policies_equal and fans_equal
        report(
            "criterion-6 determinism",
            passed,
            f"(policy files identical {policies_equal}, fan CSVs identical "
            f"{fans_equal})",
        )
        assert policies_equal
        assert fans_equal
