import math

import numpy as np
import pytest

from pensionlab import numerics as nm
from pensionlab.actuarial import MortalityTable, default_table
from pensionlab.market import MarketParams
from pensionlab.preferences import EkmParams, period_utility
from pensionlab.solver import (
    InfeasibleStartError,
    PolicyTable,
    SolverError,
    ValueLayer,
    WealthGrid,
    backward_induction,
    budget_identity_gap,
    default_grid,
    dense_eta_scan,
    dual_slopes,
    one_period_step,
    relative_value_change,
    solve_decumulation,
    terminal_layer,
)

PREFS = EkmParams(alpha=5e-5, rho=-2.0, a=0.4)
MARKET = MarketParams(mu=0.05, sigma=0.2, r=0.01, dt=1.0)
FLAT_MARKET = MarketParams(mu=0.01, sigma=0.2, r=0.01, dt=1.0)


def certain_survival_table(years: int) -> MortalityTable:
    q = np.zeros(years)
    q[-1] = 1.0
    return MortalityTable(65, q)


def brute_force_flat_layer(
    v_next: ValueLayer, survival: float, m: MarketParams, p: EkmParams,
    n_consumption: int = 200_000,
) -> np.ndarray:
    """Driftless-market oracle: exhaustive 1-D consumption search per budget.

    With mu = r the pricing measure equals the physical one and mixing
    adjacent grid states is the same as buying their wealth average, so the
    one-period problem collapses to: choose C, move the rest to next-period
    wealth f = (x - C) e^{r dt} / s, with the piecewise-linear continuation
    evaluated by value-space interpolation.
    """
    x = v_next.grid.points
    neg = v_next.neg_log()
    out = np.full(x.size, -np.inf)
    factor = survival * math.exp(-m.r * m.dt)
    for i, budget in enumerate(x):
        # geometric spacing (utility curvature explodes near zero) plus the
        # continuation kinks, where corner optima sit exactly
        c = np.geomspace(budget * 1e-10, budget * (1 - 1e-12), n_consumption)
        kinks = budget - factor * x
        c = np.sort(np.concatenate([c, kinks[kinks > 0]]))
        f = (budget - c) / factor if factor > 0 else np.zeros_like(c)
        neg_cont = np.interp(f, x, np.exp(neg - neg.max()), left=np.inf)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            log_neg_cont = np.log(neg_cont) + neg.max()
            a_term = np.logaddexp(
                math.log1p(-survival) if survival < 1 else -np.inf,
                (math.log(survival) if survival > 0 else -np.inf) + log_neg_cont,
            )
            vals = p.alpha * period_utility(c, p) * m.dt - a_term
        out[i] = np.max(vals)
    return out


class TestWealthGrid:
    def test_geometric_and_refinement(self):
        grid = WealthGrid.geometric(0.01, 10.0, 9)
        fine = grid.refined()
        assert fine.size == 2 * grid.size - 1
        assert fine.is_refinement_of(grid)
        assert not grid.is_refinement_of(fine)

    def test_validation(self):
        with pytest.raises(ValueError):
            WealthGrid(np.array([0.0, 1.0]))
        with pytest.raises(ValueError):
            WealthGrid(np.array([1.0, 1.0]))


class TestTerminalLayer:
    def test_zero_at_adequacy(self):
        grid = WealthGrid(np.array([0.2, PREFS.a, 1.0]))
        unit_alpha = EkmParams(alpha=1.0, rho=-2.0, a=0.4)
        layer = terminal_layer(grid, unit_alpha, dt=1.0)
        assert layer.nlv[1] == 0.0

    def test_hand_value(self):
        # u(0.8) = 2.34375 at rho=-2, a=0.4; terminal value is alpha-scaled
        grid = WealthGrid(np.array([0.4, 0.8]))
        unit_alpha = EkmParams(alpha=1.0, rho=-2.0, a=0.4)
        assert terminal_layer(grid, unit_alpha, 1.0).nlv[1] == pytest.approx(
            2.34375, abs=1e-14
        )
        assert terminal_layer(grid, PREFS, 1.0).nlv[1] == pytest.approx(
            5e-5 * 2.34375, rel=1e-14
        )

    def test_monotone(self):
        grid = WealthGrid.geometric(1e-3, 30.0, 64)
        layer = terminal_layer(grid, PREFS, 1.0)
        assert np.all(np.diff(layer.nlv) > 0)
        layer.validate()


class TestDualSlopes:
    def test_two_point_slope(self):
        # v = {-1/e, -1/e^2} on {1, 2}: slope e^-1 - e^-2
        grid = WealthGrid(np.array([1.0, 2.0]))
        layer = ValueLayer(grid=grid, nlv=np.array([1.0, 2.0]))
        want = math.log(math.exp(-1) - math.exp(-2))
        assert dual_slopes(layer)[0] == pytest.approx(want, rel=1e-14)
        assert want == pytest.approx(math.log(0.23254415793482963), rel=1e-12)

    def test_collinear_segments_share_slope(self):
        grid = WealthGrid(np.array([1.0, 2.0, 3.0]))
        # v linear: v = -3 + x -> nlv = -log(3 - x)... pick v = (-2, -1.5, -1)
        nlv = -np.log([2.0, 1.5, 1.0])
        layer = ValueLayer(grid=grid, nlv=nlv)
        slopes = dual_slopes(layer)
        assert slopes[0] == pytest.approx(slopes[1], rel=1e-13)

    def test_nonincreasing_for_concave(self):
        grid = WealthGrid.geometric(0.01, 20.0, 40)
        layer = terminal_layer(grid, PREFS, 1.0)
        slopes = dual_slopes(layer)
        assert np.all(np.diff(slopes) < 0)

    def test_infinite_above_forbidden_states(self):
        grid = WealthGrid(np.array([1.0, 2.0, 3.0]))
        layer = ValueLayer(grid=grid, nlv=np.array([-np.inf, -np.inf, 1.0]))
        slopes = dual_slopes(layer)
        assert slopes[0] == np.inf and slopes[1] == np.inf


class TestValueInterpolation:
    def make_layer(self):
        grid = WealthGrid(np.array([1.0, 2.0, 4.0]))
        return ValueLayer(grid=grid, nlv=np.array([0.0, 1.0, 1.5]))

    def test_node_exactness(self):
        layer = self.make_layer()
        for i, w in enumerate(layer.grid.points):
            assert layer.nlv_at(float(w)) == layer.nlv[i]

    def test_constant_above_top(self):
        layer = self.make_layer()
        assert layer.nlv_at(100.0) == layer.nlv[-1]

    def test_neg_inf_below_bottom(self):
        layer = self.make_layer()
        assert layer.nlv_at(0.5) == -np.inf

    def test_midpoint_averages_in_value_space(self):
        layer = self.make_layer()
        v_mid = layer.value_at(1.5)
        v_avg = 0.5 * (nm.log_to_neg_value(0.0) + nm.log_to_neg_value(1.0))
        assert v_mid == pytest.approx(v_avg, rel=1e-14)


class TestOnePeriodStep:
    def test_flat_market_matches_brute_force(self):
        grid = WealthGrid.geometric(0.05, 10.0, 64)
        v1 = terminal_layer(grid, PREFS, 1.0)
        v0, policy = one_period_step(v1, 1.0, FLAT_MARKET, PREFS)
        oracle = brute_force_flat_layer(v1, 1.0, FLAT_MARKET, PREFS)
        feas = np.isfinite(v0.nlv)
        assert feas[1:].all()
        rel = relative_value_change(oracle[feas], v0.nlv[feas])
        assert np.max(rel) < 1e-6
        # solver can only do at least as well as the discretized oracle
        assert np.all(v0.nlv[feas] >= oracle[feas] - 1e-9)

    def test_flat_market_with_mortality_matches_brute_force(self):
        grid = WealthGrid.geometric(0.05, 10.0, 48)
        v1 = terminal_layer(grid, PREFS, 1.0)
        v0, _ = one_period_step(v1, 0.7, FLAT_MARKET, PREFS)
        oracle = brute_force_flat_layer(v1, 0.7, FLAT_MARKET, PREFS)
        feas = np.isfinite(v0.nlv)
        assert np.max(relative_value_change(oracle[feas], v0.nlv[feas])) < 1e-6

    def test_boundary_budget_is_infeasible(self):
        # mu = r = 0 and certain survival: the lowest grid point exactly
        # prices the cheapest continuation, forcing zero consumption
        market = MarketParams(mu=0.0, sigma=0.2, r=0.0, dt=1.0)
        grid = WealthGrid.geometric(0.1, 5.0, 16)
        v1 = terminal_layer(grid, PREFS, 1.0)
        v0, policy = one_period_step(v1, 1.0, market, PREFS)
        assert v0.nlv[0] == -np.inf
        assert np.isnan(policy.log_c[0])
        assert np.isfinite(v0.nlv[1:]).all()

    def test_budget_identity_default_market(self):
        grid = WealthGrid.geometric(0.05, 30.0, 48)
        v1 = terminal_layer(grid, PREFS, 1.0)
        table = MortalityTable(65, np.array([0.05, 1.0]))
        pt = backward_induction(grid, table, MARKET, PREFS)
        assert budget_identity_gap(pt, 0) < 1e-8

    def test_root_residual(self):
        grid = WealthGrid.geometric(0.05, 30.0, 48)
        v1 = terminal_layer(grid, PREFS, 1.0)
        v0, policy = one_period_step(v1, 0.95, MARKET, PREFS)
        # recompute the budget equation at the recorded multipliers
        from pensionlab.solver import _PeriodProblem

        prob = _PeriodProblem(v1, 0.95, MARKET, PREFS)
        feas = policy.feasible()
        out = prob.evaluate(policy.log_eta[feas])
        resid = np.abs(out["log_w"] - np.log(grid.points[feas]))
        assert np.max(resid) <= 1e-10

    def test_bisection_root_cross_checked_by_dense_scan(self):
        grid = WealthGrid.geometric(0.2, 8.0, 12)
        v1 = terminal_layer(grid, PREFS, 1.0)
        v0, policy = one_period_step(v1, 0.9, MARKET, PREFS)
        etas, log_w = dense_eta_scan(v1, 0.9, MARKET, PREFS, lo=-20, hi=20, n=4001)
        b = 6
        target = math.log(grid.points[b])
        hits = np.where(np.diff(np.sign(log_w - target)) != 0)[0]
        assert hits.size >= 1
        nearest = etas[hits[np.argmin(np.abs(etas[hits] - policy.log_eta[b]))]]
        assert abs(nearest - policy.log_eta[b]) < 2 * (etas[1] - etas[0])

    def test_multiple_root_selection_takes_best_value(self):
        # coarse scarcity grid where the budget equation is non-monotone:
        # the recorded value must match the best root from a dense scan
        table = default_table()
        grid = default_grid(PREFS, 12.0, 48)
        layer = terminal_layer(grid, PREFS, 1.0)
        from pensionlab.solver import _PeriodProblem

        for t in range(table.horizon - 2, 39, -1):
            prob = _PeriodProblem(layer, float(table.survival[t]), MARKET, PREFS)
            nlv_new, _ = prob.solve_budgets()
            layer = ValueLayer(grid=grid, nlv=nlv_new)
        prob = _PeriodProblem(layer, float(table.survival[39]), MARKET, PREFS)
        nlv_new, pol = prob.solve_budgets()

        def g_at(le: float, target: float) -> float:
            return float(prob.evaluate(np.array([le]))["log_w"][0]) - target

        for b in (4, 6, 9):
            target = math.log(grid.points[b])
            center = float(pol.log_eta[b])
            les = np.linspace(center - 60, center + 60, 2401)
            gs = np.array([g_at(le, target) for le in les])
            crossings = np.where(np.diff(np.sign(gs)) != 0)[0]
            assert crossings.size >= 1
            best_scan = -np.inf
            for i in crossings:
                lo, hi, g_lo = les[i], les[i + 1], gs[i]
                for _ in range(70):
                    mid = 0.5 * (lo + hi)
                    g_mid = g_at(mid, target)
                    if (g_mid > 0) == (g_lo > 0):
                        lo, g_lo = mid, g_mid
                    else:
                        hi = mid
                out = prob.evaluate(np.array([0.5 * (lo + hi)]))
                best_scan = max(best_scan, float(prob._values_from(out)[0]))
            assert nlv_new[b] >= best_scan - 1e-6 * max(1.0, abs(best_scan))

    def test_truncation_insensitivity(self):
        grid = WealthGrid.geometric(0.05, 30.0, 48)
        table = MortalityTable(65, np.array([0.02, 0.04, 0.08, 1.0]))
        a_layers = backward_induction(grid, table, MARKET, PREFS, trunc_scale=1.0)
        b_layers = backward_induction(grid, table, MARKET, PREFS, trunc_scale=0.01)
        for la, lb in zip(a_layers.layers, b_layers.layers):
            finite = np.isfinite(la.nlv) & np.isfinite(lb.nlv)
            assert np.max(np.abs(la.nlv[finite] - lb.nlv[finite])) < 1e-6

    def test_invalid_survival_rejected(self):
        grid = WealthGrid.geometric(0.1, 5.0, 8)
        v1 = terminal_layer(grid, PREFS, 1.0)
        with pytest.raises(ValueError):
            one_period_step(v1, 1.5, MARKET, PREFS)


class TestBackwardInduction:
    def test_single_period_equals_terminal(self):
        grid = WealthGrid.geometric(0.1, 10.0, 16)
        table = MortalityTable(65, np.array([1.0]))
        pt = backward_induction(grid, table, MARKET, PREFS)
        want = terminal_layer(grid, PREFS, MARKET.dt)
        assert np.allclose(pt.layers[0].nlv, want.nlv, atol=0)
        assert pt.policies[0].terminal
        assert np.allclose(np.exp(pt.policies[0].log_c), grid.points, rtol=1e-14)

    def test_two_period_flat_certain_matches_nested_oracle(self):
        grid = WealthGrid.geometric(0.05, 10.0, 48)
        table = certain_survival_table(2)
        pt = backward_induction(grid, table, FLAT_MARKET, PREFS)
        oracle = brute_force_flat_layer(pt.layers[1], 1.0, FLAT_MARKET, PREFS)
        feas = np.isfinite(pt.layers[0].nlv)
        assert np.max(
            relative_value_change(oracle[feas], pt.layers[0].nlv[feas])
        ) < 1e-6

    def test_every_layer_valid(self):
        grid = WealthGrid.geometric(0.01, 30.0, 40)
        table = MortalityTable(65, np.concatenate([np.full(9, 0.08), [1.0]]))
        pt = backward_induction(grid, table, MARKET, PREFS)
        for layer in pt.layers:
            layer.validate()

    def test_start_index_and_snapping(self):
        grid = WealthGrid(np.array([1.0, 2.0, 4.0, 8.0]))
        table = MortalityTable(65, np.array([1.0]))
        pt = backward_induction(grid, table, MARKET, PREFS)
        assert pt.start_index(3.0) == 1  # snaps down
        assert pt.start_index(4.0) == 2  # exact hit
        with pytest.raises(InfeasibleStartError):
            pt.start_index(0.5)


class TestSolveDecumulation:
    def test_refinement_monotone_and_converging(self):
        table = MortalityTable(65, np.concatenate([np.full(7, 0.06), [1.0]]))
        base = WealthGrid.geometric(0.02, 20.0, 24)
        result = solve_decumulation(
            table, MARKET, PREFS, base, refinements=3, early_stop_tol=None
        )
        assert len(result.refinement_values) == 4
        for k in range(1, len(result.refinement_values)):
            coarse_grid = result.refinement_grids[k - 1]
            fine_grid = result.refinement_grids[k]
            assert fine_grid.is_refinement_of(coarse_grid)
            shared = np.searchsorted(fine_grid.points, coarse_grid.points)
            coarse = result.refinement_values[k - 1]
            fine = result.refinement_values[k][:, shared]
            both = np.isfinite(coarse) & np.isfinite(fine)
            assert np.all(fine[both] >= coarse[both] - 1e-9 * np.maximum(
                1.0, np.abs(coarse[both])
            ))
        assert result.refinement_deltas[-1] <= result.refinement_deltas[0]

    def test_early_stop(self):
        table = MortalityTable(65, np.array([0.1, 1.0]))
        base = WealthGrid.geometric(0.05, 10.0, 48)
        result = solve_decumulation(
            table, MARKET, PREFS, base, refinements=5, early_stop_tol=0.05
        )
        assert len(result.refinement_values) < 6

    def test_policy_serializable_fields(self):
        table = MortalityTable(65, np.array([0.1, 1.0]))
        base = WealthGrid.geometric(0.05, 10.0, 16)
        result = solve_decumulation(table, MARKET, PREFS, base, refinements=0)
        pol = result.policy.policies[0]
        feas = pol.feasible()
        assert np.isfinite(pol.log_eta[feas]).all()
        for b in np.where(feas)[0]:
            edges = pol.edges_slog[b]
            assert edges is not None and np.all(np.diff(edges) >= 0)


class TestPolicySampling:
    def test_next_state_respects_edges(self):
        table = MortalityTable(65, np.array([0.05, 1.0]))
        grid = WealthGrid.geometric(0.5, 10.0, 24)
        pt = backward_induction(grid, table, MARKET, PREFS)
        pol = pt.policies[0]
        b = pt.start_index(5.0)
        draws = nm.slog_norm_cdf(np.linspace(-8, 8, 4001))
        states = pol.next_state(b, draws)
        assert states.min() >= 0 and states.max() <= grid.size - 1
        assert np.all(np.diff(states) >= 0)  # higher shock, higher wealth

    def test_terminal_has_no_continuation(self):
        table = MortalityTable(65, np.array([1.0]))
        grid = WealthGrid.geometric(0.5, 10.0, 8)
        pt = backward_induction(grid, table, MARKET, PREFS)
        with pytest.raises(ValueError):
            pt.policies[0].next_state(0, np.array([0.0]))
