import dataclasses
import math

import numpy as np
import pytest

from srrr.exceptions import NumericalError, RetractionError
from srrr.linalg import qf, spd_factorize, sym
from srrr.manifold import gst_membership_error, st_membership_error, st_retract
from srrr.simulation import generate, make_scenario
from srrr.solver import (
    AdmmState,
    ArmijoConfig,
    FactorTriple,
    SolverConfig,
    armijo_manifold_step,
    euclid_grad_u,
    euclid_grad_v,
    extract_rank,
    fit,
    initialize,
    resolve_rho,
    update_d,
    update_duals,
    update_splits,
)
from srrr.tuning import Weights, adaptive_weights


def default_config(lam1=0.0, lam2=0.0, **kwargs):
    return SolverConfig(lambda1=lam1, lambda2=lam2, **kwargs)


def random_state(rng, n, p, q, r):
    """A well-formed ADMM state with feasible manifold blocks."""
    x = rng.standard_normal((n, p))
    g = sym(x.T @ x) / n
    metric = spd_factorize(g, 0.0)
    u = metric.inv_sqrt @ qf(metric.sqrt @ rng.standard_normal((p, r)))
    v = qf(rng.standard_normal((q, r)))
    state = AdmmState(
        u=u,
        v=v,
        d=rng.uniform(0.5, 3.0, size=r),
        u_split=u + 0.1 * rng.standard_normal((p, r)),
        v_split=v + 0.1 * rng.standard_normal((q, r)),
        v_group=v + 0.1 * rng.standard_normal((q, r)),
        dual_u=0.1 * rng.standard_normal((p, r)),
        dual_v=0.1 * rng.standard_normal((q, r)),
        dual_group=0.1 * rng.standard_normal((q, r)),
    )
    return x, metric, state


class TestInitialize:
    def test_orthogonal_design_identity_case(self):
        # X with X^T X = n I and Y = X: D tilde is all ones and U is feasible.
        rng = np.random.default_rng(60)
        n, p = 50, 4
        x = np.sqrt(n) * qf(rng.standard_normal((n, p)))
        state = initialize(x, x, p)
        np.testing.assert_allclose(state.d, np.ones(p), atol=1e-8)
        np.testing.assert_allclose(
            state.u.T @ (x.T @ x / n) @ state.u, np.eye(p), atol=1e-8
        )

    def test_planted_noiseless_reconstruction(self, planted_noiseless):
        data = planted_noiseless
        sc = data.scenario
        state = initialize(data.x, data.y, sc.r)
        fitted = data.x @ (state.u * state.d) @ state.v.T
        rel = np.linalg.norm(fitted - data.y) / np.linalg.norm(data.y)
        assert rel <= 1e-6

    def test_splits_and_duals(self, planted_noiseless):
        data = planted_noiseless
        state = initialize(data.x, data.y, 2)
        np.testing.assert_array_equal(state.u_split, state.u)
        np.testing.assert_array_equal(state.v_split, state.v)
        np.testing.assert_array_equal(state.v_group, state.v)
        assert not state.dual_u.any()
        assert not state.dual_v.any()
        assert not state.dual_group.any()
        assert state.iteration == 0

    def test_manifold_feasibility(self, planted_noisy):
        data = planted_noisy
        n = data.x.shape[0]
        state = initialize(data.x, data.y, 2)
        g = sym(data.x.T @ data.x) / n
        assert np.linalg.norm(state.u.T @ g @ state.u - np.eye(2)) <= 1e-8
        assert np.linalg.norm(state.v.T @ state.v - np.eye(2)) <= 1e-8

    def test_rank_beyond_identifiable_rejected(self):
        rng = np.random.default_rng(61)
        x = rng.standard_normal((30, 5))
        y = np.outer(x @ np.ones(5), np.ones(4))  # rank-1 response
        with pytest.raises(NumericalError, match="identifiable rank"):
            initialize(x, y, 3)

    def test_zero_response_rejected(self):
        rng = np.random.default_rng(62)
        x = rng.standard_normal((20, 4))
        with pytest.raises(NumericalError, match="identifiable rank"):
            initialize(x, np.zeros((20, 3)), 1)

    def test_rank_bounds(self):
        rng = np.random.default_rng(63)
        x = rng.standard_normal((20, 4))
        y = rng.standard_normal((20, 3))
        with pytest.raises(ValueError):
            initialize(x, y, 0)
        with pytest.raises(ValueError):
            initialize(x, y, 4)

    def test_row_mismatch(self):
        with pytest.raises(ValueError, match="row counts"):
            initialize(np.ones((5, 2)), np.ones((6, 2)), 1)


class TestEuclideanGradients:
    def test_vanishing_coupling_leaves_data_term(self):
        rng = np.random.default_rng(64)
        x, metric, state = random_state(rng, 40, 7, 5, 2)
        y = rng.standard_normal((40, 5))
        state.u_split = state.u.copy()
        state.dual_u = np.zeros_like(state.u)
        cfg = default_config()
        expected = -(x.T @ y) @ (state.v * state.d)
        np.testing.assert_allclose(
            euclid_grad_u(state, x, y, cfg), expected, atol=1e-10
        )

    def test_zero_data_zero_gradient(self):
        rng = np.random.default_rng(65)
        x, metric, state = random_state(rng, 30, 6, 4, 2)
        y = np.zeros((30, 4))
        state.u_split = state.u.copy()
        state.dual_u = np.zeros_like(state.u)
        state.v_split = state.v.copy()
        state.v_group = state.v.copy()
        state.dual_v = np.zeros_like(state.v)
        state.dual_group = np.zeros_like(state.v)
        cfg = default_config()
        assert np.allclose(euclid_grad_u(state, x, y, cfg), 0.0)
        assert np.allclose(euclid_grad_v(state, x, y, cfg), 0.0)

    @staticmethod
    def smooth_lagrangian_u(u, state, x, y, rho1):
        # Data term with the metric-constant quadratic part omitted, plus the
        # U coupling: the function whose gradient the update uses.
        lin = -float(np.sum(((x.T @ y) @ (state.v * state.d)) * u))
        dev = u - state.u_split + state.dual_u
        return lin + 0.5 * rho1 * float(np.sum(dev * dev))

    @staticmethod
    def smooth_lagrangian_v(v, state, x, y, rho2, rho3):
        lin = -float(np.sum((((x.T @ y).T @ state.u) * state.d) * v))
        dev2 = v - state.v_split + state.dual_v
        dev3 = v - state.v_group + state.dual_group
        return (
            lin
            + 0.5 * rho2 * float(np.sum(dev2 * dev2))
            + 0.5 * rho3 * float(np.sum(dev3 * dev3))
        )

    def test_gradient_u_matches_finite_differences(self):
        rng = np.random.default_rng(66)
        for trial in range(5):
            x, metric, state = random_state(rng, 30, 6, 4, 2)
            y = rng.standard_normal((30, 4))
            cfg = default_config()
            rho1 = resolve_rho(cfg, 30)[0]
            grad = euclid_grad_u(state, x, y, cfg)
            fd = np.zeros_like(grad)
            h = 1e-5
            for i in range(grad.shape[0]):
                for j in range(grad.shape[1]):
                    up = state.u.copy()
                    um = state.u.copy()
                    up[i, j] += h
                    um[i, j] -= h
                    fd[i, j] = (
                        self.smooth_lagrangian_u(up, state, x, y, rho1)
                        - self.smooth_lagrangian_u(um, state, x, y, rho1)
                    ) / (2 * h)
            assert np.linalg.norm(fd - grad) <= 1e-5 * np.linalg.norm(grad)

    def test_gradient_v_matches_finite_differences(self):
        rng = np.random.default_rng(67)
        for trial in range(5):
            x, metric, state = random_state(rng, 30, 6, 4, 2)
            y = rng.standard_normal((30, 4))
            cfg = default_config()
            _, rho2, rho3 = resolve_rho(cfg, 30)
            grad = euclid_grad_v(state, x, y, cfg)
            fd = np.zeros_like(grad)
            h = 1e-5
            for i in range(grad.shape[0]):
                for j in range(grad.shape[1]):
                    vp = state.v.copy()
                    vm = state.v.copy()
                    vp[i, j] += h
                    vm[i, j] -= h
                    fd[i, j] = (
                        self.smooth_lagrangian_v(vp, state, x, y, rho2, rho3)
                        - self.smooth_lagrangian_v(vm, state, x, y, rho2, rho3)
                    ) / (2 * h)
            assert np.linalg.norm(fd - grad) <= 1e-5 * np.linalg.norm(grad)


class TestArmijo:
    def test_zero_gradient_returns_point_unchanged(self):
        point = np.ones((3, 2))
        cfg = ArmijoConfig()
        new, t, backtracks = armijo_manifold_step(
            point, np.zeros((3, 2)), lambda p: 1.0, lambda p, z: p + z, cfg
        )
        assert new is point
        assert t == cfg.initial_step
        assert backtracks == 0

    @pytest.mark.parametrize("curvature,max_expected", [(1.0, 0), (3.0, 1), (6.0, 2)])
    def test_quadratic_accepts_quickly(self, curvature, max_expected):
        x0 = np.array([[1.0]])

        def objective(p):
            return 0.5 * curvature * float(p[0, 0] ** 2)

        grad = np.array([[curvature * 1.0]])
        new, t, backtracks = armijo_manifold_step(
            x0, grad, objective, lambda p, z: p + z, ArmijoConfig()
        )
        assert backtracks <= max_expected <= 3
        assert objective(new) < objective(x0)

    def test_exhaustion_returns_zero_step(self):
        x0 = np.array([[1.0]])
        cfg = ArmijoConfig(max_backtracks=5)
        # Ascent direction: no step can satisfy the decrease condition.
        new, t, backtracks = armijo_manifold_step(
            x0, np.array([[-1.0]]), lambda p: float(p[0, 0]), lambda p, z: p + z, cfg
        )
        assert t == 0.0
        assert backtracks == 5
        np.testing.assert_array_equal(new, x0)

    def test_non_finite_trials_are_rejected_not_fatal(self):
        x0 = np.array([[2.0]])

        def objective(p):
            val = float(p[0, 0])
            return float("inf") if val < 0.5 else 0.5 * val**2

        grad = np.array([[2.0]])
        new, t, backtracks = armijo_manifold_step(
            x0, grad, objective, lambda p, z: p + z, ArmijoConfig()
        )
        assert np.isfinite(objective(new))
        assert objective(new) < objective(x0)

    def test_retraction_error_treated_as_rejection(self):
        x0 = np.array([[1.0]])

        def retract(p, z):
            if np.linalg.norm(z) > 0.5:
                raise RetractionError("retraction undefined at this point")
            return p + z

        new, t, backtracks = armijo_manifold_step(
            x0, np.array([[1.0]]), lambda p: float(p[0, 0]), retract, ArmijoConfig()
        )
        assert t == 0.5
        assert backtracks == 1
        np.testing.assert_allclose(new, [[0.5]])


class TestUpdateD:
    def test_noiseless_feasible_factors_recover_d(self, planted_noiseless):
        data = planted_noiseless
        state = initialize(data.x, data.y, 2)
        d = update_d(state, data.x, data.y)
        np.testing.assert_allclose(d, state.d, atol=1e-8)

    def test_zero_response(self):
        rng = np.random.default_rng(68)
        x, metric, state = random_state(rng, 30, 6, 4, 2)
        np.testing.assert_allclose(
            update_d(state, x, np.zeros((30, 4))), np.zeros(2), atol=1e-15
        )

    def test_grid_refinement_oracle(self):
        # update_d minimizes ||Y - X U diag(d) V^T||_F^2 when U, V are feasible.
        rng = np.random.default_rng(69)
        x, metric, state = random_state(rng, 40, 6, 4, 2)
        y = rng.standard_normal((40, 4))
        d_hat = update_d(state, x, y)

        def sse(d):
            resid = y - x @ (state.u * d) @ state.v.T
            return float(np.sum(resid * resid))

        best = np.array([0.0, 0.0])
        lo = d_hat - 1.0
        hi = d_hat + 1.0
        for _ in range(8):
            g1 = np.linspace(lo[0], hi[0], 41)
            g2 = np.linspace(lo[1], hi[1], 41)
            vals = [[sse(np.array([a, b])) for b in g2] for a in g1]
            i, j = np.unravel_index(np.argmin(vals), (41, 41))
            best = np.array([g1[i], g2[j]])
            span = (hi - lo) / 10
            lo, hi = best - span, best + span
        np.testing.assert_allclose(d_hat, best, atol=1e-6)


class TestUpdateSplits:
    def make_weighted_config(self, state, n, lam1=0.0, lam2=0.0, alpha=0.5):
        p, r = state.u.shape
        q = state.v.shape[0]
        w = Weights(
            w_u=np.full((p, r), 2.0), w_v=np.full((q, r), 3.0), w_d=np.full(r, 0.5)
        )
        return SolverConfig(lambda1=lam1, lambda2=lam2, alpha=alpha, weights=w)

    def test_zero_penalty_passthrough(self):
        rng = np.random.default_rng(70)
        x, metric, state = random_state(rng, 30, 6, 4, 2)
        cfg = self.make_weighted_config(state, 30)
        u_split, v_split, v_group = update_splits(state, cfg, 30)
        np.testing.assert_allclose(u_split, state.u + state.dual_u, atol=1e-15)
        np.testing.assert_allclose(v_split, state.v + state.dual_v, atol=1e-15)
        np.testing.assert_allclose(v_group, state.v + state.dual_group, atol=1e-15)

    def test_alpha_one_disables_column_kill(self):
        rng = np.random.default_rng(71)
        x, metric, state = random_state(rng, 30, 6, 4, 2)
        cfg = self.make_weighted_config(state, 30, lam1=0.1, lam2=0.5, alpha=1.0)
        _, _, v_group = update_splits(state, cfg, 30)
        np.testing.assert_allclose(v_group, state.v + state.dual_group, atol=1e-15)

    def test_each_block_minimizes_its_lagrangian(self):
        # Scalar oracle for U*/V* entries; two-candidate oracle for V** columns.
        rng = np.random.default_rng(72)
        n = 30
        x, metric, state = random_state(rng, n, 6, 4, 2)
        q = 4
        cfg = self.make_weighted_config(state, n, lam1=2e-3, lam2=4e-3, alpha=0.4)
        rho1, rho2, rho3 = resolve_rho(cfg, n)
        u_split, v_split, v_group = update_splits(state, cfg, n)

        w = cfg.weights
        zu = state.u + state.dual_u
        for idx in [(0, 0), (3, 1), (5, 0)]:
            lam = n * cfg.lambda1 * w.w_u[idx]
            grid = np.linspace(zu[idx] - 2, zu[idx] + 2, 40001)
            vals = lam * np.abs(grid) + 0.5 * rho1 * (grid - zu[idx]) ** 2
            assert abs(u_split[idx] - grid[np.argmin(vals)]) <= 1e-4

        zg = state.v + state.dual_group
        for k in range(2):
            const = n * np.sqrt(q) * (1 - cfg.alpha) * cfg.lambda2 * w.w_d[k]
            cost_keep = const
            cost_kill = 0.5 * rho3 * float(zg[:, k] @ zg[:, k])
            expected = zg[:, k] if cost_keep < cost_kill else np.zeros(q)
            np.testing.assert_allclose(v_group[:, k], expected, atol=1e-12)

    def test_missing_weights_rejected(self):
        rng = np.random.default_rng(73)
        x, metric, state = random_state(rng, 30, 6, 4, 2)
        with pytest.raises(ValueError, match="weights"):
            update_splits(state, SolverConfig(lambda1=0.1, lambda2=0.1), 30)


class TestUpdateDuals:
    def test_consensus_leaves_duals_unchanged(self):
        rng = np.random.default_rng(74)
        x, metric, state = random_state(rng, 30, 6, 4, 2)
        state.u_split = state.u.copy()
        state.v_split = state.v.copy()
        state.v_group = state.v.copy()
        du, dv, dg = update_duals(state)
        np.testing.assert_allclose(du, state.dual_u, atol=1e-15)
        np.testing.assert_allclose(dv, state.dual_v, atol=1e-15)
        np.testing.assert_allclose(dg, state.dual_group, atol=1e-15)

    def test_residual_accumulates_from_zero(self):
        rng = np.random.default_rng(75)
        x, metric, state = random_state(rng, 30, 6, 4, 2)
        gap = rng.standard_normal(state.u.shape)
        state.u_split = state.u - gap
        state.dual_u = np.zeros_like(state.u)
        du, _, _ = update_duals(state)
        np.testing.assert_allclose(du, gap, atol=1e-15)


class TestExtractRank:
    def make_state(self, v_group):
        rng = np.random.default_rng(76)
        p, r = 5, v_group.shape[1]
        q = v_group.shape[0]
        return AdmmState(
            u=rng.standard_normal((p, r)),
            v=rng.standard_normal((q, r)),
            d=np.arange(1.0, r + 1),
            u_split=rng.standard_normal((p, r)),
            v_split=rng.standard_normal((q, r)),
            v_group=v_group,
            dual_u=np.zeros((p, r)),
            dual_v=np.zeros((q, r)),
            dual_group=np.zeros((q, r)),
        )

    def test_all_columns_kept(self):
        state = self.make_state(np.ones((4, 3)))
        factors = extract_rank(state)
        assert factors.rank == 3
        assert factors.u.shape == (5, 3)

    def test_partial_selection_preserves_order(self):
        v_group = np.ones((4, 3))
        v_group[:, 1] = 0.0
        state = self.make_state(v_group)
        factors = extract_rank(state)
        assert factors.rank == 2
        expected_cols = state.u_split[:, [0, 2]]
        np.testing.assert_array_equal(factors.u, expected_cols)

    def test_coefficient_invariant_under_normalization(self):
        state = self.make_state(np.ones((4, 2)))
        state.d = np.array([2.0, -3.0])
        raw = (state.u_split * state.d) @ state.v_split.T
        factors = extract_rank(state)
        np.testing.assert_allclose(factors.coefficient(), raw, atol=1e-12)
        assert np.all(factors.d >= 0)
        norms = np.linalg.norm(factors.v, axis=0)
        np.testing.assert_allclose(norms, np.ones(2), atol=1e-6)

    def test_rank_zero(self):
        state = self.make_state(np.zeros((4, 3)))
        factors = extract_rank(state)
        assert factors.rank == 0
        assert factors.u.shape == (5, 0)
        np.testing.assert_array_equal(factors.coefficient(), np.zeros((5, 4)))


class TestFit:
    def test_noiseless_zero_penalty_recovery(self, planted_noiseless):
        data = planted_noiseless
        sc = data.scenario
        result = fit(data.x, data.y, sc.r, default_config())
        c_true = sc.truth.coefficient()
        c_hat = result.factors.coefficient()
        rel = np.linalg.norm(data.x @ (c_hat - c_true)) / np.linalg.norm(
            data.x @ c_true
        )
        assert result.factors.rank == sc.r
        assert rel <= 1e-6

    def test_zero_response_propagates_initialization_error(self):
        rng = np.random.default_rng(77)
        x = rng.standard_normal((20, 5))
        with pytest.raises(NumericalError, match="identifiable rank"):
            fit(x, np.zeros((20, 4)), 2, default_config())

    def test_rank_zero_outcome_is_valid(self, planted_noisy):
        data = planted_noisy
        # A penalty far above every column's survival level kills all columns
        # at the first sweep; rank 0 is returned as a fit, not an error.
        cfg = default_config(lam1=0.0, lam2=50.0, alpha=0.0, max_iter=1)
        result = fit(data.x, data.y, 2, cfg)
        assert result.factors.rank == 0
        assert result.df == -1
        assert result.sse == pytest.approx(float(np.sum(data.y**2)), rel=1e-12)

    def test_manifold_feasibility_every_iteration(self, planted_noisy):
        data = planted_noisy
        n = data.x.shape[0]
        result = fit(
            data.x, data.y, 2, default_config(1e-3, 1e-3), collect_trace=True
        )
        assert result.trace, "trace should not be empty"
        assert max(t["feas_u"] for t in result.trace) <= 1e-8
        assert max(t["feas_v"] for t in result.trace) <= 1e-8

    def test_smooth_objective_monotone_at_gradient_steps(self, planted_noisy):
        data = planted_noisy
        result = fit(
            data.x, data.y, 2, default_config(1e-3, 1e-3), collect_trace=True
        )
        for t in result.trace:
            assert t["obj_u_after"] <= t["obj_u_before"] + 1e-9
            assert t["obj_v_after"] <= t["obj_v_before"] + 1e-9

    def test_convergence_flag_truth(self, planted_noisy):
        data = planted_noisy
        cfg = default_config(1e-3, 1e-3)
        result = fit(data.x, data.y, 2, cfg, collect_trace=True)
        assert result.converged
        assert max(result.primal_residuals) <= cfg.primal_tol
        last, prev = result.trace[-1], result.trace[-2]
        rel = abs(last["objective"] - prev["objective"]) / max(
            1.0, abs(prev["objective"])
        )
        assert rel <= cfg.objective_tol

    def test_sse_consistent_with_factors(self, planted_noisy):
        data = planted_noisy
        result = fit(data.x, data.y, 2, default_config(1e-3, 1e-3))
        resid = data.y - data.x @ result.factors.coefficient()
        assert result.sse == pytest.approx(float(np.sum(resid * resid)), rel=1e-8)

    def test_bitwise_determinism(self, planted_noisy):
        data = planted_noisy
        cfg = default_config(1e-3, 2e-3)
        r1 = fit(data.x, data.y, 2, cfg)
        r2 = fit(data.x, data.y, 2, cfg)
        np.testing.assert_array_equal(r1.factors.u, r2.factors.u)
        np.testing.assert_array_equal(r1.factors.d, r2.factors.d)
        np.testing.assert_array_equal(r1.factors.v, r2.factors.v)
        assert r1.sse == r2.sse
        assert r1.bic == r2.bic
        assert r1.iterations == r2.iterations

    def test_shared_init_not_mutated(self, planted_noisy):
        data = planted_noisy
        init = initialize(data.x, data.y, 2)
        snapshot = init.copy()
        fit(data.x, data.y, 2, default_config(1e-3, 1e-3), init=init)
        np.testing.assert_array_equal(init.u, snapshot.u)
        np.testing.assert_array_equal(init.v, snapshot.v)
        np.testing.assert_array_equal(init.dual_u, snapshot.dual_u)

    def test_support_shrinks_as_lambda1_grows(self, planted_noisy):
        data = planted_noisy
        counts = []
        for lam1 in [1e-6, 1e-4, 1e-2, 1e-1, 1.0]:
            result = fit(data.x, data.y, 2, default_config(lam1, 1e-4))
            counts.append(int(np.count_nonzero(result.factors.u)))
        assert all(b <= a for a, b in zip(counts, counts[1:]))

    def test_divergence_detected(self, planted_noisy):
        data = planted_noisy
        p, q, r = 13, 8, 2
        bad = Weights(
            w_u=np.full((p, r), 1e308), w_v=np.full((q, r), 1.0), w_d=np.ones(r)
        )
        cfg = default_config(1.0, 0.0)
        cfg = dataclasses.replace(cfg, weights=bad)
        with np.errstate(over="ignore"):
            with pytest.raises(NumericalError, match="divergence"):
                fit(data.x, data.y, r, cfg)

    def test_input_validation(self):
        with pytest.raises(ValueError, match="row counts"):
            fit(np.ones((5, 2)), np.ones((6, 2)), 1, default_config())
        x = np.ones((5, 2))
        y = np.ones((5, 2))
        y[0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            fit(x, y, 1, default_config())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            default_config(-1.0, 0.0).validate()
        with pytest.raises(ValueError):
            SolverConfig(lambda1=0.0, lambda2=0.0, alpha=1.5).validate()
        with pytest.raises(ValueError):
            SolverConfig(lambda1=0.0, lambda2=0.0, rho=(1.0, -1.0, 1.0)).validate()
        with pytest.raises(ValueError):
            SolverConfig(lambda1=0.0, lambda2=0.0, inner_steps=0).validate()


class TestResolveRho:
    def test_default_scales_with_sample_size(self):
        cfg = SolverConfig(lambda1=0.0, lambda2=0.0)
        assert resolve_rho(cfg, 100) == (500.0, 500.0, 500.0)

    def test_explicit_rho_passes_through(self):
        cfg = SolverConfig(lambda1=0.0, lambda2=0.0, rho=(1.0, 2.0, 3.0))
        assert resolve_rho(cfg, 100) == (1.0, 2.0, 3.0)
