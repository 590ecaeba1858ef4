import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mglmm import (
    ClusterComponent,
    ClusterStructure,
    Dataset,
    DomainError,
    FitOptions,
    MarginalSpec,
    ModelSpec,
    fit,
    fit_glm,
    get_family,
    get_link,
    inference_functions,
    linear_predictor,
    predict_b,
    predict_nested,
    project_zero_mean,
    update_beta_lambda,
)
from mglmm.estimator import _fit_marginal, _make_work, _solve_b_single


def one_hot(idx, q):
    Z = np.zeros((len(idx), q))
    Z[np.arange(len(idx)), idx] = 1.0
    return Z


def constrained_ls_oracle(y, X, Z):
    """Least squares of y on (X, Z) with the mean-zero constraint on b,
    solved through the KKT system."""
    n, k = X.shape
    q = Z.shape[1]
    KKT = np.zeros((k + q + 1, k + q + 1))
    KKT[:k, :k] = X.T @ X
    KKT[:k, k : k + q] = X.T @ Z
    KKT[k : k + q, :k] = Z.T @ X
    KKT[k : k + q, k : k + q] = Z.T @ Z
    KKT[k : k + q, -1] = 1.0
    KKT[-1, k : k + q] = 1.0
    sol = np.linalg.solve(KKT, np.concatenate([X.T @ y, Z.T @ y, [0.0]]))
    return sol[:k], sol[k : k + q]


def gaussian_dataset(n=120, q=8, k=3, seed=0, sigma_b=0.8, noise=0.7):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, q, n)
    X = np.column_stack([np.ones(n)] + [rng.normal(size=n) for _ in range(k - 1)])
    beta = rng.normal(size=k)
    b = rng.normal(0, sigma_b, q)
    y = X @ beta + b[idx] + rng.normal(0, noise, n)
    return y, X, idx


class TestLinearPredictor:
    def test_identity_constant(self):
        state = linear_predictor([1.0], [0.0, 0.0], np.ones((3, 1)), np.array([0, 1, 0]), "identity")
        assert np.array_equal(state.eta, [1.0, 1.0, 1.0])
        assert np.array_equal(state.mu, [1.0, 1.0, 1.0])

    def test_log_link_cluster_effects(self):
        state = linear_predictor([0.0], [1.0, -1.0], np.ones((2, 1)), np.array([0, 1]), "log")
        assert np.allclose(state.mu, [math.e, 1.0 / math.e])

    def test_matrix_allocation_matches_index(self):
        y, X, idx = gaussian_dataset(40, 5)
        b = np.linspace(-1, 1, 5)
        beta = np.array([0.5, -0.2, 0.1])
        via_idx = linear_predictor(beta, b, X, idx, "identity")
        via_mat = linear_predictor(beta, b, X, one_hot(idx, 5), "identity")
        assert np.array_equal(via_idx.eta, via_mat.eta)

    @pytest.mark.parametrize("delta", [0.1, 1.0, 10.0])
    def test_intercept_shift_invariance_exact(self, delta):
        # dyadic state: every reparameterised sum is exact in binary floating point
        rng = np.random.default_rng(8)
        n, q = 24, 6
        idx = rng.integers(0, q, n)
        X = np.column_stack([np.ones(n), np.round(rng.normal(size=n) * 16) / 16])
        beta = np.array([0.0625, -0.125])
        b = rng.integers(-3, 4, q) / 16.0
        base = linear_predictor(beta, b, X, idx, "identity")
        shifted_beta = beta.copy()
        shifted_beta[0] += delta
        shifted = linear_predictor(shifted_beta, b - delta, X, idx, "identity")
        assert np.array_equal(base.eta, shifted.eta)

    def test_domain_violation_raises(self):
        with pytest.raises(DomainError):
            linear_predictor([-5.0], [0.0], np.ones((2, 1)), np.array([0, 0]), "inverse")


class TestInferenceFunctions:
    def test_normal_identity_symbolic(self):
        # d/dbeta of sum (y - X beta - Z b)^2 gives psi_beta = -2 X'(y - eta)
        y, X, idx = gaussian_dataset(60, 5, seed=2)
        q = 5
        beta = np.array([0.3, -0.6, 0.2])
        b = np.linspace(-0.5, 0.5, q)
        psi_beta, psi_b = inference_functions(beta, b, y, X, idx, "normal", "identity")
        resid = y - (X @ beta + b[idx])
        assert np.allclose(psi_beta, -2.0 * X.T @ resid, atol=1e-10)
        assert np.allclose(psi_b, -2.0 * one_hot(idx, q).T @ resid, atol=1e-10)

    def test_zero_at_exact_gaussian_mle(self):
        # one-way layout: conditional MLE has b_c + beta0 = cluster mean
        rng = np.random.default_rng(4)
        q, m = 6, 10
        idx = np.repeat(np.arange(q), m)
        y = rng.normal(2.0, 1.0, q * m)
        means = np.array([y[idx == c].mean() for c in range(q)])
        beta0 = means.mean()
        b = means - beta0
        _, psi_b = inference_functions([beta0], b, y, np.ones((q * m, 1)), idx, "normal", "identity")
        assert np.max(np.abs(psi_b)) < 1e-10

    def test_closed_form_score_matches_fd_all_families(self):
        # d d(y, mu)/d mu in closed form against finite differences of the deviance
        rng = np.random.default_rng(6)
        cases = [
            ("normal", rng.normal(0, 2, 50), rng.normal(0, 2, 50)),
            ("poisson", rng.integers(0, 9, 50).astype(float), rng.uniform(0.3, 6, 50)),
            ("gamma", rng.uniform(0.2, 5, 50), rng.uniform(0.2, 5, 50)),
            ("inverse_gaussian", rng.uniform(0.2, 4, 50), rng.uniform(0.2, 4, 50)),
            ("binomial", rng.integers(0, 2, 50).astype(float), rng.uniform(0.1, 0.9, 50)),
        ]
        for name, y, mu in cases:
            family = get_family(name)
            h = 1e-6 * np.maximum(np.abs(mu), 1.0)
            fd = (family.deviance(y, mu + h) - family.deviance(y, mu - h)) / (2 * h)
            assert np.allclose(family.deviance_dmu(y, mu), fd, rtol=1e-6, atol=1e-6), name

    def test_unbiased_at_truth_small(self):
        rng = np.random.default_rng(11)
        n, q = 60, 4
        idx = rng.integers(0, q, n)
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        beta = np.array([0.4, 0.8])
        b = np.array([0.3, -0.1, -0.4, 0.2])
        mu = X @ beta + b[idx]
        draws = []
        for r in range(400):
            y = np.random.default_rng(1000 + r).normal(mu, 0.9)
            pb, _ = inference_functions(beta, b, y, X, idx, "normal", "identity")
            draws.append(pb)
        draws = np.asarray(draws)
        z = np.abs(draws.mean(0)) / (draws.std(0, ddof=1) / math.sqrt(len(draws)))
        assert np.max(z) < 4.0


class TestProjection:
    def test_examples(self):
        assert np.array_equal(project_zero_mean([1.0, 2.0, 3.0]), [-1.0, 0.0, 1.0])
        assert np.array_equal(project_zero_mean([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
    def test_idempotent_and_centred(self, values):
        once = project_zero_mean(values)
        assert abs(float(np.mean(once))) < 1e-9 * max(1.0, float(np.max(np.abs(values))))
        assert np.allclose(project_zero_mean(once), once, atol=1e-12)


class TestPredictB:
    def test_gaussian_cluster_means(self):
        rng = np.random.default_rng(3)
        q, m = 5, 8
        idx = np.repeat(np.arange(q), m)
        y = rng.normal(1.0, 1.0, q * m)
        b_list, info = predict_b([], y, np.zeros((q * m, 0)), idx, "normal", "identity")
        means = np.array([y[idx == c].mean() for c in range(q)])
        assert np.allclose(b_list[0], means - means.mean(), atol=1e-9)
        assert info["converged"]

    def test_poisson_log_cluster_means(self):
        rng = np.random.default_rng(5)
        q, m = 4, 12
        idx = np.repeat(np.arange(q), m)
        y = rng.poisson(3.0, q * m).astype(float)
        b_list, _ = predict_b([0.0], y, np.ones((q * m, 1)), idx, "poisson", "log")
        logmeans = np.log(np.array([y[idx == c].mean() for c in range(q)]))
        assert np.allclose(b_list[0], logmeans - logmeans.mean(), atol=1e-8)

    def test_identical_clusters_give_zero(self):
        y = np.tile([1.0, 2.0, 3.0], 4)
        idx = np.repeat(np.arange(4), 3)
        b_list, _ = predict_b([2.0], y, np.ones((12, 1)), idx, "normal", "identity")
        assert np.allclose(b_list[0], 0.0, atol=1e-12)

    def test_monotone_objective(self):
        rng = np.random.default_rng(7)
        n, q = 90, 6
        idx = rng.integers(0, q, n)
        y = rng.poisson(4.0, n).astype(float)
        work = _make_work(y, np.ones((n, 1)), idx, "poisson", "log")
        _, info = _solve_b_single(work, np.array([1.0]), np.zeros(q), FitOptions())
        trace = info["objective_trace"]
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))

    def test_all_zero_poisson_cluster_clamped(self):
        y = np.array([3.0, 4.0, 0.0, 0.0, 2.0, 5.0])
        idx = np.array([0, 0, 1, 1, 2, 2])
        b_list, info = predict_b([0.0], y, np.ones((6, 1)), idx, "poisson", "log")
        assert 1 in info["clamped"]
        assert np.isfinite(b_list[0]).all()

    def test_two_components_joint(self):
        rng = np.random.default_rng(9)
        n = 200
        idx1 = rng.integers(0, 6, n)
        idx2 = rng.integers(0, 4, n)
        b1 = rng.normal(0, 0.7, 6)
        b2 = rng.normal(0, 0.5, 4)
        y = 1.0 + b1[idx1] + b2[idx2] + rng.normal(0, 0.4, n)
        b_list, info = predict_b([1.0], y, np.ones((n, 1)), [idx1, idx2], "normal", "identity")
        assert info["converged"]
        assert abs(float(np.mean(b_list[0]))) < 1e-12
        assert abs(float(np.mean(b_list[1]))) < 1e-12
        # oracle: least squares of residuals on [Z1 Z2] with per-component centring
        Z = np.hstack([one_hot(idx1, 6), one_hot(idx2, 4)])
        raw = np.linalg.lstsq(Z, y - 1.0, rcond=None)[0]
        assert np.allclose(b_list[0], raw[:6] - raw[:6].mean(), atol=1e-7)
        assert np.allclose(b_list[1], raw[6:] - raw[6:].mean(), atol=1e-7)


class TestUpdateBetaLambda:
    def test_normal_ols_oracle(self):
        y, X, idx = gaussian_dataset(100, 6, seed=12)
        q = 6
        beta, lam, _ = update_beta_lambda(np.zeros(q), y, X, idx, "normal", "identity")
        ols = np.linalg.solve(X.T @ X, X.T @ y)
        assert np.allclose(beta, ols, atol=1e-9)
        resid = y - X @ ols
        assert lam == pytest.approx(float(resid @ resid) / len(y), rel=1e-10)

    def test_poisson_lambda_fixed(self):
        rng = np.random.default_rng(14)
        n, q = 80, 5
        idx = rng.integers(0, q, n)
        y = rng.poisson(3.0, n).astype(float)
        _, lam, _ = update_beta_lambda(np.zeros(q), y, np.ones((n, 1)), idx, "poisson", "log")
        assert lam == 1.0

    def test_gamma_lambda_solves_score(self):
        from scipy import special

        rng = np.random.default_rng(15)
        n = 400
        shape = 2.5  # true lam = 0.4
        y = rng.gamma(shape, scale=2.0 / shape, size=n)
        idx = np.zeros(n, dtype=int)
        beta, lam, _ = update_beta_lambda(np.zeros(1), y, np.ones((n, 1)), idx, "gamma", "log")
        mu = np.exp(beta[0])
        dbar = float(np.mean(get_family("gamma").deviance(y, mu)))
        assert special.digamma(1.0 / lam) + math.log(lam) + dbar / 2.0 == pytest.approx(0.0, abs=1e-8)


class TestFit:
    def test_gaussian_reduction_matches_constrained_ls(self):
        rng = np.random.default_rng(21)
        n, q = 150, 7
        idx = rng.integers(0, q, n)
        x1 = rng.normal(size=n)
        b = rng.normal(0, 0.9, q)
        y = 0.8 + 0.5 * x1 + b[idx] + rng.normal(0, 0.6, n)
        data = Dataset.from_dict({"y": y, "x1": x1, "cl": idx})
        model = ModelSpec(
            marginals=[MarginalSpec("y", "normal", "identity", ("x1",))],
            clusters=ClusterStructure([ClusterComponent("cl", "cl")]),
        )
        res = fit(model, data, FitOptions(outer_tol=1e-11))
        beta_o, b_o = constrained_ls_oracle(y, np.column_stack([np.ones(n), x1]), one_hot(idx, q))
        assert np.max(np.abs(res.beta[0] - beta_o)) < 1e-8
        assert np.max(np.abs(res.b[0]["cl"] - b_o)) < 1e-8
        assert res.converged
        assert res.psi_max < 10 * FitOptions().inner_tol

    def test_sigma_zero_data_recovers_glm(self):
        rng = np.random.default_rng(22)
        n, q = 400, 10
        idx = rng.integers(0, q, n)
        x1 = rng.uniform(0, 1, n)
        y = rng.poisson(np.exp(0.5 + 0.8 * x1)).astype(float)
        data = Dataset.from_dict({"y": y, "x1": x1, "cl": idx})
        model = ModelSpec(
            marginals=[MarginalSpec("y", "poisson", "log", ("x1",))],
            clusters=ClusterStructure([ClusterComponent("cl", "cl")]),
        )
        res = fit(model, data)
        X = np.column_stack([np.ones(n), x1])
        glm = fit_glm(y, X, get_family("poisson"), get_link("log"))
        cov = np.linalg.inv(X.T @ (X * np.exp(X @ glm.beta)[:, None]))
        se = np.sqrt(np.diag(cov))
        assert np.all(np.abs(res.beta[0] - glm.beta) < 3 * se)

    def test_mean_zero_and_stationarity_invariants(self):
        rng = np.random.default_rng(23)
        sim_idx = rng.integers(0, 9, 200)
        y = rng.poisson(np.exp(1.0 + rng.normal(0, 0.4, 9)[sim_idx])).astype(float)
        data = Dataset.from_dict({"y": y, "cl": sim_idx})
        model = ModelSpec(
            marginals=[MarginalSpec("y", "poisson", "log")],
            clusters=ClusterStructure([ClusterComponent("cl", "cl")]),
        )
        res = fit(model, data)
        assert abs(float(np.mean(res.b[0]["cl"]))) <= 1e-12
        assert res.psi_max <= 10 * FitOptions().inner_tol
        assert res.lam[0] == 1.0

    def test_nonconvergence_reported_not_raised(self):
        rng = np.random.default_rng(24)
        idx = rng.integers(0, 8, 120)
        y = rng.poisson(np.exp(1.0 + rng.normal(0, 1.0, 8)[idx])).astype(float)
        data = Dataset.from_dict({"y": y, "cl": idx})
        model = ModelSpec(
            marginals=[MarginalSpec("y", "poisson", "log")],
            clusters=ClusterStructure([ClusterComponent("cl", "cl")]),
        )
        res = fit(model, data, FitOptions(max_outer=1), estimate_variance=False)
        assert not res.converged
        assert len(res.trace[0]) == 1

    def test_consistency_trend_with_n(self):
        # median coefficient error shrinks as n grows at fixed q and variance
        truth = np.array([0.5, -0.7])
        q = 10
        medians = []
        for n in (200, 800, 3200):
            errs = []
            for rep in range(60):
                rng = np.random.default_rng(hash((n, rep)) % (2**32))
                idx = rng.integers(0, q, n)
                x1 = rng.normal(size=n)
                b = rng.normal(0, 0.3, q)
                y = truth[0] + truth[1] * x1 + b[idx] + rng.normal(0, 1.0, n)
                X = np.column_stack([np.ones(n), x1])
                work = _make_work(y, X, idx, "normal", "identity")
                beta, _, _, _ = _fit_marginal(work, FitOptions())
                errs.append(abs(beta[1] - truth[1]))
            medians.append(float(np.median(errs)))
        assert medians[0] > medians[1] > medians[2]


class TestPredictNested:
    def test_hand_checked_example(self):
        b1, b2 = predict_nested(np.array([1.0, 3.0, 2.0, 4.0]), np.array([0, 0, 1, 1]))
        assert np.array_equal(b2, [2.0, 3.0])
        assert np.array_equal(b1, [-1.0, 1.0, -1.0, 1.0])

    def test_single_parent(self):
        vals = np.array([1.0, 2.0, 6.0])
        b1, b2 = predict_nested(vals, np.zeros(3, dtype=int))
        assert b2 == pytest.approx([3.0])
        assert np.allclose(b1, vals - 3.0)

    def test_constant_within_parent_gives_zero_child(self):
        b1, _ = predict_nested(np.array([2.0, 2.0, -1.0, -1.0]), np.array([0, 0, 1, 1]))
        assert np.allclose(b1, 0.0, atol=1e-15)

    def test_least_squares_identity(self):
        rng = np.random.default_rng(31)
        parent = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2])
        vals = rng.normal(size=9)
        b1, b2 = predict_nested(vals, parent)
        Z2 = one_hot(parent, 3)
        oracle = np.linalg.solve(Z2.T @ Z2, Z2.T @ vals)
        assert np.allclose(b2, oracle, atol=1e-12)
        assert np.allclose(b1, vals - Z2 @ b2, atol=1e-12)

    def test_nested_fit_end_to_end(self):
        rng = np.random.default_rng(32)
        q1, m = 12, 10
        child = np.repeat(np.arange(q1), m)
        parent = child // 3
        b1 = rng.normal(0, 0.5, q1)
        b2 = rng.normal(0, 0.8, 4)
        y = 1.0 + b1[child] + b2[parent[::1][child * 0] if False else (child // 3)] + rng.normal(0, 0.5, q1 * m)
        data = Dataset.from_dict({"y": y, "fine": child, "coarse": child // 3})
        model = ModelSpec(
            marginals=[MarginalSpec("y", "normal", "identity")],
            clusters=ClusterStructure(
                [ClusterComponent("fine", "fine", nested_in="coarse"), ClusterComponent("coarse", "coarse")]
            ),
        )
        res = fit(model, data)
        assert res.converged
        assert set(res.b[0]) == {"fine", "coarse"}
        # child effects average to zero within every parent
        fine = res.b[0]["fine"]
        for p in range(4):
            assert abs(float(np.mean(fine[3 * p : 3 * p + 3]))) < 1e-10
        assert isinstance(res.sigma2_or_Sigma, dict)
        assert set(res.sigma2_or_Sigma) == {"fine", "coarse"}
