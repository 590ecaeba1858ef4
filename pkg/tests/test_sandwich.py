import numpy as np
import pytest

from mglmm import (
    ClusterComponent,
    ClusterStructure,
    Dataset,
    FitOptions,
    MarginalSpec,
    ModelSpec,
    check_regularity,
    fit,
    godambe_blocks,
    godambe_inverse_blocks,
    sigma_b_hat,
    unconditional_av,
)


def random_spd(rng, p, jitter=0.5):
    A = rng.normal(size=(p, p))
    return A @ A.T + jitter * np.eye(p)


def gaussian_fit(seed=0, n=200, q=6, sigma_b=0.8, noise=0.6, with_x=True, sigma_override=None):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, q, n)
    cols = {"cl": idx}
    eta = 1.0 + rng.normal(0, sigma_b, q)[idx]
    covs = ()
    if with_x:
        x1 = rng.normal(size=n)
        cols["x1"] = x1
        eta = eta + 0.5 * x1
        covs = ("x1",)
    cols["y"] = eta + rng.normal(0, noise, n)
    data = Dataset.from_dict(cols)
    model = ModelSpec(
        marginals=[MarginalSpec("y", "normal", "identity", covs)],
        clusters=ClusterStructure([ClusterComponent("cl", "cl")]),
    )
    res = fit(model, data)
    if sigma_override is not None:
        res.sigma2_or_Sigma = sigma_override
    return res


class TestBlockInverse:
    def test_matches_dense_on_random_instances(self):
        rng = np.random.default_rng(1)
        for trial in range(100):
            k = int(rng.integers(1, 6))
            q = int(rng.integers(1, 11))
            S = random_spd(rng, k + q)
            V = random_spd(rng, k + q)
            blocks = godambe_inverse_blocks(S, V, k)
            dense = np.linalg.solve(S, V) @ np.linalg.inv(S).T
            assert np.max(np.abs(blocks.J_inv - dense)) < 1e-10 * max(1.0, np.max(np.abs(dense)))

    def test_definitional_identities(self):
        rng = np.random.default_rng(2)
        k, q = 3, 4
        S = random_spd(rng, k + q)
        V = random_spd(rng, k + q)
        blocks = godambe_inverse_blocks(S, V, k)
        W_expected = blocks.S_b_b - blocks.S_b_beta @ np.linalg.inv(blocks.S_beta_beta) @ blocks.S_beta_b
        assert np.allclose(blocks.W, W_expected, atol=1e-12)
        assert np.allclose(blocks.D, np.linalg.inv(blocks.W), atol=1e-10)

    def test_k_zero_path(self):
        rng = np.random.default_rng(3)
        q = 5
        S = random_spd(rng, q)
        V = random_spd(rng, q)
        blocks = godambe_inverse_blocks(S, V, 0)
        expected = np.linalg.inv(S) @ V @ np.linalg.inv(S).T
        assert np.allclose(blocks.J_inv_b, expected, atol=1e-10)

    def test_singular_reported_with_condition(self):
        S = np.eye(4)
        S[0, 0] = 0.0
        with pytest.raises(np.linalg.LinAlgError, match="cond"):
            godambe_inverse_blocks(S, np.eye(4), 2)

    def test_ols_covariance_q0(self):
        # known-effects path: model-based sandwich collapses to lam (X'X)^{-1}
        from mglmm.estimator import _make_work
        from mglmm.sandwich import _design_matrix, _sv_weights

        rng = np.random.default_rng(4)
        n, k = 60, 3
        X = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
        y = X @ np.array([1.0, 0.4, -0.2]) + rng.normal(0, 1.0, n)
        lam = 1.7
        work = _make_work(y, X, [], "normal", "identity")
        mu = work.mu(work.eta(np.array([1.0, 0.4, -0.2]), []))
        M = _design_matrix(work)
        w_s, w_v = _sv_weights(work, mu, lam, "model_based")
        S = M.T @ (M * w_s[:, None])
        V = M.T @ (M * w_v[:, None])
        blocks = godambe_inverse_blocks(S, V, k)
        oracle = lam * np.linalg.inv(X.T @ X)
        assert np.allclose(blocks.J_inv_beta, oracle, atol=1e-12)


class TestSigmaBHat:
    def test_balanced_normal_matches_direct_sandwich(self):
        # balanced one-way layout, intercept only: compare against the dense
        # sandwich computed from first principles on the linear model
        rng = np.random.default_rng(5)
        q, m = 6, 20
        lam = 0.49
        idx = np.repeat(np.arange(q), m)
        n = q * m
        b = rng.normal(0, 0.8, q)
        y = 1.0 + b[idx] + rng.normal(0, np.sqrt(lam), n)
        data = Dataset.from_dict({"y": y, "cl": idx})
        model = ModelSpec(
            marginals=[MarginalSpec("y", "normal", "identity")],
            clusters=ClusterStructure([ClusterComponent("cl", "cl")]),
        )
        res = fit(model, data, FitOptions(outer_tol=1e-12))
        blocks = godambe_blocks(res, mode="model_based")
        # oracle from first principles: centred cluster means of i.i.d. noise
        # with variance lam have covariance (lam/m) (I - J/q)
        expected = res.lam[0] / m * (np.eye(q) - np.ones((q, q)) / q)
        assert np.allclose(blocks.J_inv_b, expected, atol=1e-10)
        # the centred direction carries no variance and the rest is exact
        assert np.allclose(blocks.J_inv_b @ np.ones(q), 0.0, atol=1e-10)

    def test_block_diagonal_without_coefficients(self):
        # with no fixed effects the clusters are independent: diagonal J_b
        rng = np.random.default_rng(6)
        q, m = 5, 15
        idx = np.repeat(np.arange(q), m)
        y = rng.normal(0.0, 1.0, q * m) + rng.normal(0, 0.7, q)[idx]
        from mglmm.estimator import _make_work
        from mglmm.sandwich import _design_matrix, _sv_weights, godambe_inverse_blocks

        work = _make_work(y, np.zeros((q * m, 0)), idx, "normal", "identity")
        b = np.array([y[idx == c].mean() for c in range(q)])
        mu = work.mu(work.eta(np.zeros(0), [b]))
        M = _design_matrix(work)
        w_s, w_v = _sv_weights(work, mu, 1.0, "empirical")
        S = M.T @ (M * w_s[:, None])
        V = M.T @ (M * w_v[:, None])
        blocks = godambe_inverse_blocks(S, V, 0)
        off = blocks.J_inv_b - np.diag(np.diag(blocks.J_inv_b))
        assert np.max(np.abs(off)) < 1e-12

    def test_psd_on_random_fitted_models(self):
        for seed in range(100):
            res = gaussian_fit(seed=seed, n=80, q=5)
            Sigma_bb, _ = sigma_b_hat(res)
            assert np.min(np.linalg.eigvalsh(0.5 * (Sigma_bb + Sigma_bb.T))) >= -1e-10


class TestUnconditionalAV:
    def test_sigma_zero_reduces_to_information_term(self):
        res = gaussian_fit(seed=11, sigma_override=0.0)
        av = unconditional_av(res, n_mc=40, seed=1)
        assert np.allclose(av.refit_var_beta[0], 0.0, atol=1e-12)
        assert np.allclose(av.av_beta[0], av.mean_jinv_beta[0], atol=1e-12)

    def test_effect_variance_term_exact(self):
        res = gaussian_fit(seed=12)
        av = unconditional_av(res, n_mc=30, seed=2)
        q = av.av_b[0].shape[0]
        assert np.allclose(av.av_b[0] - av.mean_jinv_b[0], res.sigma2_or_Sigma * np.eye(q), atol=1e-12)

    def test_matches_full_simulation_oracle(self):
        # Normal/identity: empirical covariance of the estimator over full
        # independent simulations vs the two-term decomposition
        rng = np.random.default_rng(21)
        q, m = 8, 25
        n = q * m
        idx = np.repeat(np.arange(q), m)
        x1 = rng.normal(size=n)
        beta_true = np.array([1.0, 0.5])
        sigma2_true, lam_true = 0.4, 0.6

        def make_fit(seed):
            r = np.random.default_rng(seed)
            b = r.normal(0, np.sqrt(sigma2_true), q)
            y = beta_true[0] + beta_true[1] * x1 + b[idx] + r.normal(0, np.sqrt(lam_true), n)
            data = Dataset.from_dict({"y": y, "x1": x1, "cl": idx})
            model = ModelSpec(
                marginals=[MarginalSpec("y", "normal", "identity", ("x1",))],
                clusters=ClusterStructure([ClusterComponent("cl", "cl")]),
            )
            return fit(model, data, estimate_variance=False)

        betas = np.array([make_fit(1000 + r).beta[0] for r in range(800)])
        empirical = np.cov(betas.T, ddof=1)

        res = make_fit(5)
        res.sigma2_or_Sigma = sigma2_true
        res.lam = [lam_true]
        res.beta = [beta_true]
        av = unconditional_av(res, n_mc=300, seed=3)
        # sampling error of an empirical covariance entry over R replicates
        var_entry = (np.outer(np.diag(empirical), np.diag(empirical)) + empirical**2) / 800
        assert np.all(np.abs(av.av_beta[0] - empirical) <= 3.0 * np.sqrt(var_entry) + 1e-12)

    def test_deterministic_given_seed(self):
        res = gaussian_fit(seed=13)
        a = unconditional_av(res, n_mc=20, seed=9)
        b = unconditional_av(res, n_mc=20, seed=9)
        assert np.array_equal(a.av_beta[0], b.av_beta[0])


class TestCheckRegularity:
    def test_normal_model_diagnostics(self):
        res = gaussian_fit(seed=31, n=150, q=5)
        report = check_regularity(res, n_mc=400, seed=4)
        assert report.max_abs_z < 4.0
        assert report.jacobian_max_rel_err < 1e-5
        assert report.v_min_eigenvalue > 0.0
        assert report.s_min_singular_value > 0.0

    def test_poisson_model_diagnostics(self):
        rng = np.random.default_rng(33)
        q, m = 6, 30
        idx = np.repeat(np.arange(q), m)
        x1 = rng.uniform(0, 1, q * m)
        b = rng.normal(0, 0.3, q)
        y = rng.poisson(np.exp(0.8 + 0.4 * x1 + b[idx])).astype(float)
        data = Dataset.from_dict({"y": y, "x1": x1, "cl": idx})
        model = ModelSpec(
            marginals=[MarginalSpec("y", "poisson", "log", ("x1",))],
            clusters=ClusterStructure([ClusterComponent("cl", "cl")]),
        )
        res = fit(model, data)
        report = check_regularity(res, n_mc=400, seed=5)
        assert report.max_abs_z < 4.0
        assert report.jacobian_max_rel_err < 1e-5
        assert report.v_min_eigenvalue > 0.0
