import numpy as np
import pytest

from mglmm import ConfigError, RandomDist, SimConfig, simulate_dataset, study_model
from mglmm.simulate import _draw_b_rows, substream


class TestSimulateDataset:
    def test_deterministic_bit_identical(self):
        sim = SimConfig(q=12, cluster_size=4, seed=123)
        model = study_model()
        a = simulate_dataset(model, sim, 7, const=50.0)
        b = simulate_dataset(model, sim, 7, const=50.0)
        for name in a.columns:
            assert np.array_equal(a.columns[name], b.columns[name]), name

    def test_different_replicates_differ(self):
        sim = SimConfig(q=12, cluster_size=4, seed=123)
        model = study_model()
        a = simulate_dataset(model, sim, 0)
        b = simulate_dataset(model, sim, 1)
        assert not np.array_equal(a.columns["y1"], b.columns["y1"])

    def test_shapes_and_columns(self):
        sim = SimConfig(q=9, cluster_size=3, seed=5)
        data = simulate_dataset(study_model(), sim, 0)
        assert data.n_rows == 27
        assert set(data.columns) == {"cluster", "x1", "x2", "y1", "y2"}
        assert np.array_equal(np.unique(data.columns["cluster"]), np.arange(9))
        # Poisson marginal produces integer counts
        y2 = data.columns["y2"]
        assert np.all(y2 == np.floor(y2))

    def test_effect_rows_covariance(self):
        # law of large numbers: sample covariance near const * base
        base = np.array([[0.28, 0.09], [0.09, 0.12]])
        const = 1.0
        q = 100_000
        rows = _draw_b_rows(substream(99, 0, 0), q, const * base, RandomDist())
        sample = rows.T @ rows / q
        se = np.sqrt((np.outer(np.diag(base), np.diag(base)) + base**2) / q)
        assert np.all(np.abs(sample - const * base) < 3 * se + 1e-12)

    def test_student_t_rows_covariance(self):
        base = np.array([[0.28, 0.09], [0.09, 0.12]])
        q = 200_000
        rows = _draw_b_rows(substream(7, 0, 0), q, base, RandomDist(type="student_t", dof=8.0))
        sample = rows.T @ rows / q
        assert np.all(np.abs(sample - base) < 0.01)

    def test_tiny_scale_recovers_fixed_effects_model(self):
        from mglmm import fit_glm, get_family, get_link

        sim = SimConfig(q=60, cluster_size=20, seed=21)
        model = study_model()
        data = simulate_dataset(model, sim, 0, const=1e-12)
        n = data.n_rows
        X = np.column_stack([np.ones(n), data.columns["x1"]])
        glm = fit_glm(np.asarray(data.columns["y1"], float), X, get_family("normal"), get_link("identity"))
        cov = glm.lam * np.linalg.inv(X.T @ X)
        assert np.all(np.abs(glm.beta - np.array([1.90, 0.21])) < 4 * np.sqrt(np.diag(cov)))

    def test_gaussian_conditional_variance(self):
        sim = SimConfig(q=400, cluster_size=30, seed=31, gaussian_cond_var=0.5)
        data = simulate_dataset(study_model(), sim, 0, const=1e-12)
        y1 = np.asarray(data.columns["y1"], float)
        x1 = np.asarray(data.columns["x1"], float)
        resid = y1 - (1.90 + 0.21 * x1)
        assert np.var(resid) == pytest.approx(0.5, rel=0.05)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SimConfig(sigma_base=((1.0, 2.0), (2.0, 1.0)))  # not PD
        with pytest.raises(ConfigError):
            SimConfig(q=0)

    def test_beta_length_must_match(self):
        sim = SimConfig(beta=(1.0, 2.0, 3.0))
        with pytest.raises(ConfigError):
            simulate_dataset(study_model(), sim, 0)
