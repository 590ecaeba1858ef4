"""Data generation for the simulation studies.

Two coupled marginals -- a Gaussian response with identity link and a
Poisson response with log link -- share one clustering; the cluster effects
of the two marginals are drawn jointly so their cross-covariance carries the
dependence between the responses.  Every replicate draws from counter-based
generator streams keyed by (seed, replicate, stream), so results do not
depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .model import ClusterComponent, ClusterStructure, Dataset, MarginalSpec, ModelSpec, RandomDist

__all__ = ["SimConfig", "study_model", "simulate_dataset", "substream"]

DEFAULT_SIGMA_BASE = ((0.28, 0.09), (0.09, 0.12))


@dataclass(frozen=True)
class SimConfig:
    """Settings of the two reference simulation designs."""

    beta: tuple = (1.90, 0.21)
    sigma_base: tuple = DEFAULT_SIGMA_BASE
    const_grid: tuple = (1.0, 50.0, 100.0)
    q: int = 60
    q_grid: tuple = (10, 50, 100)
    cluster_size: int = 5
    replicates: int = 500
    gaussian_cond_var: float = 0.5
    seed: int = 20260401
    random_dist: RandomDist = field(default_factory=RandomDist)

    def __post_init__(self):
        base = np.asarray(self.sigma_base, dtype=float)
        if base.ndim != 2 or base.shape[0] != base.shape[1]:
            raise ConfigError("sigma_base must be a square matrix")
        if np.any(np.linalg.eigvalsh(base) <= 0):
            raise ConfigError("sigma_base must be positive definite")
        if min(self.q, self.cluster_size, self.replicates) < 1:
            raise ConfigError("all counts must be positive")

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


def study_model(random_dist: RandomDist | None = None) -> ModelSpec:
    """The two-marginal (Gaussian + Poisson) reference model."""
    return ModelSpec(
        marginals=[
            MarginalSpec(response="y1", family="normal", link="identity", covariates=("x1",)),
            MarginalSpec(response="y2", family="poisson", link="log", covariates=("x2",)),
        ],
        clusters=ClusterStructure([ClusterComponent(name="cluster", column="cluster")]),
        random_dist=random_dist or RandomDist(),
    )


def substream(seed: int, replicate: int, stream: int) -> np.random.Generator:
    """Counter-based generator stream; independent of evaluation order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, replicate, stream))))


def _draw_b_rows(rng, q: int, cov: np.ndarray, dist: RandomDist) -> np.ndarray:
    """q i.i.d. rows with the given covariance (Gaussian or rescaled t)."""
    d = cov.shape[0]
    L = np.linalg.cholesky(cov + 1e-14 * np.eye(d))
    rows = rng.standard_normal((q, d)) @ L.T
    if dist.type == "student_t":
        nu = dist.dof
        rows *= np.sqrt((nu - 2.0) / nu)
        rows /= np.sqrt(rng.chisquare(nu, size=q) / nu)[:, None]
    return rows


def simulate_dataset(
    model: ModelSpec,
    sim: SimConfig,
    replicate_index: int,
    *,
    const: float = 1.0,
    q: int | None = None,
    return_effects: bool = False,
):
    """One simulated dataset for the given model at the given scale.

    The cluster effects are i.i.d. rows with covariance const * sigma_base
    (restricted to the number of marginals); covariates are i.i.d. uniform
    on (0, 1); responses are drawn from the marginal families at the fitted
    linear predictors.  Bit-reproducible given (seed, replicate_index).
    """
    if len(model.clusters.components) != 1:
        raise ConfigError("the simulation designs use a single cluster component")
    d = model.d
    q = sim.q if q is None else int(q)
    n = q * sim.cluster_size
    base = np.asarray(sim.sigma_base, dtype=float)[:d, :d]
    cov = float(const) * base
    if np.any(np.linalg.eigvalsh(cov) <= 0):
        raise ConfigError("the scaled effect covariance must be positive definite")

    cluster = np.repeat(np.arange(q), sim.cluster_size)
    rows = _draw_b_rows(substream(sim.seed, replicate_index, 0), q, cov, sim.random_dist)

    columns: dict[str, np.ndarray] = {"cluster": cluster}
    beta = np.asarray(sim.beta, dtype=float)
    stream = 1
    for j, marg in enumerate(model.marginals):
        for name in marg.covariates:
            if name not in columns:
                columns[name] = substream(sim.seed, replicate_index, stream).uniform(0.0, 1.0, size=n)
            stream += 1
        X = np.column_stack([np.ones(n)] + [columns[name] for name in marg.covariates])
        if X.shape[1] != beta.shape[0]:
            raise ConfigError(
                f"marginal '{marg.response}' has {X.shape[1]} coefficients but the "
                f"configuration supplies {beta.shape[0]}"
            )
        eta = X @ beta + rows[cluster, j]
        from .families import get_family, get_link

        family = get_family(marg.family)
        link = get_link(marg.link)
        mu = link.invert(eta)
        lam = sim.gaussian_cond_var if marg.family == "normal" else 1.0
        y = family.sample(substream(sim.seed, replicate_index, stream), mu, lam)
        columns[marg.response] = y
        stream += 1

    data = Dataset(columns)
    if return_effects:
        return data, rows
    return data
