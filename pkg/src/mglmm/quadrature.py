"""Marginal maximum likelihood by adaptive Gauss-Hermite quadrature.

For a univariate model with one Gaussian random component the marginal
likelihood factorises over clusters into one-dimensional integrals.  Each
integral is recentred at the mode of its integrand and rescaled by the
curvature there, then evaluated on Gauss-Hermite nodes; the profile is
maximised by quasi-Newton over (beta, log dispersion, log variance).

This estimator integrates the likelihood directly, so it serves as the
reference the prediction-based fit is compared against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .errors import ConfigError
from .estimator import _fitted_components, _marginal_work
from .glm import fit_glm
from .model import Dataset, ModelSpec, build_design, validate

__all__ = ["QuadratureResult", "quadrature_mle"]

LOG_S2_MIN = math.log(1e-10)


@dataclass
class QuadratureResult:
    beta: np.ndarray
    sigma2: float
    lam: float
    loglik: float
    converged: bool
    n_nodes: int
    sigma2_boundary: bool = False


def _cluster_modes(work, beta, lam, sigma2, max_iter=50):
    """Modes and curvatures of the per-cluster integrand logs."""
    idx, q = work.idx_list[0], work.q_list[0]
    v = np.zeros(q)
    inv2lam = np.broadcast_to(1.0 / (2.0 * work.family.deviance_scale(lam)), (work.n,))

    def cluster_obj(vv):
        mu = work.mu(work.eta(beta, [vv]))
        with np.errstate(all="ignore"):
            per = np.bincount(idx, weights=work.deviances(mu) * inv2lam, minlength=q)
        return per + 0.5 * vv**2 / sigma2

    def curvature(mu):
        h = work.obs_weights(mu)
        data_part = np.bincount(idx, weights=h * inv2lam, minlength=q)
        bad = ~np.isfinite(data_part) | (data_part <= 0)
        if bad.any():
            fisher = np.bincount(idx, weights=work.exp_weights(mu) * inv2lam, minlength=q)
            data_part = np.where(bad, fisher, data_part)
        return data_part + 1.0 / sigma2

    obj = cluster_obj(v)
    for _ in range(max_iter):
        mu = work.mu(work.eta(beta, [v]))
        s = work.score_terms(mu)
        with np.errstate(all="ignore"):
            grad = np.bincount(idx, weights=s * inv2lam, minlength=q) + v / sigma2
        if not np.all(np.isfinite(grad)) or np.max(np.abs(grad)) < 1e-11:
            break
        step = -grad / curvature(mu)
        scale = np.ones(q)
        accepted = np.zeros(q, dtype=bool)
        v_new = v.copy()
        for _ in range(30):
            trial = np.where(accepted, v_new, v + scale * step)
            obj_t = cluster_obj(trial)
            ok = np.isfinite(obj_t) & (obj_t <= obj + 1e-12 * (1.0 + np.abs(obj)))
            take = ok & ~accepted
            v_new[take] = trial[take]
            obj[take] = obj_t[take]
            accepted |= take
            if accepted.all():
                break
            scale[~accepted] /= 2.0
        if not accepted.any():
            break
        v = v_new
    curv = curvature(work.mu(work.eta(beta, [v])))
    return v, np.maximum(curv, 1e-12)


def _agq_loglik(work, beta, lam, sigma2, nodes, weights):
    """Sum over clusters of log of the recentred Gauss-Hermite sums."""
    idx, q = work.idx_list[0], work.q_list[0]
    v_hat, curv = _cluster_modes(work, beta, lam, sigma2)
    half_width = np.sqrt(2.0 / curv)

    log_terms = np.empty((q, nodes.size))
    for kk, (t, w) in enumerate(zip(nodes, weights)):
        v = v_hat + half_width * t
        mu = work.mu(work.eta(beta, [v]))
        with np.errstate(all="ignore"):
            logf = work.family.log_density(work.y, mu, lam, trials=work.trials)
        per = np.bincount(idx, weights=logf, minlength=q)
        per += -0.5 * v**2 / sigma2 - 0.5 * math.log(2.0 * math.pi * sigma2)
        log_terms[:, kk] = per + t**2 + math.log(w)
    log_ic = np.log(half_width) + special.logsumexp(log_terms, axis=1)
    return float(np.sum(log_ic))


def quadrature_mle(model: ModelSpec, data: Dataset, nodes: int = 20, marginal: int = 0) -> QuadratureResult:
    """Gauss-Hermite maximum likelihood for one marginal.

    Requires a single (non-nested) cluster component and Gaussian random
    components; for a multivariate model the requested marginal is treated
    as a univariate model on its own, so no covariance is estimated.
    """
    if nodes < 2:
        raise ConfigError("need at least 2 quadrature nodes")
    if model.random_dist.type != "gaussian":
        raise ConfigError("quadrature estimation requires Gaussian random components")
    if len(model.clusters.components) != 1:
        raise ConfigError("quadrature estimation requires a single cluster component")
    report = validate(model, data)
    if not report.ok:
        raise ConfigError("validation failed:\n" + report.summary())
    design = build_design(model, data)
    md = design.marginals[marginal]
    work = _marginal_work(md, _fitted_components(design))

    t_nodes, t_weights = np.polynomial.hermite.hermgauss(nodes)
    g0 = fit_glm(work.y, work.X, work.family, work.link, trials=work.trials)
    free_lam = not md.family.dispersion_fixed and md.spec.dispersion_fixed_value is None
    fixed_lam = 1.0 if md.family.dispersion_fixed else md.spec.dispersion_fixed_value

    def unpack(x):
        beta = x[: work.k]
        pos = work.k
        if free_lam:
            lam = math.exp(x[pos])
            pos += 1
        else:
            lam = float(fixed_lam)
        sigma2 = math.exp(x[pos])
        return beta, lam, sigma2

    def negloglik(x):
        beta, lam, sigma2 = unpack(x)
        with np.errstate(all="ignore"):
            try:
                value = _agq_loglik(work, beta, lam, sigma2, t_nodes, t_weights)
            except FloatingPointError:
                return 1e30
        return -value if np.isfinite(value) else 1e30

    x0 = list(g0.beta)
    bounds = [(None, None)] * work.k
    if free_lam:
        x0.append(math.log(max(g0.lam, 1e-8)))
        bounds.append((-34.0, 23.0))
    x0.append(math.log(0.1))
    bounds.append((LOG_S2_MIN, 23.0))

    res = optimize.minimize(negloglik, np.asarray(x0), method="L-BFGS-B", bounds=bounds,
                            options={"ftol": 1e-13, "gtol": 1e-9, "maxiter": 500})
    if not np.isfinite(res.fun) or res.fun >= 1e30:
        raise RuntimeError("quadrature likelihood is not finite at the optimum")
    beta, lam, sigma2 = unpack(res.x)
    boundary = res.x[-1] - LOG_S2_MIN < 1e-6
    return QuadratureResult(
        beta=np.asarray(beta),
        sigma2=float(sigma2),
        lam=float(lam),
        loglik=-float(res.fun),
        converged=bool(res.success),
        n_nodes=nodes,
        sigma2_boundary=bool(boundary),
    )
