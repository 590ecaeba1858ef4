"""Random-component variance and covariance estimation.

The variance parameters maximise the integral of the sampling density of
the predicted effects (Gaussian, centred at the unknown effects with the
sandwich covariance) against the random-component density.  For Gaussian
components the integral has a closed form; for Student-t components it is
evaluated by quasi-Monte Carlo with a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special, stats

from .errors import ConfigError

__all__ = [
    "log_gaussian_integral",
    "estimate_variance_gaussian",
    "estimate_covariance_general",
    "estimate_for_fit",
]

SIGMA2_FLOOR = 1e-8
PSD_FLOOR = 1e-10
QMC_LOG2_POINTS = 17  # 2**17 = 131072 points


def repair_psd(M: np.ndarray, floor: float = PSD_FLOOR) -> np.ndarray:
    """Floor the eigenvalues of a symmetric matrix so it can be inverted."""
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + M.T)
    vals, vecs = np.linalg.eigh(M)
    if vals[0] >= floor:
        return M
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def log_gaussian_integral(b_hat, Sigma_b_hat, D) -> float:
    """Closed form of log int N(b_hat; b, Sigma_b_hat) N(b; 0, D) db.

    Written exactly as the determinant/quadratic-form product

        |2 pi Sigma|^{-1/2} |2 pi D|^{-1/2} exp(-b' Sigma^{-1} b / 2)
        |2 pi (Sigma^{-1} + D^{-1})^{-1}|^{1/2}
        exp(b' Sigma^{-1} (Sigma^{-1} + D^{-1})^{-1} Sigma^{-1} b / 2)

    with D the random-component covariance (sigma^2 I, a Kronecker form, or
    a sum of nesting indicators, depending on the structure).
    """
    b = np.asarray(b_hat, dtype=float)
    q = b.shape[0]
    Sig = repair_psd(Sigma_b_hat)
    D = np.asarray(D, dtype=float)
    log2pi = math.log(2.0 * math.pi)

    Sig_inv = np.linalg.inv(Sig)
    D_inv = np.linalg.inv(D)
    middle_inv = Sig_inv + D_inv

    _, logdet_sig = np.linalg.slogdet(Sig)
    _, logdet_d = np.linalg.slogdet(D)
    _, logdet_mid = np.linalg.slogdet(middle_inv)

    u = Sig_inv @ b
    core = np.linalg.solve(middle_inv, u)
    return (
        -0.5 * (q * log2pi + logdet_sig)
        - 0.5 * (q * log2pi + logdet_d)
        - 0.5 * float(b @ u)
        + 0.5 * (q * log2pi - logdet_mid)
        + 0.5 * float(u @ core)
    )


# ---------------------------------------------------------------------------
# One-dimensional Gaussian case
# ---------------------------------------------------------------------------


def _maximize_1d(objective, lo: float, hi: float):
    """Bounded maximiser on a log-sigma^2 axis with a short Newton polish."""
    res = optimize.minimize_scalar(lambda x: -objective(x), bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-12})
    x = float(res.x)
    for _ in range(3):
        h = 1e-5
        f0, fp, fm = objective(x), objective(x + h), objective(x - h)
        d1 = (fp - fm) / (2.0 * h)
        d2 = (fp - 2.0 * f0 + fm) / h**2
        if not np.isfinite(d2) or d2 >= 0:
            break
        x_new = float(np.clip(x - d1 / d2, lo, hi))
        if objective(x_new) >= f0:
            x = x_new
        else:
            break
    return x


def estimate_variance_gaussian(b_hat, Sigma_b_hat, floor: float = SIGMA2_FLOOR):
    """Variance of a single Gaussian random component.

    Maximises the closed-form integral over sigma^2 in (floor, sigma2_max],
    expanding the bracket when the maximum sits at the upper edge.  A
    maximum at the lower edge returns the floor with a boundary flag.
    """
    b_hat = np.asarray(b_hat, dtype=float)
    q = b_hat.shape[0]
    Sig = repair_psd(Sigma_b_hat)
    flags = {}

    def objective(log_s2):
        return log_gaussian_integral(b_hat, Sig, np.exp(log_s2) * np.eye(q))

    hi = math.log(1e6 * float(np.var(b_hat)) + 1.0)
    lo = math.log(floor)
    for _ in range(4):
        x = _maximize_1d(objective, lo, hi)
        if hi - x > 1e-3:
            break
        hi += math.log(100.0)
        flags["sigma2_bracket_expanded"] = True
    if x - lo < 1e-6:
        flags["sigma2_boundary"] = True
        return floor, flags
    return float(np.exp(x)), flags


# ---------------------------------------------------------------------------
# Student-t integrand via quasi-Monte Carlo
# ---------------------------------------------------------------------------


class _QmcCloud:
    """A fixed scrambled-Sobol point cloud under N(b_hat, Sigma_b_hat)."""

    def __init__(self, b_hat, Sigma_b_hat, seed: int = 0, log2_points: int = QMC_LOG2_POINTS):
        b_hat = np.asarray(b_hat, dtype=float)
        q = b_hat.shape[0]
        sob = stats.qmc.Sobol(d=q, scramble=True, seed=seed)
        u = sob.random_base2(log2_points)
        z = special.ndtri(np.clip(u, 1e-15, 1.0 - 1e-15))
        L = np.linalg.cholesky(repair_psd(Sigma_b_hat))
        self.points = b_hat[None, :] + z @ L.T
        self.n = self.points.shape[0]

    def log_mean(self, log_density_at_points) -> float:
        logf = log_density_at_points(self.points)
        return float(special.logsumexp(logf) - math.log(self.n))


def _t_logpdf_scalar(x, sigma2, dof):
    scale = math.sqrt(sigma2 * (dof - 2.0) / dof)
    return stats.t.logpdf(x / scale, df=dof) - math.log(scale)


def _t_logpdf_rows(rows, Sigma, dof):
    """Multivariate-t log density of each row, parameterised by covariance."""
    d = rows.shape[-1]
    scale = np.asarray(Sigma, dtype=float) * (dof - 2.0) / dof
    L = np.linalg.cholesky(repair_psd(scale))
    sol = np.linalg.solve(L, rows[..., None])[..., 0]
    quad = np.sum(sol**2, axis=-1)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    const = (
        special.gammaln((dof + d) / 2.0)
        - special.gammaln(dof / 2.0)
        - 0.5 * d * math.log(dof * math.pi)
        - 0.5 * logdet
    )
    return const - 0.5 * (dof + d) * np.log1p(quad / dof)


# ---------------------------------------------------------------------------
# General structures
# ---------------------------------------------------------------------------


def _chol_params_to_matrix(theta, d):
    L = np.zeros((d, d))
    at = 0
    for i in range(d):
        for j in range(i + 1):
            L[i, j] = math.exp(theta[at]) if i == j else theta[at]
            at += 1
    return L


def _matrix_to_chol_params(Sigma, d):
    L = np.linalg.cholesky(repair_psd(Sigma, 1e-8))
    theta = []
    for i in range(d):
        for j in range(i + 1):
            theta.append(math.log(max(L[i, i], 1e-8)) if i == j else L[i, j])
    return np.asarray(theta)


def estimate_covariance_general(b_hat, Sigma_b_hat, random_dist, structure):
    """Variance parameters for general random-component structures.

    ``structure`` describes what multiplies the identity in the integral:

    - ``{"kind": "single"}``: one component, scalar sigma^2;
    - ``{"kind": "multivariate", "d": d, "q": q}``: ``b_hat`` stacked by
      marginal, covariance Sigma (x) I_q, Sigma parameterised by its
      lower-triangular square root;
    - ``{"kind": "nested", "C_list": [...], "names": [...]}``: covariance
      sum_j sigma_j^2 C_j C_j', all sigma_j^2 maximised jointly.

    Returns (value, flags) where value is a float, a (d, d) matrix, or a
    name-keyed dict of floats.
    """
    b_hat = np.asarray(b_hat, dtype=float)
    kind = structure["kind"]
    dist_type = getattr(random_dist, "type", "gaussian")
    dof = getattr(random_dist, "dof", None)

    if kind == "single":
        if dist_type == "gaussian":
            return estimate_variance_gaussian(b_hat, Sigma_b_hat)
        cloud = _QmcCloud(b_hat, Sigma_b_hat, seed=structure.get("seed", 0))

        def objective(log_s2):
            s2 = float(np.exp(log_s2))
            return cloud.log_mean(lambda pts: np.sum(_t_logpdf_scalar(pts, s2, dof), axis=1))

        lo, hi = math.log(SIGMA2_FLOOR), math.log(1e6 * float(np.var(b_hat)) + 1.0)
        x = _maximize_1d(objective, lo, hi)
        flags = {"sigma2_boundary": True} if x - lo < 1e-6 else {}
        return (SIGMA2_FLOOR if flags else float(np.exp(x))), flags

    if kind == "multivariate":
        d, q = structure["d"], structure["q"]
        if d == 1:
            # code-path consistency: the 1-marginal case is the scalar case
            return estimate_covariance_general(b_hat, Sigma_b_hat, random_dist, {"kind": "single"})
        rows = b_hat.reshape(d, q).T
        moment = rows.T @ rows / q + 1e-8 * np.eye(d)
        theta0 = _matrix_to_chol_params(moment, d)

        if dist_type == "gaussian":
            def negobj(theta):
                L = _chol_params_to_matrix(theta, d)
                D = np.kron(L @ L.T + PSD_FLOOR * np.eye(d), np.eye(q))
                return -log_gaussian_integral(b_hat, Sigma_b_hat, D)
        else:
            cloud = _QmcCloud(b_hat, Sigma_b_hat, seed=structure.get("seed", 0))

            def negobj(theta):
                L = _chol_params_to_matrix(theta, d)
                Sigma = L @ L.T + PSD_FLOOR * np.eye(d)

                def logf(pts):
                    r = pts.reshape(pts.shape[0], d, q).transpose(0, 2, 1)
                    return np.sum(_t_logpdf_rows(r, Sigma, dof), axis=1)

                return -cloud.log_mean(logf)

        res = optimize.minimize(negobj, theta0, method="L-BFGS-B",
                                bounds=[(-23.0, 23.0)] * len(theta0))
        L = _chol_params_to_matrix(res.x, d)
        flags = {} if res.success else {"covariance_opt": str(res.message),
                                        "covariance_grad_norm": float(np.max(np.abs(res.jac)))}
        return L @ L.T, flags

    if kind == "nested":
        if dist_type != "gaussian":
            raise ConfigError("nested variance estimation is only available for Gaussian components")
        C_list = [np.asarray(C, dtype=float) for C in structure["C_list"]]
        names = structure["names"]

        def negobj(theta):
            D = sum(math.exp(t) * (C @ C.T) for t, C in zip(theta, C_list))
            D = D + PSD_FLOOR * np.eye(D.shape[0])
            return -log_gaussian_integral(b_hat, Sigma_b_hat, D)

        theta0 = np.full(len(C_list), math.log(max(float(np.var(b_hat)), 1e-3)))
        res = optimize.minimize(negobj, theta0, method="L-BFGS-B",
                                bounds=[(math.log(SIGMA2_FLOOR), 23.0)] * len(C_list))
        flags = {} if res.success else {"covariance_opt": str(res.message),
                                        "covariance_grad_norm": float(np.max(np.abs(res.jac)))}
        values = {name: float(np.exp(t)) for name, t in zip(names, res.x)}
        for name, t in zip(names, res.x):
            if t - math.log(SIGMA2_FLOOR) < 1e-6:
                flags[f"sigma2_boundary_{name}"] = True
        return values, flags

    raise ConfigError(f"unknown covariance structure '{kind}'")


# ---------------------------------------------------------------------------
# Dispatch from a fit
# ---------------------------------------------------------------------------


def estimate_for_fit(fit):
    """Estimate the random-component variance parameters of a fitted model."""
    from .estimator import _fitted_components
    from .sandwich import sigma_b_hat

    design = fit.design
    Sigma_bb, flags = sigma_b_hat(fit)
    comps = _fitted_components(design)
    d = len(design.marginals)
    dist = design.model.random_dist

    if d > 1:
        q = comps[0].q
        b_stack = np.concatenate([fit.b_work[j][0] for j in range(d)])
        value, f2 = estimate_covariance_general(
            b_stack, Sigma_bb, dist, {"kind": "multivariate", "d": d, "q": q}
        )
        flags.update(f2)
        return value, flags

    nested = dict(design.model.clusters.nested_pairs)
    if nested:
        (child_name, parent_name), = nested.items()
        child = comps[0]
        q2 = int(child.parent_map.max()) + 1
        C2 = np.zeros((child.q, q2))
        C2[np.arange(child.q), child.parent_map] = 1.0
        value, f2 = estimate_covariance_general(
            fit.b_work[0][0], Sigma_bb, dist,
            {"kind": "nested", "C_list": [np.eye(child.q), C2], "names": [child_name, parent_name]},
        )
        flags.update(f2)
        return value, flags

    if len(comps) == 1:
        value, f2 = estimate_covariance_general(fit.b_work[0][0], Sigma_bb, dist, {"kind": "single"})
        flags.update(f2)
        return value, flags

    # several non-nested components: one variance per component, each using
    # its own block of the effect covariance
    values = {}
    at = 0
    for comp, vec in zip(comps, fit.b_work[0]):
        block = Sigma_bb[at : at + comp.q, at : at + comp.q]
        v, f2 = estimate_covariance_general(vec, block, dist, {"kind": "single"})
        values[comp.name] = v
        flags.update({f"{k}_{comp.name}": v2 for k, v2 in f2.items()})
        at += comp.q
    return values, flags
