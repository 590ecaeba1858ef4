"""Penalised quasi-likelihood baseline with Gaussian random components.

Stacks the marginals into one working linear mixed model: block-diagonal
fixed-effect and allocation matrices, GLM weights on the diagonal, and the
random-component covariance as the penalty on the stacked effects.  Each
sweep linearises the responses, maximises the working-model likelihood over
the covariance parameters (and any free dispersions), and solves the
penalised weighted least-squares system for coefficients and effects.

This is the integration-based comparator for the conditional-inference
estimator; it requires Gaussian random components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import ConfigError
from .estimator import FitOptions, FitResult, _fitted_components, _marginal_work
from .glm import fit_glm
from .model import Dataset, ModelSpec, build_design, validate
from .variance import _chol_params_to_matrix, _matrix_to_chol_params

__all__ = ["glm_weights", "fit_laplace"]

WEIGHT_CLAMP = 1e10


def glm_weights(mu, family, link, lam=1.0, trials=None):
    """Diagonal working weights 1 / (lam_eff * V(mu) * g'(mu)^2).

    ``lam_eff`` is the effective per-observation dispersion (1/trials for
    the binomial).  Entries at boundary means are clamped at 1e10.
    """
    lam_eff = family.effective_dispersion(lam, trials)
    with np.errstate(all="ignore"):
        w = 1.0 / (lam_eff * family.variance(mu) * link.derivative(mu) ** 2)
    clamped = ~np.isfinite(w) | (w > WEIGHT_CLAMP)
    return np.where(clamped, WEIGHT_CLAMP, w), int(np.sum(clamped))


@dataclass
class _Stack:
    """Stacked design for the working mixed model."""

    X: np.ndarray  # n_total x k_total, block diagonal over marginals
    Z: np.ndarray  # n_total x (effects), block diagonal over marginals
    k_slices: list
    n_slices: list
    b_slices: list  # per marginal: slice into the stacked effect vector
    works: list
    free_lam: list  # marginal indices with a free dispersion


def _build_stack(design) -> _Stack:
    comps = _fitted_components(design)
    works = [_marginal_work(md, comps) for md in design.marginals]
    d = len(works)
    n_per = [w.n for w in works]
    k_per = [w.k for w in works]
    q_total_per = [sum(w.q_list) for w in works]

    X = np.zeros((sum(n_per), sum(k_per)))
    Z = np.zeros((sum(n_per), sum(q_total_per)))
    k_slices, n_slices, b_slices = [], [], []
    row = col_k = col_q = 0
    for j, w in enumerate(works):
        rows = slice(row, row + n_per[j])
        X[rows, col_k : col_k + k_per[j]] = w.X
        at = col_q
        for idx, q in zip(w.idx_list, w.q_list):
            Z[np.arange(row, row + n_per[j]), at + idx] = 1.0
            at += q
        n_slices.append(rows)
        k_slices.append(slice(col_k, col_k + k_per[j]))
        b_slices.append(slice(col_q, col_q + q_total_per[j]))
        row += n_per[j]
        col_k += k_per[j]
        col_q += q_total_per[j]
    free_lam = [j for j, md in enumerate(design.marginals)
                if not md.family.dispersion_fixed and md.spec.dispersion_fixed_value is None]
    return _Stack(X=X, Z=Z, k_slices=k_slices, n_slices=n_slices, b_slices=b_slices,
                  works=works, free_lam=free_lam)


def _theta_layout(design):
    """Covariance parameter layout: multivariate Cholesky factor, or one
    log-variance per component."""
    d = len(design.marginals)
    comps = _fitted_components(design)
    nested = dict(design.model.clusters.nested_pairs)
    if d > 1:
        return {"kind": "multivariate", "d": d, "q": comps[0].q, "size": d * (d + 1) // 2}
    if nested:
        (child_name, parent_name), = nested.items()
        child = comps[0]
        q2 = int(child.parent_map.max()) + 1
        C2 = np.zeros((child.q, q2))
        C2[np.arange(child.q), child.parent_map] = 1.0
        return {"kind": "nested", "names": [child_name, parent_name],
                "C_list": [np.eye(child.q), C2], "size": 2}
    names = [c.name for c in comps]
    sizes = [c.q for c in comps]
    return {"kind": "components", "names": names, "sizes": sizes, "size": len(names)}


def _theta_to_D(theta, layout):
    if layout["kind"] == "multivariate":
        L = _chol_params_to_matrix(theta, layout["d"])
        return np.kron(L @ L.T, np.eye(layout["q"])) + 1e-10 * np.eye(layout["d"] * layout["q"]), L @ L.T
    if layout["kind"] == "nested":
        D = sum(math.exp(t) * (C @ C.T) for t, C in zip(theta, layout["C_list"]))
        return D + 1e-10 * np.eye(D.shape[0]), {n: float(np.exp(t)) for n, t in zip(layout["names"], theta)}
    parts = [math.exp(t) * np.eye(s) for t, s in zip(theta, layout["sizes"])]
    total = sum(layout["sizes"])
    D = np.zeros((total, total))
    at = 0
    for p in parts:
        D[at : at + p.shape[0], at : at + p.shape[0]] = p
        at += p.shape[0]
    value = {n: float(np.exp(t)) for n, t in zip(layout["names"], theta)}
    if len(layout["names"]) == 1:
        value = value[layout["names"][0]]
    return D + 1e-10 * np.eye(total), value


def _working_parts(stack: _Stack, beta, b, lams):
    """Means, weight pieces and working responses at the current state."""
    eta = stack.X @ beta + stack.Z @ b
    w_all = np.zeros(eta.shape[0])
    zeta = np.zeros(eta.shape[0])
    n_clamped = 0
    for j, w in enumerate(stack.works):
        rows = stack.n_slices[j]
        mu = w.mu(eta[rows])
        if not w.mu_ok(mu):
            raise FloatingPointError("working mean left its domain")
        wj, nc = glm_weights(mu, w.family, w.link, lams[j], trials=w.trials)
        n_clamped += nc
        t = 1.0 if w.trials is None else w.trials
        zeta[rows] = eta[rows] + (w.y / t - mu) * w.link.derivative(mu)
        w_all[rows] = wj
    return w_all, zeta, n_clamped


def _lam_scaling(stack: _Stack, w_all, lams, lams_new):
    """Rescale weights for new dispersions without recomputing mu terms."""
    w = w_all.copy()
    for j in stack.free_lam:
        w[stack.n_slices[j]] *= lams[j] / lams_new[j]
    return w


def _profile_negloglik(stack, layout, w_base, zeta, lams, theta_full):
    n_theta = layout["size"]
    theta = theta_full[:n_theta]
    lams_new = list(lams)
    for pos, j in enumerate(stack.free_lam):
        lams_new[j] = math.exp(theta_full[n_theta + pos])
    w = _lam_scaling(stack, w_base, lams, lams_new)
    D, _ = _theta_to_D(theta, layout)

    X, Z = stack.X, stack.Z
    WZ = Z * w[:, None]
    D_inv = np.linalg.inv(D)
    inner = Z.T @ WZ + D_inv
    try:
        beta, b = _solve_mme(stack, w, zeta, D_inv)
    except np.linalg.LinAlgError:
        return 1e30
    r = zeta - X @ beta
    quad = float(r @ (w * (r - Z @ b)))
    sign, logdet_inner = np.linalg.slogdet(inner)
    sign_d, logdet_d = np.linalg.slogdet(D)
    if sign <= 0 or sign_d <= 0:
        return 1e30
    logdet_v = -float(np.sum(np.log(w))) + logdet_d + logdet_inner
    return 0.5 * (logdet_v + quad)


def _solve_mme(stack, w, zeta, D_inv):
    """Penalised weighted least squares for (beta, b)."""
    X, Z = stack.X, stack.Z
    k = X.shape[1]
    U = np.hstack([X, Z])
    A = U.T @ (U * w[:, None])
    A[k:, k:] += D_inv
    rhs = U.T @ (w * zeta)
    sol = np.linalg.solve(A, rhs)
    return sol[:k], sol[k:]


def fit_laplace(model: ModelSpec, data: Dataset, opts: FitOptions | None = None,
                fixed_covariance=None) -> FitResult:
    """Fit by the penalised quasi-likelihood iteration.

    ``fixed_covariance`` pins the covariance parameters (a scalar variance,
    a name-keyed dict, or a matrix) instead of profiling them; dispersions
    are then still updated.
    """
    if model.random_dist.type != "gaussian":
        raise ConfigError("the Laplace baseline requires Gaussian random components")
    opts = opts or FitOptions()
    report = validate(model, data)
    if not report.ok:
        raise ConfigError("validation failed:\n" + report.summary())
    design = build_design(model, data)
    stack = _build_stack(design)
    layout = _theta_layout(design)

    lams = []
    beta = np.zeros(stack.X.shape[1])
    for j, w in enumerate(stack.works):
        g0 = fit_glm(w.y, w.X, w.family, w.link, trials=w.trials)
        beta[stack.k_slices[j]] = g0.beta
        md = design.marginals[j]
        lams.append(md.spec.dispersion_fixed_value if md.spec.dispersion_fixed_value is not None else g0.lam)
    b = np.zeros(stack.Z.shape[1])

    if fixed_covariance is not None:
        theta = _value_to_theta(fixed_covariance, layout)
    else:
        theta = np.full(layout["size"], math.log(0.1))
        if layout["kind"] == "multivariate":
            theta = _matrix_to_chol_params(0.1 * np.eye(layout["d"]), layout["d"])

    trace = []
    converged = False
    n_clamped_total = 0
    it = 0
    value = None
    for it in range(1, opts.max_outer + 1):
        w_base, zeta, nc = _working_parts(stack, beta, b, lams)
        n_clamped_total += nc

        if fixed_covariance is None or stack.free_lam:
            x0 = np.concatenate([theta, [math.log(lams[j]) for j in stack.free_lam]])
            n_theta = layout["size"]
            if fixed_covariance is not None:
                def neg(tf_lam):
                    return _profile_negloglik(stack, layout, w_base, zeta, lams,
                                              np.concatenate([theta, tf_lam]))
                if stack.free_lam:
                    res = optimize.minimize(neg, x0[n_theta:], method="L-BFGS-B",
                                            bounds=[(-34.0, 23.0)] * len(stack.free_lam))
                    lam_part = res.x
                else:
                    lam_part = np.zeros(0)
                theta_new = theta
            else:
                res = optimize.minimize(
                    lambda tf: _profile_negloglik(stack, layout, w_base, zeta, lams, tf),
                    x0, method="L-BFGS-B",
                    bounds=[(-23.0, 23.0)] * n_theta + [(-34.0, 23.0)] * len(stack.free_lam),
                )
                theta_new = res.x[:n_theta]
                lam_part = res.x[n_theta:]
            lams_new = list(lams)
            for pos, j in enumerate(stack.free_lam):
                lams_new[j] = math.exp(lam_part[pos])
        else:
            theta_new, lams_new = theta, list(lams)

        D, value = _theta_to_D(theta_new, layout)
        w = _lam_scaling(stack, w_base, lams, lams_new)
        beta_new, b_new = _solve_mme(stack, w, zeta, np.linalg.inv(D))

        change = max(
            float(np.max(np.abs(beta_new - beta))),
            float(np.max(np.abs(b_new - b))) if b.size else 0.0,
            float(np.max(np.abs(theta_new - theta))),
            max((abs(a - c) for a, c in zip(lams_new, lams)), default=0.0),
        )
        trace.append(change)
        beta, b, theta, lams = beta_new, b_new, theta_new, lams_new
        if change < opts.outer_tol:
            converged = True
            break

    # covariance of the stacked coefficients from the working GLS information
    w_base, zeta, _ = _working_parts(stack, beta, b, lams)
    D, value = _theta_to_D(theta, layout)
    beta_cov = _gls_beta_cov(stack, w_base, D)

    comps = _fitted_components(design)
    nested = dict(design.model.clusters.nested_pairs)
    betas, b_out, b_work = [], [], []
    for j in range(len(design.marginals)):
        betas.append(beta[stack.k_slices[j]].copy())
        bj = b[stack.b_slices[j]]
        per = {}
        vecs = []
        at = 0
        for comp in comps:
            vec = bj[at : at + comp.q].copy()
            per[comp.name] = vec
            vecs.append(vec)
            at += comp.q
        if nested:
            from .estimator import predict_nested

            (child_name, parent_name), = nested.items()
            child = comps[0]
            b1, b2 = predict_nested(vecs[0], child.parent_map)
            per = {child_name: b1, parent_name: b2}
        b_out.append(per)
        b_work.append(vecs)

    return FitResult(
        beta=betas,
        lam=[float(l) for l in lams],
        b=b_out,
        sigma2_or_Sigma=value,
        converged=converged,
        iterations=it,
        trace=[trace],
        method="laplace",
        flags={"clamped_weights": n_clamped_total} if n_clamped_total else {},
        design=design,
        b_work=b_work,
        beta_cov=[beta_cov[stack.k_slices[j], stack.k_slices[j]] for j in range(len(design.marginals))],
    )


def _gls_beta_cov(stack, w, D):
    X, Z = stack.X, stack.Z
    WZ = Z * w[:, None]
    inner = Z.T @ WZ + np.linalg.inv(D)
    # V^{-1} X = W X - W Z inner^{-1} Z' W X
    WX = X * w[:, None]
    VinvX = WX - WZ @ np.linalg.solve(inner, WZ.T @ X)
    return np.linalg.inv(X.T @ VinvX)


def _value_to_theta(value, layout):
    if layout["kind"] == "multivariate":
        return _matrix_to_chol_params(np.asarray(value, dtype=float), layout["d"])
    if isinstance(value, dict):
        return np.asarray([math.log(value[n]) for n in layout["names"]])
    return np.asarray([math.log(float(value))] * layout["size"])
