"""Sandwich (Godambe) information for the inference-function estimator.

Sensitivity S and variability V are accumulated as sums over observations,
so the assembled inverse-information blocks estimate the sampling covariance
of the estimates directly, with no extra 1/n factor.  The block inverse is
computed through the Schur complement of the coefficient block and is
checked in the tests against a dense S^{-1} V S^{-T}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimator import FitResult, _fit_marginal, _fitted_components, _marginal_work

__all__ = [
    "GodambeBlocks",
    "godambe_inverse_blocks",
    "godambe_blocks",
    "sigma_b_hat",
    "UnconditionalAV",
    "unconditional_av",
    "RegularityReport",
    "check_regularity",
]

COND_LIMIT = 1e12


@dataclass
class GodambeBlocks:
    S_beta_beta: np.ndarray
    S_beta_b: np.ndarray
    S_b_beta: np.ndarray
    S_b_b: np.ndarray
    V_beta_beta: np.ndarray
    V_beta_b: np.ndarray
    V_b_beta: np.ndarray
    V_b_b: np.ndarray
    A: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    W: np.ndarray
    J_inv_beta: np.ndarray
    J_inv_b: np.ndarray
    J_inv_cross: np.ndarray

    @property
    def S(self) -> np.ndarray:
        return np.block([[self.S_beta_beta, self.S_beta_b], [self.S_b_beta, self.S_b_b]])

    @property
    def V(self) -> np.ndarray:
        return np.block([[self.V_beta_beta, self.V_beta_b], [self.V_b_beta, self.V_b_b]])

    @property
    def J_inv(self) -> np.ndarray:
        return np.block([[self.J_inv_beta, self.J_inv_cross.T], [self.J_inv_cross, self.J_inv_b]])


def _checked_inv(M: np.ndarray, label: str) -> np.ndarray:
    if M.size == 0:
        return M.copy()
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise np.linalg.LinAlgError(f"{label} is singular or ill conditioned (cond={cond:.3e})")
    return np.linalg.inv(M)


def godambe_inverse_blocks(S, V, k: int) -> GodambeBlocks:
    """Assemble S^{-1} V S^{-T} in (beta, b) block form.

    ``k`` is the size of the leading coefficient block.  Raises a linear
    algebra error, quoting condition numbers, when the coefficient block or
    its Schur complement is effectively singular.
    """
    S = np.asarray(S, dtype=float)
    V = np.asarray(V, dtype=float)
    p = S.shape[0]
    q = p - k
    Sbb = S[:k, :k]
    Sbr = S[:k, k:]
    Srb = S[k:, :k]
    Srr = S[k:, k:]

    Sbb_inv = _checked_inv(Sbb, "S_beta_beta")
    W = Srr - Srb @ Sbb_inv @ Sbr if k else Srr.copy()
    D = _checked_inv(W, "W (Schur complement)")
    if k:
        A = Sbb_inv + Sbb_inv @ Sbr @ D @ Srb @ Sbb_inv
        E = -Sbb_inv @ Sbr @ D
        C = -D @ Srb @ Sbb_inv
    else:
        A = np.zeros((0, 0))
        E = np.zeros((0, q))
        C = np.zeros((q, 0))

    top = np.hstack([A, E])  # k x (k+q) block row of S^{-1}
    bot = np.hstack([C, D])  # q x (k+q)
    J_inv_beta = top @ V @ top.T
    J_inv_cross = bot @ V @ top.T
    J_inv_b = bot @ V @ bot.T

    return GodambeBlocks(
        S_beta_beta=Sbb,
        S_beta_b=Sbr,
        S_b_beta=Srb,
        S_b_b=Srr,
        V_beta_beta=V[:k, :k],
        V_beta_b=V[:k, k:],
        V_b_beta=V[k:, :k],
        V_b_b=V[k:, k:],
        A=A,
        C=C,
        D=D,
        E=E,
        W=W,
        J_inv_beta=J_inv_beta,
        J_inv_b=J_inv_b,
        J_inv_cross=J_inv_cross,
    )


# ---------------------------------------------------------------------------
# Blocks evaluated at a fit
# ---------------------------------------------------------------------------


def _design_matrix(work) -> np.ndarray:
    """Dense [X | Z_1 | Z_2 | ...] for the sandwich accumulations."""
    n = work.n
    parts = [work.X]
    for idx, q in zip(work.idx_list, work.q_list):
        Z = np.zeros((n, q))
        Z[np.arange(n), idx] = 1.0
        parts.append(Z)
    return np.hstack(parts)


def _helmert_basis(q: int) -> np.ndarray:
    """Orthonormal basis of the mean-zero subspace of R^q."""
    T = np.zeros((q, q - 1))
    for j in range(1, q):
        T[:j, j - 1] = 1.0
        T[j, j - 1] = -float(j)
        T[:, j - 1] /= np.sqrt(j * (j + 1.0))
    return T


def _centring_reduction(k: int, q_list) -> tuple:
    """Block basis (P, T_b): with an intercept present, the joint design is
    rank deficient by one per component (a level shift of any component
    trades exactly against the intercept), so the sandwich is evaluated in
    centred effect coordinates where the estimator is identified.

    P maps reduced (beta, centred-effect) coordinates to the full ones;
    T_b is its effect part.
    """
    ts = [_helmert_basis(q) for q in q_list]
    q_total = sum(q_list)
    r_total = sum(q - 1 for q in q_list)
    T_b = np.zeros((q_total, r_total))
    at_r = at_q = 0
    for T, q in zip(ts, q_list):
        T_b[at_q : at_q + q, at_r : at_r + q - 1] = T
        at_q += q
        at_r += q - 1
    P = np.zeros((k + q_total, k + r_total))
    P[:k, :k] = np.eye(k)
    P[k:, k:] = T_b
    return P, T_b


def _sv_weights(work, mu, lam, mode: str):
    if mode == "empirical":
        s = work.score_terms(mu)
        return work.obs_weights(mu), s**2
    if mode == "model_based":
        t = 1.0 if work.trials is None else work.trials
        var = work.family.conditional_variance(mu, lam, trials=work.trials)
        vu = work.family.variance(mu)
        gp = work.link.derivative(mu)
        w_s = 2.0 * t / (vu * gp**2)
        w_v = 4.0 * var / (vu * gp) ** 2
        return w_s, w_v
    raise ValueError(f"unknown mode '{mode}'")


def godambe_blocks(fit: FitResult, mode: str = "empirical", marginal: int = 0, at=None) -> GodambeBlocks:
    """Sensitivity/variability blocks and inverse information at a fit.

    ``mode='empirical'`` uses the observed Jacobian and per-observation
    outer products; ``mode='model_based'`` replaces both by their
    conditional expectations under the fitted family.  ``at`` optionally
    overrides the evaluation point as (beta, b_list).

    Because the intercept absorbs the component levels, the sensitivity
    matrix of the unconstrained coordinates is structurally singular; the
    S/V blocks and the assembly therefore live in centred effect
    coordinates, while the reported J_inv_b and J_inv_cross are mapped back
    to one-entry-per-cluster coordinates (so J_inv_b is the singular
    covariance of the centred predictions).
    """
    design = fit.design
    work = _marginal_work(design.marginals[marginal], _fitted_components(design))
    beta, b_list = (fit.beta[marginal], fit.b_work[marginal]) if at is None else at
    return _blocks_at(work, beta, b_list, fit.lam[marginal], mode)


def sigma_b_hat(fit: FitResult, mode: str = "empirical"):
    """Covariance of the stacked predicted effects from the b-block of the
    inverse information, block diagonal across marginals.

    Falls back to a pseudo-inverse sandwich (flagged) when even the
    centred-coordinate sensitivity matrix is singular.
    """
    blocks = []
    flags = {}
    for j in range(len(fit.design.marginals)):
        try:
            blocks.append(godambe_blocks(fit, mode=mode, marginal=j).J_inv_b)
        except np.linalg.LinAlgError as exc:
            design = fit.design
            work = _marginal_work(design.marginals[j], _fitted_components(design))
            mu = work.mu(work.eta(np.asarray(fit.beta[j], float), fit.b_work[j]))
            M = _design_matrix(work)
            w_s, w_v = _sv_weights(work, mu, fit.lam[j], mode)
            P, T_b = _centring_reduction(work.k, work.q_list)
            MP = M @ P
            S = MP.T @ (MP * w_s[:, None])
            V = MP.T @ (MP * w_v[:, None])
            Sinv = np.linalg.pinv(S)
            reduced = (Sinv @ V @ Sinv.T)[work.k :, work.k :]
            blocks.append(T_b @ reduced @ T_b.T)
            flags[f"sigma_b_hat_fallback_{j}"] = str(exc)
    total = sum(b.shape[0] for b in blocks)
    out = np.zeros((total, total))
    at = 0
    for b in blocks:
        out[at : at + b.shape[0], at : at + b.shape[0]] = b
        at += b.shape[0]
    return out, flags


# ---------------------------------------------------------------------------
# Unconditional asymptotic variance by Monte Carlo
# ---------------------------------------------------------------------------


def _draw_effects(rng, fit: FitResult):
    """One draw of the random components at the fitted covariance, shaped as
    per-marginal lists matching the fitted components."""
    design = fit.design
    comps = _fitted_components(design)
    d = len(design.marginals)
    sig = fit.sigma2_or_Sigma
    dist = design.model.random_dist

    def scale_rows(z_rows, cov):
        L = np.linalg.cholesky(cov + 1e-12 * np.eye(cov.shape[0]))
        rows = z_rows @ L.T
        if dist.type == "student_t":
            nu = dist.dof
            rows *= np.sqrt((nu - 2.0) / nu)  # convert covariance to t scale
            g = rng.chisquare(nu, size=rows.shape[0]) / nu
            rows /= np.sqrt(g)[:, None]
        return rows

    if d > 1:
        q = comps[0].q
        Sigma = np.asarray(sig, dtype=float)
        rows = scale_rows(rng.standard_normal((q, Sigma.shape[0])), Sigma)
        return [[rows[:, j]] for j in range(d)]

    if isinstance(sig, dict):
        nested = dict(design.model.clusters.nested_pairs)
        if nested:
            (child_name, parent_name), = nested.items()
            child = comps[0]
            b1 = scale_rows(rng.standard_normal((child.q, 1)), np.array([[sig[child_name]]]))[:, 0]
            b2 = scale_rows(rng.standard_normal((int(child.parent_map.max()) + 1, 1)),
                            np.array([[sig[parent_name]]]))[:, 0]
            return [[b1 + b2[child.parent_map]]]
        vals = []
        for comp in comps:
            vals.append(scale_rows(rng.standard_normal((comp.q, 1)), np.array([[sig[comp.name]]]))[:, 0])
        return [vals]

    q = comps[0].q
    s2 = max(float(sig), 0.0)
    b = scale_rows(rng.standard_normal((q, 1)), np.array([[s2]]))[:, 0]
    return [[b]]


def _conditional_means(fit: FitResult, effects):
    """Exact conditional mean responses at the fit for one effect draw.

    Refitting against these recovers the large-sample coefficient value as a
    function of the effects alone, so the between-draw variance of the
    refits carries no conditional noise (the information term already
    accounts for that part).
    """
    design = fit.design
    ys = []
    for j, md in enumerate(design.marginals):
        work = _marginal_work(md, _fitted_components(design))
        mu = work.mu(work.eta(np.asarray(fit.beta[j], float), effects[j]))
        t = 1.0 if md.trials is None else md.trials
        ys.append(t * mu)
    return ys


@dataclass
class UnconditionalAV:
    av_beta: list
    av_b: list
    mean_jinv_beta: list
    refit_var_beta: list
    mean_jinv_b: list
    sigma2_term: list
    n_draws: int
    n_failed: int


def unconditional_av(fit: FitResult, n_mc: int, seed: int, mode: str = "model_based") -> UnconditionalAV:
    """Unconditional asymptotic covariances of coefficients and effects.

    Per draw: sample the random components at the fitted covariance,
    evaluate the inverse-information blocks there, simulate responses and
    refit the coefficients (warm started at the fit).  The coefficient
    covariance is the mean information term plus the between-draw variance
    of the refitted coefficients; the effect covariance adds the fitted
    random-component variance to the mean information term.  Both terms are
    also reported separately.  Failed refits are dropped and counted; more
    than 5% failures aborts.
    """
    design = fit.design
    d = len(design.marginals)
    comps = _fitted_components(design)
    from .estimator import FitOptions

    opts = FitOptions()
    jinv_beta = [[] for _ in range(d)]
    jinv_b = [[] for _ in range(d)]
    beta_draws = [[] for _ in range(d)]
    n_failed = 0

    for r in range(n_mc):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, r))))
        effects = _draw_effects(rng, fit)
        ys = _conditional_means(fit, effects)
        try:
            draws_beta = []
            draws_jb = []
            draws_jbb = []
            for j, md in enumerate(design.marginals):
                work = _marginal_work(md, comps)
                work_sim = type(work)(
                    y=ys[j], X=work.X, idx_list=work.idx_list, q_list=work.q_list,
                    family=work.family, link=work.link, trials=work.trials,
                )
                gb = _blocks_at(work_sim, fit.beta[j], effects[j], fit.lam[j], mode)
                start = (fit.beta[j], fit.lam[j], fit.b_work[j])
                beta_r, _, _, info = _fit_marginal(work_sim, opts, start)
                if not info["converged"]:
                    raise RuntimeError("refit did not converge")
                draws_beta.append(beta_r)
                draws_jb.append(gb.J_inv_beta)
                draws_jbb.append(gb.J_inv_b)
        except (RuntimeError, FloatingPointError, np.linalg.LinAlgError, ValueError):
            n_failed += 1
            continue
        for j in range(d):
            beta_draws[j].append(draws_beta[j])
            jinv_beta[j].append(draws_jb[j])
            jinv_b[j].append(draws_jbb[j])

    if n_failed > 0.05 * n_mc:
        raise RuntimeError(f"{n_failed} of {n_mc} Monte Carlo refits failed")

    av_beta, av_b, m_jb, v_b, m_jbb, s2_term = [], [], [], [], [], []
    for j in range(d):
        mean_j = np.mean(jinv_beta[j], axis=0)
        betas = np.asarray(beta_draws[j])
        var_beta = np.cov(betas.T, ddof=1) if betas.shape[1] > 1 else np.atleast_2d(np.var(betas, ddof=1))
        mean_jb = np.mean(jinv_b[j], axis=0)
        s2 = _effect_variance_matrix(fit, j)
        av_beta.append(mean_j + var_beta)
        av_b.append(mean_jb + s2)
        m_jb.append(mean_j)
        v_b.append(var_beta)
        m_jbb.append(mean_jb)
        s2_term.append(s2)
    return UnconditionalAV(
        av_beta=av_beta, av_b=av_b, mean_jinv_beta=m_jb, refit_var_beta=v_b,
        mean_jinv_b=m_jbb, sigma2_term=s2_term, n_draws=n_mc - n_failed, n_failed=n_failed,
    )


def _effect_variance_matrix(fit: FitResult, marginal: int) -> np.ndarray:
    """Fitted variance of the random components per fitted component block."""
    design = fit.design
    comps = _fitted_components(design)
    sig = fit.sigma2_or_Sigma
    if isinstance(sig, dict):
        nested = dict(design.model.clusters.nested_pairs)
        if nested:
            (child_name, parent_name), = nested.items()
            child = comps[0]
            C2 = np.zeros((child.q, int(child.parent_map.max()) + 1))
            C2[np.arange(child.q), child.parent_map] = 1.0
            return sig[child_name] * np.eye(child.q) + sig[parent_name] * (C2 @ C2.T)
        parts = [sig[c.name] * np.eye(c.q) for c in comps]
        total = sum(c.q for c in comps)
        out = np.zeros((total, total))
        at = 0
        for p in parts:
            out[at : at + p.shape[0], at : at + p.shape[0]] = p
            at += p.shape[0]
        return out
    if np.ndim(sig) == 2:
        return float(np.asarray(sig)[marginal, marginal]) * np.eye(comps[0].q)
    return float(sig) * np.eye(comps[0].q)


def _blocks_at(work, beta, b_list, lam, mode) -> GodambeBlocks:
    from dataclasses import replace

    mu = work.mu(work.eta(np.asarray(beta, float), [np.asarray(v, float) for v in b_list]))
    if not work.mu_ok(mu):
        raise FloatingPointError("mean outside domain at the evaluation point")
    M = _design_matrix(work)
    w_s, w_v = _sv_weights(work, mu, lam, mode)
    P, T_b = _centring_reduction(work.k, work.q_list)
    MP = M @ P
    S = MP.T @ (MP * w_s[:, None])
    V = MP.T @ (MP * w_v[:, None])
    blocks = godambe_inverse_blocks(S, V, work.k)
    return replace(
        blocks,
        J_inv_b=T_b @ blocks.J_inv_b @ T_b.T,
        J_inv_cross=T_b @ blocks.J_inv_cross,
    )


# ---------------------------------------------------------------------------
# Regularity diagnostics
# ---------------------------------------------------------------------------


@dataclass
class RegularityReport:
    psi_mean: np.ndarray
    psi_se: np.ndarray
    max_abs_z: float
    jacobian_max_rel_err: float
    v_min_eigenvalue: float
    s_min_singular_value: float
    details: dict = field(default_factory=dict)


def check_regularity(fit: FitResult, n_mc: int = 2000, seed: int = 0, marginal: int = 0) -> RegularityReport:
    """Diagnostics for the inference functions at the fitted state.

    Simulates responses at the fit to check the zero-mean property of the
    scores, compares the analytic Jacobian with central finite differences,
    and reports the extreme eigenvalue/singular value of the variability
    and sensitivity estimates.
    """
    design = fit.design
    comps = _fitted_components(design)
    md = design.marginals[marginal]
    work = _marginal_work(md, comps)
    beta = np.asarray(fit.beta[marginal], dtype=float)
    b_list = [np.asarray(v, float) for v in fit.b_work[marginal]]
    lam = fit.lam[marginal]

    draws = []
    for r in range(n_mc):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, r, marginal))))
        mu = work.mu(work.eta(beta, b_list))
        y = md.family.sample(rng, mu, lam, trials=md.trials)
        w = type(work)(y=y, X=work.X, idx_list=work.idx_list, q_list=work.q_list,
                       family=work.family, link=work.link, trials=work.trials)
        s = w.score_terms(mu)
        psi = np.concatenate([work.X.T @ s] + [np.bincount(i, weights=s, minlength=q)
                                               for i, q in zip(work.idx_list, work.q_list)])
        draws.append(psi)
    draws = np.asarray(draws)
    psi_mean = draws.mean(axis=0)
    psi_se = draws.std(axis=0, ddof=1) / np.sqrt(n_mc)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(psi_se > 0, np.abs(psi_mean) / psi_se, 0.0)

    jac_err = _jacobian_rel_error(work, beta, b_list)

    # extreme spectra in the centred coordinates where the model is identified
    mu = work.mu(work.eta(beta, b_list))
    M = _design_matrix(work) @ _centring_reduction(work.k, work.q_list)[0]
    w_s, w_v = _sv_weights(work, mu, lam, "empirical")
    S = M.T @ (M * w_s[:, None])
    V = M.T @ (M * w_v[:, None])
    v_min = float(np.linalg.eigvalsh(V)[0])
    s_min = float(np.linalg.svd(S, compute_uv=False)[-1])

    return RegularityReport(
        psi_mean=psi_mean,
        psi_se=psi_se,
        max_abs_z=float(np.max(z)),
        jacobian_max_rel_err=jac_err,
        v_min_eigenvalue=v_min,
        s_min_singular_value=s_min,
        details={"n_mc": n_mc, "seed": seed, "marginal": marginal},
    )


def _psi_full(work, theta, sizes):
    k = work.k
    beta = theta[:k]
    b_list = []
    at = k
    for q in sizes:
        b_list.append(theta[at : at + q])
        at += q
    mu = work.mu(work.eta(beta, b_list))
    s = work.score_terms(mu)
    return np.concatenate([work.X.T @ s] + [np.bincount(i, weights=s, minlength=q)
                                            for i, q in zip(work.idx_list, sizes)])


def _jacobian_rel_error(work, beta, b_list, h: float = 1e-6) -> float:
    sizes = work.q_list
    theta = np.concatenate([beta] + list(b_list))
    mu = work.mu(work.eta(beta, b_list))
    M = _design_matrix(work)
    analytic = M.T @ (M * work.obs_weights(mu)[:, None])

    p = theta.size
    fd = np.zeros((p, p))
    for i in range(p):
        step = h * max(1.0, abs(theta[i]))
        up = theta.copy()
        dn = theta.copy()
        up[i] += step
        dn[i] -= step
        fd[:, i] = (_psi_full(work, up, sizes) - _psi_full(work, dn, sizes)) / (2.0 * step)
    scale = np.maximum(np.abs(analytic), 1.0)
    return float(np.max(np.abs(fd - analytic) / scale))
