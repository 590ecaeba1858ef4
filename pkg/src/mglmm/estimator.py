"""Conditional-inference fitting of mixed models.

The estimator alternates two steps until the parameters settle:

1. predict the cluster effects by maximising the conditional log likelihood
   in b with the coefficients held fixed, then centre each component to mean
   zero (the intercept absorbs the level, so only centred effects are
   identified);
2. re-estimate the coefficients and the dispersion with the centred effects
   held fixed.

No integral over the random components is evaluated anywhere.  The centred
prediction drops the random-component density term on purpose: its only
effect would be to shrink towards the common mode, which the centring
already pins down.

Both steps are damped Newton iterations on the deviance-gradient inference
functions

    psi_beta = sum_i x_i * d'(y_i, mu_i) / g'(mu_i),
    psi_b    = sum_i z_i * d'(y_i, mu_i) / g'(mu_i),

whose joint root is the estimate.  For a single clustering the b-system is
block diagonal, so it is solved as q independent one-dimensional problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .families import Family, Link, get_family, get_link
from .glm import estimate_dispersion, fit_glm
from .model import Dataset, Design, ModelSpec, build_design, validate

__all__ = [
    "FitOptions",
    "LinearState",
    "FitResult",
    "linear_predictor",
    "project_zero_mean",
    "inference_functions",
    "predict_b",
    "update_beta_lambda",
    "predict_nested",
    "fit",
]

B_CLAMP = 30.0  # bound on a per-cluster linear-predictor offset


@dataclass
class FitOptions:
    outer_tol: float = 1e-8
    max_outer: int = 200
    inner_tol: float = 1e-10
    max_inner: int = 100
    step_halving_max: int = 30

    def __post_init__(self):
        if min(self.outer_tol, self.inner_tol) <= 0 or min(self.max_outer, self.max_inner, self.step_halving_max) <= 0:
            raise ConfigError("all fit options must be positive")


@dataclass
class LinearState:
    eta: np.ndarray
    mu: np.ndarray


@dataclass
class FitResult:
    beta: list
    lam: list
    b: list  # per marginal: dict component name -> centred prediction
    sigma2_or_Sigma: object
    converged: bool
    iterations: int
    trace: list
    method: str = "condinf"
    psi_max: float | None = None
    flags: dict = field(default_factory=dict)
    design: Design | None = None
    b_work: list | None = None  # per marginal: list of vectors for the fitted components
    beta_cov: list | None = None  # per marginal coefficient covariance, when the method supplies one

    def parameter_table(self):
        """(marginal, name, value) triples for all betas and dispersions."""
        rows = []
        for j, md in enumerate(self.design.marginals):
            for name, value in zip(md.column_names, self.beta[j]):
                rows.append((md.spec.response, name, float(value)))
            rows.append((md.spec.response, "lambda", float(self.lam[j])))
        return rows


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def project_zero_mean(v: np.ndarray) -> np.ndarray:
    """Centre a vector: the projection onto the mean-zero subspace."""
    v = np.asarray(v, dtype=float)
    if v.size < 1:
        raise DomainError("cannot project an empty vector")
    return v - v.mean()


def _as_index_list(Z, n: int):
    if not isinstance(Z, (list, tuple)):
        Z = [Z]
    out = []
    for z in Z:
        z = np.asarray(z)
        if z.ndim == 2:
            if z.shape[0] != n:
                raise DomainError(f"allocation matrix has {z.shape[0]} rows, expected {n}")
            onehot = np.all((z == 0.0) | (z == 1.0)) and np.all(z.sum(axis=1) == 1.0)
            if not onehot:
                raise DomainError("allocation matrix rows must contain exactly one unit entry")
            out.append(np.argmax(z, axis=1))
        else:
            idx = z.astype(int)
            if idx.shape != (n,):
                raise DomainError("allocation index must have one entry per observation")
            out.append(idx)
    return out


def _as_b_list(b):
    # a flat sequence of scalars is one component; a sequence of vectors is several
    if isinstance(b, (list, tuple)) and len(b) and np.ndim(b[0]) >= 1:
        return [np.asarray(v, dtype=float) for v in b]
    arr = np.asarray(b, dtype=float)
    if arr.ndim != 1:
        raise DomainError("random-component values must be a vector or a list of vectors")
    return [arr]


def _eta_parts(beta, b_list, X, idx_list):
    """eta = X beta + sum_r b_r[idx_r], grouping the intercept with the first
    component so that the (intercept + delta, b - delta) reparameterisation
    cancels exactly, not just to rounding."""
    beta = np.asarray(beta, dtype=float)
    k = beta.shape[0]
    if k > 0 and b_list:
        eta = X[:, 1:] @ beta[1:] + (beta[0] + b_list[0])[idx_list[0]]
        rest = range(1, len(b_list))
    elif k > 0:
        eta = X @ beta
        rest = range(0)
    else:
        eta = b_list[0][idx_list[0]].astype(float, copy=True)
        rest = range(1, len(b_list))
    for r in rest:
        eta = eta + b_list[r][idx_list[r]]
    return eta


def linear_predictor(beta, b, X, Z, link) -> LinearState:
    """Linear predictor and conditional mean for given coefficients/effects."""
    X = np.asarray(X, dtype=float)
    link = get_link(link)
    b_list = _as_b_list(b)
    idx_list = _as_index_list(Z, X.shape[0])
    eta = _eta_parts(beta, b_list, X, idx_list)
    with np.errstate(all="ignore"):
        mu = link.invert(eta)
    if not np.all(np.isfinite(mu)) or not np.all(link.domain.contains(mu)):
        raise DomainError("linear predictor leaves the domain of the inverse link")
    return LinearState(eta=eta, mu=mu)


# ---------------------------------------------------------------------------
# Working quantities
# ---------------------------------------------------------------------------


@dataclass
class _Work:
    """All per-marginal arrays the inner loops need."""

    y: np.ndarray
    X: np.ndarray
    idx_list: list
    q_list: list
    family: Family
    link: Link
    trials: np.ndarray | None = None

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def k(self):
        return self.X.shape[1]

    def eta(self, beta, b_list):
        return _eta_parts(beta, b_list, self.X, self.idx_list)

    def mu(self, eta):
        with np.errstate(all="ignore"):
            return self.link.invert(eta)

    def mu_ok(self, mu):
        return np.all(np.isfinite(mu)) and np.all(self.family.mean_space.contains(mu)) and np.all(
            self.link.domain.contains(mu)
        )

    def deviances(self, mu):
        with np.errstate(all="ignore"):
            return self.family.deviance(self.y, mu, trials=self.trials)

    def score_terms(self, mu):
        """Per-observation s_i = d'(y_i, mu_i) / g'(mu_i)."""
        with np.errstate(all="ignore"):
            return self.family.deviance_dmu(self.y, mu, trials=self.trials) / self.link.derivative(mu)

    def obs_weights(self, mu):
        """d s_i / d eta_i, the observed Newton weights."""
        with np.errstate(all="ignore"):
            d1 = self.family.deviance_dmu(self.y, mu, trials=self.trials)
            d2 = self.family.deviance_d2mu(self.y, mu, trials=self.trials)
            gp = self.link.derivative(mu)
            gpp = self.link.second_derivative(mu)
            return (d2 * gp - d1 * gpp) / gp**3

    def exp_weights(self, mu):
        """Expected weights 2 t / (V(mu) g'(mu)^2); always positive."""
        t = 1.0 if self.trials is None else self.trials
        with np.errstate(all="ignore"):
            return 2.0 * t / (self.family.variance(mu) * self.link.derivative(mu) ** 2)


def _make_work(y, X, Z, family, link, trials=None) -> _Work:
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    idx_list = _as_index_list(Z, y.shape[0])
    q_list = [int(idx.max()) + 1 for idx in idx_list]
    return _Work(
        y=y,
        X=X,
        idx_list=idx_list,
        q_list=q_list,
        family=get_family(family),
        link=get_link(link),
        trials=None if trials is None else np.asarray(trials, dtype=float),
    )


def inference_functions(beta, b, y, X, Z, family, link, trials=None):
    """Deviance-gradient inference functions (psi_beta, psi_b).

    psi_b is the concatenation over components; both vanish at the joint
    conditional maximum.
    """
    work = _make_work(y, X, Z, family, link, trials)
    b_list = _as_b_list(b)
    mu = work.mu(work.eta(np.asarray(beta, dtype=float), b_list))
    if not work.mu_ok(mu):
        raise DomainError("inference functions evaluated outside the mean domain")
    s = work.score_terms(mu)
    psi_beta = work.X.T @ s
    psi_b = np.concatenate(
        [np.bincount(idx, weights=s, minlength=q) for idx, q in zip(work.idx_list, work.q_list)]
    )
    return psi_beta, psi_b


# ---------------------------------------------------------------------------
# Inner solvers
# ---------------------------------------------------------------------------


def _cluster_sums(idx, values, q):
    return np.bincount(idx, weights=values, minlength=q)


def _solve_b_single(work: _Work, beta, b0, opts: FitOptions):
    """Per-cluster damped Newton for a single clustering; returns the raw
    (uncentred) maximiser."""
    idx, q = work.idx_list[0], work.q_list[0]
    b = np.asarray(b0, dtype=float).copy()
    info = {"iterations": 0, "converged": False, "clamped": [], "objective_trace": [], "score_max": np.inf}

    mu = work.mu(work.eta(beta, [b]))
    if not work.mu_ok(mu):
        b = np.zeros(q)
        mu = work.mu(work.eta(beta, [b]))
    dev_c = _cluster_sums(idx, work.deviances(mu), q)
    info["objective_trace"].append(float(dev_c.sum()))

    clamped = np.zeros(q, dtype=bool)
    last_move = np.zeros(q)
    for it in range(1, opts.max_inner + 1):
        info["iterations"] = it
        s = work.score_terms(mu)
        score_c = _cluster_sums(idx, s, q)
        free = ~clamped
        info["score_max"] = float(np.max(np.abs(score_c[free]))) if free.any() else 0.0
        # a tiny score with a large last step marks a flat (degenerate)
        # direction: keep going until the offset clamp catches it
        settled = not free.any() or float(np.max(last_move[free])) < 1e-6 * (1.0 + float(np.max(np.abs(b))))
        if info["score_max"] < opts.inner_tol and settled:
            info["converged"] = True
            break

        h_c = _cluster_sums(idx, work.obs_weights(mu), q)
        bad = ~np.isfinite(h_c) | (h_c <= 0)
        if bad.any():
            h_c = np.where(bad, _cluster_sums(idx, work.exp_weights(mu), q), h_c)
        step = np.where(free, -score_c / h_c, 0.0)

        accepted = np.zeros(q, dtype=bool)
        accepted[~free] = True
        scale = np.ones(q)
        b_new = b.copy()
        for _ in range(opts.step_halving_max):
            trial = np.where(accepted, b_new, np.clip(b + scale * step, -B_CLAMP, B_CLAMP))
            mu_t = work.mu(work.eta(beta, [trial]))
            with np.errstate(all="ignore"):
                dev_t = _cluster_sums(idx, work.deviances(mu_t), q)
            ok = np.isfinite(dev_t) & (dev_t <= dev_c + 1e-12 * (1.0 + np.abs(dev_c)))
            take = ok & ~accepted
            b_new[take] = trial[take]
            dev_c[take] = dev_t[take]
            accepted |= take
            if accepted.all():
                break
            scale[~accepted] /= 2.0
        last_move = np.abs(b_new - b)
        b = b_new
        clamped = np.abs(b) >= B_CLAMP
        mu = work.mu(work.eta(beta, [b]))
        info["objective_trace"].append(float(dev_c.sum()))

    info["clamped"] = np.nonzero(clamped)[0].tolist()
    return b, info


def _solve_b_joint(work: _Work, beta, b0_list, opts: FitOptions):
    """Joint damped Newton over the concatenated effects of all components.

    The stacked allocation matrix is rank deficient by one (the component
    level shifts trade off against each other), so the Newton direction is
    the minimum-norm solution; centring afterwards fixes the gauge.
    """
    sizes = work.q_list
    offs = np.concatenate([[0], np.cumsum(sizes)])
    b = np.concatenate([np.asarray(v, dtype=float) for v in b0_list])
    info = {"iterations": 0, "converged": False, "clamped": [], "objective_trace": [], "score_max": np.inf}

    def split(vec):
        return [vec[offs[r] : offs[r + 1]] for r in range(len(sizes))]

    mu = work.mu(work.eta(beta, split(b)))
    if not work.mu_ok(mu):
        b = np.zeros_like(b)
        mu = work.mu(work.eta(beta, split(b)))
    dev = float(np.sum(work.deviances(mu)))
    info["objective_trace"].append(dev)

    for it in range(1, opts.max_inner + 1):
        info["iterations"] = it
        s = work.score_terms(mu)
        score = np.concatenate([_cluster_sums(idx, s, q) for idx, q in zip(work.idx_list, sizes)])
        info["score_max"] = float(np.max(np.abs(score)))
        if info["score_max"] < opts.inner_tol:
            info["converged"] = True
            break

        h = work.obs_weights(mu)
        if not np.all(np.isfinite(h)) or np.any(h <= 0):
            h = work.exp_weights(mu)
        H = np.zeros((offs[-1], offs[-1]))
        for r, idx_r in enumerate(work.idx_list):
            for c, idx_c in enumerate(work.idx_list):
                block = np.zeros((sizes[r], sizes[c]))
                np.add.at(block, (idx_r, idx_c), h)
                H[offs[r] : offs[r + 1], offs[c] : offs[c + 1]] = block
        step = np.linalg.lstsq(H, -score, rcond=None)[0]

        scale = 1.0
        for _ in range(opts.step_halving_max):
            trial = np.clip(b + scale * step, -B_CLAMP, B_CLAMP)
            mu_t = work.mu(work.eta(beta, split(trial)))
            with np.errstate(all="ignore"):
                dev_t = float(np.sum(work.deviances(mu_t)))
            if np.isfinite(dev_t) and dev_t <= dev + 1e-12 * (1.0 + abs(dev)):
                b, dev, mu = trial, dev_t, mu_t
                break
            scale /= 2.0
        else:
            break
        info["objective_trace"].append(dev)

    info["clamped"] = np.nonzero(np.abs(b) >= B_CLAMP)[0].tolist()
    return split(b), info


def predict_b(beta, y, X, Z, family, link, *, trials=None, initial=None, opts: FitOptions | None = None):
    """Centred prediction of the random components at fixed coefficients.

    Maximises the conditional log likelihood in b (the dispersion scales out)
    and projects each component onto the mean-zero subspace.  Returns the
    list of centred component vectors and a solver-info dict.
    """
    opts = opts or FitOptions()
    beta = np.asarray(beta, dtype=float)
    work = _make_work(y, X, Z, family, link, trials)
    b0 = [np.zeros(q) for q in work.q_list] if initial is None else [np.asarray(v, float) for v in _as_b_list(initial)]
    if len(work.idx_list) == 1:
        raw, info = _solve_b_single(work, beta, b0[0], opts)
        raw = [raw]
    else:
        raw, info = _solve_b_joint(work, beta, b0, opts)
    return [project_zero_mean(v) for v in raw], info


def _newton_beta(work: _Work, b_list, beta0, opts: FitOptions):
    beta = np.asarray(beta0, dtype=float).copy()
    if work.k == 0:
        return beta, {"iterations": 0, "converged": True, "score_max": 0.0}
    info = {"iterations": 0, "converged": False, "score_max": np.inf}

    mu = work.mu(work.eta(beta, b_list))
    if not work.mu_ok(mu):
        raise DomainError("starting coefficients leave the mean domain")
    dev = float(np.sum(work.deviances(mu)))

    for it in range(1, opts.max_inner + 1):
        info["iterations"] = it
        s = work.score_terms(mu)
        psi = work.X.T @ s
        info["score_max"] = float(np.max(np.abs(psi)))
        if info["score_max"] < opts.inner_tol:
            info["converged"] = True
            break

        h = work.obs_weights(mu)
        H = work.X.T @ (work.X * h[:, None])
        try:
            step = np.linalg.solve(H, -psi)
            if not np.all(np.isfinite(step)) or psi @ step >= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            h = work.exp_weights(mu)
            H = work.X.T @ (work.X * h[:, None])
            step = np.linalg.solve(H, -psi)

        scale = 1.0
        for _ in range(opts.step_halving_max):
            trial = beta + scale * step
            mu_t = work.mu(work.eta(trial, b_list))
            with np.errstate(all="ignore"):
                dev_t = float(np.sum(work.deviances(mu_t)))
            if np.isfinite(dev_t) and dev_t <= dev + 1e-12 * (1.0 + abs(dev)):
                beta, dev, mu = trial, dev_t, mu_t
                break
            scale /= 2.0
        else:
            break
    return beta, info


def update_beta_lambda(b_star, y, X, Z, family, link, *, trials=None, beta0=None, opts=None, fixed_lam=None):
    """Re-estimate coefficients and dispersion at fixed centred effects.

    The dispersion cancels from the coefficient stationarity condition, so
    beta is found first by damped Newton and the dispersion afterwards by
    its one-dimensional maximum-likelihood update.
    """
    opts = opts or FitOptions()
    work = _make_work(y, X, Z, family, link, trials)
    b_list = _as_b_list(b_star)
    if beta0 is None:
        beta0 = np.zeros(work.k)
    beta, info = _newton_beta(work, b_list, beta0, opts)
    mu = work.mu(work.eta(beta, b_list))
    if fixed_lam is not None:
        lam = float(fixed_lam)
    else:
        lam = estimate_dispersion(work.family, work.y, mu, trials=work.trials)
    return beta, lam, info


def predict_nested(b_bar1, parent_map, q_parent=None):
    """Split a child-level prediction into parent means plus residuals.

    Equivalent to regressing the child values on the child-to-parent 0/1
    indicator matrix: the parent effect is the mean of its children, the
    child effect is what remains.
    """
    b_bar1 = np.asarray(b_bar1, dtype=float)
    parent_map = np.asarray(parent_map, dtype=int)
    q2 = int(parent_map.max()) + 1 if q_parent is None else int(q_parent)
    counts = np.bincount(parent_map, minlength=q2)
    if np.any(counts == 0):
        raise ConfigError("every parent cluster needs at least one child cluster")
    b2 = np.bincount(parent_map, weights=b_bar1, minlength=q2) / counts
    b1 = b_bar1 - b2[parent_map]
    return b1, b2


# ---------------------------------------------------------------------------
# Full fit
# ---------------------------------------------------------------------------


def _polish_joint(work: _Work, beta, b_list, opts: FitOptions, max_polish: int = 25):
    """Joint Newton refinement of (beta, b) after the alternation has settled.

    Each accepted step is followed by a gauge fix: every component is
    centred and the intercept absorbs the total shift, which leaves the
    linear predictor unchanged, so the refinement converges to a root with
    the centring constraint holding exactly.
    """
    beta = np.asarray(beta, dtype=float).copy()
    sizes = work.q_list
    offs = np.concatenate([[0], np.cumsum(sizes)])
    b = np.concatenate([np.asarray(v, dtype=float) for v in b_list])

    parts = [work.X]
    for idx, q in zip(work.idx_list, sizes):
        Z = np.zeros((work.n, q))
        Z[np.arange(work.n), idx] = 1.0
        parts.append(Z)
    M = np.hstack(parts)
    k = work.k

    def split(vec):
        return [vec[offs[r] : offs[r + 1]] for r in range(len(sizes))]

    def gauge_fix(beta_v, b_v):
        if k == 0:
            return beta_v, np.concatenate([project_zero_mean(v) for v in split(b_v)])
        shift = 0.0
        fixed = []
        for v in split(b_v):
            m = v.mean()
            fixed.append(v - m)
            shift += m
        beta_v = beta_v.copy()
        beta_v[0] += shift
        return beta_v, np.concatenate(fixed)

    mu = work.mu(work.eta(beta, split(b)))
    if not work.mu_ok(mu):
        return beta, split(b), np.inf
    dev = float(np.sum(work.deviances(mu)))
    psi_max = np.inf
    for _ in range(max_polish):
        s = work.score_terms(mu)
        psi = np.concatenate(
            ([work.X.T @ s] if k else [])
            + [np.bincount(idx, weights=s, minlength=q) for idx, q in zip(work.idx_list, sizes)]
        )
        psi_max = float(np.max(np.abs(psi)))
        if psi_max < opts.inner_tol:
            break
        h = work.obs_weights(mu)
        if not np.all(np.isfinite(h)) or np.any(h <= 0):
            h = work.exp_weights(mu)
        J = M.T @ (M * h[:, None])
        step = np.linalg.lstsq(J, -psi, rcond=None)[0]

        scale = 1.0
        accepted = False
        for _ in range(opts.step_halving_max):
            beta_t = beta + scale * step[:k]
            b_t = b + scale * step[k:]
            beta_t, b_t = gauge_fix(beta_t, b_t)
            mu_t = work.mu(work.eta(beta_t, split(b_t)))
            with np.errstate(all="ignore"):
                dev_t = float(np.sum(work.deviances(mu_t)))
            if np.isfinite(dev_t) and dev_t <= dev + 1e-12 * (1.0 + abs(dev)):
                beta, b, dev, mu = beta_t, b_t, dev_t, mu_t
                accepted = True
                break
            scale /= 2.0
        if not accepted:
            break
    return beta, split(b), psi_max


def _fitted_components(design: Design):
    """Components entering the alternation: for a nested pair, only the child."""
    nested = dict(design.model.clusters.nested_pairs)
    if nested:
        (child_name, parent_name), = nested.items()
        child = next(c for c in design.components if c.name == child_name)
        return [child]
    return list(design.components)


def _marginal_work(md, components) -> _Work:
    return _Work(
        y=md.y,
        X=md.X,
        idx_list=[c.index for c in components],
        q_list=[c.q for c in components],
        family=md.family,
        link=md.link,
        trials=md.trials,
    )


def _fit_marginal(work: _Work, opts: FitOptions, start=None):
    """Alternate effect prediction and coefficient updates for one marginal."""
    if start is None:
        glm0 = fit_glm(work.y, work.X, work.family, work.link, trials=work.trials)
        beta, lam = glm0.beta, glm0.lam
        b_list = [np.zeros(q) for q in work.q_list]
    else:
        beta, lam, b_list = start
        beta = np.asarray(beta, dtype=float).copy()
        b_list = [np.asarray(v, dtype=float).copy() for v in b_list]

    fixed_lam = 1.0 if work.family.dispersion_fixed else None
    trace = []
    converged = False
    clamped: set = set()
    it = 0
    for it in range(1, opts.max_outer + 1):
        if len(work.idx_list) == 1:
            raw, b_info = _solve_b_single(work, beta, b_list[0], opts)
            raw = [raw]
        else:
            raw, b_info = _solve_b_joint(work, beta, b_list, opts)
        b_new = [project_zero_mean(v) for v in raw]
        clamped.update(b_info["clamped"])

        beta_new, beta_info = _newton_beta(work, b_new, beta, opts)
        mu = work.mu(work.eta(beta_new, b_new))
        lam_new = fixed_lam if fixed_lam is not None else estimate_dispersion(
            work.family, work.y, mu, trials=work.trials
        )

        change = max(
            float(np.max(np.abs(beta_new - beta))) if work.k else 0.0,
            abs(lam_new - lam),
            max(float(np.max(np.abs(bn - bo))) for bn, bo in zip(b_new, b_list)),
        )
        trace.append(change)
        beta, lam, b_list = beta_new, lam_new, b_new
        if change < opts.outer_tol:
            converged = True
            break

    if not clamped:
        # joint refinement drives the stationarity residual to inner_tol
        beta, b_list, psi_max = _polish_joint(work, beta, b_list, opts)
        mu = work.mu(work.eta(beta, b_list))
        if fixed_lam is None:
            lam = estimate_dispersion(work.family, work.y, mu, trials=work.trials)
    else:
        mu = work.mu(work.eta(beta, b_list))
        s = work.score_terms(mu)
        psi_beta = work.X.T @ s if work.k else np.zeros(0)
        psi_b = np.concatenate(
            [np.bincount(idx, weights=s, minlength=q) for idx, q in zip(work.idx_list, work.q_list)]
        )
        psi_max = float(max(np.max(np.abs(psi_beta), initial=0.0), np.max(np.abs(psi_b))))
    return beta, lam, b_list, {
        "converged": converged,
        "iterations": it,
        "trace": trace,
        "psi_max": psi_max,
        "clamped": sorted(clamped),
    }


def fit(
    model: ModelSpec,
    data: Dataset,
    opts: FitOptions | None = None,
    *,
    estimate_variance: bool = True,
    start=None,
) -> FitResult:
    """Fit a model by the alternating conditional-inference algorithm.

    Marginals are fitted independently (they are conditionally independent
    given the random components); the cross-marginal coupling only enters
    the random-component covariance estimated afterwards.  ``start`` may
    hold per-marginal (beta, lam, b_list) warm starts.
    """
    opts = opts or FitOptions()
    report = validate(model, data)
    if not report.ok:
        raise ConfigError("validation failed:\n" + report.summary())
    design = build_design(model, data)
    fitted_components = _fitted_components(design)

    betas, lams, b_work, infos = [], [], [], []
    for j, md in enumerate(design.marginals):
        work = _marginal_work(md, fitted_components)
        beta, lam, b_list, info = _fit_marginal(work, opts, start[j] if start else None)
        if md.spec.dispersion_fixed_value is not None:
            # the alternation never uses the dispersion, so a user-fixed
            # value simply replaces the reported estimate
            lam = float(md.spec.dispersion_fixed_value)
        betas.append(beta)
        lams.append(lam)
        b_work.append(b_list)
        infos.append(info)

    nested = dict(design.model.clusters.nested_pairs)
    b_out = []
    for j in range(len(design.marginals)):
        per = {}
        if nested:
            (child_name, parent_name), = nested.items()
            child = next(c for c in design.components if c.name == child_name)
            b1, b2 = predict_nested(b_work[j][0], child.parent_map)
            per[child_name] = b1
            per[parent_name] = b2
        else:
            for comp, vec in zip(fitted_components, b_work[j]):
                per[comp.name] = vec
        b_out.append(per)

    result = FitResult(
        beta=betas,
        lam=lams,
        b=b_out,
        sigma2_or_Sigma=None,
        converged=all(i["converged"] for i in infos),
        iterations=max(i["iterations"] for i in infos),
        trace=[i["trace"] for i in infos],
        psi_max=max(i["psi_max"] for i in infos),
        flags={"clamped": {j: i["clamped"] for j, i in enumerate(infos) if i["clamped"]}},
        design=design,
        b_work=b_work,
    )

    if estimate_variance:
        from .variance import estimate_for_fit  # deferred: variance depends on this module

        value, vflags = estimate_for_fit(result)
        result.sigma2_or_Sigma = value
        result.flags.update(vflags)
    return result
