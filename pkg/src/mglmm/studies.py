"""Reference simulation studies: estimator normality and bias.

The normality study varies the scale of the random-component covariance at
a fixed number of clusters and summarises how Gaussian the coefficient
estimates look through the correlation of their QQ plot against standard
normal quantiles.  The bias study fixes the scale and grows the number of
clusters, reporting bias with its standard error per parameter and method.

Replicates are independent work items; with several threads they run in a
process pool and are always aggregated in replicate order, so the output is
identical whatever the worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigError
from .estimator import FitOptions, fit
from .laplace import fit_laplace
from .model import ClusterStructure, ModelSpec
from .quadrature import quadrature_mle
from .simulate import SimConfig, simulate_dataset, study_model

__all__ = ["StudyOutput", "run_study", "qq_correlation"]

METHODS = ("condinf", "laplace", "quadrature")
FAILURE_FLAG_RATE = 0.10


@dataclass
class StudyOutput:
    kind: str
    sim: SimConfig
    methods: tuple
    estimates: list = field(default_factory=list)  # dicts: method, replicate, parameter, value, cell
    bias: list = field(default_factory=list)  # dicts: parameter, q, method, bias, se_bias
    normality: list = field(default_factory=list)  # dicts: parameter, const, method, qq_corr
    qq_points: list = field(default_factory=list)  # dicts: parameter, const, method, theoretical, sample
    failures: dict = field(default_factory=dict)  # (cell, method) -> count
    flagged_cells: list = field(default_factory=list)


def qq_correlation(values) -> float:
    """Correlation between order statistics and standard normal quantiles."""
    values = np.sort(np.asarray(values, dtype=float))
    n = values.size
    theo = stats.norm.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    return float(np.corrcoef(values, theo)[0, 1])


def _parameter_rows(method: str, result, model: ModelSpec) -> list:
    """(parameter, marginal, value) triples; joint parameters use marginal ''."""
    rows = []
    responses = [m.response for m in model.marginals]
    if method == "quadrature":
        for resp, res in zip(responses, result):
            for i, value in enumerate(res.beta):
                rows.append((f"beta{i + 1}", resp, float(value)))
            rows.append(("sigma2", resp, float(res.sigma2)))
        return rows
    for j, resp in enumerate(responses):
        for i, value in enumerate(result.beta[j]):
            rows.append((f"beta{i + 1}", resp, float(value)))
    sig = result.sigma2_or_Sigma
    if np.ndim(sig) == 2:
        d = np.asarray(sig).shape[0]
        for a in range(d):
            for bcol in range(a, d):
                rows.append((f"Sigma[{a + 1},{bcol + 1}]", "", float(np.asarray(sig)[a, bcol])))
    elif isinstance(sig, dict):
        for name, value in sorted(sig.items()):
            rows.append(("sigma2", name, float(value)))
    elif sig is not None:
        rows.append(("Sigma[1,1]", "", float(sig)))
    return rows


def _univariate_submodel(model: ModelSpec, j: int) -> ModelSpec:
    return ModelSpec(
        marginals=[model.marginals[j]],
        clusters=ClusterStructure(list(model.clusters.components)),
        random_dist=model.random_dist,
    )


def _replicate_worker(payload):
    """One (cell, replicate): simulate once, fit with every method."""
    sim, kind, cell_value, replicate, methods = payload
    model = study_model(sim.random_dist)
    const = cell_value if kind == "normality" else 1.0
    q = sim.q if kind == "normality" else int(cell_value)
    data = simulate_dataset(model, sim, replicate, const=const, q=q)

    opts = FitOptions(outer_tol=1e-8, max_outer=200)
    rows = []
    failed = []
    for method in methods:
        try:
            if method == "condinf":
                res = fit(model, data, opts)
                ok = res.converged
            elif method == "laplace":
                res = fit_laplace(model, data, opts)
                ok = res.converged
            elif method == "quadrature":
                res = [quadrature_mle(_univariate_submodel(model, j), data, nodes=20)
                       for j in range(model.d)]
                ok = all(r.converged for r in res)
            else:
                raise ConfigError(f"unknown method '{method}'")
            if not ok:
                raise RuntimeError("fit did not converge")
            rows.extend(
                (method, replicate, name, marg, value)
                for name, marg, value in _parameter_rows(method, res, model)
            )
        except Exception:
            failed.append(method)
    return cell_value, replicate, rows, failed


def _true_values(sim: SimConfig, const: float, model: ModelSpec) -> dict:
    truth = {}
    base = const * np.asarray(sim.sigma_base, dtype=float)
    for j, m in enumerate(model.marginals):
        for i, value in enumerate(sim.beta):
            truth[("beta" + str(i + 1), m.response)] = float(value)
        truth[("sigma2", m.response)] = float(base[j, j])
    d = len(model.marginals)
    for a in range(d):
        for bcol in range(a, d):
            truth[(f"Sigma[{a + 1},{bcol + 1}]", "")] = float(base[a, bcol])
    return truth


def run_study(kind: str, sim: SimConfig, methods=("condinf",), threads: int = 1) -> StudyOutput:
    """Run a reference study; deterministic for a given configuration."""
    if kind not in ("normality", "bias"):
        raise ConfigError(f"unknown study kind '{kind}'")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
    methods = tuple(methods)

    cells = sim.const_grid if kind == "normality" else sim.q_grid
    payloads = [(sim, kind, cell, rep, methods) for cell in cells for rep in range(sim.replicates)]

    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replicate_worker, payloads, chunksize=8))
    else:
        results = [_replicate_worker(p) for p in payloads]

    out = StudyOutput(kind=kind, sim=sim, methods=methods)
    collected: dict = {}
    for cell_value, replicate, rows, failed in results:
        for method in failed:
            key = (cell_value, method)
            out.failures[key] = out.failures.get(key, 0) + 1
        for method, rep, name, marg, value in rows:
            out.estimates.append(
                {"cell": cell_value, "method": method, "replicate": rep,
                 "parameter": name, "marginal": marg, "value": value}
            )
            collected.setdefault((cell_value, method, name, marg), []).append(value)

    for (cell, method), count in sorted(out.failures.items()):
        if count > FAILURE_FLAG_RATE * sim.replicates:
            out.flagged_cells.append({"cell": cell, "method": method, "failures": count})

    model = study_model(sim.random_dist)
    truth_table = _true_values(sim, 1.0, model)
    if kind == "bias":
        for (cell, method, name, marg), values in sorted(collected.items()):
            truth = truth_table.get((name, marg))
            if truth is None:
                continue
            values = np.asarray(values)
            out.bias.append(
                {
                    "parameter": name,
                    "marginal": marg,
                    "q": int(cell),
                    "method": method,
                    "bias": float(values.mean() - truth),
                    "se_bias": float(values.std(ddof=1) / np.sqrt(values.size)),
                    "n": int(values.size),
                }
            )
    else:
        for (cell, method, name, marg), values in sorted(collected.items()):
            if not name.startswith("beta"):
                continue
            values = np.sort(np.asarray(values))
            n = values.size
            theo = stats.norm.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
            out.normality.append(
                {
                    "parameter": name,
                    "marginal": marg,
                    "const": float(cell),
                    "method": method,
                    "qq_corr": float(np.corrcoef(values, theo)[0, 1]),
                    "n": n,
                }
            )
            for tq, sq in zip(theo, values):
                out.qq_points.append(
                    {
                        "parameter": name,
                        "marginal": marg,
                        "const": float(cell),
                        "method": method,
                        "theoretical": float(tq),
                        "sample": float(sq),
                    }
                )
    return out
