"""Batch command-line interface.

Three subcommands: ``fit`` estimates one model from a config and a data
file, ``study`` runs a simulation study from a study config, and
``asymptotics`` computes Monte Carlo unconditional asymptotic variances at
a fitted model.  Every run writes a JSON manifest echoing its inputs; all
output files are written atomically.  Exit codes: 0 success, 1 input error,
2 the requested fit did not converge (outputs still written).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import MglmmError
from .estimator import FitOptions, fit
from .laplace import fit_laplace
from .model import Dataset, ModelSpec, validate
from .sandwich import godambe_blocks, unconditional_av
from .simulate import SimConfig
from .studies import run_study
from .model import RandomDist
from .tableio import file_sha256, write_csv_atomic, write_json_atomic


def _manifest(out_dir: Path, command: str, config_echo, seed, wall, extra) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config_echo,
        "wall_seconds": wall,
    }
    payload.update(extra)
    write_json_atomic(out_dir / "manifest.json", payload)


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _fit_options(args) -> FitOptions:
    kw = {}
    if args.tol is not None:
        kw["outer_tol"] = args.tol
    if args.max_iter is not None:
        kw["max_outer"] = args.max_iter
    return FitOptions(**kw)


def cmd_fit(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    try:
        config = _load_json(args.config)
        model = ModelSpec.from_config(config)
        data = Dataset.from_csv(args.data)
        report = validate(model, data)
        if not report.ok:
            print(report.summary(), file=sys.stderr)
            return 1
        opts = _fit_options(args)
        if args.method == "condinf":
            result = fit(model, data, opts)
        else:
            result = fit_laplace(model, data, opts)
    except (MglmmError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    std_errors = _beta_std_errors(result)
    rows = []
    for j, md in enumerate(result.design.marginals):
        for name, value, se in zip(md.column_names, result.beta[j], std_errors[j]):
            rows.append((md.spec.response, name, float(value), se))
        rows.append((md.spec.response, "lambda", float(result.lam[j]), ""))
    write_csv_atomic(out_dir / "estimates.csv", ["marginal", "parameter", "value", "std_error"], rows)

    rc_rows = []
    for j, md in enumerate(result.design.marginals):
        for comp_name, values in result.b[j].items():
            comp = next(c for c in result.design.components if c.name == comp_name)
            for label, value in zip(comp.labels, values):
                rc_rows.append((comp_name, label, md.spec.response, float(value)))
    write_csv_atomic(out_dir / "random_components.csv", ["component", "cluster", "marginal", "value"], rc_rows)

    cov_rows = []
    sig = result.sigma2_or_Sigma
    if np.ndim(sig) == 2:
        d = np.asarray(sig).shape[0]
        for a in range(d):
            for b in range(d):
                cov_rows.append((f"Sigma[{a + 1},{b + 1}]", float(np.asarray(sig)[a, b])))
    elif isinstance(sig, dict):
        for name, value in sorted(sig.items()):
            cov_rows.append((f"sigma2[{name}]", float(value)))
    elif sig is not None:
        cov_rows.append(("sigma2", float(sig)))
    write_csv_atomic(out_dir / "covariance.csv", ["parameter", "value"], cov_rows)

    _manifest(
        out_dir,
        "fit",
        config,
        None,
        time.perf_counter() - started,
        {
            "data_sha256": file_sha256(args.data),
            "method": args.method,
            "converged": bool(result.converged),
            "iterations": int(result.iterations),
            "flags": _jsonable(result.flags),
            "outputs": ["estimates.csv", "random_components.csv", "covariance.csv"],
        },
    )
    return 0 if result.converged else 2


def _beta_std_errors(result):
    """Per-marginal coefficient standard errors: sandwich for the
    conditional fit, working GLS for the Laplace baseline."""
    ses = []
    for j in range(len(result.design.marginals)):
        k = result.beta[j].shape[0]
        if result.method == "laplace" and result.beta_cov is not None:
            cov = result.beta_cov[j]
        else:
            try:
                cov = godambe_blocks(result, marginal=j).J_inv_beta
            except np.linalg.LinAlgError:
                ses.append([""] * k)
                continue
        ses.append([float(np.sqrt(max(cov[i, i], 0.0))) for i in range(k)])
    return ses


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _sim_from_config(config, args) -> SimConfig:
    kw = dict(config)
    kw.pop("kind", None)
    kw.pop("methods", None)
    if "random_dist" in kw:
        rd = kw["random_dist"]
        kw["random_dist"] = RandomDist(type=rd.get("type", "gaussian"), dof=rd.get("dof"))
    for name in ("beta", "const_grid", "q_grid"):
        if name in kw:
            kw[name] = tuple(kw[name])
    if "sigma_base" in kw:
        kw["sigma_base"] = tuple(tuple(row) for row in kw["sigma_base"])
    if args.replicates is not None:
        kw["replicates"] = args.replicates
    if args.seed is not None:
        kw["seed"] = args.seed
    return SimConfig(**kw)


def cmd_study(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    try:
        config = _load_json(args.config)
        kind = config.get("kind")
        methods = tuple(config.get("methods", ("condinf",)))
        sim = _sim_from_config(config, args)
        output = run_study(kind, sim, methods=methods, threads=args.threads)
    except (MglmmError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    cell_name = "const" if kind == "normality" else "q"
    write_csv_atomic(
        out_dir / "estimates.csv",
        [cell_name, "method", "replicate", "parameter", "marginal", "value"],
        [(r["cell"], r["method"], r["replicate"], r["parameter"], r["marginal"], r["value"])
         for r in output.estimates],
    )
    outputs = ["estimates.csv", "failures.csv"]
    if kind == "bias":
        write_csv_atomic(
            out_dir / "bias.csv",
            ["parameter", "marginal", "q", "method", "bias", "se_bias", "n"],
            [(r["parameter"], r["marginal"], r["q"], r["method"], r["bias"], r["se_bias"], r["n"])
             for r in output.bias],
        )
        outputs.append("bias.csv")
    else:
        write_csv_atomic(
            out_dir / "normality.csv",
            ["parameter", "marginal", "const", "method", "qq_corr", "n"],
            [(r["parameter"], r["marginal"], r["const"], r["method"], r["qq_corr"], r["n"])
             for r in output.normality],
        )
        write_csv_atomic(
            out_dir / "qq_points.csv",
            ["parameter", "marginal", "const", "method", "theoretical", "sample"],
            [(r["parameter"], r["marginal"], r["const"], r["method"], r["theoretical"], r["sample"])
             for r in output.qq_points],
        )
        outputs.extend(["normality.csv", "qq_points.csv"])
    write_csv_atomic(
        out_dir / "failures.csv",
        [cell_name, "method", "failures"],
        [(cell, method, count) for (cell, method), count in sorted(output.failures.items())],
    )

    _manifest(
        out_dir,
        "study",
        config,
        sim.seed,
        time.perf_counter() - started,
        {
            "kind": kind,
            "methods": list(methods),
            "threads": args.threads,
            "failures": {f"{cell}/{method}": n for (cell, method), n in sorted(output.failures.items())},
            "flagged_cells": output.flagged_cells,
            "outputs": outputs,
        },
    )
    return 0


def cmd_asymptotics(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    try:
        config = _load_json(args.config)
        model = ModelSpec.from_config(config)
        data = Dataset.from_csv(args.data)
        report = validate(model, data)
        if not report.ok:
            print(report.summary(), file=sys.stderr)
            return 1
        result = fit(model, data, _fit_options(args))
        av = unconditional_av(result, n_mc=args.mc, seed=args.seed if args.seed is not None else 0)
    except (MglmmError, RuntimeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    rows_beta, rows_b = [], []
    for j, md in enumerate(result.design.marginals):
        resp = md.spec.response
        k = av.av_beta[j].shape[0]
        for a in range(k):
            for b in range(k):
                rows_beta.append(
                    (resp, a, b, float(av.av_beta[j][a, b]), float(av.mean_jinv_beta[j][a, b]),
                     float(av.refit_var_beta[j][a, b]))
                )
        qq = av.av_b[j].shape[0]
        for a in range(qq):
            rows_b.append((resp, a, float(av.av_b[j][a, a]), float(av.mean_jinv_b[j][a, a]),
                           float(av.sigma2_term[j][a, a])))
    write_csv_atomic(out_dir / "av_beta.csv",
                     ["marginal", "row", "col", "av", "mean_information_term", "refit_variance_term"],
                     rows_beta)
    write_csv_atomic(out_dir / "av_b.csv",
                     ["marginal", "index", "av", "mean_information_term", "variance_term"],
                     rows_b)

    _manifest(
        out_dir,
        "asymptotics",
        config,
        args.seed,
        time.perf_counter() - started,
        {
            "data_sha256": file_sha256(args.data),
            "mc_draws": args.mc,
            "mc_failed": av.n_failed,
            "converged": bool(result.converged),
            "outputs": ["av_beta.csv", "av_b.csv"],
        },
    )
    return 0 if result.converged else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mglmm", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model from a config and a CSV data file")
    p_fit.add_argument("config")
    p_fit.add_argument("data")
    p_fit.add_argument("--method", choices=["condinf", "laplace"], default="condinf")
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--tol", type=float, default=None)
    p_fit.add_argument("--max-iter", type=int, default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_study = sub.add_parser("study", help="run a simulation study from a study config")
    p_study.add_argument("config")
    p_study.add_argument("--out", required=True)
    p_study.add_argument("--replicates", type=int, default=None)
    p_study.add_argument("--seed", type=int, default=None)
    p_study.add_argument("--threads", type=int, default=1)
    p_study.set_defaults(func=cmd_study)

    p_av = sub.add_parser("asymptotics", help="Monte Carlo asymptotic variances at a fit")
    p_av.add_argument("config")
    p_av.add_argument("data")
    p_av.add_argument("--out", required=True)
    p_av.add_argument("--mc", type=int, default=200)
    p_av.add_argument("--seed", type=int, default=0)
    p_av.add_argument("--tol", type=float, default=None)
    p_av.add_argument("--max-iter", type=int, default=None)
    p_av.set_defaults(func=cmd_asymptotics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
