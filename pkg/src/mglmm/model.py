"""Model specification and data layer.

Turns tabular data plus a declarative model description into the design
matrices consumed by the fitting code, and checks the numerically testable
regularity requirements (full-rank designs, response supports, consistent
cluster structures) before any fitting is attempted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, DomainError
from .families import Binomial, Family, Link, get_family, get_link

__all__ = [
    "Dataset",
    "ClusterComponent",
    "ClusterStructure",
    "MarginalSpec",
    "RandomDist",
    "ModelSpec",
    "Design",
    "build_matrices",
    "build_design",
    "validate",
    "ValidationReport",
]

RANK_TOL = 1e-10  # relative to the largest singular value


@dataclass
class Dataset:
    """Named columns of equal length; numeric or string valued."""

    columns: dict[str, np.ndarray]

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise ConfigError(f"columns have unequal lengths: {sorted(lengths)}")
        self.n_rows = lengths.pop() if lengths else 0

    @classmethod
    def from_dict(cls, data: dict) -> "Dataset":
        return cls({k: np.asarray(v) for k, v in data.items()})

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        frame = pd.read_csv(path, sep=",", decimal=".", encoding="utf-8")
        return cls({name: frame[name].to_numpy() for name in frame.columns})

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise ConfigError(f"column '{name}' not found in the data") from None

    def numeric_column(self, name: str) -> np.ndarray:
        col = self.column(name)
        try:
            return np.asarray(col, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"column '{name}' is not numeric") from None

    def __contains__(self, name: str) -> bool:
        return name in self.columns


@dataclass(frozen=True)
class ClusterComponent:
    """One clustering of the observations, read from a data column."""

    name: str
    column: str
    nested_in: str | None = None


@dataclass
class ClusterStructure:
    components: list[ClusterComponent]

    def __post_init__(self):
        names = [c.name for c in self.components]
        if len(set(names)) != len(names):
            raise ConfigError("cluster component names must be unique")
        for c in self.components:
            if c.nested_in is not None and c.nested_in not in names:
                raise ConfigError(f"component '{c.name}' declares unknown parent '{c.nested_in}'")
            if c.nested_in == c.name:
                raise ConfigError(f"component '{c.name}' cannot be nested in itself")

    @property
    def names(self):
        return [c.name for c in self.components]

    @property
    def nested_pairs(self):
        return [(c.name, c.nested_in) for c in self.components if c.nested_in is not None]


@dataclass(frozen=True)
class MarginalSpec:
    """One response: family, link and fixed-effect columns.

    An intercept is always prepended to the declared covariates.
    """

    response: str
    family: str
    link: str
    covariates: tuple = ()
    trials: str | None = None
    dispersion_fixed_value: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.trials is not None and self.family != "binomial":
            raise ConfigError("a trials column is only valid for the binomial family")
        get_family(self.family)
        link = get_link(self.link)
        if link.name == "logit" and self.family != "binomial":
            raise ConfigError("the logit link requires a mean space of (0, 1)")


@dataclass(frozen=True)
class RandomDist:
    type: str = "gaussian"
    dof: float | None = None

    def __post_init__(self):
        if self.type not in ("gaussian", "student_t"):
            raise ConfigError(f"unknown random-component distribution '{self.type}'")
        if self.type == "student_t":
            if self.dof is None or self.dof <= 4:
                raise ConfigError("student_t random components need dof > 4 (finite fourth moments)")
        elif self.dof is not None:
            raise ConfigError("dof is only valid for student_t random components")


@dataclass
class ModelSpec:
    marginals: list[MarginalSpec]
    clusters: ClusterStructure
    random_dist: RandomDist = field(default_factory=RandomDist)

    def __post_init__(self):
        if not self.marginals:
            raise ConfigError("a model needs at least one marginal")
        if len(self.clusters.components) > 2:
            raise ConfigError("at most two random components are supported")
        if len(self.marginals) > 1 and len(self.clusters.components) != 1:
            raise ConfigError("multivariate models need exactly one shared cluster component")

    @property
    def d(self) -> int:
        return len(self.marginals)

    @classmethod
    def from_config(cls, config: dict) -> "ModelSpec":
        try:
            marginals = [
                MarginalSpec(
                    response=m["response"],
                    family=m["family"],
                    link=m["link"],
                    covariates=tuple(m.get("covariates", ())),
                    trials=m.get("trials"),
                    dispersion_fixed_value=m.get("dispersion_fixed_value"),
                )
                for m in config["marginals"]
            ]
            components = [
                ClusterComponent(name=c["name"], column=c["column"], nested_in=c.get("nested_in"))
                for c in config["clusters"]
            ]
            rd = config.get("random_dist", {"type": "gaussian"})
            random_dist = RandomDist(type=rd.get("type", "gaussian"), dof=rd.get("dof"))
        except KeyError as exc:
            raise ConfigError(f"missing configuration key: {exc}") from None
        return cls(marginals=marginals, clusters=ClusterStructure(components), random_dist=random_dist)

    @classmethod
    def from_json(cls, path) -> "ModelSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_config(json.load(fh))


# ---------------------------------------------------------------------------
# Design construction
# ---------------------------------------------------------------------------


@dataclass
class ComponentDesign:
    name: str
    labels: np.ndarray  # unique cluster labels, sorted
    index: np.ndarray  # length-n map observation -> cluster position
    q: int
    parent_name: str | None = None
    parent_map: np.ndarray | None = None  # child cluster -> parent cluster position

    def z_matrix(self) -> np.ndarray:
        Z = np.zeros((len(self.index), self.q))
        Z[np.arange(len(self.index)), self.index] = 1.0
        return Z


@dataclass
class MarginalDesign:
    spec: MarginalSpec
    y: np.ndarray
    X: np.ndarray  # intercept column first
    column_names: list[str]
    family: Family
    link: Link
    trials: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.X.shape[1]


@dataclass
class Design:
    model: ModelSpec
    marginals: list[MarginalDesign]
    components: list[ComponentDesign]
    n: int

    @property
    def q_list(self):
        return [c.q for c in self.components]


def _component_design(component: ClusterComponent, data: Dataset) -> ComponentDesign:
    col = data.column(component.column)
    labels, index = np.unique(col, return_inverse=True)
    return ComponentDesign(name=component.name, labels=labels, index=index, q=len(labels))


def build_design(model: ModelSpec, data: Dataset) -> Design:
    """Bind a model specification to data, producing all design arrays."""
    components = [_component_design(c, data) for c in model.clusters.components]
    by_name = {c.name: c for c in components}
    for spec_c in model.clusters.components:
        if spec_c.nested_in is None:
            continue
        child = by_name[spec_c.name]
        parent = by_name[spec_c.nested_in]
        pairs = np.stack([child.index, parent.index], axis=1)
        parent_map = np.full(child.q, -1, dtype=int)
        for ci, pi in np.unique(pairs, axis=0):
            if parent_map[ci] >= 0 and parent_map[ci] != pi:
                raise ConfigError(
                    f"cluster '{child.labels[ci]}' of component '{child.name}' maps to multiple parents"
                )
            parent_map[ci] = pi
        child.parent_name = parent.name
        child.parent_map = parent_map

    marginals = []
    for spec in model.marginals:
        y = data.numeric_column(spec.response)
        cols = [np.ones(data.n_rows)] + [data.numeric_column(c) for c in spec.covariates]
        X = np.column_stack(cols)
        trials = None
        family = get_family(spec.family)
        if spec.family == "binomial":
            if spec.trials is not None:
                trials = data.numeric_column(spec.trials)
            else:
                trials = np.ones(data.n_rows)
        marginals.append(
            MarginalDesign(
                spec=spec,
                y=y,
                X=X,
                column_names=["intercept"] + list(spec.covariates),
                family=family,
                link=get_link(spec.link),
                trials=trials,
            )
        )
    return Design(model=model, marginals=marginals, components=components, n=data.n_rows)


def build_matrices(model: ModelSpec, data: Dataset):
    """Design matrices: one X per marginal, one 0/1 allocation Z per component."""
    design = build_design(model, data)
    xs = [m.X for m in design.marginals]
    zs = [c.z_matrix() for c in design.components]
    return xs, zs


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class Issue:
    severity: str  # "error" or "warning"
    code: str
    message: str

    def __str__(self):
        return f"[{self.severity}] {self.code}: {self.message}"


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)
    x_ranks: dict = field(default_factory=dict)
    z_ranks: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not any(i.severity == "error" for i in self.issues)

    def add(self, severity, code, message):
        self.issues.append(Issue(severity, code, message))

    def summary(self) -> str:
        if not self.issues:
            return "validation passed"
        return "\n".join(str(i) for i in self.issues)


def _numeric_rank(matrix: np.ndarray) -> int:
    if matrix.size == 0:
        return 0
    s = np.linalg.svd(matrix, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > RANK_TOL * s[0]))


def validate(model: ModelSpec, data: Dataset) -> ValidationReport:
    """Check everything that can block a fit; never raises for data problems."""
    report = ValidationReport()

    components = []
    for c in model.clusters.components:
        if c.column not in data:
            report.add("error", "missing_column", f"cluster column '{c.column}' not found")
            continue
        components.append(_component_design(c, data))
    by_name = {c.name: c for c in components}

    for spec in model.marginals:
        label = spec.response
        if spec.response not in data:
            report.add("error", "missing_column", f"response column '{spec.response}' not found")
            continue
        try:
            y = data.numeric_column(spec.response)
        except ConfigError:
            report.add("error", "non_numeric", f"response '{label}' is not numeric")
            continue
        cols = [np.ones(data.n_rows)]
        usable = True
        for name in spec.covariates:
            if name not in data:
                report.add("error", "missing_column", f"covariate column '{name}' not found")
                usable = False
                continue
            try:
                col = data.numeric_column(name)
            except ConfigError:
                report.add("error", "non_numeric", f"covariate '{name}' is not numeric")
                usable = False
                continue
            if np.any(~np.isfinite(col)):
                report.add("error", "non_finite", f"covariate '{name}' contains non-finite values")
                usable = False
            cols.append(col)
        if np.any(~np.isfinite(y)):
            report.add("error", "non_finite", f"response '{label}' contains non-finite values")
            usable = False
        if not usable:
            continue

        X = np.column_stack(cols)
        rank = _numeric_rank(X)
        report.x_ranks[label] = (rank, X.shape[1])
        if rank < X.shape[1]:
            report.add("error", "rank_deficient", f"design matrix of '{label}' has rank {rank} < {X.shape[1]}")

        family = get_family(spec.family)
        trials = None
        if spec.family == "binomial":
            if spec.trials is not None:
                if spec.trials not in data:
                    report.add("error", "missing_column", f"trials column '{spec.trials}' not found")
                    continue
                trials = data.numeric_column(spec.trials)
                if np.any(trials < 1) or np.any(trials != np.floor(trials)):
                    report.add("error", "bad_trials", f"trials column '{spec.trials}' must hold positive integers")
                    continue
            else:
                trials = np.ones(data.n_rows)
        try:
            family.check_response(y, trials=trials, strict=True)
        except DomainError as exc:
            report.add("error", "support_violation", f"response '{label}': {exc}")

        if spec.dispersion_fixed_value is not None:
            if family.dispersion_fixed:
                report.add("error", "fixed_dispersion", f"family '{spec.family}' has no free dispersion")
            elif spec.dispersion_fixed_value <= 0:
                report.add("error", "bad_dispersion", "dispersion_fixed_value must be positive")

    for comp in components:
        counts = np.bincount(comp.index, minlength=comp.q)
        if np.any(counts == 0):
            report.add("error", "empty_cluster", f"component '{comp.name}' has empty clusters")
        Z = comp.z_matrix()
        rank = _numeric_rank(Z)
        report.z_ranks[comp.name] = (rank, comp.q)
        if rank < comp.q:
            report.add("error", "rank_deficient", f"allocation matrix of '{comp.name}' has rank {rank} < {comp.q}")

    for child_name, parent_name in model.clusters.nested_pairs:
        child = by_name.get(child_name)
        parent = by_name.get(parent_name)
        if child is None or parent is None:
            continue
        pairs = np.unique(np.stack([child.index, parent.index], axis=1), axis=0)
        child_ids, counts = np.unique(pairs[:, 0], return_counts=True)
        bad = child_ids[counts > 1]
        if bad.size:
            report.add(
                "error",
                "nesting_inconsistent",
                f"clusters {child.labels[bad].tolist()} of '{child_name}' map to multiple '{parent_name}' clusters",
            )

    return report
