"""Dispersion-model families and link functions.

Each family supplies the unit deviance d(y, mu) together with its first two
mu-derivatives, the variance function V(mu) = 2 / {d''(mu, mu)}, and the log
normalising function log a(y; lam) of the conditional density

    f(y; mu, lam) = a(y; lam) * exp{-d(y, mu) / (2 lam)}.

These primitives drive every score, weight and likelihood evaluation in the
fitting code, and the samplers used by the simulation harness.

Binomial responses are handled on the count scale: the response is the number
of successes out of ``trials`` draws, the mean parameter is the success
probability, and the per-observation dispersion is fixed at 1/trials.  All
deviance-like quantities returned for the binomial are count-scale, i.e.
``trials`` times the Bernoulli-scale unit deviance of the success proportion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError

__all__ = [
    "Interval",
    "Link",
    "Family",
    "get_family",
    "get_link",
    "unit_deviance",
    "variance_function",
    "log_density",
    "link_eval",
    "FAMILY_NAMES",
    "LINK_NAMES",
]


@dataclass(frozen=True)
class Interval:
    """Interval descriptor for supports and mean spaces.

    ``lattice`` marks integer-valued supports; interval membership checks do
    not enforce integrality (the deviance extends continuously off the
    lattice), but data validation does.
    """

    low: float
    high: float
    low_open: bool = False
    high_open: bool = False
    lattice: bool = False

    def contains(self, x, strict_lattice: bool = False):
        x = np.asarray(x, dtype=float)
        ok = np.ones(x.shape, dtype=bool)
        ok &= (x > self.low) if self.low_open else (x >= self.low)
        ok &= (x < self.high) if self.high_open else (x <= self.high)
        if strict_lattice and self.lattice:
            ok &= x == np.floor(x)
        return ok

    def __str__(self):
        lb = "(" if self.low_open else "["
        rb = ")" if self.high_open else "]"
        body = f"{lb}{self.low}, {self.high}{rb}"
        return body + (" lattice" if self.lattice else "")


# ---------------------------------------------------------------------------
# Link functions
# ---------------------------------------------------------------------------


class Link:
    """Strictly monotone link g with inverse, first and second derivatives."""

    name: str = ""
    domain: Interval = Interval(-np.inf, np.inf)
    eta_domain: Interval = Interval(-np.inf, np.inf)

    def apply(self, mu):
        raise NotImplementedError

    def invert(self, eta):
        raise NotImplementedError

    def derivative(self, mu):
        raise NotImplementedError

    def second_derivative(self, mu):
        raise NotImplementedError

    def check_mu(self, mu):
        mu = np.asarray(mu, dtype=float)
        if not np.all(self.domain.contains(mu)):
            raise DomainError(f"value outside the domain {self.domain} of link '{self.name}'")
        return mu

    def check_eta(self, eta):
        eta = np.asarray(eta, dtype=float)
        if not np.all(self.eta_domain.contains(eta)):
            raise DomainError(f"value outside the range {self.eta_domain} of link '{self.name}'")
        return eta

    def __repr__(self):
        return f"<link {self.name}>"


class IdentityLink(Link):
    name = "identity"

    def apply(self, mu):
        return np.asarray(mu, dtype=float)

    def invert(self, eta):
        return np.asarray(eta, dtype=float)

    def derivative(self, mu):
        return np.ones_like(np.asarray(mu, dtype=float))

    def second_derivative(self, mu):
        return np.zeros_like(np.asarray(mu, dtype=float))


class LogLink(Link):
    name = "log"
    domain = Interval(0.0, np.inf, low_open=True)

    def apply(self, mu):
        return np.log(mu)

    def invert(self, eta):
        return np.exp(eta)

    def derivative(self, mu):
        return 1.0 / np.asarray(mu, dtype=float)

    def second_derivative(self, mu):
        mu = np.asarray(mu, dtype=float)
        return -1.0 / mu**2


class LogitLink(Link):
    name = "logit"
    domain = Interval(0.0, 1.0, low_open=True, high_open=True)

    def apply(self, mu):
        mu = np.asarray(mu, dtype=float)
        return np.log(mu) - np.log1p(-mu)

    def invert(self, eta):
        return special.expit(eta)

    def derivative(self, mu):
        mu = np.asarray(mu, dtype=float)
        return 1.0 / (mu * (1.0 - mu))

    def second_derivative(self, mu):
        mu = np.asarray(mu, dtype=float)
        return (2.0 * mu - 1.0) / (mu * (1.0 - mu)) ** 2


class InverseLink(Link):
    name = "inverse"
    domain = Interval(0.0, np.inf, low_open=True)
    eta_domain = Interval(0.0, np.inf, low_open=True)

    def apply(self, mu):
        return 1.0 / np.asarray(mu, dtype=float)

    def invert(self, eta):
        return 1.0 / np.asarray(eta, dtype=float)

    def derivative(self, mu):
        mu = np.asarray(mu, dtype=float)
        return -1.0 / mu**2

    def second_derivative(self, mu):
        mu = np.asarray(mu, dtype=float)
        return 2.0 / mu**3


class SqrtLink(Link):
    name = "sqrt"
    domain = Interval(0.0, np.inf, low_open=True)
    eta_domain = Interval(0.0, np.inf, low_open=True)

    def apply(self, mu):
        return np.sqrt(mu)

    def invert(self, eta):
        return np.square(np.asarray(eta, dtype=float))

    def derivative(self, mu):
        return 0.5 / np.sqrt(mu)

    def second_derivative(self, mu):
        mu = np.asarray(mu, dtype=float)
        return -0.25 * mu**-1.5


_LINKS = {cls.name: cls() for cls in (IdentityLink, LogLink, LogitLink, InverseLink, SqrtLink)}
LINK_NAMES = tuple(_LINKS)


def get_link(name) -> Link:
    if isinstance(name, Link):
        return name
    try:
        return _LINKS[name]
    except KeyError:
        raise DomainError(f"unknown link '{name}'; known links: {', '.join(LINK_NAMES)}") from None


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------


class Family:
    """A dispersion-model family on a given support.

    Subclasses implement the unit deviance and its derivatives on the count
    scale.  ``trials`` is only meaningful for the binomial; everywhere else
    it is accepted and ignored so callers can treat families uniformly.
    """

    name: str = ""
    support: Interval = Interval(-np.inf, np.inf)
    mean_space: Interval = Interval(-np.inf, np.inf)
    dispersion_fixed: bool = False
    default_link: str = "identity"

    # -- deviance and derivatives -------------------------------------

    def deviance(self, y, mu, trials=None):
        raise NotImplementedError

    def deviance_dmu(self, y, mu, trials=None):
        raise NotImplementedError

    def deviance_d2mu(self, y, mu, trials=None):
        raise NotImplementedError

    def variance(self, mu):
        """Variance function V(mu) = 2 / d''(mu, mu)."""
        raise NotImplementedError

    def conditional_variance(self, mu, lam, trials=None):
        """Var(Y | b) on the observation (count) scale."""
        return lam * self.variance(mu)

    # -- density -------------------------------------------------------

    def log_normalizer(self, y, lam, trials=None):
        raise NotImplementedError

    def log_density(self, y, mu, lam, trials=None):
        return self.log_normalizer(y, lam, trials) - self.deviance(y, mu, trials) / (
            2.0 * self.deviance_scale(lam)
        )

    def deviance_scale(self, lam) -> float:
        """Divisor of the (count-scale) deviance inside the log density."""
        return 1.0 if self.dispersion_fixed else float(lam)

    def effective_dispersion(self, lam, trials=None):
        """Per-observation dispersion on the unit scale (1/trials for the
        binomial); this is what the working weights divide by."""
        return lam

    # -- misc ----------------------------------------------------------

    def sample(self, rng, mu, lam, trials=None):
        raise NotImplementedError

    def initial_mu(self, y, trials=None):
        """Starting mean values for iteratively reweighted fits."""
        return np.asarray(y, dtype=float)

    def check_response(self, y, trials=None, strict: bool = True):
        y = np.asarray(y, dtype=float)
        if not np.all(self.support.contains(y, strict_lattice=strict)):
            raise DomainError(f"response outside the support {self.support} of family '{self.name}'")
        return y

    def check_mean(self, mu):
        mu = np.asarray(mu, dtype=float)
        if not np.all(self.mean_space.contains(mu)):
            raise DomainError(f"mean outside the mean space {self.mean_space} of family '{self.name}'")
        return mu

    def check_dispersion(self, lam):
        if not np.isfinite(lam) or lam <= 0:
            raise DomainError(f"dispersion must be positive, got {lam}")
        if self.dispersion_fixed and lam != 1.0:
            raise DomainError(f"family '{self.name}' has fixed dispersion 1, got {lam}")
        return float(lam)

    def __repr__(self):
        return f"<family {self.name}>"


class Normal(Family):
    name = "normal"
    support = Interval(-np.inf, np.inf)
    mean_space = Interval(-np.inf, np.inf)

    def deviance(self, y, mu, trials=None):
        return np.square(np.asarray(y, float) - mu)

    def deviance_dmu(self, y, mu, trials=None):
        return -2.0 * (np.asarray(y, float) - mu)

    def deviance_d2mu(self, y, mu, trials=None):
        return np.full(np.broadcast(np.asarray(y, float), np.asarray(mu, float)).shape, 2.0)

    def variance(self, mu):
        return np.ones_like(np.asarray(mu, dtype=float))

    def log_normalizer(self, y, lam, trials=None):
        y = np.asarray(y, dtype=float)
        return np.full(y.shape, -0.5 * math.log(2.0 * math.pi * lam))

    def sample(self, rng, mu, lam, trials=None):
        return rng.normal(mu, math.sqrt(lam))

    def initial_mu(self, y, trials=None):
        return np.asarray(y, dtype=float)


class Poisson(Family):
    name = "poisson"
    support = Interval(0.0, np.inf, lattice=True)
    mean_space = Interval(0.0, np.inf, low_open=True)
    dispersion_fixed = True
    default_link = "log"

    def deviance(self, y, mu, trials=None):
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        # xlogy handles the y = 0 limit: 0 * log(0/mu) = 0
        return 2.0 * (special.xlogy(y, y / mu) - (y - mu))

    def deviance_dmu(self, y, mu, trials=None):
        return -2.0 * (np.asarray(y, float) - mu) / mu

    def deviance_d2mu(self, y, mu, trials=None):
        mu = np.asarray(mu, dtype=float)
        return 2.0 * np.asarray(y, float) / mu**2

    def variance(self, mu):
        return np.asarray(mu, dtype=float)

    def log_normalizer(self, y, lam, trials=None):
        y = np.asarray(y, dtype=float)
        return special.xlogy(y, y) - y - special.gammaln(y + 1.0)

    def sample(self, rng, mu, lam, trials=None):
        return rng.poisson(mu).astype(float)

    def initial_mu(self, y, trials=None):
        y = np.asarray(y, dtype=float)
        return (y + np.mean(y) + 0.1) / 2.0


class Binomial(Family):
    """Number of successes out of a known number of trials.

    The mean parameter is the success probability.  The count-scale density
    is a(y; 1/t) * exp{-t d1(y/t, mu) / 2} with d1 the Bernoulli-scale unit
    deviance, so the effective dispersion is 1/trials and nothing is free to
    estimate.
    """

    name = "binomial"
    mean_space = Interval(0.0, 1.0, low_open=True, high_open=True)
    dispersion_fixed = True
    default_link = "logit"

    def __init__(self, trials: int = 1):
        if trials < 1 or trials != int(trials):
            raise DomainError(f"trials must be a positive integer, got {trials}")
        self.trials = int(trials)
        self.support = Interval(0.0, float(trials), lattice=True)

    def _trials(self, trials):
        return float(self.trials) if trials is None else np.asarray(trials, dtype=float)

    def deviance(self, y, mu, trials=None):
        t = self._trials(trials)
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        return 2.0 * (special.xlogy(y, y / (t * mu)) + special.xlogy(t - y, (t - y) / (t * (1.0 - mu))))

    def deviance_dmu(self, y, mu, trials=None):
        t = self._trials(trials)
        mu = np.asarray(mu, dtype=float)
        return -2.0 * (np.asarray(y, float) - t * mu) / (mu * (1.0 - mu))

    def deviance_d2mu(self, y, mu, trials=None):
        t = self._trials(trials)
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        return 2.0 * (y / mu**2 + (t - y) / (1.0 - mu) ** 2)

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        return mu * (1.0 - mu)

    def conditional_variance(self, mu, lam, trials=None):
        t = self._trials(trials)
        return t * self.variance(mu)

    def effective_dispersion(self, lam, trials=None):
        return 1.0 / self._trials(trials)

    def log_normalizer(self, y, lam, trials=None):
        t = self._trials(trials)
        y = np.asarray(y, dtype=float)
        log_choose = special.gammaln(t + 1.0) - special.gammaln(y + 1.0) - special.gammaln(t - y + 1.0)
        return log_choose + special.xlogy(y, y) + special.xlogy(t - y, t - y) - special.xlogy(t, t)

    def sample(self, rng, mu, lam, trials=None):
        t = self._trials(trials)
        n = np.broadcast(np.asarray(mu), t).shape
        return rng.binomial(np.broadcast_to(t, n).astype(int), np.broadcast_to(mu, n)).astype(float)

    def initial_mu(self, y, trials=None):
        t = self._trials(trials)
        return (np.asarray(y, float) + 0.5) / (t + 1.0)

    def check_response(self, y, trials=None, strict: bool = True):
        y = np.asarray(y, dtype=float)
        t = self._trials(trials)
        ok = (y >= 0) & (y <= t)
        if strict:
            ok &= y == np.floor(y)
        if not np.all(ok):
            raise DomainError("binomial response must be an integer count in [0, trials]")
        return y


class Gamma(Family):
    name = "gamma"
    support = Interval(0.0, np.inf, low_open=True)
    mean_space = Interval(0.0, np.inf, low_open=True)
    default_link = "log"

    def deviance(self, y, mu, trials=None):
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        return 2.0 * ((y - mu) / mu - np.log(y / mu))

    def deviance_dmu(self, y, mu, trials=None):
        mu = np.asarray(mu, dtype=float)
        return -2.0 * (np.asarray(y, float) - mu) / mu**2

    def deviance_d2mu(self, y, mu, trials=None):
        mu = np.asarray(mu, dtype=float)
        return 2.0 * (2.0 * np.asarray(y, float) / mu**3 - 1.0 / mu**2)

    def variance(self, mu):
        return np.square(np.asarray(mu, dtype=float))

    def log_normalizer(self, y, lam, trials=None):
        y = np.asarray(y, dtype=float)
        inv = 1.0 / lam
        return -np.log(y) - special.gammaln(inv) - inv * math.log(lam) - inv

    def sample(self, rng, mu, lam, trials=None):
        return rng.gamma(shape=1.0 / lam, scale=np.asarray(mu, float) * lam)

    def initial_mu(self, y, trials=None):
        y = np.asarray(y, dtype=float)
        return (y + np.mean(y)) / 2.0


class InverseGaussian(Family):
    name = "inverse_gaussian"
    support = Interval(0.0, np.inf, low_open=True)
    mean_space = Interval(0.0, np.inf, low_open=True)
    default_link = "inverse"

    def deviance(self, y, mu, trials=None):
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        return np.square(y - mu) / (mu**2 * y)

    def deviance_dmu(self, y, mu, trials=None):
        mu = np.asarray(mu, dtype=float)
        return -2.0 * (np.asarray(y, float) - mu) / mu**3

    def deviance_d2mu(self, y, mu, trials=None):
        mu = np.asarray(mu, dtype=float)
        return 2.0 / mu**3 + 6.0 * (np.asarray(y, float) - mu) / mu**4

    def variance(self, mu):
        return np.asarray(mu, dtype=float) ** 3

    def log_normalizer(self, y, lam, trials=None):
        y = np.asarray(y, dtype=float)
        return -0.5 * np.log(2.0 * math.pi * lam * y**3)

    def sample(self, rng, mu, lam, trials=None):
        # numpy's Wald(mean, scale) has variance mean^3 / scale
        return rng.wald(np.asarray(mu, float), 1.0 / lam)

    def initial_mu(self, y, trials=None):
        y = np.asarray(y, dtype=float)
        return (y + np.mean(y)) / 2.0


_FAMILIES = {
    "normal": Normal,
    "poisson": Poisson,
    "binomial": Binomial,
    "gamma": Gamma,
    "inverse_gaussian": InverseGaussian,
}
FAMILY_NAMES = tuple(_FAMILIES)


def get_family(name, trials: int = 1) -> Family:
    """Resolve a family identifier to a family instance."""
    if isinstance(name, Family):
        return name
    try:
        cls = _FAMILIES[name]
    except KeyError:
        raise DomainError(f"unknown family '{name}'; known families: {', '.join(FAMILY_NAMES)}") from None
    return cls(trials) if cls is Binomial else cls()


# ---------------------------------------------------------------------------
# Catalog operations
# ---------------------------------------------------------------------------


def unit_deviance(family, y, mu):
    """Unit deviance d(y, mu); nonnegative, zero on the diagonal."""
    family = get_family(family)
    family.check_response(y, strict=False)
    family.check_mean(mu)
    return _as_scalar(family.deviance(y, mu))


def variance_function(family, mu):
    """Variance function V(mu) = 2 / d''(mu, mu)."""
    family = get_family(family)
    family.check_mean(mu)
    return _as_scalar(family.variance(mu))


def log_density(family, y, mu, lam=1.0):
    """log a(y; lam) - d(y, mu) / (2 lam)."""
    family = get_family(family)
    family.check_response(y, strict=False)
    family.check_mean(mu)
    if family.dispersion_fixed:
        lam = 1.0
    else:
        family.check_dispersion(lam)
    return _as_scalar(family.log_density(y, mu, lam))


def link_eval(link, mode, value):
    """Evaluate a link function: mode is 'apply', 'invert' or 'derivative'."""
    link = get_link(link)
    if mode == "apply":
        return _as_scalar(link.apply(link.check_mu(value)))
    if mode == "invert":
        return _as_scalar(link.invert(link.check_eta(value)))
    if mode == "derivative":
        return _as_scalar(link.derivative(link.check_mu(value)))
    raise DomainError(f"unknown link mode '{mode}'")


def _as_scalar(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x
