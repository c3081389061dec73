"""Parametric distributions for the reliability kernel.

Families cover what the shipped models need: normal measurement noise,
lognormal capacities, largest-value Gumbel loads, gamma loads and interval
beta deterioration ratios.  Every family supports construction either from
natural parameters or from moments (mean plus std or c.o.v.), and exposes a
vectorized ``pdf``/``cdf``/``quantile`` trio plus exact ``mean``/``std``.

``CommonFactorGroup`` models equicorrelated lognormal variables through one
shared standard-normal factor:

    ln X_i = log_mean_i + log_std_i * (sqrt(rho) * U + sqrt(1 - rho) * U_i)

which gives corr(ln X_i, ln X_j) = rho for i != j.  The group knows how to
condition a member on the factor and how to compute the exact (conservative
information-pooling) posterior of the factor once some members are pinned to
known values -- both are what the standard-space transform needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import special

__all__ = [
    "Distribution",
    "Normal",
    "Lognormal",
    "Gumbel",
    "Gamma",
    "Beta",
    "PointMass",
    "CommonFactorGroup",
    "from_moments",
    "from_spec",
    "std_normal_cdf",
    "std_normal_quantile",
    "std_normal_pdf",
    "EULER_GAMMA",
]

EULER_GAMMA = 0.57721566490153286

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def std_normal_cdf(z):
    """Standard normal CDF, vectorized."""
    return special.ndtr(z)


def std_normal_quantile(p):
    """Inverse standard normal CDF, vectorized."""
    return special.ndtri(p)


def std_normal_pdf(z):
    z = np.asarray(z, dtype=float)
    out = np.exp(-0.5 * z * z) / _SQRT_2PI
    return out if out.ndim else float(out)


def _scalar_like(x, value):
    """Collapse a 0-d array result back to float for scalar input."""
    arr = np.asarray(value)
    if np.ndim(x) == 0:
        return float(arr)
    return arr


class Distribution:
    """Interface shared by all families.

    Subclasses are frozen dataclasses: construct once, share freely across
    threads and worker processes.
    """

    family: str = "abstract"

    # -- core ops -------------------------------------------------------

    def pdf(self, x):
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def quantile(self, p):
        raise NotImplementedError

    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def std(self) -> float:
        raise NotImplementedError

    @property
    def support(self) -> tuple[float, float]:
        raise NotImplementedError

    @property
    def median(self) -> float:
        return float(self.quantile(0.5))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw via the quantile transform (accurate in the tails)."""
        return np.asarray(self.quantile(rng.random(n)))

    def interval_mass(self, lo: float, hi: float):
        return self.cdf(hi) - self.cdf(lo)

    def to_spec(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Normal(Distribution):
    mu: float
    sigma: float
    family = "normal"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"normal needs sigma > 0, got {self.sigma}")

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mu) / self.sigma
        return _scalar_like(x, np.exp(-0.5 * z * z) / (self.sigma * _SQRT_2PI))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return _scalar_like(x, special.ndtr((x - self.mu) / self.sigma))

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        return _scalar_like(p, self.mu + self.sigma * special.ndtri(p))

    @property
    def mean(self):
        return self.mu

    @property
    def std(self):
        return self.sigma

    @property
    def support(self):
        return (-math.inf, math.inf)

    def to_spec(self):
        return {"family": "normal", "mean": self.mu, "std": self.sigma}


@dataclass(frozen=True)
class Lognormal(Distribution):
    """Parametrized by the mean/std of ln X."""

    log_mean: float
    log_std: float
    family = "lognormal"

    def __post_init__(self):
        if not self.log_std > 0:
            raise ValueError(f"lognormal needs log_std > 0, got {self.log_std}")

    @classmethod
    def from_moments(cls, mean: float, std: float) -> "Lognormal":
        if mean <= 0 or std <= 0:
            raise ValueError(f"lognormal moments need mean, std > 0, got {mean}, {std}")
        cov = std / mean
        log_var = math.log1p(cov * cov)
        return cls(math.log(mean) - 0.5 * log_var, math.sqrt(log_var))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        pos = x > 0
        safe = np.where(pos, x, 1.0)
        z = (np.log(safe) - self.log_mean) / self.log_std
        val = np.exp(-0.5 * z * z) / (safe * self.log_std * _SQRT_2PI)
        return _scalar_like(x, np.where(pos, val, 0.0))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        pos = x > 0
        safe = np.where(pos, x, 1.0)
        z = (np.log(safe) - self.log_mean) / self.log_std
        return _scalar_like(x, np.where(pos, special.ndtr(z), 0.0))

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        return _scalar_like(p, np.exp(self.log_mean + self.log_std * special.ndtri(p)))

    @property
    def mean(self):
        return math.exp(self.log_mean + 0.5 * self.log_std**2)

    @property
    def std(self):
        return self.mean * math.sqrt(math.expm1(self.log_std**2))

    @property
    def median(self):
        return math.exp(self.log_mean)

    @property
    def support(self):
        return (0.0, math.inf)

    def to_spec(self):
        return {"family": "lognormal", "log_mean": self.log_mean, "log_std": self.log_std}


@dataclass(frozen=True)
class Gumbel(Distribution):
    """Largest-value (type I) form: F(x) = exp(-exp(-alpha * (x - location)))."""

    alpha: float
    location: float
    family = "gumbel"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"gumbel needs alpha > 0, got {self.alpha}")

    @classmethod
    def from_moments(cls, mean: float, std: float) -> "Gumbel":
        if std <= 0:
            raise ValueError(f"gumbel moments need std > 0, got {std}")
        alpha = math.pi / (std * math.sqrt(6.0))
        return cls(alpha, mean - EULER_GAMMA / alpha)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        t = -self.alpha * (x - self.location)
        # guard exp overflow deep in the lower tail: pdf -> 0 there anyway
        t = np.clip(t, -745.0, 700.0)
        return _scalar_like(x, self.alpha * np.exp(t - np.exp(t)))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        t = np.clip(-self.alpha * (x - self.location), -745.0, 700.0)
        return _scalar_like(x, np.exp(-np.exp(t)))

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        return _scalar_like(p, self.location - np.log(-np.log(p)) / self.alpha)

    @property
    def mean(self):
        return self.location + EULER_GAMMA / self.alpha

    @property
    def std(self):
        return math.pi / (self.alpha * math.sqrt(6.0))

    @property
    def support(self):
        return (-math.inf, math.inf)

    def to_spec(self):
        return {"family": "gumbel", "alpha": self.alpha, "location": self.location}


@dataclass(frozen=True)
class Gamma(Distribution):
    shape: float
    scale: float
    family = "gamma"

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError(f"gamma needs shape, scale > 0, got {self.shape}, {self.scale}")

    @classmethod
    def from_moments(cls, mean: float, std: float) -> "Gamma":
        if mean <= 0 or std <= 0:
            raise ValueError(f"gamma moments need mean, std > 0, got {mean}, {std}")
        return cls((mean / std) ** 2, std * std / mean)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        pos = x > 0
        safe = np.where(pos, x, 1.0)
        log_pdf = (
            (self.shape - 1.0) * np.log(safe)
            - safe / self.scale
            - special.gammaln(self.shape)
            - self.shape * math.log(self.scale)
        )
        return _scalar_like(x, np.where(pos, np.exp(log_pdf), 0.0))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        pos = x > 0
        safe = np.where(pos, x, 0.0)
        return _scalar_like(x, np.where(pos, special.gammainc(self.shape, safe / self.scale), 0.0))

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        return _scalar_like(p, self.scale * special.gammaincinv(self.shape, p))

    @property
    def mean(self):
        return self.shape * self.scale

    @property
    def std(self):
        return math.sqrt(self.shape) * self.scale

    @property
    def support(self):
        return (0.0, math.inf)

    def to_spec(self):
        return {"family": "gamma", "shape": self.shape, "scale": self.scale}


@dataclass(frozen=True)
class Beta(Distribution):
    """Beta on an arbitrary bounded interval [lower, upper]."""

    a: float
    b: float
    lower: float = 0.0
    upper: float = 1.0
    family = "beta"

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"beta needs a, b > 0, got {self.a}, {self.b}")
        if not self.upper > self.lower:
            raise ValueError(f"beta needs upper > lower, got [{self.lower}, {self.upper}]")

    @classmethod
    def from_moments(cls, mean: float, std: float, lower: float, upper: float):
        """Moment matching on [lower, upper]; collapses to a point mass when the
        interval is degenerate."""
        if upper == lower:
            return PointMass(lower)
        width = upper - lower
        m = (mean - lower) / width
        v = (std / width) ** 2
        if not 0.0 < m < 1.0:
            raise ValueError(f"beta mean {mean} outside ({lower}, {upper})")
        if not 0.0 < v < m * (1.0 - m):
            raise ValueError(f"beta std {std} not feasible for mean {mean} on [{lower}, {upper}]")
        nu = m * (1.0 - m) / v - 1.0
        return cls(m * nu, (1.0 - m) * nu, lower, upper)

    def _y(self, x):
        return (x - self.lower) / (self.upper - self.lower)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        y = self._y(x)
        inside = (y > 0) & (y < 1)
        safe = np.where(inside, y, 0.5)
        log_pdf = (
            (self.a - 1.0) * np.log(safe)
            + (self.b - 1.0) * np.log1p(-safe)
            - special.betaln(self.a, self.b)
            - math.log(self.upper - self.lower)
        )
        return _scalar_like(x, np.where(inside, np.exp(log_pdf), 0.0))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        y = np.clip(self._y(x), 0.0, 1.0)
        return _scalar_like(x, special.betainc(self.a, self.b, y))

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        y = special.betaincinv(self.a, self.b, p)
        return _scalar_like(p, self.lower + (self.upper - self.lower) * y)

    @property
    def mean(self):
        return self.lower + (self.upper - self.lower) * self.a / (self.a + self.b)

    @property
    def std(self):
        s = self.a + self.b
        return (self.upper - self.lower) * math.sqrt(self.a * self.b / (s * s * (s + 1.0)))

    @property
    def support(self):
        return (self.lower, self.upper)

    def to_spec(self):
        return {"family": "beta", "a": self.a, "b": self.b, "lower": self.lower, "upper": self.upper}


@dataclass(frozen=True)
class PointMass(Distribution):
    """Degenerate distribution; shows up when an interval collapses."""

    value: float
    family = "point"

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return _scalar_like(x, np.where(x == self.value, math.inf, 0.0))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return _scalar_like(x, np.where(x >= self.value, 1.0, 0.0))

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        return _scalar_like(p, np.full_like(p, self.value, dtype=float))

    @property
    def mean(self):
        return self.value

    @property
    def std(self):
        return 0.0

    @property
    def support(self):
        return (self.value, self.value)

    def sample(self, rng, n):
        return np.full(n, self.value)

    def to_spec(self):
        return {"family": "point", "value": self.value}


# ---------- construction from files / moments ----------

_FAMILIES = ("normal", "lognormal", "gumbel", "gamma", "beta", "point")


def from_moments(family: str, mean: float, std: float | None = None,
                 cov: float | None = None, support: tuple[float, float] | None = None):
    """Build a distribution from (mean, std) or (mean, cov).

    ``support`` is required for (and only accepted by) the beta family.
    """
    if (std is None) == (cov is None):
        raise ValueError("give exactly one of std or cov")
    if std is None:
        if mean == 0:
            raise ValueError("cov is undefined for zero mean; give std instead")
        std = abs(cov * mean)
    if family != "beta" and support is not None:
        raise ValueError(f"support only applies to beta, not {family}")
    if family == "normal":
        return Normal(mean, std)
    if family == "lognormal":
        return Lognormal.from_moments(mean, std)
    if family == "gumbel":
        return Gumbel.from_moments(mean, std)
    if family == "gamma":
        return Gamma.from_moments(mean, std)
    if family == "beta":
        if support is None:
            raise ValueError("beta needs an explicit support interval")
        return Beta.from_moments(mean, std, support[0], support[1])
    raise ValueError(f"unknown family {family!r}; know {_FAMILIES}")


def from_spec(spec: Mapping) -> Distribution:
    """Build a distribution from its file form.

    Accepts natural parameters (e.g. ``log_mean``/``log_std``) or moments
    (``mean`` plus ``std`` or ``cov``); beta additionally takes
    ``lower``/``upper``.
    """
    family = spec.get("family")
    if family not in _FAMILIES:
        raise ValueError(f"unknown family {family!r}; know {_FAMILIES}")
    if family == "point":
        return PointMass(float(spec["value"]))
    natural = {
        "normal": ("mean", "std"),
        "lognormal": ("log_mean", "log_std"),
        "gumbel": ("alpha", "location"),
        "gamma": ("shape", "scale"),
        "beta": ("a", "b"),
    }[family]
    if all(k in spec for k in natural):
        if family == "normal":
            return Normal(float(spec["mean"]), float(spec["std"]))
        if family == "lognormal":
            return Lognormal(float(spec["log_mean"]), float(spec["log_std"]))
        if family == "gumbel":
            return Gumbel(float(spec["alpha"]), float(spec["location"]))
        if family == "gamma":
            return Gamma(float(spec["shape"]), float(spec["scale"]))
        return Beta(float(spec["a"]), float(spec["b"]),
                    float(spec.get("lower", 0.0)), float(spec.get("upper", 1.0)))
    if "mean" in spec:
        support = None
        if family == "beta":
            support = (float(spec["lower"]), float(spec["upper"]))
        return from_moments(
            family,
            float(spec["mean"]),
            std=float(spec["std"]) if "std" in spec else None,
            cov=float(spec["cov"]) if "cov" in spec else None,
            support=support,
        )
    raise ValueError(f"cannot build {family} from keys {sorted(spec)}")


# ---------- common-factor correlation group ----------

@dataclass(frozen=True)
class ConditionalMember:
    """A group member's law written in factor form.

    x = exp(log_offset + factor_loading * u_factor + idio_loading * u_own)
    with u_factor, u_own independent standard normals.
    """

    log_offset: float
    factor_loading: float
    idio_loading: float

    def given_factor(self, u: float) -> Lognormal:
        return Lognormal(self.log_offset + self.factor_loading * float(u), self.idio_loading)


@dataclass(frozen=True)
class FactorPosterior:
    """Gaussian posterior of the shared factor after pinning some members."""

    mean: float
    std: float


class CommonFactorGroup:
    """Equicorrelated lognormal members driven by one shared normal factor."""

    def __init__(self, members: Mapping[str, Lognormal], correlation: float):
        if not 0.0 <= correlation < 1.0:
            raise ValueError(f"correlation must be in [0, 1), got {correlation}")
        if len(members) < 2:
            raise ValueError("a factor group needs at least two members")
        for name, dist in members.items():
            if not isinstance(dist, Lognormal):
                raise ValueError(f"group member {name} must be lognormal, got {dist.family}")
        self.members = dict(members)
        self.correlation = float(correlation)

    def __contains__(self, name):
        return name in self.members

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.members)

    def standardized(self, name: str, value: float) -> float:
        """z-score of ln(value) under the member's marginal."""
        d = self.members[name]
        if value <= 0:
            raise ValueError(f"{name} is lognormal; observed value must be positive, got {value}")
        return (math.log(value) - d.log_mean) / d.log_std

    def conditional(self, name: str, u: float) -> Lognormal:
        """Member's law given the shared factor value u."""
        d = self.members[name]
        r = math.sqrt(self.correlation)
        return Lognormal(d.log_mean + d.log_std * r * u,
                         d.log_std * math.sqrt(1.0 - self.correlation))

    def factor_posterior(self, observed: Mapping[str, float]) -> FactorPosterior:
        """Exact Gaussian posterior of the factor given exact member values.

        With z_i the standardized observations, the factor U satisfies
        z_i = sqrt(rho) U + sqrt(1-rho) U_i, so the posterior after k
        observations is normal with

            var  = (1 - rho) / (1 - rho + k rho)
            mean = sqrt(rho) * sum(z_i) * var / (1 - rho)   [linear-Gaussian]
                 = sqrt(rho) * sum(z_i) / (1 - rho + k rho)
        """
        unknown = [n for n in observed if n not in self.members]
        if unknown:
            raise KeyError(f"not group members: {unknown}")
        k = len(observed)
        if k == 0:
            return FactorPosterior(0.0, 1.0)
        rho = self.correlation
        z_sum = sum(self.standardized(n, v) for n, v in observed.items())
        denom = 1.0 - rho + k * rho
        return FactorPosterior(math.sqrt(rho) * z_sum / denom,
                               math.sqrt((1.0 - rho) / denom))

    def member_form(self, name: str, posterior: FactorPosterior | None = None) -> ConditionalMember:
        """Factor form of a member, optionally under a factor posterior.

        Writing the posterior factor as mean + std * U' re-expresses the member
        with a shifted log offset and a shrunk factor loading; the idiosyncratic
        loading is untouched.
        """
        d = self.members[name]
        r = math.sqrt(self.correlation)
        post = posterior or FactorPosterior(0.0, 1.0)
        return ConditionalMember(
            log_offset=d.log_mean + d.log_std * r * post.mean,
            factor_loading=d.log_std * r * post.std,
            idio_loading=d.log_std * math.sqrt(1.0 - self.correlation),
        )

    def sample(self, rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
        """Joint draw of all members (used by simulation checks)."""
        u_shared = rng.standard_normal(n)
        r = math.sqrt(self.correlation)
        s = math.sqrt(1.0 - self.correlation)
        out = {}
        for name, d in self.members.items():
            u_own = rng.standard_normal(n)
            out[name] = np.exp(d.log_mean + d.log_std * (r * u_shared + s * u_own))
        return out

    def to_spec(self) -> dict:
        return {"members": {n: d.to_spec() for n, d in self.members.items()},
                "correlation": self.correlation}
