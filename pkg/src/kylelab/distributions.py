"""Sampling families for the asset value Z and the noise order Y.

Every family carries its analytic mean and variance so that non-Gaussian
variants can be moment-matched to the Gaussian reference model.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import special, stats

EULER_GAMMA = 0.5772156649015329

# panels x nodes-per-panel of the composite Gauss-Legendre rule
_GL_ORDER = 10
_TRUNCATE_SD = 12.0
_TAIL_MASS = 1e-15


class Family(str, enum.Enum):
    NORMAL = "normal"
    LAPLACE = "laplace"
    GUMBEL = "gumbel"
    SHIFTED_GAMMA = "shifted_gamma"
    BIMODAL = "bimodal"


_PARAM_NAMES = {
    Family.NORMAL: ("loc", "scale"),
    Family.LAPLACE: ("loc", "scale"),
    Family.GUMBEL: ("loc", "scale"),
    Family.SHIFTED_GAMMA: ("shape", "scale", "shift"),
    Family.BIMODAL: ("mean_low", "mean_high", "std", "weight"),
}


@dataclass(frozen=True)
class DistributionSpec:
    """A parameterised distribution. ``params`` keys depend on ``family``.

    normal, laplace, gumbel: ``loc``, ``scale``.
    shifted_gamma: ``shape``, ``scale``, ``shift`` (draws are Gamma + shift).
    bimodal: ``mean_low``, ``mean_high``, ``std``, ``weight`` (weight of the
    low component).
    """

    family: Family
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        fam = Family(self.family)
        object.__setattr__(self, "family", fam)
        expected = _PARAM_NAMES[fam]
        if set(self.params) != set(expected):
            raise ValueError(f"{fam.value} needs params {expected}, got {sorted(self.params)}")
        p = {k: float(self.params[k]) for k in expected}
        object.__setattr__(self, "params", p)
        if not all(math.isfinite(v) for v in p.values()):
            raise ValueError(f"non-finite parameter in {p}")
        for key in ("scale", "shape", "std"):
            if key in p and p[key] <= 0:
                raise ValueError(f"{fam.value}: {key} must be > 0, got {p[key]}")
        if fam is Family.BIMODAL and not 0.0 < p["weight"] < 1.0:
            raise ValueError(f"bimodal weight must lie in (0, 1), got {p['weight']}")

    def __hash__(self):
        return hash((self.family, tuple(sorted(self.params.items()))))

    @property
    def mean(self) -> float:
        p = self.params
        if self.family in (Family.NORMAL, Family.LAPLACE):
            return p["loc"]
        if self.family is Family.GUMBEL:
            return p["loc"] + p["scale"] * EULER_GAMMA
        if self.family is Family.SHIFTED_GAMMA:
            return p["shape"] * p["scale"] + p["shift"]
        w = p["weight"]
        return w * p["mean_low"] + (1 - w) * p["mean_high"]

    @property
    def variance(self) -> float:
        p = self.params
        if self.family is Family.NORMAL:
            return p["scale"] ** 2
        if self.family is Family.LAPLACE:
            return 2.0 * p["scale"] ** 2
        if self.family is Family.GUMBEL:
            return (math.pi * p["scale"]) ** 2 / 6.0
        if self.family is Family.SHIFTED_GAMMA:
            return p["shape"] * p["scale"] ** 2
        w = p["weight"]
        m = self.mean
        return (p["std"] ** 2 + w * (p["mean_low"] - m) ** 2
                + (1 - w) * (p["mean_high"] - m) ** 2)

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def to_dict(self) -> dict:
        return {"family": self.family.value, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "DistributionSpec":
        d = dict(d)
        family = Family(d.pop("family"))
        return cls(family, {k: float(v) for k, v in d.items()})


def normal(loc: float = 0.0, scale: float = 1.0) -> DistributionSpec:
    return DistributionSpec(Family.NORMAL, {"loc": loc, "scale": scale})


def moment_match(family, target_mean: float, target_variance: float) -> DistributionSpec:
    """Pick parameters of ``family`` giving the requested mean and variance."""
    family = Family(family)
    if not target_variance > 0:
        raise ValueError(f"target variance must be > 0, got {target_variance}")
    sd = math.sqrt(target_variance)
    if family is Family.NORMAL:
        return normal(target_mean, sd)
    if family is Family.LAPLACE:
        return DistributionSpec(family, {"loc": target_mean,
                                         "scale": math.sqrt(target_variance / 2.0)})
    if family is Family.GUMBEL:
        beta = math.sqrt(6.0 * target_variance) / math.pi
        return DistributionSpec(family, {"loc": target_mean - beta * EULER_GAMMA,
                                         "scale": beta})
    raise ValueError(f"moment matching is not defined for family {family.value!r}")


def shifted_gamma_spec() -> DistributionSpec:
    """Gamma with mean 1 and variance 2, shifted down by one (mean 0, variance 2)."""
    return DistributionSpec(Family.SHIFTED_GAMMA, {"shape": 0.5, "scale": 2.0, "shift": -1.0})


def bimodal_spec(target_mean: float, target_variance: float) -> DistributionSpec:
    """Equal-weight mixture N(m - d, s^2), N(m + d, s^2) with d = 2s.

    The mixture variance is d^2 + s^2 = 5 s^2. Two modes need d > s.
    """
    if not target_variance > 0:
        raise ValueError(f"target variance must be > 0, got {target_variance}")
    s = math.sqrt(target_variance / 5.0)
    d = 2.0 * s
    return DistributionSpec(Family.BIMODAL, {"mean_low": target_mean - d,
                                             "mean_high": target_mean + d,
                                             "std": s, "weight": 0.5})


def sample(spec: DistributionSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` independent values from ``spec`` using ``rng``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    p = spec.params
    fam = spec.family
    if fam is Family.NORMAL:
        return rng.normal(p["loc"], p["scale"], size=n)
    if fam is Family.LAPLACE:
        return rng.laplace(p["loc"], p["scale"], size=n)
    if fam is Family.GUMBEL:
        return rng.gumbel(p["loc"], p["scale"], size=n)
    if fam is Family.SHIFTED_GAMMA:
        return rng.gamma(p["shape"], p["scale"], size=n) + p["shift"]
    low = rng.random(size=n) < p["weight"]
    centers = np.where(low, p["mean_low"], p["mean_high"])
    return centers + p["std"] * rng.standard_normal(size=n)


def pdf(spec: DistributionSpec, x):
    """Density of ``spec`` at ``x`` (scalar or array); zero outside the support."""
    x = np.asarray(x, dtype=float)
    p = spec.params
    fam = spec.family
    if fam is Family.NORMAL:
        u = (x - p["loc"]) / p["scale"]
        out = np.exp(-0.5 * u * u) / (p["scale"] * math.sqrt(2 * math.pi))
    elif fam is Family.LAPLACE:
        out = np.exp(-np.abs(x - p["loc"]) / p["scale"]) / (2 * p["scale"])
    elif fam is Family.GUMBEL:
        u = (x - p["loc"]) / p["scale"]
        with np.errstate(over="ignore"):
            out = np.exp(-(u + np.exp(-u))) / p["scale"]
    elif fam is Family.SHIFTED_GAMMA:
        k, theta = p["shape"], p["scale"]
        t = x - p["shift"]
        pos = t > 0
        safe = np.where(pos, t, 1.0)
        logf = (k - 1) * np.log(safe) - safe / theta - special.gammaln(k) - k * math.log(theta)
        out = np.where(pos, np.exp(logf), 0.0)
    else:
        s, w = p["std"], p["weight"]
        c = 1.0 / (s * math.sqrt(2 * math.pi))
        a = (x - p["mean_low"]) / s
        b = (x - p["mean_high"]) / s
        out = c * (w * np.exp(-0.5 * a * a) + (1 - w) * np.exp(-0.5 * b * b))
    return float(out) if out.ndim == 0 else out


def _scipy_frozen(spec: DistributionSpec):
    p = spec.params
    if spec.family is Family.NORMAL:
        return stats.norm(p["loc"], p["scale"])
    if spec.family is Family.LAPLACE:
        return stats.laplace(p["loc"], p["scale"])
    if spec.family is Family.GUMBEL:
        return stats.gumbel_r(p["loc"], p["scale"])
    if spec.family is Family.SHIFTED_GAMMA:
        return stats.gamma(p["shape"], loc=p["shift"], scale=p["scale"])
    return None


def truncation_bounds(spec: DistributionSpec) -> tuple[float, float]:
    """Integration domain: mean +/- 12 sd, widened to the 1e-15 tail quantiles
    and clipped to the support."""
    m, sd = spec.mean, spec.std
    lo, hi = m - _TRUNCATE_SD * sd, m + _TRUNCATE_SD * sd
    frozen = _scipy_frozen(spec)
    if frozen is not None:
        lo = min(lo, float(frozen.ppf(_TAIL_MASS)))
        hi = max(hi, float(frozen.isf(_TAIL_MASS)))
    if spec.family is Family.SHIFTED_GAMMA:
        lo = spec.params["shift"]
    return lo, hi


@lru_cache(maxsize=None)
def _gl_reference(order: int):
    return np.polynomial.legendre.leggauss(order)


def composite_gauss_legendre(lo: float, hi: float, n_nodes: int = 2000,
                             order: int = _GL_ORDER) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of a composite Gauss-Legendre rule on [lo, hi]."""
    if n_nodes % order:
        raise ValueError(f"n_nodes={n_nodes} is not a multiple of the panel order {order}")
    n_panels = n_nodes // order
    t, w = _gl_reference(order)
    edges = np.linspace(lo, hi, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


@lru_cache(maxsize=64)
def _quadrature_cached(spec: DistributionSpec, n_nodes: int):
    lo, hi = truncation_bounds(spec)
    if spec.family is Family.SHIFTED_GAMMA:
        # x = shift + u^2 removes the x^(shape-1) singularity at the support edge
        shift = spec.params["shift"]
        u, wu = composite_gauss_legendre(0.0, math.sqrt(hi - shift), n_nodes)
        nodes = shift + u * u
        weights = 2.0 * u * wu
    else:
        nodes, weights = composite_gauss_legendre(lo, hi, n_nodes)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def quadrature_rule(spec: DistributionSpec, n_nodes: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights such that ``sum(w * g(x))`` approximates the integral
    of ``g`` over the truncated support of ``spec``.

    Multiply by ``pdf(spec, nodes)`` to integrate against the density.
    """
    return _quadrature_cached(spec, n_nodes)


@dataclass(frozen=True)
class MarketConfig:
    """Model parameters. ``z_dist``/``y_dist`` default to the Gaussian model and
    must otherwise reproduce ``mu_z``, ``sigma_z`` and ``sigma_y``."""

    mu_z: float = 0.5
    sigma_z: float = 2.0
    sigma_y: float = 1.0
    epsilon: float = 0.0
    z_dist: DistributionSpec | None = None
    y_dist: DistributionSpec | None = None

    def __post_init__(self):
        for name in ("mu_z", "sigma_z", "sigma_y", "epsilon"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        if self.sigma_z <= 0 or self.sigma_y <= 0:
            raise ValueError("sigma_z and sigma_y must be > 0")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.z_dist is None:
            object.__setattr__(self, "z_dist", normal(self.mu_z, self.sigma_z))
        if self.y_dist is None:
            object.__setattr__(self, "y_dist", normal(0.0, self.sigma_y))
        _check_moments("z_dist", self.z_dist, self.mu_z, self.sigma_z)
        _check_moments("y_dist", self.y_dist, 0.0, self.sigma_y)

    def to_dict(self) -> dict:
        return {"mu_z": self.mu_z, "sigma_z": self.sigma_z, "sigma_y": self.sigma_y,
                "epsilon": self.epsilon, "z_dist": self.z_dist.to_dict(),
                "y_dist": self.y_dist.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "MarketConfig":
        d = dict(d)
        for key in ("z_dist", "y_dist"):
            if d.get(key) is not None and not isinstance(d[key], DistributionSpec):
                d[key] = DistributionSpec.from_dict(d[key])
        return cls(**d)


def _check_moments(name, spec, mean, sd, rtol=1e-9):
    scale = max(1.0, abs(mean))
    if abs(spec.mean - mean) > rtol * scale or abs(spec.std - sd) > rtol * sd:
        raise ValueError(
            f"{name} has mean {spec.mean:.6g} / sd {spec.std:.6g}, "
            f"config expects {mean:.6g} / {sd:.6g}")
