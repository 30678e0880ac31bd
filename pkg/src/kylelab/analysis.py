"""Summaries of trained agents: linear fits, no-trade plateaus, profits."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .distributions import MarketConfig, sample
from .equilibrium import theorem1

FIT_GRID_POINTS = 201
PLATEAU_GRID_POINTS = 801
FIT_REGION_SD = 2.0
PLATEAU_REGION_SD = 3.0


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float


@dataclass(frozen=True)
class EquilibriumEstimate:
    insider_slope: float
    insider_intercept: float
    insider_r2: float
    mm_slope: float
    mm_intercept: float
    mm_r2: float
    insider_region: tuple[float, float]
    mm_region: tuple[float, float]
    max_abs_deviation_insider: float
    max_abs_deviation_mm: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["insider_region"] = list(self.insider_region)
        d["mm_region"] = list(self.mm_region)
        return d


@dataclass(frozen=True)
class PlateauEstimate:
    """No-trade interval of a learned order function.

    ``lower``/``upper`` are the breakpoints of a least-squares dead-zone fit
    (zero inside, one straight line on each side). ``threshold_lower`` and
    ``threshold_upper`` bound the contiguous run of grid points around mu_z
    where ``|order| < threshold_used``.
    """

    lower: float
    upper: float
    detected: bool
    threshold_used: float
    threshold_lower: float
    threshold_upper: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_dict(self) -> dict:
        d = asdict(self)
        d["width"] = self.width
        return d


@dataclass(frozen=True)
class BendFit:
    bend: float
    left: LinearFit
    right: LinearFit


def _ols(x, y) -> LinearFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    slope = float(np.dot(dx, y - ym) / np.dot(dx, dx))
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.dot(y - ym, y - ym))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return LinearFit(slope, intercept, r2)


def fit_linear(fn, region, n_grid: int = FIT_GRID_POINTS) -> LinearFit:
    """Least-squares line through ``fn`` sampled on an even grid over ``region``."""
    if n_grid < 3:
        raise ValueError("n_grid must be >= 3")
    lo, hi = region
    if not hi > lo:
        raise ValueError(f"degenerate region {region}")
    x = np.linspace(lo, hi, n_grid)
    return _ols(x, fn(x))


def insider_region(config: MarketConfig) -> tuple[float, float]:
    return (config.mu_z - FIT_REGION_SD * config.sigma_z,
            config.mu_z + FIT_REGION_SD * config.sigma_z)


def mm_region(config: MarketConfig) -> tuple[float, float]:
    beta = theorem1(config).beta
    s_v = math.hypot(beta * config.sigma_z, config.sigma_y)
    return (-FIT_REGION_SD * s_v, FIT_REGION_SD * s_v)


def fit_grids(config: MarketConfig, n_grid: int = FIT_GRID_POINTS):
    """The z- and v-grids used for fits and for prediction export."""
    return np.linspace(*insider_region(config), n_grid), np.linspace(*mm_region(config), n_grid)


def estimate_equilibrium(insider, mm, config: MarketConfig,
                         n_grid: int = FIT_GRID_POINTS) -> EquilibriumEstimate:
    """Fit lines to both agents and compare them with the closed-form equilibrium."""
    eq = theorem1(config)
    zg, vg = fit_grids(config, n_grid)
    xi, pm = np.asarray(insider(zg)), np.asarray(mm(vg))
    fi, fm = _ols(zg, xi), _ols(vg, pm)
    return EquilibriumEstimate(
        insider_slope=fi.slope, insider_intercept=fi.intercept, insider_r2=fi.r2,
        mm_slope=fm.slope, mm_intercept=fm.intercept, mm_r2=fm.r2,
        insider_region=insider_region(config), mm_region=mm_region(config),
        max_abs_deviation_insider=float(np.max(np.abs(xi - eq.order(zg)))),
        max_abs_deviation_mm=float(np.max(np.abs(pm - eq.price(vg)))),
    )


def default_plateau_threshold(config: MarketConfig) -> float:
    """5% of a typical equilibrium order, beta * sigma_z."""
    return 0.05 * theorem1(config).beta * config.sigma_z


def plateau_grid(config: MarketConfig, n_grid: int = PLATEAU_GRID_POINTS) -> np.ndarray:
    half = PLATEAU_REGION_SD * config.sigma_z
    return np.linspace(config.mu_z - half, config.mu_z + half, n_grid)


def _hinge_sse(b, x, f, sign):
    """SSE of ``f ~ 0`` on the inner side of ``b`` and ``f ~ s (x - b)`` outside.

    ``sign=+1`` puts the sloped part at ``x > b``.
    """
    out = (x - b) * sign > 0
    inner = f[~out]
    d = x[out] - b
    fo = f[out]
    sse = float(np.dot(inner, inner))
    if d.size:
        dd = np.dot(d, d)
        s = np.dot(d, fo) / dd if dd > 0 else 0.0
        r = fo - s * d
        sse += float(np.dot(r, r))
    return sse


def _dead_zone_edge(x, f, sign):
    """Breakpoint of the best hinge fit on one side of the centre."""
    sse = np.array([_hinge_sse(b, x, f, sign) for b in x])
    k = int(np.argmin(sse))
    lo, hi = x[max(k - 1, 0)], x[min(k + 1, x.size - 1)]
    if hi <= lo:
        return float(x[k])
    # the hinge SSE is piecewise smooth in b; refine within the neighbouring cells
    bs = np.linspace(lo, hi, 41)
    fine = np.array([_hinge_sse(b, x, f, sign) for b in bs])
    return float(bs[int(np.argmin(fine))])


def detect_plateau(order_fn, config: MarketConfig, threshold: float | None = None,
                   n_grid: int = PLATEAU_GRID_POINTS) -> PlateauEstimate:
    """Locate the interval around mu_z where the insider does not trade.

    ``detected`` requires the order at the grid point nearest mu_z to be below
    the threshold and the fitted dead zone to span at least two grid cells.
    """
    if threshold is None:
        threshold = default_plateau_threshold(config)
    if not threshold > 0:
        raise ValueError("threshold must be > 0")
    z = plateau_grid(config, n_grid)
    f = np.asarray(order_fn(z), dtype=float)
    c = int(np.argmin(np.abs(z - config.mu_z)))

    small = np.abs(f) < threshold
    if small[c]:
        lo = c
        while lo > 0 and small[lo - 1]:
            lo -= 1
        hi = c
        while hi < n_grid - 1 and small[hi + 1]:
            hi += 1
        t_lo, t_hi = float(z[lo]), float(z[hi])
    else:
        t_lo = t_hi = float("nan")

    lower = _dead_zone_edge(z[:c + 1], f[:c + 1], -1)
    upper = _dead_zone_edge(z[c:], f[c:], +1)
    if lower > upper:
        lower = upper = 0.5 * (lower + upper)
    cell = z[1] - z[0]
    detected = bool(small[c] and (upper - lower) >= 2 * cell)
    return PlateauEstimate(lower=lower, upper=upper, detected=detected,
                           threshold_used=float(threshold), threshold_lower=t_lo,
                           threshold_upper=t_hi)


def fit_bend(fn, region, n_grid: int = FIT_GRID_POINTS, min_points: int = 10) -> BendFit:
    """Split ``region`` where two independent least-squares lines fit ``fn`` best."""
    x = np.linspace(*region, n_grid)
    y = np.asarray(fn(x), dtype=float)
    best = None
    for k in range(min_points, n_grid - min_points + 1):
        left, right = _ols(x[:k], y[:k]), _ols(x[k:], y[k:])
        sse = (np.sum((y[:k] - left.intercept - left.slope * x[:k]) ** 2)
               + np.sum((y[k:] - right.intercept - right.slope * x[k:]) ** 2))
        if best is None or sse < best[0]:
            best = (sse, k, left, right)
    _, k, left, right = best
    return BendFit(bend=float(0.5 * (x[k - 1] + x[k])), left=left, right=right)


def expected_insider_profit(insider, mm, config: MarketConfig, n_mc: int,
                            rng: np.random.Generator) -> float:
    """Monte Carlo mean of ``(z - M(I(z) + y)) I(z) - eps |I(z)|``."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    z = sample(config.z_dist, n_mc, rng)
    y = sample(config.y_dist, n_mc, rng)
    x = np.asarray(insider(z), dtype=float)
    p = np.asarray(mm(x + y), dtype=float)
    return float(np.mean((z - p) * x - config.epsilon * np.abs(x)))


def expected_mm_profit(insider, mm, config: MarketConfig, n_mc: int,
                       rng: np.random.Generator) -> float:
    """Monte Carlo mean of the market maker's ``-(z - P(v)) v``."""
    z = sample(config.z_dist, n_mc, rng)
    y = sample(config.y_dist, n_mc, rng)
    v = np.asarray(insider(z), dtype=float) + y
    return float(-np.mean((z - np.asarray(mm(v), dtype=float)) * v))
