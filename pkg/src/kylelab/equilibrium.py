"""Reference solutions for the single-period Kyle model.

Closed-form linear equilibrium, best-response iteration, quadrature pricing
``E[Z | X(Z) + Y = v]`` for arbitrary densities, a numerical insider best
response, and the no-trade interval under a proportional transaction cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from .distributions import DistributionSpec, MarketConfig, pdf, quadrature_rule

QUAD_NODES = 2000
BR_GRID_POINTS = 4001
BR_HALF_WIDTH_SD = 20.0
NO_TRADE_TOL = 1e-12


class UnreachableOrderFlow(ValueError):
    """Total order flow ``v`` has (numerically) zero density under the model."""


class NoConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearEquilibrium:
    """Insider ``X(z) = alpha + beta z`` and pricing ``P(v) = mu + lam v``."""

    alpha: float
    beta: float
    mu: float
    lam: float

    def order(self, z):
        return self.alpha + self.beta * np.asarray(z, dtype=float)

    def price(self, v):
        return self.mu + self.lam * np.asarray(v, dtype=float)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "mu": self.mu, "lambda": self.lam}


@dataclass(frozen=True)
class PlateauPrediction:
    """No-trade interval ``[mu_z - eps, mu_z + eps]`` against linear pricing.

    ``outside_slope`` is the slope of the optimal order outside the interval,
    ``breakeven_slope`` that of the zero-expected-payoff order.
    """

    lower: float
    upper: float
    outside_slope: float
    breakeven_slope: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "outside_slope": self.outside_slope,
                "breakeven_slope": self.breakeven_slope}


def _check_sigmas(sigma_z, sigma_y):
    if not (sigma_z > 0 and sigma_y > 0):
        raise ValueError(f"sigmas must be > 0, got sigma_z={sigma_z}, sigma_y={sigma_y}")


def theorem1(config: MarketConfig) -> LinearEquilibrium:
    """Closed-form linear equilibrium.

    The price impact is sigma_z / (2 sigma_y); this is the value that makes
    pricing the least-squares projection of Z on the order flow.
    """
    _check_sigmas(config.sigma_z, config.sigma_y)
    beta = config.sigma_y / config.sigma_z
    return LinearEquilibrium(alpha=-beta * config.mu_z, beta=beta, mu=config.mu_z,
                             lam=config.sigma_z / (2.0 * config.sigma_y))


def fixed_point(config: MarketConfig, tol: float = 1e-12, max_iter: int = 10_000) -> LinearEquilibrium:
    """Alternate exact best responses between affine strategies until they settle.

    Insider reply to ``P(v) = mu + lam v``: ``x = (z - mu) / (2 lam)``.
    Market maker reply to ``X = alpha + beta Z``: the least-squares projection
    ``lam = beta s_z^2 / (beta^2 s_z^2 + s_y^2)``, ``mu = mu_z - lam E[V]``.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    _check_sigmas(config.sigma_z, config.sigma_y)
    mu_z, vz, vy = config.mu_z, config.sigma_z ** 2, config.sigma_y ** 2
    lam, mu = 1.0, mu_z
    beta, alpha = 1.0 / (2 * lam), -mu / (2 * lam)
    for _ in range(max_iter):
        new_lam = beta * vz / (beta * beta * vz + vy)
        new_mu = mu_z - new_lam * (alpha + beta * mu_z)
        new_beta = 1.0 / (2 * new_lam)
        new_alpha = -new_mu / (2 * new_lam)
        change = max(abs(new_lam - lam), abs(new_mu - mu), abs(new_beta - beta),
                     abs(new_alpha - alpha))
        lam, mu, beta, alpha = new_lam, new_mu, new_beta, new_alpha
        if change < tol:
            return LinearEquilibrium(alpha=alpha, beta=beta, mu=mu, lam=lam)
    raise NoConvergence(f"best-response iteration did not settle within {max_iter} steps")


def equilibrium_profit(config: MarketConfig) -> float:
    """Expected insider profit in the frictionless Gaussian equilibrium, sigma_z sigma_y / 2."""
    eq = theorem1(config)
    return config.sigma_z ** 2 / (4.0 * eq.lam)


def numerical_pricing(order_fn, z_dist: DistributionSpec, y_dist: DistributionSpec, v,
                      n_nodes: int = QUAD_NODES):
    """``E[Z | X(Z) + Y = v]`` by fixed-node quadrature over the law of Z.

    ``order_fn`` must accept numpy arrays. ``v`` may be a scalar or an array.
    """
    nodes, weights = quadrature_rule(z_dist, n_nodes)
    wz = weights * pdf(z_dist, nodes)
    x = np.asarray(order_fn(nodes), dtype=float)
    v_arr = np.atleast_1d(np.asarray(v, dtype=float))
    out = np.empty(v_arr.shape)
    for start in range(0, v_arr.size, 256):
        chunk = v_arr[start:start + 256]
        fy = pdf(y_dist, chunk[:, None] - x[None, :])
        den = fy @ wz
        if np.any(den < 1e-300):
            bad = chunk[np.argmax(den < 1e-300)]
            raise UnreachableOrderFlow(f"order flow v={bad} has zero likelihood")
        out[start:start + 256] = (fy @ (wz * nodes)) / den
    return float(out[0]) if np.ndim(v) == 0 else out


def _expected_price(pricing_fn, xs, y_nodes, y_w):
    xs = np.atleast_1d(xs)
    prices = np.asarray(pricing_fn(xs[:, None] + y_nodes[None, :]), dtype=float)
    return prices @ y_w


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_section(f, a, b, tol=1e-11):
    """Minimiser of a unimodal ``f`` on ``[a, b]``."""
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def best_response_curve(pricing_fn, zs, y_dist: DistributionSpec, epsilon: float = 0.0,
                        n_grid: int = BR_GRID_POINTS, n_nodes: int = QUAD_NODES) -> np.ndarray:
    """Optimal insider orders ``argmax_x (z - E[P(x + Y)]) x - eps |x|`` for each z.

    Coarse scan over ``x`` in +/- 20 sd(Y), then golden-section refinement.
    Orders whose best payoff does not beat zero by more than 1e-12 are set to 0.
    ``pricing_fn`` must accept numpy arrays.
    """
    y_nodes, y_q = quadrature_rule(y_dist, n_nodes)
    y_w = y_q * pdf(y_dist, y_nodes)
    half = BR_HALF_WIDTH_SD * y_dist.std
    xs = np.linspace(-half, half, n_grid)
    ep = _expected_price(pricing_fn, xs, y_nodes, y_w)
    zs = np.atleast_1d(np.asarray(zs, dtype=float))
    out = np.empty(zs.shape)
    for i, z in enumerate(zs):
        payoff = (z - ep) * xs - epsilon * np.abs(xs)
        k = int(np.argmax(payoff))
        best_x, best = xs[k], payoff[k]
        if 0 < k < n_grid - 1:
            def neg(x, z=z):
                return -((z - _expected_price(pricing_fn, x, y_nodes, y_w)[0]) * x
                         - epsilon * abs(x))
            x_ref = _golden_section(neg, xs[k - 1], xs[k + 1])
            val = -neg(x_ref)
            if val >= best:
                best_x, best = float(x_ref), val
        out[i] = best_x if best > NO_TRADE_TOL else 0.0
    return out


def insider_best_response(pricing_fn, z: float, y_dist: DistributionSpec,
                          epsilon: float = 0.0) -> float:
    return float(best_response_curve(pricing_fn, [z], y_dist, epsilon)[0])


def plateau_prediction(config: MarketConfig) -> PlateauPrediction:
    """Where trading cannot beat the fee when the market maker keeps linear pricing."""
    eq = theorem1(config)
    return PlateauPrediction(lower=config.mu_z - config.epsilon,
                             upper=config.mu_z + config.epsilon,
                             outside_slope=1.0 / (2.0 * eq.lam),
                             breakeven_slope=1.0 / eq.lam)


@dataclass
class TabulatedEquilibrium:
    """Order and pricing functions on fixed grids, linearly interpolated
    (and extended flat beyond the grid ends)."""

    z_grid: np.ndarray
    orders: np.ndarray
    v_grid: np.ndarray
    prices: np.ndarray

    def order(self, z):
        return np.interp(z, self.z_grid, self.orders)

    def price(self, v):
        return np.interp(v, self.v_grid, self.prices)


def best_response_map(order_fn, config: MarketConfig, z_grid, v_grid) -> TabulatedEquilibrium:
    """One round of exact replies: price ``order_fn`` by quadrature, then let the
    insider best-respond (with the config's fee) to that pricing rule."""
    z_grid = np.asarray(z_grid, dtype=float)
    v_grid = np.asarray(v_grid, dtype=float)
    prices = numerical_pricing(order_fn, config.z_dist, config.y_dist, v_grid)

    def price(v):
        return np.interp(v, v_grid, prices)

    orders = best_response_curve(price, z_grid, config.y_dist, config.epsilon)
    return TabulatedEquilibrium(z_grid, orders, v_grid, prices)


def iterate_best_responses(config: MarketConfig, n_iter: int = 12, z_grid=None,
                           v_grid=None) -> TabulatedEquilibrium:
    """Repeated :func:`best_response_map` from the frictionless linear equilibrium.

    Approximates the equilibrium for fees or non-Gaussian laws where no
    closed form exists.
    """
    if z_grid is None:
        half = 15.0 * config.sigma_z
        z_grid = np.linspace(config.mu_z - half, config.mu_z + half, 1201)
    if v_grid is None:
        half = 20.0 * math.hypot(config.sigma_y, theorem1(config).beta * config.sigma_z)
        v_grid = np.linspace(-half, half, 1601)
    order = theorem1(config).order
    tab = None
    for _ in range(n_iter):
        tab = best_response_map(order, config, z_grid, v_grid)
        order = tab.order
    return tab
