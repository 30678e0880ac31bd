"""Alternating training of the market maker and insider networks.

Each loop trains the market maker on order flow generated by the current
insider, then trains the insider against the frozen market maker.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import net
from .analysis import estimate_equilibrium
from .distributions import MarketConfig, sample
from .equilibrium import theorem1
from .net import AdamState, Mlp, TrainingDiverged


class InsiderInit(str, enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    EQUILIBRIUM_LINEAR = "equilibrium_linear"
    APPROX_LINEAR = "approx_linear"


@dataclass(frozen=True)
class TrainingConfig:
    n_samples: int = 5000
    epochs_per_loop: int = 3
    n_loops: int = 20
    insider_init: InsiderInit = InsiderInit.GAUSSIAN_NOISE
    seed: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-7
    activation: str = "relu"
    insider_layers: tuple[int, ...] = (1, 10, 1)
    mm_layers: tuple[int, ...] = (1, 10, 10, 1)

    def __post_init__(self):
        object.__setattr__(self, "insider_init", InsiderInit(self.insider_init))
        object.__setattr__(self, "insider_layers", tuple(int(s) for s in self.insider_layers))
        object.__setattr__(self, "mm_layers", tuple(int(s) for s in self.mm_layers))
        for name in ("n_samples", "epochs_per_loop", "n_loops"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1)")
        if self.activation not in net.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def adam_hyperparameters(self) -> dict:
        return {"learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "eps_hat": self.eps_hat}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["insider_init"] = self.insider_init.value
        d["insider_layers"] = list(self.insider_layers)
        d["mm_layers"] = list(self.mm_layers)
        return d


@dataclass
class Streams:
    """Independent random streams derived from one seed."""

    weights: np.random.Generator
    z: np.random.Generator
    y: np.random.Generator
    noise: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        children = np.random.SeedSequence(seed).spawn(4)
        return cls(*(np.random.default_rng(c) for c in children))


@dataclass(frozen=True)
class LoopRecord:
    loop: int
    mm_loss: float
    insider_loss: float
    insider_slope: float
    insider_intercept: float
    insider_r2: float
    mm_slope: float
    mm_intercept: float
    mm_r2: float
    max_abs_deviation_insider: float
    max_abs_deviation_mm: float


@dataclass
class LoopTrace:
    records: list[LoopRecord] = field(default_factory=list)

    columns = tuple(LoopRecord.__dataclass_fields__)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def first_loop_within(self, config: MarketConfig, rel_tol: float = 0.1) -> int | None:
        """First loop whose fitted slopes are both within ``rel_tol`` of theory."""
        eq = theorem1(config)
        for r in self.records:
            if (abs(r.insider_slope - eq.beta) <= rel_tol * eq.beta
                    and abs(r.mm_slope - eq.lam) <= rel_tol * eq.lam):
                return r.loop
        return None


def initial_insider(mode, config: MarketConfig, rng: np.random.Generator | None = None):
    """Order function used to generate the market maker's first training set.

    Gaussian noise ignores z and returns a fresh N(0, sigma_y^2) draw per query.
    """
    mode = InsiderInit(mode)
    eq = theorem1(config)
    if mode is InsiderInit.GAUSSIAN_NOISE:
        if rng is None:
            raise ValueError("gaussian_noise initialisation needs a random stream")

        def noise(z):
            z = np.asarray(z, dtype=float)
            return rng.normal(0.0, config.sigma_y, size=z.shape)
        return noise
    if mode is InsiderInit.EQUILIBRIUM_LINEAR:
        return eq.order

    def approx(z):
        z = np.asarray(z, dtype=float)
        return eq.order(z) + 0.1 * config.sigma_y * np.sin(z)
    return approx


def _draw(config, tc, streams):
    return (sample(config.z_dist, tc.n_samples, streams.z),
            sample(config.y_dist, tc.n_samples, streams.y))


def train_market_maker(mm: Mlp, insider_fn, config: MarketConfig, tc: TrainingConfig,
                       streams: Streams, state: AdamState | None = None) -> tuple[Mlp, float]:
    """Train a copy of ``mm`` on ``(z, insider_fn(z) + y)`` pairs.

    ``state`` carries the optimizer across loops and is updated in place.
    Returns the new network and the mean loss of the final epoch.
    """
    if state is None:
        state = AdamState.fresh(mm, **tc.adam_hyperparameters())
    z, y = _draw(config, tc, streams)
    v = np.asarray(insider_fn(z), dtype=float) + y
    out = mm.copy()
    loss = net.train_mm_epochs(out, state, z, v, tc.epochs_per_loop)
    return out, loss


def train_insider(insider: Mlp, mm_frozen: Mlp, config: MarketConfig, tc: TrainingConfig,
                  streams: Streams, state: AdamState | None = None) -> tuple[Mlp, float]:
    """Train a copy of ``insider`` against ``mm_frozen`` with fee ``config.epsilon``."""
    if state is None:
        state = AdamState.fresh(insider, **tc.adam_hyperparameters())
    z, y = _draw(config, tc, streams)
    out = insider.copy()
    loss = net.train_insider_epochs(out, mm_frozen, state, z, y, config.epsilon,
                                    tc.epochs_per_loop)
    return out, loss


class LoopDiverged(TrainingDiverged):
    def __init__(self, loop: int, message: str):
        super().__init__(f"loop {loop}: {message}")
        self.loop = loop


def run_alternating(config: MarketConfig, tc: TrainingConfig) -> tuple[Mlp, Mlp, LoopTrace]:
    """Full alternating schedule; a pure function of ``(config, tc)``."""
    streams = Streams.from_seed(tc.seed)
    insider = net.init_mlp(tc.insider_layers, tc.activation, streams.weights)
    mm = net.init_mlp(tc.mm_layers, tc.activation, streams.weights)
    st_i = AdamState.fresh(insider, **tc.adam_hyperparameters())
    st_m = AdamState.fresh(mm, **tc.adam_hyperparameters())
    order_fn = initial_insider(tc.insider_init, config, streams.noise)
    trace = LoopTrace()
    for loop in range(1, tc.n_loops + 1):
        try:
            mm, mm_loss = train_market_maker(mm, order_fn, config, tc, streams, st_m)
            insider, ins_loss = train_insider(insider, mm, config, tc, streams, st_i)
        except TrainingDiverged as exc:
            raise LoopDiverged(loop, str(exc)) from exc
        order_fn = insider
        est = estimate_equilibrium(insider, mm, config)
        rec = LoopRecord(loop, mm_loss, ins_loss, est.insider_slope, est.insider_intercept,
                         est.insider_r2, est.mm_slope, est.mm_intercept, est.mm_r2,
                         est.max_abs_deviation_insider, est.max_abs_deviation_mm)
        if not all(math.isfinite(v) for v in asdict(rec).values()):
            raise LoopDiverged(loop, "non-finite diagnostics")
        trace.records.append(rec)
    return insider, mm, trace
