"""Scalar-to-scalar feed-forward networks with hand-written backpropagation.

Parameters live in one flat float64 vector. Layer ``l`` with fan-in ``a`` and
fan-out ``b`` stores its ``b x a`` weight matrix row-major, followed by its
``b`` biases. Hidden layers use ReLU or tanh, the output layer is linear.

The per-sample kernels are compiled with numba; the alternating training loop
runs millions of batch-size-one updates, which pure numpy cannot do at
desk-scale speed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

ACTIVATIONS = {"relu": 0, "tanh": 1}
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    """A loss or parameter became non-finite during training."""


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _offsets(sizes):
    n_layers = sizes.shape[0] - 1
    offs = np.empty(n_layers + 1, np.int64)
    o = 0
    for l in range(n_layers):
        offs[l] = o
        o += sizes[l + 1] * sizes[l] + sizes[l + 1]
    offs[n_layers] = o
    return offs


@njit(cache=True)
def _forward(theta, sizes, offs, act, x, pre, post):
    """Fill ``pre``/``post`` activation buffers and return the output."""
    n_layers = sizes.shape[0] - 1
    post[0, 0] = x
    for l in range(n_layers):
        nin = sizes[l]
        nout = sizes[l + 1]
        off = offs[l]
        boff = off + nout * nin
        last = l == n_layers - 1
        for j in range(nout):
            s = theta[boff + j]
            row = off + j * nin
            for i in range(nin):
                s += theta[row + i] * post[l, i]
            pre[l, j] = s
            if last:
                post[l + 1, j] = s
            elif act == 0:
                post[l + 1, j] = s if s > 0.0 else 0.0
            else:
                post[l + 1, j] = math.tanh(s)
    return post[n_layers, 0]


@njit(cache=True)
def _backward(theta, sizes, offs, act, pre, post, dout, grad, want_params):
    """Backpropagate ``dout = dL/d(output)``.

    Writes parameter partials into ``grad`` when ``want_params`` and returns
    dL/d(input).
    """
    n_layers = sizes.shape[0] - 1
    width = post.shape[1]
    delta = np.zeros(width)
    nxt = np.zeros(width)
    delta[0] = dout
    for l in range(n_layers - 1, -1, -1):
        nin = sizes[l]
        nout = sizes[l + 1]
        off = offs[l]
        if want_params:
            boff = off + nout * nin
            for j in range(nout):
                row = off + j * nin
                dj = delta[j]
                for i in range(nin):
                    grad[row + i] = dj * post[l, i]
                grad[boff + j] = dj
        for i in range(nin):
            s = 0.0
            for j in range(nout):
                s += theta[off + j * nin + i] * delta[j]
            if l > 0:
                if act == 0:
                    s = s if pre[l - 1, i] > 0.0 else 0.0
                else:
                    h = post[l, i]
                    s = s * (1.0 - h * h)
            nxt[i] = s
        for i in range(nin):
            delta[i] = nxt[i]
    return delta[0]


@njit(cache=True)
def _adam_update(theta, g, m, v, t, lr, b1, b2, eps):
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k in range(theta.shape[0]):
        gk = g[k]
        m[k] = b1 * m[k] + (1.0 - b1) * gk
        v[k] = b2 * v[k] + (1.0 - b2) * gk * gk
        theta[k] -= lr * (m[k] / bc1) / (math.sqrt(v[k] / bc2) + eps)


@njit(cache=True)
def _all_finite(a):
    for k in range(a.shape[0]):
        if not np.isfinite(a[k]):
            return False
    return True


@njit(cache=True)
def _predict(theta, sizes, act, xs):
    offs = _offsets(sizes)
    width = sizes.max()
    pre = np.zeros((sizes.shape[0] - 1, width))
    post = np.zeros((sizes.shape[0], width))
    out = np.empty(xs.shape[0])
    for k in range(xs.shape[0]):
        out[k] = _forward(theta, sizes, offs, act, xs[k], pre, post)
    return out


@njit(cache=True)
def _mm_step(theta, sizes, offs, act, z, v, pre, post, grad):
    out = _forward(theta, sizes, offs, act, v, pre, post)
    r = z - out
    _backward(theta, sizes, offs, act, pre, post, -2.0 * r, grad, True)
    return r * r


@njit(cache=True)
def _insider_step(th_i, sz_i, off_i, act_i, th_m, sz_m, off_m, act_m,
                  z, y, eps_cost, pre_i, post_i, pre_m, post_m, grad, scratch):
    x = _forward(th_i, sz_i, off_i, act_i, z, pre_i, post_i)
    p = _forward(th_m, sz_m, off_m, act_m, x + y, pre_m, post_m)
    dp = _backward(th_m, sz_m, off_m, act_m, pre_m, post_m, 1.0, scratch, False)
    sgn = 1.0 if x > 0.0 else (-1.0 if x < 0.0 else 0.0)
    loss = -((z - p) * x - eps_cost * abs(x))
    dloss_dx = dp * x - (z - p) + eps_cost * sgn
    _backward(th_i, sz_i, off_i, act_i, pre_i, post_i, dloss_dx, grad, True)
    return loss


@njit(cache=True)
def _train_mm_kernel(theta, sizes, act, m, v, t, zs, vs, epochs, lr, b1, b2, eps):
    offs = _offsets(sizes)
    width = sizes.max()
    pre = np.zeros((sizes.shape[0] - 1, width))
    post = np.zeros((sizes.shape[0], width))
    grad = np.zeros(theta.shape[0])
    n = zs.shape[0]
    mean_loss = 0.0
    for _ in range(epochs):
        total = 0.0
        for k in range(n):
            loss = _mm_step(theta, sizes, offs, act, zs[k], vs[k], pre, post, grad)
            if not np.isfinite(loss):
                return np.nan, t
            total += loss
            t += 1
            _adam_update(theta, grad, m, v, t, lr, b1, b2, eps)
        mean_loss = total / n
        if not _all_finite(theta):
            return np.nan, t
    return mean_loss, t


@njit(cache=True)
def _train_insider_kernel(th_i, sz_i, act_i, th_m, sz_m, act_m, m, v, t,
                          zs, ys, eps_cost, epochs, lr, b1, b2, eps):
    off_i = _offsets(sz_i)
    off_m = _offsets(sz_m)
    wi = sz_i.max()
    wm = sz_m.max()
    pre_i = np.zeros((sz_i.shape[0] - 1, wi))
    post_i = np.zeros((sz_i.shape[0], wi))
    pre_m = np.zeros((sz_m.shape[0] - 1, wm))
    post_m = np.zeros((sz_m.shape[0], wm))
    grad = np.zeros(th_i.shape[0])
    scratch = np.zeros(th_m.shape[0])
    n = zs.shape[0]
    mean_loss = 0.0
    for _ in range(epochs):
        total = 0.0
        for k in range(n):
            loss = _insider_step(th_i, sz_i, off_i, act_i, th_m, sz_m, off_m, act_m,
                                 zs[k], ys[k], eps_cost, pre_i, post_i, pre_m, post_m,
                                 grad, scratch)
            if not np.isfinite(loss):
                return np.nan, t
            total += loss
            t += 1
            _adam_update(th_i, grad, m, v, t, lr, b1, b2, eps)
        mean_loss = total / n
        if not _all_finite(th_i):
            return np.nan, t
    return mean_loss, t


# ---------------------------------------------------------------------------
# public API


@dataclass
class Mlp:
    layer_sizes: tuple[int, ...]
    params: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        _check_sizes(self.layer_sizes)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (n_params(self.layer_sizes),):
            raise ValueError(f"expected {n_params(self.layer_sizes)} parameters, "
                             f"got shape {self.params.shape}")

    @property
    def _sizes(self) -> np.ndarray:
        return np.asarray(self.layer_sizes, dtype=np.int64)

    @property
    def _act(self) -> int:
        return ACTIVATIONS[self.activation]

    def _layer_slices(self):
        o = 0
        for nin, nout in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            yield slice(o, o + nout * nin), (nout, nin), slice(o + nout * nin, o + nout * nin + nout)
            o += nout * nin + nout

    @property
    def weights(self) -> list[np.ndarray]:
        """Per-layer weight matrices (out x in), as views into ``params``."""
        return [self.params[w].reshape(shape) for w, shape, _ in self._layer_slices()]

    @property
    def biases(self) -> list[np.ndarray]:
        return [self.params[b] for _, _, b in self._layer_slices()]

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.params.copy(), self.activation)

    def __call__(self, x):
        return predict(self, x)

    def __eq__(self, other):
        if not isinstance(other, Mlp):
            return NotImplemented
        return (self.layer_sizes == other.layer_sizes and self.activation == other.activation
                and np.array_equal(self.params, other.params))


def _check_sizes(sizes):
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output layer")
    if sizes[0] != 1 or sizes[-1] != 1:
        raise ValueError(f"networks map scalars to scalars, got sizes {sizes}")
    if any(s < 1 for s in sizes):
        raise ValueError(f"zero-width layer in {sizes}")


def n_params(layer_sizes) -> int:
    return sum(b * a + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def init_mlp(layer_sizes, hidden_activation: str = "relu",
             rng: np.random.Generator | None = None) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    layer_sizes = tuple(int(s) for s in layer_sizes)
    _check_sizes(layer_sizes)
    if rng is None:
        rng = np.random.default_rng()
    chunks = []
    for nin, nout in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = math.sqrt(6.0 / (nin + nout))
        chunks.append(rng.uniform(-bound, bound, size=nout * nin))
        chunks.append(np.zeros(nout))
    return Mlp(layer_sizes, np.concatenate(chunks), hidden_activation)


def forward(mlp: Mlp, x: float) -> float:
    return float(_predict(mlp.params, mlp._sizes, mlp._act, np.array([float(x)]))[0])


def predict(mlp: Mlp, xs):
    """Evaluate the network elementwise; same arithmetic as :func:`forward`."""
    arr = np.asarray(xs, dtype=np.float64)
    out = _predict(mlp.params, mlp._sizes, mlp._act, np.ascontiguousarray(arr.ravel()))
    if arr.ndim == 0:
        return float(out[0])
    return out.reshape(arr.shape)


def _buffers(mlp):
    w = max(mlp.layer_sizes)
    n = len(mlp.layer_sizes)
    return np.zeros((n - 1, w)), np.zeros((n, w))


def mm_loss_grad(mm: Mlp, z: float, v: float) -> tuple[float, np.ndarray]:
    """Squared pricing error ``(z - M(v))^2`` and its parameter gradient."""
    sizes = mm._sizes
    pre, post = _buffers(mm)
    grad = np.zeros_like(mm.params)
    loss = _mm_step(mm.params, sizes, _offsets(sizes), mm._act, float(z), float(v),
                    pre, post, grad)
    return float(loss), grad


def insider_loss_grad(insider: Mlp, mm_frozen: Mlp, z: float, y: float,
                      epsilon: float = 0.0) -> tuple[float, np.ndarray]:
    """Negative fee-adjusted profit ``-[(z - M(I(z) + y)) I(z) - eps |I(z)|]``.

    The gradient covers the insider parameters only; the market maker is
    differentiated through but left untouched. The subgradient of ``|x|`` at 0
    is taken as 0.
    """
    si, sm = insider._sizes, mm_frozen._sizes
    pre_i, post_i = _buffers(insider)
    pre_m, post_m = _buffers(mm_frozen)
    grad = np.zeros_like(insider.params)
    scratch = np.zeros_like(mm_frozen.params)
    loss = _insider_step(insider.params, si, _offsets(si), insider._act,
                         mm_frozen.params, sm, _offsets(sm), mm_frozen._act,
                         float(z), float(y), float(epsilon),
                         pre_i, post_i, pre_m, post_m, grad, scratch)
    return float(loss), grad


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-7

    @classmethod
    def fresh(cls, mlp: Mlp, **hyper) -> "AdamState":
        return cls(np.zeros_like(mlp.params), np.zeros_like(mlp.params), 0, **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.first_moment.copy(), self.second_moment.copy(), self.step_count,
                         self.learning_rate, self.beta1, self.beta2, self.eps_hat)

    def hyperparameters(self) -> dict:
        return {"learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "eps_hat": self.eps_hat}


def adam_step(mlp: Mlp, grad: np.ndarray, state: AdamState) -> tuple[Mlp, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if grad.shape != mlp.params.shape or state.first_moment.shape != mlp.params.shape:
        raise ValueError(f"shape mismatch: params {mlp.params.shape}, grad {grad.shape}, "
                         f"state {state.first_moment.shape}")
    new, st = mlp.copy(), state.copy()
    st.step_count += 1
    _adam_update(new.params, grad, st.first_moment, st.second_moment, st.step_count,
                 st.learning_rate, st.beta1, st.beta2, st.eps_hat)
    return new, st


def finite_diff_grad(loss_fn, mlp: Mlp, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn(mlp)`` w.r.t. every parameter."""
    if not h > 0:
        raise ValueError("h must be > 0")
    probe = mlp.copy()
    grad = np.empty_like(mlp.params)
    for k in range(grad.size):
        orig = probe.params[k]
        probe.params[k] = orig + h
        up = loss_fn(probe)
        probe.params[k] = orig - h
        down = loss_fn(probe)
        probe.params[k] = orig
        grad[k] = (up - down) / (2 * h)
    return grad


def train_mm_epochs(mm: Mlp, state: AdamState, zs, vs, epochs: int) -> float:
    """In-place batch-size-one Adam training on ``(z - M(v))^2``.

    Returns the mean per-sample loss of the last epoch.
    """
    zs = np.ascontiguousarray(zs, dtype=np.float64)
    vs = np.ascontiguousarray(vs, dtype=np.float64)
    loss, t = _train_mm_kernel(mm.params, mm._sizes, mm._act, state.first_moment,
                               state.second_moment, state.step_count, zs, vs, int(epochs),
                               state.learning_rate, state.beta1, state.beta2, state.eps_hat)
    state.step_count = int(t)
    if not math.isfinite(loss):
        raise TrainingDiverged("market maker loss or parameters became non-finite")
    return float(loss)


def train_insider_epochs(insider: Mlp, mm_frozen: Mlp, state: AdamState, zs, ys,
                         epsilon: float, epochs: int) -> float:
    """In-place batch-size-one Adam training of the insider against a frozen market maker."""
    zs = np.ascontiguousarray(zs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    loss, t = _train_insider_kernel(insider.params, insider._sizes, insider._act,
                                    mm_frozen.params, mm_frozen._sizes, mm_frozen._act,
                                    state.first_moment, state.second_moment, state.step_count,
                                    zs, ys, float(epsilon), int(epochs), state.learning_rate,
                                    state.beta1, state.beta2, state.eps_hat)
    state.step_count = int(t)
    if not math.isfinite(loss):
        raise TrainingDiverged("insider loss or parameters became non-finite")
    return float(loss)


# ---------------------------------------------------------------------------
# checkpoints


def to_checkpoint(mlp: Mlp, metadata: dict | None = None) -> dict:
    return {
        "format": "kylelab-mlp",
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(mlp.layer_sizes),
        "activation": mlp.activation,
        # repr of a float64 round-trips exactly through json
        "params": [float(p) for p in mlp.params],
        "metadata": metadata or {},
    }


def from_checkpoint(data: dict) -> tuple[Mlp, dict]:
    if data.get("format") != "kylelab-mlp":
        raise ValueError("not a kylelab network checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data.get('version')}")
    mlp = Mlp(tuple(data["layer_sizes"]), np.array(data["params"], dtype=np.float64),
              data["activation"])
    return mlp, data.get("metadata", {})


def save(mlp: Mlp, path, metadata: dict | None = None) -> None:
    Path(path).write_text(json.dumps(to_checkpoint(mlp, metadata), indent=1, sort_keys=True))


def load(path) -> tuple[Mlp, dict]:
    return from_checkpoint(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# gradient checking


def preactivations(mlp: Mlp, x: float) -> list[np.ndarray]:
    """Hidden-layer pre-activations at ``x`` (plain numpy, independent of the kernels)."""
    h = np.array([float(x)])
    out = []
    ws, bs = mlp.weights, mlp.biases
    for w, b in zip(ws[:-1], bs[:-1]):
        a = w @ h + b
        out.append(a)
        h = np.maximum(a, 0.0) if mlp.activation == "relu" else np.tanh(a)
    return out


def relative_error(analytic, numeric, floor: float | None = None) -> np.ndarray:
    """Entrywise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` defaults to 1e-4 of the largest partial: central differences
    carry roundoff of order eps * |loss| / h, which swamps tiny entries.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    if floor is None:
        floor = max(1e-4 * float(np.max(np.abs(a))), 1e-12)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _near_kink(mlp, x, margin):
    return mlp.activation == "relu" and any(np.any(np.abs(a) < margin) for a in preactivations(mlp, x))


def gradient_check(n_draws: int = 50, seed: int = 0, activation: str = "tanh",
                   h: float = 1e-5, epsilon: float = 0.5, margin: float = 1e-3,
                   insider_layers=(1, 10, 1), mm_layers=(1, 10, 10, 1)) -> dict:
    """Max relative error between backprop and central differences over random draws.

    For ReLU networks, draws with a hidden pre-activation or an insider order
    within ``margin`` of zero are redrawn, since the loss is not differentiable
    there.
    """
    rng = np.random.default_rng(seed)
    worst_mm = worst_ins = 0.0
    used = 0
    while used < n_draws:
        ins = init_mlp(insider_layers, activation, rng)
        mm = init_mlp(mm_layers, activation, rng)
        ins.params += rng.normal(0.0, 0.1, ins.params.shape)
        mm.params += rng.normal(0.0, 0.1, mm.params.shape)
        z, y = rng.normal(0.5, 2.0), rng.normal(0.0, 1.0)
        x = forward(ins, z)
        v = x + y
        if abs(x) < margin or _near_kink(ins, z, margin) or _near_kink(mm, v, margin):
            continue
        used += 1
        _, g = mm_loss_grad(mm, z, v)
        fd = finite_diff_grad(lambda m: mm_loss_grad(m, z, v)[0], mm, h)
        worst_mm = max(worst_mm, float(relative_error(g, fd).max()))
        _, g = insider_loss_grad(ins, mm, z, y, epsilon)
        fd = finite_diff_grad(lambda m: insider_loss_grad(m, mm, z, y, epsilon)[0], ins, h)
        worst_ins = max(worst_ins, float(relative_error(g, fd).max()))
    return {"activation": activation, "n_draws": n_draws, "seed": seed, "h": h,
            "epsilon": epsilon, "max_rel_error_mm": worst_mm,
            "max_rel_error_insider": worst_ins}
