"""Fully connected softmax classifier with analytic first and second order derivatives.

Parameters live in one flat ``float64`` vector laid out layer by layer as
``W_1, b_1, W_2, b_2, ...`` with ``W_l`` stored row-major as (fan_out, fan_in).
The final affine layer is always the last block, so the last-layer scope is a
contiguous slice.

The Hessian-vector product is Pearlmutter's R-operator applied to the
backward pass, so it is exact up to rounding and never forms the Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .data import Dataset, as_arrays
from .linalg import RngStream

__all__ = [
    "ArchSpec",
    "ParameterVector",
    "MlpModel",
    "build_mlp",
    "forward",
    "features",
    "per_instance_loss",
    "loss",
    "grad",
    "loss_and_grad",
    "last_layer_grad",
    "last_layer_grads",
    "hvp",
    "max_loss_instance",
    "softmax",
    "log_softmax",
]

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805

ACTIVATIONS = ("relu", "selu")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    return SELU_SCALE * np.where(z > 0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def _act_d1(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    return SELU_SCALE * np.where(z > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(z, 0.0)))


def _act_d2(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.zeros_like(z)
    return SELU_SCALE * np.where(z > 0, 0.0, SELU_ALPHA * np.exp(np.minimum(z, 0.0)))


@dataclass(frozen=True)
class ArchSpec:
    n_in: int
    hidden_layers: int
    hidden_width: int
    n_out: int
    activation: str = "relu"

    def __post_init__(self):
        if self.hidden_layers < 0:
            raise ValueError("depth must be >= 0")
        if self.hidden_layers and self.hidden_width < 1:
            raise ValueError("width must be >= 1 when depth >= 1")
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("n_in and n_out must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) per affine layer."""
        dims = [self.n_in] + [self.hidden_width] * self.hidden_layers + [self.n_out]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)


@dataclass(frozen=True)
class LayerSlot:
    fan_out: int
    fan_in: int
    offset: int

    @property
    def w_slice(self) -> slice:
        return slice(self.offset, self.offset + self.fan_out * self.fan_in)

    @property
    def b_slice(self) -> slice:
        start = self.offset + self.fan_out * self.fan_in
        return slice(start, start + self.fan_out)

    @property
    def size(self) -> int:
        return self.fan_out * (self.fan_in + 1)


@lru_cache(maxsize=None)
def layout_for(arch: ArchSpec) -> tuple[LayerSlot, ...]:
    slots, off = [], 0
    for o, i in arch.layer_shapes:
        slots.append(LayerSlot(o, i, off))
        off += o * i + o
    return tuple(slots)


@dataclass(eq=False)
class ParameterVector:
    values: np.ndarray
    layout: tuple[LayerSlot, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        total = sum(s.size for s in self.layout)
        if self.values.shape != (total,):
            raise ValueError(f"parameter vector has shape {self.values.shape}, layout needs ({total},)")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def last_layer_range(self) -> tuple[int, int]:
        s = self.layout[-1]
        return s.offset, s.offset + s.size

    @property
    def last_layer(self) -> np.ndarray:
        lo, hi = self.last_layer_range
        return self.values[lo:hi]

    def weight(self, layer: int) -> np.ndarray:
        s = self.layout[layer]
        return self.values[s.w_slice].reshape(s.fan_out, s.fan_in)

    def bias(self, layer: int) -> np.ndarray:
        return self.values[self.layout[layer].b_slice]

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.layout)


@dataclass(eq=False)
class MlpModel:
    arch: ArchSpec
    params: ParameterVector
    kind: str = field(default="mlp", init=False)

    @property
    def theta(self) -> np.ndarray:
        return self.params.values

    def with_theta(self, theta: np.ndarray) -> "MlpModel":
        return replace(self, params=self.params.with_values(np.asarray(theta, dtype=np.float64)))

    def copy(self) -> "MlpModel":
        return replace(self, params=self.params.copy())


def build_mlp(arch: ArchSpec, stream: RngStream) -> MlpModel:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    layout = layout_for(arch)
    values = np.zeros(arch.n_params)
    for s in layout:
        values[s.w_slice] = stream.normal(s.fan_out * s.fan_in) * np.sqrt(2.0 / s.fan_in)
    return MlpModel(arch, ParameterVector(values, layout))


@lru_cache(maxsize=None)
def _slices(arch: ArchSpec):
    return tuple((s.w_slice, (s.fan_out, s.fan_in), s.b_slice) for s in layout_for(arch))


def _unpack(arch: ArchSpec, theta: np.ndarray):
    return [(theta[ws].reshape(shape), theta[bs]) for ws, shape, bs in _slices(arch)]


def _forward_cache(arch: ArchSpec, theta: np.ndarray, X: np.ndarray):
    """Return layer weights, pre-activations and layer inputs; ``zs[-1]`` are the logits."""
    layers = _unpack(arch, theta)
    acts, zs = [X], []
    a = X
    for li, (W, b) in enumerate(layers):
        z = a @ W.T + b
        zs.append(z)
        if li < len(layers) - 1:
            a = _act(arch.activation, z)
            acts.append(a)
    return layers, zs, acts


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(model: MlpModel, X: np.ndarray) -> None:
    if X.shape[-1] != model.arch.n_in:
        raise ValueError(f"input has {X.shape[-1]} features, model expects {model.arch.n_in}")


def forward(model: MlpModel, x) -> np.ndarray:
    """Logits for one input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(model, x)
    _, zs, _ = _forward_cache(model.arch, model.theta, np.atleast_2d(x))
    return zs[-1][0] if x.ndim == 1 else zs[-1]


def features(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Input to the final affine layer (the raw input for depth 0)."""
    _, _, acts = _forward_cache(model.arch, model.theta, np.atleast_2d(X))
    return acts[-1]


def per_instance_loss(model: MlpModel, batch) -> np.ndarray:
    X, y = as_arrays(batch)
    _check_input(model, X)
    logits = forward(model, X)
    return -log_softmax(logits)[np.arange(len(y)), y]


def loss(model: MlpModel, batch, l2: float = 0.0) -> float:
    """Mean softmax cross-entropy plus ``l2/2 * ||theta||^2``."""
    ce = per_instance_loss(model, batch).mean()
    return float(ce + 0.5 * l2 * model.theta @ model.theta)


def _loss_grad(arch: ArchSpec, theta: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float):
    layers, zs, acts = _forward_cache(arch, theta, X)
    n = len(y)
    logp = log_softmax(zs[-1])
    rows = np.arange(n)
    ce = -logp[rows, y].sum() / n
    g = np.exp(logp)
    g[rows, y] -= 1.0
    g /= n
    out = np.empty_like(theta)
    slots = _slices(arch)
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        ws, _, bs = slots[li]
        out[ws] = (g.T @ acts[li]).ravel()
        out[bs] = g.sum(axis=0)
        if li:
            g = (g @ W) * _act_d1(arch.activation, zs[li - 1])
    if l2:
        out += l2 * theta
    return float(ce + 0.5 * l2 * theta @ theta), out


def loss_and_grad(model: MlpModel, batch, l2: float = 0.0) -> tuple[float, np.ndarray]:
    X, y = as_arrays(batch)
    _check_input(model, X)
    return _loss_grad(model.arch, model.theta, X, y, l2)


def grad(model: MlpModel, batch, l2: float = 0.0) -> ParameterVector:
    return model.params.with_values(loss_and_grad(model, batch, l2)[1])


def last_layer_grads(model: MlpModel, batch, l2: float = 0.0, feats: np.ndarray | None = None) -> np.ndarray:
    """Per-instance gradients w.r.t. the final layer, one row per instance.

    Each row is the gradient of ``CE_i + l2/2 ||theta||^2`` restricted to the
    final layer's weights and biases.
    """
    X, y = as_arrays(batch)
    H = features(model, X) if feats is None else feats
    s = model.params.layout[-1]
    W = model.theta[s.w_slice].reshape(s.fan_out, s.fan_in)
    b = model.theta[s.b_slice]
    r = softmax(H @ W.T + b)
    r[np.arange(len(y)), y] -= 1.0
    G = np.concatenate([(r[:, :, None] * H[:, None, :]).reshape(len(y), -1), r], axis=1)
    if l2:
        G += l2 * model.params.last_layer
    return G


def last_layer_grad(model: MlpModel, z, l2: float = 0.0) -> np.ndarray:
    return last_layer_grads(model, z, l2).mean(axis=0)


def _hvp(arch: ArchSpec, theta: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float, v: np.ndarray) -> np.ndarray:
    layers, zs, acts = _forward_cache(arch, theta, X)
    vlayers = _unpack(arch, v)
    act = arch.activation
    n = len(y)
    L = len(layers)

    # R-forward: directional derivatives of every pre-activation and layer input
    r_acts = [np.zeros_like(X)]
    r_zs = []
    for li in range(L):
        W, _ = layers[li]
        VW, Vb = vlayers[li]
        rz = r_acts[li] @ W.T + acts[li] @ VW.T + Vb
        r_zs.append(rz)
        if li < L - 1:
            r_acts.append(_act_d1(act, zs[li]) * rz)

    p = softmax(zs[-1])
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    g /= n
    rg = p * (r_zs[-1] - (p * r_zs[-1]).sum(axis=1, keepdims=True)) / n

    out = np.empty_like(theta)
    slots = layout_for(arch)
    for li in range(L - 1, -1, -1):
        W, _ = layers[li]
        VW, _ = vlayers[li]
        s = slots[li]
        out[s.w_slice] = (rg.T @ acts[li] + g.T @ r_acts[li]).ravel()
        out[s.b_slice] = rg.sum(axis=0)
        if li:
            z = zs[li - 1]
            d1 = _act_d1(act, z)
            da = g @ W
            rda = rg @ W + g @ VW
            rg = rda * d1 + da * _act_d2(act, z) * r_zs[li - 1]
            g = da * d1
    if l2:
        out += l2 * v
    return out


def hvp(model: MlpModel, batch, v: np.ndarray, l2: float = 0.0) -> np.ndarray:
    """Exact ``H v`` for the mean loss over ``batch`` with respect to all parameters."""
    X, y = as_arrays(batch)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != model.theta.shape:
        raise ValueError(f"direction has shape {v.shape}, expected {model.theta.shape}")
    return _hvp(model.arch, model.theta, X, y, l2, v)


def max_loss_instance(model: MlpModel, ds: Dataset) -> int:
    """Index of the highest-loss instance; ``argmax`` keeps the lowest index on ties."""
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    return int(np.argmax(per_instance_loss(model, ds)))
