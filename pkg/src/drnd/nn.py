"""Dense networks on numpy: init, forward, reverse-mode gradients, Adam.

Weights are stored ``(fan_in, fan_out)`` so a batch ``x`` of shape
``(batch, fan_in)`` maps through ``x @ W + b``.  Hidden layers apply the
activation named in ``MlpSpec``; the output layer is always linear.  Everything is float64.

Initialization (``MlpSpec.init``):

* ``he_uniform`` (default): weights ~ U(+-sqrt(6/fan_in)), biases ~ U(+-1/sqrt(fan_in));
* ``fan_in_uniform``: weights and biases ~ U(+-1/sqrt(fan_in)), the usual
  default of deep-learning frameworks for dense layers.

The draw uses only the ``MlpSpec`` (including ``seed``), so equal specs give
bit-identical parameters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError
from .rng import make_rng

ACTIVATIONS = ("relu", "tanh", "identity")
INITS = ("he_uniform", "fan_in_uniform")


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    activation: str = "relu"
    seed: int = 0
    init: str = "he_uniform"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ConfigurationError(f"layer_dims needs at least 2 entries, got {dims}")
        if any(d < 1 for d in dims):
            raise ConfigurationError(f"all layer dims must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.init not in INITS:
            raise ConfigurationError(f"init must be one of {INITS}, got {self.init!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def with_seed(self, seed: int) -> "MlpSpec":
        return MlpSpec(self.layer_dims, self.activation, seed, self.init)


@dataclass
class MlpParams:
    """Per-layer weights and biases.  Also used as the gradient container."""

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        dims = self.spec.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError(f"expected {len(dims) - 1} layers for dims {dims}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ShapeError(
                    f"layer {i}: weight {w.shape} / bias {b.shape} inconsistent with dims {dims}"
                )

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.spec, [np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def map(self, fn, *others: "MlpParams") -> "MlpParams":
        ws = [fn(w, *(o.weights[i] for o in others)) for i, w in enumerate(self.weights)]
        bs = [fn(b, *(o.biases[i] for o in others)) for i, b in enumerate(self.biases)]
        return MlpParams(self.spec, ws, bs)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec: np.ndarray) -> "MlpParams":
        out = self.copy()
        pos = 0
        for a in out.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, params need {pos}")
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def digest(self) -> str:
        """SHA-256 over shapes and raw float64 bytes, for freeze checks."""
        h = hashlib.sha256(repr(self.spec.layer_dims).encode())
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()


class ForwardCache(NamedTuple):
    inputs: list[np.ndarray]   # input to each layer, 2-D
    pre: list[np.ndarray]      # pre-activation of each layer, 2-D
    squeeze: bool


class Gradients(NamedTuple):
    params: MlpParams
    inputs: np.ndarray


def mlp_init(spec: MlpSpec) -> MlpParams:
    rng = make_rng(int(spec.seed), "mlp-init")
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        bb = 1.0 / np.sqrt(fan_in)
        wb = np.sqrt(6.0 / fan_in) if spec.init == "he_uniform" else bb
        weights.append(rng.uniform(-wb, wb, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bb, bb, size=fan_out))
    return MlpParams(spec, weights, biases)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match input dim {params.spec.in_dim}")
    return x, squeeze


def mlp_forward_cached(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    h, squeeze = _as_batch(params, x)
    inputs, pre = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = z if i == last else _activate(z, params.spec.activation)
    return (h[0] if squeeze else h), ForwardCache(inputs, pre, squeeze)


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Output for a single vector ``x`` (1-D) or a batch (2-D, one row per input)."""
    return mlp_forward_cached(params, x)[0]


def mlp_backward(params: MlpParams, x, upstream_grad, cache: ForwardCache | None = None) -> Gradients:
    """Vector-Jacobian product of the network at ``x``.

    ``upstream_grad`` is dLoss/dOutput with the same shape as the output.  For
    a batch, parameter gradients are summed over rows.  Returns gradients for
    every parameter plus dLoss/dInput.
    """
    if cache is None:
        _, cache = mlp_forward_cached(params, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    n_rows = cache.inputs[0].shape[0]
    if g.shape != (n_rows, params.spec.out_dim):
        raise ShapeError(f"upstream grad shape {np.shape(upstream_grad)} does not match output")
    n_layers = len(params.weights)
    dws: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        if i != n_layers - 1:
            g = g * _activation_grad(cache.pre[i], params.spec.activation)
        dws[i] = cache.inputs[i].T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    dx = g[0] if cache.squeeze else g
    return Gradients(MlpParams(params.spec, dws, dbs), dx)


@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    if lr <= 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0:
        raise ConfigurationError("Adam needs lr > 0, betas in [0, 1), eps > 0")
    return AdamState(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def check_finite(grads: MlpParams, what: str = "gradient") -> None:
    for i, (w, b) in enumerate(zip(grads.weights, grads.biases)):
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise NumericError(f"non-finite {what} in layer {i}")


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams) -> tuple[AdamState, MlpParams]:
    """One bias-corrected Adam update.  Inputs are not modified."""
    check_finite(grads)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = state.m.map(lambda m_, g: b1 * m_ + (1 - b1) * g, grads)
    v = state.v.map(lambda v_, g: b2 * v_ + (1 - b2) * g * g, grads)
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    lr, eps = state.lr, state.eps
    new = params.map(lambda p, m_, v_: p - lr * (m_ / c1) / (np.sqrt(v_ / c2) + eps), m, v)
    return AdamState(m, v, t, state.lr, b1, b2, eps), new


def soft_update(target: MlpParams, source: MlpParams, tau: float) -> MlpParams:
    """Polyak averaging: ``(1 - tau) * target + tau * source``."""
    return target.map(lambda t, s: (1.0 - tau) * t + tau * s, source)


@dataclass
class Trainable:
    """A network bundled with its optimizer; the mutable unit agents work with."""

    params: MlpParams
    opt: AdamState = field(default=None)  # type: ignore[assignment]

    @classmethod
    def create(cls, spec: MlpSpec, lr: float) -> "Trainable":
        p = mlp_init(spec)
        return cls(p, adam_init(p, lr))

    def apply(self, grads: MlpParams, max_norm: float | None = None) -> None:
        if max_norm is not None:
            norm = np.sqrt(sum(float(np.sum(a * a)) for a in grads.arrays()))
            if norm > max_norm:
                grads = grads.map(lambda g: g * (max_norm / norm))
        self.opt, self.params = adam_step(self.opt, self.params, grads)
