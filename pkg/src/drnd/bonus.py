"""Distributional random network distillation bonus.

A frozen ensemble of ``N`` random target networks defines, for every input
``x``, a discrete random variable ``c(x)`` uniform over the ``N`` target
outputs.  A predictor regresses onto fresh draws of ``c(x)``; the bonus mixes

* ``b1(x) = ||f(x) - mu(x)||^2``, distance to the ensemble mean, and
* ``b2(x) = sqrt(sum_j(f_j^2 - mu_j^2) / sum_j(B2_j - mu_j^2))``, a
  square-root pseudo-count (the ratio estimates ``1/n`` once the predictor
  has converged to the mean of ``n`` draws),

as ``alpha * b1 + (1 - alpha) * b2``.  ``alpha=1, N=1`` is plain RND;
``alpha=0`` with the two constant targets -1 and +1 (``mode="rademacher"``)
is the coin-flip-network bonus ``sqrt(||f||^2 / d)``.

Vector outputs are pooled: numerator and denominator of the ``b2`` ratio are
summed over output dimensions before dividing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DegenerateError, NumericError, ShapeError
from .nn import (
    AdamState,
    MlpParams,
    MlpSpec,
    adam_init,
    adam_step,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    mlp_init,
)
from .rng import derive_seed

MODES = ("random_mlp", "rademacher")


# ----------------------------------------------------------------------------
# target ensemble and moments


def _freeze(params: MlpParams) -> MlpParams:
    for a in params.arrays():
        a.setflags(write=False)
    return params


@dataclass(frozen=True)
class TargetEnsemble:
    spec: MlpSpec
    targets: tuple[MlpParams, ...]
    mode: str = "random_mlp"

    @property
    def n(self) -> int:
        return len(self.targets)

    @property
    def in_dim(self) -> int:
        return self.spec.in_dim

    @property
    def out_dim(self) -> int:
        return self.spec.out_dim

    def outputs(self, x) -> np.ndarray:
        """Stacked target outputs, shape ``(N, *output_shape)``."""
        return np.stack([mlp_forward(t, x) for t in self.targets])

    def digest(self) -> str:
        return "|".join(t.digest() for t in self.targets)

    def subset(self, n: int) -> "TargetEnsemble":
        """The first ``n`` targets (nested ensembles share draws)."""
        if not 1 <= n <= self.n:
            raise ConfigurationError(f"subset size {n} outside 1..{self.n}")
        return TargetEnsemble(self.spec, self.targets[:n], self.mode)


def ensemble_init(spec: MlpSpec, n: int, mode: str = "random_mlp", seed: int = 0) -> TargetEnsemble:
    """Draw ``n`` frozen targets.  Target ``i`` is seeded by ``derive_seed(seed, "target", i)``,
    so growing ``n`` keeps the earlier targets unchanged."""
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    if n < 1:
        raise ConfigurationError(f"number of targets must be >= 1, got {n}")
    if mode == "rademacher":
        if n != 2:
            raise ConfigurationError("rademacher targets come as exactly N=2 (all -1, all +1)")
        lin = MlpSpec((spec.in_dim, spec.out_dim), "identity", spec.seed, spec.init)
        targets = tuple(
            _freeze(MlpParams(lin, [np.zeros((spec.in_dim, spec.out_dim))], [np.full(spec.out_dim, s)]))
            for s in (-1.0, 1.0)
        )
        return TargetEnsemble(lin, targets, mode)
    targets = tuple(_freeze(mlp_init(spec.with_seed(derive_seed(seed, "target", i)))) for i in range(n))
    return TargetEnsemble(spec, targets, mode)


@dataclass(frozen=True)
class MomentSet:
    mu: np.ndarray
    b2: np.ndarray


def moments(ens: TargetEnsemble, x) -> MomentSet:
    """Element-wise mean and raw second moment of ``c(x)``."""
    outs = ens.outputs(x)
    return MomentSet(outs.mean(axis=0), (outs * outs).mean(axis=0))


def sample_c(ens: TargetEnsemble, x, rng: np.random.Generator) -> np.ndarray:
    """One draw of ``c(x)``.  For a batch, each row gets its own target index
    (one integer draw per row, taken in a single call)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return mlp_forward(ens.targets[int(rng.integers(ens.n))], x)
    idx = rng.integers(ens.n, size=x.shape[0])
    outs = ens.outputs(x)
    return outs[idx, np.arange(x.shape[0])]


# ----------------------------------------------------------------------------
# predictor


@dataclass
class PredictorState:
    params: MlpParams
    opt: AdamState

    def copy(self) -> "PredictorState":
        o = self.opt
        return PredictorState(self.params.copy(), AdamState(o.m.copy(), o.v.copy(), o.step, o.lr, o.beta1, o.beta2, o.eps))


def predictor_init(spec: MlpSpec, lr: float = 1e-4) -> PredictorState:
    p = mlp_init(spec)
    return PredictorState(p, adam_init(p, lr))


def _params(pred) -> MlpParams:
    return pred.params if isinstance(pred, PredictorState) else pred


def distill_step(pred: PredictorState, x, c) -> tuple[float, PredictorState]:
    """One Adam step on ``mean_batch ||f(x) - c||^2``; returns the pre-step loss."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if x.shape[0] == 0:
        raise ConfigurationError("distill_step needs a non-empty batch")
    f, cache = mlp_forward_cached(pred.params, x)
    if c.shape != f.shape:
        raise ShapeError(f"targets {c.shape} do not match predictor output {f.shape}")
    diff = f - c
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    if not math.isfinite(loss):
        raise NumericError("distillation loss is not finite")
    grads = mlp_backward(pred.params, x, 2.0 * diff / x.shape[0], cache).params
    opt, params = adam_step(pred.opt, pred.params, grads)
    return loss, PredictorState(params, opt)


# ----------------------------------------------------------------------------
# bonus terms


@dataclass(frozen=True)
class BonusConfig:
    alpha: float = 0.9
    denom_epsilon: float = 1e-8
    clamp_negative_numerator: bool = True
    ratio_upper_clamp: float | None = None
    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.denom_epsilon > 0:
            raise ConfigurationError(f"denom_epsilon must be > 0, got {self.denom_epsilon}")
        if self.ratio_upper_clamp is not None and self.ratio_upper_clamp <= 0:
            raise ConfigurationError("ratio_upper_clamp must be positive when set")


def bonus_b1(pred, mom: MomentSet, x) -> np.ndarray | float:
    f = mlp_forward(_params(pred), x)
    d = f - mom.mu
    out = np.sum(d * d, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _b2_ratio(f: np.ndarray, mom: MomentSet, cfg: BonusConfig):
    num = np.sum(f * f - mom.mu * mom.mu, axis=-1)
    den = np.sum(mom.b2 - mom.mu * mom.mu, axis=-1)
    floored = den < cfg.denom_epsilon
    if cfg.clamp_negative_numerator:
        ratio = np.maximum(num, 0.0) / np.maximum(den, cfg.denom_epsilon)
    else:
        if np.any(floored):
            raise DegenerateError("ensemble variance below denom_epsilon; targets agree at x")
        ratio = num / den
        if np.any(ratio < 0):
            raise NumericError("negative pseudo-count ratio with numerator clamping disabled")
    if cfg.ratio_upper_clamp is not None:
        ratio = np.minimum(ratio, cfg.ratio_upper_clamp)
    return ratio, num, den, floored


def bonus_b2(pred, mom: MomentSet, x, cfg: BonusConfig) -> np.ndarray | float:
    f = mlp_forward(_params(pred), x)
    ratio = _b2_ratio(f, mom, cfg)[0]
    out = np.sqrt(ratio)
    return float(out) if np.ndim(out) == 0 else out


def bonus_total(b1, b2, cfg: BonusConfig):
    return cfg.alpha * b1 + (1.0 - cfg.alpha) * b2


# ----------------------------------------------------------------------------
# normalizers


class RunningMeanStd:
    """Per-dimension running mean/variance (parallel Welford merge)."""

    def __init__(self, shape=(), epsilon: float = 1e-4):
        self.mean = np.zeros(shape)
        self.var = np.ones(shape)
        self.count = epsilon

    def update(self, batch) -> None:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.shape[0] == 0:
            return
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        b_count = batch.shape[0]
        delta = b_mean - self.mean
        tot = self.count + b_count
        self.mean = self.mean + delta * b_count / tot
        m2 = self.var * self.count + b_var * b_count + delta * delta * self.count * b_count / tot
        self.var = m2 / tot
        self.count = tot

    @property
    def std(self):
        return np.sqrt(self.var)


class InputNormalizer(RunningMeanStd):
    """Whitening for bonus inputs, clipped to ``[-clip, clip]``."""

    def __init__(self, dim: int, clip: float = 5.0, std_floor: float = 1e-8):
        super().__init__((dim,))
        self.clip = clip
        self.std_floor = std_floor

    def scale(self) -> np.ndarray:
        return 1.0 / np.maximum(self.std, self.std_floor)

    def __call__(self, x) -> np.ndarray:
        return np.clip((np.asarray(x, dtype=np.float64) - self.mean) * self.scale(), -self.clip, self.clip)

    def jacobian_diag(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) * self.scale()
        return np.where(np.abs(z) < self.clip, self.scale(), 0.0)


@dataclass
class RunningNormalizer:
    """Scales intrinsic rewards by the running std of their discounted return.

    One discounted-return accumulator per parallel stream; the Welford
    statistics pool all streams.
    """

    gamma: float = 0.99
    n_streams: int = 1
    std_floor: float = 1e-8
    stats: RunningMeanStd = field(default_factory=RunningMeanStd)
    returns: np.ndarray | None = None

    def __post_init__(self):
        if self.returns is None:
            self.returns = np.zeros(self.n_streams)

    @property
    def std(self) -> float:
        return float(max(np.sqrt(self.stats.var), self.std_floor))


def normalize_intrinsic(norm: RunningNormalizer, rewards) -> np.ndarray:
    """Update ``norm`` with ``rewards`` (shape ``(T,)`` or ``(T, n_streams)``,
    time-major) and return them divided by the updated return std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return r.copy()
    if not np.isfinite(r).all():
        raise NumericError("intrinsic rewards must be finite")
    squeeze = r.ndim == 1
    r2 = r[:, None] if squeeze else r
    if r2.shape[1] != norm.n_streams:
        raise ShapeError(f"expected {norm.n_streams} streams, got shape {r.shape}")
    rets = np.empty_like(r2)
    acc = norm.returns.copy()
    for t in range(r2.shape[0]):
        acc = acc * norm.gamma + r2[t]
        rets[t] = acc
    norm.returns = acc
    norm.stats.update(rets.reshape(-1))
    return r / norm.std


# ----------------------------------------------------------------------------
# the engine used by agents and experiments


class DrndModel:
    """Ensemble + predictor + config, with optional input whitening.

    ``method`` presets: ``drnd`` (given N and alpha), ``rnd`` (N=1, alpha=1),
    ``cfn`` (rademacher targets, alpha=0).
    """

    def __init__(self, ensemble: TargetEnsemble, predictor: PredictorState, cfg: BonusConfig,
                 input_norm: InputNormalizer | None = None):
        if ensemble.in_dim != predictor.params.spec.in_dim or ensemble.out_dim != predictor.params.spec.out_dim:
            raise ShapeError("predictor and targets must share input and output dims")
        self.ensemble = ensemble
        self.predictor = predictor
        self.cfg = cfg
        self.input_norm = input_norm

    @classmethod
    def build(cls, method: str, in_dim: int, out_dim: int, hidden: int, n_targets: int = 10,
              alpha: float = 0.9, lr: float = 1e-4, seed: int = 0, predictor_layers: int = 3,
              target_layers: int = 2, normalize_inputs: bool = False, lam: float = 1.0,
              init: str = "he_uniform") -> "DrndModel":
        if method == "rnd":
            n_targets, alpha, mode = 1, 1.0, "random_mlp"
        elif method == "cfn":
            n_targets, alpha, mode = 2, 0.0, "rademacher"
        elif method in ("drnd", "none"):
            mode = "random_mlp"
        else:
            raise ConfigurationError(f"unknown bonus method {method!r}")
        t_spec = MlpSpec((in_dim,) + (hidden,) * (target_layers - 1) + (out_dim,), "relu",
                         derive_seed(seed, "targets"), init)
        p_spec = MlpSpec((in_dim,) + (hidden,) * (predictor_layers - 1) + (out_dim,), "relu",
                         derive_seed(seed, "predictor"), init)
        ens = ensemble_init(t_spec, n_targets, mode, derive_seed(seed, "targets"))
        cfg = BonusConfig(alpha=alpha, lam=lam)
        norm = InputNormalizer(in_dim) if normalize_inputs else None
        return cls(ens, predictor_init(p_spec, lr), cfg, norm)

    def prepare(self, x) -> np.ndarray:
        return self.input_norm(x) if self.input_norm is not None else np.asarray(x, dtype=np.float64)

    def components(self, x) -> tuple[np.ndarray, np.ndarray]:
        z = self.prepare(x)
        mom = moments(self.ensemble, z)
        f = mlp_forward(self.predictor.params, z)
        d = f - mom.mu
        b1 = np.sum(d * d, axis=-1)
        b2 = np.sqrt(_b2_ratio(f, mom, self.cfg)[0])
        return b1, b2

    def bonus(self, x) -> np.ndarray:
        b1, b2 = self.components(x)
        return bonus_total(b1, b2, self.cfg)

    def distill(self, x, rng: np.random.Generator, c=None) -> float:
        """One predictor step on a batch; ``c`` defaults to fresh draws of ``c(x)``."""
        z = self.prepare(x)
        if c is None:
            c = sample_c(self.ensemble, np.atleast_2d(z), rng)
        loss, self.predictor = distill_step(self.predictor, z, c)
        return loss

    def loss(self, x, c) -> float:
        z = self.prepare(x)
        d = mlp_forward(self.predictor.params, z) - c
        return float(np.mean(np.sum(d * d, axis=-1)))

    def bonus_and_input_grad(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Total bonus for a batch and its gradient with respect to the (raw) inputs.

        Predictor and targets are treated as fixed functions; nothing is updated.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z = self.prepare(x)
        n = self.ensemble.n
        t_out, t_cache = [], []
        for t in self.ensemble.targets:
            o, c = mlp_forward_cached(t, z)
            t_out.append(o)
            t_cache.append(c)
        outs = np.stack(t_out)
        mu = outs.mean(axis=0)
        b2m = (outs * outs).mean(axis=0)
        f, p_cache = mlp_forward_cached(self.predictor.params, z)
        cfg = self.cfg
        d = f - mu
        b1 = np.sum(d * d, axis=1)
        ratio, num, den, floored = _b2_ratio(f, MomentSet(mu, b2m), cfg)
        b2 = np.sqrt(ratio)
        total = bonus_total(b1, b2, cfg)

        # d total / d f, d mu, d B2
        g_f = cfg.alpha * 2.0 * d
        g_mu = -cfg.alpha * 2.0 * d
        g_b2m = np.zeros_like(mu)
        active = ratio > 0.0
        if cfg.clamp_negative_numerator:
            active &= num > 0.0
        if cfg.ratio_upper_clamp is not None:
            active &= ratio < cfg.ratio_upper_clamp
        if cfg.alpha < 1.0 and np.any(active):
            dden = np.where(floored, cfg.denom_epsilon, den)
            coef = np.where(active, (1.0 - cfg.alpha) / (2.0 * np.where(active, b2, 1.0)), 0.0)[:, None]
            g_f = g_f + coef * 2.0 * f / dden[:, None]
            var_term = np.where(floored[:, None], 0.0, 1.0)
            g_mu = g_mu + coef * (-2.0 * mu / dden[:, None]
                                  + var_term * num[:, None] * 2.0 * mu / (dden * dden)[:, None])
            g_b2m = g_b2m + coef * var_term * (-num / (dden * dden))[:, None]
        g_z = mlp_backward(self.predictor.params, z, g_f, p_cache).inputs
        for i, t in enumerate(self.ensemble.targets):
            g_t = (g_mu + 2.0 * outs[i] * g_b2m) / n
            g_z = g_z + mlp_backward(t, z, g_t, t_cache[i]).inputs
        if self.input_norm is not None:
            g_z = g_z * self.input_norm.jacobian_diag(x)
        return total, g_z


# ----------------------------------------------------------------------------
# checkpoints
#
# JSON document, one object per network:
#   {"format": "drnd-checkpoint", "version": 1, "kind": "ensemble" | "predictor", ...}
# Each network is {"layer_dims": [...], "activation": str, "seed": int,
#                  "weights": [row-major nested lists], "biases": [...]}.
# Python's float repr round-trips float64 exactly, so load(save(x)) == x bitwise.

CHECKPOINT_VERSION = 1


def _net_to_dict(p: MlpParams) -> dict:
    return {
        "layer_dims": list(p.spec.layer_dims),
        "activation": p.spec.activation,
        "seed": int(p.spec.seed),
        "init": p.spec.init,
        "weights": [w.tolist() for w in p.weights],
        "biases": [b.tolist() for b in p.biases],
    }


def _net_from_dict(d: dict) -> MlpParams:
    spec = MlpSpec(tuple(d["layer_dims"]), d["activation"], int(d["seed"]), d.get("init", "he_uniform"))
    ws = [np.array(w, dtype=np.float64).reshape(spec.layer_dims[i], spec.layer_dims[i + 1])
          for i, w in enumerate(d["weights"])]
    bs = [np.array(b, dtype=np.float64) for b in d["biases"]]
    return MlpParams(spec, ws, bs)


def ensemble_to_dict(ens: TargetEnsemble) -> dict:
    return {"format": "drnd-checkpoint", "version": CHECKPOINT_VERSION, "kind": "ensemble",
            "mode": ens.mode, "targets": [_net_to_dict(t) for t in ens.targets]}


def ensemble_from_dict(d: dict) -> TargetEnsemble:
    _check_header(d, "ensemble")
    targets = tuple(_freeze(_net_from_dict(t)) for t in d["targets"])
    return TargetEnsemble(targets[0].spec, targets, d["mode"])


def predictor_to_dict(pred: PredictorState) -> dict:
    o = pred.opt
    return {"format": "drnd-checkpoint", "version": CHECKPOINT_VERSION, "kind": "predictor",
            "params": _net_to_dict(pred.params),
            "adam": {"step": o.step, "lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps,
                     "m": _net_to_dict(o.m), "v": _net_to_dict(o.v)}}


def predictor_from_dict(d: dict) -> PredictorState:
    _check_header(d, "predictor")
    a = d["adam"]
    opt = AdamState(_net_from_dict(a["m"]), _net_from_dict(a["v"]), int(a["step"]), float(a["lr"]),
                    float(a["beta1"]), float(a["beta2"]), float(a["eps"]))
    return PredictorState(_net_from_dict(d["params"]), opt)


def _check_header(d: dict, kind: str) -> None:
    if d.get("format") != "drnd-checkpoint" or d.get("kind") != kind:
        raise ConfigurationError(f"not a drnd {kind} checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {d.get('version')}")


def save_checkpoint(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> dict:
    return json.loads(Path(path).read_text())
