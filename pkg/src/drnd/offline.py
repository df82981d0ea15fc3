"""SAC with a distributional RND anti-exploration penalty on a static dataset.

Two phases.  First the bonus predictor is distilled for ``drnd_epochs`` passes
over the dataset's ``(s, a)`` pairs and then frozen.  Then SAC runs with the
bonus subtracted in the actor objective (scaled by ``lam_actor``) and inside
the critic target's next-action expectation (scaled by ``lam_critic``):

    y = r + gamma * (1 - done) * (min_i Q'_i(s', a') - beta * log pi(a'|s') - lam_critic * b(s', a'))
    actor loss = mean(beta * log pi(a|s) - min_i Q_i(s, a) + lam_actor * b(s, a)),  a ~ pi(.|s)

The policy is a tanh-squashed Gaussian; every gradient is derived by hand
(see ``actor_loss``).  The entropy temperature ``beta`` is tuned towards the
target entropy ``-action_dim``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bonus import DrndModel, moments
from .errors import ConfigurationError, NumericError, ShapeError
from .nn import MlpParams, MlpSpec, Trainable, mlp_backward, mlp_forward, mlp_forward_cached, soft_update
from .rng import derive_seed, make_rng

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


# ----------------------------------------------------------------------------
# task and dataset


@dataclass(frozen=True)
class LineWalk:
    """1-D continuous walk: ``s' = clip(s + step * a, -1, 1)``, reward
    ``exp(-(s' - goal)^2 / (2 width^2))``, fixed horizon, no early termination."""

    goal: float = 0.6
    width: float = 0.15
    step: float = 0.25
    horizon: int = 20
    start_low: float = -1.0
    start_high: float = 1.0

    state_dim: int = 1
    action_dim: int = 1

    def __post_init__(self):
        if not -1.0 <= self.goal <= 1.0 or self.width <= 0 or self.step <= 0 or self.horizon < 1:
            raise ConfigurationError("line-walk needs goal in [-1, 1], width > 0, step > 0, horizon >= 1")
        if not -1.0 <= self.start_low <= self.start_high <= 1.0:
            raise ConfigurationError("start interval must lie inside [-1, 1]")

    def transition(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = np.clip(a, -1.0, 1.0)
        s2 = np.clip(s + self.step * a, -1.0, 1.0)
        r = np.exp(-((s2 - self.goal) ** 2).sum(axis=-1) / (2.0 * self.width ** 2))
        return s2, r

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.start_low, self.start_high, size=(n, self.state_dim))


@dataclass(frozen=True)
class BehaviorSpec:
    """Uniform random actions on ``[low, high]``, independent of the state."""

    low: float = -0.25
    high: float = 0.25

    def __post_init__(self):
        if not -1.0 <= self.low <= self.high <= 1.0:
            raise ConfigurationError(f"behavior interval [{self.low}, {self.high}] must lie in [-1, 1]")

    def describe(self) -> str:
        return f"uniform actions on [{self.low}, {self.high}]"


@dataclass
class OfflineDataset:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    metadata: dict

    def __post_init__(self):
        n = self.s.shape[0]
        if n == 0:
            raise ConfigurationError("dataset is empty")
        if not (self.a.shape[0] == self.r.shape[0] == self.s2.shape[0] == self.done.shape[0] == n):
            raise ShapeError("all dataset columns need the same number of rows")
        lo, hi = self.metadata.get("action_low", -1.0), self.metadata.get("action_high", 1.0)
        if np.any(self.a < lo) or np.any(self.a > hi):
            raise ConfigurationError("dataset actions fall outside the declared bounds")

    def __len__(self) -> int:
        return self.s.shape[0]

    @property
    def sa(self) -> np.ndarray:
        return np.concatenate([self.s, self.a], axis=1)

    def to_csv(self) -> str:
        """Columns ``s0.., a0.., r, s_next0.., done``; floats in round-trip repr."""
        ds, da = self.s.shape[1], self.a.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"s{i}" for i in range(ds)] + [f"a{i}" for i in range(da)] + ["r"]
                   + [f"s_next{i}" for i in range(ds)] + ["done"])
        for i in range(len(self)):
            w.writerow([repr(float(v)) for v in self.s[i]] + [repr(float(v)) for v in self.a[i]]
                       + [repr(float(self.r[i]))] + [repr(float(v)) for v in self.s2[i]]
                       + [int(self.done[i])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, metadata: dict) -> "OfflineDataset":
        rows = list(csv.reader(io.StringIO(text)))
        head, body = rows[0], np.array(rows[1:], dtype=np.float64)
        ds = sum(h.startswith("s") and not h.startswith("s_next") for h in head)
        da = sum(h.startswith("a") for h in head)
        s, a = body[:, :ds], body[:, ds:ds + da]
        r, s2, d = body[:, ds + da], body[:, ds + da + 1:2 * ds + da + 1], body[:, -1]
        return cls(s, a, r, s2, d, dict(metadata))

    def save(self, csv_path, meta_path) -> None:
        Path(csv_path).write_text(self.to_csv())
        Path(meta_path).write_text(json.dumps(self.metadata, indent=2, sort_keys=True))

    @classmethod
    def load(cls, csv_path, meta_path) -> "OfflineDataset":
        return cls.from_csv(Path(csv_path).read_text(), json.loads(Path(meta_path).read_text()))


def generate_offline_dataset(env: LineWalk, behavior: BehaviorSpec, size: int, seed: int = 0) -> OfflineDataset:
    """Whole episodes of the behavior policy, truncated to exactly ``size`` transitions."""
    if size < 1000:
        raise ConfigurationError(f"dataset size must be >= 1000, got {size}")
    rng = make_rng(seed, "offline-data")
    n_eps = -(-size // env.horizon)
    s = env.reset(rng, n_eps)
    S, A, R, S2, D = [], [], [], [], []
    for t in range(env.horizon):
        a = rng.uniform(behavior.low, behavior.high, size=(n_eps, env.action_dim))
        s2, r = env.transition(s, a)
        S.append(s); A.append(a); R.append(r); S2.append(s2)
        D.append(np.full(n_eps, float(t == env.horizon - 1)))
        s = s2
    # episode-major order, then truncate
    stack = lambda xs: np.stack(xs, axis=1).reshape(n_eps * env.horizon, *np.shape(xs[0])[1:])
    S, A, R, S2, D = (stack(x)[:size] for x in (S, A, R, S2, D))
    meta = {"env": "line-walk", "env_params": asdict(env), "behavior": behavior.describe(),
            "action_low": behavior.low, "action_high": behavior.high, "size": size, "seed": seed,
            "episode_return_mean": float(R.reshape(-1)[: (size // env.horizon) * env.horizon]
                                         .reshape(-1, env.horizon).sum(axis=1).mean())
            if size >= env.horizon else float("nan")}
    return OfflineDataset(S, A, R, S2, D, meta)


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    target_entropy: float | None = None    # default: -action_dim
    init_log_beta: float = math.log(0.1)
    autotune: bool = True
    lam_actor: float = 1.0
    lam_critic: float = 1.0
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    beta_lr: float = 1e-3
    drnd_lr: float = 1e-4
    batch_size: int = 256
    hidden: int = 64
    drnd_hidden: int = 64
    drnd_out: int = 32
    drnd_epochs: int = 100
    alpha: float = 0.9
    n_targets: int = 10
    normalize_bonus_inputs: bool = True
    eval_episodes: int = 10

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.lam_actor < 0 or self.lam_critic < 0:
            raise ConfigurationError("lam_actor and lam_critic must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.drnd_epochs < 0 or self.batch_size < 1 or self.hidden < 1 or self.eval_episodes < 1:
            raise ConfigurationError("drnd_epochs >= 0, batch_size, hidden, eval_episodes >= 1 required")
        if min(self.actor_lr, self.critic_lr, self.beta_lr, self.drnd_lr) <= 0:
            raise ConfigurationError("learning rates must be > 0")


# ----------------------------------------------------------------------------
# networks


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class SquashedGaussian:
    """Policy net ``s -> [mean, raw_log_std]``; ``log_std`` is squashed into
    ``[LOG_STD_MIN, LOG_STD_MAX]`` with a tanh so it stays differentiable."""

    net: Trainable
    action_dim: int

    def heads(self, s, cache: bool = False):
        out, c = mlp_forward_cached(self.net.params, s)
        mean, raw = out[:, :self.action_dim], out[:, self.action_dim:]
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (np.tanh(raw) + 1.0)
        return (mean, raw, log_std, c) if cache else (mean, log_std)

    def sample(self, s, eps) -> tuple[np.ndarray, np.ndarray]:
        mean, log_std = self.heads(s)
        u = mean + np.exp(log_std) * eps
        return np.tanh(u), squashed_log_prob(u, eps, log_std)

    def deterministic(self, s) -> np.ndarray:
        return np.tanh(self.heads(np.atleast_2d(s))[0])


def squashed_log_prob(u, eps, log_std) -> np.ndarray:
    """``log pi(tanh(u))`` for ``u = mean + exp(log_std) * eps``; the Jacobian
    term ``log(1 - tanh(u)^2)`` is written as ``2 (log 2 - u - softplus(-2u))``."""
    gauss = -0.5 * eps ** 2 - log_std - _HALF_LOG_2PI
    jac = 2.0 * (math.log(2.0) - u - _softplus(-2.0 * u))
    return np.sum(gauss - jac, axis=-1)


@dataclass
class SacNets:
    actor: SquashedGaussian
    q1: Trainable
    q2: Trainable
    q1_target: MlpParams
    q2_target: MlpParams
    log_beta: float
    beta_opt: tuple[float, float, int] = (0.0, 0.0, 0)   # Adam moments for the scalar log_beta

    @property
    def beta(self) -> float:
        return float(math.exp(self.log_beta))

    @classmethod
    def create(cls, state_dim: int, action_dim: int, cfg: SacConfig, seed: int) -> "SacNets":
        h = cfg.hidden
        aspec = MlpSpec((state_dim, h, h, 2 * action_dim), "relu", derive_seed(seed, "actor-init"))
        q1 = Trainable.create(MlpSpec((state_dim + action_dim, h, h, 1), "relu", derive_seed(seed, "q1-init")),
                              cfg.critic_lr)
        q2 = Trainable.create(MlpSpec((state_dim + action_dim, h, h, 1), "relu", derive_seed(seed, "q2-init")),
                              cfg.critic_lr)
        return cls(SquashedGaussian(Trainable.create(aspec, cfg.actor_lr), action_dim), q1, q2,
                   q1.params.copy(), q2.params.copy(), cfg.init_log_beta)


def _sa(s, a) -> np.ndarray:
    return np.concatenate([s, a], axis=1)


def bonus_values(drnd: DrndModel | None, s, a) -> np.ndarray:
    if drnd is None:
        return np.zeros(s.shape[0])
    return drnd.bonus(_sa(s, a))


def critic_target(r, s2, done, nets: SacNets, drnd: DrndModel | None, cfg: SacConfig, eps) -> np.ndarray:
    """Soft double-Q backup with the bonus penalty inside the next-action expectation."""
    a2, logp2 = nets.actor.sample(s2, eps)
    x = _sa(s2, a2)
    q = np.minimum(mlp_forward(nets.q1_target, x)[:, 0], mlp_forward(nets.q2_target, x)[:, 0])
    pen = cfg.lam_critic * bonus_values(drnd, s2, a2) if cfg.lam_critic > 0 else 0.0
    return target_from_parts(r, done, q, logp2, pen, nets.beta, cfg.gamma)


def target_from_parts(r, done, q_next, logp_next, penalty, beta: float, gamma: float) -> np.ndarray:
    return np.asarray(r) + gamma * (1.0 - np.asarray(done)) * (q_next - beta * logp_next - penalty)


@dataclass
class ActorLoss:
    loss: float
    logp: np.ndarray
    grads: MlpParams


def actor_loss(s, nets: SacNets, drnd: DrndModel | None, cfg: SacConfig, eps) -> ActorLoss:
    """Loss ``mean(beta log pi - min Q + lam_actor b)`` with a reparameterized
    sample ``a = tanh(mean + std * eps)`` and its gradient w.r.t. the actor.

    With ``u = mean + std * eps``: ``d log pi / d u = 2 tanh(u)`` (Jacobian
    term) and ``d log pi / d log_std = -1`` (Gaussian term at fixed ``eps``).
    Critics and bonus networks only contribute input gradients.
    """
    pol = nets.actor
    mean, raw, log_std, cache = pol.heads(s, cache=True)
    std = np.exp(log_std)
    u = mean + std * eps
    a = np.tanh(u)
    logp = squashed_log_prob(u, eps, log_std)
    B, da = s.shape[0], pol.action_dim
    x = _sa(s, a)
    q1, c1 = mlp_forward_cached(nets.q1.params, x)
    q2, c2 = mlp_forward_cached(nets.q2.params, x)
    use1 = q1[:, 0] <= q2[:, 0]
    qmin = np.where(use1, q1[:, 0], q2[:, 0])
    g_up = np.ones((B, 1)) / B
    gx1 = mlp_backward(nets.q1.params, x, g_up * use1[:, None], c1).inputs
    gx2 = mlp_backward(nets.q2.params, x, g_up * (~use1)[:, None], c2).inputs
    g_a = -(gx1 + gx2)[:, -da:]
    beta = nets.beta
    total = beta * logp - qmin
    if drnd is not None and cfg.lam_actor > 0:
        b, gb = drnd.bonus_and_input_grad(x)
        total = total + cfg.lam_actor * b
        g_a = g_a + cfg.lam_actor * gb[:, -da:] / B
    g_u = g_a * (1.0 - a * a) + beta * 2.0 * a / B
    g_mean = g_u
    g_logstd = g_u * std * eps - beta / B
    g_raw = g_logstd * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - np.tanh(raw) ** 2)
    grads = mlp_backward(pol.net.params, s, np.concatenate([g_mean, g_raw], axis=1), cache).params
    return ActorLoss(float(np.mean(total)), logp, grads)


def critic_loss_and_grads(s, a, y, nets: SacNets) -> tuple[float, MlpParams, MlpParams]:
    x = _sa(s, a)
    B = s.shape[0]
    out = []
    loss = 0.0
    for q in (nets.q1, nets.q2):
        v, c = mlp_forward_cached(q.params, x)
        d = v[:, 0] - y
        loss += float(np.mean(d * d))
        out.append(mlp_backward(q.params, x, (2.0 * d / B)[:, None], c).params)
    return loss, out[0], out[1]


# ----------------------------------------------------------------------------
# training


def pretrain_drnd(dataset: OfflineDataset, cfg: SacConfig, seed: int = 0,
                  loss_log: list | None = None) -> DrndModel:
    """Fit the input normalizer once on the dataset, then distil for
    ``cfg.drnd_epochs`` passes.

    ``loss_log`` receives, after each epoch, the expected distillation loss
    over the whole dataset, ``mean(||f - mu||^2 + sum_j Var c_j)``.  Sampled
    minibatch losses are dominated by the draw of ``c`` and are too noisy to
    track progress.
    """
    sa = dataset.sa
    model = DrndModel.build("drnd", sa.shape[1], cfg.drnd_out, cfg.drnd_hidden, cfg.n_targets, cfg.alpha,
                            cfg.drnd_lr, derive_seed(seed, "drnd"),
                            normalize_inputs=cfg.normalize_bonus_inputs)
    if model.input_norm is not None:
        model.input_norm.update(sa)
    rng = make_rng(seed, "drnd-pretrain")
    spread = None
    for _ in range(cfg.drnd_epochs):
        order = rng.permutation(len(sa))
        for k in range(0, len(sa), cfg.batch_size):
            model.distill(sa[order[k:k + cfg.batch_size]], rng)
        if loss_log is not None:
            if spread is None:
                mom = moments(model.ensemble, model.prepare(sa))
                spread = float(np.mean(np.sum(mom.b2 - mom.mu ** 2, axis=1)))
            loss_log.append(float(np.mean(model.components(sa)[0])) + spread)
    return model


def expected_distill_loss(model: DrndModel, x) -> float:
    z = model.prepare(x)
    mom = moments(model.ensemble, z)
    d = mlp_forward(model.predictor.params, z) - mom.mu
    return float(np.mean(np.sum(d * d + mom.b2 - mom.mu ** 2, axis=1)))


@dataclass
class EvalReport:
    mean_return: float
    policy_bonus: float       # mean bonus of deterministic policy actions on dataset states
    dataset_bonus: float      # mean bonus of the dataset's own (s, a)
    behavior_return: float
    mean_abs_action: float
    iterations: int
    history: list[dict] = field(default_factory=list)

    @property
    def bonus_ratio(self) -> float:
        return self.policy_bonus / self.dataset_bonus

    def to_json(self) -> str:
        d = asdict(self)
        d["bonus_ratio"] = self.bonus_ratio
        return json.dumps(d, indent=2, sort_keys=True)


def evaluate(env: LineWalk, nets: SacNets, episodes: int, seed: int) -> float:
    rng = make_rng(seed, "evaluation")
    s = env.reset(rng, episodes)
    total = np.zeros(episodes)
    for _ in range(env.horizon):
        s, r = env.transition(s, nets.actor.deterministic(s))
        total += r
    return float(total.mean())


def _adam_scalar(state, grad: float, lr: float, b1=0.9, b2=0.999, eps=1e-8):
    m, v, t = state
    t += 1
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    step = lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return step, (m, v, t)


def sac_update(nets: SacNets, batch, drnd: DrndModel | None, cfg: SacConfig,
               rng: np.random.Generator, target_entropy: float) -> dict:
    s, a, r, s2, d = batch
    da = a.shape[1]
    y = critic_target(r, s2, d, nets, drnd, cfg, rng.standard_normal((s.shape[0], da)))
    closs, g1, g2 = critic_loss_and_grads(s, a, y, nets)
    nets.q1.apply(g1)
    nets.q2.apply(g2)
    al = actor_loss(s, nets, drnd, cfg, rng.standard_normal((s.shape[0], da)))
    nets.actor.net.apply(al.grads)
    if cfg.autotune:
        # d/d log_beta of mean(-log_beta * (log pi + target)), log pi held fixed
        g = -float(np.mean(al.logp + target_entropy))
        step, nets.beta_opt = _adam_scalar(nets.beta_opt, g, cfg.beta_lr)
        nets.log_beta -= step
    nets.q1_target = soft_update(nets.q1_target, nets.q1.params, cfg.tau)
    nets.q2_target = soft_update(nets.q2_target, nets.q2.params, cfg.tau)
    if not (math.isfinite(closs) and math.isfinite(al.loss)):
        raise NumericError(f"non-finite SAC loss (critic {closs}, actor {al.loss})")
    return {"critic_loss": closs, "actor_loss": al.loss, "beta": nets.beta}


def train_offline(cfg: SacConfig, dataset: OfflineDataset, iterations: int, seed: int = 0,
                  env: LineWalk | None = None, drnd: DrndModel | None = None,
                  eval_every: int = 0) -> tuple[EvalReport, SacNets, DrndModel]:
    """Pretrain (unless ``drnd`` is given), then run ``iterations`` SAC updates."""
    env = env or LineWalk(**{k: v for k, v in dataset.metadata.get("env_params", {}).items()
                             if k not in ("state_dim", "action_dim")})
    if drnd is None:
        drnd = pretrain_drnd(dataset, cfg, seed)
    frozen = drnd.predictor.params.digest()
    nets = SacNets.create(dataset.s.shape[1], dataset.a.shape[1], cfg, seed)
    target_entropy = -float(dataset.a.shape[1]) if cfg.target_entropy is None else cfg.target_entropy
    rng = make_rng(seed, "sac")
    history = []
    n = len(dataset)
    for it in range(iterations):
        idx = rng.integers(n, size=cfg.batch_size)
        batch = (dataset.s[idx], dataset.a[idx], dataset.r[idx], dataset.s2[idx], dataset.done[idx])
        info = sac_update(nets, batch, drnd, cfg, rng, target_entropy)
        if eval_every and (it + 1) % eval_every == 0:
            info["iteration"] = it + 1
            info["return"] = evaluate(env, nets, cfg.eval_episodes, seed)
            history.append(info)
    if drnd.predictor.params.digest() != frozen:
        raise NumericError("bonus predictor changed during SAC updates")
    pol_a = nets.actor.deterministic(dataset.s)
    report = EvalReport(
        mean_return=evaluate(env, nets, cfg.eval_episodes, seed),
        policy_bonus=float(np.mean(drnd.bonus(_sa(dataset.s, pol_a)))),
        dataset_bonus=float(np.mean(drnd.bonus(dataset.sa))),
        behavior_return=float(dataset.metadata.get("episode_return_mean", float("nan"))),
        mean_abs_action=float(np.mean(np.abs(pol_a))),
        iterations=iterations,
        history=history,
    )
    return report, nets, drnd


def report_digest(report: EvalReport) -> str:
    return hashlib.sha256(report.to_json().encode()).hexdigest()
