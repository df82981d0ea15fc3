"""PPO with a distributional RND bonus on toy hard-exploration tasks.

Per iteration: roll out ``n_envs`` environment copies under a frozen policy,
score each next observation with the bonus, normalize the intrinsic rewards by
the running std of their discounted return, run GAE separately on the
extrinsic and intrinsic streams (each with its own value head), then run
``epochs`` passes of clipped PPO over minibatches, distilling the bonus
predictor on the same minibatches.

Every source of randomness has its own stream (``make_rng(seed, purpose)``),
so switching the bonus off (``lam=0``) leaves the action sequence bit-identical
to a run without any bonus machinery.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .bonus import DrndModel, RunningNormalizer, normalize_intrinsic
from .errors import ConfigurationError, NumericError, ShapeError, UsageError
from .nn import MlpParams, MlpSpec, Trainable, mlp_backward, mlp_forward, mlp_forward_cached
from .rng import derive_seed, make_rng

LEFT, RIGHT = 0, 1
ENV_KINDS = ("deep_sea", "sparse_chain")
METHODS = ("drnd", "rnd", "cfn", "none")


# ----------------------------------------------------------------------------
# environments


class ToyEnv:
    """Deterministic sparse-reward tasks with one-hot observations.

    ``deep_sea(size)``: a size x size grid entered at the top-left; every step
    descends one row and moves one column left or right (clamped at the wall).
    The episode lasts ``size`` steps and ends on an extra terminal row, which
    is part of the observation space.  Each right move costs ``0.01 / size``,
    except the move that reaches the bottom-right goal, which pays 1.

    ``sparse_chain(length)``: states ``0..length-1``, start at 0; right moves
    +1, left moves -1 (clamped).  Reaching the last state pays 1 and ends the
    episode; otherwise the episode times out after ``length + 1`` steps with
    reward 0 throughout.

    ``flip_seed`` optionally swaps the meaning of the two actions per cell
    (fixed for the environment's lifetime), which defeats a policy that simply
    learns "always right".
    """

    def __init__(self, kind: str, size: int, flip_seed: int | None = None):
        if kind not in ENV_KINDS:
            raise ConfigurationError(f"env kind must be one of {ENV_KINDS}, got {kind!r}")
        if size < 2:
            raise ConfigurationError(f"env size must be >= 2, got {size}")
        self.kind = kind
        self.size = size
        # deep_sea observes one extra row so terminal cells are distinguishable
        n_cells = (size + 1) * size if kind == "deep_sea" else size
        if flip_seed is None:
            self.flip = np.zeros(n_cells, dtype=bool)
        else:
            self.flip = make_rng(flip_seed, "env-flip").random(n_cells) < 0.5
        self.horizon = size if kind == "deep_sea" else size + 1
        self.obs_dim = n_cells
        self.n_actions = 2
        self.reset()

    @classmethod
    def deep_sea(cls, size: int, flip_seed: int | None = None) -> "ToyEnv":
        return cls("deep_sea", size, flip_seed)

    @classmethod
    def sparse_chain(cls, length: int, flip_seed: int | None = None) -> "ToyEnv":
        return cls("sparse_chain", length, flip_seed)

    def _cell(self) -> int:
        return self.row * self.size + self.col if self.kind == "deep_sea" else self.col

    def observe(self) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        obs[self._cell()] = 1.0
        return obs

    def reset(self) -> np.ndarray:
        self.row, self.col, self.t = 0, 0, 0
        self.done = False
        self.reached_goal = False
        return self.observe()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise UsageError("step() called on a finished episode; call reset()")
        if action not in (LEFT, RIGHT):
            raise ConfigurationError(f"action must be 0 (left) or 1 (right), got {action!r}")
        move = action ^ int(self.flip[self._cell()])
        self.t += 1
        reward = 0.0
        if self.kind == "deep_sea":
            self.col = min(self.col + 1, self.size - 1) if move == RIGHT else max(self.col - 1, 0)
            self.row += 1
            goal = self.row == self.size and self.col == self.size - 1 and move == RIGHT
            if goal:
                reward = 1.0
            elif move == RIGHT:
                reward = -0.01 / self.size
            self.done = self.row == self.size
        else:
            self.col = min(self.col + 1, self.size - 1) if move == RIGHT else max(self.col - 1, 0)
            goal = self.col == self.size - 1
            reward = 1.0 if goal else 0.0
            self.done = goal or self.t >= self.horizon
        self.reached_goal = self.reached_goal or goal
        return self.observe(), reward, self.done


# ----------------------------------------------------------------------------
# GAE


def gae(rewards, values, bootstrap, gamma: float, lam: float, dones=None) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over a time-major rollout.

    ``rewards``, ``values`` and ``dones`` share shape ``(T,)`` or ``(T, E)``;
    ``bootstrap`` is the value of the state after the last step (shape ``()``
    or ``(E,)``).  ``dones[t]`` marks that the episode ended with step ``t``,
    which cuts the bootstrap.  Returns ``(advantages, advantages + values)``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.zeros_like(r) if dones is None else np.asarray(dones, dtype=np.float64)
    if r.shape != v.shape or r.shape != d.shape:
        raise ShapeError(f"rewards {r.shape}, values {v.shape} and dones {d.shape} must match")
    boot = np.asarray(bootstrap, dtype=np.float64)
    if boot.shape != r.shape[1:]:
        raise ShapeError(f"bootstrap shape {boot.shape} must be {r.shape[1:]}")
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    next_v = boot
    for t in range(r.shape[0] - 1, -1, -1):
        nonterm = 1.0 - d[t]
        delta = r[t] + gamma * next_v * nonterm - v[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
        next_v = v[t]
    return adv, adv + v


# ----------------------------------------------------------------------------
# PPO


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gamma_int: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.1
    epochs: int = 4
    lam: float = 1.0               # intrinsic advantage coefficient
    alpha: float = 0.9
    n_targets: int = 10
    method: str = "drnd"
    lr: float = 3e-4
    bonus_lr: float = 3e-4
    hidden: int = 64
    bonus_hidden: int = 64
    bonus_out: int = 16
    n_envs: int = 16
    rollout_len: int | None = None  # default: one episode horizon
    minibatches: int = 4
    ent_coef: float = 0.001
    vf_coef: float = 0.5
    max_grad_norm: float | None = 0.5
    normalize_bonus_inputs: bool = True
    solve_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ConfigurationError(f"clip must lie in (0, 1), got {self.clip}")
        for name in ("gamma", "gamma_int"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1), got {v}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigurationError(f"gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lam < 0 or self.ent_coef < 0 or self.vf_coef < 0:
            raise ConfigurationError("lam, ent_coef and vf_coef must be >= 0")
        if min(self.epochs, self.n_envs, self.minibatches, self.hidden, self.n_targets) < 1:
            raise ConfigurationError("epochs, n_envs, minibatches, hidden, n_targets must be >= 1")
        if self.lr <= 0 or self.bonus_lr <= 0:
            raise ConfigurationError("learning rates must be > 0")


@dataclass
class ActorCritic:
    """Categorical policy and a critic whose two outputs are the extrinsic and
    intrinsic value heads on a shared trunk."""

    policy: Trainable
    critic: Trainable

    @classmethod
    def create(cls, obs_dim: int, n_actions: int, hidden: int, lr: float, seed: int) -> "ActorCritic":
        pspec = MlpSpec((obs_dim, hidden, hidden, n_actions), "tanh", derive_seed(seed, "policy-init"))
        vspec = MlpSpec((obs_dim, hidden, hidden, 2), "tanh", derive_seed(seed, "critic-init"))
        return cls(Trainable.create(pspec, lr), Trainable.create(vspec, lr))

    def probs(self, obs) -> np.ndarray:
        return _softmax(mlp_forward(self.policy.params, obs))

    def values(self, obs) -> np.ndarray:
        return mlp_forward(self.critic.params, obs)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def clipped_surrogate(ratio, adv, clip: float) -> np.ndarray:
    """Per-sample ``min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


@dataclass
class PpoLosses:
    policy: float
    value_ext: float
    value_int: float
    entropy: float
    clip_frac: float


def policy_loss_and_grad(params: MlpParams, obs, actions, old_logp, adv, clip: float,
                         ent_coef: float) -> tuple[float, float, float, MlpParams]:
    """Loss ``-(mean surrogate + ent_coef * mean entropy)`` with its parameter gradient."""
    logits, cache = mlp_forward_cached(params, obs)
    logp_all = _log_softmax(logits)
    p = np.exp(logp_all)
    B = obs.shape[0]
    rows = np.arange(B)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - old_logp)
    surr = clipped_surrogate(ratio, adv, clip)
    ent = -np.sum(p * logp_all, axis=1)
    loss = -(surr.mean() + ent_coef * ent.mean())
    # the unclipped branch carries the gradient whenever it attains the min
    active = ratio * adv <= np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    dlogp = np.where(active, ratio * adv, 0.0)
    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    g = -(dlogp[:, None] * (onehot - p)) / B
    g += ent_coef * (p * (logp_all + ent[:, None])) / B
    grads = mlp_backward(params, obs, g, cache).params
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip))
    return float(loss), float(ent.mean()), clip_frac, grads


def value_loss_and_grad(params: MlpParams, obs, ret_ext, ret_int, use_int: bool) -> tuple[float, float, MlpParams]:
    v, cache = mlp_forward_cached(params, obs)
    B = obs.shape[0]
    d_ext = v[:, 0] - ret_ext
    d_int = v[:, 1] - ret_int
    g = np.zeros_like(v)
    g[:, 0] = d_ext / B
    if use_int:
        g[:, 1] = d_int / B
    grads = mlp_backward(params, obs, g, cache).params
    return 0.5 * float(np.mean(d_ext ** 2)), 0.5 * float(np.mean(d_int ** 2)), grads


@dataclass
class Rollout:
    obs: np.ndarray        # (T, E, obs_dim)
    actions: np.ndarray    # (T, E)
    logp: np.ndarray       # (T, E)
    r_ext: np.ndarray      # (T, E)
    b_int: np.ndarray      # (T, E) raw bonus of the next observation
    next_obs: np.ndarray   # (T, E, obs_dim)
    dones: np.ndarray      # (T, E)
    v_ext: np.ndarray      # (T, E)
    v_int: np.ndarray      # (T, E)
    boot_ext: np.ndarray   # (E,)
    boot_int: np.ndarray   # (E,)
    episode_returns: list[float]
    episode_goals: list[bool]


@dataclass
class TrainingCurve:
    iteration: list[int] = field(default_factory=list)
    episodes: list[int] = field(default_factory=list)          # cumulative
    mean_return: list[float] = field(default_factory=list)     # over episodes finished this iteration
    goal_rate: list[float] = field(default_factory=list)
    bonus_mean: list[float] = field(default_factory=list)      # raw intrinsic
    bonus_std: list[float] = field(default_factory=list)
    distill_loss: list[float] = field(default_factory=list)
    episodes_to_solve: int | None = None
    actions_digest: str = ""

    def rows(self) -> list[dict]:
        return [{"iteration": self.iteration[i], "episodes": self.episodes[i],
                 "mean_return": self.mean_return[i], "goal_rate": self.goal_rate[i],
                 "bonus_mean": self.bonus_mean[i], "bonus_std": self.bonus_std[i],
                 "distill_loss": self.distill_loss[i]} for i in range(len(self.iteration))]


class PpoAgent:
    def __init__(self, cfg: PpoConfig, env_factory, seed: int):
        self.cfg = cfg
        self.envs = [env_factory() for _ in range(cfg.n_envs)]
        e0 = self.envs[0]
        self.obs_dim, self.n_actions = e0.obs_dim, e0.n_actions
        self.T = cfg.rollout_len or e0.horizon
        self.net = ActorCritic.create(self.obs_dim, self.n_actions, cfg.hidden, cfg.lr, seed)
        self.act_rng = make_rng(seed, "actions")
        self.batch_rng = make_rng(seed, "minibatch")
        self.bonus_rng = make_rng(seed, "distill")
        self.bonus: DrndModel | None = None
        if cfg.method != "none":
            self.bonus = DrndModel.build(cfg.method, self.obs_dim, cfg.bonus_out, cfg.bonus_hidden,
                                         cfg.n_targets, cfg.alpha, cfg.bonus_lr,
                                         derive_seed(seed, "bonus"),
                                         normalize_inputs=cfg.normalize_bonus_inputs, lam=cfg.lam)
        self.int_norm = RunningNormalizer(cfg.gamma_int, cfg.n_envs)
        self.obs = np.stack([e.reset() for e in self.envs])
        self.ep_ret = np.zeros(cfg.n_envs)

    @property
    def uses_intrinsic(self) -> bool:
        return self.bonus is not None and self.cfg.lam > 0

    def collect(self) -> Rollout:
        cfg, T, E = self.cfg, self.T, self.cfg.n_envs
        obs = np.zeros((T, E, self.obs_dim))
        nxt = np.zeros_like(obs)
        acts = np.zeros((T, E), dtype=np.int64)
        logp = np.zeros((T, E))
        rew = np.zeros((T, E))
        dones = np.zeros((T, E))
        vals = np.zeros((T, E, 2))
        rets, goals = [], []
        for t in range(T):
            obs[t] = self.obs
            logits = mlp_forward(self.net.policy.params, self.obs)
            lp = _log_softmax(logits)
            u = self.act_rng.random(E)
            a = (u[:, None] > np.cumsum(np.exp(lp), axis=1)[:, :-1]).sum(axis=1)
            acts[t] = a
            logp[t] = lp[np.arange(E), a]
            vals[t] = self.net.values(self.obs)
            for i, env in enumerate(self.envs):
                o, r, d = env.step(int(a[i]))
                nxt[t, i] = o
                rew[t, i] = r
                dones[t, i] = float(d)
                self.ep_ret[i] += r
                if d:
                    rets.append(float(self.ep_ret[i]))
                    goals.append(bool(env.reached_goal))
                    self.ep_ret[i] = 0.0
                    o = env.reset()
                self.obs[i] = o
        boot = self.net.values(self.obs)
        if self.bonus is not None:
            flat = nxt.reshape(-1, self.obs_dim)
            if self.bonus.input_norm is not None:
                self.bonus.input_norm.update(flat)
            b = self.bonus.bonus(flat).reshape(T, E)
        else:
            b = np.zeros((T, E))
        if not np.isfinite(b).all():
            raise NumericError("non-finite intrinsic bonus")
        return Rollout(obs, acts, logp, rew, b, nxt, dones, vals[..., 0], vals[..., 1],
                       boot[:, 0], boot[:, 1], rets, goals)

    def advantages(self, ro: Rollout) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        cfg = self.cfg
        a_e, r_e = gae(ro.r_ext, ro.v_ext, ro.boot_ext, cfg.gamma, cfg.gae_lambda, ro.dones)
        if self.uses_intrinsic:
            ri = normalize_intrinsic(self.int_norm, ro.b_int)
            a_i, r_i = gae(ri, ro.v_int, ro.boot_int, cfg.gamma_int, cfg.gae_lambda, ro.dones)
            adv = a_e + cfg.lam * a_i
        else:
            a_i, r_i = np.zeros_like(a_e), np.zeros_like(a_e)
            adv = a_e
        return adv, r_e, r_i, a_i

    def update(self, ro: Rollout) -> tuple[PpoLosses, float]:
        cfg = self.cfg
        adv, r_e, r_i, _ = self.advantages(ro)
        n = adv.size
        obs = ro.obs.reshape(n, -1)
        nxt = ro.next_obs.reshape(n, -1)
        acts = ro.actions.reshape(n)
        old = ro.logp.reshape(n)
        adv = adv.reshape(n)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        r_e, r_i = r_e.reshape(n), r_i.reshape(n)
        mb = max(1, n // cfg.minibatches)
        stats, dl = [], []
        for _ in range(cfg.epochs):
            order = self.batch_rng.permutation(n)
            for k in range(0, n, mb):
                idx = order[k:k + mb]
                pl, ent, cf, pg = policy_loss_and_grad(self.net.policy.params, obs[idx], acts[idx],
                                                       old[idx], adv[idx], cfg.clip, cfg.ent_coef)
                ve, vi, vg = value_loss_and_grad(self.net.critic.params, obs[idx], r_e[idx], r_i[idx],
                                                 self.uses_intrinsic)
                if not all(map(math.isfinite, (pl, ve, vi))):
                    raise NumericError(f"non-finite PPO loss (policy {pl}, value {ve}/{vi})")
                self.net.policy.apply(pg, cfg.max_grad_norm)
                self.net.critic.apply(vg.map(lambda g: cfg.vf_coef * g), cfg.max_grad_norm)
                if self.bonus is not None:
                    dl.append(self.bonus.distill(nxt[idx], self.bonus_rng))
                stats.append((pl, ve, vi, ent, cf))
        s = np.mean(np.asarray(stats), axis=0)
        return PpoLosses(*map(float, s)), float(np.mean(dl)) if dl else math.nan


def rollout_train(cfg: PpoConfig, env_factory, total_iterations: int | None = None, seed: int = 0,
                  max_episodes: int | None = None, stop_when_solved: bool = False) -> TrainingCurve:
    """Train and record a curve.  ``episodes_to_solve`` is the cumulative
    episode count at the end of the first iteration in which at least
    ``solve_fraction`` of the finished episodes reached the goal."""
    if total_iterations is None and max_episodes is None:
        raise ConfigurationError("give total_iterations, max_episodes, or both")
    agent = PpoAgent(cfg, env_factory, seed)
    curve = TrainingCurve()
    episodes = 0
    h = hashlib.sha256()
    it = 0
    while True:
        if total_iterations is not None and it >= total_iterations:
            break
        if max_episodes is not None and episodes >= max_episodes:
            break
        ro = agent.collect()
        h.update(ro.actions.tobytes())
        _, dloss = agent.update(ro)
        episodes += len(ro.episode_returns)
        rate = float(np.mean(ro.episode_goals)) if ro.episode_goals else 0.0
        curve.iteration.append(it)
        curve.episodes.append(episodes)
        curve.mean_return.append(float(np.mean(ro.episode_returns)) if ro.episode_returns else math.nan)
        curve.goal_rate.append(rate)
        curve.bonus_mean.append(float(ro.b_int.mean()))
        curve.bonus_std.append(float(ro.b_int.std()))
        curve.distill_loss.append(dloss)
        if curve.episodes_to_solve is None and ro.episode_goals and rate >= cfg.solve_fraction:
            curve.episodes_to_solve = episodes
            if stop_when_solved:
                break
        it += 1
    curve.actions_digest = h.hexdigest()
    return curve


def env_factory(kind: str, size: int, flip_seed: int | None = None):
    return lambda: ToyEnv(kind, size, flip_seed)
