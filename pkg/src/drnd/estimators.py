"""Network-free checks of the pseudo-count statistic and the ensemble-mean error.

Conventions: a discrete target distribution is ``N`` equally likely output
vectors (``values`` has shape ``(N, k)``).  After ``n`` occurrences, the
optimal predictor is the mean of ``n`` i.i.d. draws, and

    y = (sum_j fstar_j^2 - sum_j mu_j^2) / (sum_j B2_j - sum_j mu_j^2)

has expectation exactly ``1/n``.  Monte Carlo checks report a ``MCReport``
that passes when the estimate is within ``z`` standard errors of the
analytic value; every Monte Carlo claim also has an exact enumeration twin
that runs in rational arithmetic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateError

Z_THRESHOLD = 3.0


@dataclass(frozen=True)
class MCReport:
    estimate: float
    standard_error: float
    analytic_value: float
    trials: int
    z: float = Z_THRESHOLD

    @property
    def passed(self) -> bool:
        return abs(self.estimate - self.analytic_value) <= self.z * self.standard_error

    @property
    def ratio(self) -> float:
        return self.estimate / self.analytic_value if self.analytic_value else math.nan


@dataclass(frozen=True)
class DiscreteTargetDist:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ConfigurationError("values must be a non-empty (N, k) array")
        object.__setattr__(self, "values", v)

    @classmethod
    def scalar(cls, points: Sequence[float]) -> "DiscreteTargetDist":
        return cls(np.asarray(points, dtype=np.float64)[:, None])

    @property
    def n_targets(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def raw_moment(self, order: int) -> np.ndarray:
        return np.mean(self.values ** order, axis=0)

    mu = property(lambda self: self.raw_moment(1))
    b2 = property(lambda self: self.raw_moment(2))
    b3 = property(lambda self: self.raw_moment(3))
    b4 = property(lambda self: self.raw_moment(4))

    def pooled_spread(self) -> float:
        return float(np.sum(self.b2 - self.mu ** 2))


def closed_form_fstar(draws) -> np.ndarray:
    """Least-squares optimum after observing ``draws``: their element-wise mean."""
    d = np.asarray(draws, dtype=np.float64)
    if d.size == 0 or d.shape[0] == 0:
        raise ConfigurationError("closed_form_fstar needs at least one draw")
    if d.ndim == 1:
        d = d[:, None]
    return d.mean(axis=0)


def pseudo_count_y(fstar, dist: DiscreteTargetDist) -> float:
    """Raw (unclamped) pooled pseudo-count statistic."""
    fstar = np.atleast_1d(np.asarray(fstar, dtype=np.float64))
    mu = dist.mu
    den = float(np.sum(dist.b2) - np.sum(mu * mu))
    if den <= 0.0:
        raise DegenerateError("target distribution has zero spread")
    return float((np.sum(fstar * fstar) - np.sum(mu * mu)) / den)


# ----------------------------------------------------------------------------
# exact enumeration


def _exact_values(dist: DiscreteTargetDist) -> list[list[Fraction]]:
    return [[Fraction(float(v)) for v in row] for row in dist.values]


def enumerate_y(dist: DiscreteTargetDist, n: int) -> tuple[Fraction, Fraction]:
    """Exact ``(E[y], Var[y])`` over all ``N**n`` equally likely draw sequences."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    vals = _exact_values(dist)
    N, k = len(vals), len(vals[0])
    mu = [sum(vals[i][j] for i in range(N)) / N for j in range(k)]
    b2 = [sum(vals[i][j] ** 2 for i in range(N)) / N for j in range(k)]
    mu_sq = sum(m * m for m in mu)
    den = sum(b2) - mu_sq
    if den == 0:
        raise DegenerateError("target distribution has zero spread")
    total = Fraction(0)
    total_sq = Fraction(0)
    count = 0
    for seq in itertools.product(range(N), repeat=n):
        f = [sum(vals[i][j] for i in seq) / n for j in range(k)]
        y = (sum(v * v for v in f) - mu_sq) / den
        total += y
        total_sq += y * y
        count += 1
    mean = total / count
    return mean, total_sq / count - mean * mean


# ----------------------------------------------------------------------------
# Monte Carlo


def _y_samples(dist: DiscreteTargetDist, n: int, trials: int, rng: np.random.Generator) -> np.ndarray:
    # The sum of n uniform draws only depends on how often each target was hit.
    counts = rng.multinomial(n, np.full(dist.n_targets, 1.0 / dist.n_targets), size=trials)
    fstar = counts @ dist.values / n
    mu = dist.mu
    den = dist.pooled_spread()
    return (np.sum(fstar * fstar, axis=1) - np.sum(mu * mu)) / den


def mc_y(dist: DiscreteTargetDist, n: int, trials: int, rng: np.random.Generator,
         chunk: int = 250_000) -> np.ndarray:
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if dist.pooled_spread() <= 0.0:
        raise DegenerateError("target distribution has zero spread")
    parts = []
    left = trials
    while left > 0:
        m = min(chunk, left)
        parts.append(_y_samples(dist, n, m, rng))
        left -= m
    return np.concatenate(parts)


def mc_unbiasedness(dist: DiscreteTargetDist, n: int, trials: int, rng: np.random.Generator,
                    z: float = Z_THRESHOLD) -> MCReport:
    if trials < 10_000:
        raise ConfigurationError("mc_unbiasedness needs at least 1e4 trials")
    y = mc_y(dist, n, trials, rng)
    return MCReport(float(y.mean()), float(y.std(ddof=1) / math.sqrt(trials)), 1.0 / n, trials, z)


# ----------------------------------------------------------------------------
# variance of y


def falling_factorial(n: int, i: int) -> int:
    """``n! / (n - i)!``, zero when ``i > n``."""
    return math.perm(n, i) if i <= n else 0


def k_coefficients(n: int, k5: str = "printed") -> tuple[int, int, int, int, int]:
    """Coefficients of the expanded ``n**3 (B2 - mu^2)^2 Var[y]`` polynomial.

    ``k5="printed"`` uses ``-5n^2 + 10n - 6``; ``"rederived"`` uses
    ``-4n^2 + 10n - 6``, which is what expanding the moment formula gives.
    """
    if k5 == "printed":
        c5 = -5 * n * n + 10 * n - 6
    elif k5 == "rederived":
        c5 = -4 * n * n + 10 * n - 6
    else:
        raise ConfigurationError("k5 must be 'printed' or 'rederived'")
    return 1, 4 * n - 4, 2 * n - 3, 4 * n * n - 16 * n + 12, c5


def variance_of_y(dist: DiscreteTargetDist, n: int, use_expanded: bool = False,
                  k5: str = "printed", exact: bool = False):
    """Analytic ``Var[y]`` for a scalar-output distribution.

    Un-expanded route: ``(E[f^4] - E[f^2]^2) / (B2 - mu^2)^2`` with

        E[f^4] = (n B4 + 4 A2 mu B3 + 3 A2 B2^2 + 6 A3 mu^2 B2 + A4 mu^4) / n^4
        E[f^2] = B2 / n + (n - 1) mu^2 / n,      A_i = n! / (n - i)!

    Expanded route: the K1..K5 polynomial over ``n^3 (B2 - mu^2)^2``.
    With ``exact=True`` the result is a ``Fraction``.
    """
    if dist.dim != 1:
        raise ConfigurationError("variance_of_y is defined for scalar-output distributions")
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    vals = [row[0] for row in _exact_values(dist)]
    N = len(vals)
    mu, b2, b3, b4 = (sum(v ** p for v in vals) / N for p in (1, 2, 3, 4))
    spread = b2 - mu * mu
    if spread == 0:
        raise DegenerateError("target distribution has zero spread")
    if use_expanded:
        K1, K2, K3, K4, K5 = k_coefficients(n, k5)
        out = (K1 * b4 + K2 * mu * b3 + K3 * b2 * b2 + K4 * mu * mu * b2 + K5 * mu ** 4) / (n ** 3 * spread * spread)
    else:
        A2, A3, A4 = (falling_factorial(n, i) for i in (2, 3, 4))
        ef4 = (n * b4 + 4 * A2 * mu * b3 + 3 * A2 * b2 * b2 + 6 * A3 * mu * mu * b2 + A4 * mu ** 4) / Fraction(n) ** 4
        ef2 = b2 / n + Fraction(n - 1, n) * mu * mu
        out = (ef4 - ef2 * ef2) / (spread * spread)
    return out if exact else float(out)


# ----------------------------------------------------------------------------
# ensemble-mean error of a linear model


@dataclass(frozen=True)
class EnsembleErrorConfig:
    n_targets: int
    theta_mean: np.ndarray
    theta_cov: np.ndarray
    x: np.ndarray
    trials: int = 1_000_000

    def __post_init__(self):
        mean = np.asarray(self.theta_mean, dtype=np.float64)
        cov = np.atleast_2d(np.asarray(self.theta_cov, dtype=np.float64))
        x = np.asarray(self.x, dtype=np.float64)
        d = mean.shape[0]
        if cov.shape != (d, d) or x.shape != (d,):
            raise ConfigurationError("theta_mean, theta_cov and x dimensions disagree")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ConfigurationError("theta_cov must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise ConfigurationError("theta_cov must be positive semidefinite")
        if self.n_targets < 1:
            raise ConfigurationError("n_targets must be >= 1")
        object.__setattr__(self, "theta_mean", mean)
        object.__setattr__(self, "theta_cov", cov)
        object.__setattr__(self, "x", x)

    @property
    def dim(self) -> int:
        return self.theta_mean.shape[0]

    def analytic(self) -> float:
        return (1.0 + 1.0 / self.n_targets) * float(self.x @ self.theta_cov @ self.x)

    def summary(self) -> str:
        diag = ";".join(f"{v:g}" for v in np.diag(self.theta_cov))
        xs = ";".join(f"{v:g}" for v in self.x)
        return f"N={self.n_targets} diag(cov)=[{diag}] x=[{xs}]"


def mc_ensemble_error(cfg: EnsembleErrorConfig, rng: np.random.Generator, z: float = Z_THRESHOLD,
                      chunk: int = 100_000) -> MCReport:
    """Sample predictor and ``N`` target parameter vectors per trial and average
    ``(theta~ . x - mean_i theta_i . x)^2``."""
    if cfg.trials < 100_000:
        raise ConfigurationError("mc_ensemble_error needs at least 1e5 trials")
    evals, evecs = np.linalg.eigh(cfg.theta_cov)
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    total = 0.0
    total_sq = 0.0
    left = cfg.trials
    while left > 0:
        m = min(chunk, left)
        eps = rng.standard_normal((m, cfg.n_targets + 1, cfg.dim))
        theta = cfg.theta_mean + eps @ root.T
        proj = theta @ cfg.x
        err = (proj[:, 0] - proj[:, 1:].mean(axis=1)) ** 2
        total += float(err.sum())
        total_sq += float((err * err).sum())
        left -= m
    t = cfg.trials
    mean = total / t
    var = max(total_sq / t - mean * mean, 0.0) * t / (t - 1)
    return MCReport(mean, math.sqrt(var / t), cfg.analytic(), t, z)


def bonus_gap(sigma2: float, n_targets: int, x1, x2) -> float:
    """Expected first-bonus difference between two inputs under isotropic parameter noise."""
    if sigma2 <= 0:
        raise ConfigurationError("sigma2 must be positive")
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    return (1 + n_targets) * sigma2 / n_targets * (float(x2 @ x2) - float(x1 @ x1))


# ----------------------------------------------------------------------------
# the suite behind `drnd verify-lemmas`


@dataclass
class SuiteConfig:
    two_point: tuple[float, float] = (0.0, 2.0)
    unbiased_ns: tuple[int, ...] = (1, 2, 5, 10, 100)
    mc_trials: int = 1_000_000
    ensemble_trials: int = 1_000_000
    enum_max_n: int = 3
    enum_dists: tuple[tuple[float, ...], ...] = ((0.0, 2.0), (-1.0, 0.5, 3.0), (0.0, 1.0, 1.0, 4.0))
    ensemble_configs: list[EnsembleErrorConfig] = field(default_factory=lambda: [
        EnsembleErrorConfig(4, np.zeros(2), np.eye(2), np.array([1.0, 0.0])),
        EnsembleErrorConfig(2, np.zeros(2), np.diag([1.0, 4.0]), np.array([1.0, 1.0])),
        EnsembleErrorConfig(10, np.array([0.5, -1.0, 2.0]),
                     np.array([[2.0, 0.3, 0.0], [0.3, 1.0, -0.2], [0.0, -0.2, 0.5]]),
                     np.array([0.5, -1.0, 1.5])),
    ])


@dataclass
class SuiteRow:
    lemma_id: str
    config: str
    analytic: float
    estimate: float
    stderr: float
    trials: int
    passed: bool


def run_suite(cfg: SuiteConfig, rng_for) -> tuple[list[SuiteRow], list[dict]]:
    """Run every check; ``rng_for(key)`` returns an independent generator per check.

    Returns the check rows and the K5 discrepancy table.
    """
    rows: list[SuiteRow] = []
    tp = DiscreteTargetDist.scalar(cfg.two_point)
    for n in cfg.unbiased_ns:
        rep = mc_unbiasedness(tp, n, cfg.mc_trials, rng_for(f"unbiased-{n}"))
        rows.append(SuiteRow("pseudo_count.unbiased", f"dist={list(cfg.two_point)} n={n}", rep.analytic_value,
                             rep.estimate, rep.standard_error, rep.trials, rep.passed))
    for pts in cfg.enum_dists:
        dist = DiscreteTargetDist.scalar(pts)
        for n in range(1, cfg.enum_max_n + 1):
            mean, var = enumerate_y(dist, n)
            rows.append(SuiteRow("pseudo_count.enumerated", f"dist={list(pts)} n={n}", 1.0 / n, float(mean), 0.0,
                                 dist.n_targets ** n, mean == Fraction(1, n)))
            route = variance_of_y(dist, n, exact=True)
            rows.append(SuiteRow("varY.unexpanded", f"dist={list(pts)} n={n}", float(var), float(route), 0.0,
                                 dist.n_targets ** n, route == var))
    for i, lc in enumerate(cfg.ensemble_configs):
        lc = EnsembleErrorConfig(lc.n_targets, lc.theta_mean, lc.theta_cov, lc.x, cfg.ensemble_trials)
        rep = mc_ensemble_error(lc, rng_for(f"ensemble-{i}"))
        ok = rep.passed and 0.98 <= rep.ratio <= 1.02
        rows.append(SuiteRow("ensemble_mean.mse", lc.summary(), rep.analytic_value, rep.estimate,
                             rep.standard_error, rep.trials, ok))
    gaps = [bonus_gap(1.0, n, [1.0, 0.0, 0.0], [1.0, 1.0, 1.0]) for n in (1, 2, 4, 8, 16, 32)]
    rows.append(SuiteRow("bonus_gap.shrinks", "sigma2=1 |x1|^2=1 |x2|^2=3 N=1..32", 4.0, gaps[0], 0.0, 0,
                         abs(gaps[0] - 4.0) < 1e-12 and all(a > b for a, b in zip(gaps, gaps[1:]))))

    discrepancy = []
    for n in range(1, cfg.enum_max_n + 1):
        _, oracle = enumerate_y(tp, n)
        discrepancy.append({
            "n": n,
            "oracle": float(oracle),
            "unexpanded": variance_of_y(tp, n),
            "expanded_printed_k5": variance_of_y(tp, n, use_expanded=True, k5="printed"),
            "expanded_rederived_k5": variance_of_y(tp, n, use_expanded=True, k5="rederived"),
        })
    return rows, discrepancy
