"""Bonus-inconsistency experiments on toy datasets.

Two substrates:

* ``OneHotDataset``: M categories, category ``k`` occurring ``n_k`` times,
  where the counts ``1..M`` are assigned to categories by a seeded permutation.
* ``GridDataset``: points in the unit square drawn from a Gaussian mixture,
  with a regular evaluation lattice for heatmaps.

For each seed the harness measures the bonus distribution over the supports
before training (compared to uniform) and after distillation (compared to the
``1/sqrt(n)`` reference), plus a least-squares fit of bonus against
``1/sqrt(n)`` and the before-training spread ``max - min`` as the ensemble
grows.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .bonus import BonusConfig, DrndModel, ensemble_init, predictor_init, sample_c
from .errors import ConfigurationError, DegenerateError, DrndError, ShapeError
from .nn import MlpSpec
from .rng import derive_seed, make_rng

PROB_FLOOR = 1e-12
METHODS = ("rnd", "drnd", "b1", "b2")


# ----------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class OneHotDataset:
    M: int
    counts: np.ndarray        # counts[k] = occurrences of category k
    labels: np.ndarray        # category index per sample, in shuffled order

    @property
    def n_samples(self) -> int:
        return int(self.labels.size)

    @property
    def supports(self) -> np.ndarray:
        return np.eye(self.M)

    @property
    def samples(self) -> np.ndarray:
        return np.eye(self.M)[self.labels]


def build_onehot_dataset(M: int, seed: int = 0, permute: bool = True) -> OneHotDataset:
    """Category ``perm[i-1]`` occurs ``i`` times (identity when ``permute`` is off)."""
    if M < 2:
        raise ConfigurationError(f"M must be >= 2, got {M}")
    rng = make_rng(seed, "onehot-data")
    perm = rng.permutation(M) if permute else np.arange(M)
    counts = np.empty(M, dtype=np.int64)
    counts[perm] = np.arange(1, M + 1)
    labels = np.repeat(np.arange(M), counts)
    rng.shuffle(labels)
    return OneHotDataset(M, counts, labels)


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture; samples are clipped into the unit square."""

    centers: tuple[tuple[float, float], ...] = ((0.25, 0.25), (0.75, 0.7), (0.3, 0.8))
    scales: tuple[float, ...] = (0.05, 0.08, 0.04)
    weights: tuple[float, ...] = (0.5, 0.3, 0.2)

    def __post_init__(self):
        if not (len(self.centers) == len(self.scales) == len(self.weights)) or not self.centers:
            raise ConfigurationError("mixture needs equally many centers, scales and weights")
        if any(s < 0 for s in self.scales) or any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
            raise ConfigurationError("mixture scales and weights must be non-negative")


@dataclass(frozen=True)
class GridDataset:
    points: np.ndarray
    density_spec: MixtureSpec
    eval_grid: int = 32

    def __post_init__(self):
        if self.eval_grid < 8:
            raise ConfigurationError(f"eval_grid must be >= 8, got {self.eval_grid}")
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ShapeError("grid points must have shape (n, 2)")
        if np.any(self.points < 0) or np.any(self.points > 1):
            raise ConfigurationError("grid points must lie in the unit square")

    def lattice(self) -> np.ndarray:
        """Cell centres of an ``eval_grid x eval_grid`` lattice, row-major over y then x."""
        g = (np.arange(self.eval_grid) + 0.5) / self.eval_grid
        xx, yy = np.meshgrid(g, g)
        return np.column_stack([xx.ravel(), yy.ravel()])


def build_grid_dataset(spec: MixtureSpec, size: int, seed: int = 0, eval_grid: int = 32) -> GridDataset:
    rng = make_rng(seed, "grid-data")
    w = np.asarray(spec.weights, dtype=np.float64)
    comp = rng.choice(len(w), size=size, p=w / w.sum())
    centers = np.asarray(spec.centers, dtype=np.float64)[comp]
    scales = np.asarray(spec.scales, dtype=np.float64)[comp, None]
    pts = np.clip(centers + scales * rng.standard_normal((size, 2)), 0.0, 1.0)
    return GridDataset(pts, spec, eval_grid)


# ----------------------------------------------------------------------------
# distributions and divergences


@dataclass(frozen=True)
class BonusDistribution:
    labels: tuple
    probabilities: np.ndarray
    raw: np.ndarray


def _as_distribution(raw, labels=None) -> BonusDistribution:
    raw = np.asarray(raw, dtype=np.float64).ravel()
    if raw.size == 0:
        raise DegenerateError("empty bonus vector")
    if not np.isfinite(raw).all():
        raise DegenerateError("bonuses must be finite")
    if np.any(raw < 0):
        raise DegenerateError("bonuses must be non-negative")
    if not np.any(raw > 0):
        raise DegenerateError("all bonuses are zero; no distribution to form")
    p = np.maximum(raw, PROB_FLOOR)
    p = p / p.sum()
    labels = tuple(range(raw.size)) if labels is None else tuple(labels)
    if len(labels) != raw.size:
        raise ShapeError("one label per support is required")
    return BonusDistribution(labels, p, raw)


def empirical_bonus_distribution(model, supports, labels=None) -> BonusDistribution:
    """``model`` is anything with ``bonus(x)`` or a plain callable returning bonuses."""
    fn = model.bonus if hasattr(model, "bonus") else model
    return _as_distribution(fn(np.asarray(supports, dtype=np.float64)), labels)


def distribution_from_bonuses(bonuses, labels=None) -> BonusDistribution:
    return _as_distribution(bonuses, labels)


def kl_divergence(P: BonusDistribution, Q: BonusDistribution) -> float:
    if P.labels != Q.labels:
        raise ShapeError("KL divergence needs distributions over the same support")
    p, q = P.probabilities, Q.probabilities
    if np.any(q <= 0):
        raise DegenerateError("reference distribution must be strictly positive")
    m = p > 0
    return float(max(np.sum(p[m] * np.log(p[m] / q[m])), 0.0))


def uniform_distribution(n: int, labels=None) -> BonusDistribution:
    return _as_distribution(np.ones(n), labels)


def reference_invsqrt_distribution(counts, labels=None) -> BonusDistribution:
    c = np.asarray(counts, dtype=np.float64)
    if np.any(c < 1):
        raise ConfigurationError("counts must all be >= 1")
    return _as_distribution(1.0 / np.sqrt(c), labels)


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    r2: float
    pearson: float


def fit_against(bonus, reference) -> LineFit:
    """Least squares ``bonus ~ slope * reference + intercept``."""
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(bonus, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    if np.std(x) == 0 or np.std(y) == 0:
        r = 0.0
    else:
        r = float(np.corrcoef(x, y)[0, 1])
    return LineFit(float(slope), float(intercept), r * r, r)


# ----------------------------------------------------------------------------
# experiment


@dataclass(frozen=True)
class InconsistencyConfig:
    methods: tuple[str, ...] = METHODS
    M: int = 100
    seeds: tuple[int, ...] = tuple(range(20))
    train_epochs: int = 500
    batch_size: int = 256
    lr: float = 1e-3
    width: int = 16
    n_targets: int = 10
    alpha: float = 0.9
    init: str = "fan_in_uniform"
    record_draws: bool = True
    spread_ns: tuple[int, ...] = (1, 2, 4, 8, 16, 32)

    def __post_init__(self):
        if len(self.seeds) < 2:
            raise ConfigurationError("at least 2 seeds are required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}; choose from {METHODS}")
        if self.train_epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.width < 1:
            raise ConfigurationError("train_epochs >= 0, batch_size >= 1, lr > 0, width >= 1 required")
        if self.n_targets < 2:
            raise ConfigurationError("DRND needs n_targets >= 2")
        if not self.spread_ns or min(self.spread_ns) < 1:
            raise ConfigurationError("spread_ns must be non-empty positive integers")


@dataclass
class MethodResult:
    kl_before: list[float] = field(default_factory=list)
    kl_after: list[float] = field(default_factory=list)
    fits: list[LineFit] = field(default_factory=list)

    def _agg(self, xs):
        a = np.asarray(xs, dtype=np.float64)
        return (float(a.mean()), float(a.std())) if a.size else (math.nan, math.nan)

    @property
    def kl_before_stats(self):
        return self._agg(self.kl_before)

    @property
    def kl_after_stats(self):
        return self._agg(self.kl_after)

    @property
    def median_pearson(self) -> float:
        return float(np.median([f.pearson for f in self.fits])) if self.fits else math.nan


@dataclass
class InconsistencyReport:
    config: InconsistencyConfig
    methods: dict[str, MethodResult]
    spread: dict[int, list[float]]          # N -> per-seed b1 spread before training
    spread_total: dict[int, list[float]]    # N -> per-seed total-bonus spread
    seeds_used: list[int]
    errors: dict[int, str]

    def median_spread(self, total: bool = False) -> list[float]:
        src = self.spread_total if total else self.spread
        return [float(np.median(src[n])) for n in sorted(src)]

    def rows(self) -> list[dict]:
        out = []
        for name, r in self.methods.items():
            kb, kbs = r.kl_before_stats
            ka, kas = r.kl_after_stats
            out.append({
                "method": name, "kl_before_mean": kb, "kl_before_std": kbs,
                "kl_after_mean": ka, "kl_after_std": kas,
                "slope_mean": float(np.mean([f.slope for f in r.fits])) if r.fits else math.nan,
                "r2_mean": float(np.mean([f.r2 for f in r.fits])) if r.fits else math.nan,
                "pearson_median": r.median_pearson, "seeds": len(r.kl_before),
            })
        return out

    def spread_rows(self) -> list[dict]:
        return [{"n_targets": n, "b1_spread_median": float(np.median(self.spread[n])),
                 "total_spread_median": float(np.median(self.spread_total[n]))}
                for n in sorted(self.spread)]


def _train(model: DrndModel, X: np.ndarray, cfg: InconsistencyConfig, rng: np.random.Generator) -> None:
    # Record one draw of c(x) per occurrence: each stored sample is one visit.
    C = sample_c(model.ensemble, X, rng) if cfg.record_draws else None
    for _ in range(cfg.train_epochs):
        order = rng.permutation(X.shape[0])
        for k in range(0, X.shape[0], cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            model.distill(X[idx], rng, None if C is None else C[idx])


def _spread(v: np.ndarray) -> float:
    return float(np.max(v) - np.min(v))


def run_seed(cfg: InconsistencyConfig, seed: int) -> dict:
    """All measurements for one seed; pure function of ``(cfg, seed)``."""
    data = build_onehot_dataset(cfg.M, seed)
    X, sup = data.samples, data.supports
    w = cfg.width
    n_max = max(cfg.n_targets, max(cfg.spread_ns))
    t_spec = MlpSpec((cfg.M, w, w), "relu", 0, cfg.init)
    p_spec = MlpSpec((cfg.M, w, w, w), "relu", derive_seed(seed, "predictor"), cfg.init)
    full = ensemble_init(t_spec, n_max, seed=derive_seed(seed, "targets"))
    ref_u = uniform_distribution(cfg.M)
    ref_q = reference_invsqrt_distribution(data.counts)
    invsqrt = 1.0 / np.sqrt(data.counts)
    out: dict = {"methods": {}, "spread": {}, "spread_total": {}}

    # before-training spread, one shared predictor init, nested ensembles
    for n in cfg.spread_ns:
        alpha = 1.0 if n == 1 else cfg.alpha
        m = DrndModel(full.subset(n), predictor_init(p_spec, cfg.lr), BonusConfig(alpha=alpha))
        b1, b2 = m.components(sup)
        out["spread"][n] = _spread(b1)
        out["spread_total"][n] = _spread(m.bonus(sup))

    arms = {}
    if "rnd" in cfg.methods:
        arms["rnd"] = (full.subset(1), 1.0)
    if any(k in cfg.methods for k in ("drnd", "b1", "b2")):
        arms["drnd"] = (full.subset(cfg.n_targets), cfg.alpha)
    for arm, (ens, alpha) in arms.items():
        model = DrndModel(ens, predictor_init(p_spec, cfg.lr), BonusConfig(alpha=alpha))
        before = _measure(model, sup)
        _train(model, X, cfg, make_rng(seed, "train", arm))
        after = _measure(model, sup)
        keys = ["rnd"] if arm == "rnd" else [k for k in ("drnd", "b1", "b2") if k in cfg.methods]
        for key in keys:
            src = "total" if key in ("rnd", "drnd") else key
            kb = kl_divergence(distribution_from_bonuses(before[src]), ref_u)
            ka = kl_divergence(distribution_from_bonuses(after[src]), ref_q)
            out["methods"][key] = (kb, ka, fit_against(after[src], invsqrt))
    return out


def _measure(model: DrndModel, sup: np.ndarray) -> dict:
    b1, b2 = model.components(sup)
    return {"total": model.bonus(sup), "b1": b1, "b2": b2}


def merge_seed(report: InconsistencyReport, seed: int, res: dict) -> None:
    report.seeds_used.append(seed)
    for key, (kb, ka, fit) in res["methods"].items():
        r = report.methods.setdefault(key, MethodResult())
        r.kl_before.append(kb)
        r.kl_after.append(ka)
        r.fits.append(fit)
    for n, v in res["spread"].items():
        report.spread.setdefault(n, []).append(v)
    for n, v in res["spread_total"].items():
        report.spread_total.setdefault(n, []).append(v)


def run_inconsistency_experiment(cfg: InconsistencyConfig, workers: int = 1) -> InconsistencyReport:
    """Seeds are independent; results are merged in seed order regardless of ``workers``."""
    report = InconsistencyReport(cfg, {m: MethodResult() for m in cfg.methods}, {}, {}, [], {})
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            futs = [pool.submit(run_seed, cfg, s) for s in cfg.seeds]
            results = []
            for s, f in zip(cfg.seeds, futs):
                try:
                    results.append((s, f.result()))
                except (DrndError, ArithmeticError, ValueError) as e:
                    results.append((s, e))
    else:
        results = []
        for s in cfg.seeds:
            try:
                results.append((s, run_seed(cfg, s)))
            except (DrndError, ArithmeticError, ValueError) as e:
                results.append((s, e))
    for s, res in results:
        if isinstance(res, Exception):
            report.errors[s] = f"{type(res).__name__}: {res}"
        else:
            merge_seed(report, s, res)
    return report


# ----------------------------------------------------------------------------
# heatmaps


def train_on_points(model: DrndModel, points: np.ndarray, epochs: int, batch_size: int,
                    rng: np.random.Generator, record_draws: bool = True) -> None:
    C = sample_c(model.ensemble, points, rng) if record_draws else None
    for _ in range(epochs):
        order = rng.permutation(points.shape[0])
        for k in range(0, points.shape[0], batch_size):
            idx = order[k:k + batch_size]
            model.distill(points[idx], rng, None if C is None else C[idx])


def heatmap(grid: GridDataset, model, stage: str = "before", epochs: int = 200,
            batch_size: int = 256, seed: int = 0) -> np.ndarray:
    """Bonus on the evaluation lattice, shape ``(eval_grid, eval_grid)`` indexed ``[y, x]``.

    ``stage="after"`` first distils ``model`` (in place) on the grid points.
    """
    if stage not in ("before", "after"):
        raise ConfigurationError(f"stage must be 'before' or 'after', got {stage!r}")
    if stage == "after":
        train_on_points(model, grid.points, epochs, batch_size, make_rng(seed, "heatmap-train"))
    fn = model.bonus if hasattr(model, "bonus") else model
    vals = np.asarray(fn(grid.lattice()), dtype=np.float64)
    return vals.reshape(grid.eval_grid, grid.eval_grid)


def heatmap_csv(grid: GridDataset, values: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "bonus"])
    for (x, y), b in zip(grid.lattice(), values.ravel()):
        w.writerow([repr(float(x)), repr(float(y)), repr(float(b))])
    return buf.getvalue()


def lattice_argmin(grid: GridDataset, values: np.ndarray) -> np.ndarray:
    return grid.lattice()[int(np.argmin(values.ravel()))]
