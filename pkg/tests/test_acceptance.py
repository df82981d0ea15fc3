"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Expensive experiment runs are shared through module-scoped fixtures.  Every
criterion is checked at its stated tolerance and scale; a criterion that the
implementation does not meet fails here rather than being relaxed.
"""

import csv
import io
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import record
from drnd.bonus import DrndModel
from drnd.cli import run
from drnd.config import SUBCOMMANDS, parse_config
from drnd.estimators import (
    DiscreteTargetDist,
    EnsembleErrorConfig,
    enumerate_y,
    mc_ensemble_error,
    variance_of_y,
)
from drnd.inconsistency import InconsistencyConfig, run_inconsistency_experiment
from drnd.nn import MlpSpec, mlp_backward, mlp_forward, mlp_init
from drnd.offline import BehaviorSpec, LineWalk, SacConfig, SacNets, actor_loss, generate_offline_dataset, \
    pretrain_drnd
from drnd.online import PpoConfig, env_factory, rollout_train
from drnd.rng import derive_seed, make_rng

pytestmark = pytest.mark.slow


# --- criterion 1 ----------------------------------------------------------------


def test_criterion_1_unbiasedness(tmp_path):
    # the shipped default verify-lemmas run, seed 0
    t0 = time.perf_counter()
    m = run(parse_config("", "verify-lemmas"), tmp_path)
    dt = time.perf_counter() - t0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "verify-lemmas" / "lemmas.csv").read_text())))
    mc = [r for r in rows if r["lemma_id"] == "pseudo_count.unbiased"]
    enum = [r for r in rows if r["lemma_id"] == "pseudo_count.enumerated"]
    mc_ok = len(mc) == 5 and all(r["pass"] == "true" and int(r["trials"]) >= 1_000_000 for r in mc)
    enum_ok = len(enum) == 9 and all(abs(float(r["estimate"]) - float(r["analytic"])) <= 1e-12
                                     and r["pass"] == "true" for r in enum)
    ok = mc_ok and enum_ok and not m.errors and dt < 120
    zs = ", ".join(f"{r['config'].split()[-1]}: "
                   f"{abs(float(r['estimate']) - float(r['analytic'])) / float(r['stderr']):.2f}se" for r in mc)
    assert record(1, ok, f"MC mean of y vs 1/n ({zs}); enumeration exact for n<=3, N<=4: {enum_ok}; "
                         f"default verify-lemmas run {dt:.0f}s")


# --- criterion 2 ----------------------------------------------------------------


def test_criterion_2_variance():
    t0 = time.perf_counter()
    exact = all(variance_of_y(DiscreteTargetDist.scalar(p), n, exact=True)
                == enumerate_y(DiscreteTargetDist.scalar(p), n)[1]
                for p in ([0, 2], [-1, 0.5, 3], [0, 1, 1, 4]) for n in (1, 2, 3))
    tp = DiscreteTargetDist.scalar([0, 2])
    oracle = float(enumerate_y(tp, 1)[1])
    printed = variance_of_y(tp, 1, use_expanded=True, k5="printed")
    rederived = variance_of_y(tp, 1, use_expanded=True, k5="rederived")
    dt = time.perf_counter() - t0
    ok = exact and oracle == 4.0 and printed == 3.0 and rederived == 4.0 and dt < 60
    assert record(2, ok, f"un-expanded route == enumeration: {exact}; n=1 printed K5 {printed:g} vs "
                         f"rederived {rederived:g} vs oracle {oracle:g}; {dt:.0f}s")


# --- criterion 3 ----------------------------------------------------------------


def test_criterion_3_ensemble_mean_error():
    t0 = time.perf_counter()
    cfgs = [
        EnsembleErrorConfig(4, np.zeros(2), np.eye(2), np.array([1.0, 0.0]), 1_000_000),
        EnsembleErrorConfig(2, np.zeros(2), np.diag([1.0, 4.0]), np.array([1.0, 1.0]), 1_000_000),
        EnsembleErrorConfig(10, np.array([0.5, -1.0, 2.0]),
                     np.array([[2.0, 0.3, 0.0], [0.3, 1.0, -0.2], [0.0, -0.2, 0.5]]),
                     np.array([0.5, -1.0, 1.5]), 1_000_000),
    ]
    reps = [mc_ensemble_error(c, make_rng(0, "acceptance-3", i)) for i, c in enumerate(cfgs)]
    dt = time.perf_counter() - t0
    ok = (all(0.98 <= r.ratio <= 1.02 for r in reps) and cfgs[0].analytic() == 1.25 and dt < 120)
    ratios = ", ".join(f"{r.ratio:.4f}" for r in reps)
    assert record(3, ok, f"MC/analytic ratios [{ratios}] at 1e6 trials; Sigma=I x=[1,0] N=4 analytic "
                         f"{cfgs[0].analytic():g}; {dt:.0f}s")


# --- criteria 4 to 7 ------------------------------------------------------------


@pytest.fixture(scope="module")
def inconsistency():
    t0 = time.perf_counter()
    rep = run_inconsistency_experiment(InconsistencyConfig(seeds=tuple(range(20))))
    return rep, time.perf_counter() - t0


def test_criterion_4_spread_shrinks(inconsistency):
    rep, dt = inconsistency
    ns = sorted(rep.spread)
    med = [float(np.median(rep.spread[n][:10])) for n in ns]
    ok = ns == [1, 2, 4, 8, 16, 32] and all(a >= b for a, b in zip(med, med[1:]))
    txt = ", ".join(f"N={n}: {m:.4f}" for n, m in zip(ns, med))
    assert record(4, ok, f"median initial bonus spread over 10 seeds ({txt}); shared run {dt:.0f}s")


def test_criterion_5_drnd_beats_rnd_kl(inconsistency):
    rep, dt = inconsistency
    m = rep.methods
    (rb, _), (db, _) = m["rnd"].kl_before_stats, m["drnd"].kl_before_stats
    (ra, _), (da, _) = m["rnd"].kl_after_stats, m["drnd"].kl_after_stats
    ok = len(rep.seeds_used) >= 20 and db < rb and da < ra and dt < 1200
    assert record(5, ok, f"KL before DRND {db:.5f} vs RND {rb:.5f}; "
                         f"KL after DRND {da:.4f} vs RND {ra:.4f}; "
                         f"{len(rep.seeds_used)} seeds")


def test_criterion_6_b1_b2_kl(inconsistency):
    rep, dt = inconsistency
    m = rep.methods
    b1b, b2b = m["b1"].kl_before_stats[0], m["b2"].kl_before_stats[0]
    b1a, b2a = m["b1"].kl_after_stats[0], m["b2"].kl_after_stats[0]
    ok = b1b < b2b and b2a < b1a and dt < 1200
    assert record(6, ok, f"KL before b1 {b1b:.5f} vs b2 {b2b:.5f} (needs b1 < b2); "
                         f"KL after b2 {b2a:.4f} vs b1 {b1a:.4f} (needs b2 < b1)")


def test_criterion_7_pearson(inconsistency):
    rep, _ = inconsistency
    pd = float(np.median([f.pearson for f in rep.methods["drnd"].fits[:10]]))
    pr = float(np.median([f.pearson for f in rep.methods["rnd"].fits[:10]]))
    assert record(7, pd > pr, f"median Pearson(bonus, 1/sqrt(n)) over 10 seeds: DRND {pd:.3f} vs RND {pr:.3f}")


# --- criterion 8 ----------------------------------------------------------------


def test_criterion_8_reductions():
    t0 = time.perf_counter()
    x = make_rng(0, "acceptance-8").standard_normal((1000, 6))
    rnd = DrndModel.build("rnd", 6, 8, 16, seed=1)
    err = mlp_forward(rnd.predictor.params, x) - mlp_forward(rnd.ensemble.targets[0], x)
    ok_rnd = np.array_equal(rnd.bonus(x), np.sum(err * err, axis=1))
    cfn = DrndModel.build("cfn", 6, 8, 16, seed=1)
    f = mlp_forward(cfn.predictor.params, x)
    ok_cfn = np.array_equal(cfn.bonus(x), np.sqrt(np.sum(f * f, axis=1) / 8))
    dt = time.perf_counter() - t0
    assert record(8, ok_rnd and ok_cfn and dt < 60,
                  f"alpha=1,N=1 == RND squared error: {ok_rnd}; alpha=0 rademacher == CFN: {ok_cfn}; 1000 inputs")


# --- criterion 9 ----------------------------------------------------------------


def _mlp_fd_error(k: int) -> float:
    rng = make_rng(k, "acceptance-9")
    depth = int(rng.integers(1, 4))
    dims = tuple(int(d) for d in rng.integers(1, 7, size=depth + 1))
    p = mlp_init(MlpSpec(dims, ("relu", "tanh", "identity")[k % 3], derive_seed(k, "net")))
    x = rng.standard_normal((int(rng.integers(1, 4)), dims[0]))
    u = rng.standard_normal((x.shape[0], dims[-1]))
    g = mlp_backward(p, x, u)
    ana = np.concatenate([g.params.flat(), g.inputs.ravel()])
    base, h = p.flat(), 1e-5
    num = []
    for i in range(base.size):
        e = np.zeros_like(base)
        e[i] = h
        num.append((np.sum(u * mlp_forward(p.set_flat(base + e), x))
                    - np.sum(u * mlp_forward(p.set_flat(base - e), x))) / (2 * h))
    xf = x.ravel()
    for j in range(xf.size):
        e = np.zeros_like(xf)
        e[j] = h
        num.append((np.sum(u * mlp_forward(p, (xf + e).reshape(x.shape)))
                    - np.sum(u * mlp_forward(p, (xf - e).reshape(x.shape)))) / (2 * h))
    return float(np.max(np.abs(ana - np.array(num)) / (1 + np.abs(ana))))


def _actor_fd_error(k: int, drnd) -> float:
    cfg = SacConfig(hidden=8, lam_actor=1.0 + k)
    nets = SacNets.create(1, 1, cfg, k)
    rng = make_rng(k, "acceptance-9-actor")
    s, eps = rng.uniform(-1, 1, (5, 1)), rng.standard_normal((5, 1))
    ana = actor_loss(s, nets, drnd, cfg, eps).grads.flat()
    base, h = nets.actor.net.params.flat(), 1e-6
    num = np.empty_like(base)
    for i in range(base.size):
        e = np.zeros_like(base)
        e[i] = h
        nets.actor.net.params = nets.actor.net.params.set_flat(base + e)
        up = actor_loss(s, nets, drnd, cfg, eps).loss
        nets.actor.net.params = nets.actor.net.params.set_flat(base - e)
        num[i] = (up - actor_loss(s, nets, drnd, cfg, eps).loss) / (2 * h)
    return float(np.max(np.abs(ana - num) / (1 + np.abs(ana))))


def test_criterion_9_gradients():
    t0 = time.perf_counter()
    mlp_errs = [_mlp_fd_error(k) for k in range(24)]
    ds = generate_offline_dataset(LineWalk(), BehaviorSpec(), 1000, 0)
    drnd = pretrain_drnd(ds, SacConfig(drnd_epochs=5), 0)
    actor_errs = [_actor_fd_error(k, drnd) for k in range(6)]
    dt = time.perf_counter() - t0
    worst = max(mlp_errs + actor_errs)
    ok = worst < 1e-4 and dt < 120
    assert record(9, ok, f"{len(mlp_errs)} mlp_backward + {len(actor_errs)} actor-loss configs, "
                         f"worst relative error {worst:.2e}; {dt:.0f}s")


# --- criterion 10 ---------------------------------------------------------------


def test_criterion_10_online():
    t0 = time.perf_counter()
    solve = {}
    for method in ("drnd", "none"):
        solve[method] = []
        for seed in range(5):
            c = rollout_train(PpoConfig(method=method), env_factory("deep_sea", 10, seed), None, seed,
                              max_episodes=2000, stop_when_solved=True)
            solve[method].append(c.episodes_to_solve)
    dt = time.perf_counter() - t0
    med = {k: float(np.median([math.inf if e is None else e for e in v])) for k, v in solve.items()}
    n_solved = sum(e is not None for e in solve["drnd"])
    ok = med["drnd"] < med["none"] and n_solved >= 4 and dt < 1800
    assert record(10, ok, f"deep_sea(10) episodes-to-solve DRND {solve['drnd']} (median {med['drnd']:g}) vs "
                          f"vanilla {solve['none']} (median {med['none']:g}); DRND solved {n_solved}/5; "
                          f"{dt:.0f}s")


# --- criterion 11 ---------------------------------------------------------------


def test_criterion_11_offline(tmp_path):
    t0 = time.perf_counter()
    m = run(parse_config("", "train-offline"), tmp_path)
    dt = time.perf_counter() - t0
    rows = csv.DictReader(io.StringIO((tmp_path / "train-offline" / "summary.csv").read_text()))
    vals = {r["arm"]: r for r in rows}
    pen, abl = float(vals["penalized"]["bonus_ratio"]), float(vals["lambda0"]["bonus_ratio"])
    ok = pen <= 1.5 and abl > 3.0 and not m.errors and dt < 1200
    assert record(11, ok, f"policy/dataset bonus ratio with lambda=1 {pen:.2f} (needs <= 1.5), "
                          f"lambda=0 ablation {abl:.2f} (needs > 3); {dt:.0f}s")


# --- criterion 12 ---------------------------------------------------------------


SMALL = {
    "verify-lemmas": "[verify-lemmas]\nmc_trials = 20000\nensemble_trials = 100000\n",
    "inconsistency": "[inconsistency]\nM = 20\ntrain_epochs = 20\n[run]\nseeds = 0, 1, 2\n",
    "heatmap": "[heatmap]\nepochs = 50\n[run]\nseeds = 0, 1\n",
    "train-online": "[train-online]\nmax_episodes = 160\n[run]\nseeds = 0, 1\n",
    "train-offline": "[train-offline]\ndataset_size = 2000\niterations = 200\ndrnd_epochs = 10\n",
}


def test_criterion_12_determinism(tmp_path):
    same, n_csv = True, 0
    for sub in SUBCOMMANDS:
        cfg = parse_config(SMALL[sub], sub)
        run(cfg, tmp_path / "a")
        run(cfg, tmp_path / "b")
        for p in sorted((tmp_path / "a" / sub).glob("*.csv")):
            n_csv += 1
            same &= p.read_bytes() == (tmp_path / "b" / sub / p.name).read_bytes()
    assert record(12, same and n_csv >= len(SUBCOMMANDS),
                  f"{n_csv} CSV files across {len(SUBCOMMANDS)} subcommands byte-identical on re-run: {same}")
