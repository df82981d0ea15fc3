"""``drnd`` command line: one subcommand per experiment.

    drnd <subcommand> [--config FILE] [--seeds 0,1,2] [--out DIR] [--workers K]

Outputs go to ``<out>/<subcommand>/``; ``--out`` defaults to ``$DRND_OUT`` or
``./drnd-runs``.  Every run writes ``manifest.json`` listing the resolved
config, seeds, timestamps, emitted files with SHA-256 hashes and the checks.

Exit codes: 0 all checks passed, 1 a check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import SUBCOMMANDS, RunConfig, parse_config
from .errors import DrndError

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
DEFAULT_SEEDS = {
    "verify-lemmas": (0,),
    "inconsistency": tuple(range(20)),
    "heatmap": (0,),
    "train-online": tuple(range(5)),
    "train-offline": (0,),
}
OUT_ENV = "DRND_OUT"


@dataclass
class RunManifest:
    config: dict
    seeds: list[int]
    started: str
    finished: str = ""
    outputs: dict[str, str] = field(default_factory=dict)   # relative path -> sha256
    checks: dict[str, bool] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    version: str = __version__

    @property
    def passed(self) -> bool:
        return all(self.checks.values()) and not self.errors

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return json.dumps(d, indent=2, sort_keys=True)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Emitter:
    def __init__(self, root: Path, manifest: RunManifest):
        self.root = root
        self.manifest = manifest
        root.mkdir(parents=True, exist_ok=True)

    def text(self, name: str, content: str) -> Path:
        p = self.root / name
        p.write_text(content)
        self.manifest.outputs[name] = sha256_file(p)
        return p

    def csv(self, name: str, rows: list[dict], header: list[str] | None = None) -> Path:
        header = header or (list(rows[0]) if rows else [])
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
        return self.text(name, buf.getvalue())


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return v


# ----------------------------------------------------------------------------
# subcommands


def run_verify_lemmas(cfg: RunConfig, seeds, out: Emitter, workers: int) -> None:
    from .estimators import SuiteConfig, run_suite
    from .rng import make_rng

    s = cfg.settings
    suite = SuiteConfig(unbiased_ns=tuple(s["unbiased_ns"]), mc_trials=s["mc_trials"],
                        ensemble_trials=s["ensemble_trials"], enum_max_n=s["enum_max_n"])
    rows = []
    for seed in seeds:
        checks, disc = run_suite(suite, lambda key, seed=seed: make_rng(seed, "verify-lemmas", key))
        rows += [{"lemma_id": r.lemma_id, "config": r.config, "analytic": r.analytic,
                  "estimate": r.estimate, "stderr": r.stderr, "trials": r.trials, "pass": r.passed,
                  "seed": seed} for r in checks]
    out.csv("lemmas.csv", rows)
    out.csv("k5_discrepancy.csv", disc)
    for r in rows:
        key = f"{r['lemma_id']} {r['config']} seed={r['seed']}"
        out.manifest.checks[key] = bool(r["pass"])


def run_inconsistency(cfg: RunConfig, seeds, out: Emitter, workers: int) -> None:
    from .inconsistency import InconsistencyConfig, run_inconsistency_experiment

    s = cfg.settings
    icfg = InconsistencyConfig(methods=tuple(s["methods"]), M=s["M"], seeds=tuple(seeds),
                               train_epochs=s["train_epochs"], batch_size=s["batch_size"], lr=s["lr"],
                               width=s["width"], n_targets=s["n_targets"], alpha=s["alpha"], init=s["init"],
                               record_draws=s["record_draws"], spread_ns=tuple(s["spread_ns"]))
    rep = run_inconsistency_experiment(icfg, workers)
    per_seed = []
    for name, r in rep.methods.items():
        for i, seed in enumerate(rep.seeds_used):
            f = r.fits[i]
            per_seed.append({"seed": seed, "method": name, "kl_before": r.kl_before[i], "kl_after": r.kl_after[i],
                             "slope": f.slope, "r2": f.r2, "pearson": f.pearson})
    out.csv("inconsistency_summary.csv", rep.rows())
    out.csv("inconsistency_per_seed.csv", per_seed,
            ["seed", "method", "kl_before", "kl_after", "slope", "r2", "pearson"])
    spread_rows = [{"seed": seed, "n_targets": n, "b1_spread": rep.spread[n][i],
                    "total_spread": rep.spread_total[n][i]}
                   for n in sorted(rep.spread) for i, seed in enumerate(rep.seeds_used)]
    out.csv("spread.csv", spread_rows, ["seed", "n_targets", "b1_spread", "total_spread"])
    for seed, msg in rep.errors.items():
        out.manifest.errors[f"seed={seed}"] = msg
    for name, ok in inconsistency_checks(rep).items():
        out.manifest.checks[name] = ok


def inconsistency_checks(rep) -> dict[str, bool]:
    m = rep.methods
    checks = {}
    med = rep.median_spread()
    if med:
        checks["spread median non-increasing in N"] = all(a >= b for a, b in zip(med, med[1:]))
    if "rnd" in m and "drnd" in m and m["rnd"].kl_before and m["drnd"].kl_before:
        checks["kl_before drnd < rnd"] = m["drnd"].kl_before_stats[0] < m["rnd"].kl_before_stats[0]
        checks["kl_after drnd < rnd"] = m["drnd"].kl_after_stats[0] < m["rnd"].kl_after_stats[0]
        checks["pearson drnd > rnd"] = m["drnd"].median_pearson > m["rnd"].median_pearson
    if "b1" in m and "b2" in m and m["b1"].kl_before and m["b2"].kl_before:
        checks["kl_before b1 < b2"] = m["b1"].kl_before_stats[0] < m["b2"].kl_before_stats[0]
        checks["kl_after b2 < b1"] = m["b2"].kl_after_stats[0] < m["b1"].kl_after_stats[0]
    return checks


def run_heatmap(cfg: RunConfig, seeds, out: Emitter, workers: int) -> None:
    from .bonus import DrndModel
    from .inconsistency import (GridDataset, MixtureSpec, build_grid_dataset, heatmap, heatmap_csv,
                                lattice_argmin)

    s = cfg.settings
    for seed in seeds:
        if s["dataset"] == "point":
            grid = GridDataset(np.full((s["points"], 2), 0.5), MixtureSpec(((0.5, 0.5),), (0.0,), (1.0,)),
                               s["grid"])
        else:
            grid = build_grid_dataset(MixtureSpec(), s["points"], seed, s["grid"])
        model = DrndModel.build(s["method"], 2, s["width"], s["width"], s["n_targets"], s["alpha"], s["lr"],
                                seed, init=s["init"])
        before = heatmap(grid, model, "before")
        out.text(f"heatmap_seed{seed}_before.csv", heatmap_csv(grid, before))
        after = heatmap(grid, model, "after", epochs=s["epochs"], batch_size=s["batch_size"], seed=seed)
        out.text(f"heatmap_seed{seed}_after.csv", heatmap_csv(grid, after))
        if s["dataset"] == "point":
            cell = 1.0 / s["grid"]
            ok = bool(np.max(np.abs(lattice_argmin(grid, after) - 0.5)) <= cell + 1e-12)
            out.manifest.checks[f"point-mass argmin within one cell seed={seed}"] = ok


def _online_seed(args):
    from .online import PpoConfig, env_factory, rollout_train

    s, seed = args
    pcfg = PpoConfig(gamma=s["gamma"], gamma_int=s["gamma_int"], gae_lambda=s["gae_lambda"], clip=s["clip"],
                     epochs=s["epochs"], lam=s["lam"], alpha=s["alpha"], n_targets=s["n_targets"],
                     method=s["method"], lr=s["lr"], bonus_lr=s["bonus_lr"], hidden=s["hidden"],
                     n_envs=s["n_envs"], minibatches=s["minibatches"], ent_coef=s["ent_coef"])
    factory = env_factory(s["env"], s["size"], seed if s["randomize_actions"] else None)
    return rollout_train(pcfg, factory, s["iterations"], seed, s["max_episodes"], s["stop_when_solved"])


def _map(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            futs = [pool.submit(fn, it) for it in items]
            return [_result(f) for f in futs]
    out = []
    for it in items:
        try:
            out.append(fn(it))
        except (DrndError, ArithmeticError, ValueError) as e:
            out.append(e)
    return out


def _result(fut):
    try:
        return fut.result()
    except (DrndError, ArithmeticError, ValueError) as e:
        return e


def run_train_online(cfg: RunConfig, seeds, out: Emitter, workers: int) -> None:
    s = cfg.settings
    results = _map(_online_seed, [(s, seed) for seed in seeds], workers)
    summary = []
    for seed, res in zip(seeds, results):
        if isinstance(res, Exception):
            out.manifest.errors[f"seed={seed}"] = f"{type(res).__name__}: {res}"
            continue
        out.csv(f"curve_seed{seed}.csv", res.rows(),
                ["iteration", "episodes", "mean_return", "goal_rate", "bonus_mean", "bonus_std", "distill_loss"])
        summary.append({"seed": seed, "method": s["method"], "episodes_to_solve": res.episodes_to_solve,
                        "episodes": res.episodes[-1] if res.episodes else 0,
                        "final_goal_rate": res.goal_rate[-1] if res.goal_rate else math.nan})
    out.csv("summary.csv", summary, ["seed", "method", "episodes_to_solve", "episodes", "final_goal_rate"])


def _offline_seed(args):
    from .offline import BehaviorSpec, LineWalk, SacConfig, generate_offline_dataset, train_offline

    s, seed, with_data = args
    env = LineWalk()
    ds = generate_offline_dataset(env, BehaviorSpec(s["behavior_low"], s["behavior_high"]), s["dataset_size"], seed)
    base = dict(gamma=s["gamma"], tau=s["tau"], actor_lr=s["actor_lr"], critic_lr=s["critic_lr"],
                drnd_lr=s["drnd_lr"], batch_size=s["batch_size"], hidden=s["hidden"],
                drnd_epochs=s["drnd_epochs"], alpha=s["alpha"], n_targets=s["n_targets"])
    cfg = SacConfig(lam_actor=s["lam_actor"], lam_critic=s["lam_critic"], **base)
    rep, _, drnd = train_offline(cfg, ds, s["iterations"], seed, env)
    abl = None
    if s["ablation"]:
        abl, _, _ = train_offline(SacConfig(lam_actor=0.0, lam_critic=0.0, **base), ds, s["iterations"], seed,
                                  env, drnd=drnd)
    return ds if with_data else None, rep, abl


def run_train_offline(cfg: RunConfig, seeds, out: Emitter, workers: int) -> None:
    s = cfg.settings
    results = _map(_offline_seed, [(s, seed, i == 0) for i, seed in enumerate(seeds)], workers)
    summary = []
    for i, (seed, res) in enumerate(zip(seeds, results)):
        if isinstance(res, Exception):
            out.manifest.errors[f"seed={seed}"] = f"{type(res).__name__}: {res}"
            continue
        ds, rep, abl = res
        if ds is not None:
            out.text(f"dataset_seed{seed}.csv", ds.to_csv())
            out.text(f"dataset_seed{seed}.json", json.dumps(ds.metadata, indent=2, sort_keys=True))
        out.text(f"eval_seed{seed}.json", rep.to_json())
        row = {"seed": seed, "arm": "penalized", "mean_return": rep.mean_return, "policy_bonus": rep.policy_bonus,
               "dataset_bonus": rep.dataset_bonus, "bonus_ratio": rep.bonus_ratio,
               "behavior_return": rep.behavior_return}
        summary.append(row)
        if s["lam_actor"] > 0 or s["lam_critic"] > 0:
            out.manifest.checks[f"penalized bonus ratio <= {s['max_bonus_ratio']} seed={seed}"] = \
                rep.bonus_ratio <= s["max_bonus_ratio"]
        if abl is not None:
            out.text(f"eval_seed{seed}_ablation.json", abl.to_json())
            summary.append({**row, "arm": "lambda0", "mean_return": abl.mean_return,
                            "policy_bonus": abl.policy_bonus, "dataset_bonus": abl.dataset_bonus,
                            "bonus_ratio": abl.bonus_ratio})
            out.manifest.checks[f"ablation bonus ratio > {s['min_ablation_ratio']} seed={seed}"] = \
                abl.bonus_ratio > s["min_ablation_ratio"]
    out.csv("summary.csv", summary, ["seed", "arm", "mean_return", "policy_bonus", "dataset_bonus",
                                     "bonus_ratio", "behavior_return"])


RUNNERS = {
    "verify-lemmas": run_verify_lemmas,
    "inconsistency": run_inconsistency,
    "heatmap": run_heatmap,
    "train-online": run_train_online,
    "train-offline": run_train_offline,
}


def run(cfg: RunConfig, out_root, workers: int = 1) -> RunManifest:
    seeds = list(cfg.seeds if cfg.seeds is not None else DEFAULT_SEEDS[cfg.subcommand])
    manifest = RunManifest(cfg.resolved(), seeds, _now())
    em = Emitter(Path(out_root) / cfg.subcommand, manifest)
    RUNNERS[cfg.subcommand](cfg, seeds, em, workers)
    manifest.finished = _now()
    (em.root / "manifest.json").write_text(manifest.to_json())
    return manifest


# ----------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drnd", description="Distributional random network distillation experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="INI config file; see drnd.config for keys")
    p.add_argument("--seeds", help="comma-separated seeds, overriding [run] seeds")
    p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./drnd-runs)")
    p.add_argument("--workers", type=int, default=1, help="processes for independent seeds")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = Path(args.config).read_text() if args.config else ""
        cfg = parse_config(text, args.subcommand)
        if args.seeds:
            try:
                seeds = tuple(int(x) for x in args.seeds.replace(",", " ").split())
            except ValueError:
                raise DrndError(f"--seeds: cannot parse {args.seeds!r}") from None
            if not seeds or min(seeds) < 0:
                raise DrndError("--seeds: need at least one non-negative seed")
            cfg = RunConfig(cfg.subcommand, cfg.settings, seeds)
        if args.workers < 1:
            raise DrndError("--workers must be >= 1")
    except (OSError, DrndError, ValueError) as e:
        print(f"drnd: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    out_root = args.out or os.environ.get(OUT_ENV) or "drnd-runs"
    manifest = run(cfg, out_root, args.workers)
    for name, ok in manifest.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    for k, msg in manifest.errors.items():
        print(f"ERROR {k}: {msg}")
    print(f"wrote {len(manifest.outputs)} files to {Path(out_root) / cfg.subcommand}")
    return EXIT_OK if manifest.passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
