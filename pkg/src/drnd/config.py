"""Run configuration: an INI-style text with one section per subcommand.

Example::

    [train-online]
    env = deep_sea
    size = 10
    alpha = 0.9

Only the section matching the subcommand is read; other known sections are
ignored, unknown sections and keys are rejected.  Every error message names
the offending ``section.key``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ConfigurationError

SUBCOMMANDS = ("verify-lemmas", "inconsistency", "heatmap", "train-online", "train-offline")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(",", " ").split())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(p for p in text.replace(",", " ").split())


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""


def _unit(v):
    return 0.0 <= v <= 1.0


def _pos(v):
    return v > 0


def _discount(v):
    return 0.0 <= v < 1.0


_PPO_ALGO = {
    "alpha": Key(float, 0.9, _unit, "in [0, 1]"),
    "n_targets": Key(int, 10, _pos, "positive"),
}

SCHEMA: dict[str, dict[str, Key]] = {
    "verify-lemmas": {
        "mc_trials": Key(int, 1_000_000, lambda v: v >= 10_000, ">= 10000"),
        "ensemble_trials": Key(int, 1_000_000, lambda v: v >= 100_000, ">= 100000"),
        "enum_max_n": Key(int, 3, lambda v: 1 <= v <= 4, "in 1..4"),
        "unbiased_ns": Key(_int_list, (1, 2, 5, 10, 100), lambda v: len(v) > 0 and min(v) >= 1, "positive"),
    },
    "inconsistency": {
        "M": Key(int, 100, lambda v: v >= 2, ">= 2"),
        "methods": Key(_str_list, ("rnd", "drnd", "b1", "b2"),
                       lambda v: set(v) <= {"rnd", "drnd", "b1", "b2"} and len(v) > 0, "subset of rnd,drnd,b1,b2"),
        "train_epochs": Key(int, 500, lambda v: v >= 0, ">= 0"),
        "batch_size": Key(int, 256, _pos, "positive"),
        "lr": Key(float, 1e-3, _pos, "positive"),
        "width": Key(int, 16, _pos, "positive"),
        "init": Key(str, "fan_in_uniform", lambda v: v in ("he_uniform", "fan_in_uniform"),
                    "he_uniform or fan_in_uniform"),
        "record_draws": Key(_bool, True),
        "spread_ns": Key(_int_list, (1, 2, 4, 8, 16, 32), lambda v: len(v) > 0 and min(v) >= 1, "positive"),
        **_PPO_ALGO,
    },
    "heatmap": {
        "method": Key(str, "drnd", lambda v: v in ("drnd", "rnd", "cfn"), "drnd, rnd or cfn"),
        "dataset": Key(str, "mixture", lambda v: v in ("mixture", "point"), "mixture or point"),
        "points": Key(int, 512, _pos, "positive"),
        "grid": Key(int, 17, lambda v: v >= 8, ">= 8"),
        "epochs": Key(int, 1000, lambda v: v >= 0, ">= 0"),
        "batch_size": Key(int, 256, _pos, "positive"),
        "lr": Key(float, 1e-3, _pos, "positive"),
        "width": Key(int, 16, _pos, "positive"),
        "init": Key(str, "fan_in_uniform", lambda v: v in ("he_uniform", "fan_in_uniform"),
                    "he_uniform or fan_in_uniform"),
        **_PPO_ALGO,
    },
    "train-online": {
        "env": Key(str, "deep_sea", lambda v: v in ("deep_sea", "sparse_chain"), "deep_sea or sparse_chain"),
        "size": Key(int, 10, lambda v: v >= 2, ">= 2"),
        "randomize_actions": Key(_bool, True),
        "method": Key(str, "drnd", lambda v: v in ("drnd", "rnd", "cfn", "none"), "drnd, rnd, cfn or none"),
        "iterations": Key(_opt_int, None, lambda v: v is None or v >= 1, ">= 1 or none"),
        "max_episodes": Key(_opt_int, 2000, lambda v: v is None or v >= 1, ">= 1 or none"),
        "stop_when_solved": Key(_bool, False),
        "gamma": Key(float, 0.99, _discount, "in [0, 1)"),
        "gamma_int": Key(float, 0.99, _discount, "in [0, 1)"),
        "gae_lambda": Key(float, 0.95, _unit, "in [0, 1]"),
        "clip": Key(float, 0.1, lambda v: 0 < v < 1, "in (0, 1)"),
        "epochs": Key(int, 4, _pos, "positive"),
        "lam": Key(float, 1.0, lambda v: v >= 0, ">= 0"),
        "lr": Key(float, 3e-4, _pos, "positive"),
        "bonus_lr": Key(float, 3e-4, _pos, "positive"),
        "hidden": Key(int, 64, _pos, "positive"),
        "n_envs": Key(int, 16, _pos, "positive"),
        "minibatches": Key(int, 4, _pos, "positive"),
        "ent_coef": Key(float, 0.001, lambda v: v >= 0, ">= 0"),
        **_PPO_ALGO,
    },
    "train-offline": {
        "dataset_size": Key(int, 10_000, lambda v: v >= 1000, ">= 1000"),
        "behavior_low": Key(float, -0.25, lambda v: -1 <= v <= 1, "in [-1, 1]"),
        "behavior_high": Key(float, 0.25, lambda v: -1 <= v <= 1, "in [-1, 1]"),
        "iterations": Key(int, 3000, lambda v: v >= 0, ">= 0"),
        "lam_actor": Key(float, 1.0, lambda v: v >= 0, ">= 0"),
        "lam_critic": Key(float, 1.0, lambda v: v >= 0, ">= 0"),
        "ablation": Key(_bool, True),
        "drnd_epochs": Key(int, 100, lambda v: v >= 0, ">= 0"),
        "gamma": Key(float, 0.99, _discount, "in [0, 1)"),
        "tau": Key(float, 0.005, lambda v: 0 < v <= 1, "in (0, 1]"),
        "batch_size": Key(int, 256, _pos, "positive"),
        "hidden": Key(int, 64, _pos, "positive"),
        "actor_lr": Key(float, 1e-3, _pos, "positive"),
        "critic_lr": Key(float, 1e-3, _pos, "positive"),
        "drnd_lr": Key(float, 1e-4, _pos, "positive"),
        "max_bonus_ratio": Key(float, 1.5, _pos, "positive"),
        "min_ablation_ratio": Key(float, 3.0, _pos, "positive"),
        **_PPO_ALGO,
    },
}

RUN_KEYS = {"seeds": Key(_int_list, None, lambda v: len(v) > 0, "non-empty")}


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    settings: dict
    seeds: tuple[int, ...] | None = None
    out: str | None = None

    def resolved(self) -> dict:
        def plain(v):
            return list(v) if isinstance(v, tuple) else v
        return {"subcommand": self.subcommand, "settings": {k: plain(v) for k, v in sorted(self.settings.items())},
                "seeds": list(self.seeds) if self.seeds is not None else None}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.resolved(), sort_keys=True).encode()).hexdigest()


def defaults(subcommand: str) -> dict:
    if subcommand not in SCHEMA:
        raise ConfigurationError(f"unknown subcommand {subcommand!r}; choose from {SUBCOMMANDS}")
    return {k: key.default for k, key in SCHEMA[subcommand].items()}


def _coerce(section: str, name: str, key: Key, raw: str):
    path = f"{section}.{name}"
    try:
        value = key.parse(raw)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{path}: cannot parse {raw!r} ({e})") from None
    if key.check is not None and not key.check(value):
        raise ConfigurationError(f"{path}: value {raw!r} out of range, must be {key.rule}")
    return value


def parse_config(text: str, subcommand: str) -> RunConfig:
    """Parse ``text`` for ``subcommand``; missing keys take their defaults."""
    settings = defaults(subcommand)
    parser = configparser.ConfigParser(strict=True, interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep key case ("M")
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"malformed config: {e}".splitlines()[0]) from None
    seeds = None
    for section in parser.sections():
        if section == "run":
            for name, raw in parser.items(section):
                if name not in RUN_KEYS:
                    raise ConfigurationError(f"run.{name}: unknown key")
                seeds = _coerce("run", name, RUN_KEYS[name], raw)
            continue
        if section not in SCHEMA:
            raise ConfigurationError(f"{section}: unknown section; choose from {('run',) + SUBCOMMANDS}")
        for name, raw in parser.items(section):
            if name not in SCHEMA[section]:
                raise ConfigurationError(f"{section}.{name}: unknown key")
            value = _coerce(section, name, SCHEMA[section][name], raw)
            if section == subcommand:
                settings[name] = value
    if subcommand == "train-offline" and settings["behavior_low"] > settings["behavior_high"]:
        raise ConfigurationError("train-offline.behavior_low: must not exceed behavior_high")
    return RunConfig(subcommand, settings, seeds)
