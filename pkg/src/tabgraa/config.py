"""Flat TOML run configuration with strict keys and ``key=value`` overrides.

Every key, its default and its meaning is listed in ``KEYS``; ``tabgraa
<cmd> --print-config`` dumps the resolved set.
"""

from __future__ import annotations

import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .alignment import AlignmentConfig
from .dataset import ToySpec
from .pipeline import RunConfig
from .sft import SftConfig


class ConfigError(ValueError):
    pass


# key: (default, help)
KEYS = {
    "seed": (0, "root seed; every random stream is derived from it by name"),
    "out_dir": ("runs/default", "artifact directory"),
    "train_path": ("", "real training CSV"),
    "test_path": ("", "held-out real CSV (MIA non-members, MLE test set)"),
    "target_path": ("", "target-domain CSV for the target reward"),
    "sft_checkpoint": ("", "SFT checkpoint; posttrain runs SFT first when empty"),
    "checkpoint": ("", "policy checkpoint used by generate"),
    "synth_path": ("", "synthetic CSV scored by evaluate"),
    "numeric_mode": ("digit", "numeric tokenization: digit | bin(k)"),
    "d_model": (48, "transformer width"),
    "n_layers": (2, "transformer blocks"),
    "n_heads": (3, "attention heads"),
    "sft_epochs": (30, "SFT epochs"),
    "sft_batch_size": (8, "SFT mini-batch size"),
    "sft_lr": (3e-3, "SFT learning rate"),
    "method": ("graa", "graa | graa_logsig | dpo | npo | kto"),
    "variant": ("none", "none | kl_anchor | grad_diff"),
    "beta": (1.0, "alignment strength"),
    "group_size": (4, "B: items per group / pairs / negatives per step"),
    "lr": (1e-5, "alignment learning rate"),
    "steps_per_round": (100, "K: optimizer steps per round"),
    "group_strategy": ("top_bottom", "top_bottom | random_within_halves | random_assignment"),
    "lambda_kl": (0.1, "KL-anchor weight"),
    "lambda_gd": (1.0, "gradient-difference anchor weight"),
    "weight_decay": (0.01, "AdamW weight decay (SFT and alignment)"),
    "reward": ("cls", "cls | dcr | target | forget"),
    "target_mode": ("dcr", "base reward used against the target set: dcr | cls"),
    "forget": ([], "forget-region constraints, e.g. [\"x0 in [10, 20]\"]"),
    "scorer_trees": (100, "trees in the real-vs-synthetic scorer"),
    "rounds": (5, "T: post-training rounds"),
    "scorer_pool": (800, "rows generated per round to train the scorer"),
    "align_pool": (512, "rows generated per round for alignment"),
    "scorer_strategy": ("retrain", "retrain | fixed"),
    "separation": ("separated", "separated | leak (ablation only)"),
    "control": ("none", "none | random_scoring | random_grouping"),
    "retry_cap": (20.0, "max sampled sequences per requested row"),
    "temperature": (1.0, "sampling temperature"),
    "n_generate": (1000, "rows written by generate"),
    "label_column": ("", "label for MLE in evaluate (skipped when empty)"),
    "task": ("classification", "classification | regression"),
    "toy_rows": (1000, "make-toy: rows"),
    "toy_numeric": (2, "make-toy: numeric columns"),
    "toy_categorical": (1, "make-toy: categorical columns"),
    "toy_clusters": (3, "make-toy: mixture components"),
    "toy_levels": (3, "make-toy: levels per categorical column"),
    "toy_decimals": (0, "make-toy: decimals kept on numerics"),
    "ablate_betas": ([0.1, 1.0, 10.0, 100.0], "ablate: beta grid"),
    "ablate_group_sizes": ([1, 4, 8, 16, 32, 64], "ablate: B grid"),
    "eval_rows": (2000, "ablate: synthetic rows generated per cell for evaluation"),
    "theory_trials": (100, "theory-check: bounded-gradient trials"),
}


def defaults():
    return {k: (list(v) if isinstance(v, list) else v) for k, (v, _) in KEYS.items()}


def _coerce(key, value):
    default = KEYS[key][0]
    if isinstance(default, bool) or default is None:
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"key {key!r} expects a list")
        return value
    if not isinstance(value, type(default)) or isinstance(value, bool) != isinstance(default, bool):
        raise ConfigError(f"key {key!r} expects {type(default).__name__}, got {value!r}")
    return value


def parse_override(item):
    """``key=value`` with a TOML-literal value; bare words are strings."""
    key, sep, raw = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def resolve(path=None, overrides=(), base=None):
    """Defaults, then the TOML file, then overrides; unknown keys raise."""
    cfg = dict(base) if base is not None else defaults()
    items = []
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            items += list(tomllib.loads(p.read_text(encoding="utf-8")).items())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    items += [parse_override(o) for o in overrides]
    for key, value in items:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def run_config(cfg) -> RunConfig:
    try:
        sft = SftConfig(epochs=cfg["sft_epochs"], batch_size=cfg["sft_batch_size"],
                        lr=cfg["sft_lr"], weight_decay=cfg["weight_decay"])
        align = AlignmentConfig(method=cfg["method"], variant=cfg["variant"], beta=cfg["beta"],
                                group_size=cfg["group_size"], lr=cfg["lr"],
                                steps_per_round=cfg["steps_per_round"],
                                group_strategy=cfg["group_strategy"], lambda_kl=cfg["lambda_kl"],
                                lambda_gd=cfg["lambda_gd"], weight_decay=cfg["weight_decay"])
        return RunConfig(
            train_path=cfg["train_path"], target_path=cfg["target_path"],
            sft_checkpoint=cfg["sft_checkpoint"], out_dir=cfg["out_dir"],
            numeric_mode=cfg["numeric_mode"], d_model=cfg["d_model"], n_layers=cfg["n_layers"],
            n_heads=cfg["n_heads"], sft=sft, align=align, reward=cfg["reward"],
            target_mode=cfg["target_mode"], forget=tuple(cfg["forget"]),
            scorer_trees=cfg["scorer_trees"], rounds=cfg["rounds"],
            scorer_pool=cfg["scorer_pool"], align_pool=cfg["align_pool"],
            scorer_strategy=cfg["scorer_strategy"], separation=cfg["separation"],
            control=cfg["control"], retry_cap=cfg["retry_cap"], temperature=cfg["temperature"],
            seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def toy_spec(cfg) -> ToySpec:
    return ToySpec(n_rows=cfg["toy_rows"], n_numeric=cfg["toy_numeric"],
                   n_categorical=cfg["toy_categorical"], cluster_count=cfg["toy_clusters"],
                   n_levels=cfg["toy_levels"], decimals=cfg["toy_decimals"])

