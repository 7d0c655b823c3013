"""``tabgraa`` command-line entry point.

Exit status: 0 success, 1 configuration error, 2 runtime failure (the last
good checkpoint, when there is one, is printed to stderr).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .config import KEYS, ConfigError, resolve, run_config, toy_spec
from .dataset import DataError, Schema, Vocabulary, load_csv, make_toy, split
from .lm import load_checkpoint, save_checkpoint
from .pipeline import (PoolError, RunAborted, derive_seed, fit_sft, model_meta, post_train,
                       synthesize)
from .theory import run_checks

log = logging.getLogger("tabgraa")

COMMANDS = ("fit", "posttrain", "generate", "evaluate", "ablate", "theory-check", "make-toy")


class RuntimeFailure(RuntimeError):
    def __init__(self, msg, last_checkpoint=None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


# ------------------------------------------------------------------ helpers

def _seeds(cfg, command):
    root = cfg["seed"]
    names = {"fit": ["init", "sft"], "posttrain": ["init", "sft", "rounds"],
             "generate": ["generate"], "evaluate": ["evaluate"],
             "ablate": ["init", "sft", "eval"], "theory-check": ["theory"],
             "make-toy": ["toy", "split"]}[command]
    return {"root": root, **{n: derive_seed(root, n) for n in names}}


def write_manifest(out, command, cfg):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config": cfg, "seeds": _seeds(cfg, command),
                "version": __version__, "python": platform.python_version(),
                "numpy": np.__version__}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(cfg, *keys):
    for k in keys:
        if not cfg[k]:
            raise ConfigError(f"config key {k!r} is required for this command")


def _load_policy(path):
    model, meta = load_checkpoint(path)
    if "vocab" not in meta or "schema" not in meta:
        raise ConfigError(f"{path} lacks vocabulary/schema metadata")
    return model, Vocabulary.from_dict(meta["vocab"]), Schema.from_dict(meta["schema"])


# ------------------------------------------------------------------ commands

def cmd_make_toy(cfg, out):
    table = make_toy(toy_spec(cfg), derive_seed(cfg["seed"], "toy"))
    table.to_csv(out / "toy.csv")
    for name, part in zip(("train", "val", "test"), split(table, seed=derive_seed(cfg["seed"], "split"))):
        part.to_csv(out / f"{name}.csv")
    print(out / "toy.csv")


def cmd_fit(cfg, out):
    _require(cfg, "train_path")
    train = load_csv(cfg["train_path"])
    rc = run_config(cfg)
    history = []
    model, vocab, history = fit_sft(train, rc)
    save_checkpoint(out / "sft.ckpt", model, model_meta(vocab, train.schema, history=history))
    print(out / "sft.ckpt")


def cmd_posttrain(cfg, out):
    _require(cfg, "train_path")
    rc = replace(run_config(cfg), out_dir=str(out))
    train = load_csv(rc.train_path)
    policy = vocab = None
    if rc.sft_checkpoint:
        policy, vocab, schema = _load_policy(rc.sft_checkpoint)
        if schema != train.schema:
            raise ConfigError("SFT checkpoint schema differs from the training table")
    else:
        policy, vocab, _ = fit_sft(train, rc)
        save_checkpoint(out / "sft.ckpt", policy, model_meta(vocab, train.schema))
    try:
        post_train(replace(rc, sft_checkpoint=""), train=train, policy=policy, vocab=vocab)
    except RunAborted as exc:
        raise RuntimeFailure(str(exc), exc.last_checkpoint) from exc
    print(out / "rounds.jsonl")


def cmd_generate(cfg, out):
    _require(cfg, "checkpoint")
    model, vocab, schema = _load_policy(cfg["checkpoint"])
    try:
        table = synthesize(model, vocab, schema, cfg["n_generate"],
                           derive_seed(cfg["seed"], "generate"), cfg["retry_cap"],
                           temperature=cfg["temperature"])
    except PoolError as exc:
        raise RuntimeFailure(str(exc), cfg["checkpoint"]) from exc
    table.to_csv(out / "synthetic.csv")
    print(out / "synthetic.csv")


def _report(cfg, real, synth, seed):
    members = nonmembers = real_test = None
    if cfg["test_path"]:
        real_test = load_csv(cfg["test_path"], real.schema)
        members, nonmembers = real, real_test
    return metrics.evaluate(real, synth, seed=seed, members=members, nonmembers=nonmembers,
                            real_test=real_test, label=cfg["label_column"] or None,
                            task=cfg["task"])


def _write_report(rep, out, stem="metrics"):
    (out / f"{stem}.json").write_text(rep.to_json() + "\n")
    (out / f"{stem}.csv").write_text(metrics.MetricsReport.csv_header() + "\n" + rep.csv_row() + "\n")


def cmd_evaluate(cfg, out):
    _require(cfg, "train_path", "synth_path")
    real = load_csv(cfg["train_path"])
    synth = load_csv(cfg["synth_path"], real.schema)
    rep = _report(cfg, real, synth, derive_seed(cfg["seed"], "evaluate"))
    _write_report(rep, out)
    print(rep.to_json())


def cmd_ablate(cfg, out):
    """One post-training run per (beta, B) cell, all from the same SFT policy."""
    _require(cfg, "train_path")
    base = replace(run_config(cfg), out_dir="")
    train = load_csv(base.train_path)
    if base.sft_checkpoint:
        policy, vocab, _ = _load_policy(base.sft_checkpoint)
    else:
        policy, vocab, _ = fit_sft(train, base)
        save_checkpoint(out / "sft.ckpt", policy, model_meta(vocab, train.schema))
    rows = []
    for beta in cfg["ablate_betas"]:
        for B in cfg["ablate_group_sizes"]:
            cell = out / f"beta{beta:g}_B{B}"
            cell.mkdir(parents=True, exist_ok=True)
            try:
                rc = replace(base, align=replace(base.align, beta=float(beta), group_size=int(B)),
                             out_dir=str(cell))
            except ValueError as exc:
                raise ConfigError(f"ablation cell beta={beta}, B={B}: {exc}") from None
            try:
                final, _ = post_train(rc, train=train, policy=policy, vocab=vocab)
                synth = synthesize(final, vocab, train.schema, cfg["eval_rows"],
                                   derive_seed(cfg["seed"], "eval"), cfg["retry_cap"])
            except (RunAborted, PoolError) as exc:
                raise RuntimeFailure(f"cell beta={beta}, B={B}: {exc}",
                                     getattr(exc, "last_checkpoint", None)) from exc
            rep = _report(cfg, train, synth, derive_seed(cfg["seed"], "evaluate"))
            _write_report(rep, cell)
            rows.append(f"{beta},{B}," + rep.csv_row())
    (out / "ablation.csv").write_text("beta,group_size," + metrics.MetricsReport.csv_header()
                                      + "\n" + "\n".join(rows) + "\n")
    print(out / "ablation.csv")


def cmd_theory(cfg, out):
    rep = run_checks(derive_seed(cfg["seed"], "theory"), bound_trials=cfg["theory_trials"])
    (out / "theory.json").write_text(rep.to_json() + "\n")
    for name, ok in rep.passed.items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")


HANDLERS = {"fit": cmd_fit, "posttrain": cmd_posttrain, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate, "theory-check": cmd_theory,
            "make-toy": cmd_make_toy}


# --------------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="tabgraa", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tabgraa {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("-c", "--config", help="TOML config file (flat keys)")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key; repeatable; wins over the file")
        s.add_argument("-o", "--out", help="output directory (overrides out_dir)")
        s.add_argument("--seed", type=int, help="root seed (overrides seed)")
        s.add_argument("--manifest", help="re-run from a manifest.json (config and command)")
        s.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        s.add_argument("-q", "--quiet", action="store_true")
    return p


def _resolve_args(args):
    base = None
    if args.manifest:
        try:
            man = json.loads(Path(args.manifest).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read manifest {args.manifest}: {exc}") from None
        if man.get("command") != args.command:
            raise ConfigError(f"manifest was written by {man.get('command')!r}, not {args.command!r}")
        base = resolve(overrides=(), base=None)
        for k, v in man["config"].items():
            if k not in KEYS:
                raise ConfigError(f"unknown config key {k!r} in manifest")
            base[k] = v
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"out_dir={json.dumps(args.out)}")
    return resolve(args.config, overrides, base)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_args(args)
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        out = Path(cfg["out_dir"])
        write_manifest(out, args.command, cfg)
        HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except RuntimeFailure as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        if exc.last_checkpoint:
            print(f"last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return 2
    except (DataError, FloatingPointError, OSError, PoolError, RunAborted) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        last = getattr(exc, "last_checkpoint", None)
        if last:
            print(f"last good checkpoint: {last}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
