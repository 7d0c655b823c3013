"""Iterative generate / score / align loop around a frozen reference.

Run log schema (``rounds.jsonl``, one JSON object per completed round)::

    round          int    1-based round index
    checkpoint     str    file name of the policy checkpoint after the round
    reward         obj    {"kind", "mean", "q10", "q50", "q90"} over the alignment pool
    metrics        obj    {"pool_wasserstein": mean per-column W1 of the pool vs train}
    rejected       int    parse-rejected samples across both pools this round
    loss_first     float  alignment loss at the first step of the round
    loss_last      float  alignment loss at the last step of the round
    ref_sha256     str    digest of the reference parameters (fixity witness)
    scorer_round   int    round in which the scorer used here was fitted (0 if none)
"""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics
from .alignment import AlignmentConfig, ScoredPool, form_strata, method_loss
from .dataset import DataError, RowRejected, Table, build_vocab, parse_generated, serialize_table
from .lm import AdamW, ModelConfig, PolicyModel, sample_batch, save_checkpoint
from .rewards import ForgetRegion, RewardSpec, ScorerConfig, score_pool
from .sft import SftConfig, sft_train, snapshot_reference

log = logging.getLogger(__name__)

SYNTH_ID_BASE = 1 << 40
ANCHOR_ROWS = 100
CONTROLS = ("none", "random_scoring", "random_grouping")


class PoolError(RuntimeError):
    """Too few valid rows could be generated within the retry budget."""

    def __init__(self, msg, validity_rate):
        super().__init__(msg)
        self.validity_rate = validity_rate


class RunAborted(RuntimeError):
    """A round failed; ``last_checkpoint`` names the newest good checkpoint."""

    def __init__(self, msg, last_checkpoint=None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


def derive_seed(root, *names):
    """Independent 63-bit seed for a named role under ``root``."""
    key = zlib.crc32("/".join(str(n) for n in names).encode("utf-8"))
    return int(np.random.SeedSequence([int(root), key]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def params_digest(params):
    return hashlib.sha256(np.ascontiguousarray(params, dtype="<f8").tobytes()).hexdigest()


# ------------------------------------------------------------------ generation

class IdAllocator:
    """Hands out fresh row ids for generated rows, disjoint from real ids."""

    def __init__(self, start=SYNTH_ID_BASE):
        self.next = start

    def take(self, n):
        ids = range(self.next, self.next + n)
        self.next += n
        return ids


@dataclass(frozen=True)
class Pool:
    table: Table
    seqs: tuple
    rejected: int


def generate_pool(model, n, seed, retry_cap=20, *, schema, vocab, max_len=None,
                  id_start=SYNTH_ID_BASE, temperature=1.0):
    """Sample until ``n`` rows parse, drawing at most ``retry_cap * n`` sequences."""
    if n < 1:
        raise ValueError("pool size must be >= 1")
    rng = np.random.default_rng(seed)
    budget = int(retry_cap * n)
    rows, seqs, drawn = [], [], 0
    while len(rows) < n and drawn < budget:
        want = min(budget - drawn, max(n - len(rows), 8))
        for s in sample_batch(model, want, rng, max_len, temperature, vocab.bos, vocab.eos):
            drawn += 1
            try:
                r = parse_generated(s, schema, vocab)
            except RowRejected:
                continue
            if len(rows) < n:
                rows.append(r)
                seqs.append(s)
    if len(rows) < n:
        rate = len(rows) / max(drawn, 1)
        raise PoolError(f"only {len(rows)}/{n} valid rows after {drawn} samples "
                        f"(validity rate {rate:.3f})", rate)
    table = Table.from_rows(schema, rows, range(id_start, id_start + n))
    return Pool(table, tuple(seqs), drawn - n)


# ---------------------------------------------------------------------- config

@dataclass(frozen=True)
class RunConfig:
    train_path: str = ""
    target_path: str = ""
    sft_checkpoint: str = ""
    out_dir: str = ""
    numeric_mode: str = "digit"
    d_model: int = 48
    n_layers: int = 2
    n_heads: int = 3
    sft: SftConfig = SftConfig()
    align: AlignmentConfig = AlignmentConfig()
    reward: str = "cls"
    target_mode: str = "dcr"
    forget: tuple = ()
    scorer_trees: int = 100
    rounds: int = 5
    scorer_pool: int = 256
    align_pool: int = 256
    scorer_strategy: str = "retrain"
    separation: str = "separated"
    control: str = "none"
    retry_cap: float = 20.0
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        B = self.align.group_size
        if self.align_pool < 2 * B or (self.scorer_pool < 2 * B and self.separation == "separated"):
            raise ValueError(f"pool sizes must be at least 2*B = {2 * B}")
        if self.scorer_strategy not in ("retrain", "fixed"):
            raise ValueError(f"unknown scorer strategy {self.scorer_strategy!r}")
        if self.separation not in ("separated", "leak"):
            raise ValueError(f"unknown separation mode {self.separation!r}")
        if self.control not in CONTROLS:
            raise ValueError(f"unknown control {self.control!r}")
        if self.retry_cap < 1:
            raise ValueError("retry_cap must be >= 1")

    def effective_align(self):
        if self.control == "random_grouping":
            return replace(self.align, group_strategy="random_assignment")
        return self.align

    def reward_spec(self, target=None):
        kind = "random" if self.control == "random_scoring" else self.reward
        region = ForgetRegion.parse(self.forget) if kind == "forget" else None
        return RewardSpec(kind, target, self.target_mode, region,
                          ScorerConfig(n_trees=self.scorer_trees))


@dataclass
class RoundRecord:
    round: int
    checkpoint: str
    reward: dict
    metrics: dict
    rejected: int
    loss_first: float
    loss_last: float
    ref_sha256: str
    scorer_round: int = 0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


# ------------------------------------------------------------------------- SFT

def fit_sft(train, cfg: RunConfig, vocab=None):
    """SFT a fresh policy on ``train``; returns ``(model, vocab, history)``."""
    vocab = vocab or build_vocab(train, cfg.numeric_mode)
    seqs = serialize_table(train, vocab)
    mcfg = ModelConfig(vocab_size=len(vocab), d_model=cfg.d_model, n_layers=cfg.n_layers,
                       n_heads=cfg.n_heads)
    model = PolicyModel.init(mcfg, derive_seed(cfg.seed, "init"))
    history = []
    sft_cfg = replace(cfg.sft, seed=derive_seed(cfg.seed, "sft"))
    sft_train(model, seqs, sft_cfg, history)
    return model, vocab, history


def model_meta(vocab, schema, **extra):
    return {"vocab": vocab.to_dict(), "schema": schema.to_dict(), **extra}


# ------------------------------------------------------------------- main loop

def _sample_len(vocab, train):
    longest = max(len(s) for s in serialize_table(train, vocab))
    return longest + 8


def _reward_summary(kind, v):
    q = np.quantile(v, [0.1, 0.5, 0.9])
    return {"kind": kind, "mean": float(np.mean(v)),
            "q10": float(q[0]), "q50": float(q[1]), "q90": float(q[2])}


def post_train(cfg: RunConfig, train: Optional[Table] = None, policy: Optional[PolicyModel] = None,
               vocab=None, target: Optional[Table] = None, on_round=None):
    """Run ``cfg.rounds`` rounds of pool generation, scoring and alignment.

    ``train``/``policy``/``vocab`` override the paths in ``cfg``; when no
    policy is given one is SFT-trained first. The reference snapshot is taken
    from the starting policy and never changes. Returns ``(policy, records)``.
    ``on_round(t, policy, record, scores)`` is called after each round.
    """
    from .dataset import Vocabulary, load_csv
    from .lm import load_checkpoint

    if train is None:
        if not cfg.train_path:
            raise ValueError("no training table given")
        train = load_csv(cfg.train_path)
    if target is None and cfg.target_path:
        target = load_csv(cfg.target_path, train.schema)
    if policy is None and cfg.sft_checkpoint:
        policy, meta = load_checkpoint(cfg.sft_checkpoint)
        vocab = vocab or Vocabulary.from_dict(meta["vocab"])
    if policy is None:
        policy, vocab, _ = fit_sft(train, cfg, vocab)
    if vocab is None:
        raise ValueError("a vocabulary must accompany a given policy")
    policy = policy.copy()

    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "rounds.jsonl").write_text("")

    ref = snapshot_reference(policy)
    ref_digest = params_digest(ref.params)
    align_cfg = cfg.effective_align()
    spec = cfg.reward_spec(target)
    learned = spec.kind == "cls" or (spec.kind == "target" and spec.target_mode == "cls")
    schema = train.schema
    max_len = _sample_len(vocab, train)
    anchor = serialize_table(train.subset(range(min(ANCHOR_ROWS, len(train)))), vocab)
    ids = IdAllocator()
    scorer, scorer_round = None, 0
    records = []
    last_ckpt = None

    for t in range(1, cfg.rounds + 1):
        gen = dict(schema=schema, vocab=vocab, max_len=max_len, temperature=cfg.temperature)
        rejected = 0
        need_scorer_pool = (learned and cfg.separation == "separated"
                            and (scorer is None or cfg.scorer_strategy == "retrain"))
        try:
            scorer_pool = None
            if need_scorer_pool:
                sp = generate_pool(policy, cfg.scorer_pool, derive_seed(cfg.seed, t, "scorer_pool"),
                                   cfg.retry_cap, id_start=ids.take(cfg.scorer_pool).start, **gen)
                scorer_pool, rejected = sp.table, sp.rejected
            ap = generate_pool(policy, cfg.align_pool, derive_seed(cfg.seed, t, "align_pool"),
                               cfg.retry_cap, id_start=ids.take(cfg.align_pool).start, **gen)
        except PoolError as exc:
            raise RunAborted(str(exc), last_ckpt) from exc
        rejected += ap.rejected
        pool = ap.table

        reuse = scorer if (cfg.scorer_strategy == "fixed" and cfg.separation == "separated") else None
        scores = score_pool(pool, spec, target if spec.kind == "target" else train,
                            separation=cfg.separation, scorer_pool=scorer_pool,
                            seed=derive_seed(cfg.seed, t, "scorer"), scorer=reuse)
        if scores.scorer is not None:
            if cfg.separation == "leak":
                assert tuple(scores.scorer_train_ids) == tuple(pool.row_ids), "leak wiring broken"
            else:
                assert not set(scores.scorer_train_ids) & set(pool.row_ids), "scorer saw scored rows"
            if scores.scorer is not scorer:
                scorer, scorer_round = scores.scorer, t

        strata = form_strata(ScoredPool.build(pool.row_ids, ap.seqs, pool.rows, scores.values),
                             align_cfg.group_strategy, derive_seed(cfg.seed, t, "strata"))
        rng = np.random.default_rng(derive_seed(cfg.seed, t, "align_steps"))
        opt = AdamW(policy.params.size, lr=align_cfg.lr, weight_decay=align_cfg.weight_decay)
        losses = []
        before = policy.params.copy()
        for _ in range(align_cfg.steps_per_round):
            loss, grad = method_loss(policy, ref, strata, align_cfg, rng, anchor)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                policy.params[:] = before
                raise RunAborted(f"non-finite alignment loss in round {t}", last_ckpt)
            opt.step(policy, grad)
            losses.append(float(loss))

        ckpt_name = f"round_{t}.ckpt"
        rec = RoundRecord(
            round=t, checkpoint=ckpt_name,
            reward=_reward_summary(scores.kind, scores.values),
            metrics={"pool_wasserstein": metrics.wasserstein(train, pool)},
            rejected=int(rejected), loss_first=losses[0], loss_last=losses[-1],
            ref_sha256=params_digest(ref.params),
            scorer_round=scorer_round)
        if rec.ref_sha256 != ref_digest:
            raise RunAborted("reference parameters changed", last_ckpt)
        if out is not None:
            save_checkpoint(out / ckpt_name, policy, model_meta(vocab, schema, round=t))
            last_ckpt = str(out / ckpt_name)
            with open(out / "rounds.jsonl", "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")
        records.append(rec)
        log.info("round %d: reward mean %.4f, pool W1 %.4f, loss %.4f -> %.4f", t,
                 rec.reward["mean"], rec.metrics["pool_wasserstein"], rec.loss_first, rec.loss_last)
        if on_round is not None:
            on_round(t, policy, rec, scores)
    return policy, records


def synthesize(model, vocab, schema, n, seed, retry_cap=20.0, max_len=None, temperature=1.0):
    """Generate an ``n``-row synthetic table (ids start at 0)."""
    return generate_pool(model, n, seed, retry_cap, schema=schema, vocab=vocab,
                         max_len=max_len, id_start=0, temperature=temperature).table
