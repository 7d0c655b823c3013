"""Row-level reward signals and the real-vs-synthetic scorer.

Rewards only rank generated rows; nothing here is differentiated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dataset import CATEGORICAL, DataError
from .features import Encoder, nearest_distances
from .forest import TreeEnsemble

log = logging.getLogger(__name__)

REWARD_KINDS = ("cls", "dcr", "target", "forget", "leak", "random")


@dataclass(frozen=True)
class RewardScore:
    value: float
    kind: str


@dataclass(frozen=True)
class PoolScores:
    """Rewards for every row of a pool, aligned with ``row_ids``."""
    row_ids: tuple
    values: np.ndarray
    kind: str
    scorer_train_ids: tuple = ()
    degenerate: bool = False
    scorer: object = None

    def __getitem__(self, i):
        return RewardScore(float(self.values[i]), self.kind)


@dataclass
class Scorer:
    """Fitted real(=1) vs synthetic(=0) ensemble and its feature encoder."""
    ensemble: TreeEnsemble
    encoder: Encoder
    real_ids: tuple
    synth_ids: tuple

    def prob_real(self, table):
        proba = self.ensemble.predict_proba(self.encoder.transform(table))
        return proba[:, list(self.ensemble.classes_).index(1)]


@dataclass(frozen=True)
class ScorerConfig:
    n_trees: int = 100
    max_depth: Optional[int] = None
    seed: int = 0
    balance: bool = True


def train_scorer(real, synth, cfg: ScorerConfig = ScorerConfig(), encoder=None):
    if real.schema != synth.schema:
        raise DataError("schema mismatch between real and synthetic tables")
    if len(real) == 0 or len(synth) == 0:
        raise DataError("scorer needs both real and synthetic rows (single-class input)")
    encoder = encoder or Encoder(real)
    if cfg.balance and len(real) > len(synth):
        # equal class sizes so that prob_real = 0.5 means matched densities
        keep = np.sort(np.random.default_rng(cfg.seed).choice(len(real), len(synth), replace=False))
        real = real.subset(keep)
    X = np.vstack([encoder.transform(real), encoder.transform(synth)])
    y = np.r_[np.ones(len(real), dtype=np.int64), np.zeros(len(synth), dtype=np.int64)]
    ens = TreeEnsemble(n_trees=cfg.n_trees, criterion="gini", max_depth=cfg.max_depth,
                       seed=cfg.seed).fit(X, y)
    return Scorer(ens, encoder, real.row_ids, synth.row_ids)


def cls_reward_from_prob(phi):
    """1 - 2|0.5 - phi|: 1 when the scorer is maximally unsure."""
    return 1.0 - 2.0 * np.abs(0.5 - np.asarray(phi, dtype=np.float64))


def reward_cls(scorer, row):
    from .dataset import Table

    t = Table(scorer.encoder.schema, (tuple(row),), (0,))
    return RewardScore(float(cls_reward_from_prob(scorer.prob_real(t))[0]), "cls")


# ------------------------------------------------------------------------- DCR

@dataclass(frozen=True)
class DcrStats:
    d_min: float
    d_max: float

    def __post_init__(self):
        if self.d_min > self.d_max:
            raise ValueError("d_min must not exceed d_max")

    @property
    def degenerate(self):
        return self.d_max == self.d_min

    @classmethod
    def from_distances(cls, d):
        d = np.asarray(d, dtype=np.float64)
        return cls(float(d.min()), float(d.max()))


def dcr_distances(pool, reference, encoder=None):
    if len(reference) == 0:
        raise DataError("reference table is empty")
    if pool.schema != reference.schema:
        raise DataError("schema mismatch")
    encoder = encoder or Encoder(reference)
    return nearest_distances(encoder.transform(pool), encoder.transform(reference))


def dcr_reward_from_distance(d, stats: DcrStats):
    d = np.asarray(d, dtype=np.float64)
    if stats.degenerate:
        return np.ones_like(d)
    return np.clip(1.0 - (d - stats.d_min) / (stats.d_max - stats.d_min), 0.0, 1.0)


def reward_dcr(row, reference, stats, encoder=None):
    from .dataset import Table

    t = Table(reference.schema, (tuple(row),), (0,))
    d = dcr_distances(t, reference, encoder)
    return RewardScore(float(dcr_reward_from_distance(d, stats)[0]), "dcr")


def reward_target(row, target_set, mode="dcr", stats=None, scorer=None, encoder=None):
    """Base reward with the reference set swapped for a target-domain table.

    ``mode="cls"`` needs a ``scorer`` trained with ``target_set`` as the real
    class; ``mode="dcr"`` needs ``stats`` over the current pool.
    """
    if len(target_set) == 0:
        raise DataError("target set is empty")
    if mode == "cls":
        if scorer is None:
            raise ValueError("cls target reward needs a scorer fitted on the target set")
        return RewardScore(reward_cls(scorer, row).value, "target")
    if mode == "dcr":
        return RewardScore(reward_dcr(row, target_set, stats, encoder).value, "target")
    raise ValueError(f"unknown target mode {mode!r}")


# ---------------------------------------------------------------------- forget

@dataclass(frozen=True)
class ForgetRegion:
    """Conjunction of per-column constraints.

    ``constraints`` maps column name to ``(lo, hi)`` (inclusive, either may be
    None) for numerics or to a collection of levels for categoricals. An
    empty mapping covers the whole space.
    """
    constraints: dict = field(default_factory=dict)

    def contains(self, row, schema):
        for name, cons in self.constraints.items():
            c = schema[name]
            v = row[schema.index(name)]
            if c.kind == CATEGORICAL:
                if v not in cons:
                    return False
            else:
                lo, hi = cons
                if (lo is not None and v < lo) or (hi is not None and v > hi):
                    return False
        return True

    @classmethod
    def parse(cls, items):
        """From strings like ``"x0 in [10, 20]"`` or ``"c0 in {v1, v2}"``."""
        out = {}
        for s in items:
            name, _, spec = s.partition(" in ")
            name, spec = name.strip(), spec.strip()
            if spec.startswith("[") and spec.endswith("]"):
                lo, hi = (p.strip() for p in spec[1:-1].split(","))
                out[name] = (float(lo) if lo else None, float(hi) if hi else None)
            elif spec.startswith("{") and spec.endswith("}"):
                out[name] = frozenset(p.strip() for p in spec[1:-1].split(",") if p.strip())
            else:
                raise ValueError(f"cannot parse forget constraint {s!r}")
        return cls(out)


def reward_forget(row, region, schema):
    return RewardScore(-1.0 if region.contains(row, schema) else 1.0, "forget")


# ------------------------------------------------------------------ pool scoring

@dataclass(frozen=True)
class RewardSpec:
    kind: str = "cls"
    target: object = None          # Table, for kind == "target"
    target_mode: str = "dcr"
    forget: Optional[ForgetRegion] = None
    scorer: ScorerConfig = ScorerConfig()

    def __post_init__(self):
        if self.kind not in ("cls", "dcr", "target", "forget", "random"):
            raise ValueError(f"unknown reward kind {self.kind!r}")


def score_pool(pool, spec: RewardSpec, real, separation="separated", scorer_pool=None,
               seed=0, encoder=None, scorer=None):
    """Score every row of ``pool``.

    In ``separated`` mode a learned scorer is trained on ``scorer_pool``
    (row ids disjoint from ``pool``). ``leak`` mode trains it on ``pool``
    itself; this is an ablation and is tagged ``kind="leak"``. A pre-fitted
    ``scorer`` (fixed-scorer strategy) bypasses training.
    """
    if separation not in ("separated", "leak"):
        raise ValueError(f"unknown separation mode {separation!r}")
    encoder = encoder or Encoder(real)
    ids = pool.row_ids
    learned = spec.kind == "cls" or (spec.kind == "target" and spec.target_mode == "cls")

    if spec.kind == "random":
        vals = np.random.default_rng(seed).random(len(pool))
        return PoolScores(ids, vals, "random")
    if spec.kind == "forget":
        vals = np.array([reward_forget(r, spec.forget, pool.schema).value for r in pool.rows])
        return PoolScores(ids, vals, "forget")

    reference = spec.target if spec.kind == "target" else real
    if reference is None or len(reference) == 0:
        raise DataError("reward reference table is empty")

    if learned:
        if scorer is None:
            if separation == "leak":
                log.warning("LEAK MODE: scorer trained on the rows it scores (ablation only)")
                train_pool = pool
            else:
                if scorer_pool is None:
                    raise ValueError("separated mode needs a scorer pool")
                overlap = set(scorer_pool.row_ids) & set(ids)
                if overlap:
                    raise ValueError(f"scorer pool and scored pool share {len(overlap)} row ids")
                train_pool = scorer_pool
            cfg = replace(spec.scorer, seed=seed)
            scorer = train_scorer(reference, train_pool, cfg, encoder)
        train_ids = scorer.synth_ids
        vals = cls_reward_from_prob(scorer.prob_real(pool))
        kind = "leak" if separation == "leak" else spec.kind
        return PoolScores(ids, vals, kind, train_ids, scorer=scorer)

    d = dcr_distances(pool, reference, encoder)
    stats = DcrStats.from_distances(d)
    if stats.degenerate:
        log.warning("DCR distances are all equal; assigning reward 1 to every row")
    vals = dcr_reward_from_distance(d, stats)
    kind = spec.kind
    return PoolScores(ids, vals, kind, degenerate=stats.degenerate)
