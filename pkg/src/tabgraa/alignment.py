"""Alignment objectives over policy/reference log-ratios and their gradients.

Every loss here is a function of sequence log-probabilities of the policy
(the reference is frozen), so gradients are assembled as
``sum_i dL/dlogp_i * grad logp_i`` from a single batched forward/backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .lm import LogProbPass, _log_softmax, forward, _pad

METHODS = ("graa", "graa_logsig", "dpo", "npo", "kto")
VARIANTS = ("none", "kl_anchor", "grad_diff")
GROUP_STRATEGIES = ("top_bottom", "random_within_halves", "random_assignment")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def softplus(x):
    """log(1 + e^x), stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _fmean(xs):
    xs = list(xs)
    return math.fsum(xs) / len(xs)


@dataclass(frozen=True)
class AlignmentConfig:
    method: str = "graa"
    variant: str = "none"
    beta: float = 1.0
    group_size: int = 4
    lr: float = 1e-3
    steps_per_round: int = 50
    group_strategy: str = "top_bottom"
    lambda_kl: float = 0.1
    lambda_gd: float = 1.0
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.group_strategy not in GROUP_STRATEGIES:
            raise ValueError(f"unknown group strategy {self.group_strategy!r}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.group_size < 1 or self.steps_per_round < 1:
            raise ValueError("group_size and steps_per_round must be >= 1")


# ------------------------------------------------------------- pools and groups

@dataclass(frozen=True)
class PoolEntry:
    row_id: int
    seq: tuple
    record: tuple
    score: float


@dataclass(frozen=True)
class ScoredPool:
    entries: tuple

    def __post_init__(self):
        ids = [e.row_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("row ids in a scored pool must be unique")

    def __len__(self):
        return len(self.entries)

    @classmethod
    def build(cls, row_ids, seqs, records, scores):
        return cls(tuple(PoolEntry(int(i), tuple(s), tuple(r), float(v))
                         for i, s, r, v in zip(row_ids, seqs, records, scores)))


@dataclass(frozen=True)
class Strata:
    high: tuple
    low: tuple
    thresholds: tuple

    def __post_init__(self):
        if {e.row_id for e in self.high} & {e.row_id for e in self.low}:
            raise ValueError("strata overlap")


@dataclass(frozen=True)
class GroupBatch:
    b_high: tuple
    b_low: tuple

    def __post_init__(self):
        if len(self.b_high) != len(self.b_low) or not self.b_high:
            raise ValueError("groups must be non-empty and of equal size")

    @property
    def B(self):
        return len(self.b_high)


def form_strata(pool: ScoredPool, strategy="top_bottom", seed=0):
    """Top/bottom halves of the reward ranking (odd pools drop the median).

    Ties are broken by ascending row id, earlier ids going to the high side.
    ``random_assignment`` ignores the scores and shuffles membership.
    """
    if len(pool) < 2:
        raise ValueError("pool needs at least two entries")
    if strategy not in GROUP_STRATEGIES:
        raise ValueError(f"unknown group strategy {strategy!r}")
    ranked = sorted(pool.entries, key=lambda e: (-e.score, e.row_id))
    if strategy == "random_assignment":
        perm = np.random.default_rng(seed).permutation(len(ranked))
        ranked = [ranked[i] for i in perm]
    half = len(ranked) // 2
    high, low = tuple(ranked[:half]), tuple(ranked[-half:])
    thresholds = (min(e.score for e in high), max(e.score for e in low))
    return Strata(high, low, thresholds)


def sample_group_batch(strata: Strata, B, rng):
    """Uniform draws without replacement of ``B`` entries from each stratum."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if len(strata.high) < B or len(strata.low) < B:
        raise ValueError(f"strata of sizes {len(strata.high)}/{len(strata.low)} "
                         f"cannot supply groups of size {B}")
    hi = rng.choice(len(strata.high), size=B, replace=False)
    lo = rng.choice(len(strata.low), size=B, replace=False)
    return GroupBatch(tuple(strata.high[i].seq for i in hi), tuple(strata.low[i].seq for i in lo))


def rank_matched_pairs(strata: Strata):
    """Pair the i-th best high entry with the i-th best low entry."""
    return [(h.seq, l.seq) for h, l in zip(strata.high, strata.low)]


# ----------------------------------------------------------------- log-ratios

class _Ratios:
    """Batched policy pass plus reference log-probs for a list of sequences."""

    def __init__(self, policy, ref, seqs, beta):
        self.beta = beta
        self.lp = LogProbPass(policy, seqs)
        ref_lp = ref.log_probs(seqs) if hasattr(ref, "log_probs") else _ref_logps(ref, seqs)
        log_ratio = self.lp.logps - ref_lp
        if not np.all(np.isfinite(log_ratio)):
            raise FloatingPointError("non-finite policy/reference log-ratio")
        self.r = beta * log_ratio

    def grad_from_r(self, dL_dr):
        """Chain rule: ``dL/dlogp_i = beta * dL/dr_i``."""
        return self.lp.grad(self.beta * np.asarray(dL_dr, dtype=np.float64))


def _ref_logps(ref, seqs):
    from .lm import batch_log_probs

    return batch_log_probs(ref, seqs)


def implicit_reward(policy, ref, seq, beta):
    """beta * (log pi(seq) - log pi_ref(seq))."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    from .lm import log_prob

    return beta * (log_prob(policy, seq) - log_prob(ref, seq))


def group_advantage(policy, ref, batch: GroupBatch, beta):
    """Mean implicit reward of the high group minus that of the low group."""
    rt = _Ratios(policy, ref, list(batch.b_high) + list(batch.b_low), beta)
    B = batch.B
    return _fmean(rt.r[:B]) - _fmean(rt.r[B:])


def _group_pass(policy, ref, batch, beta):
    B = batch.B
    rt = _Ratios(policy, ref, list(batch.b_high) + list(batch.b_low), beta)
    delta = _fmean(rt.r[:B]) - _fmean(rt.r[B:])
    # dDelta/dr_i: +1/B for high members, -1/B for low members
    sign = np.r_[np.full(B, 1.0 / B), np.full(B, -1.0 / B)]
    return rt, delta, sign


def graa_loss(policy, ref, batch: GroupBatch, beta):
    """Bounded surrogate sigma(r_low - r_high) and its gradient."""
    rt, delta, sign = _group_pass(policy, ref, batch, beta)
    loss = float(sigmoid(-delta))
    # dL/dDelta = -sigma'(-Delta)
    dL_ddelta = -loss * (1.0 - loss)
    return loss, rt.grad_from_r(dL_ddelta * sign)


def graa_logsig_loss(policy, ref, batch: GroupBatch, beta):
    """Group Bradley-Terry negative log-likelihood -log sigma(Delta)."""
    rt, delta, sign = _group_pass(policy, ref, batch, beta)
    loss = float(softplus(-delta))
    dL_ddelta = -float(sigmoid(-delta))
    return loss, rt.grad_from_r(dL_ddelta * sign)


def dpo_loss(policy, ref, pairs, beta):
    """Mean over pairs of -log sigma(r(y+) - r(y-))."""
    if not pairs:
        raise ValueError("dpo_loss needs at least one pair")
    P = len(pairs)
    rt = _Ratios(policy, ref, [p for p, _ in pairs] + [n for _, n in pairs], beta)
    margin = rt.r[:P] - rt.r[P:]
    loss = _fmean(softplus(-margin))
    dm = -sigmoid(-margin) / P
    return loss, rt.grad_from_r(np.r_[dm, -dm])


def npo_loss(policy, ref, negatives, beta):
    """Mean of -log sigma(-r(y-)) over the negative set."""
    if not negatives:
        raise ValueError("npo_loss needs at least one negative")
    rt = _Ratios(policy, ref, list(negatives), beta)
    loss = _fmean(softplus(rt.r))
    return loss, rt.grad_from_r(sigmoid(rt.r) / len(negatives))


def kto_loss(policy, ref, desirable, undesirable, beta):
    """Prospect-style loss with reference point z0 = batch-mean implicit reward.

    z0 is treated as a constant in the gradient.
    """
    if not desirable or not undesirable:
        raise ValueError("kto_loss needs desirable and undesirable examples")
    nd, nu = len(desirable), len(undesirable)
    rt = _Ratios(policy, ref, list(desirable) + list(undesirable), beta)
    z0 = _fmean(rt.r)
    sd = sigmoid(rt.r[:nd] - z0)
    su = sigmoid(z0 - rt.r[nd:])
    loss = _fmean(1.0 - sd) + _fmean(1.0 - su)
    dr = np.r_[-sd * (1 - sd) / nd, su * (1 - su) / nu]
    return loss, rt.grad_from_r(dr)


# --------------------------------------------------------------------- anchors

def kl_anchor_penalty(policy, ref, anchor, lambda_kl):
    """lambda * mean_y (1/|y|) sum_t KL(pi(.|y<t) || pi_ref(.|y<t))."""
    if not anchor:
        raise ValueError("anchor batch is empty")
    lp = LogProbPass(policy, anchor)
    X, lengths = _pad(lp.seqs, policy.config)
    ref_logits, _ = forward(ref, X, keep=False)
    logq = _log_softmax(ref_logits)
    logp = lp.logsm
    p = np.exp(logp)
    kl = (p * (logp - logq)).sum(-1)                     # (N, T)
    n_tok = (lengths - 1).astype(np.float64)
    per_seq = np.where(lp.mask, kl, 0.0).sum(1) / n_tok
    loss = lambda_kl * _fmean(per_seq)
    w = (lambda_kl / (len(anchor) * n_tok))[:, None] * lp.mask
    dlogits = p * (logp - logq - kl[..., None]) * w[..., None]
    return loss, lp.grad_from_dlogits(dlogits)


def grad_diff_anchor(policy, anchor, lambda_gd):
    """lambda * mean negative sequence log-likelihood of the anchor rows."""
    if not anchor:
        raise ValueError("anchor batch is empty")
    lp = LogProbPass(policy, anchor)
    loss = lambda_gd * _fmean(-lp.logps)
    return loss, lp.grad(np.full(len(anchor), -lambda_gd / len(anchor)))


# ---------------------------------------------------------------------- step

def method_loss(policy, ref, strata: Strata, cfg: AlignmentConfig, rng, anchor=None):
    """Loss and gradient of one configured alignment step on ``strata``.

    GRAA samples B-groups; DPO samples B pairs (rank-matched for
    ``top_bottom``, randomly matched otherwise); NPO samples B negatives;
    KTO samples B desirable and B undesirable rows.
    """
    B = cfg.group_size
    if cfg.method in ("graa", "graa_logsig"):
        batch = sample_group_batch(strata, B, rng)
        fn = graa_loss if cfg.method == "graa" else graa_logsig_loss
        loss, grad = fn(policy, ref, batch, cfg.beta)
    elif cfg.method == "dpo":
        if cfg.group_strategy == "top_bottom":
            pairs = rank_matched_pairs(strata)
            pick = rng.choice(len(pairs), size=min(B, len(pairs)), replace=False)
            pairs = [pairs[i] for i in pick]
        else:
            batch = sample_group_batch(strata, B, rng)
            pairs = list(zip(batch.b_high, batch.b_low))
        loss, grad = dpo_loss(policy, ref, pairs, cfg.beta)
    elif cfg.method == "npo":
        pick = rng.choice(len(strata.low), size=min(B, len(strata.low)), replace=False)
        loss, grad = npo_loss(policy, ref, [strata.low[i].seq for i in pick], cfg.beta)
    else:
        batch = sample_group_batch(strata, B, rng)
        loss, grad = kto_loss(policy, ref, list(batch.b_high), list(batch.b_low), cfg.beta)

    if cfg.variant != "none":
        if not anchor:
            raise ValueError(f"variant {cfg.variant!r} needs an anchor batch")
        if cfg.variant == "kl_anchor":
            extra, g = kl_anchor_penalty(policy, ref, anchor, cfg.lambda_kl)
        else:
            extra, g = grad_diff_anchor(policy, anchor, cfg.lambda_gd)
        loss, grad = loss + extra, grad + g
    return loss, grad
