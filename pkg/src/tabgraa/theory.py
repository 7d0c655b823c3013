"""Numerical checks of the fixed-round GRAA surrogate's stability properties.

All checks treat the pool, scores and strata as frozen and differentiate only
through the policy log-probabilities.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .alignment import (GroupBatch, ScoredPool, Strata, dpo_loss, form_strata, graa_logsig_loss,
                        graa_loss, rank_matched_pairs, sample_group_batch, sigmoid, softplus)
from .lm import LogProbPass, ModelConfig, PolicyModel, ReferenceSnapshot, batch_log_probs, log_prob

GRAD_BOUND_TOL = 1e-9
SINGLETON_TOL = 1e-12
JENSEN_TOL = 1e-10
SLOPE_BAND = (-1.2, -0.8)


class DegenerateStratum(ValueError):
    """All per-sequence gradients in the stratum coincide."""


def per_sequence_grads(model, seqs):
    """Rows are ``grad log pi(seq_i)``, shape ``(len(seqs), n_params)``."""
    lp = LogProbPass(model, seqs)
    n = len(seqs)
    out = np.empty((n, model.params.size))
    for i in range(n):
        w = np.zeros(n)
        w[i] = 1.0
        out[i] = lp.grad(w)
    return out


# ------------------------------------------------------------ bounded gradient

def grad_bound_ratio(policy, ref, batch: GroupBatch, beta):
    """``||grad L_GRAA|| / (beta * G / 2)`` with G the batch's max per-sequence norm."""
    _, g = graa_loss(policy, ref, batch, beta)
    seqs = list(batch.b_high) + list(batch.b_low)
    G = float(np.linalg.norm(per_sequence_grads(policy, seqs), axis=1).max())
    bound = beta * G / 2.0
    return float(np.linalg.norm(g)) / bound if bound > 0 else 0.0


def check_grad_bound(policy, ref, strata: Strata, beta, trials, B=4, seed=0):
    """Max bound ratio over ``trials`` random group batches."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    ratios = [grad_bound_ratio(policy, ref, sample_group_batch(strata, B, rng), beta)
              for _ in range(trials)]
    return {"max_grad_norm_ratio": max(ratios), "trials": trials, "B": B, "beta": beta,
            "passed": max(ratios) <= 1.0 + GRAD_BOUND_TOL}


# ------------------------------------------------------------- variance scaling

def group_mean_variances(grads, B_grid, reps, rng):
    """Trace variance of the mean of ``B`` rows drawn with replacement.

    Works on the Gram matrix: a group mean is ``c @ grads`` for a count
    vector ``c``, so squared distances only need ``grads @ grads.T``.
    """
    n = grads.shape[0]
    K = grads @ grads.T
    out = []
    for B in B_grid:
        C = np.zeros((reps, n))
        idx = rng.integers(0, n, size=(reps, B))
        for r in range(reps):
            np.add.at(C[r], idx[r], 1.0 / B)
        D = C - C.mean(0)
        # unbiased trace of the empirical covariance
        out.append(float(np.einsum("ij,jk,ik->", D, K, D)) / (reps - 1))
    return np.array(out)


def check_variance_scaling(policy, ref, strata: Strata, beta, B_grid=(1, 2, 4, 8, 16, 32),
                           reps=400, seed=0):
    """Least-squares slope of log trace-variance of ``grad r_high`` against log B."""
    seqs = [e.seq for e in strata.high]
    grads = beta * per_sequence_grads(policy, seqs)
    centered = grads - grads.mean(0)
    if float(np.abs(centered).max()) == 0.0:
        raise DegenerateStratum("every sequence in the stratum has the same gradient")
    var = group_mean_variances(grads, B_grid, reps, np.random.default_rng(seed))
    slope = float(np.polyfit(np.log(B_grid), np.log(var), 1)[0])
    return {"variance_slope": slope, "B_grid": list(B_grid), "variances": var.tolist(),
            "reps": reps, "passed": SLOPE_BAND[0] <= slope <= SLOPE_BAND[1]}


# ------------------------------------------------------------- singleton limit

def singleton_gap(policy, ref, pos, neg, beta):
    """|GRAA(B=1) - sigma(r(y-) - r(y+))| with the pairwise side from scalar log-probs."""
    loss, _ = graa_loss(policy, ref, GroupBatch((pos,), (neg,)), beta)
    r_pos = beta * (log_prob(policy, pos) - log_prob(ref, pos))
    r_neg = beta * (log_prob(policy, neg) - log_prob(ref, neg))
    return abs(loss - float(sigmoid(r_neg - r_pos)))


def check_singleton_limit(policy, ref, strata: Strata, beta, trials, seed=0):
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    gaps = []
    for _ in range(trials):
        b = sample_group_batch(strata, 1, rng)
        gaps.append(singleton_gap(policy, ref, b.b_high[0], b.b_low[0], beta))
    return {"singleton_gap": max(gaps), "trials": trials, "passed": max(gaps) <= SINGLETON_TOL}


# ------------------------------------------------------------------ Jensen gap

def jensen_gap(policy, ref, pairs, beta):
    """DPO loss minus the group log-sigmoid loss on the same pairs."""
    l_dpo, _ = dpo_loss(policy, ref, pairs, beta)
    batch = GroupBatch(tuple(p for p, _ in pairs), tuple(n for _, n in pairs))
    l_grp, _ = graa_logsig_loss(policy, ref, batch, beta)
    return l_dpo - l_grp


def jensen_gap_from_margins(margins):
    """mean(-log sigma(d_i)) - (-log sigma(mean d_i)) for scalar margins."""
    m = np.asarray(margins, dtype=np.float64)
    return float(math.fsum(softplus(-m)) / m.size - softplus(-math.fsum(m) / m.size))


def check_jensen_gap(policy, ref, strata: Strata, beta, B, trials, seed=0):
    """Min gap over random rank-matched batches, plus an equal-margin case."""
    if B < 1:
        raise ValueError("B must be >= 1")
    pairs = rank_matched_pairs(strata)
    rng = np.random.default_rng(seed)
    gaps = []
    for _ in range(trials):
        pick = rng.choice(len(pairs), size=min(B, len(pairs)), replace=False)
        gaps.append(jensen_gap(policy, ref, [pairs[i] for i in pick], beta))
    # equal margins: one pair repeated B times
    eq = abs(jensen_gap(policy, ref, [pairs[0]] * B, beta))
    return {"jensen_min_gap": min(gaps), "equal_margin_gap": eq, "trials": trials, "B": B,
            "passed": min(gaps) >= -JENSEN_TOL and eq <= JENSEN_TOL}


# ------------------------------------------------------------------- harness

@dataclass
class TheoryReport:
    max_grad_norm_ratio: float
    variance_slope: float
    singleton_gap: float
    jensen_min_gap: float
    passed: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @property
    def all_passed(self):
        return all(self.passed.values())


def random_setting(seed=0, vocab=12, d_model=16, n_layers=2, n_heads=2, pool=64,
                   min_len=4, max_len=10, drift=0.3):
    """A small random policy/reference pair and reward strata over random sequences.

    Token 0 is BOS and token 1 is EOS; bodies draw from the remaining ids.
    The policy is the reference plus Gaussian noise of scale ``drift``.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=vocab, d_model=d_model, n_layers=n_layers, n_heads=n_heads,
                      context_limit=max_len + 2, init_std=0.2)
    base = PolicyModel.init(cfg, int(rng.integers(2**31)))
    ref = ReferenceSnapshot(base)
    policy = base.copy()
    policy.params += rng.normal(0.0, drift, policy.params.size)
    seqs = set()
    while len(seqs) < pool:
        L = int(rng.integers(min_len, max_len + 1))
        seqs.add((0,) + tuple(int(t) for t in rng.integers(2, vocab, size=L)) + (1,))
    seqs = sorted(seqs)
    scores = rng.random(pool)
    strata = form_strata(ScoredPool.build(range(pool), seqs, [()] * pool, scores), "top_bottom")
    return policy, ref, strata


def run_checks(seed=0, betas=(0.1, 1.0, 10.0), group_sizes=(1, 4, 8), bound_trials=100,
               variance_reps=400, singleton_trials=50, jensen_trials=100, jensen_B=8):
    """Run every check on fresh random settings and collect a :class:`TheoryReport`.

    The bound check draws a new random policy for every (B, beta) cell so the
    trials also vary the parameters.
    """
    ss = np.random.SeedSequence(seed)
    kids = iter(ss.spawn(len(betas) * len(group_sizes) + 4))
    details, ratios = {}, []
    per_cell = max(1, math.ceil(bound_trials / (len(betas) * len(group_sizes))))
    for beta in betas:
        for B in group_sizes:
            k = next(kids)
            policy, ref, strata = random_setting(int(k.generate_state(1)[0]))
            res = check_grad_bound(policy, ref, strata, beta, per_cell, B, int(k.generate_state(2)[1]))
            details[f"bound_B{B}_beta{beta}"] = res
            ratios.append(res["max_grad_norm_ratio"])

    k = next(kids)
    policy, ref, strata = random_setting(int(k.generate_state(1)[0]))
    var = check_variance_scaling(policy, ref, strata, 1.0, reps=variance_reps,
                                 seed=int(k.generate_state(2)[1]))
    k = next(kids)
    policy, ref, strata = random_setting(int(k.generate_state(1)[0]))
    single = check_singleton_limit(policy, ref, strata, 1.0, singleton_trials,
                                   int(k.generate_state(2)[1]))
    k = next(kids)
    policy, ref, strata = random_setting(int(k.generate_state(1)[0]))
    jen = check_jensen_gap(policy, ref, strata, 1.0, jensen_B, jensen_trials,
                           int(k.generate_state(2)[1]))
    details.update(variance=var, singleton=single, jensen=jen)
    max_ratio = max(ratios)
    return TheoryReport(
        max_grad_norm_ratio=max_ratio, variance_slope=var["variance_slope"],
        singleton_gap=single["singleton_gap"], jensen_min_gap=jen["jensen_min_gap"],
        passed={"grad_bound": max_ratio <= 1.0 + GRAD_BOUND_TOL, "variance": var["passed"],
                "singleton": single["passed"], "jensen": jen["passed"]},
        details=details)
