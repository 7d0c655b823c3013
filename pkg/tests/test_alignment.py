import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabgraa.alignment import (AlignmentConfig, GroupBatch, ScoredPool, dpo_loss, form_strata,
                               graa_logsig_loss, graa_loss, grad_diff_anchor, group_advantage,
                               implicit_reward, kl_anchor_penalty, kto_loss, method_loss,
                               npo_loss, rank_matched_pairs, sample_group_batch, sigmoid, softplus)
from tabgraa.lm import ModelConfig, PolicyModel, ReferenceSnapshot, log_prob, log_prob_grad
from tabgraa.sft import batch_loss_and_grad

from torch_ref import torch_logps

LN2 = math.log(2.0)


def _seqs(seed, n, vocab=9):
    rng = np.random.default_rng(seed)
    return [(0,) + tuple(int(t) for t in rng.integers(2, vocab, int(rng.integers(2, 7)))) + (1,)
            for _ in range(n)]


@pytest.fixture(scope="module")
def models():
    cfg = ModelConfig(vocab_size=9, d_model=8, n_layers=1, n_heads=2, context_limit=12, init_std=0.3)
    base = PolicyModel.init(cfg, seed=0)
    ref = ReferenceSnapshot(base)
    pol = base.copy()
    pol.params += 0.05 * np.random.default_rng(1).normal(size=pol.params.size)
    return pol, ref, base


def _r(pol, ref, seqs, beta=1.0):
    return np.array([implicit_reward(pol, ref, s, beta) for s in seqs])


# -------------------------------------------------------------- scalar values

def test_scalar_reference_values():
    assert float(sigmoid(-0.8)) == pytest.approx(0.310026, abs=1e-6)
    assert float(softplus(0.8)) == pytest.approx(1.171101, abs=1e-6)
    assert float(softplus(-0.8)) == pytest.approx(0.371101, abs=1e-6)
    assert 2 * (1 - float(sigmoid(1.0))) == pytest.approx(0.537883, abs=1e-6)
    assert float(softplus(-800.0)) == 0.0 and float(softplus(800.0)) == 800.0


def test_implicit_reward(models):
    pol, ref, base = models
    s = _seqs(0, 1)[0]
    assert implicit_reward(base, ref, s, 1.0) == 0.0
    r1 = implicit_reward(pol, ref, s, 1.0)
    assert r1 == pytest.approx(log_prob(pol, s) - log_prob(ref, s), abs=1e-12)
    assert implicit_reward(pol, ref, s, 2.0) == pytest.approx(2 * r1, abs=1e-12)
    with pytest.raises(ValueError):
        implicit_reward(pol, ref, s, 0.0)


def test_losses_at_reference(models):
    _, ref, base = models
    s = _seqs(2, 8)
    batch = GroupBatch(tuple(s[:4]), tuple(s[4:]))
    assert graa_loss(base, ref, batch, 1.0)[0] == 0.5
    assert abs(graa_logsig_loss(base, ref, batch, 1.0)[0] - LN2) < 1e-12
    assert abs(dpo_loss(base, ref, list(zip(s[:4], s[4:])), 1.0)[0] - LN2) < 1e-12
    assert abs(npo_loss(base, ref, s[4:], 1.0)[0] - LN2) < 1e-12
    assert abs(kto_loss(base, ref, s[:4], s[4:], 1.0)[0] - 1.0) < 1e-12


def test_losses_match_definitions(models):
    pol, ref, _ = models
    s = _seqs(3, 6)
    beta = 0.7
    r = _r(pol, ref, s, beta)
    batch = GroupBatch(tuple(s[:3]), tuple(s[3:]))
    delta = r[:3].mean() - r[3:].mean()
    assert group_advantage(pol, ref, batch, beta) == pytest.approx(delta, abs=1e-12)
    assert graa_loss(pol, ref, batch, beta)[0] == pytest.approx(1 / (1 + math.exp(delta)), abs=1e-12)
    assert graa_logsig_loss(pol, ref, batch, beta)[0] == pytest.approx(math.log1p(math.exp(-delta)), abs=1e-12)
    m = r[:3] - r[3:]
    assert dpo_loss(pol, ref, list(zip(s[:3], s[3:])), beta)[0] == pytest.approx(np.mean(np.log1p(np.exp(-m))), abs=1e-12)
    assert npo_loss(pol, ref, s[3:], beta)[0] == pytest.approx(np.mean(np.log1p(np.exp(r[3:]))), abs=1e-12)
    z0 = r.mean()
    kto = np.mean(1 - 1 / (1 + np.exp(-(r[:3] - z0)))) + np.mean(1 - 1 / (1 + np.exp(-(z0 - r[3:]))))
    assert kto_loss(pol, ref, s[:3], s[3:], beta)[0] == pytest.approx(kto, abs=1e-12)


def test_singleton_graa_is_pairwise(models):
    pol, ref, _ = models
    s = _seqs(4, 2)
    r = _r(pol, ref, s)
    loss = graa_loss(pol, ref, GroupBatch((s[0],), (s[1],)), 1.0)[0]
    assert abs(loss - float(sigmoid(r[1] - r[0]))) <= 1e-12


def test_dpo_swap_antisymmetry(models):
    pol, ref, _ = models
    s = _seqs(5, 2)
    m = _r(pol, ref, s)
    fwd = dpo_loss(pol, ref, [(s[0], s[1])], 1.0)[0]
    rev = dpo_loss(pol, ref, [(s[1], s[0])], 1.0)[0]
    d = m[0] - m[1]
    assert fwd == pytest.approx(float(softplus(-d)), abs=1e-12)
    assert rev == pytest.approx(float(softplus(d)), abs=1e-12)
    assert fwd - rev == pytest.approx(-d, abs=1e-12)  # softplus(-x) - softplus(x) = -x


def test_npo_monotone_in_negative_probability(models):
    _, ref, base = models
    neg = [_seqs(6, 1)[0]]
    losses = []
    for c in (0.0, 0.5, 1.0):
        m = base.copy()
        # push log-prob of the negative down along its own gradient
        _, g = log_prob_grad(base, neg[0])
        m.params -= c * g / np.linalg.norm(g) * 0.5
        losses.append(npo_loss(m, ref, neg, 1.0)[0])
    assert losses[0] > losses[1] > losses[2]


def test_kto_translation_invariant():
    # shifting every implicit reward leaves the loss unchanged (z0 shifts too)
    r = np.array([0.3, -1.2, 0.5, 2.0])

    def kto(r):
        z0 = r.mean()
        return np.mean(1 - sigmoid(r[:2] - z0)) + np.mean(1 - sigmoid(z0 - r[2:]))

    assert abs(kto(r) - kto(r + 3.7)) < 1e-12


# -------------------------------------------------------------------- gradients

def _fd_check(fn, model, n=25, eps=1e-5, seed=0):
    _, g = fn(model)
    idx = np.random.default_rng(seed).choice(model.params.size, n, replace=False)
    worst = 0.0
    for j in idx:
        m = model.copy()
        m.params[j] += eps
        up = fn(m)[0]
        m.params[j] -= 2 * eps
        dn = fn(m)[0]
        fd = (up - dn) / (2 * eps)
        worst = max(worst, abs(fd - g[j]) / max(abs(fd), abs(g[j]), 1e-7))
    return worst


@pytest.mark.parametrize("name", ["graa", "graa_logsig", "dpo", "npo", "kto", "kl", "gd"])
def test_gradients_match_finite_differences(models, name):
    pol, ref, _ = models
    s = _seqs(7, 6)
    batch = GroupBatch(tuple(s[:3]), tuple(s[3:]))
    fns = {
        "graa": lambda m: graa_loss(m, ref, batch, 2.0),
        "graa_logsig": lambda m: graa_logsig_loss(m, ref, batch, 2.0),
        "dpo": lambda m: dpo_loss(m, ref, list(zip(s[:3], s[3:])), 2.0),
        "npo": lambda m: npo_loss(m, ref, s[3:], 2.0),
        "kl": lambda m: kl_anchor_penalty(m, ref, s, 0.1),
        "gd": lambda m: grad_diff_anchor(m, s, 1.0),
    }
    if name == "kto":
        # z0 is a detached constant, so compare against a loss with z0 frozen
        r0 = _r(pol, ref, s, 2.0)
        z0 = r0.mean()
        _, g = kto_loss(pol, ref, s[:3], s[3:], 2.0)

        def frozen(m):
            r = _r(m, ref, s, 2.0)
            return (float(np.mean(1 - sigmoid(r[:3] - z0)) + np.mean(1 - sigmoid(z0 - r[3:]))), g)

        assert _fd_check(frozen, pol) < 1e-5
        return
    assert _fd_check(fns[name], pol) < 1e-5


def test_graa_gradient_matches_torch(models):
    torch = pytest.importorskip("torch")
    pol, ref, _ = models
    s = _seqs(8, 8)
    batch = GroupBatch(tuple(s[:4]), tuple(s[4:]))
    beta = 1.5
    lps, P = torch_logps(pol, s)
    ref_lp = torch.tensor([log_prob(ref, x) for x in s], dtype=torch.float64)
    r = beta * (lps - ref_lp)
    loss = torch.sigmoid(r[4:].mean() - r[:4].mean())
    loss.backward()
    want = np.concatenate([P[k].grad.numpy().ravel() for k, _ in pol.config.param_shapes()])
    got_loss, got = graa_loss(pol, ref, batch, beta)
    assert got_loss == pytest.approx(loss.item(), abs=1e-14)
    rel = np.linalg.norm(got - want) / np.linalg.norm(want)
    assert rel < 1e-8


def test_grad_diff_matches_sft_loss(models):
    pol, _, _ = models
    s = _seqs(9, 5)
    gd, g1 = grad_diff_anchor(pol, s, 1.0)
    sft, g2 = batch_loss_and_grad(pol, s)
    assert gd == pytest.approx(sft, abs=1e-12)
    np.testing.assert_allclose(g1, g2, atol=1e-14)
    z, gz = grad_diff_anchor(pol, s, 0.0)
    assert z == 0.0 and not np.any(gz)
    lp = log_prob(pol, s[0])
    assert grad_diff_anchor(pol, s[:1], 1.0)[0] == pytest.approx(-lp, abs=1e-12)


def test_kl_anchor_properties(models):
    pol, ref, base = models
    s = _seqs(10, 4)
    zero, g = kl_anchor_penalty(base, ref, s, 0.1)
    assert zero == pytest.approx(0.0, abs=1e-15) and np.allclose(g, 0.0, atol=1e-14)
    a = kl_anchor_penalty(pol, ref, s, 0.1)[0]
    b = kl_anchor_penalty(pol, ref, s, 0.3)[0]
    assert a > 0 and b == pytest.approx(3 * a, rel=1e-12)
    with pytest.raises(ValueError):
        kl_anchor_penalty(pol, ref, [], 0.1)


def test_empty_inputs_raise(models):
    pol, ref, _ = models
    with pytest.raises(ValueError):
        dpo_loss(pol, ref, [], 1.0)
    with pytest.raises(ValueError):
        npo_loss(pol, ref, [], 1.0)
    with pytest.raises(ValueError):
        kto_loss(pol, ref, _seqs(0, 1), [], 1.0)
    with pytest.raises(ValueError):
        GroupBatch((), ())


# ------------------------------------------------------------ pools and strata

def _pool(scores, ids=None):
    ids = ids if ids is not None else range(len(scores))
    return ScoredPool.build(ids, [(0, 2 + i % 5, 1) for i in range(len(scores))],
                            [(float(i),) for i in range(len(scores))], scores)


def test_form_strata_top_bottom():
    st_ = form_strata(_pool([0.4, 0.9, 0.1, 0.7]))
    assert [e.score for e in st_.high] == [0.9, 0.7]
    assert [e.score for e in st_.low] == [0.4, 0.1]
    odd = form_strata(_pool([0.5, 0.2, 0.8, 0.1, 0.9]))
    assert 0.5 not in [e.score for e in odd.high + odd.low]


def test_form_strata_ties_by_row_id():
    st_ = form_strata(_pool([0.5, 0.5, 0.5, 0.5], ids=[7, 3, 9, 1]))
    assert [e.row_id for e in st_.high] == [1, 3]
    assert [e.row_id for e in st_.low] == [7, 9]


def test_random_assignment_ignores_scores():
    p = _pool(list(np.linspace(0, 1, 20)))
    a = form_strata(p, "random_assignment", seed=3)
    b = form_strata(p, "random_assignment", seed=3)
    assert a == b
    assert {e.row_id for e in a.high} != set(range(10, 20))
    c = form_strata(p, "random_assignment", seed=4)
    assert {e.row_id for e in a.high} != {e.row_id for e in c.high}


def test_form_strata_errors():
    with pytest.raises(ValueError):
        form_strata(_pool([0.3]))
    with pytest.raises(ValueError):
        ScoredPool.build([1, 1], [(0, 2, 1)] * 2, [(0.0,)] * 2, [0.1, 0.2])


def test_sample_group_batch():
    st_ = form_strata(_pool(list(np.linspace(0, 1, 8))))
    whole = sample_group_batch(st_, 4, 0)
    assert sorted(whole.b_high) == sorted(e.seq for e in st_.high)
    assert sample_group_batch(st_, 2, 5) == sample_group_batch(st_, 2, 5)
    assert sample_group_batch(st_, 1, 0).B == 1
    with pytest.raises(ValueError):
        sample_group_batch(st_, 5, 0)


def test_rank_matched_pairs():
    st_ = form_strata(_pool([0.9, 0.8, 0.2, 0.1]))
    pairs = rank_matched_pairs(st_)
    assert pairs == [(st_.high[0].seq, st_.low[0].seq), (st_.high[1].seq, st_.low[1].seq)]


def test_method_loss_dispatch(models):
    pol, ref, base = models
    s = _seqs(11, 8)
    strata = form_strata(ScoredPool.build(range(8), s, [(0.0,)] * 8, np.linspace(0, 1, 8)))
    expect = {"graa": 0.5, "graa_logsig": LN2, "dpo": LN2, "npo": LN2, "kto": 1.0}
    for method, val in expect.items():
        cfg = AlignmentConfig(method=method, group_size=2)
        loss, g = method_loss(base, ref, strata, cfg, np.random.default_rng(0))
        assert abs(loss - val) < 1e-12 and g.shape == base.params.shape
    cfg = AlignmentConfig(variant="grad_diff", group_size=2)
    with pytest.raises(ValueError):
        method_loss(pol, ref, strata, cfg, np.random.default_rng(0))
    loss, _ = method_loss(pol, ref, strata, cfg, np.random.default_rng(0), anchor=s[:2])
    assert loss > 1.0


def test_config_validation():
    for bad in ({"method": "ppo"}, {"beta": 0.0}, {"group_size": 0}, {"variant": "x"},
                {"group_strategy": "x"}, {"steps_per_round": 0}):
        with pytest.raises(ValueError):
            AlignmentConfig(**bad)


# ---------------------------------------------------------------- invariances

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_group_permutation_invariance(models, seed, B):
    pol, ref, _ = models
    s = _seqs(seed, 2 * B)
    hi, lo = s[:B], s[B:]
    perm = np.random.default_rng(seed).permutation(B)
    a = graa_loss(pol, ref, GroupBatch(tuple(hi), tuple(lo)), 1.0)
    b = graa_loss(pol, ref, GroupBatch(tuple(hi[i] for i in perm), tuple(lo[i] for i in perm[::-1])), 1.0)
    assert a[0] == b[0]
    np.testing.assert_allclose(a[1], b[1], rtol=0, atol=1e-10)
    pairs = list(zip(hi, lo))
    c = dpo_loss(pol, ref, pairs, 1.0)
    d = dpo_loss(pol, ref, [pairs[i] for i in perm], 1.0)
    assert abs(c[0] - d[0]) < 1e-12
    np.testing.assert_allclose(c[1], d[1], rtol=0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_jensen_gap_nonnegative(margins):
    # mean_i -log sigma(m_i) >= -log sigma(mean m) by convexity of softplus(-x)
    m = np.array(margins)
    gap = float(np.mean(softplus(-m)) - softplus(-m.mean()))
    assert gap >= -1e-12
