import numpy as np
import pytest

from tabgraa.dataset import CATEGORICAL, NUMERIC, Column, DataError, Schema, Table, ToySpec, make_toy
from tabgraa.forest import roc_auc
from tabgraa.rewards import (DcrStats, ForgetRegion, RewardSpec, ScorerConfig, cls_reward_from_prob,
                             dcr_reward_from_distance, reward_cls, reward_dcr, reward_forget,
                             reward_target, score_pool, train_scorer)

SCHEMA = Schema((Column("x", NUMERIC), Column("c", CATEGORICAL, ("a", "b"))))


def _table(xs, cs=None, start=0):
    cs = cs or ["a"] * len(xs)
    return Table(SCHEMA, tuple((float(x), c) for x, c in zip(xs, cs)),
                 tuple(range(start, start + len(xs))))


def _heldout_auc(real, synth, seed):
    rng = np.random.default_rng(seed)
    ri, si = rng.permutation(len(real)), rng.permutation(len(synth))
    h = len(real) // 2
    sc = train_scorer(real.subset(np.sort(ri[:h])), synth.subset(np.sort(si[:h])),
                      ScorerConfig(n_trees=30, seed=seed))
    rt, st = real.subset(np.sort(ri[h:])), synth.subset(np.sort(si[h:]))
    p = np.r_[sc.prob_real(rt), sc.prob_real(st)]
    return roc_auc(np.r_[np.ones(len(rt)), np.zeros(len(st))], p)


def test_cls_reward_values():
    np.testing.assert_allclose(cls_reward_from_prob([0.5, 0.9, 0.0, 1.0]), [1.0, 0.2, 0.0, 0.0])
    phi = np.linspace(0, 1, 101)
    np.testing.assert_allclose(cls_reward_from_prob(phi), cls_reward_from_prob(1 - phi), atol=1e-15)
    assert np.argmax(cls_reward_from_prob(phi)) == 50


def test_scorer_separable_and_indistinguishable():
    rng = np.random.default_rng(0)
    neg, pos = _table(-rng.random(200) - 0.01), _table(rng.random(200) + 0.01, start=1000)
    assert _heldout_auc(neg, pos, 1) > 0.95
    toy = make_toy(ToySpec(n_rows=800), seed=3)
    a, b = toy.subset(np.arange(0, 800, 2)), toy.subset(np.arange(1, 800, 2))
    aucs = [_heldout_auc(a, b, s) for s in range(3)]
    assert abs(np.mean(aucs) - 0.5) < 0.05


def test_scorer_is_deterministic():
    toy = make_toy(ToySpec(n_rows=120), seed=1)
    a, b = toy.subset(np.arange(60)), toy.subset(np.arange(60, 120))
    s1 = train_scorer(a, b, ScorerConfig(n_trees=5, seed=4))
    s2 = train_scorer(a, b, ScorerConfig(n_trees=5, seed=4))
    for t1, t2 in zip(s1.ensemble.trees, s2.ensemble.trees):
        np.testing.assert_array_equal(t1.threshold, t2.threshold)
        np.testing.assert_array_equal(t1.feature, t2.feature)


def test_scorer_errors():
    other = Schema((Column("x", NUMERIC),))
    with pytest.raises(DataError):
        train_scorer(_table([1.0]), Table(other, ((1.0,),), (0,)))
    with pytest.raises(DataError):
        train_scorer(_table([1.0]), _table([]))


def test_reward_cls_single_row():
    real, synth = _table([0.0] * 5), _table([0.0] * 5, start=10)
    sc = train_scorer(real, synth, ScorerConfig(n_trees=3))
    phi = sc.prob_real(_table([0.0]))[0]
    r = reward_cls(sc, (0.0, "a"))
    assert r.kind == "cls" and r.value == pytest.approx(1 - 2 * abs(0.5 - phi), abs=1e-15)


def test_dcr_normalization():
    stats = DcrStats.from_distances([1.0, 2.0, 3.0])
    np.testing.assert_allclose(dcr_reward_from_distance([1.0, 2.0, 3.0], stats), [1.0, 0.5, 0.0])
    d = np.linspace(0, 5, 20)
    r = dcr_reward_from_distance(d, DcrStats(0.5, 4.0))
    assert np.all(np.diff(r) <= 0) and r.min() >= 0 and r.max() <= 1
    np.testing.assert_array_equal(dcr_reward_from_distance(d, DcrStats(2.0, 2.0)), 1.0)
    with pytest.raises(ValueError):
        DcrStats(2.0, 1.0)


def test_reward_dcr_copy_gets_one():
    ref = _table([0.0, 10.0], ["a", "b"])
    assert reward_dcr((10.0, "b"), ref, DcrStats(0.0, 1.0)).value == 1.0
    assert reward_dcr((5.0, "a"), ref, DcrStats(0.0, 0.5)).value == 0.0


def test_target_reward():
    source = _table([0.0, 0.1, 0.2])
    target = _table([10.0, 10.1, 10.2], start=50)
    stats = DcrStats(0.0, 1.0)
    near_target = reward_target((10.05, "a"), target, "dcr", stats).value
    near_source = reward_dcr((10.05, "a"), source, stats).value
    assert near_target > near_source
    assert reward_target((0.1, "a"), source, "dcr", stats).value == reward_dcr((0.1, "a"), source, stats).value
    with pytest.raises(DataError):
        reward_target((0.1, "a"), _table([]), "dcr", stats)


def test_forget_region():
    reg = ForgetRegion.parse(["x in [1, 2]", "c in {b}"])
    assert reward_forget((1.5, "b"), reg, SCHEMA).value == -1.0
    assert reward_forget((1.5, "a"), reg, SCHEMA).value == 1.0
    assert reward_forget((3.0, "b"), reg, SCHEMA).value == 1.0
    assert reward_forget((9.0, "a"), ForgetRegion(), SCHEMA).value == -1.0
    open_hi = ForgetRegion.parse(["x in [1, ]"])
    assert open_hi.contains((1e9, "a"), SCHEMA)
    with pytest.raises(ValueError):
        ForgetRegion.parse(["x < 3"])


def test_score_pool_separation():
    toy = make_toy(ToySpec(n_rows=90), seed=2)
    real, pool, sp = toy.subset(np.arange(30)), toy.subset(np.arange(30, 60)), toy.subset(np.arange(60, 90))
    spec = RewardSpec("cls", scorer=ScorerConfig(n_trees=5))
    out = score_pool(pool, spec, real, scorer_pool=sp, seed=0)
    assert out.kind == "cls" and not set(out.scorer_train_ids) & set(pool.row_ids)
    assert np.all((out.values >= 0) & (out.values <= 1))
    with pytest.raises(ValueError, match="share"):
        score_pool(pool, spec, real, scorer_pool=pool, seed=0)
    leak = score_pool(pool, spec, real, separation="leak", seed=0)
    assert leak.kind == "leak" and set(leak.scorer_train_ids) == set(pool.row_ids)
    again = score_pool(pool, spec, real, scorer_pool=sp, seed=0)
    np.testing.assert_array_equal(out.values, again.values)


def test_score_pool_random_and_forget():
    toy = make_toy(ToySpec(n_rows=40), seed=2)
    r1 = score_pool(toy, RewardSpec("random"), toy, seed=5)
    r2 = score_pool(toy, RewardSpec("random"), toy, seed=5)
    assert r1.kind == "random"
    np.testing.assert_array_equal(r1.values, r2.values)
    assert np.all((r1.values >= 0) & (r1.values < 1))
    everything = RewardSpec("forget", forget=ForgetRegion())
    np.testing.assert_array_equal(score_pool(toy, everything, toy).values, -1.0)


def test_score_pool_dcr_degenerate_flag():
    real = _table([0.0, 1.0])
    pool = _table([0.0, 0.0], start=10)
    out = score_pool(pool, RewardSpec("dcr"), real)
    assert out.degenerate and np.all(out.values == 1.0)
