"""Fidelity, utility and attack diagnostics for a synthetic table.

Estimator conventions (documented repo choices, not parity claims):

* ``wasserstein`` is the mean of per-column 1-D W1 distances; numerics are
  min-max scaled by the real table, categoricals use total variation.
* ``mmd`` is the unbiased squared MMD with an RBF kernel whose bandwidth is
  the median pairwise distance; negative estimates clamp to 0.
* ``jsd`` is the mean per-column Jensen-Shannon divergence (base 2), with 20
  equal-width bins over the pooled range for numerics.
* ``c2st`` is ``100 * clip(2 * (1 - AUC), 0, 1)`` for a held-out forest AUC.
* ``alpha_precision`` / ``beta_recall`` are k-NN support coverage rates.
* ``mia_auc`` scores candidates by negative distance to the closest synthetic row.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import ks_2samp, wasserstein_distance

from .dataset import CATEGORICAL, DataError
from .features import Encoder, nearest_distances
from .forest import TreeEnsemble, roc_auc

log = logging.getLogger(__name__)

JSD_BINS = 20
MMD_MAX_ROWS = 2000


@dataclass
class MetricsReport:
    cde: float
    pcc: float
    wasserstein: float
    mmd: float
    jsd: float
    c2st: float
    alpha_precision: float
    beta_recall: float
    da_auc: float
    mia_auc: Optional[float]
    mle: Optional[float]
    mle_task: Optional[str]
    mmd_clamped: bool = False
    conventions: str = "per-column W1; unbiased RBF MMD; 20-bin JSD; kNN alpha/beta; DCR MIA; forest MLE"

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def csv_header():
        return ",".join(f.name for f in fields(MetricsReport))

    def csv_row(self):
        return ",".join("" if v is None else str(v) for v in asdict(self).values())


def _check(real, synth):
    if real.schema != synth.schema:
        raise DataError("schema mismatch")
    if len(real) == 0 or len(synth) == 0:
        raise DataError("tables must be non-empty")


def _cat_freqs(table, col):
    vals = table.column(col.name)
    counts = np.array([vals.count(lv) for lv in col.categories], dtype=np.float64)
    return counts / counts.sum()


def _tv(p, q):
    return 0.5 * float(np.abs(p - q).sum())


def _js(p, q):
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float((a[nz] * np.log2(a[nz] / b[nz])).sum())

    return max(0.0, 0.5 * kl(p, m) + 0.5 * kl(q, m))


def column_wasserstein(real, synth):
    """Per-column W1 (scaled numerics) / TV (categoricals), keyed by column name."""
    _check(real, synth)
    out = {}
    for c in real.schema.columns:
        if c.kind == CATEGORICAL:
            out[c.name] = _tv(_cat_freqs(real, c), _cat_freqs(synth, c))
        else:
            a, b = real.numeric_array(c.name), synth.numeric_array(c.name)
            lo, hi = a.min(), a.max()
            span = hi - lo if hi > lo else 1.0
            out[c.name] = float(wasserstein_distance((a - lo) / span, (b - lo) / span))
    return out


def wasserstein(real, synth):
    return float(np.mean(list(column_wasserstein(real, synth).values())))


def cde(real, synth):
    sims = []
    for c in real.schema.columns:
        if c.kind == CATEGORICAL:
            sims.append(1.0 - _tv(_cat_freqs(real, c), _cat_freqs(synth, c)))
        else:
            a, b = real.numeric_array(c.name), synth.numeric_array(c.name)
            sims.append(1.0 - float(ks_2samp(a, b).statistic))
    return 100.0 * float(np.mean(sims))


def _corr(X):
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.corrcoef(X, rowvar=False)
    return np.nan_to_num(np.atleast_2d(c), nan=0.0)


def pcc(real, synth, encoder=None):
    encoder = encoder or Encoder(real)
    Xr, Xs = encoder.transform(real), encoder.transform(synth)
    if Xr.shape[1] < 2:
        return 100.0
    cr, cs = _corr(Xr), _corr(Xs)
    iu = np.triu_indices(Xr.shape[1], k=1)
    return 100.0 * (1.0 - float(np.mean(np.abs(cr[iu] - cs[iu]))) / 2.0)


def jsd(real, synth):
    vals = []
    for c in real.schema.columns:
        if c.kind == CATEGORICAL:
            p, q = _cat_freqs(real, c), _cat_freqs(synth, c)
        else:
            a, b = real.numeric_array(c.name), synth.numeric_array(c.name)
            lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
            if hi <= lo:
                hi = lo + 1.0
            edges = np.linspace(lo, hi, JSD_BINS + 1)
            p = np.histogram(a, edges)[0].astype(np.float64)
            q = np.histogram(b, edges)[0].astype(np.float64)
            p, q = p / p.sum(), q / q.sum()
        vals.append(_js(p, q))
    return float(np.mean(vals))


def _subsample(X, n, rng):
    if X.shape[0] <= n:
        return X
    return X[rng.choice(X.shape[0], size=n, replace=False)]


def mmd(real, synth, encoder=None, seed=0):
    """Unbiased squared MMD; returns ``(value, clamped)``."""
    encoder = encoder or Encoder(real)
    rng = np.random.default_rng(seed)
    X = _subsample(encoder.transform(real), MMD_MAX_ROWS, rng)
    Y = _subsample(encoder.transform(synth), MMD_MAX_ROWS, rng)
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise DataError("MMD needs at least two rows per table")
    Z = np.vstack([X, Y])
    d = cdist(Z, Z)
    med = float(np.median(d[np.triu_indices(Z.shape[0], k=1)]))
    bw = med if med > 0 else 1.0
    K = np.exp(-d * d / (2.0 * bw * bw))
    n, m = X.shape[0], Y.shape[0]
    Kxx, Kyy, Kxy = K[:n, :n], K[n:, n:], K[:n, n:]
    xx = (Kxx.sum() - np.trace(Kxx)) / (n * (n - 1))
    yy = (Kyy.sum() - np.trace(Kyy)) / (m * (m - 1))
    val = float(xx + yy - 2.0 * Kxy.mean())
    if val < 0:
        return 0.0, True
    return val, False


def fidelity(real, synth, encoder=None, seed=0):
    """(cde, pcc, wasserstein, mmd, jsd)."""
    _check(real, synth)
    encoder = encoder or Encoder(real)
    return (cde(real, synth), pcc(real, synth, encoder), wasserstein(real, synth),
            mmd(real, synth, encoder, seed)[0], jsd(real, synth))


# ------------------------------------------------------------- detection tests

def _grouped_split(X, y, test_frac, rng):
    """Stratified split that keeps identical feature rows on the same side.

    Rows are grouped by exact feature vector; groups are stratified by their
    label composition (all-1, all-0, mixed) and each stratum is split.
    """
    keys = [hashlib.blake2b(r.tobytes(), digest_size=16).digest() for r in np.ascontiguousarray(X)]
    groups = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    by_kind = {}
    for k in sorted(groups):
        members = groups[k]
        lab = {int(y[i]) for i in members}
        by_kind.setdefault(tuple(sorted(lab)), []).append(members)
    test = []
    for kind in sorted(by_kind):
        glist = by_kind[kind]
        total = sum(len(g) for g in glist)
        target = test_frac * total
        taken = 0
        for gi in rng.permutation(len(glist)):
            if taken >= target:
                break
            test += glist[gi]
            taken += len(glist[gi])
    mask = np.zeros(X.shape[0], dtype=bool)
    mask[test] = True
    return ~mask, mask


def detection_auc(real, synth, seed=0, n_trees=100, encoder=None, test_frac=0.3):
    """Held-out AUC of a forest separating real (1) from synthetic (0) rows."""
    _check(real, synth)
    if len(real) < 20 or len(synth) < 20:
        raise DataError("detection tests need at least 20 rows per table")
    encoder = encoder or Encoder(real)
    X = np.vstack([encoder.transform(real), encoder.transform(synth)])
    y = np.r_[np.ones(len(real), dtype=np.int64), np.zeros(len(synth), dtype=np.int64)]
    rng = np.random.default_rng(seed)
    tr, te = _grouped_split(X, y, test_frac, rng)
    if len(set(y[te])) < 2 or len(set(y[tr])) < 2:
        raise DataError("split left a single class")
    ens = TreeEnsemble(n_trees=n_trees, seed=int(rng.integers(2**31))).fit(X[tr], y[tr])
    p = ens.predict_proba(X[te])[:, list(ens.classes_).index(1)]
    return roc_auc(y[te], p)


def c2st_from_auc(auc):
    return 100.0 * float(np.clip(2.0 * (1.0 - auc), 0.0, 1.0))


def c2st(real, synth, seed=0, encoder=None):
    return c2st_from_auc(detection_auc(real, synth, seed, encoder=encoder))


def da_auc(real, synth, seed=0, encoder=None):
    return detection_auc(real, synth, seed, encoder=encoder)


# ------------------------------------------------------------- support coverage

def alpha_beta(real, synth, alpha=0.95, k=5, encoder=None):
    """(alpha_precision, beta_recall) in percent."""
    _check(real, synth)
    if len(real) < k + 1 or len(synth) < k + 1:
        raise DataError(f"alpha/beta needs at least {k + 1} rows per table")
    encoder = encoder or Encoder(real)
    Xr, Xs = encoder.transform(real), encoder.transform(synth)
    # k+1 because the nearest point of a row within its own table is itself
    r_rad = np.quantile(nearest_distances(Xr, Xr, k + 1), alpha)
    s_rad = np.quantile(nearest_distances(Xs, Xs, k + 1), alpha)
    precision = float(np.mean(nearest_distances(Xs, Xr) <= r_rad))
    recall = float(np.mean(nearest_distances(Xr, Xs) <= s_rad))
    return 100.0 * precision, 100.0 * recall


# ----------------------------------------------------------------- privacy

def mia_auc(members, nonmembers, synth, encoder=None):
    """AUC of the distance-to-closest-synthetic-record membership attack."""
    if len(synth) == 0:
        raise DataError("synthetic table is empty")
    if len(members) == 0 or len(nonmembers) == 0:
        raise DataError("members and non-members must be non-empty")
    encoder = encoder or Encoder(members)
    S = encoder.transform(synth)
    d_in = nearest_distances(encoder.transform(members), S)
    d_out = nearest_distances(encoder.transform(nonmembers), S)
    y = np.r_[np.ones(d_in.size), np.zeros(d_out.size)]
    return roc_auc(y, -np.r_[d_in, d_out])


# -------------------------------------------------------------------- utility

def mle(synth_train, real_test, label, task="classification", seed=0, n_trees=100):
    """Train a forest on synthetic rows, score it on real test rows.

    Classification returns AUC (positive class = last listed category;
    macro one-vs-rest for more classes); regression returns RMSE.
    """
    if synth_train.schema != real_test.schema:
        raise DataError("schema mismatch")
    enc = Encoder(synth_train, exclude=(label,))
    Xs, Xt = enc.transform(synth_train), enc.transform(real_test)
    ys, yt = synth_train.column(label), real_test.column(label)
    if task == "classification":
        classes = list(synth_train.schema[label].categories)
        if len(set(ys)) < 2:
            raise DataError("synthetic labels contain a single class")
        ys_code = np.array([classes.index(v) for v in ys])
        yt_code = np.array([classes.index(v) for v in yt])
        ens = TreeEnsemble(n_trees=n_trees, seed=seed).fit(Xs, ys_code)
        proba = ens.predict_proba(Xt)
        fitted = list(ens.classes_)
        if len(classes) == 2:
            pos = classes.index(classes[-1])
            score = proba[:, fitted.index(pos)] if pos in fitted else np.zeros(len(yt))
            return roc_auc(yt_code == pos, score)
        aucs = []
        for c in fitted:
            if 0 < (yt_code == c).sum() < len(yt_code):
                aucs.append(roc_auc(yt_code == c, proba[:, fitted.index(c)]))
        return float(np.mean(aucs))
    if task == "regression":
        ys_v, yt_v = np.asarray(ys, dtype=np.float64), np.asarray(yt, dtype=np.float64)
        ens = TreeEnsemble(n_trees=n_trees, criterion="mse", seed=seed).fit(Xs, ys_v)
        pred = ens.predict(Xt)
        return float(np.sqrt(np.mean((yt_v - pred) ** 2)))
    raise ValueError(f"unknown task {task!r}")


def evaluate(real, synth, seed=0, members=None, nonmembers=None, real_test=None,
             label=None, task="classification"):
    """Full :class:`MetricsReport`; MIA/MLE need their optional tables."""
    _check(real, synth)
    enc = Encoder(real)
    c, p, w, j = cde(real, synth), pcc(real, synth, enc), wasserstein(real, synth), jsd(real, synth)
    m, clamped = mmd(real, synth, enc, seed)
    auc = detection_auc(real, synth, seed, encoder=enc)
    a, b = alpha_beta(real, synth, encoder=enc)
    mia = mia_auc(members, nonmembers, synth, enc) if members is not None and nonmembers is not None else None
    util = None
    if real_test is not None and label is not None:
        try:
            util = mle(synth, real_test, label, task, seed)
        except DataError as exc:
            log.warning("MLE skipped: %s", exc)
    return MetricsReport(cde=c, pcc=p, wasserstein=w, mmd=m, jsd=j, c2st=c2st_from_auc(auc),
                         alpha_precision=a, beta_recall=b, da_auc=auc, mia_auc=mia,
                         mle=util, mle_task=task if util is not None else None,
                         mmd_clamped=clamped)
