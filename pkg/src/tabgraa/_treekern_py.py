"""Pure-Python/numpy twin of the compiled CART builder.

Produces bit-identical trees to ``_treekern``; see that module for the
contract. Used when the extension is not built or when
``TABGRAA_PURE_PYTHON=1``.
"""

import numpy as np

_MASK = (1 << 64) - 1


class _SplitMix64:
    def __init__(self, seed):
        self.state = int(seed) & _MASK

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)


def _best_split_on(xs, ys, n_classes, cnt_total):
    """Best (score, position, threshold) for one feature, or None if constant."""
    order = np.argsort(xs, kind="stable")
    xv = xs[order]
    if xv[0] == xv[-1]:
        return None
    m = xv.shape[0]
    yv = ys[order]
    valid = xv[:-1] < xv[1:]
    nl = np.arange(1, m, dtype=np.float64)
    nr = m - nl
    if n_classes > 0:
        onehot = np.zeros((m, n_classes))
        onehot[np.arange(m), yv.astype(np.int64)] = 1.0
        cl = np.cumsum(onehot, axis=0)[:-1]
        cr = cnt_total[None, :] - cl
        score = (cl * cl).sum(axis=1) / nl + (cr * cr).sum(axis=1) / nr
    else:
        sl = np.cumsum(yv)[:-1]
        sr = cnt_total[0] - sl
        score = sl * sl / nl + sr * sr / nr
    score = np.where(valid, score, -np.inf)
    pos = int(np.argmax(score))
    a, b = xv[pos], xv[pos + 1]
    thr = (a + b) / 2.0
    if thr >= b:
        thr = a
    return float(score[pos]), pos + 1, float(thr)


def build_tree(X, y, samples, n_classes, max_features, seed,
               min_samples_split=2, max_depth=-1):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    idx = np.array(samples, dtype=np.int64)
    n = idx.shape[0]
    p = X.shape[1]
    n_out = n_classes if n_classes > 0 else 1
    rng = _SplitMix64(seed)

    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [None]
    stack = [(0, 0, n, 0)]
    while stack:
        node, start, end, depth = stack.pop()
        m = end - start
        node_idx = idx[start:end]
        ys = y[node_idx]
        if n_classes > 0:
            cnt_total = np.bincount(ys.astype(np.int64), minlength=n_classes).astype(np.float64)
            value[node] = cnt_total / m
            pure = bool(np.any(cnt_total == m))
        else:
            cnt_total = np.array([np.cumsum(ys)[-1]])
            value[node] = np.array([cnt_total[0] / m])
            pure = bool(ys.min() == ys.max())
        if pure or m < min_samples_split or (max_depth >= 0 and depth >= max_depth):
            continue

        feats = list(range(p))
        best = None
        n_seen = 0
        for j in range(p):
            if n_seen >= max_features:
                break
            r = j + rng.next() % (p - j)
            feats[j], feats[r] = feats[r], feats[j]
            f = feats[j]
            found = _best_split_on(X[node_idx, f], ys, n_classes, cnt_total)
            if found is None:
                continue
            n_seen += 1
            if best is None or found[0] > best[0]:
                best = (found[0], f, found[2])
        if best is None:
            continue

        _, f, thr = best
        go_left = X[node_idx, f] <= thr
        nl = int(go_left.sum())
        idx[start:end] = np.concatenate([node_idx[go_left], node_idx[~go_left]])

        lid = len(feature)
        feature[node] = f
        threshold[node] = thr
        left[node] = lid
        right[node] = lid + 1
        feature += [-1, -1]
        threshold += [0.0, 0.0]
        left += [-1, -1]
        right += [-1, -1]
        value += [None, None]
        stack.append((lid + 1, start + nl, end, depth + 1))
        stack.append((lid, start, start + nl, depth + 1))

    return (np.array(feature, dtype=np.int64), np.array(threshold),
            np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
            np.vstack(value).reshape(len(value), n_out))


def apply_tree(X, feature, threshold, left, right):
    X = np.asarray(X, dtype=np.float64)
    node = np.zeros(X.shape[0], dtype=np.int64)
    active = feature[node] >= 0
    while active.any():
        rows = np.nonzero(active)[0]
        nd = node[rows]
        go_left = X[rows, feature[nd]] <= threshold[nd]
        node[rows] = np.where(go_left, left[nd], right[nd])
        active = feature[node] >= 0
    return node
