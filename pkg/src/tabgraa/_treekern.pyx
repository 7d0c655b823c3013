# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled CART builder used by :mod:`tabgraa.forest`.

Must stay bit-identical to ``_treekern_py``: same RNG, same feature visiting
order, same stable sort key, same float expressions.
"""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free, qsort
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

ctypedef struct Pair:
    double value
    int64_t pos


cdef int _cmp_pair(const void* a, const void* b) noexcept nogil:
    cdef const Pair* pa = <const Pair*> a
    cdef const Pair* pb = <const Pair*> b
    if pa.value < pb.value:
        return -1
    if pa.value > pb.value:
        return 1
    if pa.pos < pb.pos:
        return -1
    if pa.pos > pb.pos:
        return 1
    return 0


cdef inline uint64_t _next(uint64_t* state) noexcept nogil:
    state[0] += <uint64_t> 0x9E3779B97F4A7C15
    cdef uint64_t z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t> 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * <uint64_t> 0x94D049BB133111EB
    return z ^ (z >> 31)


def build_tree(const double[:, ::1] X, const double[::1] y, const int64_t[::1] samples,
               int n_classes, int max_features, uint64_t seed,
               int min_samples_split=2, int max_depth=-1):
    """Grow one tree on ``X[samples]``.

    ``n_classes == 0`` selects the squared-error criterion; otherwise ``y``
    holds integer class codes stored as floats and Gini is used.
    """
    cdef Py_ssize_t n = samples.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t n_out = n_classes if n_classes > 0 else 1
    cdef Py_ssize_t cap = 2 * n + 1

    feature_a = np.full(cap, -1, dtype=np.int64)
    threshold_a = np.zeros(cap, dtype=np.float64)
    left_a = np.full(cap, -1, dtype=np.int64)
    right_a = np.full(cap, -1, dtype=np.int64)
    value_a = np.zeros((cap, n_out), dtype=np.float64)
    cdef int64_t[::1] feature = feature_a
    cdef double[::1] threshold = threshold_a
    cdef int64_t[::1] left = left_a
    cdef int64_t[::1] right = right_a
    cdef double[:, ::1] value = value_a

    cdef int64_t* idx = <int64_t*> malloc(n * sizeof(int64_t))
    cdef int64_t* tmp = <int64_t*> malloc(n * sizeof(int64_t))
    cdef Pair* pairs = <Pair*> malloc(n * sizeof(Pair))
    cdef int64_t* feats = <int64_t*> malloc(p * sizeof(int64_t))
    cdef double* cnt_left = <double*> malloc(n_out * sizeof(double))
    cdef double* cnt_total = <double*> malloc(n_out * sizeof(double))
    # explicit DFS stack: (node, start, end, depth)
    cdef int64_t* stack = <int64_t*> malloc(4 * cap * sizeof(int64_t))

    cdef uint64_t state = seed
    cdef Py_ssize_t i, j, k, r, start, end, m, nl, n_seen
    cdef int64_t node, depth, n_nodes, sp, f, best_f, t, c, best_pos
    cdef double best_score, score, sl, sr, total, sql, sqr, thr, best_thr, cl, ymin, ymax
    cdef bint pure

    try:
        for i in range(n):
            idx[i] = samples[i]
        n_nodes = 1
        sp = 0
        stack[0] = 0
        stack[1] = 0
        stack[2] = n
        stack[3] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[4 * sp]
            start = stack[4 * sp + 1]
            end = stack[4 * sp + 2]
            depth = stack[4 * sp + 3]
            m = end - start

            # leaf value + purity
            for k in range(n_out):
                cnt_total[k] = 0.0
            if n_classes > 0:
                for i in range(start, end):
                    cnt_total[<Py_ssize_t> y[idx[i]]] += 1.0
                pure = False
                for k in range(n_out):
                    value[node, k] = cnt_total[k] / m
                    if cnt_total[k] == m:
                        pure = True
            else:
                total = 0.0
                ymin = y[idx[start]]
                ymax = ymin
                for i in range(start, end):
                    total = total + y[idx[i]]
                    if y[idx[i]] < ymin:
                        ymin = y[idx[i]]
                    if y[idx[i]] > ymax:
                        ymax = y[idx[i]]
                cnt_total[0] = total
                value[node, 0] = total / m
                pure = ymin == ymax

            if pure or m < min_samples_split or (max_depth >= 0 and depth >= max_depth):
                continue

            for j in range(p):
                feats[j] = j
            best_f = -1
            best_score = -1.0
            best_thr = 0.0
            best_pos = 0
            n_seen = 0
            for j in range(p):
                if n_seen >= max_features:
                    break
                r = j + <Py_ssize_t> (_next(&state) % <uint64_t> (p - j))
                f = feats[r]
                feats[r] = feats[j]
                feats[j] = f

                for i in range(m):
                    pairs[i].value = X[idx[start + i], f]
                    pairs[i].pos = i
                qsort(pairs, m, sizeof(Pair), _cmp_pair)
                if pairs[0].value == pairs[m - 1].value:
                    continue
                n_seen += 1

                for k in range(n_out):
                    cnt_left[k] = 0.0
                for i in range(1, m):
                    t = idx[start + pairs[i - 1].pos]
                    if n_classes > 0:
                        cnt_left[<Py_ssize_t> y[t]] += 1.0
                    else:
                        cnt_left[0] = cnt_left[0] + y[t]
                    if not (pairs[i - 1].value < pairs[i].value):
                        continue
                    nl = i
                    if n_classes > 0:
                        sql = 0.0
                        sqr = 0.0
                        for k in range(n_out):
                            cl = cnt_left[k]
                            sql = sql + cl * cl
                            sqr = sqr + (cnt_total[k] - cl) * (cnt_total[k] - cl)
                        score = sql / nl + sqr / (m - nl)
                    else:
                        sl = cnt_left[0]
                        sr = cnt_total[0] - sl
                        score = sl * sl / nl + sr * sr / (m - nl)
                    if score > best_score:
                        best_score = score
                        best_f = f
                        best_pos = i
                        thr = (pairs[i - 1].value + pairs[i].value) / 2.0
                        if thr >= pairs[i].value:
                            thr = pairs[i - 1].value
                        best_thr = thr

            if best_f < 0:
                continue

            # stable partition on best feature
            nl = 0
            for i in range(start, end):
                if X[idx[i], best_f] <= best_thr:
                    tmp[nl] = idx[i]
                    nl += 1
            c = nl
            for i in range(start, end):
                if not (X[idx[i], best_f] <= best_thr):
                    tmp[c] = idx[i]
                    c += 1
            for i in range(m):
                idx[start + i] = tmp[i]

            feature[node] = best_f
            threshold[node] = best_thr
            left[node] = n_nodes
            right[node] = n_nodes + 1
            n_nodes += 2
            # push right first so left is expanded first
            stack[4 * sp] = right[node]
            stack[4 * sp + 1] = start + nl
            stack[4 * sp + 2] = end
            stack[4 * sp + 3] = depth + 1
            sp += 1
            stack[4 * sp] = left[node]
            stack[4 * sp + 1] = start
            stack[4 * sp + 2] = start + nl
            stack[4 * sp + 3] = depth + 1
            sp += 1
    finally:
        free(idx)
        free(tmp)
        free(pairs)
        free(feats)
        free(cnt_left)
        free(cnt_total)
        free(stack)

    return (feature_a[:n_nodes].copy(), threshold_a[:n_nodes].copy(),
            left_a[:n_nodes].copy(), right_a[:n_nodes].copy(),
            value_a[:n_nodes].copy())


def apply_tree(const double[:, ::1] X, const int64_t[::1] feature,
               const double[::1] threshold, const int64_t[::1] left,
               const int64_t[::1] right):
    """Leaf index reached by every row of ``X``."""
    cdef Py_ssize_t n = X.shape[0]
    out_a = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] out = out_a
    cdef Py_ssize_t i
    cdef int64_t node
    with nogil:
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i] = node
    return out_a
