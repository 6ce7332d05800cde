# distutils: language = c++
# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Must stay bit-compatible with ``_pykernels``."""

import numpy as np
cimport numpy as cnp

from libcpp.algorithm cimport sort as cpp_sort

cnp.import_array()

NAME = "cython"


cdef extern from "stdlib.h":
    void qsort(void *base, size_t nmemb, size_t size, int (*compar)(const void *, const void *)) nogil


cdef int _cmp_i64(const void *a, const void *b) noexcept nogil:
    cdef cnp.int64_t x = (<cnp.int64_t *>a)[0]
    cdef cnp.int64_t y = (<cnp.int64_t *>b)[0]
    return (x > y) - (x < y)


def knn_propagate(const cnp.int64_t[:, ::1] coords, double[::1] weights,
                  const cnp.uint8_t[::1] sampled, const cnp.int64_t[::1] sources,
                  const double[::1] values, Py_ssize_t k):
    """Max-combine ``values`` onto the k nearest unsampled patches of each source.

    Searches square rings outward on a coordinate lookup grid; once the ring
    radius r holds k candidates with squared distance <= r*r nothing outside
    can beat them.
    """
    cdef Py_ssize_t K = coords.shape[0]
    cdef Py_ssize_t n = sources.shape[0]
    cdef Py_ssize_t s, i, j, kk, nbuf, close
    cdef cnp.int64_t x0, y0, x1, y1, W, H, sx, sy, r, x, y, dx, dy, d2, src, idx, lim
    cdef double v
    if k <= 0:
        raise ValueError("k must be >= 1")
    if K == 0 or n == 0:
        return
    x0 = x1 = coords[0, 0]
    y0 = y1 = coords[0, 1]
    for i in range(K):
        x0 = min(x0, coords[i, 0])
        x1 = max(x1, coords[i, 0])
        y0 = min(y0, coords[i, 1])
        y1 = max(y1, coords[i, 1])
    W = x1 - x0 + 1
    H = y1 - y0 + 1
    if (W * W + H * H) * K >= (<cnp.int64_t>1) << 62:
        raise OverflowError("grid too large for packed distance keys")
    lut_arr = np.full(W * H, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] lut = lut_arr
    cdef Py_ssize_t n_free = 0
    for i in range(K):
        if not sampled[i]:
            lut[(coords[i, 1] - y0) * W + coords[i, 0] - x0] = i
            n_free += 1
    if n_free == 0:
        return
    kk = min(k, n_free)
    buf_arr = np.empty(n_free, dtype=np.int64)
    cdef cnp.int64_t[::1] buf = buf_arr
    for s in range(n):
        src = sources[s]
        v = values[s]
        sx = coords[src, 0] - x0
        sy = coords[src, 1] - y0
        nbuf = 0
        r = 0
        while True:
            # visit cells with Chebyshev distance exactly r
            for y in range(sy - r, sy + r + 1):
                if y < 0 or y >= H:
                    continue
                dy = y - sy
                if dy == -r or dy == r:
                    for x in range(max(sx - r, 0), min(sx + r, W - 1) + 1):
                        idx = lut[y * W + x]
                        if idx >= 0:
                            dx = x - sx
                            buf[nbuf] = (dx * dx + dy * dy) * K + idx
                            nbuf += 1
                else:
                    for x in (sx - r, sx + r):
                        if 0 <= x < W:
                            idx = lut[y * W + x]
                            if idx >= 0:
                                dx = x - sx
                                buf[nbuf] = (dx * dx + dy * dy) * K + idx
                                nbuf += 1
            if nbuf >= kk:
                lim = (r * r + 1) * K
                close = 0
                for j in range(nbuf):
                    if buf[j] < lim:
                        close += 1
                if close >= kk:
                    break
            if sx - r <= 0 and sy - r <= 0 and sx + r >= W - 1 and sy + r >= H - 1:
                break
            r += 1
        qsort(&buf[0], nbuf, sizeof(cnp.int64_t), _cmp_i64)
        for j in range(kk):
            idx = buf[j] % K
            if weights[idx] < v:
                weights[idx] = v


def weighted_draw(double[::1] weights, const double[::1] uniforms):
    """Sequential renormalised draws without replacement; consumes ``weights``."""
    cdef Py_ssize_t m = weights.shape[0]
    cdef Py_ssize_t n = uniforms.shape[0]
    cdef Py_ssize_t d, j, pick, last
    cdef double total, target, acc
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] res = out
    cdef Py_ssize_t drawn = 0
    for d in range(n):
        total = 0.0
        last = -1
        for j in range(m):
            total += weights[j]
            if weights[j] > 0.0:
                last = j
        if last < 0 or not total > 0.0:
            break
        target = uniforms[d] * total
        acc = 0.0
        pick = -1
        for j in range(m):
            acc += weights[j]
            if acc > target:
                pick = j
                break
        if pick < 0:
            pick = last
        res[drawn] = pick
        drawn += 1
        weights[pick] = 0.0
    return out[:drawn]


def bootstrap_epochs(const double[:, ::1] probs, const cnp.int8_t[::1] labels,
                     const cnp.int64_t[:, ::1] choice, double threshold):
    """Per-epoch (auc, accuracy, balanced accuracy, f1).

    Each cell is replaced by its dense rank among all cells once; an epoch then
    sorts integer keys (rank, label) and counts, per tie group, how many
    negatives each positive beats (twice) or ties (once). The integer tally
    equals the pairwise definition exactly.
    """
    cdef Py_ssize_t E = choice.shape[0]
    cdef Py_ssize_t S = probs.shape[0]
    cdef Py_ssize_t e, s, g
    cdef Py_ssize_t n_pos = 0, n_neg = 0
    cdef cnp.int64_t tp, tn, fp, fn, cnt2, neg_below, gp, gn, r
    cdef double p
    for s in range(S):
        if labels[s] == 1:
            n_pos += 1
        else:
            n_neg += 1
    _, inv = np.unique(np.asarray(probs), return_inverse=True)
    cdef cnp.int64_t[:, ::1] rank = np.ascontiguousarray(inv.reshape(probs.shape[0], probs.shape[1]),
                                                         dtype=np.int64)
    out = np.empty((E, 4), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef cnp.int64_t[::1] keys = np.empty(max(S, 1), dtype=np.int64)
    for e in range(E):
        tp = 0
        tn = 0
        fp = 0
        fn = 0
        for s in range(S):
            p = probs[s, choice[e, s]]
            keys[s] = rank[s, choice[e, s]] * 2 + (labels[s] == 1)
            if p > threshold:
                if labels[s] == 1:
                    tp += 1
                else:
                    fp += 1
            else:
                if labels[s] == 1:
                    fn += 1
                else:
                    tn += 1
        if n_pos > 0 and n_neg > 0:
            cpp_sort(&keys[0], &keys[0] + S)
            cnt2 = 0
            neg_below = 0
            s = 0
            while s < S:
                r = keys[s] >> 1
                gp = 0
                gn = 0
                g = s
                while g < S and (keys[g] >> 1) == r:
                    gp += keys[g] & 1
                    g += 1
                gn = (g - s) - gp
                cnt2 += gp * (2 * neg_below + gn)
                neg_below += gn
                s = g
            res[e, 0] = <double>cnt2 / <double>(2 * n_pos * n_neg)
        else:
            res[e, 0] = np.nan
        res[e, 1] = <double>(tp + tn) / <double>S
        res[e, 2] = _balanced(tp, tn, fp, fn)
        if 2 * tp + fp + fn > 0:
            res[e, 3] = <double>(2 * tp) / <double>(2 * tp + fp + fn)
        else:
            res[e, 3] = 0.0
    return out


cdef double _balanced(cnp.int64_t tp, cnp.int64_t tn, cnp.int64_t fp, cnp.int64_t fn):
    if tp + fn > 0 and tn + fp > 0:
        return 0.5 * (<double>tp / <double>(tp + fn) + <double>tn / <double>(tn + fp))
    if tp + fn > 0:
        return <double>tp / <double>(tp + fn)
    return <double>tn / <double>(tn + fp)
