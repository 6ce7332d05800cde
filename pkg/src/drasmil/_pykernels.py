"""Pure numpy versions of the compiled kernels, bit-compatible with ``_ckernels``."""

import numpy as np
from scipy.stats import rankdata

NAME = "python"


def knn_propagate(coords, weights, sampled, sources, values, k):
    K = coords.shape[0]
    if k <= 0:
        raise ValueError("k must be >= 1")
    cand = np.flatnonzero(sampled == 0)
    if cand.size == 0:
        return
    kk = min(k, cand.size)
    cx = coords[cand, 0]
    cy = coords[cand, 1]
    span = int(np.ptp(coords[:, 0])) + int(np.ptp(coords[:, 1])) + 1
    packed = span * span * K < 2**62
    for src, v in zip(sources, values):
        d2 = (cx - coords[src, 0]) ** 2 + (cy - coords[src, 1]) ** 2
        if packed:
            key = d2 * K + cand
            sel = cand[np.argpartition(key, kk - 1)[:kk]] if kk < cand.size else cand
        else:
            sel = cand[np.lexsort((cand, d2))[:kk]]
        np.maximum.at(weights, sel, v)


def weighted_draw(weights, uniforms):
    w = weights
    out = []
    for u in uniforms:
        cs = np.cumsum(w)
        total = cs[-1] if cs.size else 0.0
        pos = np.flatnonzero(w > 0.0)
        if pos.size == 0 or not total > 0.0:
            break
        pick = int(np.searchsorted(cs, u * total, side="right"))
        if pick >= w.size:
            pick = int(pos[-1])
        out.append(pick)
        w[pick] = 0.0
    return np.asarray(out, dtype=np.int64)


def bootstrap_epochs(probs, labels, choice, threshold):
    E = choice.shape[0]
    S = probs.shape[0]
    rows = probs[np.arange(S)[None, :], choice]
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = S - n_pos
    out = np.empty((E, 4), dtype=np.float64)
    if n_pos and n_neg:
        ranks = rankdata(rows, axis=1, method="average")
        u = ranks[:, pos].sum(axis=1) - n_pos * (n_pos + 1) / 2.0
        out[:, 0] = u / float(n_pos * n_neg)
    else:
        out[:, 0] = np.nan
    pred = rows > threshold
    tp = (pred & pos).sum(axis=1)
    fp = (pred & ~pos).sum(axis=1)
    fn = (~pred & pos).sum(axis=1)
    tn = (~pred & ~pos).sum(axis=1)
    out[:, 1] = (tp + tn) / float(S)
    if n_pos and n_neg:
        out[:, 2] = 0.5 * (tp / (tp + fn) + tn / (tn + fp))
    elif n_pos:
        out[:, 2] = tp / (tp + fn)
    else:
        out[:, 2] = tn / (tn + fp)
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        out[:, 3] = np.where(denom > 0, (2 * tp) / np.maximum(denom, 1), 0.0)
    return out
