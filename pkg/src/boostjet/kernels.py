"""Hot inner loops, each in a numba and a pure-numpy flavour.

The public names at the bottom dispatch on ``_jit.USE_NUMBA``.  Both
flavours accumulate in the same order, so the integer kernels agree
exactly and the float kernels agree to rounding (bit-exact for the
histogram and the prediction sum, ~1e-12 for the embedding SGD whose
dot products are summed differently by BLAS).
"""
import math

import numpy as np

from . import _jit
from ._jit import njit, prange

MISSING_BIN = 255


# --------------------------------------------------------------------------
# group-by-code reduction (tracker reduce phase)
# --------------------------------------------------------------------------

def _group_reduce_np(codes, ts):
    if codes.size == 0:
        e = np.zeros(0, np.int64)
        return e, e.copy(), e.copy(), e.copy()
    order = np.argsort(codes, kind="stable")
    sc = codes[order]
    st = ts[order]
    starts = np.flatnonzero(np.r_[True, sc[1:] != sc[:-1]])
    counts = np.diff(np.r_[starts, sc.size]).astype(np.int64)
    first = np.minimum.reduceat(st, starts)
    last = np.maximum.reduceat(st, starts)
    return sc[starts].copy(), counts, first.astype(np.int64), last.astype(np.int64)


def _group_reduce_nb(codes, ts):
    # numpy's stable argsort is faster than numba's mergesort; only the scan is compiled
    return _group_scan_nb(codes, ts, np.argsort(codes, kind="stable"))


@njit
def _group_scan_nb(codes, ts, order):
    n = codes.shape[0]
    n_groups = 0
    for i in range(n):
        if i == 0 or codes[order[i]] != codes[order[i - 1]]:
            n_groups += 1
    uniq = np.empty(n_groups, np.int64)
    counts = np.zeros(n_groups, np.int64)
    first = np.empty(n_groups, np.int64)
    last = np.empty(n_groups, np.int64)
    g = -1
    for i in range(n):
        c = codes[order[i]]
        t = ts[order[i]]
        if i == 0 or c != codes[order[i - 1]]:
            g += 1
            uniq[g] = c
            first[g] = t
            last[g] = t
        counts[g] += 1
        if t < first[g]:
            first[g] = t
        if t > last[g]:
            last[g] = t
    return uniq, counts, first, last


# --------------------------------------------------------------------------
# gradient histograms for oblivious-tree split search
# --------------------------------------------------------------------------
# bins is feature-major (F, n) uint8; part holds the current leaf index of
# every row; histograms come back as (n_parts, F, n_bins).

def _histogram_np(bins, part, resid, rows, n_parts, n_bins):
    n_feat = bins.shape[0]
    base = part[rows].astype(np.int64) * n_bins
    g = resid[rows]
    size = n_parts * n_bins
    sums = np.empty((n_feat, size))
    counts = np.empty((n_feat, size), np.int64)
    for f in range(n_feat):
        idx = base + bins[f, rows]
        sums[f] = np.bincount(idx, weights=g, minlength=size)
        counts[f] = np.bincount(idx, minlength=size)
    sums = sums.reshape(n_feat, n_parts, n_bins).transpose(1, 0, 2)
    counts = counts.reshape(n_feat, n_parts, n_bins).transpose(1, 0, 2)
    return np.ascontiguousarray(sums), np.ascontiguousarray(counts)


@njit
def _histogram_nb(bins, part, resid, rows, n_parts, n_bins):
    n_feat = bins.shape[0]
    m = rows.shape[0]
    g = np.empty(m)
    pb = np.empty(m, np.int64)
    for i in range(m):
        g[i] = resid[rows[i]]
        pb[i] = part[rows[i]] * n_bins
    sums = np.zeros((n_feat, n_parts * n_bins))
    counts = np.zeros((n_feat, n_parts * n_bins), np.int64)
    for f in range(n_feat):
        hs = sums[f]
        hc = counts[f]
        col = bins[f]
        for i in range(m):
            c = pb[i] + col[rows[i]]
            hs[c] += g[i]
            hc[c] += 1
    return sums, counts


@njit(parallel=True, cache=True, nogil=True)
def _histogram_nb_parallel(bins, part, resid, rows, n_parts, n_bins):
    # one feature per task; each cell is still summed in row order
    n_feat = bins.shape[0]
    m = rows.shape[0]
    g = np.empty(m)
    pb = np.empty(m, np.int64)
    for i in range(m):
        g[i] = resid[rows[i]]
        pb[i] = part[rows[i]] * n_bins
    sums = np.zeros((n_feat, n_parts * n_bins))
    counts = np.zeros((n_feat, n_parts * n_bins), np.int64)
    for f in prange(n_feat):
        col = bins[f]
        for i in range(m):
            c = pb[i] + col[rows[i]]
            sums[f, c] += g[i]
            counts[f, c] += 1
    return sums, counts


def _to_part_major(sums, counts, n_parts, n_bins):
    n_feat = sums.shape[0]
    s = sums.reshape(n_feat, n_parts, n_bins).transpose(1, 0, 2)
    c = counts.reshape(n_feat, n_parts, n_bins).transpose(1, 0, 2)
    return np.ascontiguousarray(s), np.ascontiguousarray(c)


# --------------------------------------------------------------------------
# oblivious-tree evaluation
# --------------------------------------------------------------------------

def _leaf_index_np(X, feats, thresholds, missing_left):
    idx = np.zeros(X.shape[0], np.int64)
    for j in range(feats.shape[0]):
        f = feats[j]
        if f < 0:
            continue
        v = X[:, f]
        nan = np.isnan(v)
        with np.errstate(invalid="ignore"):
            bit = v > thresholds[j]
        bit = np.where(nan, not missing_left[j], bit)
        idx |= bit.astype(np.int64) << j
    return idx


@njit
def _leaf_index_nb(X, feats, thresholds, missing_left):
    n = X.shape[0]
    out = np.zeros(n, np.int64)
    for i in range(n):
        k = 0
        for j in range(feats.shape[0]):
            f = feats[j]
            if f < 0:
                continue
            v = X[i, f]
            if np.isnan(v):
                bit = 0 if missing_left[j] else 1
            else:
                bit = 1 if v > thresholds[j] else 0
            k |= bit << j
        out[i] = k
    return out


def _predict_np(X, feats, thresholds, missing_left, leaves, init, shrinkage):
    F = np.full(X.shape[0], init)
    for t in range(feats.shape[0]):
        leaf = _leaf_index_np(X, feats[t], thresholds[t], missing_left[t])
        F += shrinkage * leaves[t][leaf]
    return F


@njit
def _predict_nb(X, feats, thresholds, missing_left, leaves, init, shrinkage):
    n = X.shape[0]
    F = np.full(n, init)
    for t in range(feats.shape[0]):
        leaf = _leaf_index_nb(X, feats[t], thresholds[t], missing_left[t])
        for i in range(n):
            F[i] += shrinkage * leaves[t, leaf[i]]
    return F


# --------------------------------------------------------------------------
# distributed-memory paragraph-vector SGD with negative sampling
# --------------------------------------------------------------------------
# tokens: flat vocab indices; offsets: session boundaries (S+1);
# negatives: (epochs * T, K) pre-drawn noise indices, consumed in order.

@njit
def _sig(f):
    if f >= 0:
        return 1.0 / (1.0 + math.exp(-f))
    e = math.exp(f)
    return e / (1.0 + e)


@njit
def _softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit
def _dm_train_nb(tokens, offsets, W, Wp, D, negatives, window, alpha0, alpha_min, epochs):
    T = tokens.shape[0]
    S = offsets.shape[0] - 1
    n = W.shape[1]
    K = negatives.shape[1]
    total = epochs * T
    losses = np.zeros(epochs)
    h = np.empty(n)
    neu1e = np.empty(n)
    outs = np.empty(K + 1, np.int64)
    gs = np.empty(K + 1)
    processed = 0
    for ep in range(epochs):
        ep_loss = 0.0
        for s in range(S):
            a = offsets[s]
            b = offsets[s + 1]
            for t in range(a, b):
                alpha = alpha0 - (alpha0 - alpha_min) * processed / total
                if alpha < alpha_min:
                    alpha = alpha_min
                lo = max(a, t - window)
                hi = min(b, t + window + 1)
                m = hi - lo - 1
                for d in range(n):
                    h[d] = D[s, d]
                for c in range(lo, hi):
                    if c != t:
                        w = tokens[c]
                        for d in range(n):
                            h[d] += W[w, d]
                for d in range(n):
                    h[d] /= m + 1
                target = tokens[t]
                outs[0] = target
                nout = 1
                for j in range(K):
                    w = negatives[processed, j]
                    if w != target:
                        outs[nout] = w
                        nout += 1
                for d in range(n):
                    neu1e[d] = 0.0
                for o in range(nout):
                    w = outs[o]
                    f = 0.0
                    for d in range(n):
                        f += h[d] * Wp[w, d]
                    if o == 0:
                        g = 1.0 - _sig(f)
                        ep_loss += _softplus(-f)
                    else:
                        g = -_sig(f)
                        ep_loss += _softplus(f)
                    gs[o] = g
                    for d in range(n):
                        neu1e[d] += g * Wp[w, d]
                for o in range(nout):
                    w = outs[o]
                    step = alpha * gs[o]
                    for d in range(n):
                        Wp[w, d] += step * h[d]
                scale = alpha / (m + 1)
                for c in range(lo, hi):
                    if c != t:
                        w = tokens[c]
                        for d in range(n):
                            W[w, d] += scale * neu1e[d]
                for d in range(n):
                    D[s, d] += scale * neu1e[d]
                processed += 1
        losses[ep] = ep_loss / T
    return losses


def _softplus_np(x):
    return np.logaddexp(0.0, x)


def _dm_train_np(tokens, offsets, W, Wp, D, negatives, window, alpha0, alpha_min, epochs):
    T = tokens.shape[0]
    S = offsets.shape[0] - 1
    total = epochs * T
    losses = np.zeros(epochs)
    processed = 0
    for ep in range(epochs):
        ep_loss = 0.0
        for s in range(S):
            a, b = offsets[s], offsets[s + 1]
            for t in range(a, b):
                alpha = max(alpha0 - (alpha0 - alpha_min) * processed / total, alpha_min)
                lo, hi = max(a, t - window), min(b, t + window + 1)
                ctx = np.r_[tokens[lo:t], tokens[t + 1:hi]]
                m = ctx.size
                h = (D[s] + W[ctx].sum(axis=0)) / (m + 1)
                target = tokens[t]
                neg = negatives[processed]
                outs = np.r_[target, neg[neg != target]]
                f = Wp[outs] @ h
                sig = np.where(f >= 0, 1.0 / (1.0 + np.exp(-np.abs(f))),
                               np.exp(-np.abs(f)) / (1.0 + np.exp(-np.abs(f))))
                g = -sig
                g[0] = 1.0 - sig[0]
                ep_loss += _softplus_np(-f[0]) + _softplus_np(f[1:]).sum()
                neu1e = g @ Wp[outs]
                np.add.at(Wp, outs, alpha * g[:, None] * h[None, :])
                scale = alpha / (m + 1)
                np.add.at(W, ctx, scale * neu1e)
                D[s] += scale * neu1e
                processed += 1
        losses[ep] = ep_loss / T
    return losses


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def group_reduce(codes, ts):
    codes = np.ascontiguousarray(codes, np.int64)
    ts = np.ascontiguousarray(ts, np.int64)
    if _jit.USE_NUMBA:
        return _group_reduce_nb(codes, ts)
    return _group_reduce_np(codes, ts)


def histogram(bins, part, resid, rows, n_parts, n_bins, threads=1):
    if _jit.USE_NUMBA:
        if threads > 1:
            _jit.set_num_threads(threads)
            out = _histogram_nb_parallel(bins, part, resid, rows, n_parts, n_bins)
        else:
            out = _histogram_nb(bins, part, resid, rows, n_parts, n_bins)
        return _to_part_major(*out, n_parts, n_bins)
    return _histogram_np(bins, part, resid, rows, n_parts, n_bins)


def leaf_index(X, feats, thresholds, missing_left):
    X = np.ascontiguousarray(X, np.float64)
    if _jit.USE_NUMBA:
        return _leaf_index_nb(X, feats, thresholds, missing_left)
    return _leaf_index_np(X, feats, thresholds, missing_left)


def predict_scores(X, feats, thresholds, missing_left, leaves, init, shrinkage):
    X = np.ascontiguousarray(X, np.float64)
    if _jit.USE_NUMBA:
        return _predict_nb(X, feats, thresholds, missing_left, leaves, float(init), float(shrinkage))
    return _predict_np(X, feats, thresholds, missing_left, leaves, float(init), float(shrinkage))


def dm_train(tokens, offsets, W, Wp, D, negatives, window, alpha0, alpha_min, epochs):
    """Run ``epochs`` passes of DM negative-sampling SGD in place; returns per-epoch mean loss."""
    args = (np.ascontiguousarray(tokens, np.int64), np.ascontiguousarray(offsets, np.int64),
            W, Wp, D, np.ascontiguousarray(negatives, np.int64),
            int(window), float(alpha0), float(alpha_min), int(epochs))
    if _jit.USE_NUMBA:
        return _dm_train_nb(*args)
    return _dm_train_np(*args)
