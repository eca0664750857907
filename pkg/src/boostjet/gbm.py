"""Gradient boosting with oblivious decision trees for binary classification.

Each tree applies one (feature, threshold) test per depth level to every
node at that level, so a depth-p tree is a 2^p table indexed by p bits.
Trees are fitted to the logistic-loss pseudo-residuals y - sigmoid(F) and
added with shrinkage: F_m = F_{m-1} + shrinkage * tree_m.
"""
from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import NoPositives, SchemaError, SchemaMismatch, SingleClassPool

MODEL_MAGIC = "boostjet-gbm"
MODEL_VERSION = 1
TIE_RTOL = 1e-12


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def sigmoid(F):
    """1 / (1 + exp(-F)), without overflow for large |F|."""
    F = np.asarray(F, np.float64)
    e = np.exp(-np.abs(F))
    out = np.where(F >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def _softplus(x):
    return np.logaddexp(0.0, x)


def logloss(y, F):
    """-y log sigmoid(F) - (1-y) log(1 - sigmoid(F)) in softplus form."""
    y = np.asarray(y, np.float64)
    F = np.asarray(F, np.float64)
    out = y * _softplus(-F) + (1.0 - y) * _softplus(F)
    return float(out) if out.ndim == 0 else out


def pseudo_residual(y, F):
    """Negative gradient of ``logloss`` in F."""
    r = np.asarray(y, np.float64) - sigmoid(F)
    return float(r) if np.ndim(r) == 0 else r


def llp(predictions, labels):
    """(LL(p) - LL(best constant)) / number of positives."""
    p = np.asarray(predictions, np.float64)
    c = np.asarray(labels, np.float64)
    n_pos = c.sum()
    if n_pos <= 0:
        raise NoPositives("LLP needs at least one positive label")
    pc = n_pos / c.size

    def ll(q):
        q = np.broadcast_to(q, c.shape)
        with np.errstate(divide="ignore"):
            return float(np.sum(np.where(c > 0, c * np.log(q), 0.0)
                                + np.where(c < 1, (1.0 - c) * np.log1p(-q), 0.0)))

    return (ll(p) - ll(pc)) / n_pos


# --------------------------------------------------------------------------
# trees and models
# --------------------------------------------------------------------------

@dataclass
class ObliviousTree:
    features: np.ndarray        # (p,) int64; -1 marks a no-op level
    thresholds: np.ndarray      # (p,) float64; x > threshold sets the level bit
    missing_left: np.ndarray    # (p,) bool; NaN goes to bit 0 when True
    leaf_values: np.ndarray     # (2**p,) float64
    gains: np.ndarray = None    # (p,) split score improvement per level

    def __post_init__(self):
        self.features = np.asarray(self.features, np.int64)
        self.thresholds = np.asarray(self.thresholds, np.float64)
        self.missing_left = np.asarray(self.missing_left, bool)
        self.leaf_values = np.asarray(self.leaf_values, np.float64)
        if self.gains is None:
            self.gains = np.zeros(self.depth)

    @property
    def depth(self):
        return int(self.features.shape[0])

    def leaf_index(self, X):
        X = np.atleast_2d(np.asarray(X, np.float64))
        return kernels.leaf_index(X, self.features, self.thresholds, self.missing_left)

    def __call__(self, X):
        return self.leaf_values[self.leaf_index(X)]

    def expand(self):
        """Explicit binary tree: list of levels, each a list of (feature, threshold, missing_left) nodes."""
        return [[(int(self.features[j]), float(self.thresholds[j]), bool(self.missing_left[j]))
                 for _ in range(2 ** j)] for j in range(self.depth)]

    def is_oblivious(self):
        levels = self.expand()
        shape_ok = (len(levels) == self.depth and self.leaf_values.shape == (2 ** self.depth,)
                    and self.thresholds.shape == (self.depth,) and self.missing_left.shape == (self.depth,))
        return shape_ok and all(len(set(nodes)) == 1 for nodes in levels)

    def __eq__(self, other):
        return (isinstance(other, ObliviousTree)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.thresholds, other.thresholds)
                and np.array_equal(self.missing_left, other.missing_left)
                and np.array_equal(self.leaf_values, other.leaf_values))


@dataclass
class GbmModel:
    initial_score: float
    shrinkage: float
    trees: list
    n_features: int
    depth: int
    schema_hash: str = ""
    train_loss: list = field(default_factory=list)
    eval_llp: list = field(default_factory=list)

    @property
    def importance(self):
        return feature_importance(self)

    def truncated(self, m):
        return GbmModel(self.initial_score, self.shrinkage, list(self.trees[:m]), self.n_features,
                        self.depth, self.schema_hash)

    def _stacked(self):
        if not self.trees:
            p = self.depth
            return (np.zeros((0, p), np.int64), np.zeros((0, p)), np.zeros((0, p), bool),
                    np.zeros((0, 2 ** p)))
        return (np.stack([t.features for t in self.trees]), np.stack([t.thresholds for t in self.trees]),
                np.stack([t.missing_left for t in self.trees]), np.stack([t.leaf_values for t in self.trees]))

    def decision_function(self, X):
        X = np.atleast_2d(np.asarray(X, np.float64))
        if X.shape[1] != self.n_features:
            raise SchemaMismatch(f"model expects {self.n_features} features, got {X.shape[1]}")
        return kernels.predict_scores(X, *self._stacked(), self.initial_score, self.shrinkage)

    def predict_proba(self, X):
        return sigmoid(self.decision_function(X))

    def __eq__(self, other):
        return (isinstance(other, GbmModel) and self.initial_score == other.initial_score
                and self.shrinkage == other.shrinkage and self.n_features == other.n_features
                and self.depth == other.depth and self.schema_hash == other.schema_hash
                and len(self.trees) == len(other.trees)
                and all(a == b for a, b in zip(self.trees, other.trees)))


def predict(model: GbmModel, x):
    """(score F, probability P) for one feature vector."""
    values = getattr(x, "values", x)
    schema = getattr(x, "schema", None)
    if schema is not None and model.schema_hash and schema_hash(schema) != model.schema_hash:
        raise SchemaMismatch("feature vector schema differs from the model's")
    values = np.asarray(values, np.float64)
    if values.ndim != 1 or values.shape[0] != model.n_features:
        raise SchemaMismatch(f"model expects {model.n_features} features, got shape {values.shape}")
    F = float(model.decision_function(values[None, :])[0])
    return F, sigmoid(F)


def schema_hash(names):
    return hashlib.sha256("\n".join(names).encode()).hexdigest()[:16]


def feature_importance(model: GbmModel, kind="frequency"):
    """Share of tree levels split on each feature (or share of split gain)."""
    imp = np.zeros(model.n_features)
    for t in model.trees:
        for f, g in zip(t.features.tolist(), t.gains.tolist()):
            if f >= 0:
                imp[f] += 1.0 if kind == "frequency" else g
    total = imp.sum()
    return imp / total if total > 0 else imp


# --------------------------------------------------------------------------
# training pool
# --------------------------------------------------------------------------

@dataclass
class TrainPool:
    X: np.ndarray
    y: np.ndarray
    names: tuple
    meta: dict = field(default_factory=dict)   # optional per-row columns (user, shop, offer)

    def __post_init__(self):
        self.X = np.asarray(self.X, np.float64)
        self.y = np.asarray(self.y, np.float64)
        self.names = tuple(self.names)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0] or self.X.shape[1] != len(self.names):
            raise SchemaMismatch("pool X, y and names disagree in shape")

    def __len__(self):
        return int(self.y.shape[0])

    def take(self, idx):
        return TrainPool(self.X[idx], self.y[idx], self.names, {k: v[idx] for k, v in self.meta.items()})

    def columns(self, cols):
        cols = list(cols)
        return TrainPool(self.X[:, cols], self.y, tuple(self.names[c] for c in cols), dict(self.meta))

    def split(self, fraction, seed):
        """Random (train, eval) split holding out ``fraction`` of the rows."""
        rng = np.random.default_rng(seed)
        n_eval = int(round(fraction * len(self)))
        perm = rng.permutation(len(self))
        ev, tr = np.sort(perm[:n_eval]), np.sort(perm[n_eval:])
        return self.take(tr), self.take(ev)

    def save(self, path, comment=None):
        """Tab-separated ``label`` + feature columns; missing values are empty fields."""
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        buf.write("\t".join(("label",) + self.names) + "\n")
        for yv, row in zip(self.y.tolist(), self.X.tolist()):
            buf.write(str(int(yv)) + "\t" + "\t".join("" if v != v else f"{v:.17g}" for v in row) + "\n")
        Path(path).write_text(buf.getvalue(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        i = 0
        while i < len(lines) and lines[i].startswith("#"):
            i += 1
        header = lines[i].split("\t")
        if header[0] != "label":
            raise SchemaError(f"{path}: pool header must start with 'label'")
        rows = [l.split("\t") for l in lines[i + 1:] if l]
        F = len(header) - 1
        for k, r in enumerate(rows):
            if len(r) != F + 1:
                raise SchemaError(f"{path}: row {k + 1} has {len(r) - 1} features, expected {F}")
        y = np.array([int(r[0]) for r in rows], np.float64)
        X = np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows], np.float64).reshape(len(rows), F)
        return cls(X, y, tuple(header[1:]))


# --------------------------------------------------------------------------
# binning and split search
# --------------------------------------------------------------------------

@dataclass
class BinnedData:
    bins: np.ndarray            # (F, n) uint8, missing coded as n_bins
    borders: list               # per feature, sorted candidate thresholds
    n_bins: int

    @property
    def missing_code(self):
        return self.n_bins


def quantize(X, n_bins=32):
    """Equal-frequency borders per feature; bin(x) = number of borders < x."""
    if not 2 <= n_bins <= 254:
        raise ValueError("n_bins must lie in [2, 254]")
    X = np.asarray(X, np.float64)
    n, F = X.shape
    bins = np.empty((F, n), np.uint8)
    borders = []
    for f in range(F):
        col = X[:, f]
        finite = col[~np.isnan(col)]
        uniq = np.unique(finite)
        if uniq.size <= n_bins:
            b = uniq[:-1]
        else:
            qs = np.quantile(finite, np.arange(1, n_bins) / n_bins, method="inverted_cdf")
            b = np.unique(qs)
            b = b[b < uniq[-1]]
        borders.append(b)
        code = np.searchsorted(b, col, side="left")
        code[np.isnan(col)] = n_bins
        bins[f] = code
    return BinnedData(bins, borders, n_bins)


def _level_scores(sums, counts, n_borders, min_leaf):
    """Split scores sum_child S^2/n for every (feature, border, missing side).

    Returns an array (F, max_borders, 2) with -inf where no candidate exists;
    index 0 of the last axis is missing-goes-left.
    """
    P, F, B1 = sums.shape
    nb = B1 - 1
    fin_s, fin_c = sums[:, :, :nb], counts[:, :, :nb]
    miss_s, miss_c = sums[:, :, nb], counts[:, :, nb]
    cs, cc = np.cumsum(fin_s, axis=2), np.cumsum(fin_c, axis=2)
    tot_s = cs[:, :, -1] + miss_s
    tot_c = cc[:, :, -1] + miss_c
    out = np.full((F, nb, 2), -np.inf)
    for side, add in ((0, True), (1, False)):
        ls = cs + (miss_s[:, :, None] if add else 0.0)
        lc = cc + (miss_c[:, :, None] if add else 0)
        rs = tot_s[:, :, None] - ls
        rc = tot_c[:, :, None] - lc
        with np.errstate(invalid="ignore", divide="ignore"):
            score = np.where(lc > 0, ls * ls / np.maximum(lc, 1), 0.0) + \
                np.where(rc > 0, rs * rs / np.maximum(rc, 1), 0.0)
        ok = np.ones((F, nb), bool)
        if min_leaf > 1:
            bad = ((lc > 0) & (lc < min_leaf)) | ((rc > 0) & (rc < min_leaf))
            ok &= ~bad.any(axis=0)
        total = score.sum(axis=0)
        out[:, :, side] = np.where(ok, total, -np.inf)
    valid = np.arange(nb)[None, :] < np.asarray(n_borders)[:, None]
    out[~valid] = -np.inf
    return out


def _apply_level(bins, missing_code, f, b, miss_left, rows=None):
    col = bins[f] if rows is None else bins[f, rows]
    return np.where(col == missing_code, not miss_left, col > b).astype(np.int64)


def _exhaustive_scores(data, resid, rows, part, n_parts, min_leaf):
    """Direct evaluation of every candidate (reference for the histogram path)."""
    F = data.bins.shape[0]
    nb = data.n_bins
    out = np.full((F, nb, 2), -np.inf)
    r = resid[rows]
    p0 = part[rows]
    for f in range(F):
        for b in range(len(data.borders[f])):
            for side, ml in ((0, True), (1, False)):
                child = p0 * 2 + _apply_level(data.bins, data.missing_code, f, b, ml, rows)
                s = np.bincount(child, weights=r, minlength=2 * n_parts)
                c = np.bincount(child, minlength=2 * n_parts)
                if min_leaf > 1 and np.any((c > 0) & (c < min_leaf)):
                    continue
                out[f, b, side] = float(np.sum(np.where(c > 0, s * s / np.maximum(c, 1), 0.0)))
    return out


def build_oblivious_tree(data: BinnedData, resid, rows, depth, min_samples_leaf=1,
                         exhaustive=False, threads=1):
    """Greedy level-wise oblivious tree on the active ``rows``.

    At each level every (feature, border, missing side) is applied to all
    current partitions at once; the one with the largest squared-error
    reduction wins, ties going to the lowest (feature, border).  Leaves hold
    the mean residual of their active rows (0 when empty).
    """
    rows = np.asarray(rows, np.int64)
    if rows.size == 0:
        raise ValueError("active subset is empty")
    resid = np.asarray(resid, np.float64)
    n = resid.shape[0]
    r = resid[rows]
    feats = np.full(depth, -1, np.int64)
    thr = np.full(depth, np.inf)
    mleft = np.ones(depth, bool)
    gains = np.zeros(depth)
    part = np.zeros(n, np.int64)
    if np.all(r == r[0]):
        return ObliviousTree(feats, thr, mleft, np.full(2 ** depth, r[0]), gains)

    n_borders = np.array([len(b) for b in data.borders])
    prev_score = r.sum() ** 2 / r.size
    for j in range(depth):
        n_parts = 2 ** j
        if exhaustive:
            scores = _exhaustive_scores(data, resid, rows, part, n_parts, min_samples_leaf)
        else:
            sums, counts = kernels.histogram(data.bins, part, resid, rows, n_parts, data.n_bins + 1, threads)
            scores = _level_scores(sums, counts, n_borders, min_samples_leaf)
        flat = scores.reshape(-1)
        top = flat.max() if flat.size else -np.inf
        if not np.isfinite(top):
            part = part * 2
            continue
        # equal partitions reached by different candidates (e.g. mirrored missing sides) can
        # differ in the last bits, so scores within rounding of the max count as ties
        best = int(np.flatnonzero(flat >= top - TIE_RTOL * abs(top))[0])
        f, b, side = np.unravel_index(best, scores.shape)
        ml = side == 0
        feats[j], thr[j], mleft[j] = f, data.borders[f][b], ml
        gains[j] = flat[best] - prev_score
        prev_score = flat[best]
        part = part * 2 + _apply_level(data.bins, data.missing_code, f, b, ml)
    # level j's bit sits at position j, so re-pack the build order (first level most significant)
    leaf = _repack(part, depth)
    sums = np.bincount(leaf[rows], weights=r, minlength=2 ** depth)
    cnt = np.bincount(leaf[rows], minlength=2 ** depth)
    leaves = np.where(cnt > 0, sums / np.maximum(cnt, 1), 0.0)
    return ObliviousTree(feats, thr, mleft, leaves, gains)


def _repack(part, depth):
    out = np.zeros_like(part)
    for j in range(depth):
        bit = (part >> (depth - 1 - j)) & 1
        out |= bit << j
    return out


# --------------------------------------------------------------------------
# boosting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GbmTrainConfig:
    iterations: int = 200
    shrinkage: float = 0.01
    depth: int = 6
    subsample: float = 0.5
    n_bins: int = 32
    min_samples_leaf: int = 1
    seed: int = 0

    def validate(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.shrinkage <= 1:
            raise ValueError("shrinkage must lie in (0, 1]")
        if not 1 <= self.depth <= 16:
            raise ValueError("depth must lie in [1, 16]")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")


def fit(pool: TrainPool, cfg: GbmTrainConfig = GbmTrainConfig(), eval_pool: TrainPool | None = None,
        threads=1, exhaustive=False) -> GbmModel:
    """Stochastic gradient boosting from the base-rate log-odds."""
    cfg.validate()
    y = pool.y
    pos = float(y.sum())
    neg = float(y.size - pos)
    if pos == 0 or neg == 0:
        raise SingleClassPool("training pool must contain both classes")
    init = math.log(pos / neg)
    data = quantize(pool.X, cfg.n_bins)
    rng = np.random.default_rng(cfg.seed)
    n = y.size
    n_sub = max(1, int(round(cfg.subsample * n)))
    F = np.full(n, init)
    model = GbmModel(init, cfg.shrinkage, [], pool.X.shape[1], cfg.depth, schema_hash(pool.names))
    model.train_loss.append(float(np.mean(logloss(y, F))))
    F_eval = None
    if eval_pool is not None and len(eval_pool):
        F_eval = np.full(len(eval_pool), init)
        model.eval_llp.append(llp(sigmoid(F_eval), eval_pool.y))
    for _ in range(cfg.iterations):
        if n_sub < n:
            rows = np.sort(rng.choice(n, size=n_sub, replace=False))
        else:
            rows = np.arange(n)
        resid = y - sigmoid(F)
        tree = build_oblivious_tree(data, resid, rows, cfg.depth, cfg.min_samples_leaf, exhaustive, threads)
        F += cfg.shrinkage * tree.leaf_values[tree.leaf_index(pool.X)]
        model.trees.append(tree)
        model.train_loss.append(float(np.mean(logloss(y, F))))
        if F_eval is not None:
            F_eval += cfg.shrinkage * tree(eval_pool.X)
            model.eval_llp.append(llp(sigmoid(F_eval), eval_pool.y))
    return model


def iterations_to_threshold(curve, threshold):
    """First iteration whose loss is <= threshold (inf if never)."""
    for i, v in enumerate(curve):
        if v <= threshold:
            return i
    return math.inf


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_model(model: GbmModel, path=None, comment=None):
    out = []
    if comment:
        out.append(f"# {comment}")
    out += [f"{MODEL_MAGIC}\t{MODEL_VERSION}", f"depth\t{model.depth}", f"shrinkage\t{model.shrinkage:.17g}",
            f"initial_score\t{model.initial_score:.17g}", f"iterations\t{len(model.trees)}",
            f"schema_hash\t{model.schema_hash}", f"n_features\t{model.n_features}"]
    for i, t in enumerate(model.trees):
        out.append(f"tree\t{i}")
        for f, th, ml in zip(t.features.tolist(), t.thresholds.tolist(), t.missing_left.tolist()):
            out.append(f"{f}\t{th:.17g}\t{'L' if ml else 'R'}")
        out += [f"{v:.17g}" for v in t.leaf_values.tolist()]
    text = "\n".join(out) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def load_model(path) -> GbmModel:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    i = 0
    while lines[i].startswith("#"):
        i += 1
    if lines[i].split("\t") != [MODEL_MAGIC, str(MODEL_VERSION)]:
        raise SchemaError(f"{path}: not a gbm model file")
    head = dict(l.split("\t", 1) for l in lines[i + 1:i + 7])
    p, M = int(head["depth"]), int(head["iterations"])
    model = GbmModel(float(head["initial_score"]), float(head["shrinkage"]), [], int(head["n_features"]),
                     p, head["schema_hash"])
    i += 7
    for _ in range(M):
        i += 1  # "tree <k>"
        levels = [lines[i + j].split("\t") for j in range(p)]
        i += p
        leaves = [float(v) for v in lines[i:i + 2 ** p]]
        i += 2 ** p
        model.trees.append(ObliviousTree([int(l[0]) for l in levels], [float(l[1]) for l in levels],
                                         [l[2] == "L" for l in levels], leaves))
    return model
