"""Offer2Vec: δ-distant sessions and a distributed-memory paragraph-vector model.

Offers play the role of words and sessions the role of documents.  The
context representation is the mean of the surrounding offers' input
vectors and the session vector; training maximises the negative-sampling
log-likelihood of the centre offer with SGD.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .datamodel import EventLog
from .errors import EmptyCorpus, OutOfVocab, SchemaError

MODEL_MAGIC = "boostjet-offer2vec"
MODEL_VERSION = 1


# --------------------------------------------------------------------------
# sessions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Session:
    user_id: int
    offers: tuple  # ((offer_id, ts), ...)
    index: int = 0
    shop_id: int | None = None

    @property
    def offer_ids(self):
        return tuple(o for o, _ in self.offers)


def segment_sessions(history: Sequence, delta, user_id=0, shop_id=None) -> list[Session]:
    """Greedy left-to-right split of one ts-sorted ``(offer_id, ts)`` history.

    An offer joins the current session when its timestamp is at most
    ``delta`` seconds after the previous offer; otherwise it opens a new one.
    """
    sessions, current = [], []
    prev = None
    for offer, ts in history:
        if prev is not None and ts < prev:
            raise ValueError("history must be sorted by timestamp")
        if current and ts > prev + delta:
            sessions.append(Session(user_id, tuple(current), len(sessions), shop_id))
            current = []
        current.append((offer, ts))
        prev = ts
    if current:
        sessions.append(Session(user_id, tuple(current), len(sessions), shop_id))
    return sessions


@dataclass
class SessionTable:
    """All sessions of a log in flat form: session i spans offsets[i]:offsets[i+1]."""
    user: np.ndarray
    shop: np.ndarray
    offsets: np.ndarray
    offers: np.ndarray
    ts: np.ndarray

    def __len__(self):
        return int(self.user.shape[0])

    def session(self, i) -> Session:
        a, b = self.offsets[i], self.offsets[i + 1]
        return Session(int(self.user[i]), tuple(zip(self.offers[a:b].tolist(), self.ts[a:b].tolist())),
                       i, int(self.shop[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self.session(i)

    def subset(self, mask):
        idx = np.flatnonzero(mask)
        lens = np.diff(self.offsets)[idx]
        starts = self.offsets[idx]
        take = np.concatenate([np.arange(s, s + n) for s, n in zip(starts, lens)]) if idx.size else np.zeros(0, np.int64)
        return SessionTable(self.user[idx], self.shop[idx], np.r_[0, np.cumsum(lens)].astype(np.int64),
                            self.offers[take], self.ts[take])

    def last_per_user(self):
        """Index of each (user, shop)'s latest session, as {(user, shop): i}."""
        out = {}
        for i, (u, s) in enumerate(zip(self.user.tolist(), self.shop.tolist())):
            out[(u, s)] = i
        return out


def segment_log(log: EventLog, delta, per_shop=True) -> SessionTable:
    """Segment every user's (or user-and-shop's) history into δ-distant sessions."""
    if len(log) == 0:
        z = np.zeros(0, np.int64)
        return SessionTable(z, z.copy(), np.zeros(1, np.int64), z.copy(), z.copy())
    shop_key = log.shop if per_shop else np.zeros(len(log), np.int64)
    order = np.lexsort((log.ts, shop_key, log.user))
    u, s, t, o = log.user[order], shop_key[order], log.ts[order], log.offer[order]
    new = np.ones(len(log), bool)
    new[1:] = (u[1:] != u[:-1]) | (s[1:] != s[:-1]) | (t[1:] > t[:-1] + delta)
    starts = np.flatnonzero(new)
    offsets = np.r_[starts, len(log)].astype(np.int64)
    shop_out = log.shop[order][starts] if per_shop else np.full(starts.size, -1, np.int64)
    return SessionTable(u[starts].copy(), shop_out.copy(), offsets, o.copy(), t.copy())


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DmTrainConfig:
    dim: int = 64
    window: int = 2
    negatives: int = 5
    epochs: int = 10
    alpha: float = 0.025
    min_alpha: float = 0.0001
    ns_exponent: float = 0.75
    min_count: int = 2
    seed: int = 0

    def validate(self):
        if self.dim < 1 or self.window < 1 or self.negatives < 1 or self.epochs < 1:
            raise SchemaError("dim, window, negatives and epochs must all be >= 1")
        if not self.alpha > 0 or self.min_alpha < 0:
            raise SchemaError("alpha must be positive and min_alpha non-negative")


@dataclass
class EmbeddingModel:
    dim: int
    window: int
    offer_ids: np.ndarray          # sorted vocabulary
    W: np.ndarray                  # input (offer) vectors
    Wp: np.ndarray                 # output vectors
    D: np.ndarray = None           # session vectors of the training corpus
    counts: np.ndarray = None      # vocabulary frequencies
    as_of: int | None = None       # latest event ts the model has seen
    losses: np.ndarray = None
    noise: np.ndarray = None       # negative-sampling distribution over the vocab
    n_negatives: int = 5

    def __post_init__(self):
        if self.D is None:
            self.D = np.zeros((0, self.dim))

    @property
    def vocab_size(self):
        return int(self.offer_ids.shape[0])

    def index(self, offer_ids, strict=False):
        offer_ids = np.asarray(offer_ids, np.int64)
        if self.vocab_size == 0:
            pos = np.full(offer_ids.shape, -1, np.int64)
        else:
            p = np.searchsorted(self.offer_ids, offer_ids)
            pc = np.minimum(p, self.vocab_size - 1)
            pos = np.where((p < self.vocab_size) & (self.offer_ids[pc] == offer_ids), pc, -1)
        if strict and np.any(pos < 0):
            raise OutOfVocab(f"offer {offer_ids[pos < 0].ravel()[0]} is not in the vocabulary")
        return pos

    def vector(self, offer_id):
        i = self.index([offer_id])[0]
        return None if i < 0 else self.W[i]

    def __eq__(self, other):
        return (isinstance(other, EmbeddingModel) and self.dim == other.dim and self.window == other.window
                and self.as_of == other.as_of and np.array_equal(self.offer_ids, other.offer_ids)
                and np.array_equal(self.W, other.W) and np.array_equal(self.Wp, other.Wp))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    x = np.asarray(x, float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def dm_context(model, context_idx, session_idx):
    ctx = np.asarray(context_idx, np.int64)
    return (model.D[session_idx] + model.W[ctx].sum(axis=0)) / (ctx.size + 1)


def dm_score(model, context_offers, session, target_offer):
    """log σ(h · W'[target]) with h the mean of the context and session vectors.

    ``session`` is a training-session index into ``model.D`` or an explicit
    session vector.
    """
    ctx = model.index(context_offers, strict=True)
    t = model.index([target_offer], strict=True)[0]
    dvec = model.D[session] if np.ndim(session) == 0 else np.asarray(session, float)
    h = (dvec + model.W[ctx].sum(axis=0)) / (ctx.size + 1)
    return float(_log_sigmoid(h @ model.Wp[t]))


def dm_objective(model, context_idx, session_idx, target_idx, negative_idx):
    """Sampled log-likelihood of one centre position (vocab indices)."""
    h = dm_context(model, context_idx, session_idx)
    negs = np.asarray([n for n in negative_idx if n != target_idx], np.int64)
    return float(_log_sigmoid(h @ model.Wp[target_idx]) + _log_sigmoid(-(model.Wp[negs] @ h)).sum())


def dm_gradients(model, context_idx, session_idx, target_idx, negative_idx):
    """Analytic gradient of ``dm_objective`` w.r.t. every row it touches.

    Returns ``(g_W, g_D, g_Wp)`` as dicts from row index to gradient.
    """
    ctx = np.asarray(context_idx, np.int64)
    h = dm_context(model, ctx, session_idx)
    outs = [target_idx] + [n for n in negative_idx if n != target_idx]
    labels = np.r_[1.0, np.zeros(len(outs) - 1)]
    outs = np.asarray(outs, np.int64)
    g = labels - _sigmoid(model.Wp[outs] @ h)
    dh = g @ model.Wp[outs]
    g_wp = {}
    for j, gj in zip(outs.tolist(), g):
        g_wp[j] = g_wp.get(j, 0.0) + gj * h
    share = dh / (ctx.size + 1)
    g_w = {}
    for c in ctx.tolist():
        g_w[c] = g_w.get(c, 0.0) + share
    return g_w, {session_idx: share}, g_wp


def draw_negatives(model, rng, k):
    return rng.choice(model.vocab_size, size=k, p=model.noise)


def context_positions(start, stop, t, window):
    return [c for c in range(max(start, t - window), min(stop, t + window + 1)) if c != t]


def dm_sgd_step(model, t, session, rng=None, alpha=0.025, negatives=None, tokens=None):
    """One gradient-ascent step at centre position ``t`` of a training session.

    ``session`` is ``(session_idx, token_array)`` where the tokens are vocab
    indices.  Negatives are drawn from the model's noise distribution unless
    given.  Mutates the model and returns the gradient norms per block.
    """
    s_idx, toks = session
    toks = np.asarray(toks, np.int64)
    if negatives is None:
        negatives = draw_negatives(model, rng, model.n_negatives)
    ctx = toks[context_positions(0, toks.size, t, model.window)]
    g_w, g_d, g_wp = dm_gradients(model, ctx, s_idx, int(toks[t]), negatives)
    for j, g in g_wp.items():
        model.Wp[j] += alpha * g
    for c, g in g_w.items():
        model.W[c] += alpha * g
    model.D[s_idx] += alpha * g_d[s_idx]
    return {
        "W": float(np.sqrt(sum(float(g @ g) for g in g_w.values()))),
        "D": float(np.linalg.norm(g_d[s_idx])),
        "Wp": float(np.sqrt(sum(float(g @ g) for g in g_wp.values()))),
    }


def _tokenize(sessions, vocab_ids):
    """Map sessions to vocab indices, dropping OOV offers and empty sessions."""
    toks, lens = [], []
    for offers in sessions:
        idx = np.searchsorted(vocab_ids, offers)
        idx_c = np.minimum(idx, max(vocab_ids.size - 1, 0))
        keep = (idx < vocab_ids.size) & (vocab_ids[idx_c] == offers) if vocab_ids.size else np.zeros(len(offers), bool)
        kept = idx_c[keep]
        if kept.size:
            toks.append(kept)
            lens.append(kept.size)
    tokens = np.concatenate(toks) if toks else np.zeros(0, np.int64)
    return tokens.astype(np.int64), np.r_[0, np.cumsum(lens)].astype(np.int64)


def _session_offer_lists(sessions):
    if isinstance(sessions, SessionTable):
        o = sessions.offsets
        return [sessions.offers[o[i]:o[i + 1]] for i in range(len(sessions))], \
            (int(sessions.ts.max()) if sessions.ts.size else None)
    lists, latest = [], None
    for s in sessions:
        lists.append(np.asarray([x for x, _ in s.offers], np.int64))
        if s.offers:
            m = max(t for _, t in s.offers)
            latest = m if latest is None else max(latest, m)
    return lists, latest


def train_dm(sessions, cfg: DmTrainConfig = DmTrainConfig()) -> EmbeddingModel:
    """Train the DM model over ``sessions`` (SessionTable or Session list)."""
    cfg.validate()
    lists, latest = _session_offer_lists(sessions)
    allo = np.concatenate(lists) if lists else np.zeros(0, np.int64)
    ids, cnt = np.unique(allo, return_counts=True)
    keep = cnt >= cfg.min_count
    vocab, counts = ids[keep], cnt[keep]
    tokens, offsets = _tokenize(lists, vocab)
    if vocab.size == 0 or not np.any(np.diff(offsets) >= 2):
        raise EmptyCorpus("need at least one session with two in-vocabulary offers")

    rng = np.random.default_rng(cfg.seed)
    n, V, S = cfg.dim, vocab.size, offsets.size - 1
    W = (rng.random((V, n)) - 0.5) / n
    D = (rng.random((S, n)) - 0.5) / n
    Wp = np.zeros((V, n))
    noise = counts.astype(np.float64) ** cfg.ns_exponent
    noise /= noise.sum()
    negatives = rng.choice(V, size=(cfg.epochs * tokens.size, cfg.negatives), p=noise)
    losses = kernels.dm_train(tokens, offsets, W, Wp, D, negatives, cfg.window,
                              cfg.alpha, cfg.min_alpha, cfg.epochs)
    return EmbeddingModel(n, cfg.window, vocab, W, Wp, D, counts, latest, np.asarray(losses), noise,
                          cfg.negatives)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def session_vector(model: EmbeddingModel, offers: Iterable):
    """Mean input vector of the in-vocab offers; None when none are known."""
    idx = model.index(np.fromiter((int(o) for o in offers), np.int64))
    idx = idx[idx >= 0]
    if idx.size == 0:
        return None
    return model.W[idx].mean(axis=0)


def cosine(a, b):
    if a is None or b is None:
        return math.nan
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return math.nan
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pattern_feature(model: EmbeddingModel, recent_session, candidate_offer):
    """Cosine between the recent-session vector and the candidate's vector (NaN if undefined)."""
    if model is None or not recent_session:
        return math.nan
    return cosine(session_vector(model, recent_session), model.vector(candidate_offer))


# --------------------------------------------------------------------------
# per-shop training and batched pattern features
# --------------------------------------------------------------------------

def train_offer2vec(log: EventLog, cfg: DmTrainConfig, delta=1800, per_shop=True, threads=1):
    """Train one model per shop (or a single global one, keyed ``None``)."""
    table = segment_log(log, delta, per_shop=True)
    if not per_shop:
        return {None: train_dm(table, cfg)}
    shops = np.unique(table.shop).tolist()

    def fit(s):
        try:
            return s, train_dm(table.subset(table.shop == s), cfg)
        except EmptyCorpus:
            return s, None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fitted = list(pool.map(fit, shops))
    else:
        fitted = [fit(s) for s in shops]
    return {s: m for s, m in fitted if m is not None}


class PatternIndex:
    """Batched pattern feature: each user's latest past session per shop vs candidate offers."""

    def __init__(self, models: dict, past: EventLog, catalog, delta=1800):
        self.models = models
        self.catalog = catalog
        self.global_model = models.get(None)
        dim = next(iter(models.values())).dim if models else 1
        self.offer_vec = np.full((len(catalog), dim), np.nan)
        for r in range(len(catalog)):
            m = self._model_for(int(catalog.shop[r]))
            if m is not None:
                v = m.vector(int(catalog.offer_id[r]))
                if v is not None:
                    self.offer_vec[r] = v
        table = segment_log(past, delta, per_shop=True)
        self.session_vec = {}
        for (u, s), i in table.last_per_user().items():
            m = self._model_for(s)
            if m is None:
                continue
            a, b = table.offsets[i], table.offsets[i + 1]
            v = session_vector(m, table.offers[a:b])
            if v is not None:
                self.session_vec[(u, s)] = v
        self.dim = dim

    def _model_for(self, shop):
        return self.global_model if self.global_model is not None else self.models.get(shop)

    def values(self, users, offer_rows):
        users = np.asarray(users, np.int64)
        offer_rows = np.asarray(offer_rows, np.int64)
        shops = self.catalog.shop[offer_rows]
        S = np.full((users.size, self.dim), np.nan)
        for i, key in enumerate(zip(users.tolist(), shops.tolist())):
            v = self.session_vec.get(key)
            if v is not None:
                S[i] = v
        O = self.offer_vec[offer_rows]
        num = np.einsum("ij,ij->i", S, O)
        den = np.linalg.norm(S, axis=1) * np.linalg.norm(O, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(den > 0, num / den, np.nan)
        return np.clip(out, -1.0, 1.0)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_model(model: EmbeddingModel, path, comment=None):
    lines = []
    if comment:
        lines.append(f"# {comment}")
    as_of = "" if model.as_of is None else str(model.as_of)
    lines.append(f"{MODEL_MAGIC}\tversion={MODEL_VERSION}\tn={model.dim}\tk={model.window}"
                 f"\tvocab={model.vocab_size}\tas_of={as_of}")
    for i, oid in enumerate(model.offer_ids.tolist()):
        comps = [f"{x:.17g}" for x in model.W[i].tolist()] + [f"{x:.17g}" for x in model.Wp[i].tolist()]
        lines.append(f"{oid}\t" + "\t".join(comps))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> EmbeddingModel:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    i = 0
    while lines[i].startswith("#"):
        i += 1
    head = lines[i].split("\t")
    if head[0] != MODEL_MAGIC:
        raise SchemaError(f"{path}: not an offer2vec model file")
    meta = dict(h.split("=", 1) for h in head[1:])
    if int(meta["version"]) != MODEL_VERSION:
        raise SchemaError(f"{path}: unsupported model version {meta['version']}")
    n, k, V = int(meta["n"]), int(meta["k"]), int(meta["vocab"])
    body = [l.split("\t") for l in lines[i + 1:i + 1 + V]]
    ids = np.array([int(b[0]) for b in body], np.int64)
    vals = np.array([[float(x) for x in b[1:]] for b in body], np.float64).reshape(V, 2 * n)
    as_of = int(meta["as_of"]) if meta.get("as_of") else None
    return EmbeddingModel(n, k, ids, vals[:, :n].copy(), vals[:, n:].copy(), as_of=as_of)


def save_models(models: dict, directory, comment=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for old in d.glob("*.txt"):
        old.unlink()
    for shop, m in sorted(models.items(), key=lambda kv: -1 if kv[0] is None else kv[0]):
        name = "global.txt" if shop is None else f"shop_{shop}.txt"
        save_model(m, d / name, comment)


def load_models(directory) -> dict:
    out = {}
    for p in sorted(Path(directory).glob("*.txt")):
        key = None if p.stem == "global" else int(p.stem.split("_", 1)[1])
        out[key] = load_model(p)
    return out
