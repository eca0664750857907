"""Pool construction, candidate generation, ranking and evaluation."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gbm, offer2vec, trackers
from .datamodel import Action, Catalog, EventLog, TimeWindow, held_out, split_time_window
from .errors import (EmptyCandidates, LeakageError, NoTestUsers, UnknownExperiment, UnknownShop,
                     UntrainedModel)
from .trackers import ActionFilter, Dim, FeatureSchema, RegionBin, RegionBinning, TrackerKey, Window

DCG_DECAY = 0.85
TOP_K = 10
POPULARITY_KEY = TrackerKey(ActionFilter.ANY, (Dim.SHOP, Dim.OFFER), Window.ALLTIME)
SYSTEMS = ("boostjet", "boostjet-pop", "popularity")
EXPERIMENTS = ("neg", "gamma", "ablation", "candidates")
NEG_GRID = (5, 15, 25)
GAMMA_GRID = (0.3, 0.1, 0.03, 0.01)
NEG_SWEEP_GAMMA = 0.03
CONVERGENCE_RATIO = 0.9


@dataclass(frozen=True)
class PipelineConfig:
    k_init: int = 2000
    k_final: int = 500
    n_pers: int = 5
    n_neg: int = 25
    delta: int = 1800
    per_shop: bool = True
    n_price_bins: int = trackers.N_PRICE_BINS
    region_bin_a: int = 0
    region_bin_b: int = 1
    eval_fraction: float = 0.1

    @property
    def binning(self):
        return RegionBinning(self.region_bin_a, self.region_bin_b)


def stage_seed(seed, stage):
    """Independent integer seed for a named stage."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())]).generate_state(1)[0])


def stage_rng(seed, stage):
    return np.random.default_rng(stage_seed(seed, stage))


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------

def last_region_bins(past: EventLog, binning: RegionBinning) -> dict:
    """Region bin of each user's latest event."""
    if len(past) == 0:
        return {}
    rev = slice(None, None, -1)
    users, first = np.unique(past.user[rev], return_index=True)
    regions = past.region[rev][first]
    return dict(zip(users.tolist(), binning.bins(regions).tolist()))


class FeatureBuilder:
    """Feature rows for (user, offer) pairs from one past window."""

    def __init__(self, schema: FeatureSchema, store: trackers.TrackerStore, catalog: Catalog,
                 pattern: offer2vec.PatternIndex | None = None, past: EventLog | None = None,
                 n_price_bins=trackers.N_PRICE_BINS):
        self.schema = schema
        self.store = store
        self.catalog = catalog
        self.pattern = pattern
        self.n_price_bins = n_price_bins
        past = past if past is not None else EventLog.empty()
        self.regions = last_region_bins(past, store.region_binning)
        pairs = np.unique(np.stack([past.user, past.offer], axis=1), axis=0) if len(past) else np.zeros((0, 2), np.int64)
        cut = np.flatnonzero(np.diff(pairs[:, 0])) + 1
        self._seen = {int(g[0, 0]): frozenset(g[:, 1].tolist()) for g in np.split(pairs, cut) if len(g)}
        self._popular = {}

    @classmethod
    def build(cls, past: EventLog, catalog: Catalog, schema: FeatureSchema, as_of, embeddings,
              cfg: PipelineConfig = PipelineConfig(), threads=1, shards=1):
        store = aggregate_store(past, catalog, schema, as_of, cfg, threads, shards)
        return cls.from_parts(past, catalog, schema, store, embeddings, cfg)

    @classmethod
    def from_parts(cls, past, catalog, schema, store, embeddings, cfg: PipelineConfig = PipelineConfig()):
        pattern = None
        if schema.pattern_index is not None and embeddings:
            pattern = offer2vec.PatternIndex(embeddings, past, catalog, cfg.delta)
        return cls(schema, store, catalog, pattern, past, cfg.n_price_bins)

    def region_bins(self, users):
        return np.array([self.regions.get(u, int(RegionBin.OTHER)) for u in np.asarray(users).tolist()],
                        np.int64)

    def seen(self, user) -> frozenset:
        return self._seen.get(int(user), frozenset())

    def matrix(self, users, offer_rows, columns=None, region_bins=None):
        users = np.asarray(users, np.int64)
        offer_rows = np.asarray(offer_rows, np.int64)
        columns = list(range(len(self.schema))) if columns is None else list(columns)
        pat = None
        if self.schema.pattern_index in columns and self.pattern is not None:
            pat = self.pattern.values(users, offer_rows)
        rb = self.region_bins(users) if region_bins is None else region_bins
        return trackers.tracker_matrix(self.schema, self.store, self.catalog, users, offer_rows, rb,
                                       pat, columns, self.n_price_bins)

    def popular(self, shop, n=None):
        """Offer ids of ``shop`` by descending all-time Any count, ties by ascending id."""
        return top_popular(self.store, self.catalog, shop, n, self._popular)


def aggregate_store(past, catalog, schema, as_of, cfg: PipelineConfig = PipelineConfig(), threads=1, shards=1):
    """Tracker tables for ``schema`` plus the popularity table candidate generation needs."""
    return trackers.aggregate(past, schema, as_of, catalog, cfg.binning, cfg.n_price_bins,
                              extra_keys=(POPULARITY_KEY,), shards=shards, threads=threads)


def top_popular(store: trackers.TrackerStore, catalog: Catalog, shop_id, n=None, cache=None):
    shop_id = int(shop_id)
    if cache is not None and shop_id in cache:
        ranked = cache[shop_id]
    else:
        offers = catalog.shop_offers(shop_id)
        if offers.size == 0:
            raise UnknownShop(f"shop {shop_id} has no offers in the catalog")
        counts = store.counts(POPULARITY_KEY, [np.full(offers.size, shop_id), offers])
        ranked = offers[np.lexsort((offers, -counts))]
        if cache is not None:
            cache[shop_id] = ranked
    return ranked if n is None else ranked[:n]


# --------------------------------------------------------------------------
# training pool
# --------------------------------------------------------------------------

def sample_negatives(positive, popular, n, exclude, rng):
    """Up to ``n`` distinct popular offers, none equal to ``positive`` or in ``exclude``."""
    eligible = np.array([o for o in np.asarray(popular).tolist() if o != positive and o not in exclude],
                        np.int64)
    if eligible.size <= n:
        return eligible
    return eligible[rng.choice(eligible.size, size=n, replace=False)]


def build_pool(future: EventLog, builder: FeatureBuilder, n_neg, rng, k_init=2000, boundary=None):
    """One positive row per future click plus up to ``n_neg`` sampled popular negatives."""
    if boundary is None:
        boundary = int(future.ts.min()) if len(future) else builder.store.as_of
    last = builder.store.max_ts()
    if builder.store.as_of > boundary or (last is not None and last >= boundary):
        raise LeakageError(f"feature store reaches {max(builder.store.as_of, last or 0)}, "
                           f"past the label boundary {boundary}")
    clicks = future.select(future.action == Action.CLICK)
    clicked = {}
    for u, o in zip(clicks.user.tolist(), clicks.offer.tolist()):
        clicked.setdefault(u, set()).add(o)
    users, shops, offers, labels = [], [], [], []
    for u, s, o in zip(clicks.user.tolist(), clicks.shop.tolist(), clicks.offer.tolist()):
        neg = sample_negatives(o, builder.popular(s, k_init), n_neg, clicked[u], rng)
        users += [u] * (1 + neg.size)
        shops += [s] * (1 + neg.size)
        offers += [o] + neg.tolist()
        labels += [1] + [0] * neg.size
    users = np.array(users, np.int64)
    offers = np.array(offers, np.int64)
    X = builder.matrix(users, builder.catalog.rows(offers)) if users.size else np.zeros((0, len(builder.schema)))
    return gbm.TrainPool(X, np.array(labels, np.float64), builder.schema.names,
                         {"user": users, "shop": np.array(shops, np.int64), "offer": offers})


# --------------------------------------------------------------------------
# candidates and ranking
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateSet:
    user_id: int
    shop_id: int
    offers: tuple
    provenance: str = "personalized"


@dataclass(frozen=True)
class RecommendationList:
    user_id: int
    offers: tuple
    probabilities: tuple

    def __len__(self):
        return len(self.offers)


def personalized_columns(model: gbm.GbmModel, schema: FeatureSchema, n_pers):
    """Top ``n_pers`` personalized columns by model importance (ties by column)."""
    cols = np.flatnonzero(schema.personalized)
    imp = model.importance[cols]
    return [int(c) for c in cols[np.lexsort((cols, -imp))][:n_pers]]


class CandidateGenerator:
    """Popular set, then rescoring with only the strongest personalized features.

    Non-personalized columns are computed once per (shop, user region bin)
    with cold-user values in every personalized column; each user then
    overwrites only the selected personalized columns.
    """

    def __init__(self, model: gbm.GbmModel, builder: FeatureBuilder, cfg: PipelineConfig = PipelineConfig()):
        if model is None or not model.trees:
            raise UntrainedModel("candidate generation needs a trained model")
        self.model = model
        self.builder = builder
        self.cfg = cfg
        self.columns = personalized_columns(model, builder.schema, cfg.n_pers)
        self._base = {}

    def _base_matrix(self, shop, rbin):
        key = (shop, rbin)
        if key not in self._base:
            offers = self.builder.popular(shop, self.cfg.k_init)
            rows = self.builder.catalog.rows(offers)
            X = self.builder.matrix(np.full(rows.size, -1), rows, region_bins=np.full(rows.size, rbin))
            self._base[key] = (offers, rows, X)
        return self._base[key]

    def __call__(self, user, shop):
        return self.many([user], [shop])[0]

    def many(self, users, shops):
        rbins = self.builder.region_bins(users)
        out = []
        blocks, per_user = [], []
        for u, s, rb in zip(list(users), list(shops), rbins.tolist()):
            offers, rows, X = self._base_matrix(int(s), rb)
            X = X.copy()
            if self.columns:
                X[:, self.columns] = self.builder.matrix(np.full(rows.size, u), rows, self.columns,
                                                         np.full(rows.size, rb))
            blocks.append(X)
            per_user.append(offers)
        scores = self.model.decision_function(np.vstack(blocks)) if blocks else np.zeros(0)
        pos = 0
        for u, s, offers in zip(list(users), list(shops), per_user):
            F = scores[pos:pos + offers.size]
            pos += offers.size
            top = offers[np.lexsort((offers, -F))][:self.cfg.k_final]
            seen = self.builder.seen(u)
            out.append(CandidateSet(int(u), int(s), tuple(o for o in top.tolist() if o not in seen)))
        return out


def popular_candidates(builder: FeatureBuilder, user, shop, n):
    seen = builder.seen(user)
    offers = builder.popular(shop, n)
    return CandidateSet(int(user), int(shop), tuple(o for o in offers.tolist() if o not in seen), "popular")


def rank(user, offers, probabilities, k=TOP_K):
    offers = np.asarray(offers, np.int64)
    p = np.asarray(probabilities, np.float64)
    order = np.lexsort((offers, -p))[:k]
    return RecommendationList(int(user), tuple(offers[order].tolist()), tuple(p[order].tolist()))


def recommend(candidates: CandidateSet, model: gbm.GbmModel, builder: FeatureBuilder, k=TOP_K):
    return recommend_many([candidates], model, builder, k)[0]


def recommend_many(candidate_sets, model: gbm.GbmModel, builder: FeatureBuilder, k=TOP_K):
    """Score every candidate with the full feature vector; keep the top ``k`` per user."""
    for c in candidate_sets:
        if not c.offers:
            raise EmptyCandidates(f"user {c.user_id} has no candidates in shop {c.shop_id}")
    users = np.concatenate([np.full(len(c.offers), c.user_id, np.int64) for c in candidate_sets]) \
        if candidate_sets else np.zeros(0, np.int64)
    offers = np.concatenate([np.asarray(c.offers, np.int64) for c in candidate_sets]) \
        if candidate_sets else np.zeros(0, np.int64)
    P = model.predict_proba(builder.matrix(users, builder.catalog.rows(offers))) if users.size else np.zeros(0)
    out, pos = [], 0
    for c in candidate_sets:
        n = len(c.offers)
        out.append(rank(c.user_id, offers[pos:pos + n], P[pos:pos + n], k))
        pos += n
    return out


def dcg(recs, relevant, decay=DCG_DECAY):
    offers = recs.offers if isinstance(recs, RecommendationList) else recs
    return float(sum(decay ** i for i, o in enumerate(offers) if o in relevant))


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TestCase:
    user_id: int
    shop_id: int
    relevant: frozenset


def test_cases(test: EventLog, builder: FeatureBuilder, delta=1800):
    """Each user's last held-out (user, shop) session, relevant = its unseen clicked offers.

    Users whose last session has no click are not test users.
    """
    if len(test) == 0:
        return []
    order = np.lexsort((test.ts, test.shop, test.user))
    u, s, t = test.user[order], test.shop[order], test.ts[order]
    a, o = test.action[order], test.offer[order]
    new = np.ones(u.size, bool)
    new[1:] = (u[1:] != u[:-1]) | (s[1:] != s[:-1]) | (t[1:] > t[:-1] + delta)
    sid = np.cumsum(new) - 1
    starts = np.flatnonzero(new)
    ends = np.r_[starts[1:], u.size]
    last = {}
    for i, (a0, b0) in enumerate(zip(starts.tolist(), ends.tolist())):
        user, end_ts, shop = int(u[a0]), int(t[b0 - 1]), int(s[a0])
        cur = last.get(user)
        if cur is None or (end_ts, -shop) > cur[0]:
            last[user] = ((end_ts, -shop), i)
    del sid
    cases = []
    for user in sorted(last):
        i = last[user][1]
        a0, b0 = starts[i], ends[i]
        clicks = o[a0:b0][a[a0:b0] == Action.CLICK]
        if clicks.size == 0:
            continue
        seen = builder.seen(user)
        cases.append(TestCase(user, int(s[a0]), frozenset(c for c in clicks.tolist() if c not in seen)))
    return cases


@dataclass
class EvalResult:
    system: str
    mean_dcg: float
    per_user: dict = field(default_factory=dict)

    @property
    def n_users(self):
        return len(self.per_user)


def system_recommendations(system, cases, builder: FeatureBuilder, model=None, cfg=PipelineConfig()):
    if system == "popularity":
        return [RecommendationList(c.user_id, popular_candidates(builder, c.user_id, c.shop_id, None).offers[:TOP_K],
                                   ()) for c in cases]
    if system == "boostjet-pop":
        cands = [popular_candidates(builder, c.user_id, c.shop_id, cfg.k_final) for c in cases]
    elif system == "boostjet":
        cands = CandidateGenerator(model, builder, cfg).many([c.user_id for c in cases],
                                                             [c.shop_id for c in cases])
    else:
        raise ValueError(f"unknown system {system!r}")
    if model is None or not model.trees:
        raise UntrainedModel(f"{system} needs a trained model")
    keep = [c for c in cands if c.offers]
    recs = {r.user_id: r for r in recommend_many(keep, model, builder)}
    return [recs.get(c.user_id, RecommendationList(c.user_id, (), ())) for c in cands]


def evaluate(cases, system, builder: FeatureBuilder, model=None, cfg=PipelineConfig()) -> EvalResult:
    if not cases:
        raise NoTestUsers("no test user has a click in the held-out region")
    recs = system_recommendations(system, cases, builder, model, cfg)
    per_user = {c.user_id: dcg(r, c.relevant) for c, r in zip(cases, recs)}
    return EvalResult(system, float(np.mean(list(per_user.values()))), per_user)


# --------------------------------------------------------------------------
# end-to-end preparation and experiments
# --------------------------------------------------------------------------

@dataclass
class Prepared:
    """Everything the stages share: windows, builders and held-out test users."""
    log: EventLog
    catalog: Catalog
    window: TimeWindow
    schema: FeatureSchema
    cfg: PipelineConfig
    dm_cfg: offer2vec.DmTrainConfig
    seed: int = 0
    threads: int = 1
    builder: FeatureBuilder = None
    future: EventLog = None
    _eval_builder: FeatureBuilder = None

    @classmethod
    def create(cls, log, catalog, schema, cfg=PipelineConfig(), dm_cfg=offer2vec.DmTrainConfig(),
               window=None, seed=0, threads=1):
        window = window or TimeWindow.from_ratios(log)
        p = cls(log, catalog, window, schema, cfg, dm_cfg, seed, threads)
        past, p.future = split_time_window(log, window)
        p.builder = p.make_builder(past, window.feature_end)
        return p

    def make_builder(self, past, as_of):
        emb = None
        if self.schema.pattern_index is not None:
            emb = train_embeddings(past, self.dm_cfg, self.cfg, self.seed, self.threads, as_of)
        return FeatureBuilder.build(past, self.catalog, self.schema, as_of, emb, self.cfg, self.threads)

    @property
    def eval_builder(self):
        if self._eval_builder is None:
            upto = self.log.select(self.log.ts < self.window.train_end)
            self._eval_builder = self.make_builder(upto, self.window.train_end)
        return self._eval_builder

    def cases(self):
        return test_cases(held_out(self.log, self.window), self.eval_builder, self.cfg.delta)

    def pool(self, n_neg=None):
        n_neg = self.cfg.n_neg if n_neg is None else n_neg
        return build_pool(self.future, self.builder, n_neg, stage_rng(self.seed, "pool"), self.cfg.k_init,
                          self.window.feature_end)


def train_embeddings(past, dm_cfg, cfg, seed, threads, as_of):
    models = offer2vec.train_offer2vec(past, replace(dm_cfg, seed=stage_seed(seed, "embed")), cfg.delta,
                                       per_shop=cfg.per_shop, threads=threads)
    for m in models.values():
        m.as_of = as_of
    return models


def train_model(pool: gbm.TrainPool, gcfg: gbm.GbmTrainConfig, cfg: PipelineConfig, seed, threads=1):
    """Fit on a seeded split of the pool, tracking LLP on the held-out share."""
    train, ev = pool.split(cfg.eval_fraction, stage_seed(seed, "eval-split"))
    gcfg = replace(gcfg, seed=stage_seed(seed, "train"))
    return gbm.fit(train, gcfg, ev if ev.y.sum() > 0 else None, threads=threads)


def convergence_iteration(curve, threshold):
    """First iteration whose train loss is at most ``threshold``."""
    return gbm.iterations_to_threshold(np.asarray(curve, np.float64), threshold)


def constant_loss(y):
    """Mean log loss of the base-rate predictor."""
    y = np.asarray(y, np.float64)
    p = y.mean()
    return float(-(p * np.log(p) + (1 - p) * np.log1p(-p)))


def relative_convergence_iteration(curve, ratio=CONVERGENCE_RATIO):
    """First iteration whose loss is at most ``ratio`` times that run's constant-predictor loss."""
    curve = np.asarray(curve, np.float64)
    return gbm.iterations_to_threshold(curve, ratio * curve[0])


def write_tsv(path, header, rows, comment=None):
    lines = ([f"# {comment}"] if comment else []) + ["\t".join(header)] + ["\t".join(_fmt(v) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v):
    if isinstance(v, float):
        return "inf" if v == np.inf else f"{v:.10g}"
    return str(v)


def write_curve(path, model: gbm.GbmModel, comment=None):
    llp = model.eval_llp or [float("nan")] * len(model.train_loss)
    write_tsv(path, ("iteration", "train_loss", "eval_llp"),
              [(i, float(a), float(b)) for i, (a, b) in enumerate(zip(model.train_loss, llp))], comment)


def run_experiment(name, prep: Prepared, gcfg: gbm.GbmTrainConfig, out_dir=None, model=None):
    """Run one named experiment; returns (header, rows, {label: model})."""
    if name not in EXPERIMENTS:
        raise UnknownExperiment(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    models = {}
    if name in ("neg", "gamma"):
        # one fixed loss level per sweep: a fraction of the default pool's constant-predictor loss
        ref_pool = prep.pool()
        threshold = CONVERGENCE_RATIO * constant_loss(ref_pool.y)
        if name == "neg":
            runs = [(n, prep.pool(n) if n != prep.cfg.n_neg else ref_pool, replace(gcfg, shrinkage=NEG_SWEEP_GAMMA))
                    for n in NEG_GRID]
        else:
            runs = [(g, ref_pool, replace(gcfg, shrinkage=g)) for g in GAMMA_GRID]
        header = ("n_neg" if name == "neg" else "gamma", "iterations_to_threshold", "threshold",
                  "iterations_to_relative", "final_train_loss", "final_eval_llp")
        rows = []
        for value, pool, c in runs:
            m = train_model(pool, c, prep.cfg, prep.seed, prep.threads)
            models[f"{name}{value:g}"] = m
            rows.append((value, convergence_iteration(m.train_loss, threshold), threshold,
                         relative_convergence_iteration(m.train_loss), m.train_loss[-1], _last(m.eval_llp)))
    elif name == "ablation":
        header = ("dropped", "n_features", "final_train_loss", "final_eval_llp", "importance_share")
        rows = []
        pool = prep.pool()
        full = train_model(pool, gcfg, prep.cfg, prep.seed, prep.threads)
        models["all"] = full
        types = np.array(prep.schema.types)
        share = {t: float(full.importance[types == t].sum()) for t in trackers.FEATURE_TYPES}
        rows.append(("none", len(prep.schema), full.train_loss[-1], _last(full.eval_llp), 1.0))
        for t in trackers.FEATURE_TYPES:
            keep = np.flatnonzero(types != t)
            m = train_model(pool.columns(keep), gcfg, prep.cfg, prep.seed, prep.threads)
            models[f"without-{t}"] = m
            rows.append((t, int(keep.size), m.train_loss[-1], _last(m.eval_llp), share[t]))
    else:
        header = ("system", "mean_dcg", "n_users")
        if model is None:
            model = train_model(prep.pool(), gcfg, prep.cfg, prep.seed, prep.threads)
        models["boostjet"] = model
        cases = prep.cases()
        rows = []
        for system in SYSTEMS:
            r = evaluate(cases, system, prep.eval_builder, model, prep.cfg)
            rows.append((system, r.mean_dcg, r.n_users))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_tsv(out / f"{name}.tsv", header, rows)
        for label, m in models.items():
            write_curve(out / f"{name}_curve_{label}.tsv", m)
    return header, rows, models


def _last(xs):
    return float(xs[-1]) if xs else float("nan")
