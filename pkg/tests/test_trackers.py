import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from boostjet import trackers as tr
from boostjet.datamodel import DAY, EventLog
from boostjet.errors import ArityError, SchemaError, UnknownOffer
from boostjet.trackers import ActionFilter as A
from boostjet.trackers import Dim, RegionBinning, TimeStat, TrackerKey, Window

from conftest import T0, make_catalog, random_log

ALL_DIMS = list(Dim)
SPAN = {Window.LASTDAY: DAY, Window.LASTWEEK: 7 * DAY, Window.LASTMONTH: 30 * DAY, Window.ALLTIME: None}


# -- brute-force oracle -------------------------------------------------------------

def event_value(log, i, dim, catalog, binning):
    """All values event i takes along ``dim`` (a set, since offers carry several name tags)."""
    o = int(log.offer[i])
    r = int(catalog.rows([o])[0])
    if dim == Dim.SHOP:
        return {int(log.shop[i])}
    if dim == Dim.USER:
        return {int(log.user[i])}
    if dim == Dim.OFFER:
        return {o}
    if dim == Dim.BRAND:
        return {int(catalog.brand[r])}
    if dim == Dim.NAMECAT:
        return {int(c) for c in catalog.tag_code[catalog.tag_row == r]}
    if dim == Dim.MODEL:
        return {int(catalog.model[r])}
    if dim == Dim.CATEGORY:
        return {int(catalog.category[r])}
    if dim == Dim.VENDOR:
        return {int(catalog.vendor[r])}
    if dim == Dim.REGION:
        return {int(binning(int(log.region[i])))}
    p = float(log.price[i])
    return set() if p <= 0 else {int(min(max(math.floor(math.log10(p)), 0), 6))}


def matching(log, key, values, as_of, catalog, binning):
    span = SPAN[key.effective_window]
    out = []
    for i in range(len(log)):
        if key.action != A.ANY and int(log.action[i]) != int(key.action):
            continue
        t = int(log.ts[i])
        if span is not None and not (as_of - span <= t < as_of):
            continue
        if all(v in event_value(log, i, d, catalog, binning) for d, v in zip(key.dims, values)):
            out.append(t)
    return out


def random_key(rng, window=None):
    k = int(rng.integers(1, 4))
    dims = tuple(Dim(int(d)) for d in rng.choice(len(ALL_DIMS), size=k, replace=False))
    w = Window(int(rng.integers(4))) if window is None else window
    return TrackerKey(A(int(rng.integers(5))), dims, w)


def query_values(rng, log, key, catalog, binning):
    """A tuple taken from a real event (usually a hit) or perturbed (usually a miss)."""
    i = int(rng.integers(len(log)))
    vals = []
    for d in key.dims:
        opts = sorted(event_value(log, i, d, catalog, binning)) or [0]
        vals.append(opts[int(rng.integers(len(opts)))])
    if rng.random() < 0.2:
        vals[0] += 1
    return tuple(vals)


class TestOracle:
    def test_randomized_counts_and_invariants(self):
        rng = np.random.default_rng(2024)
        catalog = make_catalog(14, 3, seed=1)
        binning = RegionBinning(0, 1)
        n_cases = 0
        for case in range(220):
            log = random_log(rng, catalog, n_events=int(rng.integers(1, 50)), n_users=3)
            as_of = int(log.ts[-1]) + int(rng.integers(1, 3 * DAY))
            key = random_key(rng)
            family = [TrackerKey(a, key.dims, w) for a in A for w in Window]
            deltas = [tr.delta(key.action, key.dims, s) for s in TimeStat]
            store = tr.aggregate(log, [tr.count(k.action, k.dims, k.window) for k in family] + deltas,
                                 as_of, catalog, binning)
            for _ in range(3):
                vals = query_values(rng, log, key, catalog, binning)
                got = {(k.action, k.window): tr.lookup(store, tr.count(k.action, k.dims, k.window), vals)
                       for k in family}
                want = len(matching(log, key, vals, as_of, catalog, binning))
                assert got[(key.action, key.window)] == want, (case, key, vals)
                for a in A:
                    seq = [got[(a, w)] for w in (Window.LASTDAY, Window.LASTWEEK, Window.LASTMONTH, Window.ALLTIME)]
                    assert seq == sorted(seq), "window nesting"
                for w in Window:
                    assert got[(A.ANY, w)] == sum(got[(a, w)] for a in A if a != A.ANY), "Any decomposition"
                hits = matching(log, TrackerKey(key.action, key.dims, Window.ALLTIME), vals, as_of, catalog, binning)
                first = tr.lookup(store, deltas[TimeStat.SINCEFIRST], vals)
                prev = tr.lookup(store, deltas[TimeStat.SINCEPREV], vals)
                if hits:
                    assert (first, prev) == (as_of - min(hits), as_of - max(hits))
                else:
                    assert math.isnan(first) and math.isnan(prev)
                n_cases += 1
        assert n_cases >= 200

    def test_ratio_matches_recount(self):
        rng = np.random.default_rng(7)
        catalog = make_catalog(10, 2)
        binning = RegionBinning()
        for _ in range(60):
            log = random_log(rng, catalog, 40)
            as_of = int(log.ts[-1]) + 1
            num = TrackerKey(A(int(rng.integers(4))), (Dim.SHOP, Dim.USER, Dim.OFFER), Window.ALLTIME)
            den = TrackerKey(A.ANY, (Dim.SHOP, Dim.USER), Window.ALLTIME)
            spec = tr.TrackerSpec(tr.Kind.RATIO, num, den)
            store = tr.aggregate(log, [spec], as_of, catalog, binning)
            vals = query_values(rng, log, num, catalog, binning)
            n = len(matching(log, num, vals, as_of, catalog, binning))
            d = len(matching(log, den, vals[:2], as_of, catalog, binning))
            assert tr.lookup(store, spec, vals) == (n / d if d else 0.0)


class TestExamples:
    def make(self, events):
        ts, user, shop, offer, action = zip(*events)
        n = len(events)
        return EventLog(ts, user, shop, offer, action, [0] * n, [5.0] * n)

    def test_three_clicks(self):
        log = self.make([(T0 + i, 7, 1, 3, 0) for i in range(3)] + [(T0 + 9, 7, 1, 3, 3)])
        spec = tr.count(A.CLICK, (Dim.SHOP, Dim.USER))
        store = tr.aggregate(log, [spec], T0 + 100)
        assert tr.lookup(store, spec, (1, 7)) == 3
        assert tr.lookup(store, tr.count(A.CLICK, (Dim.SHOP, Dim.USER)), (1, 8)) == 0

    def test_last_week_excludes_older(self):
        as_of = T0 + 30 * DAY
        log = self.make([(as_of - 8 * DAY, 1, 0, 0, 0), (as_of - 2 * DAY, 1, 0, 0, 0), (as_of - 1, 1, 0, 0, 0)])
        spec = tr.count(A.ANY, (Dim.USER,), Window.LASTWEEK)
        assert tr.lookup(tr.aggregate(log, [spec], as_of), spec, (1,)) == 2

    def test_zero_denominator_gives_zero(self):
        log = self.make([(T0, 1, 0, 0, 0)])
        spec = tr.ratio(A.PURCHASE, (Dim.SHOP, Dim.OFFER), A.PURCHASE, (Dim.SHOP,))
        assert tr.lookup(tr.aggregate(log, [spec], T0 + 1), spec, (0, 0)) == 0.0

    def test_lookup_arity(self):
        spec = tr.count(A.ANY, (Dim.SHOP, Dim.USER))
        store = tr.aggregate(self.make([(T0, 1, 0, 0, 0)]), [spec], T0 + 1)
        with pytest.raises(ArityError):
            tr.lookup(store, spec, (0,))

    def test_as_of_before_last_event_rejected(self):
        with pytest.raises(ValueError):
            tr.aggregate(self.make([(T0 + 5, 1, 0, 0, 0)]), [tr.count(A.ANY, (Dim.USER,))], T0)


class TestBins:
    @pytest.mark.parametrize("price, expected", [(0.5, 0), (1, 0), (9.99, 0), (10, 1), (999, 2),
                                                 (1e6, 6), (5e9, 6), (0, tr.MISSING_BIN)])
    def test_price_bin(self, price, expected):
        assert tr.price_bin(price) == expected

    @given(st.floats(0.01, 1e9))
    def test_price_bin_monotone(self, p):
        assert tr.price_bin(p) <= tr.price_bin(p * 10) <= tr.price_bin(p) + 1

    def test_region_bins(self):
        b = RegionBinning(4, 9)
        assert [int(b(r)) for r in (4, 9, 0, 1)] == [0, 1, 2, 2]
        np.testing.assert_array_equal(b.bins([4, 9, 0]), [0, 1, 2])


class TestSpecs:
    @pytest.mark.parametrize("num, den", [
        (TrackerKey(A.CLICK, (Dim.SHOP,)), TrackerKey(A.CLICK, (Dim.SHOP, Dim.USER))),
        (TrackerKey(A.CLICK, (Dim.SHOP,)), TrackerKey(A.PURCHASE, (Dim.SHOP,))),
        (TrackerKey(A.CLICK, (Dim.SHOP,), Window.ALLTIME), TrackerKey(A.CLICK, (Dim.SHOP,), Window.LASTWEEK)),
    ])
    def test_invalid_ratios(self, num, den):
        with pytest.raises(SchemaError):
            tr.TrackerSpec(tr.Kind.RATIO, num, den)

    def test_key_canonical_round_trip(self):
        k = TrackerKey(A.PURCHASE, (Dim.USER, Dim.SHOP), Window.LASTMONTH)
        assert k.canonical() == "purchases:shop,user:lastmonth"
        assert TrackerKey.parse(k.canonical()) == k

    def test_schema_text_round_trip(self):
        s = tr.default_schema()
        assert tr.FeatureSchema.parse(s.to_text()) == s

    def test_schema_grammar(self):
        s = tr.FeatureSchema.parse(
            "count clicks shop,user lastweek\n"
            "ratio purchases shop,offer,brand / purchases shop,brand alltime  # offer share\n"
            "delta any shop,user sinceprev\n"
            "pattern\n")
        assert [sp.kind for sp in s.specs] == [tr.Kind.COUNT, tr.Kind.RATIO, tr.Kind.DELTA, tr.Kind.PATTERN]
        assert s.specs[1].key.window == Window.ALLTIME
        assert s.types == ("temporal", "content", "temporal", "pattern")
        with pytest.raises(SchemaError):
            tr.FeatureSchema.parse("count clicks shop,planet")

    def test_default_schema_shape(self):
        s = tr.default_schema()
        assert len(s) == 250 and s.pattern_index == 249
        counts = {t: s.types.count(t) for t in tr.FEATURE_TYPES}
        assert all(counts[t] > 0 for t in tr.FEATURE_TYPES)
        assert counts["pattern"] == 1

    def test_without_type(self):
        s = tr.default_schema().without_type("temporal")
        assert "temporal" not in s.types
        assert all(sp.kind is not tr.Kind.DELTA for sp in s.specs)
        assert all(k.effective_window == Window.ALLTIME for sp in s.specs for k in sp.keys)


class TestStore:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.catalog = make_catalog(20, 3)
        self.log = random_log(rng, self.catalog, 400, n_users=12)
        self.as_of = int(self.log.ts[-1]) + 1
        self.schema = tr.default_schema()

    def test_sharded_equals_single(self):
        one = tr.aggregate(self.log, self.schema, self.as_of, self.catalog)
        for shards, threads in ((3, 1), (4, 4), (7, 2)):
            many = tr.aggregate(self.log, self.schema, self.as_of, self.catalog, shards=shards, threads=threads,
                                space=one.space)
            assert many == one

    def test_dump_load_round_trip(self, tmp_path):
        store = tr.aggregate(self.log, self.schema, self.as_of, self.catalog)
        store.dump(tmp_path / "t.txt", comment="x")
        assert tr.TrackerStore.load(tmp_path / "t.txt") == store

    @given(st.integers(0, 399), st.integers(0, 399), st.integers(0, 2 ** 31))
    def test_combine_commutative_associative(self, a, b, seed):
        a, b = sorted((a, b))
        keys = self.schema.keys()[:20]
        space = tr.DimensionSpace.build(self.log, self.catalog)
        part = lambda lo, hi: tr.map_reduce_shard(self.log.select(np.arange(lo, hi)), keys, self.as_of, space,
                                                  self.catalog)
        x, y, z = part(0, a), part(a, b), part(b, 400)
        assert x.combine(y) == y.combine(x)
        assert x.combine(y).combine(z) == x.combine(y.combine(z)) == part(0, 400)

    def test_feature_vector_and_unknown_offer(self):
        store = tr.aggregate(self.log, self.schema, self.as_of, self.catalog)
        fv = tr.feature_vector(0, self.catalog.meta(3), store, 0.5, self.schema, self.catalog)
        assert len(fv) == 250 and fv["pattern"] == 0.5
        cold = tr.feature_vector(10 ** 6, self.catalog.meta(3), store, None, self.schema, self.catalog)
        pers = self.schema.personalized
        vals = cold.values[pers]
        assert np.all((vals == 0) | np.isnan(vals))
        meta = self.catalog.meta(3)
        with pytest.raises(UnknownOffer):
            tr.feature_vector(0, replace(meta, offer_id=999), store, None, self.schema, self.catalog)

    def test_namecat_lookup_uses_primary_tag(self):
        store = tr.aggregate(self.log, self.schema, self.as_of, self.catalog)
        spec = tr.count(A.ANY, (Dim.SHOP, Dim.NAMECAT))
        rows = np.arange(len(self.catalog))
        got = tr.tracker_matrix(tr.FeatureSchema([spec]), store, self.catalog, np.zeros(rows.size), rows,
                                np.zeros(rows.size))[:, 0]
        for r in rows:
            tag = self.catalog.primary_tag[r]
            want = 0 if tag < 0 else len(matching(self.log, spec.key, (self.catalog.shop[r], tag), self.as_of,
                                                  self.catalog, RegionBinning()))
            assert got[r] == want
