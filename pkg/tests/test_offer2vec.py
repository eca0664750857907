import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from boostjet import offer2vec as o2v
from boostjet.datamodel import EventLog
from boostjet.errors import EmptyCorpus, OutOfVocab


def brute_force_same_session(ts, delta):
    """same[i][j] iff every consecutive gap between positions i..j is at most delta."""
    n = len(ts)
    same = [[False] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            ok = all(ts[k + 1] - ts[k] <= delta for k in range(i, j))
            same[i][j] = same[j][i] = ok
    return same


def labels_of(sessions):
    return [s_i for s_i, s in enumerate(sessions) for _ in s.offers]


def check_against_oracle(ts, delta):
    history = [(k, t) for k, t in enumerate(ts)]
    sessions = o2v.segment_sessions(history, delta)
    lab = labels_of(sessions)
    same = brute_force_same_session(ts, delta)
    n = len(ts)
    assert [o for s in sessions for o, _ in s.offers] == list(range(n))
    for i in range(n):
        for j in range(n):
            assert (lab[i] == lab[j]) == same[i][j]


class TestSessions:
    def test_random_histories_match_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(250):
            n = int(rng.integers(0, 25))
            delta = int(rng.integers(0, 100))
            ts = np.sort(rng.integers(0, 400, size=n)).tolist()
            check_against_oracle(ts, delta)

    @given(st.lists(st.integers(0, 10 ** 6), max_size=30), st.integers(0, 10 ** 5))
    def test_property(self, ts, delta):
        check_against_oracle(sorted(ts), delta)

    def test_examples(self):
        hist = [(1, 0), (2, 100), (3, 5000), (4, 5100)]
        assert [s.offer_ids for s in o2v.segment_sessions(hist, 1800)] == [(1, 2), (3, 4)]
        assert o2v.segment_sessions([], 1800) == []
        assert len(o2v.segment_sessions([(1, 0), (1, 1800)], 1800)) == 1
        assert len(o2v.segment_sessions([(1, 0), (1, 1801)], 1800)) == 2

    def test_unsorted_history_rejected(self):
        with pytest.raises(ValueError):
            o2v.segment_sessions([(1, 10), (2, 5)], 100)

    def test_log_segmentation_matches_per_history(self):
        rng = np.random.default_rng(3)
        n = 300
        log = EventLog(np.sort(rng.integers(0, 50_000, n)), rng.integers(0, 6, n), rng.integers(0, 2, n),
                       rng.integers(0, 30, n), rng.integers(0, 4, n), np.zeros(n), np.ones(n))
        table = o2v.segment_log(log, 1800)
        got = sorted((s.user_id, s.shop_id, s.offers) for s in table)
        want = []
        for u in np.unique(log.user).tolist():
            for s in np.unique(log.shop).tolist():
                m = (log.user == u) & (log.shop == s)
                hist = list(zip(log.offer[m].tolist(), log.ts[m].tolist()))
                want += [(u, s, x.offers) for x in o2v.segment_sessions(hist, 1800, u, s)]
        assert got == sorted(want)


def toy_model(rng, V=5, n=8, S=3):
    return o2v.EmbeddingModel(n, 2, np.arange(V) * 10, rng.normal(scale=0.5, size=(V, n)),
                              rng.normal(scale=0.5, size=(V, n)), rng.normal(scale=0.5, size=(S, n)),
                              np.ones(V, np.int64), noise=np.full(V, 1 / V))


class TestGradients:
    def fd(self, model, block, row, args, h=1e-6):
        M = getattr(model, block)
        out = np.zeros(M.shape[1])
        for k in range(M.shape[1]):
            old = M[row, k]
            M[row, k] = old + h
            up = o2v.dm_objective(model, *args)
            M[row, k] = old - h
            down = o2v.dm_objective(model, *args)
            M[row, k] = old
            out[k] = (up - down) / (2 * h)
        return out

    def test_analytic_matches_finite_difference(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            model = toy_model(rng)
            ctx = rng.integers(5, size=int(rng.integers(1, 5)))
            args = (ctx, int(rng.integers(3)), int(rng.integers(5)), rng.integers(5, size=3))
            g_w, g_d, g_wp = o2v.dm_gradients(model, *args)
            for block, grads in (("W", g_w), ("D", g_d), ("Wp", g_wp)):
                for row, g in grads.items():
                    num = self.fd(model, block, row, args)
                    rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
                    worst = max(worst, float(rel.max()))
        assert worst < 1e-4

    def test_sgd_step_increases_objective(self):
        rng = np.random.default_rng(1)
        model = toy_model(rng)
        toks = np.array([0, 1, 2, 3])
        neg = np.array([4, 4])
        ctx = toks[o2v.context_positions(0, 4, 1, model.window)]
        before = o2v.dm_objective(model, ctx, 0, 1, neg)
        o2v.dm_sgd_step(model, 1, (0, toks), alpha=1e-3, negatives=neg)
        assert o2v.dm_objective(model, ctx, 0, 1, neg) > before


class TestTraining:
    def clusters(self, n_sessions=400, seed=0):
        rng = np.random.default_rng(seed)
        sessions = []
        for i in range(n_sessions):
            base = 0 if i % 2 == 0 else 10
            offers = base + rng.integers(10, size=int(rng.integers(3, 8)))
            sessions.append(o2v.Session(i, tuple((int(o), k) for k, o in enumerate(offers))))
        return sessions

    def test_cluster_separation(self):
        model = o2v.train_dm(self.clusters(), o2v.DmTrainConfig(dim=16, epochs=15, seed=0))
        V = model.W / np.linalg.norm(model.W, axis=1, keepdims=True)
        C = V @ V.T
        grp = model.offer_ids >= 10
        same = grp[:, None] == grp[None, :]
        off_diag = ~np.eye(len(grp), dtype=bool)
        intra = C[same & off_diag].mean()
        inter = C[~same].mean()
        assert intra - inter >= 0.2

    def test_loss_decreases_and_deterministic(self):
        cfg = o2v.DmTrainConfig(dim=8, epochs=5, seed=4)
        a = o2v.train_dm(self.clusters(100), cfg)
        b = o2v.train_dm(self.clusters(100), cfg)
        assert a == b
        assert a.losses[-1] < a.losses[0]

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            o2v.train_dm([o2v.Session(0, ((1, 0),))])

    def test_min_count_drops_rare_offers(self):
        sessions = self.clusters(50) + [o2v.Session(999, ((77, 0), (1, 1)))]
        model = o2v.train_dm(sessions, o2v.DmTrainConfig(dim=4, epochs=1))
        assert 77 not in model.offer_ids.tolist()
        assert model.vector(77) is None
        with pytest.raises(OutOfVocab):
            model.index([77], strict=True)


class TestInference:
    def setup_method(self):
        self.model = toy_model(np.random.default_rng(5))

    def test_session_vector_is_offer_mean(self):
        v = o2v.session_vector(self.model, [0, 10, 10, 999])
        np.testing.assert_allclose(v, self.model.W[[0, 1, 1]].mean(axis=0))
        assert o2v.session_vector(self.model, [999]) is None

    def test_pattern_feature(self):
        p = o2v.pattern_feature(self.model, [0, 10], 20)
        s = self.model.W[[0, 1]].mean(axis=0)
        o = self.model.W[2]
        assert p == pytest.approx(s @ o / np.linalg.norm(s) / np.linalg.norm(o), abs=1e-12)
        assert math.isnan(o2v.pattern_feature(self.model, [999], 20))
        assert math.isnan(o2v.pattern_feature(self.model, [0], 999))
        assert math.isnan(o2v.pattern_feature(self.model, [], 20))

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_cosine_bounded(self, a, b):
        c = o2v.cosine(np.array(a), np.array(b))
        assert math.isnan(c) or -1.0 <= c <= 1.0


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path, small_corpus):
        log, _ = small_corpus
        models = o2v.train_offer2vec(log, o2v.DmTrainConfig(dim=8, epochs=2), 1800)
        o2v.save_models(models, tmp_path / "emb", comment="c")
        back = o2v.load_models(tmp_path / "emb")
        assert back.keys() == models.keys()
        for k in models:
            assert np.array_equal(back[k].W, models[k].W) and np.array_equal(back[k].Wp, models[k].Wp)
            assert np.array_equal(back[k].offer_ids, models[k].offer_ids)
            assert back[k].as_of == models[k].as_of

    def test_pattern_index_matches_scalar_feature(self, small_corpus):
        log, catalog = small_corpus
        models = o2v.train_offer2vec(log, o2v.DmTrainConfig(dim=8, epochs=2), 1800)
        idx = o2v.PatternIndex(models, log, catalog, 1800)
        table = o2v.segment_log(log, 1800)
        last = table.last_per_user()
        rng = np.random.default_rng(0)
        users = rng.choice(np.unique(log.user), 40)
        rows = rng.integers(len(catalog), size=40)
        got = idx.values(users, rows)
        for u, r, g in zip(users.tolist(), rows.tolist(), got.tolist()):
            s = int(catalog.shop[r])
            i = last.get((u, s))
            recent = [] if i is None else table.session(i).offer_ids
            want = o2v.pattern_feature(models.get(s), recent, int(catalog.offer_id[r]))
            assert (math.isnan(g) and math.isnan(want)) or g == pytest.approx(want, abs=1e-12)
