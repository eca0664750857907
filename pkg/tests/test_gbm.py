import math
import os
import subprocess
import sys
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boostjet import gbm
from boostjet.errors import NoPositives, SchemaError, SchemaMismatch, SingleClassPool
from boostjet.gbm import GbmModel, GbmTrainConfig, ObliviousTree, TrainPool
from boostjet.trackers import FeatureVector

mpmath.mp.dps = 50


def mp_logloss(y, F):
    with mpmath.workdps(400):  # enough digits that 1 - p survives for |F| up to ~900
        p = 1 / (1 + mpmath.exp(-mpmath.mpf(F)))
        return -y * mpmath.log(p) - (1 - y) * mpmath.log(1 - p)


def toy_pool(rng, n=300, F=5, nan_rate=0.05):
    X = rng.normal(size=(n, F))
    logit = 1.5 * X[:, 0] - X[:, 1] + 0.5 * rng.normal(size=n)
    y = (logit > 0.3).astype(float)
    X[rng.random(X.shape) < nan_rate] = np.nan
    return TrainPool(X, y, [f"f{i}" for i in range(F)])


class TestLoss:
    def test_sigmoid(self):
        assert gbm.sigmoid(0.0) == 0.5
        assert gbm.sigmoid(1000.0) == 1.0 and gbm.sigmoid(-1000.0) == 0.0
        F = np.random.default_rng(0).normal(scale=10, size=100)
        np.testing.assert_allclose(gbm.sigmoid(-F), 1 - gbm.sigmoid(F), atol=1e-15)

    def test_logloss_examples(self):
        assert gbm.logloss(1, 0.0) == pytest.approx(math.log(2))
        assert gbm.logloss(0, 0.0) == pytest.approx(math.log(2))
        assert np.isfinite(gbm.logloss(1, -800.0)) and np.isfinite(gbm.logloss(0, 800.0))

    def test_logloss_high_precision_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            y = int(rng.integers(2))
            F = float(rng.choice([rng.normal(scale=3), rng.normal(scale=200)]))
            want = float(mp_logloss(y, F))
            got = gbm.logloss(y, F)
            assert got == pytest.approx(want, rel=1e-12, abs=1e-300)

    def test_pseudo_residual_examples(self):
        assert gbm.pseudo_residual(1, 0.0) == 0.5
        assert gbm.pseudo_residual(0, 40.0) == pytest.approx(-1.0)

    def test_pseudo_residual_is_negative_finite_difference(self):
        rng = np.random.default_rng(2)
        h = 1e-5
        for _ in range(300):
            y = int(rng.integers(2))
            F = float(rng.normal(scale=4))
            fd = -(gbm.logloss(y, F + h) - gbm.logloss(y, F - h)) / (2 * h)
            assert abs(gbm.pseudo_residual(y, F) - fd) < 1e-6


class TestLLP:
    def test_constant_is_zero(self):
        c = np.array([1, 0, 0, 1, 0, 0, 0])
        assert gbm.llp(np.full(7, c.mean()), c) == pytest.approx(0.0, abs=1e-15)

    def test_perfect_predictions_positive(self):
        c = np.array([1, 0, 0, 1, 0])
        assert gbm.llp(np.clip(c, 1e-9, 1 - 1e-9), c) > 0

    def test_high_precision_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n = int(rng.integers(2, 60))
            c = rng.integers(2, size=n)
            c[0] = 1
            p = rng.uniform(1e-6, 1 - 1e-6, n)
            pc = mpmath.mpf(int(c.sum())) / n
            ll = lambda q: mpmath.fsum(ci * mpmath.log(qi) + (1 - ci) * mpmath.log(1 - qi)
                                       for ci, qi in zip(c.tolist(), q))
            want = (ll([mpmath.mpf(x) for x in p.tolist()]) - ll([pc] * n)) / int(c.sum())
            assert gbm.llp(p, c) == pytest.approx(float(want), rel=1e-9, abs=1e-12)

    def test_no_positives(self):
        with pytest.raises(NoPositives):
            gbm.llp([0.1, 0.2], [0, 0])


# -- split search ---------------------------------------------------------------

def oracle_best_split(X, resid, rows, part):
    """Best (feature, threshold, missing side) by exact rational score; lowest key wins ties.

    Candidate thresholds are every distinct value of the full column but its largest
    (the instances stay under the bin budget, so no quantile merging happens).
    """
    r = [Fraction(v) for v in resid[rows].tolist()]
    best, best_key = None, None
    for f in range(X.shape[1]):
        full = X[:, f]
        thresholds = sorted(set(full[~np.isnan(full)].tolist()))[:-1]
        col = full[rows]
        for t in thresholds:
            for side, ml in ((0, True), (1, False)):
                bit = np.where(np.isnan(col), not ml, col > t)
                child = part[rows] * 2 + bit
                sums, cnts = {}, {}
                for ch, v in zip(child.tolist(), r):
                    sums[ch] = sums.get(ch, 0) + v
                    cnts[ch] = cnts.get(ch, 0) + 1
                score = sum(sums[k] ** 2 / cnts[k] for k in sums)
                key = (f, t, side)
                if best is None or score > best:
                    best, best_key = score, key
    return best_key


class TestTreeBuilding:
    def test_split_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(4)
        for case in range(60):
            n, F = int(rng.integers(8, 65)), int(rng.integers(1, 5))
            X = rng.integers(0, 12, size=(n, F)) / 4.0
            X[rng.random(X.shape) < 0.15] = np.nan
            resid = rng.normal(size=n)
            rows = np.sort(rng.choice(n, int(rng.integers(4, n + 1)), replace=False))
            data = gbm.quantize(X, 32)
            tree = gbm.build_oblivious_tree(data, resid, rows, 2)
            part = np.zeros(n, np.int64)
            for j in range(2):
                key = oracle_best_split(X, resid, rows, part)
                if key is None:
                    assert tree.features[j] == -1
                    continue
                f, t, side = key
                assert (tree.features[j], tree.thresholds[j], tree.missing_left[j]) == (f, t, side == 0), case
                col = X[:, f]
                part = part * 2 + np.where(np.isnan(col), side == 1, col > t)
            assert tree == gbm.build_oblivious_tree(data, resid, rows, 2, exhaustive=True)

    def test_perfect_single_split(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(size=(200, 5))
        X[:, 3] = np.where(np.arange(200) < 80, 0.5, 0.9)
        resid = np.where(X[:, 3] > 0.5, 1.0, -1.0)
        tree = gbm.build_oblivious_tree(gbm.quantize(X), resid, np.arange(200), 1)
        assert (tree.features[0], tree.thresholds[0]) == (3, 0.5)
        np.testing.assert_array_equal(tree.leaf_values, [-1.0, 1.0])

    def test_constant_residuals(self):
        X = np.random.default_rng(6).normal(size=(50, 3))
        tree = gbm.build_oblivious_tree(gbm.quantize(X), np.full(50, 0.25), np.arange(50), 3)
        np.testing.assert_array_equal(tree.leaf_values, np.full(8, 0.25))
        assert np.all(tree.features == -1)

    @given(st.integers(2, 254), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30)
    def test_quantize_bin_is_number_of_borders_below(self, n_bins, seed):
        rng = np.random.default_rng(seed)
        X = np.round(rng.normal(size=(120, 2)), int(rng.integers(0, 3)))
        X[rng.random(X.shape) < 0.1] = np.nan
        data = gbm.quantize(X, n_bins)
        for f in range(2):
            b = data.borders[f]
            assert len(b) <= n_bins - 1 and np.all(np.diff(b) > 0)
            for v, code in zip(X[:, f], data.bins[f]):
                assert code == (n_bins if np.isnan(v) else int(np.sum(b < v)))


class TestFit:
    def test_trees_are_oblivious_and_deterministic(self):
        pool = toy_pool(np.random.default_rng(7))
        cfg = GbmTrainConfig(iterations=25, shrinkage=0.1, depth=4, seed=3)
        a, b = gbm.fit(pool, cfg), gbm.fit(pool, cfg)
        assert a == b
        assert all(t.is_oblivious() for t in a.trees)
        leaves = np.stack([t.leaf_index(pool.X) for t in a.trees])
        assert leaves.min() >= 0 and leaves.max() < 16

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0.3, 0.1, 0.01]), st.integers(1, 4))
    @settings(max_examples=25)
    def test_full_sample_loss_non_increasing(self, seed, shrinkage, depth):
        pool = toy_pool(np.random.default_rng(seed), n=120)
        if pool.y.min() == pool.y.max():
            return
        m = gbm.fit(pool, GbmTrainConfig(iterations=15, shrinkage=shrinkage, depth=depth, subsample=1.0))
        assert np.all(np.diff(m.train_loss) <= 1e-12)

    def test_separable_loss_strictly_decreases(self):
        X = np.arange(40, dtype=float)[:, None]
        pool = TrainPool(X, (X[:, 0] >= 20).astype(float), ["x"])
        m = gbm.fit(pool, GbmTrainConfig(iterations=30, shrinkage=0.3, depth=2, subsample=1.0))
        assert np.all(np.diff(m.train_loss) < 0)

    def test_prior_only_model_predicts_base_rate(self):
        pool = toy_pool(np.random.default_rng(8))
        m = gbm.fit(pool, GbmTrainConfig(iterations=3)).truncated(0)
        np.testing.assert_allclose(m.predict_proba(pool.X), pool.y.mean(), rtol=1e-12)

    def test_single_class(self):
        with pytest.raises(SingleClassPool):
            gbm.fit(TrainPool(np.zeros((4, 1)), np.ones(4), ["a"]))

    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(shrinkage=0.0), dict(shrinkage=1.5),
                                    dict(depth=0), dict(depth=17), dict(subsample=0.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            GbmTrainConfig(**kw).validate()

    def test_eval_curve(self):
        pool = toy_pool(np.random.default_rng(9), n=600)
        tr, ev = pool.split(0.2, seed=0)
        m = gbm.fit(tr, GbmTrainConfig(iterations=40, shrinkage=0.1, depth=3), eval_pool=ev)
        assert len(m.train_loss) == len(m.eval_llp) == 41
        assert m.eval_llp[0] < 0.2 * abs(m.eval_llp[-1]) + 1e-9 and m.eval_llp[-1] > 0


def walk(model, x):
    """Per-tree traversal of the explicit (expanded) tree, independent of the bit-packing kernel."""
    F = model.initial_score
    for t in model.trees:
        leaf = 0
        for j, nodes in enumerate(t.expand()):
            f, thr, ml = nodes[leaf & ((1 << j) - 1) if j else 0]
            if f < 0:
                go_right = False
            elif math.isnan(x[f]):
                go_right = not ml
            else:
                go_right = x[f] > thr
            leaf |= int(go_right) << j
        F += model.shrinkage * t.leaf_values[leaf]
    return F


class TestPrediction:
    def setup_method(self):
        self.pool = toy_pool(np.random.default_rng(10))
        self.model = gbm.fit(self.pool, GbmTrainConfig(iterations=20, shrinkage=0.1, depth=3))
        rng = np.random.default_rng(11)
        self.X = rng.normal(size=(1000, 5))
        self.X[rng.random(self.X.shape) < 0.1] = np.nan

    def test_path_walker(self):
        got = self.model.decision_function(self.X[:200])
        want = [walk(self.model, x) for x in self.X[:200]]
        np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-13)

    def test_linearity(self):
        for m in (1, 7, 20):
            full = self.model.truncated(m).decision_function(self.X)
            prev = self.model.truncated(m - 1).decision_function(self.X)
            step = self.model.shrinkage * self.model.trees[m - 1](self.X)
            np.testing.assert_array_equal(full, prev + step)

    def test_one_level_trace(self):
        tree = ObliviousTree([0], [0.5], [True], [-2.0, 3.0])
        m = GbmModel(0.1, 0.5, [tree], 1, 1)
        assert gbm.predict(m, np.array([0.7]))[0] == 0.1 + 0.5 * 3.0
        assert gbm.predict(m, np.array([np.nan]))[0] == 0.1 + 0.5 * -2.0
        assert gbm.predict(GbmModel(0.1, 0.5, [], 1, 1), np.array([9.0]))[1] == gbm.sigmoid(0.1)

    def test_schema_mismatch(self):
        with pytest.raises(SchemaMismatch):
            self.model.decision_function(np.zeros((2, 4)))
        with pytest.raises(SchemaMismatch):
            gbm.predict(self.model, np.zeros(6))
        with pytest.raises(SchemaMismatch):
            gbm.predict(self.model, FeatureVector(np.zeros(5), ("a", "b", "c", "d", "e")))
        F, _ = gbm.predict(self.model, FeatureVector(self.X[0], self.pool.names))
        assert F == self.model.decision_function(self.X[:1])[0]

    def test_save_load_bit_identical(self, tmp_path):
        gbm.save_model(self.model, tmp_path / "m.txt", comment="test")
        back = gbm.load_model(tmp_path / "m.txt")
        assert back == self.model
        np.testing.assert_array_equal(back.decision_function(self.X), self.model.decision_function(self.X))

    def test_load_rejects_other_files(self, tmp_path):
        (tmp_path / "x.txt").write_text("hello\n")
        with pytest.raises(SchemaError):
            gbm.load_model(tmp_path / "x.txt")

    def test_same_model_without_jit(self, tmp_path):
        code = ("import numpy as np, sys; sys.path.insert(0, 'tests'); from test_gbm import toy_pool;"
                "from boostjet import gbm;"
                "m = gbm.fit(toy_pool(np.random.default_rng(10)), gbm.GbmTrainConfig(20, 0.1, 3));"
                "print(gbm.save_model(m), end='')")
        env = dict(os.environ, BOOSTJET_DISABLE_JIT="1")
        root = os.path.dirname(os.path.dirname(__file__))
        out = subprocess.run([sys.executable, "-c", code], env=env, cwd=root, capture_output=True, text=True,
                             check=True)
        assert out.stdout == gbm.save_model(self.model)


class TestImportance:
    def test_examples(self):
        one = GbmModel(0.0, 0.1, [ObliviousTree([2, 2, 2], [0, 1, 2], [True] * 3, np.zeros(8))], 4, 3)
        np.testing.assert_array_equal(one.importance, [0, 0, 1, 0])
        two = GbmModel(0.0, 0.1, [ObliviousTree([0], [0], [True], [0, 0]), ObliviousTree([1], [0], [True], [0, 0])],
                       3, 1)
        np.testing.assert_array_equal(two.importance, [0.5, 0.5, 0])
        np.testing.assert_array_equal(GbmModel(0.0, 0.1, [], 3, 1).importance, np.zeros(3))

    def test_trained_model_normalized(self):
        m = gbm.fit(toy_pool(np.random.default_rng(12)), GbmTrainConfig(iterations=10, shrinkage=0.2, depth=3))
        for kind in ("frequency", "gain"):
            imp = gbm.feature_importance(m, kind)
            assert np.all(imp >= 0) and abs(imp.sum() - 1) < 1e-9


class TestPool:
    def test_round_trip_with_missing(self, tmp_path):
        pool = toy_pool(np.random.default_rng(13), n=50)
        pool.save(tmp_path / "p.tsv", comment="c")
        back = TrainPool.load(tmp_path / "p.tsv")
        np.testing.assert_array_equal(back.X, pool.X)
        np.testing.assert_array_equal(back.y, pool.y)
        assert back.names == pool.names
        assert (tmp_path / "p.tsv").read_text().split("\n")[1].startswith("label\tf0")

    def test_bad_rows(self, tmp_path):
        (tmp_path / "p.tsv").write_text("label\ta\tb\n1\t0.5\n")
        with pytest.raises(SchemaError):
            TrainPool.load(tmp_path / "p.tsv")

    def test_split_partitions_rows(self):
        pool = toy_pool(np.random.default_rng(14), n=101)
        tr, ev = pool.split(0.1, seed=5)
        assert len(tr) + len(ev) == 101 and len(ev) == 10
