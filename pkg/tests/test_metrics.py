import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from blockvit.errors import AnalysisError, DataError, DimensionError, LabelError, UndefinedMetricError
from blockvit.metrics import (
    RDR,
    ConfusionMatrix,
    KnnConfig,
    MetricsReport,
    accuracy,
    aggregate_runs,
    auc_binary,
    auc_macro_ovr,
    confusion,
    evaluate,
    forgetting_delta,
    knn_eval,
    knn_predict,
    lda_project,
    macro_f1,
    qkappa,
    rdr_accuracy,
    rdr_map,
)


def cm(rows):
    return ConfusionMatrix(np.array(rows, dtype=np.int64))


class TestConfusion:
    def test_hand_count(self):
        got = confusion([0, 1, 1, 2, 0, 2], [0, 1, 2, 2, 1, 0], 3).counts
        np.testing.assert_array_equal(got, [[1, 0, 1], [1, 1, 0], [0, 1, 1]])

    def test_perfect_is_diagonal(self):
        got = confusion([0, 1, 2, 2], [0, 1, 2, 2], 3).counts
        assert np.array_equal(got, np.diag([1, 1, 2]))

    def test_empty(self):
        with pytest.raises(DataError):
            confusion([], [], 3)

    def test_range(self):
        with pytest.raises(LabelError):
            confusion([0, 3], [0, 1], 3)

    def test_length(self):
        with pytest.raises(DimensionError):
            confusion([0], [0, 1], 2)


class TestAccuracyF1:
    def test_diagonal(self):
        c = cm(np.diag([3, 2, 4]))
        assert accuracy(c) == 1.0 and macro_f1(c) == 1.0

    def test_all_wrong(self):
        c = cm([[0, 3], [2, 0]])
        assert accuracy(c) == 0.0 and macro_f1(c) == 0.0

    def test_hand_example(self):
        c = cm([[2, 1], [0, 3]])
        assert accuracy(c) == pytest.approx(5 / 6)
        assert macro_f1(c) == pytest.approx((0.8 + 6 / 7) / 2)
        assert macro_f1(c) == pytest.approx(0.8286, abs=1e-4)

    def test_brute_force(self):
        rng = random.Random(0)
        for _ in range(300):
            n, y, p = oracles.random_instance(rng)
            c = confusion(p, y, n)
            assert c.counts.tolist() == oracles.confusion(p, y, n)
            assert abs(accuracy(c) - oracles.accuracy(p, y)) < 1e-12
            assert abs(macro_f1(c) - oracles.macro_f1(p, y, n)) < 1e-12


class TestQkappa:
    def test_worked_example(self):
        assert qkappa(cm([[2, 1, 0], [0, 2, 0], [0, 0, 1]])) == pytest.approx(1 - 0.25 / (19 / 12), rel=1e-12)
        assert round(qkappa(cm([[2, 1, 0], [0, 2, 0], [0, 0, 1]])), 4) == 0.8421

    def test_diagonal_exactly_one(self):
        assert qkappa(cm(np.diag([5, 1, 3, 2]))) == 1.0

    def test_independence_exactly_zero(self):
        a, b = np.array([6, 12, 18]), np.array([12, 12, 12])
        o = np.outer(a, b) // 36
        assert np.array_equal(o.sum(1), a) and np.array_equal(o.sum(0), b)
        assert qkappa(cm(o)) == 0.0

    def test_constant_raters_undefined(self):
        with pytest.raises(UndefinedMetricError):
            qkappa(cm([[4, 0], [0, 0]]))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 9), min_size=9, max_size=9), st.integers(2, 7))
    def test_scale_invariance(self, flat, s):
        c = np.array(flat).reshape(3, 3)
        try:
            base = qkappa(cm(c))
        except UndefinedMetricError:
            return
        assert qkappa(cm(c * s)) == pytest.approx(base, abs=1e-12)

    def test_brute_force(self):
        rng = random.Random(1)
        for _ in range(300):
            n, y, p = oracles.random_instance(rng)
            ref = oracles.confusion(p, y, n)
            try:
                got = qkappa(confusion(p, y, n))
            except UndefinedMetricError:
                continue
            assert abs(got - oracles.qkappa(ref)) < 1e-12
            assert -1 - 1e-12 <= got <= 1 + 1e-12


class TestAuc:
    def test_separated(self):
        assert auc_binary([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_equal(self):
        assert auc_binary([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_hand_pairs(self):
        assert auc_binary([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0]) == 0.75

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auc_binary([0.1, 0.2], [1, 1])

    def test_brute_force_binary(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(2, 200))
            scores = rng.integers(0, 10, n) / 10.0  # coarse grid forces ties
            labels = rng.integers(0, 2, n)
            if labels.all() or not labels.any():
                continue
            assert abs(auc_binary(scores, labels) - oracles.auc_binary(scores.tolist(), labels.tolist())) < 1e-12

    def test_macro_ovr_skips_absent(self):
        probs = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1]])
        labels = [0, 1, 0]
        assert auc_macro_ovr(probs, labels) == pytest.approx(1.0)

    def test_macro_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n, c = int(rng.integers(4, 40)), int(rng.integers(2, 6))
            probs = rng.dirichlet(np.ones(c), n)
            labels = rng.integers(0, c, n)
            if len(set(labels.tolist())) < 2:
                continue
            assert abs(auc_macro_ovr(probs, labels) - oracles.auc_macro_ovr(probs.tolist(), labels.tolist())) < 1e-12


class TestRdr:
    def test_mapping(self):
        assert rdr_map(1) is RDR.NON_REFERABLE
        assert rdr_map(2) is RDR.REFERABLE
        np.testing.assert_array_equal(rdr_map(np.arange(5)), [0, 0, 1, 1, 1])

    def test_adjacent_referable_correct(self):
        assert rdr_accuracy([3], [4]) == 1.0
        assert rdr_accuracy([1], [2]) == 0.0

    def test_idempotent(self):
        for s in range(5):
            assert rdr_map(rdr_map(s)) is rdr_map(s)

    @pytest.mark.parametrize("s", [-1, 5])
    def test_range(self, s):
        with pytest.raises(LabelError):
            rdr_map(s)


class TestKnn:
    def test_identical_query_k1(self):
        ref = np.random.default_rng(0).standard_normal((10, 4))
        assert knn_eval(ref, np.arange(10), ref[3:4], [3], KnnConfig(k=1))["top1"] == 100.0

    def test_hand_votes_1d(self):
        # cosine on 2-D points spread along angles: neighbours by angle
        ang = np.array([0.0, 0.1, 0.2, 1.5, 1.6, 1.7])
        ref = np.stack([np.cos(ang), np.sin(ang)], 1)
        labels = [0, 0, 1, 1, 1, 2]
        q = np.array([[np.cos(0.05), np.sin(0.05)], [np.cos(1.55), np.sin(1.55)]])
        ranked = knn_predict(ref, labels, q, KnnConfig(k=3))
        assert ranked[0] == [0, 1]
        assert ranked[1] == [1, 2]

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            knn_eval(np.zeros((3, 2)), [0, 1, 0], np.zeros((1, 3)), [0], KnnConfig(k=1))

    def test_k_too_large(self):
        with pytest.raises(DataError):
            knn_eval(np.ones((3, 2)), [0, 1, 0], np.ones((1, 2)), [0], KnnConfig(k=4))

    def test_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(40):
            n_ref, d, c = int(rng.integers(20, 120)), int(rng.integers(2, 8)), int(rng.integers(2, 8))
            ref = rng.standard_normal((n_ref, d))
            ry = rng.integers(0, c, n_ref)
            q = rng.standard_normal((30, d))
            qy = rng.integers(0, c, 30)
            k = int(rng.integers(1, 21))
            got = knn_eval(ref, ry, q, qy, KnnConfig(k=k))
            ref_res = oracles.knn_eval(ref.tolist(), ry.tolist(), q.tolist(), qy.tolist(), k)
            assert abs(got["top1"] - ref_res["top1"]) < 1e-12
            assert abs(got["top5"] - ref_res["top5"]) < 1e-12
            assert got["top5"] >= got["top1"]


class TestForgettingDelta:
    def test_unchanged(self):
        assert forgetting_delta({"top1": 90.0, "top5": 99.0}, {"top1": 90.0, "top5": 99.0}) == {"dtop1": 0.0, "dtop5": 0.0}

    def test_table_rows(self):
        before = {"top1": 93.916, "top5": 82.110}
        assert forgetting_delta(before, {"top1": 92.908, "top5": 82.110})["dtop1"] == pytest.approx(-1.008, abs=1e-9)
        assert forgetting_delta(before, {"top1": 93.966, "top5": 82.110})["dtop1"] == pytest.approx(0.050, abs=1e-9)


class TestLda:
    def _clusters(self, seed=0, n=40, d=10):
        rng = np.random.default_rng(seed)
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        y = np.arange(n) % 2
        x = rng.standard_normal((n, d)) * 0.3 + np.outer(np.where(y == 1, 3.0, -3.0), direction)
        return x, y, direction

    def test_separates_with_margin(self):
        x, y, _ = self._clusters()
        r = lda_project(x, y, out_dims=1)
        p = r.projected[:, 0]
        pooled = np.sqrt(0.5 * (p[y == 0].var(ddof=1) + p[y == 1].var(ddof=1)))
        assert abs(p[y == 1].mean() - p[y == 0].mean()) > 4 * pooled
        assert max(p[y == 0].max(), p[y == 1].max()) > min(p[y == 0].min(), p[y == 1].min())

    def test_row_permutation(self):
        x, y, _ = self._clusters(1)
        y = np.arange(len(y)) % 3  # three classes pin down both axes
        perm = np.random.default_rng(0).permutation(len(y))
        a = lda_project(x, y)
        b = lda_project(x[perm], y[perm])
        np.testing.assert_allclose(b.projected, a.projected[perm], atol=1e-8)

    def test_duplication_same_directions(self):
        x, y, _ = self._clusters(2)
        a = lda_project(x, y, out_dims=1, ridge=1e-8)
        b = lda_project(np.vstack([x, x]), np.concatenate([y, y]), out_dims=1, ridge=2e-8)
        np.testing.assert_allclose(b.directions, a.directions, atol=1e-8)

    def test_ellipses(self):
        x, y, _ = self._clusters(3)
        y = np.arange(len(y)) % 3
        r = lda_project(x, y)
        assert len(r.ellipses) == 3 and all(e[2] >= e[3] >= 0 for e in r.ellipses)

    def test_errors(self):
        with pytest.raises(AnalysisError):
            lda_project(np.zeros((4, 2)), [0, 0, 0, 0])
        with pytest.raises(AnalysisError):
            lda_project(np.zeros((3, 2)), [0, 0, 1])


class TestAggregate:
    def _rep(self, q):
        return MetricsReport(accuracy=q, macro_f1=q, auc=None, qkappa=q, rdr_accuracy=None, confusion=[], n_samples=1)

    def test_hand_values(self):
        agg = aggregate_runs([self._rep(0.8), self._rep(0.9)])["qkappa"]
        assert agg["mean"] == pytest.approx(0.85)
        assert agg["sd"] == pytest.approx(0.0707107, rel=1e-5)
        assert agg["sem"] == pytest.approx(0.05, rel=1e-9)

    def test_single(self):
        agg = aggregate_runs([self._rep(0.8)])["qkappa"]
        assert agg["sd"] == 0.0 and agg["sem"] is None and not agg["sd_defined"]

    def test_identical(self):
        assert aggregate_runs([self._rep(0.7)] * 4)["qkappa"]["sd"] == 0.0

    def test_none_skipped(self):
        assert aggregate_runs([self._rep(0.7)])["auc"]["n"] == 0

    def test_empty(self):
        with pytest.raises(DataError):
            aggregate_runs([])


class TestEvaluate:
    def test_report(self):
        probs = np.eye(5)[[0, 1, 2, 3, 4, 4]]
        rep = evaluate(probs, [0, 1, 2, 3, 4, 3], meta={"seed": 1})
        assert rep.accuracy == pytest.approx(5 / 6)
        assert rep.rdr_accuracy == 1.0
        assert rep.n_samples == 6 and rep.meta == {"seed": 1}
        assert MetricsReport.from_dict(rep.to_dict()) == rep

    def test_undefined_metrics_become_none(self):
        rep = evaluate(np.array([[1.0, 0.0]] * 3), [0, 0, 0])
        assert rep.qkappa is None and rep.auc is None and rep.rdr_accuracy is None
