import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesseg import metrics as M


def brute_force(pred, truth, nb):
    counts = np.zeros((nb, nb), dtype=np.int64)
    for p, t in zip(pred.ravel(), truth.ravel()):
        counts[t, p] += 1
    return counts


class TestConfusion:
    def test_perfect_is_diagonal(self):
        m = np.array([[0, 1], [2, 1]])
        cm = M.confusion(m, m, 3).counts
        assert np.count_nonzero(cm - np.diag(np.diag(cm))) == 0

    def test_four_pixels(self):
        cm = M.confusion(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
        np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 2]])

    def test_all_background_on_two_percent(self):
        truth = np.zeros((10, 10), dtype=int)
        truth[0, :2] = 1
        cm = M.confusion(np.zeros_like(truth), truth, 2)
        assert cm.counts[1, 0] == 2 and cm.total == 100

    @given(seed=st.integers(0, 2**32 - 1), nb=st.sampled_from([2, 6]),
           h=st.integers(1, 64), w=st.integers(1, 64))
    @settings(max_examples=30, deadline=None)
    def test_matches_brute_force(self, seed, nb, h, w):
        rng = np.random.default_rng(seed)
        pred, truth = rng.integers(0, nb, (h, w)), rng.integers(0, nb, (h, w))
        np.testing.assert_array_equal(M.confusion(pred, truth, nb).counts, brute_force(pred, truth, nb))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            M.confusion(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="truth labels"):
            M.confusion(np.zeros((2, 2), int), np.full((2, 2), 2), 2)

    def test_add(self):
        a = M.ConfusionMatrix(np.eye(2, dtype=np.int64))
        np.testing.assert_array_equal((a + a).counts, 2 * np.eye(2))
        with pytest.raises(M.ReportError):
            a + M.ConfusionMatrix.zeros(3)


class TestMetrics:
    def test_hand_example(self):
        r = M.metrics(np.array([[3, 1], [2, 4]]))
        assert r.precision[0] == pytest.approx(0.6)
        assert r.recall[0] == pytest.approx(0.75)
        assert r.f1[0] == pytest.approx(2 / 3)
        assert r.iou[0] == pytest.approx(0.5)
        assert r.ga == pytest.approx(0.7)

    def test_perfect(self):
        r = M.metrics(np.diag([5, 7, 1]))
        for name in ("precision", "recall", "f1", "iou"):
            np.testing.assert_array_equal(getattr(r, name), 1.0)
        assert r.ga == 1.0 and r.mca == 1.0

    def test_all_background_predictor(self):
        truth = np.zeros((50, 100), dtype=int)
        truth[:, :2] = 1  # exactly 2%
        r = M.metrics(M.confusion(np.zeros_like(truth), truth, 2))
        assert r.ga == pytest.approx(0.98, abs=1e-12)
        assert r.recall[1] == 0.0
        assert np.isnan(r.precision[1])

    def test_undefined_entries_excluded_from_mean(self):
        r = M.metrics(np.array([[4, 0, 0], [0, 0, 0], [1, 0, 5]]))
        assert np.isnan(r.recall[1]) and np.isnan(r.iou[1])
        assert r.mean("precision") == pytest.approx((0.8 + 1.0) / 2)
        assert r.mca == pytest.approx((1.0 + 5 / 6) / 2)

    def test_empty_matrix(self):
        with pytest.raises(ValueError, match="non-empty"):
            M.metrics(np.zeros((2, 2)))

    @given(seed=st.integers(0, 2**32 - 1), nb=st.sampled_from([2, 6]))
    @settings(max_examples=30, deadline=None)
    def test_against_pixel_counting(self, seed, nb):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(1, 65, 2)
        pred, truth = rng.integers(0, nb, (h, w)), rng.integers(0, nb, (h, w))
        r = M.metrics(M.confusion(pred, truth, nb))
        for c in range(nb):
            tp = np.sum((pred == c) & (truth == c))
            fp = np.sum((pred == c) & (truth != c))
            fn = np.sum((pred != c) & (truth == c))
            if tp + fn:
                assert abs(r.recall[c] - tp / (tp + fn)) <= 1e-12
            if tp + fp + fn:
                assert abs(r.iou[c] - tp / (tp + fp + fn)) <= 1e-12
                assert abs(r.f1[c] - 2 * tp / (2 * tp + fp + fn)) <= 1e-12
        assert abs(r.ga - np.mean(pred == truth)) <= 1e-12


class TestAuroc:
    def test_perfect_separation(self):
        assert M.uncertainty_error_auroc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert M.uncertainty_error_auroc(np.ones(6), [1, 0, 1, 0, 0, 0]) == 0.5

    def test_hand_example(self):
        assert M.uncertainty_error_auroc([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0]) == pytest.approx(0.75)

    def test_degenerate(self):
        assert np.isnan(M.uncertainty_error_auroc([0.1, 0.2], [0, 0]))

    @given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=40))
    @settings(max_examples=60, deadline=None)
    def test_pairwise_definition(self, rows):
        u = np.array([r[0] for r in rows], dtype=float)
        e = np.array([r[1] for r in rows])
        if e.all() or not e.any():
            return
        wins = sum((a > b) + 0.5 * (a == b) for a in u[e] for b in u[~e])
        assert M.uncertainty_error_auroc(u, e) == pytest.approx(wins / (e.sum() * (~e).sum()))

    def test_midranks(self):
        np.testing.assert_array_equal(M.midranks([3, 1, 3, 2]), [3.5, 1, 3.5, 2])

    def test_point_biserial(self):
        assert M.point_biserial([0, 0, 1, 1], [0, 0, 1, 1]) == pytest.approx(1.0)
        assert np.isnan(M.point_biserial([1, 2], [0, 0]))


class TestTables:
    def test_difference_format(self):
        assert M.format_difference(71.30, 72.40) == "+1.10"
        assert M.format_difference(5.0, 4.0) == "-1.00"
        assert M.format_difference(3.333, 3.333) == "+0.00"

    def _report(self, seed):
        rng = np.random.default_rng(seed)
        return M.metrics(rng.integers(1, 20, (2, 2)))

    def test_single_report_has_no_difference(self):
        text = M.report_table([self._report(0)], ["A"], ["background", "crack"])
        assert "Difference" not in text
        assert "Mean value" in text and "GA" in text and "MCA" in text

    def test_identical_reports_zero_difference(self):
        r = self._report(1)
        rows = M.report_rows([r, r], ["A", "B"], differences=[(0, 1)])
        assert {row[-1] for row in rows} == {"+0.00"}

    def test_rows_per_class_and_mean(self):
        rows = M.report_rows([self._report(2)], ["A"], ["background", "crack"])
        titles = [(r[0], r[1]) for r in rows]
        for metric in ("F1 score", "Precision", "Class accuracy", "IoU"):
            assert (metric, "background") in titles and (metric, "Mean value") in titles

    def test_csv_header(self):
        csv = M.report_csv([self._report(3)] * 2, ["Initial", "Surrogate"], differences=[(0, 1)])
        assert csv.splitlines()[0] == "metric,class,Initial,Surrogate,Difference (Surrogate - Initial)"

    def test_mismatched_reports(self):
        with pytest.raises(M.ReportError, match="classes"):
            M.report_table([self._report(0), M.metrics(np.eye(3))], ["a", "b"])
        with pytest.raises(M.ReportError):
            M.report_table([], [])
