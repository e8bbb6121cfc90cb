from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import jensenshannon

from aada.data import IGNORE
from aada.evaluation import (
    ConfusionMatrix,
    f1_per_class,
    histogram_distribution,
    iou_per_class,
    js_divergence,
    metrics,
    positive_transfer_rate,
    write_metrics,
)


def random_cm(rng, l=5, high=1000):
    return ConfusionMatrix(l, rng.integers(0, high, size=(l, l)))


class TestConfusion:
    def test_accumulate_counts(self):
        cm = ConfusionMatrix(3).accumulate(np.array([0, 1, 2, 2, 0]), np.array([0, 1, 1, IGNORE, 2]))
        expected = np.zeros((3, 3), int)
        expected[0, 0] = expected[1, 1] = expected[1, 2] = expected[2, 0] = 1
        np.testing.assert_array_equal(cm.counts, expected)
        assert cm.ignored_pixels == 1 and cm.total == 4

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2).accumulate(np.array([0, 3]), np.array([0, 1]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2).accumulate(np.zeros(3, int), np.zeros(4, int))

    def test_merge_associative(self, rng):
        for _ in range(50):
            a, b, c = random_cm(rng), random_cm(rng), random_cm(rng)
            left = a.merge(b).merge(c)
            right = a.merge(b.merge(c))
            np.testing.assert_array_equal(left.counts, right.counts)

    def test_merge_equals_joint_accumulate(self, rng):
        p1, r1 = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
        p2, r2 = rng.integers(0, 4, 300), rng.integers(0, 4, 300)
        joint = ConfusionMatrix(4).accumulate(np.concatenate([p1, p2]), np.concatenate([r1, r2]))
        merged = ConfusionMatrix(4).accumulate(p1, r1).merge(ConfusionMatrix(4).accumulate(p2, r2))
        np.testing.assert_array_equal(joint.counts, merged.counts)

    def test_csv(self, tmp_path, rng):
        cm = random_cm(rng)
        cm.to_csv(tmp_path / "cm.csv")
        np.testing.assert_array_equal(np.loadtxt(tmp_path / "cm.csv", delimiter=",", dtype=int), cm.counts)


class TestMetrics:
    def test_f1_iou_relation_on_random_matrices(self, rng):
        for _ in range(1000):
            cm = random_cm(rng, l=int(rng.integers(2, 8)))
            iou = iou_per_class(cm)
            np.testing.assert_allclose(f1_per_class(cm), 2 * iou / (1 + iou), rtol=1e-12)

    def test_oa_permutation_invariant(self, rng):
        for _ in range(100):
            cm = random_cm(rng)
            perm = rng.permutation(cm.class_count)
            permuted = ConfusionMatrix(cm.class_count, cm.counts[np.ix_(perm, perm)])
            assert metrics(permuted)["oa"] == metrics(cm)["oa"]

    def test_perfect(self):
        m = metrics(ConfusionMatrix(2, np.diag([3, 4])))
        assert m["oa"] == 1.0 and m["mean_f1"] == 1.0 and m["mean_iou"] == 1.0

    def test_absent_class_excluded_from_means(self):
        m = metrics(ConfusionMatrix(3, np.array([[2, 0, 0], [0, 2, 0], [0, 0, 0]])))
        assert np.isnan(m["f1"][2]) and m["mean_f1"] == 1.0

    def test_hand_example(self):
        # class 0: TP 6 FP 1 FN 2, class 1: TP 1 FP 2 FN 1
        cm = ConfusionMatrix(2, np.array([[6, 2], [1, 1]]))
        m = metrics(cm)
        assert m["oa"] == pytest.approx(0.7)
        assert m["iou"] == pytest.approx([6 / 9, 1 / 4])
        assert m["f1"] == pytest.approx([12 / 15, 2 / 5])

    def test_empty(self):
        with pytest.raises(ValueError):
            metrics(ConfusionMatrix(3))

    def test_write(self, tmp_path):
        write_metrics(tmp_path / "m.json", metrics(ConfusionMatrix(2, np.eye(2, dtype=int))))
        assert '"oa": 1.0' in (tmp_path / "m.json").read_text()


class TestTransfer:
    def test_rate(self):
        assert positive_transfer_rate([(0.5, 0.6), (0.5, 0.5), (0.7, 0.6), (0.1, 0.2)]) == Fraction(1, 2)

    def test_empty(self):
        with pytest.raises(ValueError):
            positive_transfer_rate([])


class TestJSD:
    def test_identical(self):
        assert js_divergence([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0

    def test_against_scipy_oracle(self):
        # scipy returns the square root of the divergence
        expected = jensenshannon([0.5, 0.5], [0.9, 0.1]) ** 2
        assert js_divergence([0.5, 0.5], [0.9, 0.1]) == pytest.approx(expected, abs=1e-12)
        assert js_divergence([0.5, 0.5], [0.9, 0.1]) == pytest.approx(0.101749, abs=1e-6)

    def test_disjoint_support(self):
        assert js_divergence([1, 0], [0, 1]) == pytest.approx(np.log(2))

    @settings(max_examples=60)
    @given(st.lists(st.floats(0.01, 1), min_size=4, max_size=4), st.lists(st.floats(0.01, 1), min_size=4, max_size=4))
    def test_symmetric_bounded(self, a, b):
        p = histogram_distribution(a)
        q = histogram_distribution(b)
        d = js_divergence(p, q)
        assert d == pytest.approx(js_divergence(q, p), abs=1e-12)
        assert 0 <= d <= np.log(2) + 1e-12

    def test_invalid(self):
        with pytest.raises(ValueError):
            js_divergence([0.5, 0.6], [0.5, 0.5])
        with pytest.raises(ValueError):
            js_divergence([0.5, 0.5], [1.0, 0.0, 0.0])
