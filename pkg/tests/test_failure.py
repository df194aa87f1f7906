import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sghmcseg.failure import (confidence_score, failure_report, label_failure, mann_whitney_auc,
                              normalized_binary_entropy, roc_auc, roc_curve, tf_ff_fb)


class TestSoftMaps:
    def test_zero_entropy(self):
        s = np.array([[1, 0], [1, 1]])
        tf, ff, fb = tf_ff_fb(s, np.zeros((2, 2)))
        np.testing.assert_array_equal(tf, s)
        np.testing.assert_array_equal(ff, 0)
        np.testing.assert_array_equal(fb, 0)

    def test_full_entropy(self):
        s = np.array([[1, 0], [1, 1]])
        tf, ff, fb = tf_ff_fb(s, np.ones((2, 2)))
        np.testing.assert_array_equal(tf, 0)
        np.testing.assert_array_equal(ff, s)
        np.testing.assert_array_equal(fb, 1 - s)

    def test_single_voxel(self):
        tf, ff, fb = tf_ff_fb(np.array([1]), np.array([0.25]))
        assert (tf[0], ff[0], fb[0]) == (0.75, 0.25, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            tf_ff_fb(np.ones(3), np.ones(4))

    def test_normalized_entropy_range(self):
        p = np.stack([np.linspace(0, 1, 11), 1 - np.linspace(0, 1, 11)])[:, None, :]
        h = normalized_binary_entropy(p, 0)
        assert h[0, 5] == pytest.approx(1.0)
        assert h[0, 0] == h[0, 10] == 0.0
        assert np.all((h >= 0) & (h <= 1))


class TestConfidence:
    def test_zero_entropy_is_one(self):
        assert confidence_score(np.ones((3, 3)), np.zeros((3, 3))) == 1.0

    def test_hand_value(self):
        # |TF| = 8, |FF| = 2, |FB| = 2
        s = np.array([1] * 10 + [0] * 4, dtype=float)
        h = np.array([0.0] * 6 + [0.5] * 4 + [0.5] * 4)
        tf, ff, fb = tf_ff_fb(s, h)
        assert (tf.sum(), ff.sum(), fb.sum()) == (8.0, 2.0, 2.0)
        assert confidence_score(s, h) == pytest.approx(0.8)

    def test_no_true_foreground(self):
        assert confidence_score(np.zeros(4), np.full(4, 0.3)) == 0.0
        assert confidence_score(np.ones(4), np.ones(4)) == 0.0

    def test_undefined_case_is_flagged(self):
        assert confidence_score(np.zeros(4), np.zeros(4), return_flag=True) == (0.0, True)
        assert confidence_score(np.ones(4), np.zeros(4), return_flag=True) == (1.0, False)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 0.5))
    def test_more_foreground_entropy_lowers_confidence(self, seed, bump):
        rng = np.random.default_rng(seed)
        s = rng.random(30) < 0.5
        s[0] = True
        h = rng.random(30) * 0.5
        c0 = confidence_score(s, h)
        h2 = h.copy()
        h2[s] = np.minimum(h2[s] + bump, 1.0)
        assert 0.0 <= c0 <= 1.0
        assert confidence_score(s, h2) < c0


class TestLabel:
    def test_examples(self):
        assert label_failure(0.75, 3.0, 0.8, 2.0)
        assert not label_failure(0.75, 1.0, 0.8, 2.0)
        assert not label_failure(0.95, 0.3, 0.8, 2.0)

    def test_undefined_assd(self):
        assert label_failure(0.99, float("nan"))

    def test_or_rule(self):
        assert label_failure(0.75, 1.0, rule="or")
        with pytest.raises(ValueError):
            label_failure(0.5, 5.0, rule="xor")


class TestROC:
    def test_perfect(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])[0] == 1.0

    def test_all_tied(self):
        assert roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 0])[0] == 0.5

    def test_hand_example(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [1, 0, 1, 0])[0] == 1.0

    def test_single_class(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [0, 0])
        with pytest.raises(ValueError):
            mann_whitney_auc([0.1, 0.2], [1, 1])

    def test_curve_is_monotone(self):
        rng = np.random.default_rng(0)
        pts = roc_curve(rng.random(50), rng.random(50) < 0.3)
        assert np.all(np.diff(pts[:, 1]) >= 0) and np.all(np.diff(pts[:, 2]) >= 0)
        np.testing.assert_array_equal(pts[0, 1:], [0, 0])
        np.testing.assert_array_equal(pts[-1, 1:], [1, 1])

    def test_trapezoid_equals_pair_count_over_many_instances(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 201))
            scores = np.round(rng.random(n), int(rng.integers(1, 4)))   # coarse rounding forces ties
            fails = rng.random(n) < rng.uniform(0.1, 0.9)
            if fails.all() or not fails.any():
                fails[0] = not fails[0]
            worst = max(worst, abs(roc_auc(scores, fails)[0] - mann_whitney_auc(scores, fails)))
        assert worst < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 100), min_size=4, max_size=60), st.integers(0, 10_000))
    def test_invariant_under_monotone_transform(self, scores, seed):
        s = np.array(scores) / 100.0
        f = np.random.default_rng(seed).random(len(s)) < 0.5
        f[0], f[1] = True, False
        auc = roc_auc(s, f)[0]
        assert roc_auc(np.exp(3 * s) - 2, f)[0] == pytest.approx(auc, abs=1e-12)
        assert auc == pytest.approx(mann_whitney_auc(s, f), abs=1e-12)


class TestReport:
    def test_confident_correct_vs_uncertain_wrong(self):
        labels = np.zeros((4, 8, 8), dtype=int)
        labels[:, 2:6, 2:6] = 1
        probs = np.zeros((4, 2, 8, 8))
        probs[:, 1] = labels * 0.99 + (1 - labels) * 0.01
        probs[2:, 1] = 0.0
        probs[2:, 1, 0:2, 0:2] = 0.55                  # small, unsure, misplaced blob
        probs[:, 0] = 1 - probs[:, 1]
        rep = failure_report(probs, labels, [1])
        fails = rep.column("failure")
        np.testing.assert_array_equal(fails, [False, False, True, True])
        assert rep.auc["1"] == 1.0 == rep.auc["all"]
        conf = rep.column("confidence", cls=1)
        assert conf[0] > 0.8 > 0.1 > conf[2]
        d = rep.to_dict()
        assert len(d["rows"]) == 4 and "1" in d["roc"]

    def test_single_outcome_gives_nan_auc(self):
        labels = np.zeros((2, 4, 4), dtype=int)
        labels[:, 1:3, 1:3] = 1
        probs = np.stack([1.0 - labels, labels.astype(float)], axis=1)
        rep = failure_report(probs, labels, [1])
        assert math.isnan(rep.auc["1"])
        assert not rep.column("failure").any()
