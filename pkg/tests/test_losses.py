"""Closed forms and invariances of the ranking losses."""

import math

import numpy as np
import pytest

from ragkit.errors import InvariantError
from ragkit.losses import (
    Candidate,
    CandidateSet,
    LossConfig,
    list_loss,
    pair_loss,
    score_gradients,
    total_loss,
)


def make_set(labels, scores, positive_idx=0, query_id="q"):
    return CandidateSet(query_id,
                        [Candidate(ref=i, label=l, score=s) for i, (l, s) in
                         enumerate(zip(labels, scores))],
                        positive_idx)


class TestListLoss:
    def test_uniform_scores_give_log_of_count(self):
        # Positive plus 3 negatives, all scores equal: softmax is uniform
        # over 4 entries, so the loss is ln 4.
        assert list_loss([0.3, 0.3, 0.3, 0.3], 0, temperature=1.0) == pytest.approx(
            math.log(4), abs=1e-9)

    def test_hand_evaluated_margin_case(self):
        # positive 1, negatives [0, 0], temperature 0.5:
        # -log(e^2 / (e^2 + 2)) = log(1 + 2 e^-2)
        expected = math.log1p(2 * math.exp(-2))
        assert list_loss([1.0, 0.0, 0.0], 0, 0.5) == pytest.approx(expected, abs=1e-12)

    def test_dominant_positive_drives_loss_to_zero(self):
        assert list_loss([50.0, 0.0], 0, 1.0) < 1e-20

    def test_requires_a_negative(self):
        with pytest.raises(InvariantError):
            list_loss([1.0], 0, 1.0)

    def test_strictly_decreases_in_positive_score(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            scores = rng.normal(size=5)
            base = list_loss(scores, 2, 0.7)
            scores[2] += 0.01
            assert list_loss(scores, 2, 0.7) < base

    def test_shift_invariance(self):
        scores = np.array([0.4, -0.2, 0.9, 0.1])
        a = list_loss(scores, 2, 0.05)
        b = list_loss(scores + 3.7, 2, 0.05)
        assert a == pytest.approx(b, rel=1e-12)


class TestPairLoss:
    def test_three_graded_labels_equal_scores(self):
        # Pairs (1,0.5), (1,0), (0.5,0), each at zero margin: 3 ln 2.
        cs = make_set([1.0, 0.5, 0.0], [0.2, 0.2, 0.2])
        assert pair_loss(cs) == pytest.approx(3 * math.log(2), abs=1e-9)

    def test_single_pair_hand_value(self):
        # Margin ln 3 gives log(1 + 1/3) = log(4/3).
        cs = make_set([1.0, 0.0], [math.log(3), 0.0])
        assert pair_loss(cs) == pytest.approx(math.log(4 / 3), abs=1e-12)

    def test_equal_labels_mean_no_pairs(self):
        cs = make_set([0.5, 0.5, 0.5], [0.9, 0.1, -0.3])
        assert pair_loss(cs) == 0.0

    def test_excluding_positive_drops_its_pairs(self):
        cs = make_set([1.0, 0.5, 0.0], [0.0, 0.0, 0.0])
        # Only the (partial, none) pair remains.
        assert pair_loss(cs, include_positive=False) == pytest.approx(math.log(2), abs=1e-12)

    def test_invariant_under_order_preserving_relabeling(self):
        scores = [0.3, -0.1, 0.8, 0.05]
        a = pair_loss(make_set([1.0, 0.5, 0.0, 0.5], scores))
        b = pair_loss(make_set([9.0, 5.0, 1.0, 5.0], scores))
        assert a == b

    def test_shift_invariance(self):
        scores = np.array([0.4, -0.2, 0.9])
        a = pair_loss(make_set([1.0, 0.5, 0.0], list(scores)))
        b = pair_loss(make_set([1.0, 0.5, 0.0], list(scores + 11.0)))
        assert a == pytest.approx(b, rel=1e-12)


class TestTotalLoss:
    def test_zero_pair_weight_reduces_to_list(self):
        cs = make_set([1.0, 0.0, 0.5], [0.6, 0.1, 0.3])
        cfg = LossConfig(temperature=0.5, pairwise_weight=0.0)
        assert total_loss(cs, cfg) == list_loss(cs.scores(), 0, 0.5)

    def test_composed_closed_forms(self):
        # Equal scores with labels [1, 0.5, 0] at temperature 1: list term is
        # ln 3 (uniform over 3) and pair term is 3 ln 2.
        cs = make_set([1.0, 0.5, 0.0], [0.0, 0.0, 0.0])
        cfg = LossConfig(temperature=1.0, pairwise_weight=1.0)
        assert total_loss(cs, cfg) == pytest.approx(math.log(3) + 3 * math.log(2), abs=1e-9)

    def test_converged_regime_vanishes(self):
        cs = make_set([1.0, 0.5, 0.0], [200.0, 100.0, 0.0])
        assert total_loss(cs, LossConfig(temperature=1.0)) < 1e-12

    def test_requires_designated_positive_with_full_support(self):
        cs = make_set([0.5, 0.0], [0.1, 0.0])
        with pytest.raises(InvariantError):
            total_loss(cs, LossConfig())


class TestScoreGradients:
    def test_loss_matches_total_loss_exactly(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            labels = rng.choice([0.0, 0.5, 1.0], size=6)
            labels[1] = 1.0
            scores = rng.normal(size=6)
            cs = make_set(list(labels), list(scores), positive_idx=1)
            cfg = LossConfig(temperature=0.2, pairwise_weight=0.7)
            loss, _ = score_gradients(labels, scores, 1, cfg)
            assert loss == total_loss(cs, cfg)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        cfg = LossConfig(temperature=0.3, pairwise_weight=1.3)
        h = 1e-6
        for _ in range(30):
            n = int(rng.integers(2, 7))
            labels = rng.choice([0.0, 0.5, 1.0], size=n)
            pos = int(rng.integers(0, n))
            labels[pos] = 1.0
            scores = rng.normal(size=n)
            _, grad = score_gradients(labels, scores, pos, cfg)
            for i in range(n):
                bumped = scores.copy()
                bumped[i] += h
                up, _ = score_gradients(labels, bumped, pos, cfg)
                bumped[i] -= 2 * h
                dn, _ = score_gradients(labels, bumped, pos, cfg)
                numeric = (up - dn) / (2 * h)
                assert grad[i] == pytest.approx(numeric, abs=1e-6, rel=1e-5)

    def test_gradient_sums_to_zero(self):
        # Both loss terms depend only on score differences.
        labels = np.array([1.0, 0.5, 0.0, 0.0])
        scores = np.array([0.4, 0.1, -0.2, 0.3])
        _, grad = score_gradients(labels, scores, 0, LossConfig())
        assert abs(grad.sum()) < 1e-12
