#!/usr/bin/env python3
"""
Unit tests for soft/hard quantization and the residual cascade
"""

import numpy as np
import pytest

from progq.core import Codebook
from progq.errors import ConfigurationError, ShapeError
from progq.quantizer import (
    DistortionWeights,
    cascade_batch,
    cosine_distance,
    cosine_distances,
    diagnostics,
    distortion,
    distortion_batch,
    forward_cascade,
    hard_assign,
    hard_assign_batch,
    hard_distortion_profile,
    hard_quantize,
    soft_assign,
    soft_quantize,
    squared_euclidean_distances,
)


class TestDistances:
    """Test distance functions"""

    def test_cosine_of_parallel_vectors(self):
        assert cosine_distance([1.0, 0.0], [3.0, 0.0]) == pytest.approx(-1.0)
        assert cosine_distance([1.0, 0.0], [-2.0, 0.0]) == pytest.approx(1.0)

    def test_degenerate_norm_is_zero_and_counted(self):
        diagnostics.reset()
        assert cosine_distance([0.0, 0.0], [1.0, 2.0]) == 0.0
        D = cosine_distances(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 1.0], [0.0, 0.0]]))
        assert D[0, 0] == 0.0 and D[1, 1] == 0.0 and D[0, 1] == 0.0
        assert diagnostics.degenerate_norms == 4
        diagnostics.reset()

    def test_squared_euclidean_matches_direct(self, rng):
        X = rng.standard_normal((7, 3))
        C = rng.standard_normal((4, 3))
        expected = np.array([[np.sum((x - c) ** 2) for c in C] for x in X])
        np.testing.assert_allclose(squared_euclidean_distances(X, C), expected)


class TestSoftAssignment:
    """Test the softmax relaxation"""

    def test_weights_form_distribution(self, rng):
        cb = Codebook(rng.standard_normal((8, 4)))
        a = soft_assign(rng.standard_normal(4), cb, 20.0)
        assert a.shape == (8,)
        assert np.all(a >= 0)
        assert a.sum() == pytest.approx(1.0)

    def test_large_gamma_is_stable(self, rng):
        cb = Codebook(rng.standard_normal((4, 3)))
        a = soft_assign(rng.standard_normal(3), cb, 1e8, metric="euclidean")
        assert np.all(np.isfinite(a))
        assert a.max() == pytest.approx(1.0)

    def test_single_codeword(self):
        cb = Codebook(np.array([[1.0, 2.0]]))
        assert soft_assign([5.0, -1.0], cb, 3.0)[0] == 1.0
        np.testing.assert_allclose(soft_quantize([5.0, -1.0], cb, 3.0), [1.0, 2.0])

    def test_zero_input_gives_uniform_cosine_weights(self):
        cb = Codebook(np.eye(4))
        np.testing.assert_allclose(soft_assign(np.zeros(4), cb, 50.0), np.full(4, 0.25))
        diagnostics.reset()

    def test_rejects_bad_gamma_and_metric(self, rng):
        cb = Codebook(rng.standard_normal((2, 2)))
        with pytest.raises(ConfigurationError):
            soft_assign([1.0, 1.0], cb, 0.0)
        with pytest.raises(ConfigurationError):
            soft_assign([1.0, 1.0], cb, 1.0, metric="manhattan")

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ShapeError):
            soft_assign([1.0, 2.0, 3.0], Codebook(rng.standard_normal((2, 2))), 1.0)


class TestSoftHardLimit:
    """Soft quantization approaches hard quantization as gamma grows"""

    @pytest.mark.parametrize("metric", ["euclidean", "cosine"])
    def test_high_gamma_matches_hard(self, metric):
        rng = np.random.default_rng(99)
        checked = 0
        for _ in range(1000):
            C = rng.standard_normal((8, 4))
            x = rng.standard_normal(4)
            d = np.sort(np.linalg.norm(C - x, axis=1) if metric == "euclidean" else
                        [cosine_distance(x, c) for c in C])
            if d[1] - d[0] < 0.01:
                continue
            checked += 1
            gap = np.linalg.norm(soft_quantize(x, C, 1e4, metric) - hard_quantize(x, C, metric))
            assert gap < 1e-6 * np.linalg.norm(x)
        assert checked > 900

    @pytest.mark.parametrize("metric", ["euclidean", "cosine"])
    def test_discrepancy_shrinks_with_gamma(self, metric):
        rng = np.random.default_rng(7)
        instances = []
        while len(instances) < 1000:
            C, x = rng.standard_normal((8, 4)), rng.standard_normal(4)
            d = np.sort(np.linalg.norm(C - x, axis=1) if metric == "euclidean" else
                        [cosine_distance(x, c) for c in C])
            if d[1] - d[0] >= 0.01:
                instances.append((C, x))
        gaps = np.array([[np.linalg.norm(soft_quantize(x, C, gamma, metric) - hard_quantize(x, C, metric))
                          for C, x in instances] for gamma in (1.0, 10.0, 100.0, 1e4)])
        means = gaps.mean(axis=1)
        assert all(a >= b for a, b in zip(means, means[1:])), means
        norms = np.array([np.linalg.norm(x) for _, x in instances])
        assert np.all(gaps[-1] < 1e-6 * norms)


class TestHardAssignment:
    """Test nearest-codeword selection"""

    def test_nearest(self):
        C = np.array([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]])
        assert hard_assign([0.9, 1.2], C) == 1
        np.testing.assert_array_equal(hard_quantize([4.0, 4.5], C), [5.0, 5.0])

    def test_ties_go_to_lowest_index(self):
        C = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
        assert hard_assign([0.0, 0.0], C) == 0
        assert hard_assign([2.0, 0.0], C) == 0

    def test_batch_matches_single(self, rng):
        C = rng.standard_normal((16, 3))
        X = rng.standard_normal((20, 3))
        assert list(hard_assign_batch(X, C)) == [hard_assign(x, C) for x in X]


class TestCascade:
    """Test the two-track residual cascade"""

    def test_encode_mode_feeds_hard_residuals(self, rng):
        books = [Codebook(rng.standard_normal((4, 3)) * 0.5 ** l) for l in range(3)]
        x = rng.standard_normal(3)
        state = forward_cascade(x, books, 20.0, mode="encode")
        np.testing.assert_allclose(state.inputs, state.hard_inputs)
        np.testing.assert_allclose(state.hard_inputs[1], x - state.hard[0])

    def test_train_mode_feeds_soft_residuals(self, rng):
        books = [Codebook(rng.standard_normal((4, 3))) for _ in range(2)]
        x = rng.standard_normal(3)
        state = forward_cascade(x, books, 5.0, mode="train")
        np.testing.assert_allclose(state.inputs[1], x - state.soft[0])
        np.testing.assert_allclose(state.weights.sum(axis=1), 1.0)

    def test_hard_reconstruction_sums_layers(self, rng):
        books = [Codebook(rng.standard_normal((4, 2))) for _ in range(3)]
        state = forward_cascade(rng.standard_normal(2), books, 1.0)
        np.testing.assert_allclose(state.hard_reconstruction(2), state.hard[0] + state.hard[1])

    def test_batch_state_matches_single(self, rng):
        books = [Codebook(rng.standard_normal((4, 3))) for _ in range(2)]
        X = rng.standard_normal((5, 3))
        batch = cascade_batch(X, books, 10.0)
        single = forward_cascade(X[3], books, 10.0)
        np.testing.assert_allclose(batch.state(3).soft, single.soft)
        assert batch.state(3).indices == single.indices

    def test_unknown_mode(self, rng):
        with pytest.raises(ConfigurationError):
            cascade_batch(rng.standard_normal((2, 2)), [rng.standard_normal((2, 2))], 1.0, mode="eval")

    def test_codebook_dimension_checked(self, rng):
        with pytest.raises(ShapeError) as exc:
            cascade_batch(rng.standard_normal((2, 3)), [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))], 1.0)
        assert exc.value.details["layer"] == 2


class TestDistortion:
    """Test the weighted distortion terms"""

    def test_total_is_weighted_sum(self, rng):
        books = [Codebook(rng.standard_normal((4, 3))) for _ in range(3)]
        x = rng.standard_normal(3)
        wts = DistortionWeights((1.0, 0.5, 2.0), mu=0.7, nu=0.3, gamma=8.0)
        state = forward_cascade(x, books, wts.gamma)
        result = distortion(x, state, wts)
        expected = (np.dot(wts.w, result.soft_losses) + 0.7 * np.dot(wts.w, result.hard_losses)
                    + 0.3 * np.dot(wts.w, result.match_losses))
        assert result.total == pytest.approx(expected)
        soft_l2 = np.sum((x - state.soft[0] - state.soft[1]) ** 2)
        assert result.soft_losses[1] == pytest.approx(soft_l2)

    def test_batch_total_is_mean_of_samples(self, rng):
        books = [Codebook(rng.standard_normal((4, 3))) for _ in range(2)]
        X = rng.standard_normal((6, 3))
        wts = DistortionWeights.uniform(2)
        batch = distortion_batch(cascade_batch(X, books, wts.gamma), wts)
        singles = [distortion(x, forward_cascade(x, books, wts.gamma), wts).total for x in X]
        assert batch.total == pytest.approx(np.mean(singles))
        np.testing.assert_allclose(batch.extras["per_sample"], singles)

    def test_weight_count_must_match_layers(self, rng):
        books = [Codebook(rng.standard_normal((2, 2)))]
        x = rng.standard_normal(2)
        with pytest.raises(ShapeError):
            distortion(x, forward_cascade(x, books, 1.0), DistortionWeights.uniform(2))

    @pytest.mark.parametrize("metric", ["euclidean", "cosine"])
    def test_permuting_codewords_leaves_distortion_unchanged(self, rng, metric):
        books = [Codebook(rng.standard_normal((8, 3)) * 0.7 ** l) for l in range(3)]
        perm = rng.permutation(8)
        shuffled = [books[0], Codebook(books[1].codewords[perm]), books[2]]
        wts = DistortionWeights((1.0, 0.5, 2.0), mu=0.7, nu=0.3, gamma=8.0)
        for x in rng.standard_normal((20, 3)):
            a = forward_cascade(x, books, wts.gamma, soft_metric=metric)
            b = forward_cascade(x, shuffled, wts.gamma, soft_metric=metric)
            assert distortion(x, b, wts).total == pytest.approx(distortion(x, a, wts).total, abs=1e-9)
            assert perm[b.indices[1]] == a.indices[1]

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigurationError):
            DistortionWeights((1.0, -1.0))

    def test_profile_never_increases_with_zero_codewords(self, rng):
        # a zero codeword in every layer means the nearest codeword never makes the residual longer
        books = []
        for l in range(4):
            C = rng.standard_normal((8, 5)) * 0.6 ** l
            C[0] = 0.0
            books.append(Codebook(C))
        profile = hard_distortion_profile(rng.standard_normal((100, 5)), books)
        assert np.all(np.diff(profile) <= 1e-12)
