import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from zslmetric.errors import DataError, DimensionError
from zslmetric.model import (Model, Triplet, TripletBatch, embed_image, metric_distance,
                             score, score_matrix, score_squared)

from helpers import random_model
from oracles import brute_embed, brute_quadratic_form


def identity_model(n, b=None, w_a=None):
    return Model(w_x=np.eye(n), b_x=np.zeros(n) if b is None else b,
                 w_a=np.eye(n) if w_a is None else w_a)


class TestEmbedImage:
    def test_relu_clips_negative(self):
        np.testing.assert_array_equal(embed_image([1.0, -2.0], identity_model(2)), [1.0, 0.0])

    def test_zero_input_leaves_bias(self):
        model = Model(w_x=[[3.0, 1.0], [-2.0, 5.0]], b_x=[0.5, -0.5], w_a=np.eye(2))
        np.testing.assert_array_equal(embed_image([0.0, 0.0], model), [0.5, 0.0])

    def test_hand_evaluated(self):
        model = Model(w_x=[[1.0, 2.0], [3.0, -1.0]], b_x=[-1.0, 0.0], w_a=np.eye(2))
        np.testing.assert_array_equal(embed_image([1.0, 1.0], model), [3.0, 1.0])

    def test_dimension_mismatch_names_sizes(self):
        with pytest.raises(DimensionError, match="expected dimension 2, got 3"):
            embed_image([1.0, 2.0, 3.0], identity_model(2))

    def test_matches_loop_reference(self, rng):
        model = random_model(rng, 6, 4, 3)
        x = rng.normal(size=6)
        np.testing.assert_allclose(embed_image(x, model), brute_embed(x, model.w_x, model.b_x),
                                   rtol=1e-12, atol=1e-14)

    def test_standardization_applied(self):
        model = Model(w_x=np.eye(2), b_x=np.zeros(2), w_a=np.eye(2),
                      feature_mean=[1.0, 1.0], feature_scale=[2.0, 0.5])
        np.testing.assert_array_equal(embed_image([3.0, 2.0], model), [1.0, 2.0])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5,), elements=st.floats(-1e3, 1e3)))
    def test_output_nonnegative(self, x):
        model = random_model(np.random.default_rng(1), 5, 3, 2)
        assert np.all(embed_image(x, model) >= 0)


class TestScore:
    def test_zero_when_embedding_matches(self):
        model = identity_model(3)
        assert score([0.2, 0.0, 0.7], [0.2, 0.0, 0.7], model) == 0.0

    def test_euclidean_three_four_five(self):
        model = identity_model(2)
        # embed([3, 4]) - [0, 0] = [3, 4]
        assert score([3.0, 4.0], [0.0, 0.0], model) == 5.0
        assert score_squared([3.0, 4.0], [0.0, 0.0], model) == 25.0

    def test_homogeneous_in_w_a(self, rng):
        model = random_model(rng, 5, 4, 3)
        x, y = rng.normal(size=5), rng.uniform(size=4)
        scaled = model.replace(w_a=2.5 * model.w_a)
        np.testing.assert_allclose(score(x, y, scaled), 2.5 * score(x, y, model), rtol=1e-14)

    def test_squared_matches_square(self, rng):
        for _ in range(50):
            model = random_model(rng, 6, 5, 3)
            x, y = rng.normal(size=6), rng.uniform(size=5)
            np.testing.assert_allclose(score_squared(x, y, model), score(x, y, model) ** 2,
                                       rtol=1e-12)

    def test_squared_matches_quadratic_form(self, rng):
        model = random_model(rng, 4, 3, 2)
        x, y = rng.normal(size=4), rng.uniform(size=3)
        a = brute_embed(x, model.w_x, model.b_x)
        np.testing.assert_allclose(score_squared(x, y, model),
                                   brute_quadratic_form(a, y, model.w_a), rtol=1e-12)

    def test_attribute_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            score([1.0, 2.0], [0.5, 0.5, 0.5], identity_model(2))

    def test_score_matrix_agrees_with_score(self, rng):
        model = random_model(rng, 5, 4, 2)
        xs, ys = rng.normal(size=(6, 5)), rng.uniform(size=(3, 4))
        mat = score_matrix(xs, ys, model)
        for i in range(6):
            for k in range(3):
                assert mat[i, k] == pytest.approx(score(xs[i], ys[k], model), rel=1e-10, abs=1e-12)

    def test_argmin_invariant_to_metric_scale(self, rng):
        model = random_model(rng, 5, 4, 3)
        xs, ys = rng.normal(size=(20, 5)), rng.uniform(size=(6, 4))
        base = np.argmin(score_matrix(xs, ys, model), axis=1)
        scaled = np.argmin(score_matrix(xs, ys, model.replace(w_a=7.0 * model.w_a)), axis=1)
        np.testing.assert_array_equal(base, scaled)


vectors = arrays(np.float64, (4,), elements=st.floats(-10, 10))


class TestMetricDistance:
    w_a = np.random.default_rng(3).normal(size=(4, 2))

    @settings(max_examples=200, deadline=None)
    @given(vectors, vectors, vectors)
    def test_triangle_inequality(self, a, b, c):
        assert metric_distance(a, c, self.w_a) <= (metric_distance(a, b, self.w_a)
                                                    + metric_distance(b, c, self.w_a) + 1e-9)

    @settings(max_examples=100, deadline=None)
    @given(vectors, vectors)
    def test_symmetric(self, a, b):
        assert metric_distance(a, b, self.w_a) == pytest.approx(metric_distance(b, a, self.w_a),
                                                                abs=1e-12)


class TestTypes:
    def test_model_is_read_only(self):
        model = identity_model(2)
        with pytest.raises(ValueError):
            model.w_x[0, 0] = 5.0

    def test_model_rejects_inconsistent_shapes(self):
        with pytest.raises(DimensionError):
            Model(w_x=np.eye(3), b_x=np.zeros(2), w_a=np.eye(3))
        with pytest.raises(DimensionError):
            Model(w_x=np.eye(3), b_x=np.zeros(3), w_a=np.eye(2))

    def test_model_rejects_nan(self):
        with pytest.raises(DataError):
            Model(w_x=[[np.nan]], b_x=[0.0], w_a=[[1.0]])

    def test_triplet_z_domain(self):
        with pytest.raises(DataError):
            Triplet(np.zeros(2), np.zeros(2), 0)
        with pytest.raises(DataError):
            TripletBatch(np.zeros((2, 2)), np.zeros((2, 2)), [1, 2])

    def test_batch_round_trip(self, rng):
        triplets = [Triplet(rng.normal(size=3), rng.uniform(size=2), z) for z in (1, -1, 1)]
        batch = TripletBatch.from_triplets(triplets)
        assert len(batch) == 3
        assert [t.z for t in batch] == [1, -1, 1]
        np.testing.assert_array_equal(batch[1].x, triplets[1].x)
