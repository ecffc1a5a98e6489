import numpy as np
import pytest

from zslmetric.errors import ConfigError, DataError, DimensionError
from zslmetric.model import Model, Triplet, TripletBatch
from zslmetric.objective import (HyperParams, attribute_loss, gradients, hinge_loss,
                                 loss_and_gradients, regularizer, total_loss)

from helpers import differentiable_instance, random_batch, random_model, relative_error
from oracles import central_differences


def euclid_model(tau):
    return Model(w_x=np.eye(2), b_x=np.zeros(2), w_a=np.eye(2), tau=tau)


def triplet_with_s2(s2, z):
    # embed([a, 0]) - [0, 0] = [a, 0], so S^2 = a^2 under the identity model
    return Triplet(np.array([np.sqrt(s2), 0.0]), np.zeros(2), z)


class TestHingeLoss:
    def test_consistent_positive_inside_margin(self):
        assert hinge_loss(triplet_with_s2(0.0, 1), euclid_model(1.0)) == 0.0

    def test_positive_too_far(self):
        assert hinge_loss(triplet_with_s2(2.0, 1), euclid_model(0.5)) == pytest.approx(2.5)

    def test_negative_beyond_margin(self):
        assert hinge_loss(triplet_with_s2(2.0, -1), euclid_model(0.5)) == pytest.approx(0.0)


class TestAttributeLoss:
    def test_gated_off_for_negatives(self, rng):
        model = random_model(rng, 2, 2, 2)
        assert attribute_loss(Triplet(rng.normal(size=2), rng.uniform(size=2), -1), model) == 0.0

    def test_zero_for_perfect_prediction(self):
        assert attribute_loss(Triplet(np.array([0.3, 0.6]), np.array([0.3, 0.6]), 1),
                              euclid_model(1.0)) == 0.0

    def test_squared_error(self):
        # embed([-1, -1]) = [0, 0], so y - embed(x) = [1, 2]
        model = Model(w_x=np.eye(2), b_x=np.zeros(2), w_a=np.eye(2))
        t = Triplet(np.array([-1.0, -1.0]), np.array([1.0, 2.0]), 1)
        assert attribute_loss(t, model) == 5.0


class TestRegularizer:
    def test_zero_model(self):
        assert regularizer(Model(w_x=np.zeros((3, 2)), b_x=np.zeros(2), w_a=np.zeros((2, 2)))) == 0

    def test_hand_sum(self):
        model = Model(w_x=[[1.0], [1.0]], b_x=[2.0], w_a=[[3.0]])
        assert regularizer(model) == 15.0
        assert regularizer(model.replace(tau=-40.0)) == 15.0


class TestTotalLoss:
    def test_hinge_only_when_weights_zero(self, rng):
        model = random_model(rng, 4, 3, 2)
        batch = random_batch(rng, 10, 4, 3)
        hp = HyperParams(lam=0.0, mu=0.0)
        assert total_loss(batch, model, hp) == pytest.approx(sum(hinge_loss(t, model) for t in batch))

    def test_single_triplet_sum_of_terms(self):
        model = Model(w_x=[[1.0], [1.0]], b_x=[2.0], w_a=[[3.0]], tau=0.5)
        t = Triplet(np.array([-1.0, -1.0]), np.array([0.5]), 1)
        # embed = max(0, -2 + 2) = 0; S^2 = (0 - 0.5)^2 * 9 = 2.25
        expected = max(0.0, 1 - (0.5 - 2.25)) + 0.25 + 15.0
        assert total_loss([t], model, HyperParams(lam=1.0, mu=1.0)) == pytest.approx(expected)

    def test_regularizer_counted_once(self, rng):
        model = random_model(rng, 4, 3, 2)
        batch = random_batch(rng, 30, 4, 3)
        hp0, hp1 = HyperParams(mu=0.0), HyperParams(mu=2.0)
        diff = total_loss(batch, model, hp1) - total_loss(batch, model, hp0)
        assert diff == pytest.approx(2.0 * regularizer(model))

    def test_permutation_invariant(self, rng):
        model = random_model(rng, 4, 3, 2)
        batch = random_batch(rng, 25, 4, 3)
        perm = rng.permutation(25)
        hp = HyperParams()
        assert total_loss(batch[perm], model, hp) == pytest.approx(total_loss(batch, model, hp),
                                                                  rel=1e-13)

    def test_bounded_below_by_penalty(self, rng):
        hp = HyperParams(lam=0.7, mu=0.4)
        for _ in range(20):
            model = random_model(rng, 4, 3, 2)
            assert total_loss(random_batch(rng, 5, 4, 3), model, hp) >= hp.mu * regularizer(model)

    def test_empty_batch_rejected(self, rng):
        with pytest.raises(DataError):
            total_loss(TripletBatch(np.zeros((0, 4)), np.zeros((0, 3)), []),
                       random_model(rng, 4, 3, 2), HyperParams())

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            total_loss(random_batch(rng, 5, 6, 3), random_model(rng, 4, 3, 2), HyperParams())


class TestGradients:
    def test_flat_region_is_all_zero(self):
        # z = -1 and S^2 = 9 > tau + 1: hinge inactive, attribute loss gated off
        model = euclid_model(0.5)
        grads = gradients([triplet_with_s2(9.0, -1)], model, HyperParams(mu=0.0))
        for g in grads:
            assert np.all(np.asarray(g) == 0.0)

    def test_tau_gradient_active_positive(self):
        grads = gradients([triplet_with_s2(2.0, 1)], euclid_model(0.5), HyperParams(mu=0.0))
        assert grads.d_tau == -1.0

    def test_matches_finite_differences(self, rng):
        hp = HyperParams(lam=0.3, mu=0.1, m=3)
        for _ in range(10):
            model, batch = differentiable_instance(rng)
            loss, grads = loss_and_gradients(batch, model, hp)
            fd = central_differences(batch, model, hp)
            for name, g in zip(("w_x", "b_x", "w_a", "tau"), grads):
                assert relative_error(g, fd[name], loss) <= 1e-4, name

    def test_with_standardized_model(self, rng):
        model, batch = differentiable_instance(rng)
        model = model.replace(feature_mean=rng.normal(size=7) * 0.1,
                              feature_scale=rng.uniform(0.5, 2.0, size=7))
        hp = HyperParams(lam=0.5, mu=0.2)
        loss, grads = loss_and_gradients(batch, model, hp)
        fd = central_differences(batch, model, hp)
        # standardization shifts the kinks; compare only away from them
        assert relative_error(grads.d_w_a, fd["w_a"], loss) <= 1e-3

    def test_small_step_descends(self):
        rng = np.random.default_rng(99)
        model = random_model(rng, 6, 4, 3)
        batch = random_batch(rng, 40, 6, 4)
        hp = HyperParams(lam=0.4, mu=0.05)
        loss, g = loss_and_gradients(batch, model, hp)
        lr = 1e-2
        for _ in range(31):
            stepped = model.replace(w_x=model.w_x - lr * g.d_w_x, b_x=model.b_x - lr * g.d_b_x,
                                    w_a=model.w_a - lr * g.d_w_a, tau=model.tau - lr * g.d_tau)
            if total_loss(batch, stepped, hp) < loss:
                break
            lr /= 2
        else:
            pytest.fail("no descent within 30 halvings")


class TestHyperParams:
    @pytest.mark.parametrize("field,value", [("lam", -0.1), ("mu", -1.0), ("m", 0),
                                             ("batch_size", 0), ("epochs", 0), ("restarts", 0),
                                             ("seed", -1), ("seed", 2**64)])
    def test_invalid_values(self, field, value):
        with pytest.raises(ConfigError):
            HyperParams(**{field: value})
