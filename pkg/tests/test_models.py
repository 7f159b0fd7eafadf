"""Model-zoo checks: forwards vs hand-composed chains, loss formulas vs
direct evaluation, dropout statistics, and regularizer invariants."""

import numpy as np
import pytest

from selftune import models, ops
from selftune.tape import AutodiffError, Tape
from selftune.models import (
    DropoutMasks, NonFiniteLossError, RegBinding, RegularizedObjective,
    eval_dropout_factors, forward, jacobian_norm_penalty, linear_model,
    linear_network, mlp, sample_dropout_masks, training_loss, validation_loss,
)

RNG = np.random.default_rng(555)


class TestForward:
    def test_identity_linear_model(self):
        model = linear_model(2, out_dim=2)
        y = forward(model, np.array([[1.0, 2.0]]), [(np.eye(2),)])
        np.testing.assert_array_equal(y, [[1.0, 2.0]])

    def test_all_drop_mask_leaves_bias_path(self):
        model = mlp([3, 2], activation="identity")
        params = model.init_params(RNG)
        W, b = params[0]
        b = np.array([0.5, -1.0])
        x = RNG.standard_normal((4, 3))
        noise = DropoutMasks({"input": np.zeros((4, 3))})
        y = forward(model, x, [(W, b)], noise=noise)
        np.testing.assert_allclose(y, np.tile(b, (4, 1)), atol=0, rtol=0)

    def test_mlp_equals_hand_composition(self):
        model = mlp([3, 5, 2], activation="tanh")
        params = model.init_params(RNG)
        x = RNG.standard_normal((6, 3))
        (W1, b1), (W2, b2) = params
        expected = np.tanh(x @ W1 + b1) @ W2 + b2
        np.testing.assert_array_equal(forward(model, x, params), expected)

    def test_conv_chain_with_flatten(self):
        model = models.Model(
            [models.ConvSpec(1, 2, 2, activation="relu"),
             models.FlattenSpec(),
             models.DenseSpec(2 * 3 * 3, 2)],
            input_shape=(1, 4, 4),
        )
        params = model.init_params(RNG)
        x = RNG.standard_normal((3, 1, 4, 4))
        y = forward(model, x, params)
        assert ops.value_of(y).shape == (3, 2)

    def test_input_shape_mismatch(self):
        model = linear_model(3)
        with pytest.raises(AutodiffError):
            forward(model, np.ones((2, 4)), [(np.ones((3, 1)),)])


class TestTrainingLoss:
    def setup_method(self):
        self.X = RNG.standard_normal((8, 3))
        self.t = RNG.standard_normal(8)
        self.model = linear_model(3)
        self.obj = RegularizedObjective(
            loss="mse", regularizers=(RegBinding("weight_decay", 0),)
        )

    def ridge_formula(self, w, lam, n=None):
        n = n if n is not None else self.X.shape[0]
        r = self.X @ w - self.t
        return float(r @ r) / (2 * self.X.shape[0]) + lam * float(w @ w) / (2 * n)

    def test_zero_weights_data_term(self):
        w = np.zeros((3, 1))
        loss = training_loss(self.obj, self.model, [(w,)], np.array([2.0]),
                             (self.X, self.t))
        assert np.isclose(float(ops.value_of(loss)), float(self.t @ self.t) / 16.0)

    def test_penalty_vanishes_at_zero_weights(self):
        w = np.zeros((3, 1))
        l0 = training_loss(
            RegularizedObjective("mse", ()), self.model, [(w,)], np.array([]),
            (self.X, self.t))
        l1 = training_loss(self.obj, self.model, [(w,)], np.array([5.0]),
                           (self.X, self.t))
        assert float(ops.value_of(l0)) == float(ops.value_of(l1))

    def test_matches_direct_formula(self):
        w = RNG.standard_normal(3)
        lam = 0.7
        loss = training_loss(self.obj, self.model, [(w.reshape(3, 1),)],
                             np.array([lam]), (self.X, self.t))
        assert np.isclose(float(ops.value_of(loss)), self.ridge_formula(w, lam),
                          rtol=1e-12)

    def test_unscaled_penalty_variant(self):
        w = RNG.standard_normal(3)
        obj = RegularizedObjective(
            "mse", (RegBinding("weight_decay", 0),), penalty_scaling="unscaled")
        loss = training_loss(obj, self.model, [(w.reshape(3, 1),)],
                             np.array([0.7]), (self.X, self.t))
        r = self.X @ w - self.t
        direct = float(r @ r) / 16.0 + 0.7 * float(w @ w) / 2.0
        assert np.isclose(float(ops.value_of(loss)), direct, rtol=1e-12)

    def test_monotone_in_weight_decay(self):
        w = RNG.standard_normal((3, 1))
        losses = [
            float(ops.value_of(training_loss(
                self.obj, self.model, [(w,)], np.array([lam]), (self.X, self.t))))
            for lam in [0.0, 0.5, 1.0, 2.0]
        ]
        assert all(a < b for a, b in zip(losses, losses[1:]))

    def test_non_finite_loss_names_term(self):
        w = np.full((3, 1), 1e200)
        with pytest.raises(NonFiniteLossError) as exc:
            training_loss(self.obj, self.model, [(w,)], np.array([1.0]),
                          (self.X, self.t))
        assert exc.value.term == "data_loss"

    def test_duplicate_hyper_index_rejected(self):
        with pytest.raises(ValueError):
            RegularizedObjective(
                "mse",
                (RegBinding("weight_decay", 0), RegBinding("input_dropout", 0)),
            )


class TestValidationLoss:
    def test_perfect_fit_is_zero(self):
        X = RNG.standard_normal((5, 3))
        w = RNG.standard_normal((3, 1))
        t = (X @ w).ravel()
        model = linear_model(3)
        assert float(ops.value_of(validation_loss(model, [(w,)], (X, t)))) == 0.0

    def test_zero_weights_value(self):
        X = RNG.standard_normal((5, 3))
        t = RNG.standard_normal(5)
        model = linear_model(3)
        val = validation_loss(model, [(np.zeros((3, 1)),)], (X, t))
        assert np.isclose(float(ops.value_of(val)), float(t @ t) / 10.0)

    def test_direct_gradient_in_lambda_is_zero(self):
        """The validation objective has no hyperparameter-bearing term."""
        X = RNG.standard_normal((6, 3))
        t = RNG.standard_normal(6)
        model = linear_model(3)
        w = RNG.standard_normal((3, 1))
        with Tape() as tape:
            lam = tape.variable(np.array([0.3]))
            wv = tape.variable(w)
            out = validation_loss(model, [(wv,)], (X, t))
            grads = tape.backward(out)
        # weights carry gradient; lambda has no path into the objective
        assert grads.get(wv) is not None
        assert grads.get(lam) is None


class TestDropout:
    def test_rate_zero_all_ones(self):
        masks = sample_dropout_masks({"input": 0.0}, {"input": (10, 4)},
                                     np.random.default_rng(0))
        np.testing.assert_array_equal(masks.get("input"), np.ones((10, 4)))

    def test_rate_near_one_drops_almost_all(self):
        masks = sample_dropout_masks({"input": 1.0 - 1e-9}, {"input": (100, 100)},
                                     np.random.default_rng(0))
        assert masks.get("input").mean() < 1e-3

    def test_rate_out_of_range(self):
        with pytest.raises(ValueError):
            sample_dropout_masks({"input": 1.0}, {"input": (2, 2)},
                                 np.random.default_rng(0))
        with pytest.raises(ValueError):
            eval_dropout_factors({"input": -0.1})

    def test_keep_fraction_concentrates(self):
        """Empirical keep fraction within 3 sigma of (1 - rate), 1e5 draws."""
        rate = 0.3
        n = 100_000
        masks = sample_dropout_masks({"input": rate}, {"input": (n,)},
                                     np.random.default_rng(1234))
        keep = masks.get("input").mean()
        sigma = np.sqrt(rate * (1 - rate) / n)
        assert abs(keep - (1 - rate)) <= 3 * sigma

    def test_eval_factors(self):
        f = eval_dropout_factors({"input": 0.25})
        assert f.get("input") == 0.75

    def test_dropout_loss_expectation_matches_closed_form(self):
        """Mean training loss over masks converges to the closed-form
        expected loss (mean-field fit + variance penalty)."""
        from selftune.oracles import RidgeProblem, dropout_expected_loss

        X = RNG.standard_normal((6, 3))
        t = RNG.standard_normal(6)
        w = RNG.standard_normal(3)
        rate = 0.4
        problem = RidgeProblem(X=X, t=t, X_valid=X, t_valid=t)
        expected = dropout_expected_loss(problem, rate, w)

        model = linear_model(3)
        obj = RegularizedObjective("mse", (RegBinding("input_dropout", 0),))
        rng = np.random.default_rng(99)
        draws = 100_000
        vals = np.empty(draws)
        keep = (rng.random((draws, 6, 3)) < 1 - rate).astype(np.float64)
        for i in range(draws):
            noise = DropoutMasks({"input": keep[i]})
            vals[i] = float(ops.value_of(training_loss(
                obj, model, [(w.reshape(3, 1),)], np.array([rate]), (X, t),
                noise=noise)))
        se = vals.std(ddof=1) / np.sqrt(draws)
        assert abs(vals.mean() - expected) <= 3 * se


class TestJacobianNormPenalty:
    def test_identity_layers(self):
        m = 4
        model = linear_network([m, m, m])
        weights = [(np.eye(m),), (np.eye(m),)]
        pen = jacobian_norm_penalty(model, weights, np.exp(0.3), n_train=10)
        assert np.isclose(float(ops.value_of(pen)), np.exp(0.3) * m / 20.0)

    def test_single_layer(self):
        W = RNG.standard_normal((3, 2))
        model = linear_network([3, 2])
        pen = jacobian_norm_penalty(model, [(W,)], 2.0, n_train=7)
        assert np.isclose(float(ops.value_of(pen)), 2.0 * np.sum(W ** 2) / 14.0)

    def test_five_layer_product(self):
        dims = [3, 3, 3, 3, 3, 3]
        model = linear_network(dims)
        weights = [(RNG.standard_normal((3, 3)),) for _ in range(5)]
        prod = np.linalg.multi_dot([w[0] for w in weights])
        pen = jacobian_norm_penalty(model, weights, 1.5, n_train=5)
        assert np.isclose(float(ops.value_of(pen)), 1.5 * np.sum(prod ** 2) / 10.0,
                          rtol=1e-12)

    def test_rejects_nonlinear_model(self):
        model = mlp([3, 3, 1], activation="tanh")
        with pytest.raises(AutodiffError):
            jacobian_norm_penalty(model, model.init_params(RNG), 1.0, n_train=5)


class TestParamPlumbing:
    def test_flatten_round_trip(self):
        model = mlp([3, 4, 2])
        params = model.init_params(RNG)
        flat = model.flatten_params(params)
        assert flat.shape == (model.num_params,)
        rebuilt = model.unflatten_params(flat)
        for (a, b), (c, d) in zip(params, rebuilt):
            np.testing.assert_array_equal(a, ops.value_of(c))
            np.testing.assert_array_equal(b, ops.value_of(d))

    def test_unflatten_is_traceable(self):
        model = mlp([2, 3, 1])
        flat = model.flatten_params(model.init_params(RNG))
        x = RNG.standard_normal((4, 2))
        t = RNG.standard_normal(4)
        with Tape() as tape:
            fv = tape.variable(flat)
            weights = model.unflatten_params(fv)
            loss = validation_loss(model, weights, (x, t))
            grads = tape.backward(loss)
        assert grads[fv].shape == flat.shape

    def test_dropout_sites(self):
        model = mlp([3, 4, 4, 1])
        assert model.dropout_sites() == ["input", "act0", "act1"]
        shapes = model.dropout_site_shapes(batch=7)
        assert shapes["input"] == (7, 3)
        assert shapes["act0"] == (7, 4)
        assert shapes["act1"] == (7, 4)


class TestCrossEntropy:
    def test_matches_manual_log_softmax(self):
        from selftune.models import cross_entropy

        z = RNG.standard_normal((5, 3))
        labels = np.array([0, 2, 1, 1, 0])
        manual = float(np.mean(
            np.log(np.sum(np.exp(z), axis=1)) - z[np.arange(5), labels]))
        got = float(ops.value_of(cross_entropy(z, labels)))
        assert np.isclose(got, manual, rtol=1e-12)

    def test_stable_for_huge_logits(self):
        from selftune.models import cross_entropy

        z = np.array([[1000.0, 0.0], [-1000.0, 0.0]])
        labels = np.array([0, 1])
        value = float(ops.value_of(cross_entropy(z, labels)))
        assert np.isfinite(value) and value < 1e-6  # both confidently right

    def test_gradient_matches_softmax_minus_onehot(self):
        from selftune.models import cross_entropy
        from selftune.tape import Tape

        z0 = RNG.standard_normal((4, 3))
        labels = np.array([2, 0, 1, 2])
        with Tape() as tape:
            z = tape.variable(z0)
            loss = cross_entropy(z, labels)
            g = tape.backward(loss)[z]
        p = np.exp(z0 - z0.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        onehot = np.zeros_like(p)
        onehot[np.arange(4), labels] = 1.0
        np.testing.assert_allclose(g, (p - onehot) / 4, atol=1e-12)

    def test_classification_training_loss_path(self):
        from selftune.models import cross_entropy, mlp

        model = mlp([3, 5, 2], activation="relu")
        params = model.init_params(RNG)
        x = RNG.standard_normal((6, 3))
        labels = np.array([0, 1, 0, 1, 1, 0])
        obj = RegularizedObjective("cross_entropy", ())
        loss = training_loss(obj, model, params, np.array([]), (x, labels))
        direct = cross_entropy(forward(model, x, params), labels)
        assert float(ops.value_of(loss)) == float(ops.value_of(direct))
