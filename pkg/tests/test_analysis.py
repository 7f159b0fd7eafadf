"""Diagnostics checks: curvature factorization, Kronecker condition
numbers, rank-one second-moment structure, alignment and spike terms."""

import numpy as np
import pytest

from selftune import models, ops
from selftune.analysis import (
    AnalysisError, conditioning_report, gradient_alignment,
    hypernet_gauss_newton, kron_condition, model_gauss_newton,
    predicted_spike_term, second_moment_decomposition,
)
from selftune.dual import jvp
from selftune.models import mlp

RNG = np.random.default_rng(31415)


def random_spd(dim, rng, spread=3.0):
    Q = rng.standard_normal((dim, dim))
    A = Q @ Q.T + spread * np.eye(dim)
    return 0.5 * (A + A.T)


class TestHypernetGaussNewton:
    def test_single_sample_scalar_coordinate(self):
        J = RNG.standard_normal((2, 3))
        H = random_spd(2, RNG)
        G = hypernet_gauss_newton([(np.array([1.0]), J, H)])
        np.testing.assert_allclose(G, J.T @ H @ J, atol=1e-12)

    def test_bias_only_coordinate_block_structure(self):
        """Homogeneous coordinate (0, 1): only the bias block is nonzero."""
        J = RNG.standard_normal((2, 2))
        H = np.eye(2)
        G = hypernet_gauss_newton([(np.array([0.0, 1.0]), J, H)])
        m = 2
        np.testing.assert_array_equal(G[:m, :m], np.zeros((m, m)))
        np.testing.assert_array_equal(G[:m, m:], np.zeros((m, m)))
        assert np.any(G[m:, m:] != 0)

    def test_matches_jvp_assembled_curvature(self):
        """Small MLP: the Kronecker formula equals the curvature assembled
        column-by-column from forward-mode derivatives of the full
        hypernetwork map (column-stacked [Theta-like | offset] layout)."""
        model = mlp([2, 3, 2], activation="tanh")
        m = model.num_params
        h = 1
        x = RNG.standard_normal((4, 2))
        w0 = model.flatten_params(model.init_params(RNG))
        Phi = RNG.standard_normal((m, h)) * 0.2

        def net_out(flat_w, xi):
            weights = model.unflatten_params(flat_w)
            return models.forward(model, xi, weights)

        samples = []
        assembled = []
        for i in range(x.shape[0]):
            xi = x[i:i + 1]
            lam_hat = np.append(RNG.standard_normal(h), 1.0)
            w = np.column_stack([Phi, w0]) @ lam_hat
            # weight-output Jacobian, one jvp per weight coordinate
            J = np.zeros((2, m))
            for k in range(m):
                e = np.zeros(m)
                e[k] = 1.0
                out = jvp(lambda W: net_out(W, xi), [w], [e])
                J[:, k] = ops.value_of(out.tangent).reshape(-1)
            H = random_spd(2, RNG, spread=1.0)
            samples.append((lam_hat, J, H))
            # hypernetwork-parameter Jacobian assembled per coordinate:
            # column-stacked layout -> phi coordinate (k, j) moves w_k by lam_hat[j]
            Jphi = np.zeros((2, (h + 1) * m))
            for j in range(h + 1):
                Jphi[:, j * m:(j + 1) * m] = lam_hat[j] * J
            assembled.append(Jphi.T @ H @ Jphi)
        G_formula = hypernet_gauss_newton(samples)
        G_assembled = np.mean(assembled, axis=0)
        np.testing.assert_allclose(G_formula, G_assembled, atol=1e-8)

    def test_symmetric_psd(self):
        samples = []
        for _ in range(6):
            lam_hat = np.append(RNG.standard_normal(2), 1.0)
            J = RNG.standard_normal((3, 4))
            samples.append((lam_hat, J, random_spd(3, RNG, 0.5)))
        G = hypernet_gauss_newton(samples)
        np.testing.assert_allclose(G, G.T, atol=1e-12)
        assert np.linalg.eigvalsh(G).min() >= -1e-10

    def test_centered_coordinates_drop_mean_outer_product(self):
        """Replacing sampled coordinates (lam+eps, 1) by centered (eps, 1)
        is exactly the lam -> 0 substitution in the curvature formula."""
        lam = np.array([3.0, -2.0])
        J = RNG.standard_normal((2, 3))
        H = np.eye(2)
        eps_draws = [RNG.standard_normal(2) for _ in range(5)]
        uncentered = hypernet_gauss_newton(
            [(np.append(lam + e, 1.0), J, H) for e in eps_draws])
        centered = hypernet_gauss_newton(
            [(np.append(e, 1.0), J, H) for e in eps_draws])
        shifted = hypernet_gauss_newton(
            [(np.append((lam - lam) + e, 1.0), J, H) for e in eps_draws])
        np.testing.assert_allclose(centered, shifted, atol=1e-12)
        assert np.linalg.norm(uncentered) > np.linalg.norm(centered)

    def test_size_guard(self):
        J = np.ones((1, 3000))
        with pytest.raises(AnalysisError):
            hypernet_gauss_newton([(np.array([1.0, 1.0]), J, np.eye(1))])


class TestKronCondition:
    def test_identity(self):
        ka, kb, kab = kron_condition(np.eye(3), np.eye(2))
        assert ka == kb == kab == 1.0

    def test_diagonal_case(self):
        ka, kb, kab = kron_condition(np.diag([1.0, 4.0]), np.diag([1.0, 2.0]))
        assert (ka, kb) == (4.0, 2.0)
        assert np.isclose(kab, 8.0)

    def test_multiplicativity_random_pair(self):
        A = random_spd(3, RNG)
        B = random_spd(3, RNG)
        ka, kb, kab = kron_condition(A, B)
        assert abs(kab - ka * kb) / (ka * kb) <= 1e-8

    def test_hundred_random_pairs(self):
        rng = np.random.default_rng(2718)
        for trial in range(100):
            da = int(rng.integers(2, 7))
            db = int(rng.integers(2, 7))
            ka, kb, kab = kron_condition(random_spd(da, rng, 1.0),
                                         random_spd(db, rng, 1.0))
            assert abs(kab - ka * kb) / (ka * kb) <= 1e-8

    def test_rejects_non_spd(self):
        with pytest.raises(AnalysisError):
            kron_condition(np.diag([1.0, -1.0]), np.eye(2))
        with pytest.raises(AnalysisError):
            kron_condition(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(2))


class TestSecondMoment:
    def test_zero_mean_kappa_from_sigma(self):
        sigma = np.array([1.0, 2.0, 0.5])
        report = second_moment_decomposition(np.zeros(3), sigma)
        assert np.isclose(report.kappa, (2.0 ** 2) / (0.5 ** 2))

    def test_rank_one_on_identity_exact(self):
        """sigma = 1, |lam|^2 = 99: eigenvalues {1, ..., 1, 100}, exactly."""
        lam = np.array([7.0, 7.0, 1.0, 0.0])  # 49 + 49 + 1 = 99
        report = second_moment_decomposition(lam, np.ones(4))
        assert report.eig_max == 100.0
        assert report.eig_min == 1.0
        assert report.kappa == 100.0

    def test_centering_gives_unit_kappa(self):
        report = second_moment_decomposition(np.zeros(4), np.ones(4))
        assert report.kappa == 1.0

    def test_interlacing_bounds(self):
        for _ in range(20):
            h = int(RNG.integers(2, 6))
            lam = RNG.standard_normal(h) * 3
            sigma = RNG.uniform(0.5, 2.0, h)
            rep = second_moment_decomposition(lam, sigma)
            assert rep.eig_max >= float(lam @ lam) - 1e-10
            assert rep.eig_min >= min(sigma ** 2) - 1e-10

    def test_isotropic_max_shift(self):
        lam = RNG.standard_normal(5)
        rep = second_moment_decomposition(lam, np.full(5, 1.3))
        assert np.isclose(rep.eig_max, 1.3 ** 2 + float(lam @ lam), atol=1e-12)

    def test_dense_branch_matches_eigensolve(self):
        lam = RNG.standard_normal(4)
        sigma = RNG.uniform(0.5, 2.0, 4)
        rep = second_moment_decomposition(lam, sigma)
        eigs = np.linalg.eigvalsh(np.diag(sigma ** 2) + np.outer(lam, lam))
        assert np.isclose(rep.eig_min, eigs[0])
        assert np.isclose(rep.eig_max, eigs[-1])

    def test_centering_reduces_kappa_on_trained_run(self):
        """Uncentered coordinates at the final hyperparameters of a real
        run condition strictly worse than the centered ones."""
        from selftune.bilevel import (BilevelConfig, TrainingProblem, run)
        from selftune.hypernet import HyperparamState, TransformSpec
        from selftune.models import RegBinding, RegularizedObjective, linear_model

        rng = np.random.default_rng(6)
        X = rng.standard_normal((12, 3))
        t = X @ rng.standard_normal(3) + 0.5 * rng.standard_normal(12)
        problem = TrainingProblem(
            model=linear_model(3),
            objective=RegularizedObjective("mse", (RegBinding("weight_decay", 0),)),
            X=X, t=t, X_valid=X, t_valid=t)
        config = BilevelConfig(alpha1=0.05, alpha2=0.01, seed=3, t_train=5)
        hyper = HyperparamState.from_domain_init(
            (TransformSpec("identity"),), [2.0])
        result = run(config, problem, "dstn", hyper, steps=50)
        lam_final = result.state.hyper.lam
        sigma = result.state.hyper.sigma
        uncentered = second_moment_decomposition(lam_final, sigma)
        centered = second_moment_decomposition(np.zeros_like(lam_final), sigma)
        assert centered.kappa <= uncentered.kappa


class TestAlignmentAndSpike:
    def test_equal_gradients(self):
        g = RNG.standard_normal(5)
        assert gradient_alignment(g, g) == 1.0

    def test_orthogonal(self):
        assert abs(gradient_alignment([1.0, 0.0], [0.0, 1.0])) == 0.0

    def test_zero_vector_rejected(self):
        with pytest.raises(AnalysisError):
            gradient_alignment(np.zeros(3), np.ones(3))

    def test_shared_data_ridge_cosine_one(self):
        """Same data in both losses and no penalty term active: gradients
        are proportional."""
        rng = np.random.default_rng(4)
        X = rng.standard_normal((10, 3))
        t = rng.standard_normal(10)
        w = rng.standard_normal(3)
        g = X.T @ (X @ w - t) / 10
        assert np.isclose(gradient_alignment(g, 2.5 * g), 1.0, atol=1e-12)

    def test_spike_zero_at_origin(self):
        g = RNG.standard_normal(4)
        np.testing.assert_array_equal(
            predicted_spike_term(g, g, np.zeros(2), 0.1), np.zeros(2))

    def test_spike_sign_for_aligned_gradients(self):
        g = RNG.standard_normal(4)
        lam = np.array([2.0])
        term = predicted_spike_term(g, g, lam, alpha=0.1)
        assert term[0] < 0  # descent pushes lambda further from zero


class TestConditioningReport:
    def test_report_fields_and_product(self):
        X = RNG.standard_normal((20, 4))
        G_w = model_gauss_newton(X)
        rep = conditioning_report(np.array([3.0, 0.0]), np.ones(2), G_w)
        assert rep.kappa_lambda >= 1.0 and rep.kappa_gw >= 1.0
        assert np.isclose(rep.kappa_product, rep.kappa_lambda * rep.kappa_gw)
        assert set(rep.eigen_extremes) == {"lambda_factor", "gw_factor"}

    def test_round_trip_dict(self):
        X = RNG.standard_normal((9, 3))
        rep = conditioning_report(np.zeros(2), np.ones(2), model_gauss_newton(X))
        d = rep.to_dict()
        assert d["kappa_lambda"] == 1.0
