"""Closed-form oracle checks: each value is either trivially known,
derived here by an independent route (finite differences, dense solves,
Monte Carlo, re-solving), or pinned by cross-derivation identities."""

import numpy as np
import pytest

from selftune.oracles import (
    OracleError, QuadraticProblem, RidgeProblem, bilevel_outer_grad,
    bilevel_outer_loss, bilevel_solve, dropout_expected_loss,
    implicit_jacobian_check, quadratic_br_jacobian, ridge_best_response,
    ridge_br_jacobian, stn_biased_fixed_point,
)

RNG = np.random.default_rng(424242)


def make_ridge(n=12, m=4, v=6, noise=0.3, seed=1, transform="identity",
               scaling="per_n"):
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(m)
    X = rng.standard_normal((n, m))
    t = X @ w_true + noise * rng.standard_normal(n)
    Xv = rng.standard_normal((v, m))
    tv = Xv @ w_true + noise * rng.standard_normal(v)
    return RidgeProblem(X=X, t=t, X_valid=Xv, t_valid=tv,
                        lambda_transform=transform, penalty_scaling=scaling)


class TestRidgeBestResponse:
    def test_identity_design(self):
        p = RidgeProblem(X=np.eye(2), t=[1.0, 1.0], X_valid=np.eye(2),
                         t_valid=[1.0, 1.0], lambda_transform="identity")
        np.testing.assert_allclose(ridge_best_response(p, 0.0), [1.0, 1.0])

    def test_norm_shrinks_monotonically(self):
        p = make_ridge()
        norms = [np.linalg.norm(ridge_best_response(p, lam))
                 for lam in [0.0, 1.0, 10.0, 100.0, 1e4]]
        assert all(a > b for a, b in zip(norms, norms[1:]))
        assert norms[-1] < 1e-2

    def test_matches_dense_solve(self):
        X = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
        t = np.array([1.0, 2.0, 2.0])
        p = RidgeProblem(X=X, t=t, X_valid=X, t_valid=t,
                         lambda_transform="identity")
        expected = np.linalg.solve(X.T @ X + np.eye(2), X.T @ t)
        np.testing.assert_allclose(ridge_best_response(p, 1.0), expected,
                                   atol=1e-12)

    def test_unscaled_penalty_multiplies_by_n(self):
        p = make_ridge(scaling="unscaled")
        w_unscaled = ridge_best_response(p, 0.5)
        expected = np.linalg.solve(p.X.T @ p.X + 0.5 * p.n * np.eye(p.m),
                                   p.X.T @ p.t)
        np.testing.assert_allclose(w_unscaled, expected, atol=1e-12)


class TestRidgeJacobian:
    def test_zero_targets_zero_jacobian(self):
        p = make_ridge()
        p.t = np.zeros(p.n)
        np.testing.assert_array_equal(ridge_br_jacobian(p, 1.0), np.zeros(p.m))

    def test_scalar_case(self):
        p = RidgeProblem(X=[[1.0]], t=[1.0], X_valid=[[1.0]], t_valid=[1.0],
                         lambda_transform="identity")
        lam = 0.7
        assert np.isclose(ridge_best_response(p, lam)[0], 1 / (1 + lam))
        assert np.isclose(ridge_br_jacobian(p, lam)[0], -1 / (1 + lam) ** 2)

    @pytest.mark.parametrize("transform", ["identity", "exp"])
    def test_matches_finite_difference(self, transform):
        p = make_ridge(transform=transform)
        lam_raw = 0.4
        delta = 1e-6
        up = ridge_best_response(p, p.domain_of_raw(lam_raw + delta))
        dn = ridge_best_response(p, p.domain_of_raw(lam_raw - delta))
        fd = (up - dn) / (2 * delta)
        jac = ridge_br_jacobian(p, p.domain_of_raw(lam_raw))
        np.testing.assert_allclose(jac, fd, atol=1e-7)


class TestQuadraticJacobian:
    def test_identity_A(self):
        B = RNG.standard_normal((4, 2))
        p = QuadraticProblem(A=np.eye(4), B=B)
        np.testing.assert_allclose(quadratic_br_jacobian(p), -B, atol=1e-14)

    def test_diagonal_case(self):
        p = QuadraticProblem(A=np.diag([2.0, 2.0]), B=[[1.0], [0.0]])
        np.testing.assert_allclose(quadratic_br_jacobian(p), [[-0.5], [0.0]])

    def test_requires_spd(self):
        with pytest.raises(OracleError):
            QuadraticProblem(A=np.diag([1.0, -1.0]), B=np.zeros((2, 1)))
        with pytest.raises(OracleError):
            QuadraticProblem(A=[[1.0, 2.0], [0.0, 1.0]], B=np.zeros((2, 1)))

    def test_gradient_descent_on_expected_objective(self):
        """Independent oracle: GD on the exact expectation of the perturbed
        objective over Theta converges to -A^{-1}B (tolerance 1e-4)."""
        m, h = 5, 3
        Q = RNG.standard_normal((m, m))
        A = Q @ Q.T + m * np.eye(m)
        B = RNG.standard_normal((m, h))
        p = QuadraticProblem(A=A, B=B)
        sigma2 = 1.0
        # E[L(lam0+eps, w0+Theta eps)] has Theta-gradient (A Theta + B) sigma^2
        theta = np.zeros((m, h))
        lr = 0.9 / np.linalg.eigvalsh(A).max()
        for _ in range(2000):
            theta -= lr * (A @ theta + B) * sigma2
        target = quadratic_br_jacobian(p)
        assert np.linalg.norm(theta - target) / np.linalg.norm(target) <= 1e-4

    def test_jacobian_ignores_c_d_e_and_C_shifts(self):
        m, h = 4, 2
        Q = RNG.standard_normal((m, m))
        A = Q @ Q.T + m * np.eye(m)
        B = RNG.standard_normal((m, h))
        base = quadratic_br_jacobian(QuadraticProblem(A=A, B=B))
        perturbed = QuadraticProblem(
            A=A, B=B, C=np.eye(h) * 7.0, d=RNG.standard_normal(m),
            e=RNG.standard_normal(h), c=3.14,
        )
        np.testing.assert_array_equal(quadratic_br_jacobian(perturbed), base)


class TestBiasedFixedPoint:
    def test_sigma_zero_unbiased(self):
        p = make_ridge()
        theta = RNG.standard_normal(p.m)
        np.testing.assert_allclose(
            stn_biased_fixed_point(p, 1.0, theta, 0.0),
            ridge_best_response(p, 1.0), atol=1e-14)

    def test_theta_zero_unbiased(self):
        p = make_ridge()
        np.testing.assert_allclose(
            stn_biased_fixed_point(p, 1.0, np.zeros(p.m), 2.0),
            ridge_best_response(p, 1.0), atol=1e-14)

    def test_bias_identity_algebraic(self):
        """biased - unbiased == -(X'X + aI)^{-1} theta sigma^2 exactly."""
        p = make_ridge()
        theta = RNG.standard_normal(p.m)
        sigma = 1.3
        lam = 0.8
        diff = stn_biased_fixed_point(p, lam, theta, sigma) - ridge_best_response(p, lam)
        K = p.X.T @ p.X + lam * np.eye(p.m)
        expected = -np.linalg.solve(K, theta) * sigma ** 2
        np.testing.assert_allclose(diff, expected, atol=1e-12)

    def test_expected_objective_descent_reaches_biased_point(self):
        """A deterministic inner loop on the expectation of the perturbed
        objective lands on the biased fixed point (1e-6)."""
        p = make_ridge(n=10, m=3)
        theta = RNG.standard_normal(3)
        sigma, lam0 = 1.0, 0.6
        K = p.X.T @ p.X + lam0 * np.eye(3)
        lr = 0.9 * p.n / np.linalg.eigvalsh(K).max()
        w = np.zeros(3)
        for _ in range(4000):
            grad = (K @ w - p.X.T @ p.t + sigma ** 2 * theta) / p.n
            w -= lr * grad
        np.testing.assert_allclose(
            w, stn_biased_fixed_point(p, lam0, theta, sigma), atol=1e-6)


class TestDropoutExpectedLoss:
    def test_rate_zero_plain_mse(self):
        p = make_ridge()
        w = RNG.standard_normal(p.m)
        plain = np.sum((p.X @ w - p.t) ** 2) / (2 * p.n)
        assert np.isclose(dropout_expected_loss(p, 0.0, w), plain, rtol=1e-12)

    def test_zero_weights_rate_independent(self):
        p = make_ridge()
        w = np.zeros(p.m)
        vals = [dropout_expected_loss(p, r, w) for r in [0.0, 0.3, 0.8]]
        assert np.allclose(vals, np.sum(p.t ** 2) / (2 * p.n))

    def test_rate_domain(self):
        p = make_ridge()
        with pytest.raises(OracleError):
            dropout_expected_loss(p, 1.0, np.zeros(p.m))

    def test_monte_carlo_agreement(self):
        """1e6 mask draws: sample mean within 3 standard errors."""
        p = make_ridge(n=5, m=3)
        w = RNG.standard_normal(3)
        rate = 0.35
        expected = dropout_expected_loss(p, rate, w)
        rng = np.random.default_rng(31337)
        draws = 1_000_000
        chunk = 100_000
        means, sqs, count = 0.0, 0.0, 0
        for _ in range(draws // chunk):
            keep = (rng.random((chunk, p.n, p.m)) < 1 - rate).astype(np.float64)
            preds = np.einsum("dnm,m->dn", keep * p.X[None, :, :], w)
            losses = np.sum((preds - p.t) ** 2, axis=1) / (2 * p.n)
            means += losses.sum()
            sqs += np.sum(losses ** 2)
            count += chunk
        mc_mean = means / count
        mc_var = sqs / count - mc_mean ** 2
        se = np.sqrt(mc_var / count)
        assert abs(mc_mean - expected) <= 3 * se


class TestOuterObjective:
    def test_zero_residual_interpolation_gradient(self):
        """Shared train/valid data, exact interpolation, lam -> 0: the
        outer gradient vanishes with the residual."""
        rng = np.random.default_rng(7)
        X = rng.standard_normal((6, 3))
        w_true = rng.standard_normal(3)
        t = X @ w_true  # noiseless: lam=0 interpolates
        p = RidgeProblem(X=X, t=t, X_valid=X, t_valid=t,
                         lambda_transform="identity")
        assert abs(bilevel_outer_grad(p, 0.0)) <= 1e-10

    @pytest.mark.parametrize("transform", ["identity", "exp"])
    def test_matches_finite_difference(self, transform):
        p = make_ridge(transform=transform)
        lam_raw = 0.9
        delta = 1e-6
        fd = (bilevel_outer_loss(p, lam_raw + delta)
              - bilevel_outer_loss(p, lam_raw - delta)) / (2 * delta)
        assert np.isclose(bilevel_outer_grad(p, lam_raw), fd, atol=1e-7)


class TestBilevelSolve:
    def make_noisy(self, seed=3):
        # Small train set + noise: an interior amount of shrinkage helps
        rng = np.random.default_rng(seed)
        m = 4
        w_true = rng.standard_normal(m)
        X = rng.standard_normal((8, m))
        t = X @ w_true + 1.0 * rng.standard_normal(8)
        Xv = rng.standard_normal((200, m))
        tv = Xv @ w_true + 1.0 * rng.standard_normal(200)
        return RidgeProblem(X=X, t=t, X_valid=Xv, t_valid=tv,
                            lambda_transform="exp")

    def test_interior_minimum_found(self):
        p = self.make_noisy()
        lam_star = bilevel_solve(p, (-6.0, 6.0))
        assert -6.0 < lam_star < 6.0
        assert abs(bilevel_outer_grad(p, lam_star)) <= 1e-4

    def test_refinement_stability(self):
        p = self.make_noisy()
        a = bilevel_solve(p, (-6.0, 6.0), grid=512)
        b = bilevel_solve(p, (-6.0, 6.0), grid=2048)
        assert abs(a - b) <= 1e-5

    def test_degenerate_overparameterized_errors_at_low_end(self):
        """Valid == train and interpolation possible: shrinkage only hurts,
        the minimum sits at the bracket's low end and is reported."""
        rng = np.random.default_rng(11)
        X = rng.standard_normal((3, 5))  # overparameterized
        t = rng.standard_normal(3)
        p = RidgeProblem(X=X, t=t, X_valid=X, t_valid=t, lambda_transform="exp")
        with pytest.raises(OracleError) as exc:
            bilevel_solve(p, (-4.0, 4.0))
        assert "-4" in str(exc.value) and "4" in str(exc.value)

    def test_bad_bracket(self):
        p = self.make_noisy()
        with pytest.raises(OracleError):
            bilevel_solve(p, (2.0, 2.0))


class TestImplicitJacobian:
    def test_reduces_to_ridge_jacobian(self):
        for transform in ["identity", "exp"]:
            p = make_ridge(transform=transform)
            lam_raw = 0.5
            w_star = ridge_best_response(p, p.domain_of_raw(lam_raw))
            imp = implicit_jacobian_check(p, lam_raw, w_star).reshape(-1)
            direct = ridge_br_jacobian(p, p.domain_of_raw(lam_raw))
            np.testing.assert_allclose(imp, direct, atol=1e-10)

    def test_reduces_to_quadratic_jacobian(self):
        m, h = 4, 2
        Q = RNG.standard_normal((m, m))
        p = QuadraticProblem(A=Q @ Q.T + m * np.eye(m), B=RNG.standard_normal((m, h)))
        w_star = p.best_response(np.zeros(h))
        np.testing.assert_allclose(
            implicit_jacobian_check(p, np.zeros(h), w_star),
            quadratic_br_jacobian(p), atol=1e-12)

    def test_matches_resolved_best_response(self):
        """Finite difference of *re-solved* inner optima across lam0."""
        p = make_ridge(transform="exp")
        lam_raw = -0.2
        delta = 1e-5
        w_up = ridge_best_response(p, p.domain_of_raw(lam_raw + delta))
        w_dn = ridge_best_response(p, p.domain_of_raw(lam_raw - delta))
        fd = (w_up - w_dn) / (2 * delta)
        w_star = ridge_best_response(p, p.domain_of_raw(lam_raw))
        imp = implicit_jacobian_check(p, lam_raw, w_star).reshape(-1)
        np.testing.assert_allclose(imp, fd, atol=1e-6)

    def test_unsupported_problem(self):
        with pytest.raises(OracleError):
            implicit_jacobian_check(object(), 0.0, np.zeros(2))
