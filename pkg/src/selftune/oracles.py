"""Closed-form ground truths for desk-scale problems.

Everything here is computed by dense direct factorization (problems are a
few hundred dimensions at most), so oracle error is machine-level and the
values can gate tests at 1e-8 .. 1e-12 tolerances.

Conventions:

- A ridge training objective is ``fit/2n + a * |w|^2 / (2n)`` where the
  effective penalty ``a`` equals the domain-space hyperparameter for
  ``penalty_scaling='per_n'`` and ``n * lambda`` for ``'unscaled'``.
- When ``lambda_transform='exp'`` the optimizer works on the raw (log)
  coordinate; all derivative-valued oracles are reported in RAW
  coordinates (chain rule applied) so they compare directly against
  learned quantities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "OracleError", "RidgeProblem", "QuadraticProblem",
    "ridge_best_response", "ridge_br_jacobian", "quadratic_br_jacobian",
    "stn_biased_fixed_point", "dropout_expected_loss",
    "bilevel_outer_loss", "bilevel_outer_grad", "bilevel_solve",
    "implicit_jacobian_check",
]


class OracleError(ValueError):
    """Oracle preconditions violated (singular system, bad bracket, ...)."""


@dataclass
class RidgeProblem:
    """Least squares with an L2 penalty and an exact best response."""

    X: np.ndarray
    t: np.ndarray
    X_valid: np.ndarray
    t_valid: np.ndarray
    penalty_scaling: str = "per_n"
    lambda_transform: str = "exp"

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.X_valid = np.atleast_2d(np.asarray(self.X_valid, dtype=np.float64))
        self.t_valid = np.asarray(self.t_valid, dtype=np.float64).reshape(-1)
        if self.X.shape[0] < 1 or self.X_valid.shape[0] < 1:
            raise OracleError("ridge problem needs at least one row per split")
        if self.X.shape[0] != self.t.shape[0] or self.X_valid.shape[0] != self.t_valid.shape[0]:
            raise OracleError("row counts of X and t disagree")
        if self.penalty_scaling not in ("per_n", "unscaled"):
            raise OracleError(f"unknown penalty scaling {self.penalty_scaling!r}")
        if self.lambda_transform not in ("exp", "identity"):
            raise OracleError(f"unknown lambda transform {self.lambda_transform!r}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def v(self) -> int:
        return self.X_valid.shape[0]

    def domain_of_raw(self, lam_raw: float) -> float:
        return float(np.exp(lam_raw)) if self.lambda_transform == "exp" else float(lam_raw)

    def raw_of_domain(self, lam_domain: float) -> float:
        if self.lambda_transform == "exp":
            if lam_domain <= 0:
                raise OracleError("exp transform needs a positive domain value")
            return float(np.log(lam_domain))
        return float(lam_domain)

    def effective_penalty(self, lam_domain: float) -> float:
        return float(lam_domain) * (self.n if self.penalty_scaling == "unscaled" else 1.0)

    def penalty_factor(self) -> float:
        """d(effective penalty)/d(domain lambda)."""
        return float(self.n if self.penalty_scaling == "unscaled" else 1.0)


@dataclass
class QuadraticProblem:
    """Joint quadratic in (w, lam) with symmetric positive definite w-block.

    The training objective is
    ``0.5 * [w; lam]' [[A, B], [B', C]] [w; lam] + d'w + e'lam + c``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray = None
    d: np.ndarray = None
    e: np.ndarray = None
    c: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        m, h = self.B.shape
        self.C = np.zeros((h, h)) if self.C is None else np.asarray(self.C, dtype=np.float64)
        self.d = np.zeros(m) if self.d is None else np.asarray(self.d, dtype=np.float64)
        self.e = np.zeros(h) if self.e is None else np.asarray(self.e, dtype=np.float64)
        self.c = float(self.c)
        if self.A.shape != (m, m):
            raise OracleError(f"A must be {m}x{m}, got {self.A.shape}")
        if not np.allclose(self.A, self.A.T, atol=1e-12):
            raise OracleError("A must be symmetric")
        if np.linalg.eigvalsh(self.A).min() <= 0:
            raise OracleError("A must be positive definite")

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def h(self) -> int:
        return self.B.shape[1]

    def loss(self, lam: np.ndarray, w: np.ndarray) -> float:
        lam = np.asarray(lam).reshape(-1)
        w = np.asarray(w).reshape(-1)
        return float(
            0.5 * w @ self.A @ w + w @ self.B @ lam + 0.5 * lam @ self.C @ lam
            + self.d @ w + self.e @ lam + self.c
        )

    def grad_w(self, lam: np.ndarray, w: np.ndarray) -> np.ndarray:
        return self.A @ w + self.B @ np.asarray(lam).reshape(-1) + self.d

    def best_response(self, lam: np.ndarray) -> np.ndarray:
        return -np.linalg.solve(self.A, self.B @ np.asarray(lam).reshape(-1) + self.d)


# ---------------------------------------------------------------------------
# ridge closed forms
# ---------------------------------------------------------------------------

def _ridge_system(p: RidgeProblem, lam_domain: float) -> np.ndarray:
    a = p.effective_penalty(lam_domain)
    K = p.X.T @ p.X + a * np.eye(p.m)
    return K


def _solve_spd(K: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise OracleError(f"system not positive definite: {exc}") from exc
    y = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, y)


def ridge_best_response(p: RidgeProblem, lam_domain: float) -> np.ndarray:
    """Exact minimizer of the penalized objective at the given domain value."""
    return _solve_spd(_ridge_system(p, lam_domain), p.X.T @ p.t)


def ridge_br_jacobian(p: RidgeProblem, lam_domain: float) -> np.ndarray:
    """Sensitivity of the best response, in RAW coordinates.

    The domain-space derivative is ``-(X'X + aI)^{-1} (da/dlam) w*``; for
    the exp transform an extra chain-rule factor of the domain value maps
    it to the raw (log) coordinate.
    """
    w_star = ridge_best_response(p, lam_domain)
    jac_domain = -_solve_spd(_ridge_system(p, lam_domain), p.penalty_factor() * w_star)
    if p.lambda_transform == "exp":
        return jac_domain * lam_domain
    return jac_domain


def quadratic_br_jacobian(p: QuadraticProblem) -> np.ndarray:
    """The exact best-response Jacobian ``-A^{-1} B`` of a joint quadratic."""
    return -_solve_spd(p.A, p.B)


def stn_biased_fixed_point(p: RidgeProblem, lam0_domain: float,
                           theta: np.ndarray, sigma: float) -> np.ndarray:
    """Optimal base weights under the *perturbed-everything* training
    objective: solves ``(X'X + aI) w = X't - factor * sigma^2 * theta``.

    The ``- (X'X + aI)^{-1} theta sigma^2`` offset from the true ridge
    solution is the perturbation-induced bias; it vanishes when either the
    response slope or the perturbation scale is zero.  (Derived for
    perturbations applied directly to the domain penalty.)
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.shape != (p.m,):
        raise OracleError(f"theta must have shape ({p.m},), got {theta.shape}")
    K = _ridge_system(p, lam0_domain)
    rhs = p.X.T @ p.t - p.penalty_factor() * (sigma ** 2) * theta
    return _solve_spd(K, rhs)


def dropout_expected_loss(p: RidgeProblem, drop_rate: float, w: np.ndarray) -> float:
    """Expected half-MSE of a linear model under Bernoulli input dropout.

    With keep probability q = 1 - rate and mask-multiplied inputs, the
    expectation splits into a mean-field fit term plus a variance penalty
    weighted by diag(X'X):

        (1/2n) ( |q X w - t|^2 + q (1 - q) w' diag(diag(X'X)) w )
    """
    if not (0.0 <= drop_rate < 1.0):
        raise OracleError(f"drop rate must lie in [0, 1), got {drop_rate}")
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    q = 1.0 - drop_rate
    r = q * (p.X @ w) - p.t
    col_sq = np.sum(p.X ** 2, axis=0)  # diag(X'X)
    return float((r @ r + q * (1 - q) * np.sum(col_sq * w ** 2)) / (2 * p.n))


# ---------------------------------------------------------------------------
# outer (validation) objective
# ---------------------------------------------------------------------------

def _val_loss(p: RidgeProblem, w: np.ndarray) -> float:
    r = p.X_valid @ w - p.t_valid
    return float(r @ r) / (2 * p.v)


def _val_grad_w(p: RidgeProblem, w: np.ndarray) -> np.ndarray:
    return p.X_valid.T @ (p.X_valid @ w - p.t_valid) / p.v


def bilevel_outer_loss(p: RidgeProblem, lam_raw: float) -> float:
    """Validation loss at the exact best response for raw lambda."""
    return _val_loss(p, ridge_best_response(p, p.domain_of_raw(lam_raw)))


def bilevel_outer_grad(p: RidgeProblem, lam_raw: float) -> float:
    """d/d(raw lambda) of the outer objective: response gradient only
    (the direct term is identically zero for these objectives)."""
    lam_domain = p.domain_of_raw(lam_raw)
    w_star = ridge_best_response(p, lam_domain)
    jac = ridge_br_jacobian(p, lam_domain)
    return float(jac @ _val_grad_w(p, w_star))


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def bilevel_solve(p: RidgeProblem, bracket: tuple, grid: int = 1024,
                  tol: float = 1e-6) -> float:
    """Raw-coordinate minimizer of the outer objective on ``bracket``.

    Dense grid first (the 1-D outer problem may be nonconvex; ties break
    toward the smallest lambda), then golden-section refinement of the
    winning cell down to ``|interval| <= tol``.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not lo < hi:
        raise OracleError("bracket must satisfy lo < hi")
    xs = np.linspace(lo, hi, grid)
    vals = np.array([bilevel_outer_loss(p, x) for x in xs])
    i = int(np.argmin(vals))  # first minimum: smallest lambda wins ties
    if i == 0 or i == grid - 1:
        raise OracleError(
            "no interior minimum in bracket: "
            f"f({xs[0]:.6g})={vals[0]:.6g}, f({xs[-1]:.6g})={vals[-1]:.6g}"
        )
    a, b = xs[i - 1], xs[i + 1]
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = bilevel_outer_loss(p, c), bilevel_outer_loss(p, d)
    while (b - a) > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = bilevel_outer_loss(p, c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = bilevel_outer_loss(p, d)
    return float(0.5 * (a + b))


# ---------------------------------------------------------------------------
# implicit-function-theorem oracle
# ---------------------------------------------------------------------------

def implicit_jacobian_check(problem, lam_raw, w: np.ndarray) -> np.ndarray:
    """Best-response Jacobian from the analytic Hessians at an inner optimum:
    ``-[d2L/dw2]^{-1} [d2L/dw dlam]``.

    Supported problems are :class:`RidgeProblem` (raw coordinate, chain
    rule included) and :class:`QuadraticProblem`.  This is the master
    oracle against which learned response slopes are scored.
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if isinstance(problem, RidgeProblem):
        lam_domain = problem.domain_of_raw(float(np.asarray(lam_raw).reshape(())))
        h_ww = _ridge_system(problem, lam_domain) / problem.n
        ddomain = lam_domain if problem.lambda_transform == "exp" else 1.0
        h_wl = (problem.penalty_factor() * ddomain * w / problem.n).reshape(-1, 1)
    elif isinstance(problem, QuadraticProblem):
        h_ww = problem.A
        h_wl = problem.B
    else:
        raise OracleError(f"no analytic Hessians for {type(problem).__name__}")
    eigs = np.linalg.eigvalsh(h_ww)
    if eigs.min() <= 0:
        raise OracleError("weight Hessian is not positive definite at this point")
    return -_solve_spd(h_ww, h_wl)
