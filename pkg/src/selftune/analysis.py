"""Conditioning and dynamics diagnostics.

These reproduce, numerically, why centering helps: the hypernetwork's
Gauss-Newton curvature factorizes (Kronecker-style) through the second
moment of the sampled hyperparameter coordinates, whose condition number
explodes with the squared norm of the uncentered mean; and a single
uncentered inner step injects a hyperparameter-gradient term proportional
to the hyperparameter value itself, scaled by the inner product of
training and validation gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AnalysisError", "ConditioningReport", "SecondMomentReport",
    "hypernet_gauss_newton", "kron_condition", "second_moment_decomposition",
    "gradient_alignment", "predicted_spike_term", "model_gauss_newton",
    "conditioning_report",
]

_MAX_DIM = 4096


class AnalysisError(ValueError):
    """Bad inputs to a diagnostic (non-SPD factor, oversize product, ...)."""


@dataclass
class ConditioningReport:
    """Condition numbers of the two curvature factors and their product."""

    kappa_lambda: float
    kappa_gw: float
    kappa_product: float
    eigen_extremes: dict

    def to_dict(self) -> dict:
        return {
            "kappa_lambda": self.kappa_lambda,
            "kappa_gw": self.kappa_gw,
            "kappa_product": self.kappa_product,
            "eigen_extremes": self.eigen_extremes,
        }


@dataclass
class SecondMomentReport:
    diag_part: np.ndarray
    rank_one_part: np.ndarray
    eig_min: float
    eig_max: float
    kappa: float


def _check_spd(M: np.ndarray, name: str, tol: float = 1e-10) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise AnalysisError(f"{name} must be square, got {M.shape}")
    if not np.allclose(M, M.T, atol=tol * max(1.0, np.abs(M).max())):
        raise AnalysisError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise AnalysisError(f"{name} must be positive definite")
    return M


def hypernet_gauss_newton(samples) -> np.ndarray:
    """Empirical Gauss-Newton curvature of a full-linear hypernetwork.

    Each sample is ``(lam_hat, J_yw, H_y)``: the sampled hyperparameter
    coordinates (homogeneous coordinate included), the weight-output
    Jacobian, and the output-space loss Hessian.  Per sample the curvature
    is the Kronecker product of ``lam_hat lam_hat'`` with ``J' H J``
    (column-stacked parameter layout); the result is the sample mean,
    materialized, so it is only intended for small ``m * (h+1)``.
    """
    samples = list(samples)
    if not samples:
        raise AnalysisError("need at least one sample")
    acc = None
    for lam_hat, J, H in samples:
        lam_hat = np.asarray(lam_hat, dtype=np.float64).reshape(-1)
        J = np.atleast_2d(np.asarray(J, dtype=np.float64))
        H = np.atleast_2d(np.asarray(H, dtype=np.float64))
        d = lam_hat.shape[0] * J.shape[1]
        if d > _MAX_DIM:
            raise AnalysisError(
                f"materialized curvature would be {d}x{d} (limit {_MAX_DIM})"
            )
        if not np.allclose(H, H.T, atol=1e-10 * max(1.0, np.abs(H).max())):
            raise AnalysisError("output Hessian must be symmetric")
        if np.linalg.eigvalsh(H).min() < -1e-10:
            raise AnalysisError("output Hessian must be positive semidefinite")
        term = np.kron(np.outer(lam_hat, lam_hat), J.T @ H @ J)
        acc = term if acc is None else acc + term
    G = acc / len(samples)
    return 0.5 * (G + G.T)  # symmetrize away accumulation round-off


def kron_condition(A: np.ndarray, B: np.ndarray) -> tuple:
    """(kappa(A), kappa(B), kappa(A kron B)) via symmetric eigensolves.

    The product's condition number comes from the materialized Kronecker
    product so the multiplicativity identity is independently checkable.
    """
    A = _check_spd(A, "A")
    B = _check_spd(B, "B")
    if A.shape[0] * B.shape[0] > _MAX_DIM:
        raise AnalysisError("materialized Kronecker product too large")

    def kappa(M):
        eigs = np.linalg.eigvalsh(M)
        return float(eigs[-1] / eigs[0])

    return kappa(A), kappa(B), kappa(np.kron(A, B))


def second_moment_decomposition(lam_bar, sigma) -> SecondMomentReport:
    """Decompose ``E[lam_hat lam_hat'] = diag(sigma^2) + lam_bar lam_bar'``
    and report the eigenvalue extremes of the sum.

    For isotropic sigma the extremes are exact closed forms (the rank-one
    update shifts a single eigenvalue by ``|lam_bar|^2``); otherwise a
    dense symmetric eigensolve is used.
    """
    lam_bar = np.asarray(lam_bar, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if sigma.shape != lam_bar.shape:
        raise AnalysisError("lam_bar and sigma must have one shared length")
    if np.any(sigma <= 0):
        raise AnalysisError("sigma entries must be positive")
    diag_part = np.diag(sigma ** 2)
    rank_one = np.outer(lam_bar, lam_bar)
    h = lam_bar.shape[0]
    norm_sq = float(lam_bar @ lam_bar)
    if np.all(sigma == sigma[0]):
        s2 = float(sigma[0] ** 2)
        eig_max = s2 + norm_sq
        eig_min = s2 if (h > 1 or norm_sq == 0.0) else eig_max
    else:
        eigs = np.linalg.eigvalsh(diag_part + rank_one)
        eig_min, eig_max = float(eigs[0]), float(eigs[-1])
    return SecondMomentReport(
        diag_part=diag_part,
        rank_one_part=rank_one,
        eig_min=eig_min,
        eig_max=eig_max,
        kappa=eig_max / eig_min,
    )


def gradient_alignment(grad_train, grad_valid) -> float:
    """Cosine of the angle between training and validation gradients."""
    gt = np.asarray(grad_train, dtype=np.float64).reshape(-1)
    gv = np.asarray(grad_valid, dtype=np.float64).reshape(-1)
    nt, nv = np.linalg.norm(gt), np.linalg.norm(gv)
    if nt == 0.0 or nv == 0.0:
        raise AnalysisError("alignment undefined for a zero gradient")
    return float(np.clip(gt @ gv / (nt * nv), -1.0, 1.0))


def predicted_spike_term(grad_train, grad_valid, lam, alpha: float) -> np.ndarray:
    """The hyperparameter-proportional term a single uncentered inner step
    injects into the next hyperparameter gradient:
    ``-alpha * <grad_train, grad_valid> * lam``."""
    gt = np.asarray(grad_train, dtype=np.float64).reshape(-1)
    gv = np.asarray(grad_valid, dtype=np.float64).reshape(-1)
    if gt.shape != gv.shape:
        raise AnalysisError("gradient shapes disagree")
    lam = np.asarray(lam, dtype=np.float64).reshape(-1)
    return -alpha * float(gt @ gv) * lam


def model_gauss_newton(X: np.ndarray) -> np.ndarray:
    """Gauss-Newton curvature of a linear model under half-MSE: X'X / n."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return X.T @ X / X.shape[0]


def conditioning_report(lam_bar, sigma, G_w: np.ndarray) -> ConditioningReport:
    """Combine the second-moment factor with the network curvature factor."""
    sm = second_moment_decomposition(lam_bar, sigma)
    gw_eigs = np.linalg.eigvalsh(np.asarray(G_w, dtype=np.float64))
    if gw_eigs[0] <= 0:
        raise AnalysisError("network curvature must be positive definite")
    kappa_gw = float(gw_eigs[-1] / gw_eigs[0])
    return ConditioningReport(
        kappa_lambda=sm.kappa,
        kappa_gw=kappa_gw,
        kappa_product=sm.kappa * kappa_gw,
        eigen_extremes={
            "lambda_factor": [sm.eig_min, sm.eig_max],
            "gw_factor": [float(gw_eigs[0]), float(gw_eigs[-1])],
        },
    )
