"""Tour of the exact oracles: ridge best responses and their sensitivity,
the perturbation-induced fixed-point bias, dropout's closed-form expected
loss, and the exact bilevel optimum.

Run:  python3 demos/02_closed_form_oracles.py
"""

import numpy as np

from selftune.oracles import (
    QuadraticProblem, RidgeProblem, bilevel_outer_grad, bilevel_outer_loss,
    bilevel_solve, dropout_expected_loss, implicit_jacobian_check,
    quadratic_br_jacobian, ridge_best_response, ridge_br_jacobian,
    stn_biased_fixed_point,
)

rng = np.random.default_rng(7)

print("== the 1-D picture: w*(lam) = 1 / (1 + lam) ==")
p1 = RidgeProblem(X=[[1.0]], t=[1.0], X_valid=[[1.0]], t_valid=[1.0],
                  lambda_transform="identity")
for lam in (0.0, 1.0, 4.0):
    w = ridge_best_response(p1, lam)[0]
    j = ridge_br_jacobian(p1, lam)[0]
    print(f"  lam={lam:.1f}: w*={w:.4f} (expect {1/(1+lam):.4f}),"
          f" dw*/dlam={j:+.4f} (expect {-1/(1+lam)**2:+.4f})")

print()
print("== a real ridge problem with a validation split ==")
m, n = 4, 8
w_true = rng.standard_normal(m)
X = rng.standard_normal((n, m))
t = X @ w_true + 1.0 * rng.standard_normal(n)
Xv = rng.standard_normal((200, m))
tv = Xv @ w_true + 1.0 * rng.standard_normal(200)
p = RidgeProblem(X=X, t=t, X_valid=Xv, t_valid=tv, lambda_transform="identity")

lam_star = bilevel_solve(p, (1e-3, 12.0))
print(f"exact bilevel optimum lam* = {lam_star:.5f}")
print(f"outer loss at lam*         = {bilevel_outer_loss(p, lam_star):.6f}")
print(f"outer gradient at lam*     = {bilevel_outer_grad(p, lam_star):+.2e}")

w_star = ridge_best_response(p, lam_star)
imp = implicit_jacobian_check(p, lam_star, w_star).reshape(-1)
direct = ridge_br_jacobian(p, lam_star)
print("two derivations of dw*/dlam agree to",
      f"{np.max(np.abs(imp - direct)):.2e}")

print()
print("== joint-perturbation bias at a fixed point ==")
theta = rng.standard_normal(m)
sigma = 1.0
biased = stn_biased_fixed_point(p, lam_star, theta, sigma)
print("  |biased - true| =", f"{np.linalg.norm(biased - w_star):.4f}",
      " (vanishes when sigma -> 0:",
      f"{np.linalg.norm(stn_biased_fixed_point(p, lam_star, theta, 0.0) - w_star):.1e})")

print()
print("== input dropout has a closed-form expected loss ==")
w = rng.standard_normal(m)
for rate in (0.0, 0.2, 0.5):
    print(f"  rate {rate:.1f}: E[loss] = {dropout_expected_loss(p, rate, w):.5f}")

print()
print("== quadratic problems: the response slope is -A^-1 B ==")
Q = rng.standard_normal((3, 3))
quad = QuadraticProblem(A=Q @ Q.T + 3 * np.eye(3), B=rng.standard_normal((3, 2)))
print(quadratic_br_jacobian(quad))
