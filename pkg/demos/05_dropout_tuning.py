"""Online input-dropout tuning on a linear regression: the drop rate is a
constrained hyperparameter (a bounded interval), so it rides through a
range-squashing transform and gets perturbed on the unconstrained axis.

The closed-form expected-dropout loss provides an independent check of
the training signal along the way.

Run:  python3 demos/05_dropout_tuning.py   (~20 s)
"""

import numpy as np

from selftune.bilevel import BilevelConfig, TrainingProblem, run
from selftune.hypernet import HyperparamState, TransformSpec
from selftune.models import RegBinding, RegularizedObjective, linear_model
from selftune.oracles import RidgeProblem, dropout_expected_loss

rng = np.random.default_rng(12)
n, m = 60, 6
w_true = rng.standard_normal(m)
X = rng.standard_normal((n, m))
t = X @ w_true + 1.5 * rng.standard_normal(n)
Xv = rng.standard_normal((300, m))
tv = Xv @ w_true + 1.5 * rng.standard_normal(300)

problem = TrainingProblem(
    model=linear_model(m),
    objective=RegularizedObjective(
        "mse", (RegBinding("input_dropout", 0, site="input"),)),
    X=X, t=t, X_valid=Xv, t_valid=tv, batch_size=10,
)

transform = TransformSpec("sigmoid_range", 0.0, 0.95)
hyper = HyperparamState.from_domain_init((transform,), [0.2], sigma=1.0,
                                         names=("input_dropout",))
config = BilevelConfig(alpha1=0.05, alpha2=0.01, alpha3=0.0,
                       t_train=10, t_valid=1, warmup_steps=100,
                       freeze_sigma=True, seed=3)

print("tuning the input-dropout rate (init 0.2, domain [0, 0.95]) ...")
result = run(config, problem, "dstn", hyper, steps=4000)

print(f"{'step':>6} {'rate':>8} {'val loss':>10}")
for rec in result.trace[::400]:
    print(f"{rec.step:6d} {rec.lam['input_dropout']:8.4f} {rec.val_loss:10.5f}")
final_rate = result.state.hyper.domain()[0]
print(f"final tuned drop rate: {final_rate:.4f}")

print()
print("cross-check: expected training loss under the tuned rate")
oracle = RidgeProblem(X=X, t=t, X_valid=Xv, t_valid=tv)
w0 = result.state.net.params["w0"]
expected = dropout_expected_loss(oracle, final_rate, w0)
draws = 20_000
keep = (np.random.default_rng(0).random((draws, n, m)) < 1 - final_rate)
preds = np.einsum("dnm,m->dn", keep * X[None], w0)
mc = float(np.mean(np.sum((preds - t) ** 2, axis=1) / (2 * n)))
print(f"  closed form {expected:.5f} vs monte carlo {mc:.5f}")
