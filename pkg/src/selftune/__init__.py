"""selftune: online hyperparameter tuning with best-response hypernetworks.

Layers, bottom-up:

- ``tensor``/``tape``/``dual``/``ops``: a minimal float64 autodiff core
  with reverse-mode gradients and forward-mode directional derivatives.
- ``models``: linear models, linear networks, MLPs, a small conv layer,
  losses and the regularizers whose coefficients get tuned.
- ``hypernet``: best-response hypernetworks (uncentered, centered,
  structured), constrained-hyperparameter transforms, and the linearized
  prediction path.
- ``bilevel``: the alternating training loops and baseline searches.
- ``oracles``: closed-form ground truths for ridge/quadratic problems.
- ``analysis``: conditioning, alignment and update-dynamics diagnostics.
- ``harness``: datasets, configs, experiment runner and the CLI.
"""

from . import analysis, bilevel, dual, hypernet, models, ops, oracles, tape, tensor

__all__ = [
    "analysis",
    "bilevel",
    "dual",
    "hypernet",
    "models",
    "ops",
    "oracles",
    "tape",
    "tensor",
]

__version__ = "0.1.0"
