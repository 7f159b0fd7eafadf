"""Forward-mode autodiff via dual tensors.

A :class:`DualTensor` carries ``(primal, tangent)`` through the same
primitive set as the reverse tape, producing exact Jacobian-vector
products (no finite differencing).  Every propagation rule is linear in
the tangent, so the tangent slot may hold either an ndarray or a tape
:class:`~selftune.tape.Variable`; the latter makes the directional
derivative itself a differentiable function of whatever produced the
tangent, which is how the linearized prediction path trains its response
parameters.
"""

from __future__ import annotations

import numpy as np

from .tape import AutodiffError
from .tensor import as_tensor

__all__ = ["DualTensor", "jvp"]


class DualTensor:
    """Primal value paired with a same-shape tangent (None means zero)."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal: np.ndarray, tangent=None):
        self.primal = primal
        if tangent is not None:
            tshape = tangent.shape if hasattr(tangent, "shape") else np.shape(tangent)
            if tuple(tshape) != primal.shape:
                raise AutodiffError(
                    f"tangent shape {tuple(tshape)} != primal shape {primal.shape}"
                )
        self.tangent = tangent

    @property
    def shape(self):
        return self.primal.shape

    @property
    def ndim(self):
        return self.primal.ndim

    def __repr__(self):
        return f"DualTensor(shape={self.primal.shape})"

    # Arithmetic operators are attached by selftune.ops at import time.


def jvp(fn, primal_inputs, tangent_inputs) -> DualTensor:
    """Evaluate ``fn`` and its directional derivative along the tangents.

    ``fn`` receives one DualTensor per input and must be built from the
    supported primitives.  Returns the output DualTensor carrying
    ``(fn(primal), J_fn(primal) @ tangent)``.
    """
    primal_inputs = tuple(primal_inputs)
    tangent_inputs = tuple(tangent_inputs)
    if len(primal_inputs) != len(tangent_inputs):
        raise AutodiffError("jvp needs one tangent per primal input")
    duals = []
    for p, t in zip(primal_inputs, tangent_inputs):
        p = as_tensor(p)
        if t is not None and not hasattr(t, "node_id"):
            t = as_tensor(t)
        duals.append(DualTensor(p, t))
    out = fn(*duals)
    if not isinstance(out, DualTensor):
        raise AutodiffError("jvp function must return a DualTensor")
    if out.tangent is None:
        out = DualTensor(out.primal, np.zeros_like(out.primal))
    return out
