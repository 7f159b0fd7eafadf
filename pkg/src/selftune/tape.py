"""Reverse-mode autodiff on a dynamic tape.

A :class:`Tape` records every primitive applied to its :class:`Variable`s
in execution order; :meth:`Tape.backward` replays the record in reverse,
accumulating vector-Jacobian products.  Tapes are rebuilt per training
step (the bilevel loop alternates objectives with fresh perturbations
every step, so there is nothing to reuse), and a tape plus its Variables
are confined to one execution context.

Accumulation order is the fixed reverse execution order, so gradients are
bit-reproducible for identical inputs.
"""

from __future__ import annotations

import numpy as np

from .tensor import as_tensor

__all__ = ["AutodiffError", "Variable", "Tape", "Gradients", "record", "backward"]


class AutodiffError(RuntimeError):
    """Misuse of the autodiff layer (shape mismatch, cross-tape mixing, ...)."""


class Variable:
    """A tensor tracked on a tape.

    ``node_id`` is the opaque handle of the producing node in the tape's
    recording; a Variable participates in exactly one recording.
    """

    __slots__ = ("value", "requires_grad", "tape", "node_id")

    def __init__(self, value: np.ndarray, requires_grad: bool, tape: "Tape", node_id: int):
        self.value = value
        self.requires_grad = requires_grad
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, node={self.node_id})"

    # Arithmetic operators are attached by selftune.ops at import time.


class _Node:
    __slots__ = ("op", "parents", "ctx")

    def __init__(self, op, parents, ctx):
        self.op = op          # None for leaves
        self.parents = parents  # tuple of node ids (None for constant operands)
        self.ctx = ctx


class Gradients:
    """Gradient lookup by Variable (or raw node id) after a backward pass."""

    def __init__(self, by_node: dict[int, np.ndarray]):
        self._by_node = by_node

    def __getitem__(self, key) -> np.ndarray:
        node_id = key.node_id if isinstance(key, Variable) else int(key)
        return self._by_node[node_id]

    def get(self, key, default=None):
        node_id = key.node_id if isinstance(key, Variable) else int(key)
        return self._by_node.get(node_id, default)

    def __contains__(self, key):
        node_id = key.node_id if isinstance(key, Variable) else int(key)
        return node_id in self._by_node


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """One recording: a list of nodes in execution order."""

    def __init__(self):
        self._nodes: list[_Node] = []

    # -- context management ------------------------------------------------
    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - stack discipline bug
            raise AutodiffError("tape stack corrupted")
        return False

    # -- construction ------------------------------------------------------
    def variable(self, value, requires_grad: bool = True) -> Variable:
        """Wrap ``value`` as a leaf on this tape."""
        arr = as_tensor(value)
        node_id = len(self._nodes)
        self._nodes.append(_Node(None, (), None))
        return Variable(arr, requires_grad, self, node_id)

    def record_node(self, op, parent_ids, ctx, out_value: np.ndarray) -> Variable:
        node_id = len(self._nodes)
        self._nodes.append(_Node(op, tuple(parent_ids), ctx))
        return Variable(out_value, True, self, node_id)

    # -- reverse pass --------------------------------------------------------
    def backward(self, output: Variable) -> Gradients:
        """Accumulate d(output)/d(node) for every node feeding ``output``.

        ``output`` must be scalar (a single element).  Returns gradients for
        all nodes on the path, keyed by node id; leaves created with
        ``requires_grad`` are the ones callers normally look up.
        """
        if output.tape is not self:
            raise AutodiffError("output was not recorded on this tape")
        if output.value.size != 1:
            raise AutodiffError(
                f"backward requires a scalar output, got shape {output.value.shape}"
            )
        grads: dict[int, np.ndarray] = {
            output.node_id: np.ones_like(output.value)
        }
        for node_id in range(output.node_id, -1, -1):
            g = grads.get(node_id)
            if g is None:
                continue
            node = self._nodes[node_id]
            if node.op is None:
                continue
            parent_grads = node.op.vjp(node.ctx, g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        return Gradients(grads)


def record(fn, *input_values):
    """Run ``fn`` over fresh Variables wrapping ``input_values``.

    Returns ``(output, tape, variables)``; the output value equals the eager
    evaluation of ``fn`` (values are computed at op-call time).
    """
    tape = Tape()
    with tape:
        variables = tuple(tape.variable(v) for v in input_values)
        output = fn(*variables)
    if not isinstance(output, Variable):
        raise AutodiffError("recorded function must return a Variable")
    return output, tape, variables


def backward(tape: Tape, output: Variable) -> Gradients:
    """Module-level alias for :meth:`Tape.backward`."""
    return tape.backward(output)
