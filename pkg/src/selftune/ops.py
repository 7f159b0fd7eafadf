"""Differentiable primitives: each op carries a reverse (VJP) and a
forward (JVP) rule.

Dispatch is by operand type: plain ndarrays evaluate eagerly, tape
Variables record a node, DualTensors propagate tangents.  Mixing
Variables and DualTensors in one op is an error; constants (ndarrays,
Python numbers) mix freely with either.

Broadcasting is deliberately restricted so every reverse rule stays
auditable: operands must have equal shapes, or one side is a scalar, or
a matrix ``(n, m)`` meets a row vector ``(m,)`` or a column ``(n, 1)``.

JVP rules are written in terms of these same public functions, so a
tangent that is itself a Variable yields a traced (differentiable)
directional derivative.
"""

from __future__ import annotations

import numpy as np

from .dual import DualTensor
from .tape import AutodiffError, Variable, active_tape
from .tensor import as_tensor

__all__ = [
    "add", "sub", "mul", "div", "neg",
    "matmul", "transpose", "row_scale",
    "exp", "log", "tanh", "relu", "sigmoid", "softplus", "square",
    "sum", "mean", "concat", "conv2d", "getitem", "reshape",
    "value_of",
]


# ---------------------------------------------------------------------------
# dispatch machinery
# ---------------------------------------------------------------------------

class _OpaqueArg:
    """Non-tensor op argument (axis, index spec, target shape)."""

    __slots__ = ("payload",)

    def __init__(self, payload):
        self.payload = payload


def _coerce(x):
    if isinstance(x, (Variable, DualTensor, _OpaqueArg)):
        return x
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return x
    return as_tensor(x)


def value_of(x) -> np.ndarray:
    """Underlying ndarray (or payload) of any operand kind."""
    if isinstance(x, Variable):
        return x.value
    if isinstance(x, DualTensor):
        return x.primal
    if isinstance(x, _OpaqueArg):
        return x.payload
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return x
    return as_tensor(x)


def _apply(op, *operands):
    operands = tuple(_coerce(o) for o in operands)
    has_var = any(isinstance(o, Variable) for o in operands)
    has_dual = any(isinstance(o, DualTensor) for o in operands)
    if has_var and has_dual:
        raise AutodiffError(f"{op.name}: cannot mix Variables and DualTensors")
    raw = tuple(value_of(o) for o in operands)
    ctx = {}
    # Overflow inside a step is legitimate state: it surfaces at the loss
    # finiteness checks, not as a numpy warning mid-op.
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = np.asarray(op.forward(ctx, *raw))
    if has_dual:
        tangents = tuple(
            o.tangent if isinstance(o, DualTensor) else None for o in operands
        )
        return DualTensor(out, op.jvp(ctx, tangents))
    if has_var:
        tapes = {o.tape for o in operands if isinstance(o, Variable)}
        if len(tapes) > 1:
            raise AutodiffError(f"{op.name}: operands belong to different tapes")
        tape = tapes.pop()
        if active_tape() is not None and active_tape() is not tape:
            raise AutodiffError(f"{op.name}: operand tape is not the active tape")
        parents = tuple(
            o.node_id if isinstance(o, Variable) and o.requires_grad else None
            for o in operands
        )
        return tape.record_node(op, parents, ctx, out)
    return out


def _tadd(a, b):
    """None-aware tangent addition."""
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


# ---------------------------------------------------------------------------
# broadcasting helpers (equal | scalar | (n,m) vs (m,) | (n,m) vs (n,1))
# ---------------------------------------------------------------------------

def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    if len(sa) == 2 and sb in ((sa[1],), (sa[0], 1)):
        return True
    if len(sb) == 2 and sa in ((sb[1],), (sb[0], 1)):
        return True
    return False


def _check_elementwise(name, a, b):
    if not _broadcast_ok(a.shape, b.shape):
        raise AutodiffError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of the restricted broadcast)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# op definitions
# ---------------------------------------------------------------------------

class _Op:
    name = "?"

    def forward(self, ctx, *args):  # pragma: no cover - abstract
        raise NotImplementedError

    def vjp(self, ctx, g):  # pragma: no cover - abstract
        raise NotImplementedError

    def jvp(self, ctx, tangents):  # pragma: no cover - abstract
        raise NotImplementedError


class _Add(_Op):
    name = "add"

    def forward(self, ctx, a, b):
        _check_elementwise(self.name, a, b)
        ctx["sa"], ctx["sb"] = a.shape, b.shape
        return a + b

    def vjp(self, ctx, g):
        return _unbroadcast(g, ctx["sa"]), _unbroadcast(g, ctx["sb"])

    def jvp(self, ctx, tangents):
        return _tadd(tangents[0], tangents[1])


class _Sub(_Op):
    name = "sub"

    def forward(self, ctx, a, b):
        _check_elementwise(self.name, a, b)
        ctx["sa"], ctx["sb"] = a.shape, b.shape
        return a - b

    def vjp(self, ctx, g):
        return _unbroadcast(g, ctx["sa"]), -_unbroadcast(g, ctx["sb"])

    def jvp(self, ctx, tangents):
        da, db = tangents
        return _tadd(da, None if db is None else neg(db))


class _Mul(_Op):
    name = "mul"

    def forward(self, ctx, a, b):
        _check_elementwise(self.name, a, b)
        ctx["a"], ctx["b"] = a, b
        return a * b

    def vjp(self, ctx, g):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    def jvp(self, ctx, tangents):
        da, db = tangents
        out = None
        if da is not None:
            out = _tadd(out, mul(da, ctx["b"]))
        if db is not None:
            out = _tadd(out, mul(ctx["a"], db))
        return out


class _Div(_Op):
    name = "div"

    def forward(self, ctx, a, b):
        _check_elementwise(self.name, a, b)
        ctx["a"], ctx["b"] = a, b
        return a / b

    def vjp(self, ctx, g):
        a, b = ctx["a"], ctx["b"]
        ga = _unbroadcast(g / b, a.shape)
        gb = _unbroadcast(-g * a / (b * b), b.shape)
        return ga, gb

    def jvp(self, ctx, tangents):
        da, db = tangents
        a, b = ctx["a"], ctx["b"]
        out = None
        if da is not None:
            out = _tadd(out, div(da, b))
        if db is not None:
            out = _tadd(out, mul(db, -a / (b * b)))
        return out


class _Neg(_Op):
    name = "neg"

    def forward(self, ctx, a):
        return -a

    def vjp(self, ctx, g):
        return (-g,)

    def jvp(self, ctx, tangents):
        (da,) = tangents
        return None if da is None else neg(da)


class _MatMul(_Op):
    """2-D @ 2-D, 2-D @ 1-D, 1-D @ 2-D and 1-D dot products."""

    name = "matmul"

    def forward(self, ctx, a, b):
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise AutodiffError(
                f"matmul: only 1-D/2-D operands, got {a.ndim}-D and {b.ndim}-D"
            )
        if a.shape[-1] != b.shape[0]:
            raise AutodiffError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    def vjp(self, ctx, g):
        a, b = ctx["a"], ctx["b"]
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.T, a.T @ g
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b), a.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b @ g, np.outer(a, g)
        return g * b, g * a  # 1-D dot, g is scalar

    def jvp(self, ctx, tangents):
        da, db = tangents
        out = None
        if da is not None:
            out = _tadd(out, matmul(da, ctx["b"]))
        if db is not None:
            out = _tadd(out, matmul(ctx["a"], db))
        return out


class _Transpose(_Op):
    name = "transpose"

    def forward(self, ctx, a):
        if a.ndim != 2:
            raise AutodiffError(f"transpose: expected a matrix, got shape {a.shape}")
        return a.T.copy()

    def vjp(self, ctx, g):
        return (g.T.copy(),)

    def jvp(self, ctx, tangents):
        (da,) = tangents
        return None if da is None else transpose(da)


class _RowScale(_Op):
    """Scale row i of an (r, c) matrix by v[i]."""

    name = "row_scale"

    def forward(self, ctx, v, m):
        if v.ndim != 1 or m.ndim != 2 or v.shape[0] != m.shape[0]:
            raise AutodiffError(
                f"row_scale: need (r,) and (r, c), got {v.shape} and {m.shape}"
            )
        ctx["v"], ctx["m"] = v, m
        return v[:, None] * m

    def vjp(self, ctx, g):
        v, m = ctx["v"], ctx["m"]
        return (g * m).sum(axis=1), v[:, None] * g

    def jvp(self, ctx, tangents):
        dv, dm = tangents
        out = None
        if dv is not None:
            out = _tadd(out, row_scale(dv, ctx["m"]))
        if dm is not None:
            out = _tadd(out, row_scale(ctx["v"], dm))
        return out


class _Elementwise(_Op):
    """Unary elementwise op given its value map and derivative coefficient."""

    def __init__(self, name, fn, deriv):
        self.name = name
        self._fn = fn
        self._deriv = deriv  # (x, out) -> elementwise d out / d x

    def forward(self, ctx, a):
        out = self._fn(a)
        ctx["coef"] = self._deriv(a, out)
        return out

    def vjp(self, ctx, g):
        return (g * ctx["coef"],)

    def jvp(self, ctx, tangents):
        (da,) = tangents
        return None if da is None else mul(da, ctx["coef"])


def _log_forward(x):
    if np.any(x <= 0.0):
        raise AutodiffError("log: domain requires strictly positive input")
    return np.log(x)


def _sigmoid_value(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class _Sum(_Op):
    def __init__(self, take_mean: bool):
        self._mean = take_mean
        self.name = "mean" if take_mean else "sum"

    def forward(self, ctx, a, axis):
        axis = None if axis is None else int(axis)
        ctx["shape"], ctx["axis"] = a.shape, axis
        count = a.size if axis is None else a.shape[axis]
        ctx["scale"] = (1.0 / count) if self._mean else 1.0
        out = a.mean(axis=axis) if self._mean else a.sum(axis=axis)
        return np.asarray(out)

    def vjp(self, ctx, g):
        shape, axis = ctx["shape"], ctx["axis"]
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * ctx["scale"], shape).copy(), None)

    def jvp(self, ctx, tangents):
        da = tangents[0]
        if da is None:
            return None
        reducer = mean if self._mean else sum
        return reducer(da, axis=ctx["axis"])


class _Concat(_Op):
    name = "concat"

    def forward(self, ctx, axis, *parts):
        axis = int(axis)
        if len({p.ndim for p in parts}) != 1:
            raise AutodiffError("concat: rank mismatch across parts")
        ctx["axis"] = axis
        ctx["sizes"] = [p.shape[axis] for p in parts]
        ctx["shapes"] = [p.shape for p in parts]
        return np.concatenate(parts, axis=axis)

    def vjp(self, ctx, g):
        grads = [None]  # axis operand
        offset = 0
        for size in ctx["sizes"]:
            sl = [slice(None)] * g.ndim
            sl[ctx["axis"]] = slice(offset, offset + size)
            grads.append(g[tuple(sl)].copy())
            offset += size
        return tuple(grads)

    def jvp(self, ctx, tangents):
        parts = [
            np.zeros(shape) if t is None else t
            for t, shape in zip(tangents[1:], ctx["shapes"])
        ]
        return concat(parts, axis=ctx["axis"])


class _GetItem(_Op):
    """Basic slicing plus integer-array gathers; scatter-add on the way back."""

    name = "getitem"

    def forward(self, ctx, a, idx):
        ctx["shape"], ctx["idx"] = a.shape, idx
        return np.asarray(a[idx]).copy()

    def vjp(self, ctx, g):
        full = np.zeros(ctx["shape"])
        np.add.at(full, ctx["idx"], g)
        return (full, None)

    def jvp(self, ctx, tangents):
        da = tangents[0]
        return None if da is None else getitem(da, ctx["idx"])


class _Reshape(_Op):
    name = "reshape"

    def forward(self, ctx, a, shape):
        ctx["orig"], ctx["target"] = a.shape, shape
        return np.ascontiguousarray(a).reshape(shape).copy()

    def vjp(self, ctx, g):
        return (g.reshape(ctx["orig"]), None)

    def jvp(self, ctx, tangents):
        da = tangents[0]
        return None if da is None else reshape(da, ctx["target"])


class _Conv2d(_Op):
    """Valid-padding, unit-stride 2-D cross-correlation with optional bias.

    Input is (N, C_in, H, W); kernels (C_out, C_in, kh, kw); bias (C_out,).
    """

    name = "conv2d"

    def forward(self, ctx, x, k, b=None):
        if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
            raise AutodiffError(f"conv2d: bad shapes x{x.shape} k{k.shape}")
        kh, kw = k.shape[2], k.shape[3]
        if kh > x.shape[2] or kw > x.shape[3]:
            raise AutodiffError("conv2d: kernel larger than input")
        if b is not None and b.shape != (k.shape[0],):
            raise AutodiffError(f"conv2d: bias shape {b.shape} != ({k.shape[0]},)")
        patches = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
        out = np.einsum("nchwij,fcij->nfhw", patches, k, optimize=True)
        if b is not None:
            out = out + b[None, :, None, None]
        ctx["x"], ctx["k"], ctx["has_bias"] = x, k, b is not None
        return np.ascontiguousarray(out)

    def vjp(self, ctx, g):
        x, k = ctx["x"], ctx["k"]
        kh, kw = k.shape[2], k.shape[3]
        oh, ow = g.shape[2], g.shape[3]
        patches = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
        gk = np.einsum("nchwij,nfhw->fcij", patches, g, optimize=True)
        gx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + oh, j:j + ow] += np.einsum(
                    "nfhw,fc->nchw", g, k[:, :, i, j], optimize=True
                )
        if ctx["has_bias"]:
            return gx, gk, g.sum(axis=(0, 2, 3))
        return gx, gk

    def jvp(self, ctx, tangents):
        if ctx["has_bias"]:
            dx, dk, db = tangents
        else:
            (dx, dk), db = tangents, None
        out = None
        if dx is not None:
            out = _tadd(out, conv2d(dx, ctx["k"]))
        if dk is not None or db is not None:
            dk = np.zeros_like(ctx["k"]) if dk is None else dk
            out = _tadd(out, conv2d(ctx["x"], dk, db))
        return out


_ADD, _SUB, _MUL, _DIV, _NEG = _Add(), _Sub(), _Mul(), _Div(), _Neg()
_MATMUL, _TRANSPOSE, _ROWSCALE = _MatMul(), _Transpose(), _RowScale()
_SUMOP, _MEANOP = _Sum(take_mean=False), _Sum(take_mean=True)
_CONCAT, _GETITEM, _RESHAPE, _CONV2D = _Concat(), _GetItem(), _Reshape(), _Conv2d()

_EXP = _Elementwise("exp", np.exp, lambda x, out: out)
_LOG = _Elementwise("log", _log_forward, lambda x, out: 1.0 / x)
_TANH = _Elementwise("tanh", np.tanh, lambda x, out: 1.0 - out * out)
_RELU = _Elementwise(
    "relu", lambda x: np.maximum(x, 0.0), lambda x, out: (x > 0.0).astype(np.float64)
)
_SIGMOID = _Elementwise("sigmoid", _sigmoid_value, lambda x, out: out * (1.0 - out))
_SOFTPLUS = _Elementwise(
    "softplus", lambda x: np.logaddexp(0.0, x), lambda x, out: _sigmoid_value(x)
)
_SQUARE = _Elementwise("square", np.square, lambda x, out: 2.0 * x)


# ---------------------------------------------------------------------------
# public functions
# ---------------------------------------------------------------------------

def add(a, b):
    return _apply(_ADD, a, b)


def sub(a, b):
    return _apply(_SUB, a, b)


def mul(a, b):
    return _apply(_MUL, a, b)


def div(a, b):
    return _apply(_DIV, a, b)


def neg(a):
    return _apply(_NEG, a)


def matmul(a, b):
    return _apply(_MATMUL, a, b)


def transpose(a):
    return _apply(_TRANSPOSE, a)


def row_scale(v, m):
    """Row-wise product: row i of ``m`` scaled by ``v[i]``."""
    return _apply(_ROWSCALE, v, m)


def exp(a):
    return _apply(_EXP, a)


def log(a):
    return _apply(_LOG, a)


def tanh(a):
    return _apply(_TANH, a)


def relu(a):
    return _apply(_RELU, a)


def sigmoid(a):
    return _apply(_SIGMOID, a)


def softplus(a):
    return _apply(_SOFTPLUS, a)


def square(a):
    return _apply(_SQUARE, a)


def sum(a, axis=None):  # noqa: A001 - used qualified, as ops.sum
    return _apply(_SUMOP, a, _OpaqueArg(axis))


def mean(a, axis=None):
    return _apply(_MEANOP, a, _OpaqueArg(axis))


def concat(parts, axis=0):
    return _apply(_CONCAT, _OpaqueArg(axis), *parts)


def getitem(a, idx):
    return _apply(_GETITEM, a, _OpaqueArg(idx))


def reshape(a, shape):
    return _apply(_RESHAPE, a, _OpaqueArg(tuple(int(s) for s in shape)))


def conv2d(x, kernels, bias=None):
    if bias is None:
        return _apply(_CONV2D, x, kernels)
    return _apply(_CONV2D, x, kernels, bias)


# ---------------------------------------------------------------------------
# operator overloads
# ---------------------------------------------------------------------------

def _refuse_array(self, *args, **kwargs):
    raise AutodiffError(
        f"{type(self).__name__} only supports the documented primitive set; "
        "apply numpy functions to .value / value_of(...) instead"
    )


def _attach_operators(cls):
    cls.__add__ = lambda s, o: add(s, o)
    cls.__radd__ = lambda s, o: add(o, s)
    cls.__sub__ = lambda s, o: sub(s, o)
    cls.__rsub__ = lambda s, o: sub(o, s)
    cls.__mul__ = lambda s, o: mul(s, o)
    cls.__rmul__ = lambda s, o: mul(o, s)
    cls.__truediv__ = lambda s, o: div(s, o)
    cls.__rtruediv__ = lambda s, o: div(o, s)
    cls.__neg__ = lambda s: neg(s)
    cls.__matmul__ = lambda s, o: matmul(s, o)
    cls.__rmatmul__ = lambda s, o: matmul(o, s)
    cls.__getitem__ = lambda s, idx: getitem(s, idx)
    # ndarray <op> Variable must defer to our reflected operators, and a
    # stray numpy ufunc on a tracked value should fail loudly, not coerce.
    cls.__array_ufunc__ = None
    cls.__array__ = _refuse_array


_attach_operators(Variable)
_attach_operators(DualTensor)
