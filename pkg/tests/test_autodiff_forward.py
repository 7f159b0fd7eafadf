"""Forward-mode checks: JVP exactness, central differences, and
forward/reverse consistency for every primitive."""

import numpy as np
import pytest

from selftune import ops
from selftune.dual import DualTensor, jvp
from selftune.tape import AutodiffError, record
from selftune.tensor import as_tensor

RNG = np.random.default_rng(77)

JVP_FD_STEP = 1e-4
JVP_FD_RTOL = 1e-6
CONSISTENCY_TOL = 1e-10


def central_diff_tangent(f, x, v, eps=JVP_FD_STEP):
    return (f(x + eps * v) - f(x - eps * v)) / (2.0 * eps)


class TestSpecExamples:
    def test_scalar_square(self):
        out = jvp(lambda w: ops.mul(w, w), [as_tensor(3.0)], [as_tensor(1.0)])
        assert float(out.primal) == 9.0
        assert float(out.tangent) == 6.0

    def test_linear_map_tangent_exact(self):
        x = RNG.standard_normal(4)
        W0 = RNG.standard_normal((3, 4))
        dW = RNG.standard_normal((3, 4))
        out = jvp(lambda W: ops.matmul(W, x), [W0], [dW])
        np.testing.assert_array_equal(out.tangent, dW @ x)

    def test_affine_tangent_independent_of_offset(self):
        x = RNG.standard_normal(4)
        dW = RNG.standard_normal((3, 4))
        tangents = []
        for _ in range(3):
            W0 = RNG.standard_normal((3, 4))
            b = RNG.standard_normal(3)
            out = jvp(lambda W: ops.add(ops.matmul(W, x), b), [W0], [dW])
            tangents.append(out.tangent)
        np.testing.assert_array_equal(tangents[0], tangents[1])
        np.testing.assert_array_equal(tangents[0], tangents[2])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(AutodiffError):
            DualTensor(np.ones(3), np.ones(4))


def two_layer_tanh(x, W1, b1, W2, b2):
    h = ops.tanh(ops.add(ops.matmul(x, W1), b1))
    return ops.add(ops.matmul(h, W2), b2)


class TestCentralDifferenceOracle:
    def test_mlp_jvp_matches_central_difference(self):
        x = RNG.standard_normal((5, 3))
        W1 = RNG.standard_normal((3, 6)) * 0.8
        b1 = RNG.standard_normal(6) * 0.1
        W2 = RNG.standard_normal((6, 2)) * 0.8
        b2 = RNG.standard_normal(2) * 0.1
        dW1 = RNG.standard_normal((3, 6))

        out = jvp(lambda W: two_layer_tanh(x, W, b1, W2, b2), [W1], [dW1])

        def f(W):
            return ops.value_of(two_layer_tanh(x, W, b1, W2, b2))

        fd = central_diff_tangent(f, W1, dW1)
        err = np.abs(out.tangent - fd) / np.maximum(np.abs(fd), 1.0)
        assert np.max(err) <= JVP_FD_RTOL


# Primitive harness: (name, fn of one dual input, primal sampler)
UNARY_CASES = [
    ("exp", ops.exp, lambda: RNG.uniform(-1, 1, (3, 4))),
    ("log", ops.log, lambda: RNG.uniform(0.3, 2.0, (3, 4))),
    ("tanh", ops.tanh, lambda: RNG.standard_normal((3, 4))),
    ("relu", ops.relu, lambda: RNG.uniform(0.2, 2.0, (3, 4))),
    ("sigmoid", ops.sigmoid, lambda: RNG.standard_normal((3, 4))),
    ("softplus", ops.softplus, lambda: RNG.standard_normal((3, 4))),
    ("square", ops.square, lambda: RNG.standard_normal((3, 4))),
    ("neg", ops.neg, lambda: RNG.standard_normal((3, 4))),
    ("transpose", ops.transpose, lambda: RNG.standard_normal((3, 4))),
    ("sum", lambda v: ops.sum(v, axis=0), lambda: RNG.standard_normal((3, 4))),
    ("mean", lambda v: ops.mean(v, axis=1), lambda: RNG.standard_normal((3, 4))),
    ("reshape", lambda v: ops.reshape(v, (4, 3)), lambda: RNG.standard_normal((3, 4))),
    ("getitem", lambda v: v[1:3, ::2], lambda: RNG.standard_normal((3, 4))),
]

BINARY_CASES = [
    ("add", ops.add, lambda: (RNG.standard_normal((3, 4)), RNG.standard_normal((3, 4)))),
    ("sub", ops.sub, lambda: (RNG.standard_normal((3, 4)), RNG.standard_normal((3, 4)))),
    ("mul", ops.mul, lambda: (RNG.standard_normal((3, 4)), RNG.standard_normal((3, 4)))),
    ("div", ops.div, lambda: (RNG.standard_normal((3, 4)), RNG.uniform(0.5, 2.0, (3, 4)))),
    ("matmul", ops.matmul, lambda: (RNG.standard_normal((3, 4)), RNG.standard_normal((4, 2)))),
    ("row_scale", ops.row_scale, lambda: (RNG.standard_normal(3), RNG.standard_normal((3, 4)))),
    ("concat", lambda a, b: ops.concat([a, b], axis=1),
     lambda: (RNG.standard_normal((3, 2)), RNG.standard_normal((3, 4)))),
    ("conv2d", ops.conv2d,
     lambda: (RNG.standard_normal((2, 2, 4, 4)), RNG.standard_normal((3, 2, 2, 2)))),
]


def scalarize(y, weights):
    return ops.sum(ops.mul(y, weights))


@pytest.mark.parametrize("name,fn,sampler", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
def test_forward_reverse_consistency_unary(name, fn, sampler):
    """<grad, tangent> == jvp tangent of the scalarized output."""
    x0 = sampler()
    w = RNG.standard_normal(ops.value_of(fn(x0)).shape)
    dx = RNG.standard_normal(x0.shape)

    out, tape, (xv,) = record(lambda v: scalarize(fn(v), w), x0)
    g = tape.backward(out)[xv]
    dual_out = jvp(lambda v: scalarize(fn(v), w), [x0], [dx])
    assert abs(float(np.sum(g * dx)) - float(dual_out.tangent)) <= CONSISTENCY_TOL


@pytest.mark.parametrize("name,fn,sampler", BINARY_CASES, ids=[c[0] for c in BINARY_CASES])
def test_forward_reverse_consistency_binary(name, fn, sampler):
    a0, b0 = sampler()
    w = RNG.standard_normal(ops.value_of(fn(a0, b0)).shape)
    da = RNG.standard_normal(a0.shape)
    db = RNG.standard_normal(b0.shape)

    out, tape, (av, bv) = record(lambda a, b: scalarize(fn(a, b), w), a0, b0)
    grads = tape.backward(out)
    inner = float(np.sum(grads[av] * da) + np.sum(grads[bv] * db))
    dual_out = jvp(lambda a, b: scalarize(fn(a, b), w), [a0, b0], [da, db])
    assert abs(inner - float(dual_out.tangent)) <= CONSISTENCY_TOL


def test_constant_operands_have_zero_tangent():
    x0 = RNG.standard_normal((3, 3))
    c = RNG.standard_normal((3, 3))
    out = jvp(lambda v: ops.mul(v, c), [x0], [None])
    np.testing.assert_array_equal(out.tangent, np.zeros((3, 3)))


def test_variable_tangent_traces_linearization():
    """A Variable riding in the tangent slot yields a differentiable JVP."""
    from selftune.tape import Tape

    x = RNG.standard_normal((4, 3))
    W0 = RNG.standard_normal((3, 2))
    direction = RNG.standard_normal((3, 2))

    with Tape() as tape:
        s = tape.variable(as_tensor(2.0))
        dW = ops.mul(s, direction)  # tangent depends on the traced scalar
        y = jvp(lambda W: ops.tanh(ops.matmul(x, W)), [W0], [dW])
        total = ops.sum(y.tangent)
        g = tape.backward(total)[s]
    # d/ds sum(J @ (s * direction)) == sum(J @ direction), exact linearity
    base = jvp(lambda W: ops.tanh(ops.matmul(x, W)), [W0], [direction])
    assert abs(float(g) - float(np.sum(ops.value_of(base.tangent)))) <= 1e-12
