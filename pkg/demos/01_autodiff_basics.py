"""Tour of the autodiff core: tape gradients, forward-mode directional
derivatives, and the finite-difference sanity checks that gate them.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from selftune import ops
from selftune.dual import jvp
from selftune.tape import Tape, record

rng = np.random.default_rng(0)

print("== reverse mode on a scalar chain ==")
out, tape, (w,) = record(lambda w: ops.sum(ops.square(w)),
                         np.array([1.0, -2.0, 3.0]))
print("sum(w^2) at [1,-2,3]   =", float(out.value))
print("gradient               =", tape.backward(out)[w], "(expect [2,-4,6])")

print()
print("== a small MLP, checked against central differences ==")
sizes = [3, 5, 2]
x = rng.standard_normal((6, 3))
t = rng.standard_normal((6, 2))
n_params = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def mlp_loss(flat):
    offset, h = 0, x
    for i, (din, dout) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = ops.reshape(flat[offset:offset + din * dout], (din, dout))
        offset += din * dout
        b = flat[offset:offset + dout]
        offset += dout
        h = ops.add(ops.matmul(h, W), b)
        if i < len(sizes) - 2:
            h = ops.tanh(h)
    return ops.div(ops.sum(ops.square(ops.sub(h, t))), 12.0)


flat0 = rng.standard_normal(n_params) * 0.5
out, tape, (v,) = record(mlp_loss, flat0)
grad = tape.backward(out)[v]

step = 1e-5
i = int(rng.integers(n_params))
up, dn = flat0.copy(), flat0.copy()
up[i] += step
dn[i] -= step
fd = (float(record(mlp_loss, up)[0].value)
      - float(record(mlp_loss, dn)[0].value)) / (2 * step)
print(f"coordinate {i}: tape {grad[i]:+.8f} vs central difference {fd:+.8f}")

print()
print("== forward mode: exact directional derivatives ==")
dual = jvp(lambda w: ops.mul(w, w), [np.asarray(3.0)], [np.asarray(1.0)])
print("w^2 at 3 along 1       =", float(dual.primal), float(dual.tangent),
      "(expect 9, 6)")

direction = rng.standard_normal(n_params)
dual = jvp(mlp_loss, [flat0], [direction])
print("MLP loss JVP           =", float(ops.value_of(dual.tangent)))
print("<grad, direction>      =", float(grad @ direction),
      "(forward/reverse consistency)")

print()
print("== tangents may themselves be traced ==")
with Tape() as tape2:
    s = tape2.variable(np.asarray(2.0))
    dW = ops.mul(s, direction)
    y = jvp(mlp_loss, [flat0], [dW])
    g_s = tape2.backward(y.tangent)[s]
print("d/ds [J @ (s * dir)]   =", float(g_s),
      "== J @ dir =", float(grad @ direction))
