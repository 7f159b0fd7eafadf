"""Best-response hypernetworks and hyperparameter transforms.

Three hypernetwork families approximate the inner problem's best response
around the current hyperparameters:

- uncentered full-linear:  ``w = Phi @ lam + phi0``
- centered full-linear:    ``w = Theta @ (lam - lam0) + w0``
- structured per-layer:    general weights plus a rank-style response
  modulation per layer (dense: per-output-unit scales from ``U``; conv:
  per-channel scalar scales), still affine in ``lam``.

All hyperparameters live on an unconstrained (raw) axis and pass through
fixed transforms into their search domains.  Perturbations are applied in
raw space, so transformed values stay in-domain with no clipping.

Initialization makes every hypernetwork start as a plain network: general
parts get fan-in-scaled noise, response parts are zeroed at the center
(full response matrices zero; structured nets zero ``U``/``V`` while
``W_response`` carries random values that the zero scales suppress).

The perturbation scale is stored as ``log sigma`` so positivity is
structural rather than enforced by projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models, ops
from .dual import DualTensor
from .tape import AutodiffError

__all__ = [
    "TransformSpec", "transform", "inverse_transform", "transform_all",
    "HyperparamState", "UncenteredHypernet", "CenteredHypernet",
    "StructuredHypernet", "build_hypernet", "materialize_theta",
    "predict_linearized",
]

_GUARD = 1e-6


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransformSpec:
    """Fixed map from the unconstrained axis into a hyperparameter domain.

    ``clamp``, when set, clips the transformed value last (a numeric guard
    band for downstream consumers; the inverse ignores it).
    """

    kind: str
    lo: float = 0.0
    hi: float = 1.0
    clamp: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("exp", "sigmoid_range", "softplus", "identity"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "sigmoid_range" and not self.lo < self.hi:
            raise ValueError("sigmoid_range needs lo < hi")


def transform(spec: TransformSpec, raw):
    """Raw value(s) -> domain value(s); a total function."""
    raw = np.asarray(raw, dtype=np.float64)
    if spec.kind == "exp":
        out = np.exp(raw)
    elif spec.kind == "softplus":
        out = np.logaddexp(0.0, raw)
    elif spec.kind == "sigmoid_range":
        out = spec.lo + (spec.hi - spec.lo) * 0.5 * (1.0 + np.tanh(0.5 * raw))
    else:
        out = raw.copy()
    if spec.clamp is not None:
        out = np.clip(out, spec.clamp[0], spec.clamp[1])
    return out if out.ndim else float(out)


def inverse_transform(spec: TransformSpec, domain):
    """Domain value -> raw value with ``transform(result) == domain``.

    Values strictly inside the image invert exactly; sigmoid_range inputs
    are first pulled into a guard band of the open interval so barely-
    interior user configs stay invertible.  Boundary or outside-image
    values raise ``ValueError``.
    """
    x = float(domain)
    if spec.kind == "exp":
        if x <= 0.0:
            raise ValueError(f"exp transform image is (0, inf); got {x}")
        return float(np.log(x))
    if spec.kind == "softplus":
        if x <= 0.0:
            raise ValueError(f"softplus image is (0, inf); got {x}")
        return float(np.log(np.expm1(x)))
    if spec.kind == "sigmoid_range":
        if not (spec.lo < x < spec.hi):
            raise ValueError(
                f"value {x} outside the open interval ({spec.lo}, {spec.hi})"
            )
        width = spec.hi - spec.lo
        x = min(max(x, spec.lo + _GUARD * width), spec.hi - _GUARD * width)
        p = (x - spec.lo) / width
        return float(np.log(p / (1.0 - p)))
    return x


def transform_all(specs, raw_vec) -> np.ndarray:
    raw_vec = np.asarray(raw_vec, dtype=np.float64).reshape(-1)
    if len(specs) != raw_vec.shape[0]:
        raise ValueError(f"{len(specs)} transforms for {raw_vec.shape[0]} values")
    return np.array([transform(s, v) for s, v in zip(specs, raw_vec)])


# ---------------------------------------------------------------------------
# hyperparameter state
# ---------------------------------------------------------------------------

@dataclass
class HyperparamState:
    """Raw hyperparameters, their center, log perturbation scales and the
    per-index transforms.  ``lam0`` tracks ``lam`` between perturbations;
    re-centering after a hyperparameter update restores ``lam0 == lam``."""

    lam: np.ndarray
    lam0: np.ndarray
    log_sigma: np.ndarray
    transforms: tuple
    names: tuple = ()

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        self.lam0 = np.asarray(self.lam0, dtype=np.float64).reshape(-1)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64).reshape(-1)
        h = self.lam.shape[0]
        if self.lam0.shape[0] != h or self.log_sigma.shape[0] != h:
            raise ValueError("lam, lam0 and log_sigma must share one length")
        if len(self.transforms) != h:
            raise ValueError("one transform per hyperparameter required")
        if not self.names:
            self.names = tuple(f"h{i}" for i in range(h))

    @property
    def h(self) -> int:
        return self.lam.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def domain(self, raw_vec=None) -> np.ndarray:
        vec = self.lam if raw_vec is None else raw_vec
        return transform_all(self.transforms, vec)

    @classmethod
    def from_domain_init(cls, transforms, domain_values, sigma=1.0, names=()):
        raw = np.array([
            inverse_transform(s, v) for s, v in zip(transforms, domain_values)
        ])
        log_sigma = np.log(np.full(raw.shape, float(sigma)))
        return cls(raw.copy(), raw.copy(), log_sigma, tuple(transforms), tuple(names))


# ---------------------------------------------------------------------------
# hypernetworks
# ---------------------------------------------------------------------------

def _merged(params: dict, override) -> dict:
    if not override:
        return params
    out = dict(params)
    out.update(override)
    return out


class UncenteredHypernet:
    """Full-linear uncentered response ``w = Phi @ lam + phi0``."""

    kind = "stn"

    def __init__(self, model: models.Model, h: int):
        self.model = model
        self.h = h
        self.m = model.num_params
        self.params = {
            "Phi": np.zeros((self.m, h)),
            "phi0": np.zeros(self.m),
        }

    base_param_names = ("phi0",)
    response_param_names = ("Phi",)

    @property
    def all_param_names(self):
        return ("Phi", "phi0")

    def init(self, rng: np.random.Generator) -> "UncenteredHypernet":
        self.params["phi0"] = self.model.flatten_params(self.model.init_params(rng))
        self.params["Phi"] = np.zeros((self.m, self.h))  # response zero everywhere
        return self

    def respond_flat(self, lam, params=None):
        p = _merged(self.params, params)
        return ops.add(ops.matmul(p["Phi"], lam), p["phi0"])

    def respond(self, lam, params=None):
        return self.model.unflatten_params(self.respond_flat(lam, params))

    def base_weights(self, params=None):
        # The plain-network weights are the response at the current center;
        # for the uncentered form that is a property of (Phi, phi0, lam0)
        # and callers must supply lam0 via respond().
        raise AutodiffError("uncentered hypernetwork has no standalone base weights")


class CenteredHypernet:
    """Full-linear centered response ``w = Theta @ (lam - lam0) + w0``."""

    kind = "centered"

    def __init__(self, model: models.Model, h: int):
        self.model = model
        self.h = h
        self.m = model.num_params
        self.params = {
            "Theta": np.zeros((self.m, h)),
            "w0": np.zeros(self.m),
        }

    base_param_names = ("w0",)
    response_param_names = ("Theta",)

    @property
    def all_param_names(self):
        return ("Theta", "w0")

    def init(self, rng: np.random.Generator) -> "CenteredHypernet":
        self.params["w0"] = self.model.flatten_params(self.model.init_params(rng))
        self.params["Theta"] = np.zeros((self.m, self.h))
        return self

    def respond_flat(self, lam, lam0, params=None):
        p = _merged(self.params, params)
        delta = ops.sub(lam, lam0)
        return ops.add(ops.matmul(p["Theta"], delta), p["w0"])

    def respond(self, lam, lam0, params=None):
        return self.model.unflatten_params(self.respond_flat(lam, lam0, params))

    def base_weights(self, params=None):
        p = _merged(self.params, params)
        return self.model.unflatten_params(p["w0"])

    def response_delta(self, eps, params=None):
        """Per-layer weight offsets for a raw-space perturbation ``eps``."""
        p = _merged(self.params, params)
        flat = ops.matmul(p["Theta"], eps)
        return self.model.unflatten_params(flat)


class StructuredHypernet:
    """Per-layer centered response with compact modulation.

    Dense layers: ``W(lam) = W_general + (U (lam-lam0)) col-scales
    W_response`` (one scale per output unit) and
    ``b(lam) = b_general + (V (lam-lam0)) * b_response``.

    Conv layers: one scalar scale per output channel,
    ``K(lam) = K_general + ((lam-lam0) . u_c) * K_response`` per channel,
    with the same per-channel treatment for biases.

    Dense parameter count per layer: ``out*(2*in + h) + out*(2 + h)``
    (with bias); conv layers add ``2*h*C_out`` over twice the plain layer.
    """

    kind = "structured"

    def __init__(self, model: models.Model, h: int):
        self.model = model
        self.h = h
        self.params = {}
        self._layers = []
        for i, (spec, shapes) in enumerate(zip(model.param_specs, model.param_shapes())):
            entry = {"index": i, "spec": spec, "shapes": shapes}
            wshape = shapes[0]
            if isinstance(spec, models.DenseSpec):
                out_dim = spec.out_dim
            else:
                out_dim = spec.out_channels
            self.params[f"W_general{i}"] = np.zeros(wshape)
            self.params[f"W_response{i}"] = np.zeros(wshape)
            self.params[f"U{i}"] = np.zeros((out_dim, h))
            entry["has_bias"] = len(shapes) > 1
            if entry["has_bias"]:
                self.params[f"b_general{i}"] = np.zeros(shapes[1])
                self.params[f"b_response{i}"] = np.zeros(shapes[1])
                self.params[f"V{i}"] = np.zeros((out_dim, h))
            self._layers.append(entry)

    @property
    def base_param_names(self):
        names = []
        for e in self._layers:
            i = e["index"]
            names.append(f"W_general{i}")
            if e["has_bias"]:
                names.append(f"b_general{i}")
        return tuple(names)

    @property
    def response_param_names(self):
        names = []
        for e in self._layers:
            i = e["index"]
            names.extend([f"W_response{i}", f"U{i}"])
            if e["has_bias"]:
                names.extend([f"b_response{i}", f"V{i}"])
        return tuple(names)

    @property
    def all_param_names(self):
        return self.base_param_names + self.response_param_names

    @property
    def num_params(self) -> int:
        return int(np.sum([np.prod(self.params[k].shape) for k in self.params]))

    def init(self, rng: np.random.Generator) -> "StructuredHypernet":
        base = self.model.init_params(rng)
        for e, layer in zip(self._layers, base):
            i = e["index"]
            spec = e["spec"]
            if isinstance(spec, models.DenseSpec):
                fan_in = spec.in_dim
            else:
                fan_in = spec.in_channels * spec.kernel * spec.kernel
            self.params[f"W_general{i}"] = layer[0]
            # random response directions, silenced by U = V = 0 at the center
            self.params[f"W_response{i}"] = rng.standard_normal(layer[0].shape) / np.sqrt(fan_in)
            self.params[f"U{i}"] = np.zeros_like(self.params[f"U{i}"])
            if e["has_bias"]:
                self.params[f"b_general{i}"] = layer[1]
                self.params[f"b_response{i}"] = rng.standard_normal(layer[1].shape)
                self.params[f"V{i}"] = np.zeros_like(self.params[f"V{i}"])
        return self

    # -- responses ---------------------------------------------------------
    def _layer_delta(self, e, delta_lam, p):
        """Weight/bias offsets for one layer given raw-space ``delta_lam``."""
        i = e["index"]
        scales = ops.matmul(p[f"U{i}"], delta_lam)  # (out,)
        w_resp = p[f"W_response{i}"]
        if isinstance(e["spec"], models.DenseSpec):
            # scales act per output unit = per column of the (in, out) matrix
            dw = ops.transpose(ops.row_scale(scales, ops.transpose(w_resp)))
        else:
            kshape = ops.value_of(w_resp).shape
            flat = ops.reshape(w_resp, (kshape[0], int(np.prod(kshape[1:]))))
            dw = ops.reshape(ops.row_scale(scales, flat), kshape)
        out = [dw]
        if e["has_bias"]:
            bscales = ops.matmul(p[f"V{i}"], delta_lam)
            out.append(ops.mul(bscales, p[f"b_response{i}"]))
        return out

    def respond(self, lam, lam0, params=None):
        p = _merged(self.params, params)
        delta_lam = ops.sub(lam, lam0)
        weights = []
        for e in self._layers:
            i = e["index"]
            deltas = self._layer_delta(e, delta_lam, p)
            w = ops.add(p[f"W_general{i}"], deltas[0])
            layer = [w]
            if e["has_bias"]:
                layer.append(ops.add(p[f"b_general{i}"], deltas[1]))
            weights.append(tuple(layer))
        return weights

    def base_weights(self, params=None):
        p = _merged(self.params, params)
        weights = []
        for e in self._layers:
            i = e["index"]
            layer = [p[f"W_general{i}"]]
            if e["has_bias"]:
                layer.append(p[f"b_general{i}"])
            weights.append(tuple(layer))
        return weights

    def response_delta(self, eps, params=None):
        p = _merged(self.params, params)
        return [tuple(self._layer_delta(e, eps, p)) for e in self._layers]


def build_hypernet(kind: str, model: models.Model, h: int,
                   rng: np.random.Generator, structured: bool = False):
    """Construct and initialize the hypernetwork for a run kind."""
    if kind == "stn":
        if structured:
            raise ValueError("structured form is centered; use kind 'centered' or 'dstn'")
        return UncenteredHypernet(model, h).init(rng)
    if kind in ("centered", "dstn"):
        if structured:
            return StructuredHypernet(model, h).init(rng)
        return CenteredHypernet(model, h).init(rng)
    raise ValueError(f"unknown hypernet kind {kind!r}")


def materialize_theta(net, lam0: np.ndarray) -> np.ndarray:
    """The (m, h) response slope of any hypernetwork, materialized.

    Responses are affine in lam, so unit-perturbation first differences
    recover the slope exactly.
    """
    lam0 = np.asarray(lam0, dtype=np.float64).reshape(-1)
    if isinstance(net, UncenteredHypernet):
        return net.params["Phi"].copy()
    if isinstance(net, CenteredHypernet):
        return net.params["Theta"].copy()
    model = net.model
    h = net.h
    base = model.flatten_params(net.base_weights())
    cols = []
    for j in range(h):
        e_j = np.zeros(h)
        e_j[j] = 1.0
        responded = model.flatten_params(net.respond(lam0 + e_j, lam0))
        cols.append(responded - base)
    return np.stack(cols, axis=1)


def predict_linearized(net, model: models.Model, x, eps, noise=None,
                       params=None):
    """First-order prediction around the center weights.

    Evaluates the plain network at the base weights (with the caller's
    perturbed-noise draw) and adds the exact directional derivative of the
    network along the response offset for ``eps``.  The offset may be
    traced, in which case the returned prediction is differentiable with
    respect to the response parameters.
    """
    if isinstance(net, UncenteredHypernet):
        raise AutodiffError("linearized prediction needs a centered hypernetwork")
    base = net.base_weights(params)
    deltas = net.response_delta(eps, params)
    dual_weights = []
    for layer_vals, layer_deltas in zip(base, deltas):
        dual_weights.append(tuple(
            DualTensor(ops.value_of(v), d)
            for v, d in zip(layer_vals, layer_deltas)
        ))
    y = models.forward(model, x, dual_weights, noise=noise)
    if not isinstance(y, DualTensor) or y.tangent is None:
        return ops.value_of(y)
    return ops.add(y.primal, y.tangent)
