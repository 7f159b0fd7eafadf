"""Inner-problem models: linear models, linear networks, MLPs, a small
conv layer, plus the losses and regularizers whose coefficients are the
tuned hyperparameters.

Weights are passed *into* ``forward`` rather than stored on the model, so
hypernetworks can inject responded weights; the model object only fixes
the architecture.  All functions are pure given (weights, noise).

Dropout follows the classical non-inverted scheme: the tuned rate is the
*drop* probability, training multiplies by Bernoulli(1 - rate) masks with
no rescaling, and evaluation-mode forwards multiply activations by
(1 - rate) instead of masking.  Validation losses for the bilevel outer
objective use the plain forward with no dropout at all, so they carry no
direct hyperparameter dependence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tape import AutodiffError

__all__ = [
    "DenseSpec", "ConvSpec", "FlattenSpec", "Model",
    "linear_model", "mlp", "linear_network",
    "DropoutMasks", "sample_dropout_masks", "eval_dropout_factors",
    "RegBinding", "RegularizedObjective", "NonFiniteLossError",
    "forward", "training_loss", "validation_loss", "jacobian_norm_penalty",
    "regularization_terms", "half_mse", "cross_entropy",
]

_ACTIVATIONS = {"identity": None, "relu": ops.relu, "tanh": ops.tanh}


@dataclass(frozen=True)
class DenseSpec:
    in_dim: int
    out_dim: int
    activation: str = "identity"
    bias: bool = True

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ConvSpec:
    """Valid-padding unit-stride conv block: kernels (out, in, k, k)."""

    in_channels: int
    out_channels: int
    kernel: int
    activation: str = "identity"
    bias: bool = True

    def __post_init__(self):
        if self.kernel < 1:
            raise ValueError("kernel size must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class FlattenSpec:
    pass


class Model:
    """An architecture: a sequence of dense/conv/flatten specs.

    ``input_shape`` is the per-example shape, e.g. ``(m,)`` for vectors or
    ``(C, H, W)`` for images.
    """

    def __init__(self, specs, input_shape):
        self.specs = tuple(specs)
        self.input_shape = tuple(int(s) for s in input_shape)
        self._check_chain()

    def _check_chain(self):
        shape = self.input_shape
        for spec in self.specs:
            if isinstance(spec, DenseSpec):
                if len(shape) != 1 or shape[0] != spec.in_dim:
                    raise ValueError(f"dense layer expects ({spec.in_dim},), chain gives {shape}")
                shape = (spec.out_dim,)
            elif isinstance(spec, ConvSpec):
                if len(shape) != 3 or shape[0] != spec.in_channels:
                    raise ValueError(f"conv layer expects {spec.in_channels} channels, chain gives {shape}")
                c, h, w = shape
                if spec.kernel > h or spec.kernel > w:
                    raise ValueError("kernel larger than input plane")
                shape = (spec.out_channels, h - spec.kernel + 1, w - spec.kernel + 1)
            elif isinstance(spec, FlattenSpec):
                shape = (int(np.prod(shape)),)
            else:
                raise ValueError(f"unknown layer spec {spec!r}")
        self.output_shape = shape

    # -- parameters ---------------------------------------------------------
    @property
    def param_specs(self):
        return [s for s in self.specs if not isinstance(s, FlattenSpec)]

    def param_shapes(self):
        shapes = []
        for spec in self.param_specs:
            if isinstance(spec, DenseSpec):
                layer = [(spec.in_dim, spec.out_dim)]
                if spec.bias:
                    layer.append((spec.out_dim,))
            else:
                layer = [(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)]
                if spec.bias:
                    layer.append((spec.out_channels,))
            shapes.append(tuple(layer))
        return shapes

    @property
    def num_params(self) -> int:
        return int(np.sum([np.prod(s) for layer in self.param_shapes() for s in layer]))

    def init_params(self, rng: np.random.Generator):
        """Fan-in-scaled normal weights, zero biases."""
        params = []
        for spec, shapes in zip(self.param_specs, self.param_shapes()):
            if isinstance(spec, DenseSpec):
                fan_in = spec.in_dim
            else:
                fan_in = spec.in_channels * spec.kernel * spec.kernel
            w = rng.standard_normal(shapes[0]) / np.sqrt(fan_in)
            layer = [w]
            if len(shapes) > 1:
                layer.append(np.zeros(shapes[1]))
            params.append(tuple(layer))
        return params

    def flatten_params(self, params) -> np.ndarray:
        return np.concatenate([np.ravel(ops.value_of(p)) for layer in params for p in layer])

    def unflatten_params(self, flat):
        """Split a flat vector into the per-layer structure; traceable."""
        params = []
        offset = 0
        for shapes in self.param_shapes():
            layer = []
            for shape in shapes:
                size = int(np.prod(shape))
                chunk = flat[offset:offset + size]
                offset += size
                layer.append(ops.reshape(chunk, shape) if len(shape) > 1 else chunk)
            params.append(tuple(layer))
        return params

    # -- dropout sites --------------------------------------------------------
    def dropout_sites(self):
        """Site names: 'input', then 'act{i}' after each non-final layer."""
        sites = ["input"]
        layer_idx = 0
        n_param_layers = len(self.param_specs)
        for spec in self.specs:
            if isinstance(spec, FlattenSpec):
                continue
            if layer_idx < n_param_layers - 1:
                sites.append(f"act{layer_idx}")
            layer_idx += 1
        return sites

    def dropout_site_shapes(self, batch: int):
        shapes = {"input": (batch, *self.input_shape)}
        shape = self.input_shape
        layer_idx = 0
        n_param_layers = len(self.param_specs)
        for spec in self.specs:
            if isinstance(spec, FlattenSpec):
                shape = (int(np.prod(shape)),)
                continue
            if isinstance(spec, DenseSpec):
                shape = (spec.out_dim,)
            else:
                c, h, w = shape
                shape = (spec.out_channels, h - spec.kernel + 1, w - spec.kernel + 1)
            if layer_idx < n_param_layers - 1:
                shapes[f"act{layer_idx}"] = (batch, *shape)
            layer_idx += 1
        return shapes


def linear_model(m: int, out_dim: int = 1, bias: bool = False) -> Model:
    return Model([DenseSpec(m, out_dim, "identity", bias)], (m,))


def mlp(dims, activation: str = "tanh", bias: bool = True) -> Model:
    specs = []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        act = activation if i < len(dims) - 2 else "identity"
        specs.append(DenseSpec(din, dout, act, bias))
    return Model(specs, (dims[0],))


def linear_network(dims, bias: bool = False) -> Model:
    specs = [DenseSpec(d, e, "identity", bias) for d, e in zip(dims[:-1], dims[1:])]
    return Model(specs, (dims[0],))


# ---------------------------------------------------------------------------
# dropout noise
# ---------------------------------------------------------------------------

@dataclass
class DropoutMasks:
    """Multiplicative noise per site; values are 0/1 masks (training) or
    scalar keep-probabilities (evaluation mode)."""

    masks: dict = field(default_factory=dict)

    def get(self, site):
        return self.masks.get(site)


def _check_rate(rate: float) -> float:
    rate = float(rate)
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    return rate


def sample_dropout_masks(rates: dict, shapes: dict, rng: np.random.Generator) -> DropoutMasks:
    """Bernoulli keep masks with keep-probability (1 - rate), no rescaling."""
    masks = {}
    for site, rate in rates.items():
        rate = _check_rate(rate)
        keep = 1.0 - rate
        masks[site] = (rng.random(shapes[site]) < keep).astype(np.float64)
    return DropoutMasks(masks)


def eval_dropout_factors(rates: dict) -> DropoutMasks:
    return DropoutMasks({site: 1.0 - _check_rate(r) for site, r in rates.items()})


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def forward(model: Model, x, weights, noise: DropoutMasks | None = None):
    """Run the network; deterministic given (weights, noise)."""
    x_shape = ops.value_of(x).shape
    if x_shape[1:] != model.input_shape:
        raise AutodiffError(
            f"input shape {x_shape[1:]} does not match model {model.input_shape}"
        )
    h = x
    if noise is not None and noise.get("input") is not None:
        h = ops.mul(h, noise.get("input"))
    layer_idx = 0
    wi = 0
    n_param_layers = len(model.param_specs)
    for spec in model.specs:
        if isinstance(spec, FlattenSpec):
            hshape = ops.value_of(h).shape
            h = ops.reshape(h, (hshape[0], int(np.prod(hshape[1:]))))
            continue
        layer = weights[wi]
        wi += 1
        if isinstance(spec, DenseSpec):
            h = ops.matmul(h, layer[0])
            if spec.bias:
                h = ops.add(h, layer[1])
        else:
            h = ops.conv2d(h, layer[0], layer[1] if spec.bias else None)
        act = _ACTIVATIONS[spec.activation]
        if act is not None:
            h = act(h)
        if noise is not None and layer_idx < n_param_layers - 1:
            mask = noise.get(f"act{layer_idx}")
            if mask is not None:
                h = ops.mul(h, mask)
        layer_idx += 1
    return h


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def half_mse(pred, target):
    """(1/2n) * squared error summed over all outputs, n = batch rows."""
    target = np.asarray(ops.value_of(target))
    pshape = ops.value_of(pred).shape
    if target.shape != pshape:
        if target.ndim == 1 and pshape == (target.shape[0], 1):
            target = target.reshape(-1, 1)
        else:
            raise AutodiffError(f"target shape {target.shape} vs prediction {pshape}")
    n = pshape[0]
    err = ops.sub(pred, target)
    return ops.div(ops.sum(ops.square(err)), 2.0 * n)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood from logits, log-sum-exp stabilized."""
    labels = np.asarray(labels)
    z = logits
    zval = ops.value_of(z)
    n = zval.shape[0]
    zmax = zval.max(axis=1, keepdims=True)  # constant shift: gradient-neutral
    shifted = ops.sub(z, zmax)
    lse = ops.log(ops.sum(ops.exp(shifted), axis=1))
    picked = shifted[(np.arange(n), labels.astype(int))]
    return ops.mean(ops.sub(lse, picked))


# ---------------------------------------------------------------------------
# regularized objectives
# ---------------------------------------------------------------------------

_REG_KINDS = ("weight_decay", "input_dropout", "activation_dropout", "jacobian_norm")


class NonFiniteLossError(RuntimeError):
    """A loss term evaluated to NaN/Inf; carries the offending term."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss in term {term!r}: {value!r}")
        self.term = term
        self.value = value


@dataclass(frozen=True)
class RegBinding:
    """One regularizer bound to one hyperparameter index (and, for dropout,
    one noise site)."""

    kind: str
    hyper_index: int
    site: str | None = None

    def __post_init__(self):
        if self.kind not in _REG_KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.kind == "input_dropout" and self.site is None:
            object.__setattr__(self, "site", "input")
        if self.kind == "activation_dropout" and self.site is None:
            raise ValueError("activation_dropout needs an explicit site")


@dataclass(frozen=True)
class RegularizedObjective:
    """Training objective: data loss plus hyperparameter-weighted penalties.

    Regularizers appear only here, never in the validation objective, so
    the outer objective's direct gradient is identically zero.

    ``penalty_scaling='per_n'`` divides weight-decay / jacobian-norm
    penalties by the number of training examples; ``'unscaled'`` does not.
    """

    loss: str = "mse"
    regularizers: tuple = ()
    penalty_scaling: str = "per_n"

    def __post_init__(self):
        if self.loss not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.penalty_scaling not in ("per_n", "unscaled"):
            raise ValueError(f"unknown penalty scaling {self.penalty_scaling!r}")
        idx = [r.hyper_index for r in self.regularizers]
        if len(idx) != len(set(idx)):
            raise ValueError("each hyperparameter index may be bound at most once")

    def dropout_rates(self, lam_domain) -> dict:
        """Map noise site -> drop rate for the given domain hyperparameters."""
        lam = np.asarray(ops.value_of(lam_domain)).reshape(-1)
        rates = {}
        for reg in self.regularizers:
            if reg.kind in ("input_dropout", "activation_dropout"):
                rates[reg.site] = float(lam[reg.hyper_index])
        return rates

    def data_loss(self, pred, target):
        if self.loss == "mse":
            return half_mse(pred, target)
        return cross_entropy(pred, target)


def _weight_square_sum(weights, model: Model):
    total = None
    for layer, spec in zip(weights, model.param_specs):
        s = ops.sum(ops.square(layer[0]))
        total = s if total is None else ops.add(total, s)
    return total


def jacobian_norm_penalty(model: Model, weights, lam_value, n_train: int,
                          scaling: str = "per_n"):
    """Squared Frobenius norm of the end-to-end linear map, scaled by
    lam / (2n).  Only defined when every activation is the identity."""
    for spec in model.param_specs:
        if not isinstance(spec, DenseSpec) or spec.activation != "identity":
            raise AutodiffError(
                "jacobian-norm penalty requires a linear network (identity activations)"
            )
    prod = None
    for layer in weights:
        prod = layer[0] if prod is None else ops.matmul(prod, layer[0])
    divisor = 2.0 * n_train if scaling == "per_n" else 2.0
    return ops.div(ops.mul(lam_value, ops.sum(ops.square(prod))), divisor)


def regularization_terms(objective: RegularizedObjective, model: Model,
                         weights, lam_domain, n_train: int):
    """Sum of explicit penalty terms at the given weights; None when the
    objective regularizes through noise alone."""
    lam = lam_domain
    divisor = 2.0 * n_train if objective.penalty_scaling == "per_n" else 2.0
    total = None
    for reg in objective.regularizers:
        if reg.kind == "weight_decay":
            lam_i = lam[reg.hyper_index] if _indexable(lam) else lam
            term = ops.div(ops.mul(lam_i, _weight_square_sum(weights, model)), divisor)
            _check_term(term, "weight_decay")
        elif reg.kind == "jacobian_norm":
            lam_i = lam[reg.hyper_index] if _indexable(lam) else lam
            term = jacobian_norm_penalty(model, weights, lam_i, n_train,
                                         objective.penalty_scaling)
            _check_term(term, "jacobian_norm")
        else:
            continue  # dropout kinds act through the noise path only
        total = term if total is None else ops.add(total, term)
    return total


def training_loss(objective: RegularizedObjective, model: Model, weights,
                  lam_domain, batch, noise: DropoutMasks | None = None,
                  n_train: int | None = None):
    """Regularized training objective at already-transformed hyperparameters.

    ``batch`` is ``(x, targets)``; ``n_train`` is the dataset size used for
    per-n penalty scaling (defaults to the batch size).
    """
    x, target = batch
    if n_train is None:
        n_train = int(np.asarray(ops.value_of(x)).shape[0])
    pred = forward(model, x, weights, noise=noise)
    total = objective.data_loss(pred, target)
    _check_term(total, "data_loss")
    penalty = regularization_terms(objective, model, weights, lam_domain, n_train)
    if penalty is not None:
        total = ops.add(total, penalty)
    _check_term(total, "training_loss")
    return total


def validation_loss(model: Model, weights, batch, loss: str = "mse"):
    """Pure data-fit loss: no regularizers, no noise, no direct
    hyperparameter dependence."""
    x, target = batch
    pred = forward(model, x, weights, noise=None)
    out = half_mse(pred, target) if loss == "mse" else cross_entropy(pred, target)
    _check_term(out, "validation_loss")
    return out


def _indexable(lam) -> bool:
    return np.asarray(ops.value_of(lam)).ndim >= 1


def _check_term(term, name: str):
    val = term.value if hasattr(term, "value") else (
        term.primal if hasattr(term, "primal") else np.asarray(term)
    )
    if not np.all(np.isfinite(val)):
        raise NonFiniteLossError(name, float(np.asarray(val).reshape(-1)[0]))
