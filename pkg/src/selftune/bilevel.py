"""Alternating bilevel training loops.

Two trainers share the loop skeleton:

- the uncentered trainer updates all hypernetwork parameters jointly on a
  perturbed training objective;
- the centered trainer splits the inner problem: base weights descend the
  *unperturbed* objective (removing perturbation variance and bias from
  their fixed point), while response parameters descend the perturbed
  objective, optionally through linearized predictions so that only the
  local response slope is being fit.

Hyperparameters and the perturbation scale are updated on the validation
objective (the latter entropy-regularized, with reparameterized noise and
log-space updates).  After every hyperparameter update the center is
re-set so the centering identity stays meaningful.

All randomness flows through named substreams of one seed; runs are
bit-reproducible and the metrics trace contains no wall-clock values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import hypernet as hn
from . import models, ops
from .models import NonFiniteLossError
from .tape import Tape

__all__ = [
    "BilevelConfig", "TrainingProblem", "MetricsRecord", "TrainState",
    "RunResult", "RunAbort", "entropy", "named_substreams",
    "make_optimizer", "stn_inner_step", "dstn_inner_step", "response_gradient",
    "hyper_step", "sigma_step", "run", "plain_train", "baseline_search",
    "hyper_gradient", "training_grad_w", "validation_grad_w", "init_state",
]

_STREAM_IDS = {
    "split": 0,
    "init": 1,
    "perturbation": 2,
    "dropout": 3,
    "batch": 4,
    "search": 5,
}


def named_substreams(seed: int, names=tuple(_STREAM_IDS)) -> dict:
    """Independent generators derived from one seed; consuming one stream
    never perturbs the others."""
    return {
        name: np.random.default_rng(
            np.random.SeedSequence(entropy=int(seed), spawn_key=(_STREAM_IDS[name],))
        )
        for name in names
    }


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------

@dataclass
class BilevelConfig:
    """Loop meta-parameters.

    ``alpha1``..``alpha3`` are the inner, hyperparameter and perturbation-
    scale learning rates; inner steps run in blocks of ``t_train`` followed
    by ``t_valid`` outer updates.  ``warmup_steps`` inner steps run first
    with perturbations active but no outer updates.

    ``linearize`` selects linearized predictions for the response update
    (the centered trainer only); ``linearize_sigma`` optionally applies
    the same treatment inside the perturbation-scale objective, which the
    update rule as written leaves unlinearized.  ``update_response`` and
    ``hyper_enabled`` exist for ablations and degeneration checks.
    """

    alpha1: float
    alpha2: float
    alpha3: float = 0.0
    t_train: int = 10
    t_valid: int = 1
    tau: float = 0.0
    warmup_steps: int = 0
    inner_optimizer: object = "sgd"
    hyper_optimizer: object = "rmsprop"
    freeze_sigma: bool = True
    seed: int = 0
    linearize: bool = True
    linearize_sigma: bool = False
    update_response: bool = True
    hyper_enabled: bool = True

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0 or self.alpha3 < 0:
            raise ValueError("learning rates must be non-negative")
        if self.t_train < 1 or self.t_valid < 1:
            raise ValueError("update intervals must be >= 1")
        if self.tau < 0:
            raise ValueError("entropy weight must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")


@dataclass
class TrainingProblem:
    """Data + model + objective bundle consumed by the loops."""

    model: models.Model
    objective: models.RegularizedObjective
    X: np.ndarray
    t: np.ndarray
    X_valid: np.ndarray
    t_valid: np.ndarray
    batch_size: int | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.X_valid = np.asarray(self.X_valid, dtype=np.float64)
        self.t = np.asarray(self.t)
        self.t_valid = np.asarray(self.t_valid)
        if self.objective.loss == "mse":
            self.t = self.t.astype(np.float64)
            self.t_valid = self.t_valid.astype(np.float64)

    @property
    def n_train(self) -> int:
        return self.X.shape[0]

    def draw_batch(self, rng: np.random.Generator):
        if self.batch_size is None or self.batch_size >= self.n_train:
            return self.X, self.t
        idx = rng.integers(0, self.n_train, size=self.batch_size)
        return self.X[idx], self.t[idx]

    @property
    def val_batch(self):
        return self.X_valid, self.t_valid


@dataclass
class MetricsRecord:
    """One line of the run trace; field order is the wire order."""

    step: int
    phase: str
    train_loss: float
    val_loss: float
    lam_raw: dict
    lam: dict
    sigma: list
    grad_norm_inner: float
    grad_norm_hyper: float | None = None
    align_cos: float | None = None
    did_hyper_step: bool = False
    did_sigma_step: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class RunAbort(RuntimeError):
    """Training hit a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict, trace: list):
        super().__init__(message)
        self.snapshot = snapshot
        self.trace = trace


@dataclass
class TrainState:
    config: BilevelConfig
    problem: TrainingProblem
    net: object
    hyper: hn.HyperparamState
    inner_opt: object
    hyper_opt: object
    rngs: dict
    inner_steps: int = 0
    hyper_steps: int = 0
    sigma_steps: int = 0


@dataclass
class RunResult:
    trace: list
    state: TrainState


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def _quiet_overflow(fn):
    """Optimizer math may legitimately overflow right before a run aborts
    on the loss finiteness check; keep numpy quiet about it."""
    import functools

    @functools.wraps(fn)
    def wrapped(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)

    return wrapped


class Sgd:
    kind = "sgd"

    def update(self, params: dict, grads: dict, lr: float) -> dict:
        return {
            k: (params[k] - lr * grads[k]) if k in grads else params[k]
            for k in params
        }

    def state(self) -> dict:
        return {}

    def load_state(self, state: dict):
        pass


class SgdMomentum:
    kind = "sgd_momentum"

    def __init__(self, beta: float = 0.9):
        self.beta = float(beta)
        self.velocity: dict = {}

    @_quiet_overflow
    def update(self, params, grads, lr):
        out = {}
        for k in params:
            if k not in grads:
                out[k] = params[k]
                continue
            v = self.velocity.get(k, np.zeros_like(params[k]))
            v = self.beta * v + grads[k]
            self.velocity[k] = v
            out[k] = params[k] - lr * v
        return out

    def state(self):
        return {"velocity": {k: v.copy() for k, v in self.velocity.items()}}

    def load_state(self, state):
        self.velocity = {k: np.asarray(v, dtype=np.float64) for k, v in state["velocity"].items()}


class RmsProp:
    kind = "rmsprop"

    def __init__(self, rho: float = 0.9, eps: float = 1e-8):
        self.rho = float(rho)
        self.eps = float(eps)
        self.sq: dict = {}

    @_quiet_overflow
    def update(self, params, grads, lr):
        out = {}
        for k in params:
            if k not in grads:
                out[k] = params[k]
                continue
            s = self.sq.get(k, np.zeros_like(params[k]))
            s = self.rho * s + (1.0 - self.rho) * grads[k] ** 2
            self.sq[k] = s
            out[k] = params[k] - lr * grads[k] / (np.sqrt(s) + self.eps)
        return out

    def state(self):
        return {"sq": {k: v.copy() for k, v in self.sq.items()}}

    def load_state(self, state):
        self.sq = {k: np.asarray(v, dtype=np.float64) for k, v in state["sq"].items()}


class Adam:
    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    @_quiet_overflow
    def update(self, params, grads, lr):
        self.t += 1
        out = {}
        for k in params:
            if k not in grads:
                out[k] = params[k]
                continue
            m = self.m.get(k, np.zeros_like(params[k]))
            v = self.v.get(k, np.zeros_like(params[k]))
            m = self.beta1 * m + (1 - self.beta1) * grads[k]
            v = self.beta2 * v + (1 - self.beta2) * grads[k] ** 2
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            out[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out

    def state(self):
        return {
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
            "t": self.t,
        }

    def load_state(self, state):
        self.m = {k: np.asarray(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float64) for k, v in state["v"].items()}
        self.t = int(state["t"])


_INNER_KINDS = ("sgd", "sgd_momentum", "rmsprop")
_HYPER_KINDS = ("rmsprop", "adam")


def make_optimizer(spec, role: str = "inner"):
    """Build an optimizer from a kind string or an options dict."""
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind")
    allowed = _INNER_KINDS if role == "inner" else _HYPER_KINDS
    if kind not in allowed:
        raise ValueError(f"{role} optimizer must be one of {allowed}, got {kind!r}")
    opts = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "sgd":
        return Sgd()
    if kind == "sgd_momentum":
        return SgdMomentum(**opts)
    if kind == "rmsprop":
        return RmsProp(**opts)
    return Adam(**opts)


# ---------------------------------------------------------------------------
# pieces
# ---------------------------------------------------------------------------

_ENTROPY_CONST = 0.5 * np.log(2.0 * np.pi * np.e)


def entropy(sigma) -> float:
    """Differential entropy of the diagonal Gaussian perturbation."""
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if np.any(sigma <= 0):
        raise ValueError("perturbation scales must be positive")
    return float(np.sum(_ENTROPY_CONST + np.log(sigma)))


def _grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g) ** 2))
    return float(np.sqrt(total))


def _sample_eps(state: TrainState) -> np.ndarray:
    return state.hyper.sigma * state.rngs["perturbation"].standard_normal(state.hyper.h)


def _sample_noise(state: TrainState, lam_domain, batch_n: int):
    rates = state.problem.objective.dropout_rates(lam_domain)
    if not rates:
        return None
    shapes = state.problem.model.dropout_site_shapes(batch_n)
    return models.sample_dropout_masks(rates, shapes, state.rngs["dropout"])


def _traced_params(tape: Tape, net, names) -> dict:
    return {name: tape.variable(net.params[name]) for name in names}


def training_grad_w(model, objective, flat_w, lam_domain, batch, noise=None,
                    n_train=None) -> np.ndarray:
    """Gradient of the training objective with respect to flat weights."""
    with Tape() as tape:
        v = tape.variable(np.asarray(flat_w, dtype=np.float64))
        weights = model.unflatten_params(v)
        loss = models.training_loss(objective, model, weights, lam_domain,
                                    batch, noise=noise, n_train=n_train)
        return tape.backward(loss)[v]


def validation_grad_w(model, flat_w, val_batch, loss: str = "mse") -> np.ndarray:
    """Gradient of the validation objective with respect to flat weights."""
    with Tape() as tape:
        v = tape.variable(np.asarray(flat_w, dtype=np.float64))
        weights = model.unflatten_params(v)
        out = models.validation_loss(model, weights, val_batch, loss=loss)
        return tape.backward(out)[v]


def _flat_training_step(model, objective, flat, lam_domain, batch, noise,
                        n_train, opt, lr):
    """One descent step on the training objective over a flat weight
    vector.  Shared verbatim by the centered base-weight update and the
    plain training loop so their float trajectories are identical."""
    with Tape() as tape:
        v = tape.variable(flat)
        weights = model.unflatten_params(v)
        loss = models.training_loss(objective, model, weights, lam_domain,
                                    batch, noise=noise, n_train=n_train)
        g = tape.backward(loss)[v]
    new = opt.update({"w0": flat}, {"w0": g}, lr)["w0"]
    return new, float(loss.value), float(np.linalg.norm(g))


# ---------------------------------------------------------------------------
# inner steps
# ---------------------------------------------------------------------------

def stn_inner_step(state: TrainState, batch) -> dict:
    """Joint update of the uncentered hypernetwork on one perturbed sample."""
    problem = state.problem
    eps = _sample_eps(state)
    lam_pert = state.hyper.lam + eps
    lam_domain = state.hyper.domain(lam_pert)
    noise = _sample_noise(state, lam_domain, ops.value_of(batch[0]).shape[0])
    with Tape() as tape:
        traced = _traced_params(tape, state.net, state.net.all_param_names)
        weights = state.net.respond(lam_pert, params=traced)
        loss = models.training_loss(problem.objective, problem.model, weights,
                                    lam_domain, batch, noise=noise,
                                    n_train=problem.n_train)
        grads = tape.backward(loss)
    gdict = {name: grads[v] for name, v in traced.items()}
    state.net.params = state.inner_opt.update(state.net.params, gdict,
                                              state.config.alpha1)
    state.inner_steps += 1
    return {"train_loss": float(loss.value), "grad_norm": _grad_norm(gdict),
            "eps": eps}


def dstn_inner_step(state: TrainState, batch) -> dict:
    """Split update for centered hypernetworks.

    Base weights descend the unperturbed objective at the center; response
    parameters descend the perturbed objective on the same batch with a
    fresh perturbation, through linearized predictions when configured.
    """
    problem = state.problem
    cfg = state.config
    net = state.net
    lam0 = state.hyper.lam0
    dom0 = state.hyper.domain(lam0)
    noise0 = _sample_noise(state, dom0, ops.value_of(batch[0]).shape[0])

    if isinstance(net, hn.CenteredHypernet):
        new_w0, loss_val, gnorm = _flat_training_step(
            problem.model, problem.objective, net.params["w0"], dom0, batch,
            noise0, problem.n_train, state.inner_opt, cfg.alpha1)
        net.params = dict(net.params, w0=new_w0)
    else:
        with Tape() as tape:
            traced = _traced_params(tape, net, net.base_param_names)
            weights = net.base_weights(params=traced)
            loss = models.training_loss(problem.objective, problem.model,
                                        weights, dom0, batch, noise=noise0,
                                        n_train=problem.n_train)
            grads = tape.backward(loss)
        gdict = {name: grads[v] for name, v in traced.items()}
        net.params = state.inner_opt.update(net.params, gdict, cfg.alpha1)
        loss_val, gnorm = float(loss.value), _grad_norm(gdict)

    eps = _sample_eps(state)  # drawn even when the response update is off
    if cfg.update_response:
        noise1 = _sample_noise(
            state, state.hyper.domain(lam0 + eps), ops.value_of(batch[0]).shape[0])
        gdict, _ = response_gradient(net, problem, state.hyper, eps, batch,
                                     linearize=cfg.linearize, noise=noise1)
        net.params = state.inner_opt.update(net.params, gdict, cfg.alpha1)

    state.inner_steps += 1
    return {"train_loss": loss_val, "grad_norm": gnorm, "eps": eps}


def response_gradient(net, problem: TrainingProblem, hyper: hn.HyperparamState,
                      eps, batch, linearize: bool = True, noise=None) -> tuple:
    """Gradient of the perturbed training objective with respect to the
    response parameters (optionally through linearized predictions).

    Returns ``(grads_by_name, loss_value)`` without touching any state.
    """
    lam0 = hyper.lam0
    lam_pert = lam0 + np.asarray(eps, dtype=np.float64)
    dom_pert = hyper.domain(lam_pert)
    x, target = batch
    with Tape() as tape:
        traced = _traced_params(tape, net, net.response_param_names)
        responded = net.respond(lam_pert, lam0, params=traced)
        if linearize:
            y = hn.predict_linearized(net, problem.model, x, eps,
                                      noise=noise, params=traced)
            loss_r = problem.objective.data_loss(y, target)
        else:
            loss_r = problem.objective.data_loss(
                models.forward(problem.model, x, responded, noise=noise),
                target)
        penalty = models.regularization_terms(
            problem.objective, problem.model, responded, dom_pert,
            problem.n_train)
        if penalty is not None:
            loss_r = ops.add(loss_r, penalty)
        grads = tape.backward(loss_r)
    gdict = {}
    for name, v in traced.items():
        g = grads.get(v)
        if g is not None:
            gdict[name] = g
    return gdict, float(loss_r.value)


# ---------------------------------------------------------------------------
# outer steps
# ---------------------------------------------------------------------------

def hyper_gradient(net, hyper: hn.HyperparamState, model, objective,
                   val_batch, eps=None) -> np.ndarray:
    """Gradient of the validation objective with respect to the raw
    hyperparameters through the response path, evaluated at the center."""
    h = hyper.h
    eps = np.zeros(h) if eps is None else np.asarray(eps, dtype=np.float64)
    with Tape() as tape:
        lam_var = tape.variable(hyper.lam)
        lam_pert = ops.add(lam_var, eps)
        if isinstance(net, hn.UncenteredHypernet):
            weights = net.respond(lam_pert)
        else:
            weights = net.respond(lam_pert, hyper.lam0)
        loss = models.validation_loss(model, weights, val_batch,
                                      loss=objective.loss)
        grads = tape.backward(loss)
        g = grads.get(lam_var)
    return np.zeros(h) if g is None else g


def hyper_step(state: TrainState, val_batch) -> dict:
    """One hyperparameter update followed by re-centering."""
    eps = _sample_eps(state)
    g = hyper_gradient(state.net, state.hyper, state.problem.model,
                       state.problem.objective, val_batch, eps=eps)
    updated = state.hyper_opt.update({"lam": state.hyper.lam}, {"lam": g},
                                     state.config.alpha2)
    state.hyper.lam = updated["lam"]
    state.hyper.lam0 = state.hyper.lam.copy()  # re-center
    state.hyper_steps += 1
    return {"grad": g, "grad_norm": float(np.linalg.norm(g))}


def sigma_step(state: TrainState, val_batch, eps_tilde=None) -> dict:
    """Entropy-regularized update of the perturbation scale in log space.

    Reparameterizes ``eps = sigma * eps_tilde`` and differentiates the
    validation objective through the response, minus ``tau`` times the
    perturbation entropy.  ``eps_tilde`` is drawn from the perturbation
    stream unless injected (tests pin it for finite-difference checks).
    """
    cfg = state.config
    problem = state.problem
    h = state.hyper.h
    if eps_tilde is None:
        eps_tilde = state.rngs["perturbation"].standard_normal(h)
    with Tape() as tape:
        rho = tape.variable(state.hyper.log_sigma)
        sigma_v = ops.exp(rho)
        eps_v = ops.mul(sigma_v, eps_tilde)
        if isinstance(state.net, hn.UncenteredHypernet):
            weights = state.net.respond(ops.add(state.hyper.lam, eps_v))
            loss = models.validation_loss(problem.model, weights, val_batch,
                                          loss=problem.objective.loss)
        elif cfg.linearize_sigma:
            x, target = val_batch
            y = hn.predict_linearized(state.net, problem.model, x, eps_v)
            loss = (models.half_mse(y, target)
                    if problem.objective.loss == "mse"
                    else models.cross_entropy(y, target))
        else:
            lam_pert = ops.add(state.hyper.lam0, eps_v)
            weights = state.net.respond(lam_pert, state.hyper.lam0)
            loss = models.validation_loss(problem.model, weights, val_batch,
                                          loss=problem.objective.loss)
        ent = ops.add(ops.sum(rho), h * _ENTROPY_CONST)
        obj = ops.sub(loss, ops.mul(cfg.tau, ent))
        grads = tape.backward(obj)
        g = grads.get(rho)
    g = np.zeros(h) if g is None else g
    state.hyper.log_sigma = state.hyper.log_sigma - cfg.alpha3 * g
    state.sigma_steps += 1
    return {"grad": g}


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _center_flat_weights(state: TrainState) -> np.ndarray:
    net = state.net
    if isinstance(net, hn.UncenteredHypernet):
        return ops.value_of(net.respond_flat(state.hyper.lam))
    return state.problem.model.flatten_params(net.base_weights())


def _center_val_loss(state: TrainState) -> float:
    flat = _center_flat_weights(state)
    weights = state.problem.model.unflatten_params(flat)
    return float(ops.value_of(models.validation_loss(
        state.problem.model, weights, state.problem.val_batch,
        loss=state.problem.objective.loss)))


def _alignment(state: TrainState, batch) -> float | None:
    from .analysis import gradient_alignment

    flat = _center_flat_weights(state)
    g_t = training_grad_w(state.problem.model, state.problem.objective, flat,
                          state.hyper.domain(state.hyper.lam0), batch,
                          n_train=state.problem.n_train)
    g_v = validation_grad_w(state.problem.model, flat,
                            state.problem.val_batch,
                            loss=state.problem.objective.loss)
    if np.linalg.norm(g_t) == 0.0 or np.linalg.norm(g_v) == 0.0:
        return None
    return gradient_alignment(g_t, g_v)


def init_state(config: BilevelConfig, problem: TrainingProblem,
               hypernet_kind: str, hyper_init: hn.HyperparamState,
               structured: bool = False) -> TrainState:
    """Build a fresh training state with seeded substreams."""
    rngs = named_substreams(config.seed)
    net = hn.build_hypernet(hypernet_kind, problem.model, hyper_init.h,
                            rngs["init"], structured=structured)
    hyper = hn.HyperparamState(
        hyper_init.lam.copy(), hyper_init.lam.copy(),
        hyper_init.log_sigma.copy(), hyper_init.transforms, hyper_init.names)
    linearize = config.linearize and hypernet_kind == "dstn"
    cfg = BilevelConfig(**{**asdict(config), "linearize": linearize})
    return TrainState(
        config=cfg, problem=problem, net=net, hyper=hyper,
        inner_opt=make_optimizer(cfg.inner_optimizer, "inner"),
        hyper_opt=make_optimizer(cfg.hyper_optimizer, "hyper"),
        rngs=rngs,
    )


def run(config: BilevelConfig, problem: TrainingProblem, hypernet_kind: str,
        hyper_init: hn.HyperparamState, steps: int,
        structured: bool = False, state: TrainState | None = None) -> RunResult:
    """Alternate inner and outer updates for ``steps`` post-warmup inner
    steps; returns the per-step metrics trace and the final state.

    Outer updates fire after every complete block of ``t_train`` inner
    steps once warm-up has finished.  A non-finite loss aborts with a
    diagnostic snapshot attached.
    """
    if hypernet_kind not in ("stn", "centered", "dstn"):
        raise ValueError(f"unknown hypernet kind {hypernet_kind!r}")
    if state is None:
        state = init_state(config, problem, hypernet_kind, hyper_init, structured)
    cfg = state.config
    inner = stn_inner_step if hypernet_kind == "stn" else dstn_inner_step
    trace: list[MetricsRecord] = []

    def snapshot(exc: NonFiniteLossError) -> dict:
        return {
            "term": exc.term,
            "value": repr(exc.value),
            "inner_steps": state.inner_steps,
            "hyper_steps": state.hyper_steps,
            "lam_raw": state.hyper.lam.tolist(),
            "sigma": state.hyper.sigma.tolist(),
        }

    def emit(phase: str, info: dict) -> MetricsRecord:
        names = state.hyper.names
        dom = state.hyper.domain()
        rec = MetricsRecord(
            step=state.inner_steps,
            phase=phase,
            train_loss=info["train_loss"],
            val_loss=_center_val_loss(state),
            lam_raw={n: float(v) for n, v in zip(names, state.hyper.lam)},
            lam={n: float(v) for n, v in zip(names, dom)},
            sigma=[float(s) for s in state.hyper.sigma],
            grad_norm_inner=info["grad_norm"],
        )
        trace.append(rec)
        return rec

    try:
        # a restored state resumes mid-run: only the unfinished warm-up runs
        warmup_remaining = max(0, cfg.warmup_steps - state.inner_steps)
        for _ in range(warmup_remaining):
            batch = problem.draw_batch(state.rngs["batch"])
            emit("warmup", inner(state, batch))
        remaining = int(steps)
        while remaining > 0:
            block = min(cfg.t_train, remaining)
            last_batch = None
            for _ in range(block):
                last_batch = problem.draw_batch(state.rngs["batch"])
                emit("train", inner(state, last_batch))
            remaining -= block
            if block < cfg.t_train or not cfg.hyper_enabled:
                continue
            rec = trace[-1]
            align = _alignment(state, last_batch)
            for _ in range(cfg.t_valid):
                hinfo = hyper_step(state, problem.val_batch)
                if not cfg.freeze_sigma:
                    sigma_step(state, problem.val_batch)
                    rec.did_sigma_step = True
            rec.did_hyper_step = True
            rec.grad_norm_hyper = hinfo["grad_norm"]
            rec.align_cos = align
            # outer updates moved the center: refresh the reported values
            rec.val_loss = _center_val_loss(state)
            rec.lam_raw = {n: float(v) for n, v in zip(state.hyper.names, state.hyper.lam)}
            rec.lam = {n: float(v) for n, v in zip(state.hyper.names, state.hyper.domain())}
            rec.sigma = [float(s) for s in state.hyper.sigma]
    except NonFiniteLossError as exc:
        raise RunAbort(str(exc), snapshot(exc), trace) from exc
    return RunResult(trace=trace, state=state)


# ---------------------------------------------------------------------------
# plain training and baseline searches
# ---------------------------------------------------------------------------

def plain_train(problem: TrainingProblem, lam_domain, steps: int, lr: float,
                seed: int, optimizer="sgd") -> dict:
    """Ordinary training at fixed (domain-space) hyperparameters.

    Uses the same named substreams as the bilevel loop, so with matching
    seeds the batch sequence and the weight initialization coincide with a
    centered run's base path.
    """
    rngs = named_substreams(seed)
    flat = problem.model.flatten_params(problem.model.init_params(rngs["init"]))
    opt = make_optimizer(optimizer, "inner")
    lam_domain = np.asarray(lam_domain, dtype=np.float64).reshape(-1)
    rates = problem.objective.dropout_rates(lam_domain)
    losses = []
    for _ in range(int(steps)):
        batch = problem.draw_batch(rngs["batch"])
        noise = None
        if rates:
            shapes = problem.model.dropout_site_shapes(ops.value_of(batch[0]).shape[0])
            noise = models.sample_dropout_masks(rates, shapes, rngs["dropout"])
        flat, loss_val, _ = _flat_training_step(
            problem.model, problem.objective, flat, lam_domain, batch, noise,
            problem.n_train, opt, lr)
        losses.append(loss_val)
    weights = problem.model.unflatten_params(flat)
    val = float(ops.value_of(models.validation_loss(
        problem.model, weights, problem.val_batch,
        loss=problem.objective.loss)))
    return {"weights_flat": flat, "val_loss": val, "train_losses": losses}


def _grid_candidates(space, budget: int) -> np.ndarray:
    h = len(space)
    per_dim = max(1, int(np.floor(budget ** (1.0 / h))))
    axes = [np.linspace(lo, hi, per_dim) if per_dim > 1 else np.array([(lo + hi) / 2.0])
            for lo, hi in space]
    mesh = np.meshgrid(*axes, indexing="ij")
    cands = np.stack([m.reshape(-1) for m in mesh], axis=1)
    return cands[:budget]


def baseline_search(kind: str, space, budget: int, problem: TrainingProblem,
                    steps: int, lr: float, seed: int = 0,
                    optimizer="sgd") -> tuple:
    """Grid or random search over fixed hyperparameters (domain units).

    Every candidate trains with the same seed (paired comparisons); the
    candidate with the lowest final validation loss wins, ties breaking
    toward the lowest index.
    """
    space = [(float(lo), float(hi)) for lo, hi in space]
    if kind == "grid":
        candidates = _grid_candidates(space, budget)
    elif kind == "random":
        rng = named_substreams(seed, ("search",))["search"]
        lo = np.array([s[0] for s in space])
        hi = np.array([s[1] for s in space])
        candidates = lo + (hi - lo) * rng.random((budget, len(space)))
    else:
        raise ValueError(f"unknown search kind {kind!r}")
    trace = []
    vals = []
    for cand in candidates:
        result = plain_train(problem, cand, steps, lr, seed, optimizer)
        trace.append({"lambda": cand.tolist(), "val_loss": result["val_loss"]})
        vals.append(result["val_loss"])
    best = int(np.argmin(vals))
    return np.asarray(candidates[best]), trace
