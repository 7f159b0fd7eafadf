"""Experiment configuration: schema, validation, and problem assembly.

Configs are flat JSON documents with nested sections.  Parsing normalizes
a user dict by filling defaults; a normalized dict re-parses to itself
(round-trip fixed point).  Validation reports every problem at once.

Hyperparameter initial values are declared in DOMAIN units (a dropout
rate of 0.05, a weight decay of 1.0) and converted onto the unconstrained
axis through the declared transform's inverse.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import bilevel, models
from ..hypernet import HyperparamState, TransformSpec, inverse_transform
from ..oracles import RidgeProblem
from .datasets import load_dataset

__all__ = ["ConfigError", "ExperimentConfig", "build_problem", "oracle_from_config"]

_MODEL_KINDS = ("linear", "mlp", "linear_network")
_HYPERNET_KINDS = ("stn", "centered", "dstn")
_TRANSFORM_KINDS = ("exp", "sigmoid_range", "softplus", "identity")
_REG_KINDS = ("weight_decay", "input_dropout", "activation_dropout",
              "jacobian_norm", "none")

ENTROPY_WEIGHT_PRESETS = (1e-2, 1e-3, 1e-4)


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` lists every issue."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"- {p}" for p in self.problems))


_DEFAULTS = {
    "split_ratio": 0.8,
    "normalize": True,
    "batch_size": None,
    "steps": 1000,
    "seed": 0,
    "out_dir": "runs/run",
}

_BILEVEL_DEFAULTS = {
    "alpha1": 0.05,
    "alpha2": 0.01,
    "alpha3": 0.001,
    "t_train": 10,
    "t_valid": 1,
    "tau": 0.001,
    "warmup_steps": 100,
    "inner_optimizer": {"kind": "sgd"},
    "hyper_optimizer": {"kind": "rmsprop"},
    "freeze_sigma": True,
    "linearize": True,
    "linearize_sigma": False,
    "update_response": True,
    "hyper_enabled": True,
    "sigma_init": 1.0,
}


@dataclass
class ExperimentConfig:
    """Normalized configuration; ``raw`` is the canonical dict form."""

    raw: dict

    # -- construction -------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = copy.deepcopy(data)
        problems = []
        if not isinstance(cfg, dict):
            raise ConfigError(["config must be a JSON object"])

        for key, default in _DEFAULTS.items():
            cfg.setdefault(key, default)
        bl = cfg.setdefault("bilevel", {})
        for key, default in _BILEVEL_DEFAULTS.items():
            bl.setdefault(key, copy.deepcopy(default))
        for opt_key in ("inner_optimizer", "hyper_optimizer"):
            if isinstance(bl.get(opt_key), str):
                bl[opt_key] = {"kind": bl[opt_key]}
        hnet = cfg.setdefault("hypernet", {})
        if isinstance(hnet, str):
            hnet = {"kind": hnet}
            cfg["hypernet"] = hnet
        hnet.setdefault("kind", "dstn")
        hnet.setdefault("structured", False)

        problems.extend(cls._validate(cfg))
        if problems:
            raise ConfigError(problems)
        return cls(raw=cfg)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def save(self, path):
        Path(path).write_text(json.dumps(self.raw, indent=2, sort_keys=False) + "\n")

    # -- validation -----------------------------------------------------------
    @staticmethod
    def _validate(cfg: dict) -> list:
        problems = []

        def need(section, key, kinds=None):
            value = section.get(key)
            if value is None:
                problems.append(f"missing required field {key!r}")
                return None
            if kinds and value not in kinds:
                problems.append(f"{key!r} must be one of {kinds}, got {value!r}")
            return value

        prob = cfg.get("problem")
        if not isinstance(prob, dict):
            problems.append("'problem' section (dataset/model/objective) is required")
            prob = {}
        dataset = prob.get("dataset")
        if not isinstance(dataset, dict) or "kind" not in dataset:
            problems.append("problem.dataset must carry a 'kind'")
        elif dataset["kind"] == "csv" and "path" not in dataset:
            problems.append("csv dataset needs a 'path'")
        model = prob.get("model")
        if not isinstance(model, dict):
            problems.append("problem.model is required")
        elif model.get("kind") not in _MODEL_KINDS:
            problems.append(
                f"model.kind must be one of {_MODEL_KINDS}, got {model.get('kind')!r}")
        objective = prob.get("objective", {})
        loss = objective.get("loss", "mse")
        if loss not in ("mse", "cross_entropy"):
            problems.append(f"objective.loss must be mse|cross_entropy, got {loss!r}")
        if objective.get("penalty_scaling", "per_n") not in ("per_n", "unscaled"):
            problems.append("objective.penalty_scaling must be per_n|unscaled")

        hnet = cfg.get("hypernet", {})
        if hnet.get("kind") not in _HYPERNET_KINDS:
            problems.append(
                f"hypernet.kind must be one of {_HYPERNET_KINDS}, got {hnet.get('kind')!r}")
        if hnet.get("structured") and hnet.get("kind") == "stn":
            problems.append("structured hypernetworks require a centered kind")

        hypers = cfg.get("hyperparams")
        if not isinstance(hypers, list) or not hypers:
            problems.append("at least one hyperparameter declaration is required")
            hypers = []
        if any(not isinstance(h, dict) for h in hypers):
            problems.append("each hyperparameter declaration must be an object")
            hypers = [h for h in hypers if isinstance(h, dict)]
        names = [h.get("name") for h in hypers]
        if len(set(names)) != len(names):
            problems.append("hyperparameter names must be unique")
        for i, h in enumerate(hypers):
            label = h.get("name", f"#{i}")
            tf = h.get("transform", {})
            if isinstance(tf, str):
                tf = {"kind": tf}
                h["transform"] = tf
            if tf.get("kind") not in _TRANSFORM_KINDS:
                problems.append(f"hyperparam {label}: unknown transform {tf.get('kind')!r}")
                continue
            spec = _transform_spec(tf)
            init = h.get("init")
            if init is None:
                problems.append(f"hyperparam {label}: missing init (domain units)")
            else:
                try:
                    inverse_transform(spec, float(init))
                except ValueError as exc:
                    problems.append(f"hyperparam {label}: init {init} not in transform image ({exc})")
            bounds = h.get("bounds")
            if bounds is not None:
                if len(bounds) != 2 or not bounds[0] < bounds[1]:
                    problems.append(f"hyperparam {label}: bounds must be [lo, hi] with lo < hi")
            reg = h.get("regularizer", {})
            if isinstance(reg, str):
                reg = {"kind": reg}
                h["regularizer"] = reg
            if reg.get("kind", "none") not in _REG_KINDS:
                problems.append(f"hyperparam {label}: unknown regularizer {reg.get('kind')!r}")
            if reg.get("kind") == "activation_dropout" and "site" not in reg:
                problems.append(f"hyperparam {label}: activation_dropout needs a site")

        ratio = cfg.get("split_ratio")
        if not isinstance(ratio, (int, float)) or not 0.0 < float(ratio) < 1.0:
            problems.append(f"split_ratio must lie in (0, 1), got {ratio!r}")
        steps = cfg.get("steps")
        if not isinstance(steps, int) or steps < 0:
            problems.append(f"steps must be a non-negative integer, got {steps!r}")
        batch = cfg.get("batch_size")
        if batch is not None and (not isinstance(batch, int) or batch < 1):
            problems.append(f"batch_size must be a positive integer or null, got {batch!r}")

        bl = cfg.get("bilevel", {})
        for key in ("alpha1", "alpha2"):
            val = bl.get(key)
            if not isinstance(val, (int, float)) or val <= 0:
                problems.append(f"bilevel.{key} must be > 0, got {val!r}")
        if not isinstance(bl.get("alpha3"), (int, float)) or bl.get("alpha3") < 0:
            problems.append("bilevel.alpha3 must be >= 0")
        for key in ("t_train", "t_valid"):
            val = bl.get(key)
            if not isinstance(val, int) or val < 1:
                problems.append(f"bilevel.{key} must be an integer >= 1, got {val!r}")
        if bl.get("tau", 0) < 0:
            problems.append("bilevel.tau must be >= 0")
        if not isinstance(bl.get("warmup_steps"), int) or bl.get("warmup_steps") < 0:
            problems.append("bilevel.warmup_steps must be an integer >= 0")
        if bl.get("sigma_init", 1.0) <= 0:
            problems.append("bilevel.sigma_init must be > 0")
        for role, key, allowed in (
            ("inner", "inner_optimizer", ("sgd", "sgd_momentum", "rmsprop")),
            ("hyper", "hyper_optimizer", ("rmsprop", "adam")),
        ):
            kind = (bl.get(key) or {}).get("kind")
            if kind not in allowed:
                problems.append(f"bilevel.{key}.kind must be one of {allowed}, got {kind!r}")
        return problems

    # -- views ---------------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def steps(self) -> int:
        return int(self.raw["steps"])

    @property
    def out_dir(self) -> str:
        return self.raw["out_dir"]

    @property
    def hypernet_kind(self) -> str:
        return self.raw["hypernet"]["kind"]

    @property
    def structured(self) -> bool:
        return bool(self.raw["hypernet"]["structured"])

    def bilevel_config(self) -> bilevel.BilevelConfig:
        bl = self.raw["bilevel"]
        return bilevel.BilevelConfig(
            alpha1=float(bl["alpha1"]),
            alpha2=float(bl["alpha2"]),
            alpha3=float(bl["alpha3"]),
            t_train=int(bl["t_train"]),
            t_valid=int(bl["t_valid"]),
            tau=float(bl["tau"]),
            warmup_steps=int(bl["warmup_steps"]),
            inner_optimizer=bl["inner_optimizer"],
            hyper_optimizer=bl["hyper_optimizer"],
            freeze_sigma=bool(bl["freeze_sigma"]),
            seed=self.seed,
            linearize=bool(bl["linearize"]),
            linearize_sigma=bool(bl["linearize_sigma"]),
            update_response=bool(bl["update_response"]),
            hyper_enabled=bool(bl["hyper_enabled"]),
        )

    def transforms(self) -> tuple:
        return tuple(_transform_spec(h["transform"]) for h in self.raw["hyperparams"])

    def hyper_names(self) -> tuple:
        return tuple(h["name"] for h in self.raw["hyperparams"])

    def hyper_state(self) -> HyperparamState:
        inits = [float(h["init"]) for h in self.raw["hyperparams"]]
        return HyperparamState.from_domain_init(
            self.transforms(), inits,
            sigma=float(self.raw["bilevel"]["sigma_init"]),
            names=self.hyper_names(),
        )

    def search_space(self) -> list:
        space = []
        for h in self.raw["hyperparams"]:
            bounds = h.get("bounds")
            if bounds is None:
                raise ConfigError([f"hyperparam {h['name']}: search bounds required"])
            space.append((float(bounds[0]), float(bounds[1])))
        return space


def _transform_spec(tf: dict) -> TransformSpec:
    clamp = tf.get("clamp")
    return TransformSpec(
        kind=tf["kind"],
        lo=float(tf.get("lo", 0.0)),
        hi=float(tf.get("hi", 1.0)),
        clamp=tuple(clamp) if clamp else None,
    )


def _build_model(model_spec: dict, in_dim: int, objective_loss: str,
                 n_classes: int | None) -> models.Model:
    kind = model_spec["kind"]
    out_dim = int(model_spec.get("out_dim", n_classes if n_classes else 1))
    if kind == "linear":
        return models.linear_model(in_dim, out_dim=out_dim,
                                   bias=bool(model_spec.get("bias", False)))
    hidden = [int(d) for d in model_spec.get("hidden", [])]
    dims = [in_dim, *hidden, out_dim]
    if kind == "mlp":
        return models.mlp(dims, activation=model_spec.get("activation", "relu"),
                          bias=bool(model_spec.get("bias", True)))
    return models.linear_network(dims, bias=bool(model_spec.get("bias", False)))


def _build_objective(cfg: ExperimentConfig) -> models.RegularizedObjective:
    obj_spec = cfg.raw["problem"].get("objective", {})
    regs = []
    for idx, h in enumerate(cfg.raw["hyperparams"]):
        reg = h.get("regularizer", {"kind": "none"})
        kind = reg.get("kind", "none")
        if kind == "none":
            continue
        regs.append(models.RegBinding(kind, idx, site=reg.get("site")))
    return models.RegularizedObjective(
        loss=obj_spec.get("loss", "mse"),
        regularizers=tuple(regs),
        penalty_scaling=obj_spec.get("penalty_scaling", "per_n"),
    )


def build_problem(cfg: ExperimentConfig) -> bilevel.TrainingProblem:
    """Load/generate data and assemble the training problem.

    Data generation and splitting consume the 'split' substream of the
    config seed, so the same config always sees the same rows.
    """
    rng = bilevel.named_substreams(cfg.seed, ("split",))["split"]
    objective = _build_objective(cfg)
    classification = objective.loss == "cross_entropy"
    train, valid = load_dataset(
        cfg.raw["problem"]["dataset"], float(cfg.raw["split_ratio"]),
        bool(cfg.raw["normalize"]), rng,
        normalize_targets=not classification,
    )
    X, t = train
    n_classes = int(np.max(t)) + 1 if classification else None
    model = _build_model(cfg.raw["problem"]["model"], X.shape[1],
                         objective.loss, n_classes)
    if classification:
        t = t.astype(int)
        valid = (valid[0], valid[1].astype(int))
    batch = cfg.raw["batch_size"]
    return bilevel.TrainingProblem(
        model=model, objective=objective, X=X, t=t,
        X_valid=valid[0], t_valid=valid[1],
        batch_size=int(batch) if batch else None,
    )


def oracle_from_config(cfg: ExperimentConfig,
                       problem: bilevel.TrainingProblem) -> RidgeProblem:
    """Exact-oracle view of a run; only single-hyperparameter weight-decay
    problems on a bias-free linear model have one."""
    issues = []
    model_kind = cfg.raw["problem"]["model"]["kind"]
    if model_kind != "linear":
        issues.append(f"model kind {model_kind!r} has no closed-form oracle")
    hypers = cfg.raw["hyperparams"]
    if len(hypers) != 1 or hypers[0].get("regularizer", {}).get("kind") != "weight_decay":
        issues.append("oracle requires exactly one weight-decay hyperparameter")
    tf_kind = hypers[0]["transform"]["kind"] if hypers else "?"
    if tf_kind not in ("exp", "identity"):
        issues.append(f"oracle requires an exp or identity transform, got {tf_kind!r}")
    if issues:
        raise ConfigError(issues)
    scaling = cfg.raw["problem"].get("objective", {}).get("penalty_scaling", "per_n")
    return RidgeProblem(
        X=problem.X, t=problem.t, X_valid=problem.X_valid,
        t_valid=problem.t_valid, penalty_scaling=scaling,
        lambda_transform=tf_kind,
    )
