"""Experiment orchestration: runs, metrics persistence, checkpoints,
oracle comparison reports and plot-ready series.

Metrics go to ``metrics.jsonl`` (one record per line, append-only, each
line independently parseable).  The records hold no wall-clock values, so
a rerun with the same config and seed reproduces the file byte for byte;
timing lives in ``summary.json`` instead.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .. import bilevel, hypernet as hn
from ..oracles import bilevel_outer_loss, bilevel_solve, ridge_br_jacobian
from .config import ConfigError, ExperimentConfig, build_problem, oracle_from_config

__all__ = [
    "CHECKPOINT_FORMAT_VERSION", "run_experiment", "load_run",
    "save_checkpoint", "restore_state", "compare_with_oracle",
    "write_plotdata", "analyze_run", "sweep_entropy_weights",
]

CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# serialization helpers
# ---------------------------------------------------------------------------

def _arr(x) -> list:
    return np.asarray(x).tolist()


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _metrics_line(record: bilevel.MetricsRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=False, separators=(",", ":"))


def save_checkpoint(path, state: bilevel.TrainState, cfg: ExperimentConfig):
    """Everything needed to resume bit-exactly: parameters, hyperparameter
    state, optimizer moments, RNG substream states, and step counters."""
    net = state.net
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "hypernet": {
            "kind": cfg.hypernet_kind,
            "structured": cfg.structured,
            "params": {k: _arr(v) for k, v in net.params.items()},
        },
        "hyper_state": {
            "lam": _arr(state.hyper.lam),
            "lam0": _arr(state.hyper.lam0),
            "log_sigma": _arr(state.hyper.log_sigma),
            "names": list(state.hyper.names),
        },
        "optimizers": {
            "inner": {"kind": state.inner_opt.kind, "state": _opt_state(state.inner_opt)},
            "hyper": {"kind": state.hyper_opt.kind, "state": _opt_state(state.hyper_opt)},
        },
        "rng": {name: _rng_state(rng) for name, rng in state.rngs.items()},
        "counters": {
            "inner_steps": state.inner_steps,
            "hyper_steps": state.hyper_steps,
            "sigma_steps": state.sigma_steps,
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=False) + "\n")


def _opt_state(opt) -> dict:
    state = opt.state()
    out = {}
    for key, value in state.items():
        if isinstance(value, dict):
            out[key] = {k: _arr(v) for k, v in value.items()}
        else:
            out[key] = value
    return out


def _load_opt_state(opt, payload: dict):
    state = {}
    for key, value in payload.items():
        if isinstance(value, dict):
            state[key] = {k: np.asarray(v, dtype=np.float64) for k, v in value.items()}
        else:
            state[key] = value
    if state:
        opt.load_state(state)


def restore_state(checkpoint: dict, cfg: ExperimentConfig,
                  problem: bilevel.TrainingProblem) -> bilevel.TrainState:
    """Rebuild a TrainState from a checkpoint payload."""
    if checkpoint.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format {checkpoint.get('format_version')!r}")
    state = bilevel.init_state(cfg.bilevel_config(), problem,
                               cfg.hypernet_kind, cfg.hyper_state(),
                               structured=cfg.structured)
    state.net.params = {
        k: np.asarray(v, dtype=np.float64)
        for k, v in checkpoint["hypernet"]["params"].items()
    }
    hs = checkpoint["hyper_state"]
    state.hyper.lam = np.asarray(hs["lam"], dtype=np.float64)
    state.hyper.lam0 = np.asarray(hs["lam0"], dtype=np.float64)
    state.hyper.log_sigma = np.asarray(hs["log_sigma"], dtype=np.float64)
    _load_opt_state(state.inner_opt, checkpoint["optimizers"]["inner"]["state"])
    _load_opt_state(state.hyper_opt, checkpoint["optimizers"]["hyper"]["state"])
    for name, rng_state in checkpoint["rng"].items():
        state.rngs[name].bit_generator.state = rng_state
    counters = checkpoint["counters"]
    state.inner_steps = int(counters["inner_steps"])
    state.hyper_steps = int(counters["hyper_steps"])
    state.sigma_steps = int(counters["sigma_steps"])
    return state


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Execute a configured run; writes metrics.jsonl, summary.json,
    config.json and checkpoint.json into the output directory."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    started = time.monotonic()
    result = bilevel.run(
        cfg.bilevel_config(), problem, cfg.hypernet_kind, cfg.hyper_state(),
        steps=cfg.steps, structured=cfg.structured,
    )
    elapsed = time.monotonic() - started

    with (out / "metrics.jsonl").open("w") as fh:
        for record in result.trace:
            fh.write(_metrics_line(record) + "\n")

    state = result.state
    best_val, best_step = np.inf, None
    for record in result.trace:
        if record.val_loss < best_val:
            best_val, best_step = record.val_loss, record.step
    names = state.hyper.names
    summary = {
        "steps": state.inner_steps,
        "hyper_steps": state.hyper_steps,
        "final_val_loss": result.trace[-1].val_loss if result.trace else None,
        "best_val_loss": None if best_step is None else best_val,
        "best_val_step": best_step,
        "lambda_raw": {n: float(v) for n, v in zip(names, state.hyper.lam)},
        "lambda": {n: float(v) for n, v in zip(names, state.hyper.domain())},
        "sigma": [float(s) for s in state.hyper.sigma],
        "wall_time_seconds": elapsed,
        "records": len(result.trace),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    cfg.save(out / "config.json")
    save_checkpoint(out / "checkpoint.json", state, cfg)
    return summary


def load_run(run_dir) -> dict:
    """Read back a run directory: config, summary, checkpoint, metrics."""
    run_dir = Path(run_dir)
    out = {"dir": run_dir}
    out["config"] = ExperimentConfig.from_file(run_dir / "config.json")
    out["summary"] = json.loads((run_dir / "summary.json").read_text())
    out["checkpoint"] = json.loads((run_dir / "checkpoint.json").read_text())
    with (run_dir / "metrics.jsonl").open() as fh:
        out["metrics"] = [json.loads(line) for line in fh if line.strip()]
    return out


def sweep_entropy_weights(cfg: ExperimentConfig, out_dir=None,
                          weights=None) -> dict:
    """Preset sweep over the entropy weight (1e-2, 1e-3, 1e-4 by default):
    one run per value, best validation loss wins."""
    from .config import ENTROPY_WEIGHT_PRESETS

    weights = list(ENTROPY_WEIGHT_PRESETS if weights is None else weights)
    base = Path(out_dir if out_dir is not None else cfg.out_dir)
    results = []
    for tau in weights:
        cfg_dict = cfg.to_dict()
        cfg_dict["bilevel"]["tau"] = float(tau)
        cfg_dict["out_dir"] = str(base / f"tau_{tau:g}")
        sub_cfg = ExperimentConfig.from_dict(cfg_dict)
        summary = run_experiment(sub_cfg)
        results.append({"tau": float(tau),
                        "best_val_loss": summary["best_val_loss"],
                        "out_dir": cfg_dict["out_dir"]})
    best = min(results, key=lambda r: r["best_val_loss"])
    report = {"sweep": results, "best": best}
    base.mkdir(parents=True, exist_ok=True)
    (base / "entropy_sweep.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


# ---------------------------------------------------------------------------
# oracle comparison
# ---------------------------------------------------------------------------

def _raw_bracket(cfg: ExperimentConfig) -> tuple:
    (h,) = cfg.raw["hyperparams"]
    bounds = h.get("bounds")
    if bounds is None:
        raise ConfigError([f"hyperparam {h['name']}: bounds required for oracle solve"])
    spec = cfg.transforms()[0]
    from ..hypernet import inverse_transform
    return (inverse_transform(spec, float(bounds[0])),
            inverse_transform(spec, float(bounds[1])))


def compare_with_oracle(run_dir, oracle_cfg: ExperimentConfig | None = None) -> dict:
    """Score a finished run against the exact bilevel solution.

    Reports the raw-coordinate distance of the final hyperparameter to the
    optimum, the relative validation-loss gap, the relative error of the
    learned response slope against the analytic one, and the per-step
    distance series for plotting.
    """
    run = load_run(run_dir)
    cfg = oracle_cfg if oracle_cfg is not None else run["config"]
    problem = build_problem(cfg)
    oracle = oracle_from_config(cfg, problem)

    lam_star_raw = bilevel_solve(oracle, _raw_bracket(cfg))
    val_star = bilevel_outer_loss(oracle, lam_star_raw)

    name = cfg.hyper_names()[0]
    lam_final_raw = run["summary"]["lambda_raw"][name]
    val_final = run["summary"]["final_val_loss"]

    # learned response slope, raw coordinates
    state = restore_state(run["checkpoint"], cfg, problem)
    theta_learned = hn.materialize_theta(state.net, state.hyper.lam0).reshape(-1)
    lam_dom_final = oracle.domain_of_raw(lam_final_raw)
    theta_star = ridge_br_jacobian(oracle, lam_dom_final).reshape(-1)
    theta_norm = np.linalg.norm(theta_star)
    theta_err = (np.linalg.norm(theta_learned - theta_star) / theta_norm
                 if theta_norm > 0 else None)

    trajectory = [
        [rec["step"], abs(rec["lam_raw"][name] - lam_star_raw)]
        for rec in run["metrics"]
    ]
    report = {
        "lambda_star_raw": lam_star_raw,
        "lambda_final_raw": lam_final_raw,
        "lambda_abs_error_raw": abs(lam_final_raw - lam_star_raw),
        "val_loss_star": val_star,
        "val_loss_final": val_final,
        "val_loss_rel_gap": abs(val_final - val_star) / abs(val_star)
        if val_star else None,
        "theta_rel_error": theta_err,
        "trajectory_abs_lambda_error": trajectory,
    }
    return report


# ---------------------------------------------------------------------------
# plot-ready series
# ---------------------------------------------------------------------------

def _series_value(record: dict, name: str):
    if name == "best_val_loss":
        raise KeyError("derived series handled by caller")
    if "." in name:
        head, tail = name.split(".", 1)
        container = record.get(head)
        if isinstance(container, dict):
            return container.get(tail)
        if isinstance(container, list):
            return container[int(tail)]
        return None
    return record.get(name)


def write_plotdata(run_dir, series_names, out_path) -> dict:
    """Two-column (step, value) text files, one per requested series.

    A single series writes exactly to ``out_path``; several series write
    to ``<stem>_<series><suffix>`` next to it.  The derived series
    ``best_val_loss`` is the running minimum of ``val_loss``.
    """
    run = load_run(run_dir)
    out_path = Path(out_path)
    written = {}
    for series in series_names:
        if len(series_names) == 1:
            target = out_path
        else:
            safe = series.replace(".", "_")
            target = out_path.with_name(f"{out_path.stem}_{safe}{out_path.suffix}")
        lines = []
        best = np.inf
        for rec in run["metrics"]:
            if series == "best_val_loss":
                best = min(best, rec["val_loss"])
                value = best
            else:
                value = _series_value(rec, series)
            if value is None:
                continue
            lines.append(f"{rec['step']} {value}")
        if not lines:
            raise KeyError(f"series {series!r} produced no values")
        target.write_text("\n".join(lines) + "\n")
        written[series] = str(target)
    return written


# ---------------------------------------------------------------------------
# analysis reports
# ---------------------------------------------------------------------------

def analyze_run(run_dir, what: str) -> dict:
    """Diagnostics over a finished run: 'conditioning', 'alignment' or
    'spike' (see the analysis module for the quantities)."""
    from .. import analysis, ops
    from ..bilevel import (hyper_gradient, stn_inner_step, training_grad_w,
                           validation_grad_w, init_state)

    run = load_run(run_dir)
    cfg = run["config"]
    problem = build_problem(cfg)

    if what == "alignment":
        points = [
            [rec["step"], rec["align_cos"]]
            for rec in run["metrics"] if rec.get("align_cos") is not None
        ]
        return {
            "what": "alignment",
            "series": points,
            "mean": float(np.mean([p[1] for p in points])) if points else None,
        }

    if what == "conditioning":
        model_kind = cfg.raw["problem"]["model"]["kind"]
        if model_kind != "linear":
            raise ConfigError(
                [f"conditioning analysis needs a linear model, got {model_kind!r}"])
        summary = run["summary"]
        lam_raw = np.array([summary["lambda_raw"][n] for n in cfg.hyper_names()])
        sigma = np.array(summary["sigma"])
        G_w = analysis.model_gauss_newton(problem.X)
        uncentered = analysis.conditioning_report(lam_raw, sigma, G_w)
        centered = analysis.conditioning_report(np.zeros_like(lam_raw), sigma, G_w)
        return {
            "what": "conditioning",
            "uncentered": uncentered.to_dict(),
            "centered": centered.to_dict(),
        }

    if what == "spike":
        # one-step construction from a fresh uncentered state on this problem
        state = init_state(cfg.bilevel_config(), problem, "stn",
                           cfg.hyper_state())
        alpha = state.config.alpha1
        phi_before = state.net.params["Phi"].copy()
        phi0_before = state.net.params["phi0"].copy()
        batch = problem.draw_batch(state.rngs["batch"])
        info = stn_inner_step(state, batch)
        lam_sampled = state.hyper.lam + info["eps"]
        w_before = phi_before @ lam_sampled + phi0_before
        g_t = training_grad_w(problem.model, problem.objective, w_before,
                              state.hyper.domain(lam_sampled), batch,
                              n_train=problem.n_train)
        computed = hyper_gradient(state.net, state.hyper, problem.model,
                                  problem.objective, problem.val_batch)
        w_after = ops.value_of(state.net.respond_flat(state.hyper.lam))
        g_v = validation_grad_w(problem.model, w_after, problem.val_batch,
                                loss=problem.objective.loss)
        response_term = (phi_before.T @ g_v).reshape(-1)
        spike = analysis.predicted_spike_term(g_t, g_v, lam_sampled, alpha)
        return {
            "what": "spike",
            "computed_hyper_gradient": computed.tolist(),
            "response_term": response_term.tolist(),
            "lambda_proportional_term": spike.tolist(),
            "residual": (computed - response_term - spike).tolist(),
            "alignment_cos": analysis.gradient_alignment(g_t, g_v),
            "lambda_sampled": lam_sampled.tolist(),
        }

    raise ConfigError([f"unknown analysis {what!r}"])
