"""Config-driven experiment runner: builds plant/policy/trainer from a resolved
configuration, executes, and writes artifacts into the output directory."""

from __future__ import annotations

import copy
import json
import time
from pathlib import Path

import numpy as np
import torch

from .baselines import LstmCell, RnnCell, param_count
from .checkpoint import save_policy_bundle
from .errors import ConfigError
from .evaluation import build_report, test_cost_details
from .plant import (
    DISTURBANCE_KINDS,
    NoDisturbance,
    X0_BOX_NARROW,
    X0_BOX_WIDE,
    build_plant,
)
from .policy import (
    CARTPOLE_ROBUST_GAIN,
    CtrlPolicy,
    YoulaPolicy,
    compute_alpha,
    gamma_from_alpha,
    thm1_check,
    verify_base_controller,
)
from .ren import IqcSpec, Ren, RenDims
from .train import (
    EconomicCost,
    QuadraticCost,
    SoftInputCost,
    TrainConfig,
    Trainer,
    WeightedL1Cost,
    closed_loop_rollout,
    rollout,
)

SCHEMA_VERSION = 1

EXPERIMENTS = (
    "verify",
    "quadratic_comparison",
    "ctrl_vs_youla",
    "soft_input",
    "disturbance",
    "economic",
    "weighted_l1",
)

MODEL_KINDS = ("ren", "linear_ren", "rnnr", "rnnt", "lstm")

# experiments that use the narrow initial-state box and their cost family
_NARROW_BOX = ("soft_input", "disturbance", "economic", "weighted_l1")

_SCHEMA = {
    "experiment": str,
    "seed": int,
    "scale": str,
    "output_dir": str,
    "model": {
        "kind": str,
        "n_x": int,
        "n_v": int,
        "hidden": int,
        "output_scale": float,
        "gamma_margin": float,
    },
    "train": {
        "epochs": int,
        "lr": list,
        "M": int,
        "T": int,
        "optimizer": str,
        "eval_every": int,
        "checkpoint_every": int,
    },
    "eval": {
        "M": int,
        "T": int,
        "shift": list,
        "n_bins": int,
        "contraction_pairs": int,
    },
    "options": {
        "parameterization": str,
        "disturbance": str,
        "xhat0": str,
        "grid_size": int,
    },
}


def _type_name(t) -> str:
    return t.__name__ if isinstance(t, type) else "mapping"


def validate_config(cfg: dict, schema: dict = _SCHEMA, path: str = "") -> None:
    """Reject unknown keys and mistyped values, naming the offending field."""
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    for key, value in cfg.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config field {where!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            validate_config(value, expected, where)
            continue
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            continue
        if expected is int and isinstance(value, bool):
            raise ConfigError(f"field {where!r} must be {_type_name(expected)}")
        if not isinstance(value, expected):
            raise ConfigError(f"field {where!r} must be {_type_name(expected)}")


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"missing required config field {key!r}")
    return cfg[key]


def _deep_update(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _presets(experiment: str, scale: str) -> dict:
    if scale not in ("desk", "paper"):
        raise ConfigError(f"unknown scale {scale!r}; expected 'desk' or 'paper'")
    desk = scale == "desk"
    model = {
        "kind": "ren",
        "n_x": 8 if desk else 40,
        "n_v": 64 if desk else 500,
        "hidden": 32 if desk else 500,
        "output_scale": 1.0,
        "gamma_margin": 0.999,
    }
    train = {
        "epochs": 150 if desk else 600,
        "lr": [[1e-3, 0]] if desk else [[1e-3, 0], [1e-4, 400]],
        "M": 10,
        "T": 60,
        "optimizer": "adam",
        "eval_every": 25 if desk else 10,
    }
    eval_cfg = {"M": 50, "T": 100, "shift": [0, 0, 0, 0], "n_bins": 10,
                "contraction_pairs": 20}
    options = {"parameterization": "youla", "disturbance": "constant",
               "xhat0": "zero", "grid_size": 50}
    if experiment == "quadratic_comparison":
        eval_cfg["shift"] = [10, 0, 0, 0]
    if experiment == "soft_input":
        train["epochs"] = 150 if desk else 500
        train["T"] = 100
        eval_cfg["T"] = 120
    if experiment == "disturbance":
        train["epochs"] = 100 if desk else 600
    if experiment in ("economic", "weighted_l1"):
        train["epochs"] = 60 if desk else 600
    if experiment == "soft_input" and not desk:
        model.update({"n_x": 50, "n_v": 400})
    return {
        "experiment": experiment,
        "seed": 0,
        "scale": scale,
        "model": model,
        "train": train,
        "eval": eval_cfg,
        "options": options,
    }


def resolve_config(cfg: dict, scale: str | None = None, seed: int | None = None,
                   output_dir: str | None = None) -> dict:
    """Merge user config over the scale preset and apply CLI overrides."""
    validate_config(cfg)
    experiment = _require(cfg, "experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    eff_scale = scale or cfg.get("scale", "desk")
    resolved = _deep_update(_presets(experiment, eff_scale), cfg)
    resolved["scale"] = eff_scale
    if seed is not None:
        resolved["seed"] = int(seed)
    if output_dir is not None:
        resolved["output_dir"] = str(output_dir)
    if "output_dir" not in resolved:
        raise ConfigError("missing required config field 'output_dir' "
                          "(or pass --out)")
    if resolved["model"]["kind"] not in MODEL_KINDS:
        raise ConfigError(
            f"unknown model kind {resolved['model']['kind']!r}; "
            f"expected one of {MODEL_KINDS}")
    if resolved["options"]["disturbance"] not in DISTURBANCE_KINDS:
        raise ConfigError(
            f"unknown disturbance {resolved['options']['disturbance']!r}")
    if resolved["options"]["parameterization"] not in ("youla", "ctrl"):
        raise ConfigError("options.parameterization must be 'youla' or 'ctrl'")
    validate_config(resolved)
    return resolved


def _build_model(mcfg: dict, n_in: int, gamma: float, seed: int):
    kind = mcfg["kind"]
    if kind in ("ren", "linear_ren"):
        n_v = 0 if kind == "linear_ren" else mcfg["n_v"]
        dims = RenDims(n_x=mcfg["n_x"], n_v=n_v, n_u=n_in, n_y=1)
        return Ren(dims, IqcSpec.lipschitz(gamma), acyclic=True, seed=seed,
                   output_scale=mcfg["output_scale"])
    if kind in ("rnnr", "rnnt"):
        return RnnCell(n_in, 1, mcfg["hidden"],
                       activation="relu" if kind == "rnnr" else "tanh",
                       seed=seed, output_scale=mcfg["output_scale"])
    if kind == "lstm":
        return LstmCell(n_in, 1, mcfg["hidden"], seed=seed,
                        output_scale=mcfg["output_scale"])
    raise ConfigError(f"unknown model kind {kind!r}")


def _cost_for(experiment: str):
    if experiment in ("quadratic_comparison", "ctrl_vs_youla", "disturbance"):
        return QuadraticCost()
    if experiment == "soft_input":
        return SoftInputCost()
    if experiment == "economic":
        return EconomicCost()
    if experiment == "weighted_l1":
        return WeightedL1Cost()
    raise ConfigError(f"experiment {experiment!r} has no training cost")


def _write_trajectories(path: Path, plant, policy, scenarios, T, cost, limit=4):
    rows = ["scenario,t," + ",".join(f"x{i+1}" for i in range(4)) + ",u,"
            + ",".join(f"w{i+1}" for i in range(plant.n_w))]
    for idx, scen in enumerate(scenarios[:limit]):
        ro = rollout(plant, policy, scen, T, cost)
        for t in range(T + 1):
            xs = ",".join(repr(float(v)) for v in ro.x[t])
            ws = ",".join(repr(float(v)) for v in ro.w[t])
            rows.append(f"{idx},{t},{xs},{repr(float(ro.u[t]))},{ws}")
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def _run_verify(cfg: dict, out: Path) -> dict:
    grid = cfg["options"]["grid_size"]
    plant = build_plant()
    K = CARTPOLE_ROBUST_GAIN
    report = verify_base_controller(plant, K, grid_size=grid)
    alpha = compute_alpha(plant, K, grid_size=grid)
    gamma = gamma_from_alpha(alpha, margin=cfg["model"]["gamma_margin"])
    small_gain = lambda g: thm1_check(
        (-np.eye(4) / alpha, -np.eye(4), np.zeros((1, 4)), np.zeros((1, 4)),
         alpha * np.eye(1), np.eye(1)),
        (-np.eye(1) / g, np.zeros((4, 1)), g * np.eye(4)),
    )
    holds, margin = small_gain(gamma)
    lines = [
        f"base gain K = {K.ravel().tolist()}",
        f"alpha (worst discrepancy gain over {grid}-point grid) = {alpha:.6f}",
        f"gamma (augmentation budget, margin {cfg['model']['gamma_margin']}) = {gamma:.4f}",
        f"beta (closed-loop gain v -> x) = {report.beta_achieved:.6f}",
        f"small-gain condition at gamma: holds={holds} margin={margin:.3e}",
        "",
        "rho        spectral radius   stable",
    ]
    for rho, sr, ok in zip(report.rhos, report.spectral_radii, report.schur_ok):
        lines.append(f"{rho:8.4f}   {sr:15.6f}   {'yes' if ok else 'NO'}")
    print("\n".join(lines))
    metrics = {
        "schema_version": SCHEMA_VERSION,
        "experiment": "verify",
        "seed": cfg["seed"],
        "alpha": alpha,
        "gamma": gamma,
        "beta_achieved": report.beta_achieved,
        "all_stable": report.all_stable,
        "unstable_rhos": report.unstable_rhos,
        "small_gain_holds": bool(holds),
        "small_gain_margin": margin,
        "spectral_radii": report.spectral_radii.tolist(),
        "rhos": report.rhos.tolist(),
    }
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return metrics


def run_experiment(cfg: dict, quiet: bool = False) -> dict:
    """Execute a resolved config; returns the metrics written to metrics.json."""
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    experiment = cfg["experiment"]

    import yaml

    (out / "config.yaml").write_text(
        yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")

    if experiment == "verify":
        metrics = _run_verify(cfg, out)
        metrics["wall_ms"] = (time.perf_counter() - started) * 1e3
        (out / "metrics.json").write_text(
            json.dumps(metrics, sort_keys=True, indent=1), encoding="utf-8")
        return metrics

    seed = cfg["seed"]
    grid = cfg["options"]["grid_size"]
    channel = "input" if experiment == "disturbance" else "state"
    x0_box = X0_BOX_NARROW if experiment in _NARROW_BOX else X0_BOX_WIDE
    plant = build_plant(channel=channel, x0_box=x0_box)
    cost = _cost_for(experiment)
    dist = NoDisturbance()
    if experiment == "disturbance":
        dist = DISTURBANCE_KINDS[cfg["options"]["disturbance"]]()
    K = CARTPOLE_ROBUST_GAIN

    parameterization = cfg["options"]["parameterization"]
    if experiment != "ctrl_vs_youla":
        parameterization = "youla"
    if parameterization == "youla":
        alpha = compute_alpha(plant, K, grid_size=grid)
        budget = gamma_from_alpha(alpha, margin=cfg["model"]["gamma_margin"])
        model = _build_model(cfg["model"], 4, budget, seed)
        policy = YoulaPolicy(plant, model, gamma=budget,
                             xhat0=cfg["options"]["xhat0"])
        budget_info = {"alpha": alpha, "gamma": budget}
    else:
        report = verify_base_controller(plant, K, grid_size=grid)
        budget = cfg["model"]["gamma_margin"] / report.beta_achieved
        model = _build_model(cfg["model"], 4, budget, seed)
        policy = CtrlPolicy(plant, model, beta=report.beta_achieved)
        budget_info = {"beta": report.beta_achieved, "gamma": budget}

    tcfg = TrainConfig(
        epochs=cfg["train"]["epochs"],
        lr_schedule=tuple((float(v), int(s)) for v, s in cfg["train"]["lr"]),
        M_train=cfg["train"]["M"],
        T_train=cfg["train"]["T"],
        optimizer=cfg["train"]["optimizer"],
        seed=seed,
        eval_every=cfg["train"]["eval_every"],
        eval_M=cfg["eval"]["M"],
        eval_T=cfg["eval"]["T"],
        checkpoint_every=cfg["train"].get("checkpoint_every"),
    )
    trainer = Trainer(plant, policy, cost, tcfg, dist=dist, checkpoint_dir=out)
    trainer.fit()
    if not quiet:
        for row in trainer.history_:
            if row["test_cost"] is not None:
                print(f"epoch {row['epoch']:4d}  train {row['train_cost']:.4f}  "
                      f"test {row['test_cost']:.4f}")

    (out / "history.csv").write_text(trainer.history_csv(), encoding="utf-8")
    save_policy_bundle(out / "checkpoint_final.bin", policy)

    shift = cfg["eval"]["shift"]
    report = build_report(
        plant, policy, K, cost,
        M=cfg["eval"]["M"], T=cfg["eval"]["T"],
        seed=tcfg.resolved_eval_seed, dist=dist,
        shift=shift if any(shift) else None,
        n_bins=cfg["eval"]["n_bins"],
        contraction_pairs=cfg["eval"]["contraction_pairs"],
    )

    metrics = {
        "schema_version": SCHEMA_VERSION,
        "experiment": experiment,
        "model_kind": cfg["model"]["kind"],
        "parameterization": parameterization,
        "seed": seed,
        "param_count": param_count(model),
        "final_train_cost": trainer.history_[-1]["train_cost"],
        "final_test_cost": trainer.history_[-1]["test_cost"],
        "cert_margin_min": min(trainer.cert_margins_, default=None),
        "skipped_epochs": trainer.skipped_epochs_,
        **budget_info,
        **report.to_dict(),
    }

    _, _, eval_scenarios = test_cost_details(
        plant, policy, cfg["eval"]["M"], cfg["eval"]["T"],
        tcfg.resolved_eval_seed, cost, dist)
    _write_trajectories(out / "trajectories.csv", plant, policy,
                        eval_scenarios, cfg["eval"]["T"], cost)

    if experiment == "soft_input":
        with torch.no_grad():
            _, _, traj = closed_loop_rollout(
                plant, policy, eval_scenarios, cfg["eval"]["T"], cost,
                record=True)
        u = traj["u"].numpy()
        half = u.shape[1] // 2
        metrics["u_violation_fraction_first_half"] = float(
            np.mean(np.abs(u[:, :half]) > SoftInputCost().u_bar))
        metrics["u_violation_fraction_second_half"] = float(
            np.mean(np.abs(u[:, half:]) > SoftInputCost().u_bar))
    if experiment == "disturbance":
        with torch.no_grad():
            _, _, traj = closed_loop_rollout(
                plant, policy, eval_scenarios, cfg["eval"]["T"], cost,
                record=True)
        x = traj["x"].numpy()
        metrics["steady_state_norm_last20"] = float(
            np.mean(np.linalg.norm(x[:, -20:, :], axis=2)))
        ss_base = []
        for s in eval_scenarios:
            Ad, Bd = plant.realize(s.rho)
            xs = [s.x0.copy()]
            for t in range(cfg["eval"]["T"]):
                u0 = float(-(K @ xs[-1])[0])
                xs.append(Ad @ xs[-1] + Bd[:, 0] * (u0 + float(s.w[t, 0])))
            ss_base.append(np.mean(np.linalg.norm(np.array(xs)[-20:], axis=1)))
        metrics["steady_state_norm_last20_robust"] = float(np.mean(ss_base))

    metrics["wall_ms"] = (time.perf_counter() - started) * 1e3
    (out / "metrics.json").write_text(
        json.dumps(metrics, sort_keys=True, indent=1), encoding="utf-8")
    if not quiet:
        print(f"wrote artifacts to {out}")
    return metrics


def compare_runs(run_dirs: list, out_csv=None) -> str:
    """Merge metrics from several runs into one table; the gap column is
    recomputed from the stored costs rather than copied."""
    if not run_dirs:
        raise ConfigError("compare needs at least one run directory")
    rows = []
    for d in run_dirs:
        path = Path(d) / "metrics.json"
        if not path.exists():
            raise ConfigError(f"no metrics.json in {d}")
        metrics = json.loads(path.read_text(encoding="utf-8"))
        if metrics.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version mismatch in {d}: "
                f"{metrics.get('schema_version')} != {SCHEMA_VERSION}")
        J = metrics.get("J_test")
        J_opt = metrics.get("J_lqr_oracle")
        gap = (J - J_opt) / J_opt if (J is not None and J_opt) else None
        rows.append({
            "run": str(d),
            "experiment": metrics.get("experiment", ""),
            "model": metrics.get("model_kind", ""),
            "J_test": J,
            "J_lqr_oracle": J_opt,
            "gap": gap,
            "divergences": metrics.get("divergence_count"),
        })
    header = f"{'run':<28} {'experiment':<22} {'model':<10} " \
             f"{'J_test':>12} {'gap':>10} {'div':>4}"
    lines = [header, "-" * len(header)]
    csv_lines = ["run,experiment,model,J_test,J_lqr_oracle,gap,divergences"]
    for r in rows:
        gap_s = "-" if r["gap"] is None else f"{100 * r['gap']:.2f}%"
        J_s = "-" if r["J_test"] is None else f"{r['J_test']:.4f}"
        lines.append(f"{r['run']:<28} {r['experiment']:<22} {r['model']:<10} "
                     f"{J_s:>12} {gap_s:>10} {str(r['divergences']):>4}")
        csv_lines.append(",".join("" if r[k] is None else str(r[k]) for k in
                                  ("run", "experiment", "model", "J_test",
                                   "J_lqr_oracle", "gap", "divergences")))
    table = "\n".join(lines)
    if out_csv is not None:
        Path(out_csv).write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    return table
