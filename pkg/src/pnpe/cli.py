"""Command-line entry point: ``pnpe simulate | run | report``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from pnpe.bsl import BslConfig
from pnpe.core import BoxPrior, RngState
from pnpe.models import GaussToyConfig, GaussToyModel, ObservedData, SvarConfig, SvarModel, generate_observed
from pnpe.pipeline import BUDGET_MODES, METHODS, RunPlan, RunResult, StageError, run_plan
from pnpe.smc_abc import SmcConfig
from pnpe.train import TrainConfig, history_csv

logger = logging.getLogger("pnpe")

TRAIN_DEFAULTS = {
    "learning_rate": 5e-4,
    "batch_size": 256,
    "max_epochs": 500,
    "patience": 50,
    "validation_fraction": 0.1,
}

DEFAULTS = {
    "model": {
        "name": "svar",
        "k": 6,
        "T": 1000,
        "true_theta": None,
        "observed_path": None,
        "n_obs": 10,
        "noise_var": 1.0,
        "box": [-3.0, 3.0],
    },
    "prior": {"lower": None, "upper": None},
    "method": "PNPE",
    "smc": {
        "N": 1000,
        "a": 0.5,
        "c": 0.01,
        "p_min": 0.1,
        "eps_T": None,
        "initial_trial_moves": 10,
        "max_moves": 500,
        "max_iterations": 200,
        "transform": "none",
    },
    "train": dict(TRAIN_DEFAULTS),
    "qg_train": None,
    "rounds": 1,
    "round_sims": 10_000,
    "clip_threshold": None,
    "reweight": True,
    "budget_mode": "match-total",
    "reference_n_abc": None,
    "reference_run": None,
    "recycle_abc": False,
    "mass_fraction": 1 - 1e-4,
    "n_calibration": 10_000,
    "n_posterior": 10_000,
    "n_predictive": 1000,
    "bsl": {"m": 100, "n_iters": 10_000, "burn_in": 1000, "proposal_scale": 0.01, "init": None},
    "seeds": {"master": 0, "observed": 0},
    "output_dir": "runs/default",
}

class ConfigError(ValueError):
    pass


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        base = defaults[key]
        if key == "qg_train" and isinstance(value, dict):
            out[key] = _merge(TRAIN_DEFAULTS, value, where + ".")
        elif isinstance(base, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base, value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: Optional[Path]) -> dict:
    """Read a YAML config (or a run manifest, whose echoed config is reused) and fill defaults."""
    given = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            given = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(given, dict):
            raise ConfigError("config must be a mapping")
        if given.get("format") == "pnpe-run":
            given = given["config"]
    cfg = _merge(DEFAULTS, given)
    model = cfg["model"]
    if model["name"] == "svar" and model["true_theta"] is None and model["observed_path"] is None:
        if model["k"] in (6, 20):
            model["true_theta"] = list(SvarConfig.reference(model["k"]).true_theta)
    if "clip_threshold" not in given and model["name"] == "svar":
        cfg["clip_threshold"] = 10.0
    if "bsl" not in given or "m" not in (given.get("bsl") or {}):
        cfg["bsl"]["m"] = 100 if model["name"] == "svar" else 50
    return cfg


def build_model(cfg: dict):
    m = cfg["model"]
    try:
        if m["name"] == "svar":
            theta = None if m["true_theta"] is None else tuple(m["true_theta"])
            model = SvarModel(SvarConfig(k=int(m["k"]), T=int(m["T"]), true_theta=theta))
        elif m["name"] == "gauss_toy":
            theta = None if m["true_theta"] is None else tuple(np.atleast_1d(m["true_theta"]))
            model = GaussToyModel(
                GaussToyConfig(n_obs=int(m["n_obs"]), noise_var=float(m["noise_var"]), box=tuple(m["box"]), true_theta=theta)
            )
        else:
            raise ConfigError(f"unknown model name {m['name']!r}")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model section: {exc}") from exc
    p = cfg["prior"]
    if p["lower"] is not None or p["upper"] is not None:
        try:
            model.prior = BoxPrior(p["lower"], p["upper"], names=model.prior.names)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid prior section: {exc}") from exc
    return model


def _train_cfg(section: dict) -> TrainConfig:
    return TrainConfig(**section)


def build_plan(cfg: dict, model, s_obs) -> RunPlan:
    method = str(cfg["method"]).upper()
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {cfg['method']!r}")
    if cfg["budget_mode"] not in BUDGET_MODES:
        raise ConfigError(f"budget_mode must be one of {BUDGET_MODES}")
    try:
        smc = None
        if method in ("PNPE", "PSNPE"):
            s = cfg["smc"]
            smc = SmcConfig(
                n_particles=int(s["N"]),
                drop_fraction=float(s["a"]),
                move_tuning=float(s["c"]),
                min_acceptance=s["p_min"],
                target_epsilon=s["eps_T"],
                initial_trial_moves=int(s["initial_trial_moves"]),
                max_moves=int(s["max_moves"]),
                max_iterations=int(s["max_iterations"]),
                transform=s["transform"],
            )
        bsl = None
        if method == "BSL":
            b = cfg["bsl"]
            d = model.prior.dim
            init = None if b["init"] is None else np.asarray(b["init"], dtype=float)
            if init is None and getattr(model.cfg, "true_theta", None) is not None:
                # a deterministic in-support start; burn-in removes its influence
                init = np.clip(np.asarray(model.cfg.true_theta), model.prior.lower, model.prior.upper)
            width = model.prior.upper - model.prior.lower
            cov = np.diag((float(b["proposal_scale"]) * np.where(np.isfinite(width), width, 1.0)) ** 2)
            bsl = BslConfig(m=int(b["m"]), n_iters=int(b["n_iters"]), burn_in=int(b["burn_in"]), proposal_cov=cov, init=init)
            bsl.validate(model.summary_dim)
            if init is not None and len(init) != d:
                raise ConfigError(f"bsl.init needs {d} entries")
        ref = cfg["reference_n_abc"]
        if method == "SNPE" and ref is None and cfg["reference_run"] is not None:
            ref = _read_manifest(Path(cfg["reference_run"]))["n_abc"]
        if method == "SNPE" and ref is None:
            raise ConfigError("SNPE needs reference_n_abc or reference_run")
        return RunPlan(
            method=method,
            model=model,
            s_obs=s_obs,
            seed=int(cfg["seeds"]["master"]),
            rounds=int(cfg["rounds"]),
            round_sims=int(cfg["round_sims"]),
            smc=smc,
            train=_train_cfg(cfg["train"]),
            qg_train=None if cfg["qg_train"] is None else _train_cfg(cfg["qg_train"]),
            clip_threshold=cfg["clip_threshold"],
            reweight=bool(cfg["reweight"]),
            budget_mode=cfg["budget_mode"],
            reference_n_abc=None if ref is None else int(ref),
            recycle_abc=bool(cfg["recycle_abc"]),
            mass_fraction=float(cfg["mass_fraction"]),
            n_calibration=int(cfg["n_calibration"]),
            n_posterior=int(cfg["n_posterior"]),
            n_predictive=int(cfg["n_predictive"]),
            bsl=bsl,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError, OSError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if not isinstance(v, str) else v for v in row))
    path.write_text("\n".join(lines) + "\n")


def _read_manifest(run_dir: Path) -> dict:
    path = Path(run_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc


def write_observed(path: Path, obs: ObservedData) -> None:
    """Series as CSV (one row per time step) next to a JSON file with seed, theta and summary."""
    path = Path(path)
    data = np.atleast_2d(np.asarray(obs.data, dtype=float))
    if data.shape[0] == 1:
        data = data.T
    series = path.with_suffix(".csv")
    _write_csv(series, [f"y{j}" for j in range(data.shape[1])], data)
    meta = {
        "seed": obs.seed,
        "theta": None if obs.theta is None else np.asarray(obs.theta).tolist(),
        "summary": np.asarray(obs.summary).tolist(),
        "series": series.name,
    }
    _dump_json(path, meta)


def load_observed(path: Path) -> ObservedData:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
        data = np.loadtxt(path.parent / meta["series"], delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read observed data {path}: {exc}") from exc
    theta = None if meta.get("theta") is None else np.asarray(meta["theta"])
    return ObservedData(data, np.asarray(meta["summary"], dtype=float), theta, meta.get("seed"))


def make_observed(cfg: dict, model) -> ObservedData:
    m = cfg["model"]
    if m["observed_path"] is not None:
        return load_observed(Path(m["observed_path"]))
    if m["true_theta"] is None:
        raise ConfigError("model.true_theta or model.observed_path is required")
    seed = int(cfg["seeds"]["observed"])
    return generate_observed(model, np.atleast_1d(np.asarray(m["true_theta"], dtype=float)), RngState(seed), seed=seed)


def write_run(run_dir: Path, cfg: dict, result: RunResult, obs: ObservedData) -> None:
    """Persist every artifact of a finished run under ``run_dir``."""
    run_dir.mkdir(parents=True, exist_ok=True)
    names = list(result.plan.model.prior.names)
    write_observed(run_dir / "observed" / "observed.json", obs)
    if result.particles is not None:
        ps = result.particles
        rows = [list(t) + [r] for t, r in zip(ps.theta, ps.rho)]
        _write_csv(run_dir / "smc" / "particles.csv", names + ["rho"], rows)
        hist = [h.to_dict() for h in ps.history]
        if hist:
            keys = list(hist[0])
            _write_csv(run_dir / "smc" / "history.csv", keys, [[h[k] for k in keys] for h in hist])
    if result.qg_flow is not None:
        result.qg_flow.save(run_dir / "models" / "qg.json")
        (run_dir / "models" / "qg_history.csv").write_text(history_csv(result.qg_flow.history))
    for r, (flow, samples) in enumerate(zip(result.round_flows, result.round_samples), start=1):
        flow.save(run_dir / "models" / f"round_{r}.json")
        (run_dir / "models" / f"round_{r}_history.csv").write_text(history_csv(flow.history))
        _write_csv(run_dir / "samples" / f"round_{r}.csv", names, samples)
    if result.chain is not None:
        (run_dir / "samples").mkdir(parents=True, exist_ok=True)
        (run_dir / "samples" / "chain.csv").write_text(result.chain.to_csv(names))
    _write_csv(run_dir / "samples" / "posterior.csv", names, result.samples)
    (run_dir / "reports").mkdir(parents=True, exist_ok=True)
    (run_dir / "reports" / "predictive.csv").write_text(result.predictive.to_csv())
    manifest = dict(result.manifest)
    manifest["config"] = cfg
    _dump_json(run_dir / "manifest.json", manifest)
    _dump_json(run_dir / "timings.json", {k: round(v, 3) for k, v in result.timings.items()})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["seeds"]["master"] = int(args.seed)
        cfg["seeds"]["observed"] = int(args.seed)
    if getattr(args, "reweight", None) is not None:
        cfg["reweight"] = args.reweight == "on"
    if getattr(args, "budget_mode", None) is not None:
        cfg["budget_mode"] = args.budget_mode
    if getattr(args, "output", None) is not None and args.command == "run":
        cfg["output_dir"] = str(args.output)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    cfg["model"]["observed_path"] = None
    model = build_model(cfg)
    obs = make_observed(cfg, model)
    out = Path(args.output) if args.output else Path(cfg["output_dir"]) / "observed" / "observed.json"
    write_observed(out, obs)
    print(f"observed data written to {out} (summary dim {len(obs.summary)})")
    return 0


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    model = build_model(cfg)
    obs = make_observed(cfg, model)
    plan = build_plan(cfg, model, obs.summary)
    if args.dry_run:
        print(json.dumps({"config": cfg, "plan": plan.describe()}, indent=2, sort_keys=True))
        return 0
    run_dir = Path(cfg["output_dir"])
    result = run_plan(plan)
    write_run(run_dir, cfg, result, obs)
    cover = sum(result.manifest["coverage"])
    print(
        f"{plan.method} finished: {result.total_sims} simulations, "
        f"{cover}/{len(result.manifest['coverage'])} summaries covered; outputs in {run_dir}"
    )
    return 0


REQUIRED = ("manifest.json", "samples/posterior.csv", "reports/predictive.csv", "observed/observed.json")


def report_run(run_dir: Path) -> dict:
    """Write marginal sample files and a summary table for one run."""
    missing = [p for p in REQUIRED if not (run_dir / p).exists()]
    if missing:
        raise FileNotFoundError(f"{run_dir} is missing: " + ", ".join(missing))
    manifest = _read_manifest(run_dir)
    cfg = manifest["config"]
    model = build_model(cfg)
    samples = np.loadtxt(run_dir / "samples" / "posterior.csv", delimiter=",", skiprows=1, ndmin=2)
    names = list(model.prior.names)
    out = run_dir / "reports"
    for j, name in enumerate(names):
        _write_csv(out / "marginals" / f"{name}.csv", [name], samples[:, [j]])
    header = ["parameter", "mean", "sd"]
    analytic = None
    if cfg["model"]["name"] == "gauss_toy":
        s_obs = json.loads((run_dir / "observed" / "observed.json").read_text())["summary"]
        mean, var = model.analytic_posterior(s_obs)
        analytic = (mean, float(np.sqrt(var)))
        header += ["analytic_mean", "analytic_sd"]
    rows = []
    for j, name in enumerate(names):
        row = [name, samples[:, j].mean(), samples[:, j].std(ddof=1)]
        if analytic is not None:
            row += list(analytic)
        rows.append(row)
    _write_csv(out / "posterior_summary.csv", header, rows)
    return manifest


def cmd_report(args) -> int:
    runs = [Path(p) for p in args.run_dirs]
    manifests = []
    for run_dir in runs:
        manifests.append(report_run(run_dir))
        print(f"report written to {run_dir / 'reports'}")
    if len(runs) > 1:
        out = Path(args.output) if args.output else runs[0] / "reports" / "comparison.csv"
        rows = []
        ref = manifests[0]
        for run_dir, man in zip(runs, manifests):
            same_obs = man["plan"]["observed_summary"] == ref["plan"]["observed_summary"]
            rows.append(
                [
                    str(run_dir),
                    man["plan"]["method"],
                    str(man["total_sims"]),
                    str(man["n_abc"]),
                    str(same_obs).lower(),
                    ";".join(repr(v) for v in man["posterior_mean"]),
                    ";".join(repr(v) for v in man["posterior_sd"]),
                ]
            )
        _write_csv(out, ["run", "method", "total_sims", "n_abc", "same_observed", "posterior_mean", "posterior_sd"], rows)
        totals = {m["total_sims"] for m in manifests}
        equal = len(totals) == 1
        print(f"comparison written to {out}; simulation totals equal: {str(equal).lower()} ({sorted(totals)})")
        methods = {m["plan"]["method"] for m in manifests}
        if {"PNPE", "SNPE"} <= methods and not equal:
            print("error: PNPE and SNPE runs used different simulation budgets", file=sys.stderr)
            return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnpe", description="Preconditioned neural posterior estimation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate an observed dataset")
    sim.add_argument("--config", type=Path)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--output", type=Path)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--output", type=Path)
    run.add_argument("--dry-run", action="store_true")
    run.add_argument("--reweight", choices=["on", "off"])
    run.add_argument("--budget-mode", choices=list(BUDGET_MODES))

    rep = sub.add_parser("report", help="emit plot data for finished runs")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--output", type=Path, help="comparison table path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = {"simulate": cmd_simulate, "run": cmd_run, "report": cmd_report}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 1
    except (FileNotFoundError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
