"""Command-line interface: dataset generation, training, evaluation, and
equivariance audits.

Every command prints one machine-readable JSON document to stdout (datasets
also write checksummed manifests). Commands that write a report directory
also render PNG figures under <out>/figures unless --no-figures is given:
train plots the loss curves, eval the rollout error, and equiv-check the
sample-count trend when --compare-fourier is requested. Exit codes: 0
success, 2 usage, 3 simulation failure, 4 training divergence, 5 artifact
mismatch.

Config precedence per field: command-line flag, then the SE2_PRECISION
environment variable (precision only), then the JSON config file, then the
built-in default.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, engine, geom, model, plots, sim, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SOLVER = 3
EXIT_DIVERGED = 4
EXIT_MISMATCH = 5


class CommandError(Exception):
    """Failure with a chosen process exit code."""

    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------

def _load_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CommandError(f"cannot read config {path}: {exc}", EXIT_USAGE) from exc
    if not isinstance(doc, dict):
        raise CommandError(f"config {path} must be a JSON object", EXIT_USAGE)
    return doc


def merged_config(cls, config_path=None, flag_values: dict | None = None,
                  env_precision: bool = False):
    """Build a config dataclass from defaults < file < env < flags.

    Unknown keys in the file are rejected; value validation is the
    dataclass's own job.
    """
    fields = {f.name for f in dataclasses.fields(cls)}
    merged: dict = {}
    if config_path is not None:
        doc = _load_json(config_path)
        unknown = sorted(set(doc) - fields)
        if unknown:
            raise CommandError(
                f"unknown keys in {config_path}: {', '.join(unknown)}", EXIT_USAGE)
        merged.update(doc)
    if env_precision and "precision" in fields:
        env = os.environ.get("SE2_PRECISION", "").strip()
        if env:
            if env not in ("32", "64"):
                raise CommandError(f"SE2_PRECISION must be 32 or 64, got {env!r}",
                                   EXIT_USAGE)
            merged["precision"] = int(env)
    for key, value in (flag_values or {}).items():
        if value is not None:
            merged[key] = value
    try:
        return cls(**merged)
    except (ValueError, TypeError) as exc:
        raise CommandError(f"invalid configuration: {exc}", EXIT_USAGE) from exc


def _model_config(config_path, conv_kind_flag, seed_flag, **defaults) -> model.ModelConfig:
    """Surrogate model config from defaults < file < flags.

    Invariant kinds get hidden_rot=0 unless the file pins it, so plain
    --conv-kind inv-* works without a config file.
    """
    fields = {f.name for f in dataclasses.fields(model.ModelConfig)}
    pinned: dict = {}
    if config_path is not None:
        loaded = _load_json(config_path)
        unknown = sorted(set(loaded) - fields)
        if unknown:
            raise CommandError(
                f"unknown keys in {config_path}: {', '.join(unknown)}", EXIT_USAGE)
        pinned.update(loaded)
    if conv_kind_flag is not None:
        pinned["conv_kind"] = conv_kind_flag
    if seed_flag is not None:
        pinned["seed"] = seed_flag
    merged = {**defaults, **pinned}
    if merged.get("conv_kind", "").startswith("inv") and "hidden_rot" not in pinned:
        merged["hidden_rot"] = 0
    try:
        return model.ModelConfig(**merged)
    except model.ConfigError as exc:
        raise CommandError(f"invalid model config: {exc}", EXIT_USAGE) from exc


def _resolve_precision(flag_value: int | None, default: int = 32) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get("SE2_PRECISION", "").strip()
    if env:
        if env not in ("32", "64"):
            raise CommandError(f"SE2_PRECISION must be 32 or 64, got {env!r}", EXIT_USAGE)
        return int(env)
    return default


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


# --------------------------------------------------------------------------
# gen-tetris
# --------------------------------------------------------------------------

def cmd_gen_tetris(args) -> int:
    manifest = data.build_tetris_dataset(args.out, args.row, seed=args.seed)
    _emit({"out": str(args.out), "kind": manifest["kind"],
           "samples": manifest["counts"]["samples"],
           "manifest": str(Path(args.out) / "manifest.json")})
    return EXIT_OK


# --------------------------------------------------------------------------
# gen-ns
# --------------------------------------------------------------------------

def _ns_base_config(args) -> sim.SimConfig:
    if args.steps < 4:
        raise CommandError("--steps must be >= 4 (training needs a 3-step history)",
                           EXIT_USAGE)
    if args.scenario == "open":
        base = sim.open_box_config(nx=args.grid, ny=args.grid)
    else:
        base = sim.obstacle_inlet_config(nx=args.grid, ny=args.grid)
    changes: dict = {"n_steps": args.steps}
    if args.dt is not None:
        changes["dt"] = args.dt
    return dataclasses.replace(base, **changes)


def cmd_gen_ns(args) -> int:
    out = Path(args.out)
    pre_existing = set(out.glob("*")) if out.exists() else set()
    try:
        base = _ns_base_config(args)
        manifest = data.build_ns_dataset(
            out, scenario=args.scenario, n_traj=args.n_traj, n_nodes=args.nodes,
            seed=args.seed, force_mode=args.force, base_cfg=base, jobs=args.jobs)
    except (sim.SolverFailure, sim.SimError, data.DataError) as exc:
        # trajectories are simulated before anything is written, so normally
        # there is nothing to clean; sweep any partial output to be safe
        if out.exists():
            for leftover in set(out.glob("*")) - pre_existing:
                leftover.unlink()
        raise CommandError(f"generation failed: {exc}", EXIT_SOLVER) from exc
    _emit({"out": str(args.out), "kind": manifest["kind"],
           "trajectories": manifest["counts"]["trajectories"],
           "nodes": manifest["counts"]["nodes"],
           "manifest": str(out / "manifest.json")})
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

_TETRIS_MODEL_KEYS = ("conv_kind", "hidden_scalar", "hidden_rot", "seed")


def _figures_dir(out_dir) -> Path:
    return Path(out_dir) / "figures"


def cmd_train(args) -> int:
    train_cfg = merged_config(
        train.TrainConfig, args.train_config,
        {"epochs": args.epochs, "batch_size": args.batch_size, "lr0": args.lr0,
         "seed": args.seed, "precision": args.precision},
        env_precision=True)
    out = Path(args.out)
    engine.reset_rotation_op_count()

    if args.task == "tetris":
        doc = _load_json(args.model_config) if args.model_config else {}
        unknown = sorted(set(doc) - set(_TETRIS_MODEL_KEYS))
        if unknown:
            raise CommandError(
                f"unknown tetris model keys: {', '.join(unknown)}", EXIT_USAGE)
        if args.conv_kind:
            doc["conv_kind"] = args.conv_kind
        kind = doc.get("conv_kind", "se2-mlp")
        hidden_scalar = doc.get("hidden_scalar", 16)
        hidden_rot = doc.get("hidden_rot", 8 if kind.startswith("se2") else 0)
        samples = _load_tetris_training_data(args.data)
        test = data.gen_tetris("test", seed=args.test_seed)
        try:
            res = train.train_tetris(samples, test, train_cfg, out, conv_kind=kind,
                                     hidden_scalar=hidden_scalar, hidden_rot=hidden_rot)
        except train.TrainingDiverged as exc:
            raise CommandError(str(exc), EXIT_DIVERGED) from exc
        report = dict(res.final)
        report["parameter_count"] = res.classifier.parameter_count()
        checkpoint = res.checkpoint_path
    else:
        model_cfg = _model_config(args.model_config, args.conv_kind, args.seed)
        trajectories = _load_ns_data(args.data)
        try:
            res = train.train_surrogate(model_cfg, trajectories, train_cfg, out)
        except train.TrainingDiverged as exc:
            raise CommandError(str(exc), EXIT_DIVERGED) from exc
        report = dict(res.final)
        report["conv_kind"] = model_cfg.conv_kind
        report["parameter_count"] = model.parameter_count(model_cfg)
        checkpoint = res.checkpoint_path

    report["rotation_ops"] = engine.rotation_op_count()
    report["precision"] = train_cfg.precision
    report["checkpoint"] = str(checkpoint)
    report["metrics_csv"] = str(out / "metrics.csv")
    if not args.no_figures:
        fig = plots.training_curves(out / "metrics.csv",
                                    _figures_dir(out) / "training_curves.png")
        report["figures"] = [str(fig)]
    _emit(report)
    return EXIT_OK


def _load_tetris_training_data(path) -> list[data.TetrisSample]:
    path = Path(path)
    manifest = path / "manifest.json" if path.is_dir() else path
    try:
        doc = data.load_manifest(manifest)
    except data.DataError as exc:
        raise CommandError(f"cannot load dataset: {exc}", EXIT_MISMATCH) from exc
    if doc["kind"] != "tetris":
        raise CommandError(f"train --task tetris needs a tetris dataset, "
                           f"got {doc['kind']}", EXIT_MISMATCH)
    return data.load_tetris(manifest.parent / doc["files"][0]["name"])


def _load_ns_data(path) -> list[data.Trajectory]:
    path = Path(path)
    manifest = path / "manifest.json" if path.is_dir() else path
    try:
        return data.load_ns_dataset(manifest)
    except data.DataError as exc:
        raise CommandError(f"cannot load dataset: {exc}", EXIT_MISMATCH) from exc


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    bits = _resolve_precision(args.precision)
    trajectories = _load_ns_data(args.data)
    max_h = min(t.n_steps for t in trajectories) - train.HISTORY
    if args.rollout_horizon < 1 or args.rollout_horizon > max_h:
        raise CommandError(
            f"--rollout-horizon must be in [1, {max_h}] for this dataset",
            EXIT_USAGE)
    with engine.precision(bits):
        try:
            net = model.load_checkpoint(args.checkpoint)
        except model.CheckpointError as exc:
            raise CommandError(f"cannot load checkpoint: {exc}", EXIT_MISMATCH) from exc
        try:
            one = float(np.mean([train.one_step_error(net, t) for t in trajectories]))
            rollouts = [train.rollout(net, t, args.rollout_horizon)
                        for t in trajectories]
        except (train.TrainError, ValueError) as exc:
            raise CommandError(f"evaluation failed: {exc}", EXIT_MISMATCH) from exc
    per_step = np.mean([r["per_step"] for r in rollouts], axis=0)
    ident_steps = np.mean(
        [train.identity_rollout(t, args.rollout_horizon)["per_step"]
         for t in trajectories], axis=0)
    report = {
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
        "conv_kind": net.cfg.conv_kind,
        "n_trajectories": len(trajectories),
        "one_step": one,
        "rollout_horizon": args.rollout_horizon,
        "rollout_per_step": [float(x) for x in per_step],
        "rollout_mean": float(np.mean(per_step)),
        "identity_one_step": float(np.mean(
            [train.identity_one_step(t) for t in trajectories])),
        "identity_rollout_per_step": [float(x) for x in ident_steps],
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if not args.no_figures:
            fig = plots.rollout_curve(report, _figures_dir(out) / "rollout_error.png")
            report["figures"] = [str(fig)]
        (out / "eval_report.json").write_text(json.dumps(report, indent=1) + "\n")
    _emit(report)
    return EXIT_OK


# --------------------------------------------------------------------------
# equiv-check
# --------------------------------------------------------------------------

def _random_graph(n_nodes: int, rng: np.random.Generator) -> geom.Graph2D:
    pos = rng.uniform(0.0, 10.0, size=(n_nodes, 2))
    normals = np.zeros((n_nodes, 2))
    k = max(1, n_nodes // 8)
    idx = rng.choice(n_nodes, size=k, replace=False)
    raw = rng.normal(size=(k, 2))
    normals[idx] = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return geom.Graph2D.from_delaunay(pos, boundary_normals=normals)


def _rot2(beta: float) -> np.ndarray:
    c, s = np.cos(beta), np.sin(beta)
    return np.array([[c, -s], [s, c]])


def _np_leaky(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, 0.01 * x)


def fourier_mean_error(n_samples: int, trials: int, rng: np.random.Generator,
                       bits: int = 32) -> float:
    """Mean relative equivariance error of the point-sampled nonlinearity."""
    from .layers import fourier_pointwise_nonlin

    dtype = np.float64 if bits == 64 else np.float32
    errs = []
    for _ in range(trials):
        x = rng.normal(size=(8, 3, 2)).astype(dtype)
        r = _rot2(rng.uniform(0.0, 2.0 * np.pi)).astype(dtype)
        got = fourier_pointwise_nonlin(x @ r.T, n_samples, _np_leaky)
        want = fourier_pointwise_nonlin(x, n_samples, _np_leaky) @ r.T
        denom = max(float(np.abs(want).max()), 1e-12)
        errs.append(float(np.abs(got - want).max()) / denom)
    return float(np.mean(errs))


def activation_mean_error(trials: int, rng: np.random.Generator, bits: int) -> float:
    """Mean relative equivariance error of the aligned-frame activation."""
    from .layers import feature_pair, se2_activation

    errs = []
    with engine.precision(bits), engine.no_grad():
        for _ in range(trials):
            scalar = rng.normal(size=(8, 2))
            x = rng.normal(size=(8, 3, 2))
            alpha = rng.uniform(0.0, 2.0 * np.pi, size=8)
            beta = rng.uniform(0.0, 2.0 * np.pi)
            r = _rot2(beta)
            y = se2_activation(feature_pair(scalar, x), alpha, engine.leaky_relu)
            # alignment angles follow the rotated frame
            y2 = se2_activation(feature_pair(scalar, x @ r.T), alpha - beta,
                                engine.leaky_relu)
            want = y.rot.data @ r.T
            denom = max(float(np.abs(want).max()), 1e-12)
            errs.append(float(np.abs(y2.rot.data - want).max()) / denom)
    return float(np.mean(errs))


def cmd_equiv_check(args) -> int:
    bits = _resolve_precision(args.precision)
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    with engine.precision(bits):
        if args.checkpoint:
            try:
                net = model.load_checkpoint(args.checkpoint)
            except model.CheckpointError as exc:
                raise CommandError(f"cannot load checkpoint: {exc}",
                                   EXIT_MISMATCH) from exc
        else:
            # compact defaults so the audit runs in seconds; a config file
            # or flags override them
            kind = args.conv_kind or "se2-trans"
            cfg = _model_config(
                args.model_config, args.conv_kind, args.seed,
                n_layers=3, hidden_scalar=16,
                hidden_rot=8 if kind.startswith("se2") else 0)
            net = model.Model(cfg)
        graph = _random_graph(args.graph_nodes, rng)
        raw_s = rng.normal(size=(args.graph_nodes, net.cfg.in_scalar_dim))
        raw_r = rng.normal(size=(args.graph_nodes, net.cfg.in_rot_dim, 2))
        stats = model.equivariance_error(net, graph, raw_s, raw_r,
                                         trials=args.trials, seed=seed)
    report = {
        "conv_kind": net.cfg.conv_kind,
        "trials": args.trials,
        "precision": bits,
        "n_nodes": args.graph_nodes,
        "mean_error": stats["mean"],
        "max_error": stats["max"],
    }
    if args.checkpoint:
        report["checkpoint"] = str(args.checkpoint)
    if args.compare_fourier:
        try:
            counts = [int(x) for x in args.compare_fourier.split(",") if x]
        except ValueError as exc:
            raise CommandError(f"--compare-fourier wants ints: {exc}", EXIT_USAGE) from exc
        rows = [{"n_samples": n,
                 "mean_error": fourier_mean_error(n, args.trials, rng, bits)}
                for n in counts]
        report["fourier"] = rows
        report["activation_mean_error"] = activation_mean_error(args.trials, rng, bits)
        if args.out and not args.no_figures:
            fig = plots.fourier_trend(rows, report["activation_mean_error"],
                                      _figures_dir(args.out) / "fourier_trend.png")
            report["figures"] = [str(fig)]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "equiv_report.json").write_text(json.dumps(report, indent=1) + "\n")
    _emit(report)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="se2gnn",
        description="Rotation-equivariant graph surrogates for 2D smoke flow.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-tetris", help="write a tetromino classification dataset")
    g.add_argument("--row", required=True,
                   choices=sorted(data.AUGMENTATION_ROWS) + [data.TEST_ROW])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_tetris)

    n = sub.add_parser("gen-ns", help="simulate and write smoke trajectories")
    n.add_argument("--scenario", required=True, choices=["open", "obstacle"])
    n.add_argument("--n-traj", type=int, required=True)
    n.add_argument("--grid", type=int, default=64, help="square grid resolution")
    n.add_argument("--nodes", type=int, required=True, help="graph nodes per trajectory")
    n.add_argument("--force", choices=["fixed", "varying"], default="varying")
    n.add_argument("--steps", type=int, default=30, help="simulation steps")
    n.add_argument("--dt", type=float, default=None)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--jobs", type=int, default=1,
                   help="parallel trajectory workers (outputs stay byte-identical)")
    n.add_argument("--out", required=True)
    n.set_defaults(fn=cmd_gen_ns)

    t = sub.add_parser("train", help="train a surrogate or the shape classifier")
    t.add_argument("--task", required=True, choices=["tetris", "ns"])
    t.add_argument("--data", required=True, help="dataset directory or manifest path")
    t.add_argument("--model-config", default=None, help="JSON file of model fields")
    t.add_argument("--train-config", default=None, help="JSON file of training fields")
    t.add_argument("--conv-kind", default=None,
                   choices=["se2-mlp", "se2-trans", "inv-mlp", "inv-trans"])
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr0", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--precision", type=int, choices=[32, 64], default=None)
    t.add_argument("--test-seed", type=int, default=123,
                   help="seed of the generated tetris test set")
    t.add_argument("--no-figures", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a trajectory dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--rollout-horizon", type=int, required=True)
    e.add_argument("--precision", type=int, choices=[32, 64], default=None)
    e.add_argument("--no-figures", action="store_true")
    e.add_argument("--out", default=None, help="directory for report + figures")
    e.set_defaults(fn=cmd_eval)

    q = sub.add_parser("equiv-check", help="measure model equivariance error")
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--random-model", action="store_true")
    q.add_argument("--model-config", default=None)
    q.add_argument("--conv-kind", default=None,
                   choices=["se2-mlp", "se2-trans", "inv-mlp", "inv-trans"])
    q.add_argument("--trials", type=int, default=50)
    q.add_argument("--precision", type=int, choices=[32, 64], default=None)
    q.add_argument("--graph-nodes", type=int, default=64)
    q.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    q.add_argument("--compare-fourier", default=None,
                   help="comma-separated sample counts, e.g. 4,8,16,32")
    q.add_argument("--no-figures", action="store_true")
    q.add_argument("--out", default=None, help="directory for report + figures")
    q.set_defaults(fn=cmd_equiv_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CommandError as exc:
        print(f"se2gnn: error: {exc}", file=sys.stderr)
        return exc.code
    except (data.DataError, train.TrainError, model.ConfigError) as exc:
        print(f"se2gnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
