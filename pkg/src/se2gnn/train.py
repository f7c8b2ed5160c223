"""Training loops, losses, and evaluation metrics.

Two tasks share the optimizer stack: a flow surrogate that predicts the next
timestep of (smoke, velocity) fields from a 3-step history, and a shape
classifier over the rotated tetromino datasets. Windows from several
trajectories are batched as one block-diagonal graph; alignment angles are
kept per window, so batching never changes what a window's forward pass
computes.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine, geom
from .data import TetrisSample, Trajectory
from .engine import Tape, Tensor
from .layers import (MessageContext, Module, RelativeEmbedding, ScalarOutput,
                     SeparableLayerNorm, build_context)
from .model import Block, Model, ModelConfig, Prediction, save_checkpoint

HISTORY = 3          # input steps per window
GRAD_CLIP_NORM = 10.0
N_SHAPES = 7

METRIC_COLUMNS = ("epoch", "split", "loss", "one_step", "accuracy", "nll", "lr")


class TrainError(ValueError):
    """Invalid training request (bad horizon, too-short trajectory, ...)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training cannot continue."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr0: float = 1e-3
    val_fraction: float = 0.05
    grad_clip: float = GRAD_CLIP_NORM
    precision: int = 32
    seed: int = 0
    # cap on sampled windows per epoch; None trains on every window
    windows_per_epoch: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch_size must be >= 1")
        if not (0.0 <= self.val_fraction < 1.0):
            raise TrainError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.precision not in (32, 64):
            raise TrainError(f"precision must be 32 or 64, got {self.precision}")
        if self.lr0 <= 0 or self.grad_clip <= 0:
            raise TrainError("lr0 and grad_clip must be positive")


# --------------------------------------------------------------------------
# loss and schedules
# --------------------------------------------------------------------------

def smse_loss(pred: Prediction, target_u: np.ndarray, target_v: np.ndarray) -> Tensor:
    """Summed-component MSE: mean over nodes of the squared error in the
    scalar field plus both velocity components."""
    n = pred.scalar_out.shape[0]
    u_t = Tensor(np.asarray(target_u).reshape(n, -1))
    v_t = Tensor(np.asarray(target_v).reshape(n, -1, 2))
    du = engine.square(pred.scalar_out - u_t)
    dv = engine.square(pred.rot_out - v_t)
    return (engine.tsum(du) + engine.tsum(dv)) * (1.0 / n)


def smse_value(pred_u: np.ndarray, pred_v: np.ndarray,
               target_u: np.ndarray, target_v: np.ndarray) -> float:
    """Plain-array version of :func:`smse_loss`."""
    n = pred_u.shape[0]
    return float((np.sum((pred_u.reshape(n, -1) - target_u.reshape(n, -1)) ** 2)
                  + np.sum((pred_v.reshape(n, -1, 2) - target_v.reshape(n, -1, 2)) ** 2)) / n)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 to 0 across the run."""
    if total_steps < 1:
        raise TrainError("total_steps must be >= 1")
    frac = min(max(step, 0), total_steps) / total_steps
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    skipped: int = 0

    @classmethod
    def init(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One bias-corrected Adam update. A non-finite gradient anywhere skips
    the whole step (parameters and moments untouched) and bumps the skip
    counter. Returns whether the step was applied."""
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return False
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


# --------------------------------------------------------------------------
# graph batching
# --------------------------------------------------------------------------

def batch_graphs(graphs: list[geom.Graph2D]) -> tuple[geom.Graph2D, np.ndarray]:
    """Stack graphs block-diagonally. Positions must already be centered per
    graph (Graph2D.build guarantees this), so each graph keeps its own
    alignment angles. Returns the union graph and per-node segment ids."""
    positions, edges, angles, normals, segments = [], [], [], [], []
    offset = 0
    for k, g in enumerate(graphs):
        positions.append(g.positions)
        edges.append(g.edges + offset)
        angles.append(g.global_angles)
        normals.append(g.boundary_normals)
        segments.append(np.full(g.n_nodes, k))
        offset += g.n_nodes
    return geom.Graph2D(positions=np.concatenate(positions),
                        edges=np.concatenate(edges),
                        global_angles=np.concatenate(angles),
                        boundary_normals=np.concatenate(normals)), np.concatenate(segments)


# --------------------------------------------------------------------------
# surrogate windows
# --------------------------------------------------------------------------

def window_features(traj: Trajectory, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Inputs for predicting step k: scalars are the 3-step smoke history,
    rotational channels are the 3-step velocity history, the boundary normal,
    and the force (broadcast to every node)."""
    if k < HISTORY or k >= traj.n_steps:
        raise TrainError(f"window target {k} outside [{HISTORY}, {traj.n_steps - 1}]")
    scalars = np.stack([traj.u[k - 3], traj.u[k - 2], traj.u[k - 1]], axis=-1)
    n = traj.n_nodes
    rots = np.stack([traj.v[k - 3], traj.v[k - 2], traj.v[k - 1],
                     traj.boundary_normals,
                     np.broadcast_to(traj.force, (n, 2))], axis=1)
    return scalars, rots


def _window_targets(traj: Trajectory, k: int) -> tuple[np.ndarray, np.ndarray]:
    return traj.u[k], traj.v[k]


class _TrajCache:
    """Per-trajectory graph and (lazily built) message context."""

    def __init__(self, traj: Trajectory):
        self.traj = traj
        self.graph = traj.graph()
        self._ctx: MessageContext | None = None

    def context(self, model: Model) -> MessageContext:
        if self._ctx is None:
            self._ctx = model.context(self.graph)
        return self._ctx


def _predict_arrays(model: Model, graph: geom.Graph2D, scalars, rots,
                    ctx: MessageContext) -> tuple[np.ndarray, np.ndarray]:
    pred = model(graph, scalars, rots, ctx=ctx)
    return pred.scalar_out.data[:, 0], pred.rot_out.data[:, 0, :]


def one_step_error(model: Model, traj: Trajectory,
                   cache: _TrajCache | None = None) -> float:
    """Mean SMSE over every window of the trajectory, true history as input."""
    if traj.n_steps < HISTORY + 1:
        raise TrainError(f"one_step_error needs >= {HISTORY + 1} steps, got {traj.n_steps}")
    cache = cache or _TrajCache(traj)
    ctx = cache.context(model)
    errors = []
    with engine.no_grad():
        for k in range(HISTORY, traj.n_steps):
            scalars, rots = window_features(traj, k)
            pu, pv = _predict_arrays(model, cache.graph, scalars, rots, ctx)
            errors.append(smse_value(pu, pv, traj.u[k], traj.v[k]))
    return float(np.mean(errors))


def rollout(model: Model, traj: Trajectory, horizon: int,
            cache: _TrajCache | None = None) -> dict:
    """Autoregressive prediction seeded with the first 3 true steps.

    Returns per-horizon SMSE against the true trajectory and its mean.
    The horizon is capped by the data: step 3 + horizon must exist.
    """
    max_h = traj.n_steps - HISTORY
    if horizon < 1 or horizon > max_h:
        raise TrainError(f"horizon must be in [1, {max_h}] for {traj.n_steps} steps, "
                         f"got {horizon}")
    cache = cache or _TrajCache(traj)
    ctx = cache.context(model)
    n = traj.n_nodes
    hist_u = [traj.u[k] for k in range(HISTORY)]
    hist_v = [traj.v[k] for k in range(HISTORY)]
    per_step = []
    with engine.no_grad():
        for h in range(horizon):
            scalars = np.stack(hist_u[-3:], axis=-1)
            rots = np.stack(hist_v[-3:] + [traj.boundary_normals,
                                           np.broadcast_to(traj.force, (n, 2))], axis=1)
            pu, pv = _predict_arrays(model, cache.graph, scalars, rots, ctx)
            k = HISTORY + h
            per_step.append(smse_value(pu, pv, traj.u[k], traj.v[k]))
            hist_u.append(pu)
            hist_v.append(pv)
    return {"per_step": per_step, "mean": float(np.mean(per_step))}


def identity_one_step(traj: Trajectory) -> float:
    """Baseline: predict no change from the last observed step."""
    if traj.n_steps < HISTORY + 1:
        raise TrainError(f"needs >= {HISTORY + 1} steps, got {traj.n_steps}")
    errors = [smse_value(traj.u[k - 1], traj.v[k - 1], traj.u[k], traj.v[k])
              for k in range(HISTORY, traj.n_steps)]
    return float(np.mean(errors))


def identity_rollout(traj: Trajectory, horizon: int) -> dict:
    """Baseline rollout: the fields stay frozen at the last seeded step."""
    max_h = traj.n_steps - HISTORY
    if horizon < 1 or horizon > max_h:
        raise TrainError(f"horizon must be in [1, {max_h}], got {horizon}")
    frozen_u, frozen_v = traj.u[HISTORY - 1], traj.v[HISTORY - 1]
    per_step = [smse_value(frozen_u, frozen_v, traj.u[HISTORY + h], traj.v[HISTORY + h])
                for h in range(horizon)]
    return {"per_step": per_step, "mean": float(np.mean(per_step))}


# --------------------------------------------------------------------------
# metric logging
# --------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


class MetricWriter:
    """Append-style CSV log with a fixed column set."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(METRIC_COLUMNS)

    def row(self, epoch: int, split: str, loss=None, one_step=None,
            accuracy=None, nll=None, lr=None) -> None:
        self._csv.writerow([epoch, split, _fmt(loss), _fmt(one_step),
                            _fmt(accuracy), _fmt(nll), _fmt(lr)])

    def close(self) -> None:
        self._fh.close()


# --------------------------------------------------------------------------
# surrogate training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    checkpoint_path: Path
    metrics_path: Path
    final: dict


def _split_trajectories(n: int, val_fraction: float,
                        rng: np.random.Generator) -> tuple[list[int], list[int]]:
    if n == 1:
        return [0], [0]
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    order = rng.permutation(n)
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def train_surrogate(model_cfg: ModelConfig, trajectories: list[Trajectory],
                    cfg: TrainConfig, out_dir) -> TrainResult:
    """Fit the next-step surrogate; keeps the checkpoint with the best
    validation one-step error. Raises TrainingDiverged on a non-finite loss."""
    if not trajectories:
        raise TrainError("no trajectories given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with engine.precision(cfg.precision):
        rng = np.random.default_rng(cfg.seed)
        model = Model(model_cfg)
        params = model.parameters()
        caches = [_TrajCache(t) for t in trajectories]
        train_idx, val_idx = _split_trajectories(len(trajectories), cfg.val_fraction, rng)

        pool = [(ti, k) for ti in train_idx
                for k in range(HISTORY, trajectories[ti].n_steps)]
        if not pool:
            raise TrainError("no training windows (trajectories too short)")
        per_epoch = len(pool) if cfg.windows_per_epoch is None \
            else min(cfg.windows_per_epoch, len(pool))
        batches_per_epoch = math.ceil(per_epoch / cfg.batch_size)
        total_steps = cfg.epochs * batches_per_epoch

        adam = AdamState.init(params)
        writer = MetricWriter(out / "metrics.csv")
        best_val = math.inf
        best_params = [p.data.copy() for p in params]
        step = 0
        try:
            for epoch in range(1, cfg.epochs + 1):
                order = rng.permutation(len(pool))[:per_epoch]
                losses = []
                lr = cfg.lr0
                for start in range(0, per_epoch, cfg.batch_size):
                    windows = [pool[i] for i in order[start:start + cfg.batch_size]]
                    graph, _ = batch_graphs([caches[ti].graph for ti, _ in windows])
                    scalars = np.concatenate([window_features(trajectories[ti], k)[0]
                                              for ti, k in windows])
                    rots = np.concatenate([window_features(trajectories[ti], k)[1]
                                           for ti, k in windows])
                    tgt_u = np.concatenate([_window_targets(trajectories[ti], k)[0]
                                            for ti, k in windows])
                    tgt_v = np.concatenate([_window_targets(trajectories[ti], k)[1]
                                            for ti, k in windows])
                    lr = cosine_lr(step, total_steps, cfg.lr0)
                    with Tape() as tape:
                        pred = model(graph, scalars, rots)
                        loss = smse_loss(pred, tgt_u, tgt_v)
                        value = float(loss.data)
                        if not math.isfinite(value):
                            raise TrainingDiverged(
                                f"non-finite loss at epoch {epoch} step {step}")
                        tape.backward(loss)
                    grads = engine.gradients(params)
                    clip_gradients(grads, cfg.grad_clip)
                    adam_step(params, grads, adam, lr)
                    for p in params:
                        p.grad = None
                    losses.append(value)
                    step += 1

                val_err = float(np.mean([one_step_error(model, trajectories[vi], caches[vi])
                                         for vi in val_idx]))
                if not math.isfinite(val_err):
                    raise TrainingDiverged(f"non-finite validation error at epoch {epoch}")
                writer.row(epoch, "train", loss=float(np.mean(losses)), lr=lr)
                writer.row(epoch, "val", one_step=val_err)
                if val_err < best_val:
                    best_val = val_err
                    best_params = [p.data.copy() for p in params]
        finally:
            writer.close()

        for p, snap in zip(params, best_params):
            p.data = snap
        ckpt = out / "model.ckpt"
        save_checkpoint(model, ckpt)
        final = {
            "task": "ns",
            "epochs": cfg.epochs,
            "val_one_step": best_val,
            "train_loss": float(np.mean(losses)),
            "skipped_steps": adam.skipped,
            "n_train_traj": len(train_idx),
            "n_val_traj": len(val_idx),
        }
        return TrainResult(model=model, checkpoint_path=ckpt,
                           metrics_path=out / "metrics.csv", final=final)


# --------------------------------------------------------------------------
# tetris classifier
# --------------------------------------------------------------------------

class TetrisClassifier(Module):
    """Graph classifier over the 7 tetromino shapes.

    Relative-position embedding, message-passing blocks, then per-node logits
    sum-pooled per graph. The invariant variant consumes raw edge vectors and
    performs no rotations at all.
    """

    def __init__(self, conv_kind: str = "se2-mlp", hidden_scalar: int = 16,
                 hidden_rot: int = 8, n_layers: int = 2, n_base: int = 6,
                 cutoff: float = 3.5, seed: int = 0):
        cfg = ModelConfig(conv_kind=conv_kind, n_layers=n_layers,
                          hidden_scalar=hidden_scalar, hidden_rot=hidden_rot,
                          n_base=n_base, cutoff=cutoff,
                          in_scalar_dim=1, in_rot_dim=1,
                          out_scalar_dim=N_SHAPES, out_rot_dim=0, seed=seed)
        rng = np.random.default_rng(seed)
        d = cfg.aligned_width
        self.cfg = cfg
        self.embedding = RelativeEmbedding(cfg.hidden_scalar, cfg.hidden_rot, d, rng,
                                           use_rotations=cfg.is_equivariant)
        self.blocks = [Block(cfg, rng) for _ in range(n_layers)]
        self.final_norm = SeparableLayerNorm(cfg.hidden_scalar, cfg.hidden_rot)
        self.head = ScalarOutput(cfg.hidden_scalar, cfg.hidden_rot, N_SHAPES, d, rng)

    def context(self, graph: geom.Graph2D) -> MessageContext:
        return build_context(graph, self.cfg.radial_config,
                             need_rotations=self.cfg.is_equivariant)

    def __call__(self, graph: geom.Graph2D, segments: np.ndarray, n_graphs: int,
                 ctx: MessageContext | None = None) -> Tensor:
        if ctx is None:
            ctx = self.context(graph)
        x = self.embedding(graph, ctx)
        for block in self.blocks:
            x = block(x, ctx)
        x = self.final_norm(x)
        logits = self.head(x, ctx.alpha)
        return engine.scatter_add_rows(logits, segments, n_graphs)


def _sample_graph(sample: TetrisSample) -> geom.Graph2D:
    return geom.Graph2D.complete(sample.positions)


def _batch_samples(samples: list[TetrisSample]) -> tuple[geom.Graph2D, np.ndarray, np.ndarray]:
    graph, segments = batch_graphs([_sample_graph(s) for s in samples])
    labels = np.array([s.label for s in samples])
    return graph, segments, labels


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy, stabilized by the rowwise max (treated as
    a constant shift, which leaves the gradient exact)."""
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = engine.log(engine.tsum(engine.exp(z), axis=1, keepdims=True))
    onehot = Tensor(np.eye(N_SHAPES)[labels])
    picked = engine.tsum(z * onehot, axis=1, keepdims=True)
    return engine.tmean(lse - picked)


def evaluate_tetris(classifier: TetrisClassifier,
                    samples: list[TetrisSample]) -> tuple[float, float]:
    """(accuracy, mean nll) on a sample list."""
    graph, segments, labels = _batch_samples(samples)
    with engine.no_grad():
        logits = classifier(graph, segments, len(samples))
        nll = float(cross_entropy(logits, labels).data)
    accuracy = float(np.mean(logits.data.argmax(axis=1) == labels))
    return accuracy, nll


def _classifier_from_config(cfg: ModelConfig) -> TetrisClassifier:
    return TetrisClassifier(conv_kind=cfg.conv_kind, hidden_scalar=cfg.hidden_scalar,
                            hidden_rot=cfg.hidden_rot, n_layers=cfg.n_layers,
                            n_base=cfg.n_base, cutoff=cfg.cutoff, seed=cfg.seed)


def load_tetris_checkpoint(path) -> TetrisClassifier:
    from .model import load_checkpoint
    return load_checkpoint(path, builder=_classifier_from_config)


@dataclass
class TetrisResult:
    classifier: TetrisClassifier
    accuracy: float
    nll: float
    checkpoint_path: Path
    metrics_path: Path
    final: dict


def train_tetris(train_samples: list[TetrisSample], test_samples: list[TetrisSample],
                 cfg: TrainConfig, out_dir, conv_kind: str = "se2-mlp",
                 hidden_scalar: int = 16, hidden_rot: int = 8) -> TetrisResult:
    """Fit the classifier on one augmentation row and score the random-angle
    test set. The training rows are tiny, so every batch covers the full set."""
    if not train_samples:
        raise TrainError("no training samples")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with engine.precision(cfg.precision):
        rng = np.random.default_rng(cfg.seed)
        clf = TetrisClassifier(conv_kind=conv_kind, hidden_scalar=hidden_scalar,
                               hidden_rot=hidden_rot, seed=cfg.seed)
        params = clf.parameters()
        adam = AdamState.init(params)
        writer = MetricWriter(out / "metrics.csv")
        n = len(train_samples)
        batches_per_epoch = math.ceil(n / cfg.batch_size)
        total_steps = cfg.epochs * batches_per_epoch
        step = 0
        try:
            for epoch in range(1, cfg.epochs + 1):
                order = rng.permutation(n)
                losses = []
                lr = cfg.lr0
                for start in range(0, n, cfg.batch_size):
                    batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
                    graph, segments, labels = _batch_samples(batch)
                    lr = cosine_lr(step, total_steps, cfg.lr0)
                    with Tape() as tape:
                        logits = clf(graph, segments, len(batch))
                        loss = cross_entropy(logits, labels)
                        value = float(loss.data)
                        if not math.isfinite(value):
                            raise TrainingDiverged(
                                f"non-finite loss at epoch {epoch} step {step}")
                        tape.backward(loss)
                    grads = engine.gradients(params)
                    clip_gradients(grads, cfg.grad_clip)
                    adam_step(params, grads, adam, lr)
                    for p in params:
                        p.grad = None
                    losses.append(value)
                    step += 1
                writer.row(epoch, "train", loss=float(np.mean(losses)), lr=lr)
        finally:
            writer.close()

        accuracy, nll = evaluate_tetris(clf, test_samples) if test_samples else (0.0, 0.0)
        ckpt = out / "model.ckpt"
        save_checkpoint(clf, ckpt)
        final = {
            "task": "tetris",
            "epochs": cfg.epochs,
            "conv_kind": conv_kind,
            "train_loss": float(np.mean(losses)),
            "test_accuracy": accuracy,
            "test_nll": nll,
            "skipped_steps": adam.skipped,
        }
        return TetrisResult(classifier=clf, accuracy=accuracy, nll=nll,
                            checkpoint_path=ckpt, metrics_path=out / "metrics.csv",
                            final=final)
