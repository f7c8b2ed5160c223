"""Full graph network: embedding, message-passing blocks, output heads.

Four variants share one architecture. The ``se2-*`` kinds process rotational
features in locally aligned frames and are equivariant end to end; the
``inv-*`` kinds are the non-equivariant counterparts, which receive the same
geometric inputs flattened into plain scalar channels and use no rotations at
all. ``-mlp`` and ``-trans`` select sum aggregation or single-head attention
for the message-passing step.

Blocks are pre-norm residual: x <- x + Conv(LN(x)), then x <- x + FF(LN(x)).
Hidden MLP widths default to three times the aligned feature width; embedding
and head MLPs use one hidden layer of the aligned width itself. Those two
rules, applied to a 7-layer model with 64 scalar and 64 rotational channels,
land the total parameter count within a few percent of 6.4M, and the widened
scalar-only counterpart (256 channels, shared 576 hidden width) at 7.7M.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import engine, geom
from .engine import Tensor
from .layers import (
    ConfigError, FeaturePair, FeedForward, InputEmbedding, MessageContext,
    Module, RotOutput, ScalarOutput, SE2ConvMLP, SE2ConvTrans,
    SeparableLayerNorm, build_context, feature_pair,
)

CONV_KINDS = ("se2-mlp", "se2-trans", "inv-mlp", "inv-trans")

CHECKPOINT_MAGIC = b"SE2CKPT1"


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated, or from a different model."""


@dataclass
class ModelConfig:
    """Widths and wiring of one network.

    ``in_rot_dim``/``out_rot_dim`` count 2-vector channels of the task itself;
    the invariant kinds still accept/emit them, internally flattened to pairs
    of scalar channels. ``mlp_hidden`` of None means 3x the aligned width.
    """

    conv_kind: str = "se2-trans"
    n_layers: int = 7
    hidden_scalar: int = 64
    hidden_rot: int = 64
    n_base: int = 12
    cutoff: float = 2.0
    in_scalar_dim: int = 3
    in_rot_dim: int = 5
    out_scalar_dim: int = 1
    out_rot_dim: int = 1
    mlp_hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.conv_kind not in CONV_KINDS:
            raise ConfigError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.hidden_scalar < 1:
            raise ConfigError("hidden_scalar must be >= 1")
        if self.hidden_rot < 0:
            raise ConfigError("hidden_rot must be >= 0")
        if not self.is_equivariant and self.hidden_rot != 0:
            raise ConfigError("invariant kinds take hidden_rot=0 (widen hidden_scalar instead)")
        if self.is_equivariant and self.hidden_rot == 0:
            raise ConfigError("se2 kinds need hidden_rot >= 1")
        if min(self.in_scalar_dim, self.in_rot_dim, self.out_scalar_dim, self.out_rot_dim) < 0:
            raise ConfigError("feature dims must be >= 0")
        if self.n_base < 1 or self.cutoff <= 0:
            raise ConfigError("radial basis needs n_base >= 1 and cutoff > 0")

    @property
    def is_equivariant(self) -> bool:
        return self.conv_kind.startswith("se2")

    @property
    def uses_attention(self) -> bool:
        return self.conv_kind.endswith("trans")

    @property
    def aligned_width(self) -> int:
        return self.hidden_scalar + 2 * self.hidden_rot

    @property
    def hidden(self) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else 3 * self.aligned_width

    # effective dims after the invariant kinds flatten their vector channels
    @property
    def eff_in(self) -> tuple[int, int]:
        if self.is_equivariant:
            return self.in_scalar_dim, self.in_rot_dim
        return self.in_scalar_dim + 2 * self.in_rot_dim, 0

    @property
    def eff_out(self) -> tuple[int, int]:
        if self.is_equivariant:
            return self.out_scalar_dim, self.out_rot_dim
        return self.out_scalar_dim + 2 * self.out_rot_dim, 0

    @property
    def radial_config(self) -> geom.RadialBasisConfig:
        return geom.RadialBasisConfig(n_base=self.n_base, cutoff=self.cutoff)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; must match the built model exactly."""
    d, h = cfg.aligned_width, cfg.hidden
    c_s, n_r = cfg.hidden_scalar, cfg.hidden_rot
    in_s, in_r = cfg.eff_in
    out_s, out_r = cfg.eff_out

    lin = lambda a, b: (a + 1) * b
    mlp1 = lambda a, b, hid: lin(a, hid) + lin(hid, b)
    mlp2 = lambda a, b, hid: lin(a, hid) + lin(hid, hid) + lin(hid, b)

    emb = mlp1(in_s, c_s, d)
    if n_r:
        emb += mlp1(2 * in_r, 2 * n_r, d)

    msg_w = 2 * c_s + cfg.n_base + 4 * n_r
    if cfg.uses_attention:
        conv = lin(msg_w, h) + 2 * h + lin(h, 1) + lin(h, d)
    else:
        conv = mlp1(msg_w, d, h)
    norm = c_s + n_r
    block = norm + conv + norm + mlp2(d, d, h)

    heads = mlp1(d, out_s, d)
    if out_r:
        heads += mlp1(d, 2 * out_r, d)
    return emb + cfg.n_layers * block + norm + heads


@dataclass
class Prediction:
    """Per-node outputs of both heads."""

    scalar_out: Tensor   # (N, out_scalar_dim)
    rot_out: Tensor      # (N, out_rot_dim, 2)


class Block(Module):
    """One pre-norm residual unit: message passing followed by feed-forward."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c_s, n_r = cfg.hidden_scalar, cfg.hidden_rot
        conv_cls = SE2ConvTrans if cfg.uses_attention else SE2ConvMLP
        self.conv_norm = SeparableLayerNorm(c_s, n_r)
        self.conv = conv_cls(c_s, n_r, c_s, n_r, cfg.n_base, cfg.hidden, rng)
        self.ff = FeedForward(c_s, n_r, cfg.hidden, rng, pre_norm=True)

    def __call__(self, x: FeaturePair, ctx: MessageContext) -> FeaturePair:
        y = self.conv(self.conv_norm(x), ctx)
        h = FeaturePair(scalar=x.scalar + y.scalar,
                        rot=x.rot + y.rot if x.n_rot else x.rot)
        return self.ff(h, ctx.alpha)


class Model(Module):
    """Built network; immutable once constructed except via the optimizer."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        in_s, in_r = cfg.eff_in
        out_s, out_r = cfg.eff_out
        d = cfg.aligned_width
        self.cfg = cfg
        self.embedding = InputEmbedding(in_s, in_r, cfg.hidden_scalar, cfg.hidden_rot, d, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_norm = SeparableLayerNorm(cfg.hidden_scalar, cfg.hidden_rot)
        self.scalar_head = ScalarOutput(cfg.hidden_scalar, cfg.hidden_rot, out_s, d, rng)
        self.rot_head = (RotOutput(cfg.hidden_scalar, cfg.hidden_rot, out_r, d, rng)
                         if out_r else None)

    def context(self, graph: geom.Graph2D) -> MessageContext:
        """Precompute per-graph geometry (reusable across forward calls)."""
        return build_context(graph, self.cfg.radial_config,
                             need_rotations=self.cfg.is_equivariant)

    def _lift(self, raw_scalar: np.ndarray, raw_rot: np.ndarray) -> FeaturePair:
        cfg = self.cfg
        raw_scalar = np.asarray(raw_scalar)
        raw_rot = np.asarray(raw_rot)
        n = raw_scalar.shape[0]
        if raw_scalar.shape != (n, cfg.in_scalar_dim):
            raise ConfigError(
                f"raw scalar features must be (N, {cfg.in_scalar_dim}), got {raw_scalar.shape}")
        if raw_rot.shape != (n, cfg.in_rot_dim, 2):
            raise ConfigError(
                f"raw rot features must be (N, {cfg.in_rot_dim}, 2), got {raw_rot.shape}")
        if cfg.is_equivariant:
            return feature_pair(raw_scalar, raw_rot)
        flat = np.concatenate([raw_scalar, raw_rot.reshape(n, -1)], axis=-1)
        return feature_pair(flat, np.zeros((n, 0, 2)))

    def __call__(self, graph: geom.Graph2D, raw_scalar, raw_rot,
                 ctx: MessageContext | None = None) -> Prediction:
        cfg = self.cfg
        if ctx is None:
            ctx = self.context(graph)
        x = self.embedding(self._lift(raw_scalar, raw_rot), ctx.alpha)
        for block in self.blocks:
            x = block(x, ctx)
        x = self.final_norm(x)
        out_s = self.scalar_head(x, ctx.alpha)
        n = x.n_nodes
        if cfg.is_equivariant:
            rot = (self.rot_head(x, ctx.alpha) if self.rot_head is not None
                   else Tensor(np.zeros((n, 0, 2))))
            return Prediction(scalar_out=out_s, rot_out=rot)
        scalar = engine.slice_last(out_s, 0, cfg.out_scalar_dim)
        rot = engine.reshape(
            engine.slice_last(out_s, cfg.out_scalar_dim,
                              cfg.out_scalar_dim + 2 * cfg.out_rot_dim),
            (n, cfg.out_rot_dim, 2))
        return Prediction(scalar_out=scalar, rot_out=rot)


def build(cfg: ModelConfig) -> Model:
    return Model(cfg)


def forward(model: Model, graph: geom.Graph2D, raw_scalar, raw_rot) -> Prediction:
    return model(graph, raw_scalar, raw_rot)


# --------------------------------------------------------------------------
# equivariance audit
# --------------------------------------------------------------------------

def equivariance_error(model: Model, graph: geom.Graph2D, raw_scalar, raw_rot,
                       trials: int = 50, seed: int = 0) -> dict:
    """Relative mismatch between transforming outputs and transforming inputs.

    Each trial draws a random rotation and translation of the node cloud,
    reruns the model, and compares against the correspondingly rotated
    original prediction. Errors are max-normalized per head with a 1e-12
    floor; returns their mean and max over trials.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    raw_scalar = np.asarray(raw_scalar)
    raw_rot = np.asarray(raw_rot)

    with engine.no_grad():
        base = model(graph, raw_scalar, raw_rot)
        base_s = base.scalar_out.data
        base_r = base.rot_out.data

        errs = []
        for _ in range(trials):
            beta = rng.uniform(0.0, 2.0 * np.pi)
            shift = rng.normal(0.0, 3.0, size=2)
            c, s = np.cos(beta), np.sin(beta)
            r = np.array([[c, -s], [s, c]])
            g = geom.Graph2D.build(graph.positions @ r.T + shift, graph.edges,
                                   boundary_normals=graph.boundary_normals @ r.T)
            pred = model(g, raw_scalar, raw_rot @ r.T)

            err = _head_err(pred.scalar_out.data, base_s)
            if base_r.size:
                err = max(err, _head_err(pred.rot_out.data, base_r @ r.T))
            errs.append(err)
    return {"mean": float(np.mean(errs)), "max": float(np.max(errs))}


def _head_err(got: np.ndarray, want: np.ndarray) -> float:
    scale = max(float(np.abs(want).max()) if want.size else 0.0, 1e-12)
    return float(np.abs(got - want).max() / scale) if want.size else 0.0


# --------------------------------------------------------------------------
# size matching for the scalar-only baselines
# --------------------------------------------------------------------------

def match_invariant_width(cfg: ModelConfig, target: int | None = None) -> ModelConfig:
    """Invariant twin of an equivariant config with a matched parameter count.

    Keeps depth and MLP hidden width, drops rotational channels, and widens
    the scalar channels until the total count is as close as possible to the
    equivariant model's (or to an explicit target).
    """
    if not cfg.is_equivariant:
        raise ConfigError("match_invariant_width expects an se2-* config")
    if target is None:
        target = parameter_count(cfg)
    kind = "inv-trans" if cfg.uses_attention else "inv-mlp"

    def candidate(width: int) -> ModelConfig:
        return dataclasses.replace(cfg, conv_kind=kind, hidden_scalar=width,
                                   hidden_rot=0, mlp_hidden=cfg.hidden)

    best, best_gap = None, None
    for width in range(1, 4 * cfg.aligned_width + 2):
        gap = abs(parameter_count(candidate(width)) - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = width, gap
    return candidate(best)


# --------------------------------------------------------------------------
# checkpoints: magic, JSON config header, named little-endian f32 arrays
# --------------------------------------------------------------------------

def save_checkpoint(model, path) -> None:
    """Write config + named parameters. Accepts anything with a ``cfg``
    ModelConfig attribute and ``named_parameters()`` (the surrogate or the
    tetris classifier)."""
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        header = json.dumps(dataclasses.asdict(model.cfg)).encode()
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params:
            blob = name.encode()
            arr = np.ascontiguousarray(tensor.data, dtype="<f4")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint truncated")
    return buf


def load_checkpoint(path, builder=None) -> Model:
    """Rebuild a module from a checkpoint. ``builder`` maps the stored
    ModelConfig to a fresh module; the default builds the surrogate Model.
    Loading a checkpoint with the wrong builder fails on the first foreign
    parameter name."""
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            raw_cfg = json.loads(_read_exact(fh, hlen))
            cfg = ModelConfig(**raw_cfg)
        except (ValueError, TypeError) as exc:
            raise CheckpointError(f"{path}: bad config header: {exc}") from exc
        model = Model(cfg) if builder is None else builder(cfg)
        expected = dict(model.named_parameters())
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        if count != len(expected):
            raise CheckpointError(
                f"{path}: {count} arrays stored, model has {len(expected)}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nlen).decode()
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            n_items = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read_exact(fh, 4 * n_items), dtype="<f4").reshape(shape)
            if name not in expected:
                raise CheckpointError(f"{path}: unexpected array {name!r}")
            tensor = expected.pop(name)
            if tensor.data.shape != arr.shape:
                raise CheckpointError(
                    f"{path}: {name!r} has shape {arr.shape}, model wants {tensor.data.shape}")
            tensor.data = arr.astype(engine.active_dtype())
        if expected:
            raise CheckpointError(f"{path}: missing arrays: {sorted(expected)[:3]}")
    return model
