"""Equivariant network building blocks over (scalar, rotational) feature pairs.

A feature pair carries per-node invariant channels x_s of shape (N, C_s) and
rotational channels x_r of shape (N, N_r, 2), i.e. N_r stacked 2-vectors per
node. Equivariance is obtained by alignment: rotate the 2-vectors into a
canonical frame (per-node angle alpha, or per-edge angle theta), apply an
ordinary MLP to the flattened features, and rotate the vector part back.

All blocks run on :mod:`se2gnn.engine` tensors so gradients flow through them.
Setting a block's rotational width to zero removes every rotation call, which
is how the purely invariant baselines are expressed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine, geom
from .engine import (
    Tensor, concat, gather_rows, leaky_relu, matmul, mul, reshape, rotate_pairs,
    scatter_add_rows, segment_softmax, slice_last, sqrt, square, tmean, tsum,
)

LEAKY_SLOPE = 0.01
LN_EPS = 1e-5


class ConfigError(ValueError):
    """A layer was constructed with inconsistent widths."""


# --------------------------------------------------------------------------
# feature pairs
# --------------------------------------------------------------------------

@dataclass
class FeaturePair:
    """Per-node invariant channels and stacked 2-vector channels."""

    scalar: Tensor  # (N, C_s)
    rot: Tensor     # (N, N_r, 2)

    def __post_init__(self):
        if self.scalar.data.ndim != 2:
            raise ConfigError(f"FeaturePair: scalar must be (N, C_s), got {self.scalar.data.shape}")
        if self.rot.data.ndim != 3 or self.rot.data.shape[-1] != 2:
            raise ConfigError(f"FeaturePair: rot must be (N, N_r, 2), got {self.rot.data.shape}")
        if self.scalar.data.shape[0] != self.rot.data.shape[0]:
            raise ConfigError(
                f"FeaturePair: node counts differ, {self.scalar.data.shape} vs {self.rot.data.shape}")

    @property
    def n_nodes(self) -> int:
        return self.scalar.data.shape[0]

    @property
    def n_scalar(self) -> int:
        return self.scalar.data.shape[1]

    @property
    def n_rot(self) -> int:
        return self.rot.data.shape[1]


def feature_pair(scalar, rot) -> FeaturePair:
    return FeaturePair(scalar=engine._as_tensor(scalar), rot=engine._as_tensor(rot))


def zeros_pair(n: int, c_s: int, n_r: int) -> FeaturePair:
    return feature_pair(np.zeros((n, c_s)), np.zeros((n, n_r, 2)))


# --------------------------------------------------------------------------
# module base: parameter discovery for optimizers and checkpoints
# --------------------------------------------------------------------------

class Module:
    """Base with recursive named-parameter discovery (insertion order)."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{k}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{k}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = engine.uniform_param(rng, (n_in, n_out), fan_in=n_in)
        self.bias = engine.zeros_param((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class MLP(Module):
    """Dense stack with LeakyReLU between layers; ``n_hidden == 0`` is a Linear."""

    def __init__(self, n_in: int, n_out: int, hidden: int, n_hidden: int,
                 rng: np.random.Generator):
        dims = [n_in] + [hidden] * n_hidden + [n_out]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = leaky_relu(layer(x), LEAKY_SLOPE)
        return self.layers[-1](x)


# --------------------------------------------------------------------------
# alignment helpers
# --------------------------------------------------------------------------

def _trig(angles: np.ndarray):
    a = np.asarray(angles, dtype=np.float64)
    return np.cos(a), np.sin(a)


def align_rot(rot: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate each node's 2-vectors into the canonical frame."""
    return rotate_pairs(rot, cos, sin)


def unalign_rot(rot: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Inverse of :func:`align_rot` (rotation by the negated angle)."""
    return rotate_pairs(rot, cos, -sin)


def _flatten_rot(rot: Tensor) -> Tensor:
    n, n_r, _ = rot.data.shape
    return reshape(rot, (n, 2 * n_r))


def _unflatten_rot(flat: Tensor) -> Tensor:
    n, two_nr = flat.data.shape
    return reshape(flat, (n, two_nr // 2, 2))


# --------------------------------------------------------------------------
# SO(2)-MLP and friends
# --------------------------------------------------------------------------

class SO2MLP(Module):
    """Alignment-sandwiched MLP: rotate by alpha, mix, rotate back.

    Scalar channels pass straight into the MLP; rotational channels are
    aligned first and restored afterwards, which keeps the whole map
    equivariant while the inner MLP stays completely ordinary.
    """

    def __init__(self, c_in: int, r_in: int, c_out: int, r_out: int,
                 hidden: int, n_hidden: int, rng: np.random.Generator):
        if r_in < 0 or r_out < 0:
            raise ConfigError("SO2MLP: rotational widths must be >= 0")
        self.c_in, self.r_in = c_in, r_in
        self.c_out, self.r_out = c_out, r_out
        self.mlp = MLP(c_in + 2 * r_in, c_out + 2 * r_out, hidden, n_hidden, rng)

    def __call__(self, x: FeaturePair, alpha: np.ndarray) -> FeaturePair:
        if x.n_scalar != self.c_in or x.n_rot != self.r_in:
            raise ConfigError(
                f"SO2MLP: built for ({self.c_in}, {self.r_in}) channels, "
                f"got ({x.n_scalar}, {x.n_rot})")
        n = x.n_nodes
        cos, sin = _trig(alpha)
        pieces = []
        if self.c_in:
            pieces.append(x.scalar)
        if self.r_in:
            pieces.append(_flatten_rot(align_rot(x.rot, cos, sin)))
        h = self.mlp(pieces[0] if len(pieces) == 1 else concat(pieces, axis=-1))
        scalar = slice_last(h, 0, self.c_out)
        if self.r_out:
            rot = _unflatten_rot(slice_last(h, self.c_out, self.c_out + 2 * self.r_out))
            rot = unalign_rot(rot, cos, sin)
        else:
            rot = Tensor(np.zeros((n, 0, 2)))
        return FeaturePair(scalar=scalar, rot=rot)


def so2_mlp(x: FeaturePair, alpha, widths: SO2MLP) -> FeaturePair:
    """Functional form of :class:`SO2MLP` (weights passed explicitly)."""
    return widths(x, alpha)


class SO2Linear(Module):
    """Single equivariant linear map: align, Linear, restore."""

    def __init__(self, c_in: int, r_in: int, c_out: int, r_out: int,
                 rng: np.random.Generator):
        self.inner = SO2MLP(c_in, r_in, c_out, r_out, hidden=1, n_hidden=0, rng=rng)

    def __call__(self, x: FeaturePair, alpha) -> FeaturePair:
        return self.inner(x, alpha)


def se2_activation(x: FeaturePair, alpha, fn) -> FeaturePair:
    """Pointwise nonlinearity in the aligned frame: align, apply, restore."""
    cos, sin = _trig(alpha)
    scalar = fn(x.scalar)
    if x.n_rot:
        rot = unalign_rot(fn(align_rot(x.rot, cos, sin)), cos, sin)
    else:
        rot = x.rot
    return FeaturePair(scalar=scalar, rot=rot)


# --------------------------------------------------------------------------
# separable layer norm
# --------------------------------------------------------------------------

class SeparableLayerNorm(Module):
    """Scalar channels get standard LN; 2-vectors get pure rescaling.

    The rotational scale per node is sigma_r = sqrt(mean_n(|x_n|^2 / 2) + eps),
    with no mean subtraction, so the operation commutes with rotations.
    """

    def __init__(self, c_s: int, n_r: int):
        self.gamma_s = Tensor(np.ones(c_s), requires_grad=True) if c_s else None
        self.gamma_r = Tensor(np.ones(n_r), requires_grad=True) if n_r else None
        self.c_s, self.n_r = c_s, n_r

    def named_parameters(self, prefix: str = ""):
        if self.gamma_s is not None:
            yield f"{prefix}gamma_s", self.gamma_s
        if self.gamma_r is not None:
            yield f"{prefix}gamma_r", self.gamma_r

    def __call__(self, x: FeaturePair) -> FeaturePair:
        scalar, rot = x.scalar, x.rot
        if self.c_s:
            mu = tmean(scalar, axis=-1, keepdims=True)
            d = scalar - mu
            std = sqrt(tmean(square(d), axis=-1, keepdims=True) + LN_EPS)
            scalar = mul(d / std, self.gamma_s)
        if self.n_r:
            half_sq = 0.5 * tsum(square(rot), axis=-1)            # (N, N_r)
            sigma = sqrt(tmean(half_sq, axis=-1, keepdims=True) + LN_EPS)  # (N, 1)
            scale = self.gamma_r / sigma                           # (N, N_r)
            rot = mul(rot, reshape(scale, (rot.data.shape[0], self.n_r, 1)))
        return FeaturePair(scalar=scalar, rot=rot)


def separable_layer_norm(x: FeaturePair, params: SeparableLayerNorm) -> FeaturePair:
    return params(x)


class ChannelLayerNorm(Module):
    """Standard layer norm over the last axis (used on aligned edge features)."""

    def __init__(self, width: int):
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        mu = tmean(x, axis=-1, keepdims=True)
        d = x - mu
        std = sqrt(tmean(square(d), axis=-1, keepdims=True) + LN_EPS)
        return mul(d / std, self.gamma) + self.beta


# --------------------------------------------------------------------------
# message passing
# --------------------------------------------------------------------------

@dataclass
class MessageContext:
    """Precomputed per-graph geometry consumed by the message-passing layers.

    Edges are (dst, src) pairs: the message on edge e flows from node
    ``src[e]`` into node ``dst[e]``. ``theta`` aligns the edge direction with
    the x-axis; ``alpha`` does the same for node positions. For invariant
    models ``theta``/``alpha`` are all zero and never used.
    """

    edges: np.ndarray        # (E, 2) int, (dst, src)
    basis: np.ndarray        # (E, n_base)
    theta: np.ndarray        # (E,)
    cos_t: np.ndarray
    sin_t: np.ndarray
    alpha: np.ndarray        # (N,)
    n_nodes: int

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 1]


def build_context(graph: geom.Graph2D, rb_cfg: geom.RadialBasisConfig,
                  need_rotations: bool = True) -> MessageContext:
    """Edge basis + alignment angles for one graph."""
    _, dist, _, theta = geom.edge_arrays(graph.positions, graph.edges)
    basis = geom.bessel_basis(dist, rb_cfg)
    if need_rotations:
        alpha = graph.global_angles
        cos_t, sin_t = _trig(theta)
    else:
        theta = np.zeros_like(theta)
        alpha = np.zeros(graph.n_nodes)
        cos_t, sin_t = np.ones_like(theta), np.zeros_like(theta)
    return MessageContext(edges=graph.edges, basis=basis, theta=theta,
                          cos_t=cos_t, sin_t=sin_t, alpha=alpha,
                          n_nodes=graph.n_nodes)


class _MessageInputs:
    """Shared front half of both conv layers: gather + align + concat."""

    @staticmethod
    def assemble(x: FeaturePair, ctx: MessageContext, r_in: int) -> Tensor:
        dst, src = ctx.dst, ctx.src
        pieces = [gather_rows(x.scalar, dst), gather_rows(x.scalar, src),
                  Tensor(ctx.basis)]
        if r_in:
            pieces.append(_flatten_rot(rotate_pairs(gather_rows(x.rot, dst), ctx.cos_t, ctx.sin_t)))
            pieces.append(_flatten_rot(rotate_pairs(gather_rows(x.rot, src), ctx.cos_t, ctx.sin_t)))
        return concat(pieces, axis=-1)

    @staticmethod
    def message_width(c_in: int, r_in: int, n_base: int) -> int:
        return 2 * c_in + n_base + 4 * r_in


def _split_and_aggregate(msg: Tensor, ctx: MessageContext, c_out: int, r_out: int) -> FeaturePair:
    """Rotate messages back into the global frame and sum per destination."""
    scalar = scatter_add_rows(slice_last(msg, 0, c_out), ctx.dst, ctx.n_nodes)
    if r_out:
        rot = _unflatten_rot(slice_last(msg, c_out, c_out + 2 * r_out))
        rot = rotate_pairs(rot, ctx.cos_t, -ctx.sin_t)
        rot = scatter_add_rows(rot, ctx.dst, ctx.n_nodes)
    else:
        rot = Tensor(np.zeros((ctx.n_nodes, 0, 2)))
    return FeaturePair(scalar=scalar, rot=rot)


class SE2ConvMLP(Module):
    """Message passing with an MLP message function and sum aggregation."""

    def __init__(self, c_in: int, r_in: int, c_out: int, r_out: int,
                 n_base: int, hidden: int, rng: np.random.Generator):
        self.c_in, self.r_in, self.c_out, self.r_out = c_in, r_in, c_out, r_out
        width = _MessageInputs.message_width(c_in, r_in, n_base)
        self.mlp = MLP(width, c_out + 2 * r_out, hidden, n_hidden=1, rng=rng)

    def __call__(self, x: FeaturePair, ctx: MessageContext) -> FeaturePair:
        m_in = _MessageInputs.assemble(x, ctx, self.r_in)
        return _split_and_aggregate(self.mlp(m_in), ctx, self.c_out, self.r_out)


class SE2ConvTrans(Module):
    """Message passing with single-head attention over in-edges.

    In the aligned frame every edge feature is invariant, so the layer norm and
    the attention logits are ordinary dense ops; equivariance is restored by
    the final rotate-back.
    """

    def __init__(self, c_in: int, r_in: int, c_out: int, r_out: int,
                 n_base: int, hidden: int, rng: np.random.Generator):
        self.c_in, self.r_in, self.c_out, self.r_out = c_in, r_in, c_out, r_out
        width = _MessageInputs.message_width(c_in, r_in, n_base)
        self.z_lin = Linear(width, hidden, rng)
        self.z_norm = ChannelLayerNorm(hidden)
        self.att_lin = Linear(hidden, 1, rng)
        self.msg_lin = Linear(hidden, c_out + 2 * r_out, rng)
        self._scale = 1.0 / float(np.sqrt(hidden))

    def __call__(self, x: FeaturePair, ctx: MessageContext) -> FeaturePair:
        m_in = _MessageInputs.assemble(x, ctx, self.r_in)
        z = self.z_lin(m_in)
        logits = self.att_lin(leaky_relu(self.z_norm(z), LEAKY_SLOPE)) * self._scale
        att = segment_softmax(reshape(logits, (-1,)), ctx.dst, ctx.n_nodes)
        msg = mul(self.msg_lin(leaky_relu(z, LEAKY_SLOPE)),
                  reshape(att, (-1, 1)))
        return _split_and_aggregate(msg, ctx, self.c_out, self.r_out)


def se2conv_mlp(x: FeaturePair, ctx: MessageContext, weights: SE2ConvMLP) -> FeaturePair:
    return weights(x, ctx)


def se2conv_trans(x: FeaturePair, ctx: MessageContext, weights: SE2ConvTrans) -> FeaturePair:
    return weights(x, ctx)


class FeedForward(Module):
    """Equal-width SO(2)-MLP with a residual connection.

    With ``pre_norm`` the layer norm sits inside the residual branch, so the
    skip path carries the raw input through untouched.
    """

    def __init__(self, c_s: int, n_r: int, hidden: int, rng: np.random.Generator,
                 pre_norm: bool = False):
        self.norm = SeparableLayerNorm(c_s, n_r) if pre_norm else None
        self.core = SO2MLP(c_s, n_r, c_s, n_r, hidden, n_hidden=2, rng=rng)

    def __call__(self, x: FeaturePair, alpha) -> FeaturePair:
        y = self.core(x if self.norm is None else self.norm(x), alpha)
        return FeaturePair(scalar=x.scalar + y.scalar,
                           rot=x.rot + y.rot if x.n_rot else x.rot)


def feed_forward(x: FeaturePair, alpha, weights: FeedForward) -> FeaturePair:
    return weights(x, alpha)


# --------------------------------------------------------------------------
# embeddings and output heads
# --------------------------------------------------------------------------

class InputEmbedding(Module):
    """Lift raw node features into the hidden widths.

    Scalars go through a plain MLP; rotational features go through an SO(2)-MLP
    aligned by the node angle.
    """

    def __init__(self, c_in: int, r_in: int, c_out: int, r_out: int,
                 hidden: int, rng: np.random.Generator):
        self.c_in, self.r_in = c_in, r_in
        self.scalar_mlp = MLP(c_in, c_out, hidden, n_hidden=1, rng=rng)
        self.rot_so2 = (SO2MLP(0, r_in, 0, r_out, hidden, n_hidden=1, rng=rng)
                        if r_out else None)
        self.c_out, self.r_out = c_out, r_out

    def __call__(self, x: FeaturePair, alpha) -> FeaturePair:
        scalar = self.scalar_mlp(x.scalar)
        if self.rot_so2 is not None:
            rot = self.rot_so2(FeaturePair(scalar=Tensor(np.zeros((x.n_nodes, 0))),
                                           rot=x.rot), alpha).rot
        else:
            rot = Tensor(np.zeros((x.n_nodes, 0, 2)))
        return FeaturePair(scalar=scalar, rot=rot)


class RelativeEmbedding(Module):
    """Geometry-only node embedding: sum of per-edge SO(2)-MLPs of unit vectors.

    Used for tasks whose nodes carry no input features at all; each edge
    contributes a learned response to its direction, aligned by theta.
    """

    def __init__(self, c_out: int, r_out: int, hidden: int, rng: np.random.Generator,
                 use_rotations: bool = True):
        self.use_rotations = use_rotations and r_out > 0
        if self.use_rotations:
            self.edge_so2 = SO2MLP(0, 1, c_out, r_out, hidden, n_hidden=1, rng=rng)
        else:
            self.edge_mlp = MLP(2, c_out + 2 * r_out, hidden, n_hidden=1, rng=rng)
        self.c_out, self.r_out = c_out, r_out

    def __call__(self, graph: geom.Graph2D, ctx: MessageContext) -> FeaturePair:
        _, _, unit, _ = geom.edge_arrays(graph.positions, graph.edges)
        n_edges = len(ctx.edges)
        if self.use_rotations:
            per_edge = self.edge_so2(
                FeaturePair(scalar=Tensor(np.zeros((n_edges, 0))),
                            rot=Tensor(unit[:, None, :])),
                ctx.theta)
            scalar = scatter_add_rows(per_edge.scalar, ctx.dst, ctx.n_nodes)
            rot = scatter_add_rows(per_edge.rot, ctx.dst, ctx.n_nodes)
            return FeaturePair(scalar=scalar, rot=rot)
        h = self.edge_mlp(Tensor(unit))
        summed = scatter_add_rows(h, ctx.dst, ctx.n_nodes)
        scalar = slice_last(summed, 0, self.c_out)
        rot = _unflatten_rot(slice_last(summed, self.c_out, self.c_out + 2 * self.r_out)) \
            if self.r_out else Tensor(np.zeros((ctx.n_nodes, 0, 2)))
        return FeaturePair(scalar=scalar, rot=rot)


def embed_inputs(graph: geom.Graph2D, raw_scalar, raw_rot,
                 embedding: InputEmbedding, rb_cfg: geom.RadialBasisConfig,
                 need_rotations: bool = True):
    """Convenience wrapper: embedded features plus the message context."""
    ctx = build_context(graph, rb_cfg, need_rotations)
    pair = embedding(feature_pair(raw_scalar, raw_rot), ctx.alpha)
    return pair, ctx


class ScalarOutput(Module):
    """Invariant read-out: align, concatenate, MLP to C_out channels."""

    def __init__(self, c_in: int, r_in: int, c_out: int, hidden: int,
                 rng: np.random.Generator):
        self.inner = SO2MLP(c_in, r_in, c_out, 0, hidden, n_hidden=1, rng=rng)

    def __call__(self, x: FeaturePair, alpha) -> Tensor:
        return self.inner(x, alpha).scalar


class RotOutput(Module):
    """Equivariant read-out: align, MLP, restore; returns (N, N_out, 2)."""

    def __init__(self, c_in: int, r_in: int, r_out: int, hidden: int,
                 rng: np.random.Generator):
        self.inner = SO2MLP(c_in, r_in, 0, r_out, hidden, n_hidden=1, rng=rng)

    def __call__(self, x: FeaturePair, alpha) -> Tensor:
        return self.inner(x, alpha).rot


def output_scalar(x: FeaturePair, alpha, weights: ScalarOutput) -> Tensor:
    return weights(x, alpha)


def output_rot(x: FeaturePair, alpha, weights: RotOutput) -> Tensor:
    return weights(x, alpha)


# --------------------------------------------------------------------------
# alternative equivariant ops kept for comparison studies
# --------------------------------------------------------------------------

class RotMatLinear(Module):
    """Mixing of 2-vector channels by learned rotation-scaling matrices.

    Each (out, in) channel pair owns a 2x2 matrix [[w1, -w2], [w2, w1]], i.e. a
    scaled rotation, so the map is equivariant without any alignment. With
    ``cond_scalar_dim`` set, (w1, w2) are produced per node by an MLP over the
    scalar features instead of being free parameters.
    """

    def __init__(self, r_in: int, r_out: int, rng: np.random.Generator,
                 cond_scalar_dim: int = 0):
        self.r_in, self.r_out = r_in, r_out
        self.cond_scalar_dim = cond_scalar_dim
        if cond_scalar_dim:
            out_w = 2 * r_out * r_in
            self.cond_mlp = MLP(cond_scalar_dim, out_w, 3 * out_w, n_hidden=1, rng=rng)
        else:
            self.w1 = engine.uniform_param(rng, (r_in, r_out), fan_in=r_in)
            self.w2 = engine.uniform_param(rng, (r_in, r_out), fan_in=r_in)

    def __call__(self, rot: Tensor, scalars: Tensor | None = None) -> Tensor:
        n = rot.data.shape[0]
        x = slice_last(rot, 0, 1)   # (N, r_in, 1)
        y = slice_last(rot, 1, 2)
        if self.cond_scalar_dim:
            if scalars is None:
                raise ConfigError("RotMatLinear: conditioned variant needs scalar features")
            w = self.cond_mlp(scalars)                     # (N, 2*r_out*r_in)
            w1 = reshape(slice_last(w, 0, self.r_out * self.r_in), (n, self.r_out, self.r_in))
            w2 = reshape(slice_last(w, self.r_out * self.r_in, 2 * self.r_out * self.r_in),
                         (n, self.r_out, self.r_in))
            xb = reshape(x, (n, 1, self.r_in))             # broadcast over out channels
            yb = reshape(y, (n, 1, self.r_in))
            out_x = tsum(mul(w1, xb) - mul(w2, yb), axis=-1)  # (N, r_out)
            out_y = tsum(mul(w2, xb) + mul(w1, yb), axis=-1)
        else:
            xf = reshape(x, (n, self.r_in))
            yf = reshape(y, (n, self.r_in))
            out_x = matmul(xf, self.w1) - matmul(yf, self.w2)
            out_y = matmul(xf, self.w2) + matmul(yf, self.w1)
        stacked = concat([reshape(out_x, (n, self.r_out, 1)),
                          reshape(out_y, (n, self.r_out, 1))], axis=-1)
        return stacked


def rotmat_linear(rot: Tensor, weights: RotMatLinear, scalars: Tensor | None = None) -> Tensor:
    return weights(rot, scalars)


def fourier_pointwise_nonlin(rot: np.ndarray, n_samples: int, fn) -> np.ndarray:
    """Nonlinearity on 2-vectors via point samples on the circle.

    Projects each 2-vector onto ``n_samples`` equiangular unit directions,
    applies ``fn`` to the samples, and least-squares-projects back
    (2/n_samples times the sum against the direction vectors). Operates on
    plain arrays; it exists for equivariance comparisons, not training.
    """
    if n_samples < 2:
        raise ConfigError(f"fourier_pointwise_nonlin: n_samples must be >= 2, got {n_samples}")
    x = np.asarray(rot)
    if x.ndim < 1 or x.shape[-1] != 2:
        raise ConfigError(f"fourier_pointwise_nonlin: trailing axis must be 2, got {x.shape}")
    phi = 2.0 * np.pi * np.arange(n_samples) / n_samples
    dirs = np.stack([np.cos(phi), np.sin(phi)], axis=1).astype(x.dtype)  # (S, 2)
    samples = x @ dirs.T                                                  # (..., S)
    return (2.0 / n_samples) * (fn(samples) @ dirs)
