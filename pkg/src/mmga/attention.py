"""Soft attention over feature maps: a spatial map, a channel vector, and
their broadcast product.

The spatial path is three 1x1 convolutions (channel counts c_in, c_in/s,
c_in/s^2, 1) with an optional 2x2 average pool between the first two, then
sigmoid plus 1.0, so spatial weights live in (1, 2) and never suppress a
location to zero.  The channel path pools globally, squeezes to c_in/r,
expands to c_out, and applies a plain sigmoid (no +1.0).  Freshly built
modules zero their final layers, which pins the combined scale to exactly
0.75 at cold start while earlier layers keep useful gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DEGENERATE_RANGE = 1e-7


@dataclass(frozen=True)
class AttentionConfig:
    c_in: int
    c_out: int
    s: int = 8
    r: int = 8
    pool_between_conv1_and_conv2: bool = False

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.s, self.r) <= 0:
            raise ShapeError("attention extents must be positive")
        if self.c_in % self.s or self.c_in % (self.s * self.s):
            raise ShapeError(
                f"c_in={self.c_in} must divide by s={self.s} and s^2"
            )
        if self.c_in % self.r:
            raise ShapeError(f"c_in={self.c_in} must divide by r={self.r}")


@dataclass
class AttentionOutput:
    S: Tensor  # (n, 1, h, w), values in (1, 2)
    C: Tensor  # (n, c_out), values in (0, 1)
    A: Tensor  # (n, c_out, h, w)
    S_norm: Tensor  # (n, 1, h, w), values in [0, 1]


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


@dataclass
class SpatialParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor

    @staticmethod
    def init(cfg: AttentionConfig, rng: np.random.Generator) -> "SpatialParams":
        c1, c2 = cfg.c_in // cfg.s, cfg.c_in // (cfg.s * cfg.s)

        def conv(c_out, c_in):
            return Tensor(
                he_uniform(rng, (c_out, c_in, 1, 1), c_in), requires_grad=True
            )

        def bias(c):
            return Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)

        p = SpatialParams(
            conv1_w=conv(c1, cfg.c_in),
            conv1_b=bias(c1),
            conv2_w=conv(c2, c1),
            conv2_b=bias(c2),
            conv3_w=conv(1, c2),
            conv3_b=bias(1),
        )
        # Final layer starts at zero: sigmoid(0)+1 pins S to 1.5 on step one.
        p.conv3_w.data[:] = 0.0
        return p

    def tensors(self) -> list[Tensor]:
        return [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.conv3_w,
            self.conv3_b,
        ]


@dataclass
class ChannelParams:
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @staticmethod
    def init(cfg: AttentionConfig, rng: np.random.Generator) -> "ChannelParams":
        hidden = cfg.c_in // cfg.r
        p = ChannelParams(
            fc1_w=Tensor(he_uniform(rng, (hidden, cfg.c_in), cfg.c_in), requires_grad=True),
            fc1_b=Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
            fc2_w=Tensor(he_uniform(rng, (cfg.c_out, hidden), hidden), requires_grad=True),
            fc2_b=Tensor(np.zeros(cfg.c_out, dtype=np.float32), requires_grad=True),
        )
        # Zero expansion layer: sigmoid(0) pins C to 0.5 at cold start.
        p.fc2_w.data[:] = 0.0
        return p

    def tensors(self) -> list[Tensor]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]


def spatial_attention(x: Tensor, params: SpatialParams, cfg: AttentionConfig) -> Tensor:
    if x.shape[1] != cfg.c_in:
        raise ShapeError(f"spatial attention wants {cfg.c_in} channels, got {x.shape[1]}")
    h = T.conv2d(x, params.conv1_w, params.conv1_b)
    if cfg.pool_between_conv1_and_conv2:
        h = T.avg_pool_2x2(h)
    h = T.conv2d(h, params.conv2_w, params.conv2_b)
    h = T.conv2d(h, params.conv3_w, params.conv3_b)
    return T.add(T.sigmoid(h), Tensor(np.float32(1.0)))


def channel_attention(x: Tensor, params: ChannelParams, cfg: AttentionConfig) -> Tensor:
    if x.shape[1] != cfg.c_in:
        raise ShapeError(f"channel attention wants {cfg.c_in} channels, got {x.shape[1]}")
    pooled = T.global_avg_pool(x)
    h = T.linear(pooled, params.fc1_w, params.fc1_b)
    h = T.linear(h, params.fc2_w, params.fc2_b)
    return T.sigmoid(h)


def combine(S: Tensor, C: Tensor) -> Tensor:
    """Broadcast product over channels and space: A[n,c,h,w] = S[n,1,h,w]*C[n,c]."""
    if S.shape[0] != C.shape[0]:
        raise ShapeError(f"batch mismatch: S {S.shape} vs C {C.shape}")
    c_grid = T.reshape(C, (C.shape[0], C.shape[1], 1, 1))
    return T.elementwise_mul(S, c_grid)


def normalize_spatial(S: Tensor) -> Tensor:
    """Per-image min-max rescale to [0,1]; constant maps go to all zeros.

    Gradients flow through the min/max (first-occurrence subgradient).  The
    degenerate branch is decided from forward values, so a map whose range
    is below 1e-7 contributes an exact zero with zero gradient.
    """
    if S.ndim != 4 or S.shape[1] != 1:
        raise ShapeError(f"expected a single-channel map, got {S.shape}")
    n, _, h, w = S.shape
    flat = T.reshape(S, (n, h * w))
    mn = T.reduce_min(flat, axis=1)
    mx = T.reduce_max(flat, axis=1)
    spread = T.sub(mx, mn)
    degenerate = (spread.data < DEGENERATE_RANGE).astype(S.dtype.type)
    shifted = T.sub(flat, T.reshape(mn, (n, 1)))
    # Divide before masking: (max-min)/(max-min) is exactly 1 in floats.
    denom = T.reshape(T.add(spread, Tensor(degenerate)), (n, 1))
    out = T.mul(T.div(shifted, denom), T.reshape(Tensor(1.0 - degenerate), (n, 1)))
    return T.reshape(out, (n, 1, h, w))


class AttentionModule:
    """One attention head: spatial and channel paths plus their product."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.spatial = SpatialParams.init(cfg, rng)
        self.channel = ChannelParams.init(cfg, rng)

    def parameters(self) -> list[Tensor]:
        return self.spatial.tensors() + self.channel.tensors()

    def forward(self, x: Tensor) -> AttentionOutput:
        S = spatial_attention(x, self.spatial, self.cfg)
        C = channel_attention(x, self.channel, self.cfg)
        return AttentionOutput(S=S, C=C, A=combine(S, C), S_norm=normalize_spatial(S))
