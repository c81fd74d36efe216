"""Training losses: mask-guided attention RMSE, softmax, batch-hard triplet,
and their weighted combination.

The attention term divides by the batch size alone, not by pixel count, so
its magnitude scales with mask area; that is the canonical form and the
default here.  A per-pixel mean exists behind a flag for experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

_BIG = 1e9  # additive mask that exiles entries from a max/min without NaN risk


@dataclass(frozen=True)
class LossWeights:
    lambda0: float = 0.5
    lambda1: float = 2.0
    lambda2: float = 0.1
    margin: float = 0.3

    def __post_init__(self):
        if min(self.lambda0, self.lambda1, self.lambda2, self.margin) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    l1w: float = 0.0
    l2w: float = 0.0
    l2u: float = 0.0
    l2b: float = 0.0
    softmax_w: float = 0.0
    softmax_l: float = 0.0
    triplet: float = 0.0
    attention: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return {k: round(float(v), 6) for k, v in self.__dict__.items()}

    def json_line(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def _scalar(value, dtype=np.float64) -> Tensor:
    """Wrap a plain number without changing the dtype of the graph it joins."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def attention_rmse(s_norm: Tensor, target: Tensor, per_pixel: bool = False) -> Tensor:
    """Root of the summed squared map error, divided by batch size.

    ``per_pixel=True`` divides by the full element count instead, which keeps
    the scale independent of the attention grid.
    """
    if s_norm.shape != target.shape:
        raise ShapeError(f"map shapes differ: {s_norm.shape} vs {target.shape}")
    if target.data.min() < 0 or target.data.max() > 1:
        raise ValueError("mask targets must lie in [0, 1]")
    n = s_norm.shape[0]
    divisor = float(s_norm.size if per_pixel else n)
    diff = T.sub(target, s_norm)
    total = T.reduce_sum(T.mul(diff, diff))
    return T.sqrt(T.div(total, Tensor(np.asarray(divisor, dtype=s_norm.dtype))))


def attention_total(l1w, l2w, l2u, l2b, lambda0: float = 0.5) -> Tensor:
    """First-module whole + second-module whole + weighted upper and bottom."""
    ref = next((v for v in (l1w, l2w, l2u, l2b) if isinstance(v, Tensor)), None)
    dt = ref.dtype if ref is not None else np.float64
    lam = _scalar(lambda0, dt)
    parts = T.add(_scalar(l1w, dt), _scalar(l2w, dt))
    parts = T.add(parts, T.mul(lam, _scalar(l2u, dt)))
    return T.add(parts, T.mul(lam, _scalar(l2b, dt)))


def softmax_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true identity."""
    return T.cross_entropy(logits, labels)


def _pk_check(identities: np.ndarray, p_ids: int, k_images: int) -> None:
    n = identities.shape[0]
    if p_ids < 2 or k_images < 2:
        raise ValueError(f"need at least 2 identities and 2 images each, got P={p_ids} K={k_images}")
    if n != p_ids * k_images:
        raise ValueError(f"batch of {n} does not factor as P={p_ids} x K={k_images}")
    _, counts = np.unique(identities, return_counts=True)
    if len(counts) != p_ids or not np.all(counts == k_images):
        raise ValueError("each identity must appear exactly K times in the batch")


def batch_hard_triplet(
    f_all: Tensor,
    identities: np.ndarray,
    p_ids: int,
    k_images: int,
    margin: float = 0.3,
) -> Tensor:
    """Mean hinge over anchors of hardest-positive minus hardest-negative.

    Distances are Euclidean between feature rows; the hardest positive is the
    farthest same-identity row, the hardest negative the nearest row of any
    other identity.
    """
    identities = np.asarray(identities)
    _pk_check(identities, p_ids, k_images)
    n, d = f_all.shape

    a = T.reshape(f_all, (n, 1, d))
    b = T.reshape(f_all, (1, n, d))
    diff = T.sub(a, b)
    dist = T.sqrt(T.reduce_sum(T.mul(diff, diff), axis=2))  # (n, n)

    same = identities[:, None] == identities[None, :]
    dt = f_all.dtype
    exile_neg = Tensor(np.where(same, 0.0, -_BIG).astype(dt))
    exile_pos = Tensor(np.where(same, _BIG, 0.0).astype(dt))
    hardest_pos = T.reduce_max(T.add(dist, exile_neg), axis=1)
    hardest_neg = T.reduce_min(T.add(dist, exile_pos), axis=1)

    hinge = T.relu(
        T.add(T.sub(hardest_pos, hardest_neg), Tensor(np.asarray(margin, dtype=dt)))
    )
    return T.reduce_mean(hinge)


def total_loss(
    softmax_w: Tensor,
    softmax_l: Tensor | None,
    triplet: Tensor,
    attention: Tensor | None,
    lambda1: float = 2.0,
    lambda2: float = 0.1,
) -> Tensor:
    """Softmax terms plus weighted triplet plus weighted attention guidance.

    Variants without a local head pass softmax_l=None; variants without mask
    guidance pass attention=None and the term vanishes.
    """
    out = softmax_w
    if softmax_l is not None:
        out = T.add(out, softmax_l)
    out = T.add(out, T.mul(_scalar(lambda1, out.dtype), triplet))
    if attention is not None:
        out = T.add(out, T.mul(_scalar(lambda2, out.dtype), attention))
    return out
