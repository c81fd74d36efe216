"""Body-part label maps to whole/upper/bottom soft mask targets.

A parse assigns each pixel one of 20 labels (0 = background).  Labels are
grouped into an upper and a bottom region; garments that span the waist
(dress, jumpsuits) sit in both groups.  Binary group masks are then resized
to the attention grid by exact area-weighted averaging, so targets are soft
values in [0, 1] rather than re-thresholded bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pnm import read_pnm, write_pgm

LABELS = [
    "Background",
    "Hat",
    "Hair",
    "Glove",
    "Sunglasses",
    "Upper-clothes",
    "Dress",
    "Coat",
    "Socks",
    "Pants",
    "Jumpsuits",
    "Scarf",
    "Skirt",
    "Face",
    "Left-arm",
    "Right-arm",
    "Left-leg",
    "Right-leg",
    "Left-shoe",
    "Right-shoe",
]

N_LABELS = len(LABELS)


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class GroupingTable:
    """Which labels count as upper body and which as bottom body."""

    upper: frozenset
    bottom: frozenset

    def __post_init__(self):
        upper = frozenset(self.upper)
        bottom = frozenset(self.bottom)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "bottom", bottom)
        if 0 in upper or 0 in bottom:
            raise LabelError("background (0) belongs to no group")
        bad = [v for v in upper | bottom if not 0 < v < N_LABELS]
        if bad:
            raise LabelError(f"labels out of range: {sorted(bad)}")
        missing = set(range(1, N_LABELS)) - (upper | bottom)
        if missing:
            raise LabelError(
                f"every foreground label needs a group; missing {sorted(missing)}"
            )


def default_grouping() -> GroupingTable:
    """Dress and jumpsuits span the waist, so they appear in both groups."""
    upper = {1, 2, 3, 4, 5, 6, 7, 10, 11, 13, 14, 15}
    bottom = {6, 8, 9, 10, 12, 16, 17, 18, 19}
    return GroupingTable(upper=frozenset(upper), bottom=frozenset(bottom))


@dataclass
class MaskSet:
    """Soft whole/upper/bottom targets at attention resolution."""

    whole: np.ndarray
    upper: np.ndarray
    bottom: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.whole, self.upper, self.bottom])


def group_masks(
    labels: np.ndarray, grouping: GroupingTable
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Binary whole/upper/bottom maps at the label map's own resolution."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise LabelError(f"label map must be 2-d, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= N_LABELS:
        raise LabelError(
            f"labels must lie in [0, {N_LABELS - 1}], found "
            f"[{labels.min()}, {labels.max()}]"
        )
    whole = (labels != 0).astype(np.float32)
    upper = np.isin(labels, sorted(grouping.upper)).astype(np.float32)
    bottom = np.isin(labels, sorted(grouping.bottom)).astype(np.float32)
    return whole, upper, bottom


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic overlap weights for box resampling."""
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        lo = o * scale
        hi = (o + 1) * scale
        i0 = int(np.floor(lo))
        i1 = min(int(np.ceil(hi)), n_in)
        for i in range(i0, i1):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                weights[o, i] = overlap / scale
    return weights


def resize_soft(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Area-weighted resize; preserves the global mean to 1e-6."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise LabelError(f"mask must be 2-d, got shape {mask.shape}")
    h_a, w_a = target
    if h_a <= 0 or w_a <= 0:
        raise LabelError(f"target extents must be positive, got {target}")
    rows = _axis_weights(mask.shape[0], h_a)
    cols = _axis_weights(mask.shape[1], w_a)
    out = rows @ mask @ cols.T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def middle_split(whole: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero the bottom half of the map / the top half, a strict partition."""
    whole = np.asarray(whole)
    h = whole.shape[0]
    if h % 2:
        raise LabelError(f"middle split needs an even height, got {h}")
    upper_half = whole.copy()
    upper_half[h // 2 :] = 0
    bottom_half = whole.copy()
    bottom_half[: h // 2] = 0
    return upper_half, bottom_half


def mask_targets(
    labels: np.ndarray,
    grouping: GroupingTable,
    target: tuple[int, int],
) -> MaskSet:
    """Full pipeline: group the parse, then resize each map to the grid."""
    whole, upper, bottom = group_masks(labels, grouping)
    return MaskSet(
        whole=resize_soft(whole, target),
        upper=resize_soft(upper, target),
        bottom=resize_soft(bottom, target),
    )


def load_label_map(path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise LabelError(f"{path} is not a single-channel label map")
    if arr.max() >= N_LABELS:
        raise LabelError(f"{path} holds label {arr.max()}, max is {N_LABELS - 1}")
    return arr


def save_mask_pgm(path, mask: np.ndarray) -> None:
    """Export a [0,1] map for inspection, scaled to 0-255."""
    scaled = np.clip(np.asarray(mask, dtype=np.float64) * 255.0, 0, 255)
    write_pgm(path, np.rint(scaled).astype(np.uint8))
