"""Dataset plumbing: manifests, PK batch sampling, augmentation, and a
synthetic corpus generator with exact part-label ground truth.

The generator draws stylized figures (hair, face, torso, arms, pants, lower
legs, shoes) over cluttered backgrounds.  Garment colors identify a person;
camera index tints the image only, so the same identity looks different
across cameras while its label map stays pixel-exact.  Occluders overwrite
both image and labels, keeping mask supervision consistent with what is
actually visible.
"""

from __future__ import annotations

import colorsys
import csv
import os
from dataclasses import dataclass

import numpy as np

from .masks import GroupingTable, default_grouping, mask_targets, resize_soft
from .pnm import read_pnm, write_pgm, write_ppm
from .tensor import Tensor

SPLITS = ("train", "query", "gallery")
MANIFEST_HEADER = ["image", "labels", "person_id", "camera_id", "split"]


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    image: str
    labels: str
    person_id: int
    camera_id: int
    split: str


@dataclass(frozen=True)
class PKBatchSpec:
    p: int = 24
    k: int = 4

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise ValueError(f"PK sampling needs P >= 2 and K >= 2, got {self.p}x{self.k}")

    @property
    def batch_size(self) -> int:
        return self.p * self.k


@dataclass
class Manifest:
    samples: list
    num_train_identities: int
    counts: dict

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]


def load_manifest(path) -> Manifest:
    """Parse the CSV, resolve paths, and densely re-index train identities."""
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    samples: list[Sample] = []
    seen_paths = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(
                f"manifest header must be {','.join(MANIFEST_HEADER)}, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ManifestError(f"line {lineno}: expected 5 fields, got {len(row)}")
            image, labels, pid, cam, split = [f.strip() for f in row]
            if split not in SPLITS:
                raise ManifestError(f"line {lineno}: unknown split {split!r}")
            try:
                pid_i, cam_i = int(pid), int(cam)
            except ValueError as exc:
                raise ManifestError(f"line {lineno}: non-integer id field") from exc
            if image in seen_paths:
                raise ManifestError(f"line {lineno}: duplicate image path {image!r}")
            seen_paths.add(image)

            def resolve(p):
                return p if os.path.isabs(p) else os.path.join(base, p)

            samples.append(
                Sample(resolve(image), resolve(labels), pid_i, cam_i, split)
            )

    train_ids = sorted({s.person_id for s in samples if s.split == "train"})
    if not train_ids:
        raise ManifestError("no training identities in manifest")
    remap = {pid: i for i, pid in enumerate(train_ids)}
    for s in samples:
        if s.split == "train":
            s.person_id = remap[s.person_id]
    counts = {name: sum(1 for s in samples if s.split == name) for name in SPLITS}
    return Manifest(samples, len(train_ids), counts)


def pk_sample(
    samples: list, spec: PKBatchSpec, rng: np.random.Generator
) -> list:
    """P distinct identities, K images each; short identities repeat images."""
    by_id: dict[int, list] = {}
    for s in samples:
        by_id.setdefault(s.person_id, []).append(s)
    ids = sorted(by_id)
    if len(ids) < spec.p:
        raise ValueError(f"need {spec.p} identities, dataset has {len(ids)}")
    chosen = rng.choice(ids, size=spec.p, replace=False)
    batch = []
    for pid in chosen:
        pool = by_id[pid]
        replace = len(pool) < spec.k
        picks = rng.choice(len(pool), size=spec.k, replace=replace)
        batch.extend(pool[i] for i in picks)
    return batch


# -- augmentation ------------------------------------------------------------------


@dataclass(frozen=True)
class EraseParams:
    probability: float = 0.5
    area_range: tuple = (0.02, 0.4)
    aspect_range: tuple = (0.3, 3.33)
    attempts: int = 100


def to_float_image(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return (img.astype(np.float32) / 255.0).transpose(2, 0, 1)


def resize_image(img: np.ndarray, target_hw: tuple) -> np.ndarray:
    """Area-weighted per-channel resize of a (3, H, W) float image."""
    if img.shape[1:] == tuple(target_hw):
        return img
    return np.stack([resize_soft(ch, target_hw) for ch in img])


def resize_labels(labels: np.ndarray, target_hw: tuple) -> np.ndarray:
    """Nearest-neighbor resize; labels are categorical."""
    h_in, w_in = labels.shape
    h_out, w_out = target_hw
    if (h_in, w_in) == (h_out, w_out):
        return labels
    rows = np.minimum((np.arange(h_out) + 0.5) * h_in / h_out, h_in - 1).astype(int)
    cols = np.minimum((np.arange(w_out) + 0.5) * w_in / w_out, w_in - 1).astype(int)
    return labels[np.ix_(rows, cols)]


def hflip_image(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def hflip_labels(labels: np.ndarray) -> np.ndarray:
    return labels[:, ::-1].copy()


def random_erase(
    img: np.ndarray,
    rng: np.random.Generator,
    fill: np.ndarray,
    params: EraseParams = EraseParams(),
) -> tuple[np.ndarray, tuple | None]:
    """Blank one random rectangle with the fill color; image only.

    Returns the (possibly unchanged) image and the applied rectangle as
    (top, left, height, width), or None when no attempt fit.
    """
    _, h, w = img.shape
    for _ in range(params.attempts):
        area = rng.uniform(*params.area_range) * h * w
        aspect = rng.uniform(*params.aspect_range)
        eh = int(round(np.sqrt(area * aspect)))
        ew = int(round(np.sqrt(area / aspect)))
        if eh < 1 or ew < 1 or eh > h or ew > w:
            continue
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        out = img.copy()
        out[:, top : top + eh, left : left + ew] = fill.reshape(3, 1, 1)
        return out, (top, left, eh, ew)
    return img, None


def augment(
    img: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    train: bool,
    target_hw: tuple,
    fill: np.ndarray | None = None,
    erase: EraseParams = EraseParams(),
) -> tuple[np.ndarray, np.ndarray]:
    """Resize always; in train mode flip image+labels together and erase the
    image alone.  Label maps are never erased: the person is still there.
    """
    img = resize_image(img, target_hw)
    labels = resize_labels(labels, target_hw)
    if not train:
        return img, labels
    if rng.uniform() < 0.5:
        img = hflip_image(img)
        labels = hflip_labels(labels)
    if rng.uniform() < erase.probability:
        if fill is None:
            fill = img.mean(axis=(1, 2))
        img, _ = random_erase(img, rng, fill, erase)
    return img, labels


# -- dataset wrapper ---------------------------------------------------------------


class Dataset:
    """Manifest plus cached pixel data and the train-set mean fill color."""

    def __init__(self, manifest_path, grouping: GroupingTable | None = None):
        self.manifest = load_manifest(manifest_path)
        self.grouping = grouping if grouping is not None else default_grouping()
        self._images: dict[str, np.ndarray] = {}
        self._labels: dict[str, np.ndarray] = {}
        self._mean: np.ndarray | None = None

    @property
    def train(self) -> list:
        return self.manifest.split("train")

    @property
    def query(self) -> list:
        return self.manifest.split("query")

    @property
    def gallery(self) -> list:
        return self.manifest.split("gallery")

    @property
    def num_train_identities(self) -> int:
        return self.manifest.num_train_identities

    def image(self, sample: Sample) -> np.ndarray:
        if sample.image not in self._images:
            self._images[sample.image] = read_pnm(sample.image)
        return self._images[sample.image]

    def labels(self, sample: Sample) -> np.ndarray:
        if sample.labels not in self._labels:
            self._labels[sample.labels] = read_pnm(sample.labels)
        return self._labels[sample.labels]

    def train_mean(self) -> np.ndarray:
        """Per-channel mean of the training images, the erase fill color."""
        if self._mean is None:
            acc = np.zeros(3, dtype=np.float64)
            for s in self.train:
                acc += to_float_image(self.image(s)).mean(axis=(1, 2))
            self._mean = (acc / max(len(self.train), 1)).astype(np.float32)
        return self._mean


def make_batch(
    dataset: Dataset,
    samples: list,
    target_hw: tuple,
    grid_hw: tuple,
    rng: np.random.Generator,
    train: bool,
):
    """Assemble (images, ids, per-image mask targets) for one step."""
    fill = dataset.train_mean() if train else None
    imgs, ids, mask_sets = [], [], []
    for s in samples:
        img = to_float_image(dataset.image(s))
        lab = dataset.labels(s)
        img, lab = augment(img, lab, rng, train, target_hw, fill)
        imgs.append(img)
        ids.append(s.person_id)
        mask_sets.append(mask_targets(lab, dataset.grouping, grid_hw))
    return Tensor(np.stack(imgs)), np.asarray(ids), mask_sets


def steps_per_epoch(num_identities: int, spec: PKBatchSpec) -> int:
    """An epoch covers every identity at least once."""
    return max(1, int(np.ceil(num_identities / spec.p)))


# -- synthetic corpus --------------------------------------------------------------

# part labels used by the generator (all covered by the default grouping)
_HAIR, _UPPER, _PANTS, _FACE = 2, 5, 9, 13
_LARM, _RARM, _LLEG, _RLEG, _LSHOE, _RSHOE = 14, 15, 16, 17, 18, 19

_CAMERA_TINT = np.array(
    [[1.00, 0.92, 0.86], [0.86, 0.94, 1.00], [0.95, 1.00, 0.90]], dtype=np.float32
)


def _hsv(hue: float, sat: float, val: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, sat, val))


def _identity_style(index: int, rng: np.random.Generator) -> dict:
    """Garment, skin, and hair colors that characterize one person.

    Garment hues follow a golden-ratio sequence plus jitter, so any number of
    identities stays maximally spread on the color wheel; backgrounds are kept
    gray, making saturated garments the reliable identity signal.
    """
    golden = 0.61803398875
    upper_hue = (index * golden + rng.uniform(-0.04, 0.04)) % 1.0
    bottom_hue = (upper_hue + 0.37 + rng.uniform(-0.08, 0.08)) % 1.0
    upper = _hsv(upper_hue, rng.uniform(0.75, 1.0), rng.uniform(0.7, 1.0))
    bottom = _hsv(bottom_hue, rng.uniform(0.75, 1.0), rng.uniform(0.7, 1.0))
    skin = np.array([0.85, 0.70, 0.55]) * rng.uniform(0.8, 1.05)
    hair = np.array(
        [[0.1, 0.08, 0.05], [0.35, 0.2, 0.08], [0.8, 0.7, 0.3], [0.25, 0.25, 0.28]]
    )[rng.integers(0, 4)]
    return {
        "upper": upper.clip(0, 1),
        "bottom": bottom.clip(0, 1),
        "skin": skin.clip(0, 1),
        "hair": hair,
    }


def _gray(rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
    """Near-gray color: clutter stays desaturated so garments stand out."""
    value = rng.uniform(lo, hi)
    return np.clip(value + rng.uniform(-0.05, 0.05, size=3), 0, 1)


def _clutter_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    img = np.tile(_gray(rng, 0.35, 0.65).reshape(1, 1, 3), (h, w, 1))
    for _ in range(rng.integers(4, 9)):
        bh = int(rng.integers(h // 8, h // 2))
        bw = int(rng.integers(w // 8, max(w // 2, w // 8 + 1)))
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        img[top : top + bh, left : left + bw] = _gray(rng, 0.2, 0.8)
    return img


def _paint(img, lab, rows, cols, color, label):
    img[rows[0] : rows[1], cols[0] : cols[1]] = color
    lab[rows[0] : rows[1], cols[0] : cols[1]] = label


def _render_person(
    rng: np.random.Generator, style: dict, h: int, w: int
) -> tuple[np.ndarray, np.ndarray]:
    """One figure over clutter; returns float image (H,W,3) and labels (H,W)."""
    img = _clutter_background(rng, h, w)
    lab = np.zeros((h, w), dtype=np.uint8)

    scale = rng.uniform(0.95, 1.0)
    cx = w // 2 + int(rng.integers(-w // 16, w // 16 + 1))
    top = int(rng.integers(0, h // 24 + 1))

    def sy(frac):  # vertical anchor in pixels
        return top + int(round(frac * scale * h))

    # wide blocky parts: body-part cells stay near-saturated even on a
    # coarse attention grid, so soft mask targets keep peaks close to 1
    head_w = max(4, int(round(0.44 * scale * w)))
    torso_w = max(6, int(round(0.80 * scale * w)))
    leg_w = max(2, int(round(0.30 * scale * w)))
    arm_w = max(2, int(round(0.10 * scale * w)))

    def span(center, width):
        lo = max(0, center - width // 2)
        return lo, min(w, lo + width)

    hair_rows = (sy(0.02), sy(0.10))
    face_rows = (sy(0.10), sy(0.22))
    torso_rows = (sy(0.22), sy(0.52))
    pants_rows = (sy(0.52), sy(0.76))
    leg_rows = (sy(0.76), sy(0.90))
    shoe_rows = (sy(0.90), sy(0.96))

    _paint(img, lab, hair_rows, span(cx, head_w), style["hair"], _HAIR)
    _paint(img, lab, face_rows, span(cx, head_w), style["skin"], _FACE)
    _paint(img, lab, torso_rows, span(cx, torso_w), style["upper"], _UPPER)
    # arms hug the torso on both sides
    arm_rows = (torso_rows[0], torso_rows[1] - 1)
    left_arm = span(cx - torso_w // 2 - arm_w // 2, arm_w)
    right_arm = span(cx + torso_w // 2 + arm_w // 2, arm_w)
    _paint(img, lab, arm_rows, left_arm, style["skin"], _LARM)
    _paint(img, lab, arm_rows, right_arm, style["skin"], _RARM)
    _paint(img, lab, pants_rows, span(cx, torso_w - 2), style["bottom"], _PANTS)
    left_leg = span(cx - torso_w // 4, leg_w)
    right_leg = span(cx + torso_w // 4, leg_w)
    _paint(img, lab, leg_rows, left_leg, style["skin"], _LLEG)
    _paint(img, lab, leg_rows, right_leg, style["skin"], _RLEG)
    _paint(img, lab, shoe_rows, left_leg, np.array([0.08, 0.06, 0.05]), _LSHOE)
    _paint(img, lab, shoe_rows, right_leg, np.array([0.08, 0.06, 0.05]), _RSHOE)

    # occasional occluder hides part of the figure in image AND labels
    if rng.uniform() < 0.2:
        oh = int(rng.integers(h // 10, h // 6))
        ow = int(rng.integers(w // 4, w // 2))
        otop = int(rng.integers(h // 2, h - oh))
        oleft = int(rng.integers(0, w - ow + 1))
        img[otop : otop + oh, oleft : oleft + ow] = _gray(rng, 0.25, 0.55)
        lab[otop : otop + oh, oleft : oleft + ow] = 0

    noise = rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img + noise, 0, 1), lab


def synth_generate(
    num_ids: int,
    per_id: int,
    out_dir,
    seed: int,
    image_hw: tuple = (96, 32),
    cameras: int = 2,
) -> str:
    """Write images/, labels/, and manifest.csv; returns the manifest path.

    Per identity the last three indices become one query and two gallery
    images on alternating cameras, so every query has a cross-camera
    positive; everything earlier is train.
    """
    if per_id < 4:
        raise ValueError("need per_id >= 4 to fill train, query, and gallery")
    if cameras < 2:
        raise ValueError("cross-camera evaluation needs at least 2 cameras")
    h, w = image_hw
    rng = np.random.default_rng(seed)
    img_dir = os.path.join(out_dir, "images")
    lab_dir = os.path.join(out_dir, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)

    rows = []
    for pid in range(num_ids):
        style = _identity_style(pid, rng)
        for idx in range(per_id):
            cam = idx % cameras
            img, lab = _render_person(rng, style, h, w)
            img = np.clip(img * _CAMERA_TINT[cam % len(_CAMERA_TINT)], 0, 1)
            stem = f"id{pid:04d}_c{cam}_{idx:02d}"
            write_ppm(os.path.join(img_dir, f"{stem}.ppm"), np.rint(img * 255))
            write_pgm(os.path.join(lab_dir, f"{stem}.pgm"), lab)
            if idx == per_id - 1:
                split = "query"
            elif idx >= per_id - 3:
                split = "gallery"
            else:
                split = "train"
            rows.append(
                [f"images/{stem}.ppm", f"labels/{stem}.pgm", pid, cam, split]
            )

    manifest_path = os.path.join(out_dir, "manifest.csv")
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return manifest_path
