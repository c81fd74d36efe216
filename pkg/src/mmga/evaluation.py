"""Retrieval evaluation: flip-averaged features, pairwise distances, and
single-query CMC/mAP with cross-camera exclusion.

Features come from the concatenated embedding before normalization; the
original and mirrored passes are averaged raw and normalized once.  Matching
uses Euclidean distance between the unit rows, which ranks identically to
cosine similarity.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .data import Dataset, augment, to_float_image
from .network import Model
from .tensor import Tensor

ROLES = ("query", "gallery")


class EvalError(ValueError):
    pass


@dataclass
class FeatureGallery:
    features: np.ndarray
    person_ids: np.ndarray
    camera_ids: np.ndarray
    role: str

    def __post_init__(self):
        n = self.features.shape[0]
        if len(self.person_ids) != n or len(self.camera_ids) != n:
            raise EvalError("feature/id/camera row counts disagree")
        if self.role not in ROLES:
            raise EvalError(f"role must be one of {ROLES}, got {self.role!r}")


@dataclass
class EvalReport:
    cmc: np.ndarray
    mean_ap: float
    per_query_ap: list
    num_valid_queries: int

    def as_dict(self) -> dict:
        return {
            "rank1": float(self.cmc[0]),
            "rank5": float(self.cmc[min(4, len(self.cmc) - 1)]),
            "rank10": float(self.cmc[min(9, len(self.cmc) - 1)]),
            "mAP": float(self.mean_ap),
            "num_valid_queries": self.num_valid_queries,
            "cmc": [float(v) for v in self.cmc],
            "per_query_ap": [None if v is None else float(v) for v in self.per_query_ap],
        }

    def json_line(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def extract(
    model: Model,
    dataset: Dataset,
    samples: list,
    role: str,
    batch_size: int = 16,
) -> FeatureGallery:
    """Average raw concatenated features of image and mirror, then normalize."""
    rng = np.random.default_rng(0)  # eval augmentation ignores it
    feats = []
    target_hw = model.config.input_hw
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        imgs = []
        for s in chunk:
            img = to_float_image(dataset.image(s))
            img, _ = augment(img, dataset.labels(s), rng, False, target_hw)
            imgs.append(img)
        batch = np.stack(imgs)
        straight = model.forward(Tensor(batch), training=False).embeddings.f_cat.data
        mirrored = model.forward(
            Tensor(batch[:, :, :, ::-1].copy()), training=False
        ).embeddings.f_cat.data
        feats.append((straight + mirrored) / 2.0)
    raw = np.concatenate(feats, axis=0) if feats else np.zeros((0, model.config.d_all))
    norms = np.sqrt((raw * raw).sum(axis=1, keepdims=True))
    if (norms <= 1e-12).any():
        raise EvalError("degenerate all-zero feature row")
    return FeatureGallery(
        features=(raw / norms).astype(np.float32),
        person_ids=np.asarray([s.person_id for s in samples]),
        camera_ids=np.asarray([s.camera_id for s in samples]),
        role=role,
    )


def distances(query: FeatureGallery, gallery: FeatureGallery) -> np.ndarray:
    """Euclidean matrix (n_q, n_g) via explicit differences; exact zeros on
    identical rows."""
    q, g = query.features, gallery.features
    if q.shape[1] != g.shape[1]:
        raise EvalError(f"feature dims differ: {q.shape[1]} vs {g.shape[1]}")
    diff = q[:, None, :].astype(np.float64) - g[None, :, :].astype(np.float64)
    return np.sqrt((diff * diff).sum(axis=2))


def cmc_map(
    dist: np.ndarray,
    query_pids: np.ndarray,
    query_cams: np.ndarray,
    gallery_pids: np.ndarray,
    gallery_cams: np.ndarray,
    max_rank: int = 10,
) -> EvalReport:
    """Single-query protocol: drop same-id same-camera rows and junk ids
    (person_id < 0); queries with no remaining positive are skipped."""
    n_q, n_g = dist.shape
    if len(query_pids) != n_q or len(gallery_pids) != n_g:
        raise EvalError("distance extents do not match id vectors")
    query_pids = np.asarray(query_pids)
    query_cams = np.asarray(query_cams)
    gallery_pids = np.asarray(gallery_pids)
    gallery_cams = np.asarray(gallery_cams)

    cmc_hits = np.zeros(max_rank, dtype=np.int64)
    per_query_ap: list = []
    num_valid = 0
    for i in range(n_q):
        keep = (gallery_pids >= 0) & ~(
            (gallery_pids == query_pids[i]) & (gallery_cams == query_cams[i])
        )
        order = np.argsort(dist[i, keep], kind="stable")
        matches = (gallery_pids[keep][order] == query_pids[i])
        if not matches.any():
            per_query_ap.append(None)
            continue
        num_valid += 1
        first = int(np.argmax(matches))
        if first < max_rank:
            cmc_hits[first:] += 1
        # sequential precision sum, the textbook AP definition
        hits, precision_sum = 0, 0.0
        for rank, matched in enumerate(matches, start=1):
            if matched:
                hits += 1
                precision_sum += hits / rank
        per_query_ap.append(precision_sum / hits)

    if num_valid == 0:
        raise EvalError("no valid queries: every query lacks a cross-camera match")
    aps = np.array([ap for ap in per_query_ap if ap is not None])
    return EvalReport(
        cmc=cmc_hits / num_valid,
        mean_ap=float(np.mean(aps)),
        per_query_ap=per_query_ap,
        num_valid_queries=num_valid,
    )


def render(report: EvalReport) -> str:
    """One-decimal percentages, Rank1/Rank5/Rank10 then mAP."""
    d = report.as_dict()
    return (
        f"Rank1 {100 * d['rank1']:.1f} / Rank5 {100 * d['rank5']:.1f} / "
        f"Rank10 {100 * d['rank10']:.1f} / mAP {100 * d['mAP']:.1f}"
    )


def evaluate(model: Model, dataset: Dataset, max_rank: int = 10) -> EvalReport:
    """Extract both splits and score them under the single-query protocol."""
    query = extract(model, dataset, dataset.query, "query")
    gallery = extract(model, dataset, dataset.gallery, "gallery")
    dist = distances(query, gallery)
    return cmc_map(
        dist,
        query.person_ids,
        query.camera_ids,
        gallery.person_ids,
        gallery.camera_ids,
        max_rank,
    )


# -- embedding export --------------------------------------------------------------

EMB_MAGIC = b"MMGA-EMB"


def save_embeddings(path, gallery: FeatureGallery) -> None:
    """Binary matrix with magic/count/dim header plus a JSON sidecar."""
    feats = np.ascontiguousarray(gallery.features, dtype="<f4")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
        fh.write(feats.tobytes())
    os.replace(tmp, path)
    sidecar = {
        "person_ids": [int(p) for p in gallery.person_ids],
        "camera_ids": [int(c) for c in gallery.camera_ids],
        "role": gallery.role,
    }
    with open(f"{path}.json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")


def load_embeddings(path) -> FeatureGallery:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != EMB_MAGIC:
        raise EvalError(f"bad embedding file magic {raw[:8]!r}")
    count, dim = struct.unpack("<II", raw[8:16])
    expected = 16 + 4 * count * dim
    if len(raw) != expected:
        raise EvalError(f"embedding payload is {len(raw)} bytes, expected {expected}")
    feats = np.frombuffer(raw[16:], dtype="<f4").reshape(count, dim).copy()
    with open(f"{path}.json") as fh:
        sidecar = json.load(fh)
    return FeatureGallery(
        features=feats,
        person_ids=np.asarray(sidecar["person_ids"]),
        camera_ids=np.asarray(sidecar["camera_ids"]),
        role=sidecar["role"],
    )
