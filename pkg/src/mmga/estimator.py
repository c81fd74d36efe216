"""Scikit-learn facade: fit on a manifest-backed corpus, transform images to
unit-norm retrieval embeddings, predict training identities.

The estimator keeps its constructor parameters flat and untouched so
get_params/set_params/clone behave the usual way; everything learned lives in
trailing-underscore attributes after fit.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, PKBatchSpec, resize_image
from .losses import LossWeights
from .network import Model, paper_config, toy_config
from .tensor import Tensor
from .trainer import OptimConfig, train


def check_image_batch(X) -> np.ndarray:
    """Coerce input images to (n, 3, H, W) float32 in [0, 1].

    Accepts a single image or a batch, channels-last uint8 (H, W, 3) as
    loaded from PPM files, or channels-first float already scaled to [0, 1].
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected image batch, got array of shape {X.shape}")
    if X.shape[-1] == 3 and X.shape[1] != 3:
        if X.dtype != np.uint8:
            raise ValueError("channels-last images must be uint8")
        X = X.astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    elif X.shape[1] == 3:
        X = X.astype(np.float32)
        if X.min() < 0.0 or X.max() > 1.0:
            raise ValueError("channels-first images must lie in [0, 1]")
    else:
        raise ValueError(f"cannot tell the channel axis of shape {X.shape}")
    return X


class MmgaEmbedder(BaseEstimator, TransformerMixin):
    """Person re-identification embedder with a transformer interface.

    fit trains the selected variant on a corpus (a manifest path or a
    Dataset); transform returns flip-averaged unit-norm embeddings; predict
    names the most likely training identity per image.
    """

    def __init__(
        self,
        variant: str = "mmga",
        preset: str = "toy",
        epochs: int = 40,
        seed: int = 7,
        lr_backbone: float = 0.025,
        lr_other: float = 0.05,
        weight_decay: float = 5e-4,
        decay_factor: float = 0.5,
        decay_every: int = 20,
        p: int = 8,
        k: int = 4,
        margin: float = 0.3,
        lambda0: float = 0.5,
        lambda1: float = 2.0,
        lambda2: float = 0.1,
    ):
        self.variant = variant
        self.preset = preset
        self.epochs = epochs
        self.seed = seed
        self.lr_backbone = lr_backbone
        self.lr_other = lr_other
        self.weight_decay = weight_decay
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.p = p
        self.k = k
        self.margin = margin
        self.lambda0 = lambda0
        self.lambda1 = lambda1
        self.lambda2 = lambda2

    def fit(self, X, y=None):
        """Train on a corpus; X is a manifest path or a Dataset, y is unused."""
        dataset = X if isinstance(X, Dataset) else Dataset(str(X))
        if self.preset == "toy":
            factory = toy_config
        elif self.preset == "paper":
            factory = paper_config
        else:
            raise ValueError(f"preset must be 'toy' or 'paper', got {self.preset!r}")
        config = factory(
            num_identities=dataset.num_train_identities, variant=self.variant
        )
        model = Model(config, seed=self.seed)
        optim = OptimConfig(
            base_lr_backbone=self.lr_backbone,
            base_lr_other=self.lr_other,
            weight_decay=self.weight_decay,
            decay_factor=self.decay_factor,
            decay_every=self.decay_every,
            total_epochs=self.epochs,
        )
        weights = LossWeights(
            lambda0=self.lambda0,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            margin=self.margin,
        )
        self.train_records_ = train(
            model,
            dataset,
            weights,
            optim,
            seed=self.seed,
            batch_spec=PKBatchSpec(p=self.p, k=self.k),
        )
        self.model_ = model
        self.embedding_dim_ = config.d_all
        self.classes_ = np.arange(dataset.num_train_identities)
        return self

    def _forward_batches(self, images: np.ndarray, batch_size: int = 16):
        target = self.model_.config.input_hw
        sized = np.stack([resize_image(img, target) for img in images])
        for start in range(0, len(sized), batch_size):
            chunk = sized[start : start + batch_size]
            yield chunk, self.model_.forward(Tensor(chunk), training=False)

    def transform(self, X) -> np.ndarray:
        """Images to flip-averaged unit-norm embeddings of shape (n, d)."""
        check_is_fitted(self, "model_")
        images = check_image_batch(X)
        rows = []
        for chunk, result in self._forward_batches(images):
            mirrored = self.model_.forward(
                Tensor(chunk[:, :, :, ::-1].copy()), training=False
            )
            raw = (
                result.embeddings.f_cat.data + mirrored.embeddings.f_cat.data
            ) / 2.0
            rows.append(raw)
        raw = np.concatenate(rows, axis=0)
        norms = np.sqrt((raw * raw).sum(axis=1, keepdims=True))
        if (norms <= 1e-12).any():
            raise ValueError("degenerate all-zero embedding")
        return (raw / norms).astype(np.float32)

    def predict(self, X) -> np.ndarray:
        """Most likely training identity (re-indexed label) per image."""
        check_is_fitted(self, "model_")
        images = check_image_batch(X)
        out = []
        for _, result in self._forward_batches(images):
            out.append(result.logits_w.data.argmax(axis=1))
        return np.concatenate(out)
