"""SGD with per-group learning rates, step decay, and the training loop.

The backbone (stem and residual stages) trains at half the rate of the
attention modules, heads, and classifiers.  Plain SGD, no momentum; weight
decay hits every learnable tensor including batch-norm scales.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import losses as L
from .data import Dataset, PKBatchSpec, make_batch, pk_sample, steps_per_epoch
from .losses import LossReport, LossWeights
from .network import Model, save_checkpoint, variant_mask_targets
from .tensor import Tensor


class TrainerError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    base_lr_backbone: float = 0.05
    base_lr_other: float = 0.1
    weight_decay: float = 5e-4
    decay_factor: float = 0.5
    decay_every: int = 90
    total_epochs: int = 900

    def __post_init__(self):
        if self.base_lr_backbone <= 0 or self.base_lr_other <= 0:
            raise ValueError("learning rates must be positive")
        if self.decay_every < 1:
            raise ValueError("decay_every must be at least 1")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be non-negative")


def lr_at(epoch: int, cfg: OptimConfig, group: str) -> float:
    """Step-decay schedule: halve the base rate every decay_every epochs."""
    if group == "backbone":
        base = cfg.base_lr_backbone
    elif group == "other":
        base = cfg.base_lr_other
    else:
        raise ValueError(f"unknown parameter group {group!r}")
    return base * cfg.decay_factor ** (epoch // cfg.decay_every)


def sgd_step(params, rate: float, weight_decay: float) -> None:
    """w <- w - rate * (g + weight_decay * w), then clear the gradients."""
    for p in params:
        if p.grad is None:
            raise TrainerError("parameter has no gradient; run backward first")
        p.data = (p.data - rate * (p.grad + weight_decay * p.data)).astype(
            p.data.dtype, copy=False
        )
        p.zero_grad()


def batch_mask_targets(variant: str, mask_sets: list) -> list:
    """Stack per-image targets into one (n, 1, h, w) tensor per guided map."""
    per_image = [variant_mask_targets(variant, ms) for ms in mask_sets]
    if not per_image or not per_image[0]:
        return []
    return [
        Tensor(np.stack([maps[b] for maps in per_image])[:, None, :, :])
        for b in range(len(per_image[0]))
    ]


def compute_losses(
    result,
    ids: np.ndarray,
    targets: list,
    weights: LossWeights,
    batch_spec: PKBatchSpec,
):
    """Variant-aware assembly of every term; returns (total Tensor, LossReport)."""
    softmax_w = L.softmax_loss(result.logits_w, ids)
    softmax_l = (
        L.softmax_loss(result.logits_l, ids) if result.logits_l is not None else None
    )
    triplet = L.batch_hard_triplet(
        result.embeddings.f_all, ids, batch_spec.p, batch_spec.k, weights.margin
    )

    parts = {"l1w": 0.0, "l2w": 0.0, "l2u": 0.0, "l2b": 0.0}
    attention = None
    if targets:
        rmse = [
            L.attention_rmse(out.S_norm, tgt)
            for out, tgt in zip(result.attention, targets)
        ]
        keys = ["l1w", "l2w", "l2u", "l2b"][: len(rmse)]
        parts.update(dict(zip(keys, rmse)))
        attention = L.attention_total(
            parts["l1w"], parts["l2w"], parts["l2u"], parts["l2b"], weights.lambda0
        )

    total = L.total_loss(
        softmax_w, softmax_l, triplet, attention, weights.lambda1, weights.lambda2
    )

    def val(x):
        return float(x.data) if isinstance(x, Tensor) else float(x)

    report = LossReport(
        l1w=val(parts["l1w"]),
        l2w=val(parts["l2w"]),
        l2u=val(parts["l2u"]),
        l2b=val(parts["l2b"]),
        softmax_w=val(softmax_w),
        softmax_l=val(softmax_l) if softmax_l is not None else 0.0,
        triplet=val(triplet),
        attention=val(attention) if attention is not None else 0.0,
        total=val(total),
    )
    return total, report


def train(
    model: Model,
    dataset: Dataset,
    weights: LossWeights,
    optim: OptimConfig,
    seed: int,
    batch_spec: PKBatchSpec = PKBatchSpec(),
    out_dir=None,
    checkpoint_every: int = 0,
) -> list:
    """Run the full loop; returns one log record (dict) per step.

    Writes train_log.jsonl plus checkpoints/final under out_dir when given;
    checkpoint_every > 0 adds periodic epoch snapshots.  With zero epochs
    only the initial state is saved.
    """
    rng = np.random.default_rng(seed)
    groups = model.param_groups()
    steps = steps_per_epoch(dataset.num_train_identities, batch_spec)
    grid = model.config.attention_grid
    records = []

    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w")

    try:
        for epoch in range(optim.total_epochs):
            rate_b = lr_at(epoch, optim, "backbone")
            rate_o = lr_at(epoch, optim, "other")
            for step in range(steps):
                batch = pk_sample(dataset.train, batch_spec, rng)
                images, ids, mask_sets = make_batch(
                    dataset, batch, model.config.input_hw, grid, rng, train=True
                )
                result = model.forward(images, training=True)
                targets = batch_mask_targets(model.config.variant, mask_sets)
                total, report = compute_losses(
                    result, ids, targets, weights, batch_spec
                )
                if not np.isfinite(report.total):
                    raise TrainerError(
                        f"total loss is non-finite at epoch {epoch} step {step}"
                    )
                total.backward()
                sgd_step(groups["backbone"], rate_b, optim.weight_decay)
                sgd_step(groups["other"], rate_o, optim.weight_decay)

                record = dict(
                    epoch=epoch,
                    step=step,
                    lr_backbone=rate_b,
                    lr_other=rate_o,
                    **report.as_dict(),
                )
                records.append(record)
                if log_fh is not None:
                    log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if (
                out_dir is not None
                and checkpoint_every > 0
                and (epoch + 1) % checkpoint_every == 0
            ):
                save_checkpoint(
                    model,
                    os.path.join(out_dir, "checkpoints", f"epoch_{epoch + 1:04d}"),
                    epoch + 1,
                )
    finally:
        if log_fh is not None:
            log_fh.close()

    if out_dir is not None:
        save_checkpoint(
            model, os.path.join(out_dir, "checkpoints", "final"), optim.total_epochs
        )
    return records
