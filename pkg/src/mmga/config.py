"""Run configuration: one JSON document pinning the model, losses, optimizer,
batch shape, label grouping, paths, and seed.

An empty file (or {}) reproduces the full-scale defaults; any key the
schema does not know is an error rather than a silent no-op.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace

from .data import PKBatchSpec
from .losses import LossWeights
from .masks import GroupingTable, default_grouping
from .network import ModelConfig, paper_config, toy_config
from .trainer import OptimConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    weights: LossWeights
    optim: OptimConfig
    batch: PKBatchSpec
    grouping: GroupingTable
    data_dir: str | None = None
    out_dir: str | None = None
    seed: int = 7

    def as_dict(self) -> dict:
        return {
            "model": self.model.as_dict(),
            "weights": {
                "lambda0": self.weights.lambda0,
                "lambda1": self.weights.lambda1,
                "lambda2": self.weights.lambda2,
                "margin": self.weights.margin,
            },
            "optim": {
                "base_lr_backbone": self.optim.base_lr_backbone,
                "base_lr_other": self.optim.base_lr_other,
                "weight_decay": self.optim.weight_decay,
                "decay_factor": self.optim.decay_factor,
                "decay_every": self.optim.decay_every,
                "total_epochs": self.optim.total_epochs,
            },
            "batch": {"p": self.batch.p, "k": self.batch.k},
            "grouping": {
                "upper": sorted(self.grouping.upper),
                "bottom": sorted(self.grouping.bottom),
            },
            "paths": {"data": self.data_dir, "out": self.out_dir},
            "seed": self.seed,
        }


def default_run_config() -> RunConfig:
    return RunConfig(
        model=paper_config(num_identities=751),
        weights=LossWeights(),
        optim=OptimConfig(),
        batch=PKBatchSpec(),
        grouping=default_grouping(),
    )


def toy_run_config(num_identities: int = 20) -> RunConfig:
    """Desk-scale preset paired with the synthetic corpus."""
    return RunConfig(
        model=toy_config(num_identities=num_identities),
        weights=LossWeights(),
        optim=OptimConfig(
            base_lr_backbone=0.025,
            base_lr_other=0.1,
            decay_every=160,
            total_epochs=400,
        ),
        batch=PKBatchSpec(p=8, k=4),
        grouping=default_grouping(),
    )


def _overlay(section: str, base, overrides: dict):
    """Apply overrides onto a dataclass, rejecting unknown keys and casting
    JSON lists back to the tuple fields they came from."""
    if not isinstance(overrides, dict):
        raise ConfigError(f"section {section!r} must be an object")
    allowed = {f.name for f in fields(base)}
    unknown = sorted(set(overrides) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    converted = {}
    for key, value in overrides.items():
        current = getattr(base, key)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        converted[key] = value
    try:
        return replace(base, **converted)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in {section!r}: {exc}") from exc


def run_config_from_dict(doc: dict, base: RunConfig | None = None) -> RunConfig:
    if base is None:
        base = default_run_config()
    known = {"model", "weights", "optim", "batch", "grouping", "paths", "seed"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")

    model = _overlay("model", base.model, doc.get("model", {}))
    weights = _overlay("weights", base.weights, doc.get("weights", {}))
    optim = _overlay("optim", base.optim, doc.get("optim", {}))
    batch = _overlay("batch", base.batch, doc.get("batch", {}))

    grouping = base.grouping
    if "grouping" in doc:
        g = doc["grouping"]
        unknown = sorted(set(g) - {"upper", "bottom"})
        if unknown:
            raise ConfigError(f"unknown key(s) in 'grouping': {', '.join(unknown)}")
        try:
            grouping = GroupingTable(
                upper=frozenset(g.get("upper", sorted(base.grouping.upper))),
                bottom=frozenset(g.get("bottom", sorted(base.grouping.bottom))),
            )
        except ValueError as exc:
            raise ConfigError(f"invalid grouping: {exc}") from exc

    data_dir, out_dir = base.data_dir, base.out_dir
    if "paths" in doc:
        p = doc["paths"]
        unknown = sorted(set(p) - {"data", "out"})
        if unknown:
            raise ConfigError(f"unknown key(s) in 'paths': {', '.join(unknown)}")
        data_dir = p.get("data", data_dir)
        out_dir = p.get("out", out_dir)

    seed = doc.get("seed", base.seed)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    return RunConfig(
        model=model,
        weights=weights,
        optim=optim,
        batch=batch,
        grouping=grouping,
        data_dir=data_dir,
        out_dir=out_dir,
        seed=seed,
    )


def load_run_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return run_config_from_dict(doc, base)


def save_run_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
