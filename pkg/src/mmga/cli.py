"""Command-line surface: corpus synthesis, mask extraction, training,
evaluation, gradient checking, variant ablation, and attention inspection.

Every failure exits with status 1 and a single `mmga: error: ...` line on
stderr.  All artifacts land under a caller-chosen directory and are
byte-reproducible for a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .config import (
    RunConfig,
    default_run_config,
    load_run_config,
    save_run_config,
)
from .data import Dataset, augment, synth_generate, to_float_image
from .evaluation import (
    cmc_map,
    distances,
    evaluate,
    extract,
    render,
    save_embeddings,
)
from .gradcheck import run_all
from .masks import (
    GroupingTable,
    default_grouping,
    group_masks,
    load_label_map,
    resize_soft,
    save_mask_pgm,
)
from .network import Model, load_checkpoint
from .pnm import read_pnm
from .tensor import Tensor
from .trainer import train

VARIANT_LABELS = {
    "baseline": "Baseline",
    "baseline_att": "Baseline+Att",
    "wmga": "WMGA",
    "dmga": "DMGA",
    "mmga": "MMGA",
}


class CliError(ValueError):
    pass


def _parse_size(text: str) -> tuple:
    for sep in ("x", "X", "×"):
        if sep in text:
            h, _, w = text.partition(sep)
            try:
                return (int(h), int(w))
            except ValueError:
                break
    raise CliError(f"--size wants HxW, for example 24x8, got {text!r}")


def _load_grouping(path) -> GroupingTable:
    if path is None:
        return default_grouping()
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return GroupingTable(
            upper=frozenset(doc["upper"]), bottom=frozenset(doc["bottom"])
        )
    except (KeyError, TypeError) as exc:
        raise CliError(f"grouping file needs 'upper' and 'bottom' lists: {exc}")


def _resolve_run(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else default_run_config()
    data = getattr(args, "data", None) or cfg.data_dir
    out = getattr(args, "out", None) or cfg.out_dir
    return replace(cfg, data_dir=data, out_dir=out)


def _require(value, flag: str):
    if not value:
        raise CliError(f"missing {flag} (flag or config paths entry)")
    return value


def cmd_synth(args) -> int:
    manifest = synth_generate(
        num_ids=args.ids, per_id=args.per_id, out_dir=args.out, seed=args.seed
    )
    print(manifest)
    return 0


def cmd_masks(args) -> int:
    labels = load_label_map(args.labels)
    grouping = _load_grouping(args.grouping)
    whole, upper, bottom = group_masks(labels, grouping)
    if args.size:
        target = _parse_size(args.size)
        whole, upper, bottom = (
            resize_soft(m, target) for m in (whole, upper, bottom)
        )
    os.makedirs(args.out, exist_ok=True)
    for name, mask in (("whole", whole), ("upper", upper), ("bottom", bottom)):
        save_mask_pgm(os.path.join(args.out, f"{name}.pgm"), mask)
    print(args.out)
    return 0


def _train_setup(args):
    cfg = _resolve_run(args)
    data = _require(cfg.data_dir, "--data")
    out = _require(cfg.out_dir, "--out")
    dataset = Dataset(data, grouping=cfg.grouping)
    model_cfg = replace(
        cfg.model, num_identities=dataset.num_train_identities
    )
    if getattr(args, "variant", None):
        model_cfg = replace(model_cfg, variant=args.variant)
    optim = cfg.optim
    if getattr(args, "epochs", None) is not None:
        optim = replace(optim, total_epochs=args.epochs)
    return replace(cfg, model=model_cfg, optim=optim, out_dir=out), dataset


def cmd_train(args) -> int:
    cfg, dataset = _train_setup(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_run_config(os.path.join(cfg.out_dir, "run_config.json"), cfg)
    model = Model(cfg.model, seed=cfg.seed)
    train(
        model,
        dataset,
        cfg.weights,
        cfg.optim,
        seed=cfg.seed,
        batch_spec=cfg.batch,
        out_dir=cfg.out_dir,
        checkpoint_every=args.checkpoint_every,
    )
    print(os.path.join(cfg.out_dir, "checkpoints", "final"))
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = Dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    query = extract(model, dataset, dataset.query, "query")
    gallery = extract(model, dataset, dataset.gallery, "gallery")
    dist = distances(query, gallery)
    report = cmc_map(
        dist,
        query.person_ids,
        query.camera_ids,
        gallery.person_ids,
        gallery.camera_ids,
    )
    save_embeddings(os.path.join(args.out, "query.emb"), query)
    save_embeddings(os.path.join(args.out, "gallery.emb"), gallery)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        fh.write(report.json_line() + "\n")
    print(render(report))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(seed=0)
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.name:<{width}}  {r.max_rel_error:.3e}  {mark}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    cfg, dataset = _train_setup(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = {}
    for variant, label in VARIANT_LABELS.items():
        model = Model(replace(cfg.model, variant=variant), seed=cfg.seed)
        train(
            model,
            dataset,
            cfg.weights,
            cfg.optim,
            seed=cfg.seed,
            batch_spec=cfg.batch,
        )
        report = evaluate(model, dataset)
        rows[label] = {
            "rank1": float(report.cmc[0]),
            "mAP": report.mean_ap,
        }
    with open(os.path.join(cfg.out_dir, "ablate.json"), "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=False)
        fh.write("\n")
    print(f"{'Variant':<14}{'Rank1':>8}{'mAP':>8}")
    for label, row in rows.items():
        print(f"{label:<14}{100 * row['rank1']:>8.1f}{100 * row['mAP']:>8.1f}")
    return 0


def cmd_inspect(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    img = read_pnm(args.image)
    if img.ndim != 3:
        raise CliError(f"{args.image} is not a color image")
    arr, _ = augment(
        to_float_image(img),
        np.zeros(img.shape[:2], dtype=np.uint8),
        np.random.default_rng(0),
        False,
        model.config.input_hw,
    )
    result = model.forward(Tensor(arr[None]), training=False)
    if not result.attention:
        raise CliError(f"variant {model.config.variant!r} has no attention maps")
    names = ["module1", "whole", "upper", "bottom"][: len(result.attention)]
    os.makedirs(args.out, exist_ok=True)
    for name, out in zip(names, result.attention):
        heat = resize_soft(out.S_norm.data[0, 0], model.config.input_hw)
        save_mask_pgm(os.path.join(args.out, f"attention_{name}.pgm"), heat)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmga",
        description="Mask-guided attention re-identification pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=20)
    p.add_argument("--per-id", type=int, default=8, dest="per_id")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("masks", help="derive whole/upper/bottom masks from a label map")
    p.add_argument("--labels", required=True)
    p.add_argument("--grouping", default=None, help="JSON with upper/bottom label lists")
    p.add_argument("--out", required=True)
    p.add_argument("--size", default=None, help="resize masks to HxW")
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("train", help="train a variant on a manifest corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None, help="manifest.csv path")
    p.add_argument("--variant", default=None, choices=sorted(VARIANT_LABELS))
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--checkpoint-every", type=int, default=0, dest="checkpoint_every")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on query/gallery splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score all five variants")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="export attention heatmaps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"mmga: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
