"""Command-line entry points wiring the pipeline stages.

Subcommands: synth, train, gen-masks, infer, match, evaluate, visualize.
Every run appends a manifest row with enough context to re-execute it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model
from .data_pipeline import (
    CubDataset,
    IlsvrcValDataset,
    SynthDataset,
    SynthSpec,
    generate_synth,
)
from .errors import ConfigError, InputError
from .eval_metrics import BBox, PredictionRecord, compute_report
from .gtformer import ModelConfig
from .losses import LossWeights
from .mask_matching import read_map_image, select_mask
from .mask_provider import (
    FakeMaskProvider,
    GalleryCache,
    GridPromptConfig,
    SamMaskProvider,
    config_hash_parts,
    rle_decode,
    rle_encode,
    safe_stem,
)
from .training import (
    DatasetConfig,
    ExperimentConfig,
    OptimizerConfig,
    RunManifest,
    infer,
    train,
)
from .visualize import save_overlay, save_report_figures, unnormalize, write_report_csv


def _load_dataset(kind: str, root: str, split: str, aug_seed: int = 0):
    if kind == "synth":
        return SynthDataset(root, split, aug_seed=aug_seed)
    if kind == "cub":
        return CubDataset(root, split, aug_seed=aug_seed)
    if kind == "ilsvrc":
        return IlsvrcValDataset(root)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _manifest_row(out_dir: str | Path, command: str, args: argparse.Namespace):
    manifest = RunManifest(Path(out_dir) / "manifest.jsonl")
    manifest.append(
        {
            "event": "cli",
            "command": command,
            "args": {k: str(v) for k, v in vars(args).items() if k != "func"},
        }
    )


# -- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec(
        num_classes=args.num_classes,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        canvas=args.canvas,
        seed=args.seed,
    )
    generate_synth(spec, args.out)
    _manifest_row(args.out, "synth", args)
    print(f"synthetic corpus written to {args.out}")
    return 0


# -- train -------------------------------------------------------------------


def _build_experiment(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.from_json(json.loads(Path(args.config).read_text()))
    else:
        config = ExperimentConfig()
    model_overrides = {
        "image_size": args.image_size,
        "patch_size": args.patch_size,
        "embed_dim": args.embed_dim,
        "num_heads": args.num_heads,
        "num_blocks": args.num_blocks,
        "num_gta_blocks": args.num_gta_blocks,
        "num_global_tokens": args.global_tokens,
        "num_classes": args.num_classes,
        "downsample_size": args.downsample_size,
    }
    model_cfg = config.model.to_json()
    model_cfg.update({k: v for k, v in model_overrides.items() if v is not None})
    config.model = ModelConfig.from_json(model_cfg)
    if args.mu is not None or args.lam is not None:
        config.loss = LossWeights(
            mu=args.mu if args.mu is not None else config.loss.mu,
            lam=args.lam if args.lam is not None else config.loss.lam,
        )
    if args.lr is not None:
        config.optimizer = OptimizerConfig(
            lr=args.lr,
            beta1=config.optimizer.beta1,
            beta2=config.optimizer.beta2,
            eps=config.optimizer.eps,
            weight_decay=config.optimizer.weight_decay,
            cosine=config.optimizer.cosine,
        )
    if args.data_root:
        config.dataset = DatasetConfig(kind=args.dataset, root=args.data_root)
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.batch_size is not None:
        config.batch_size = args.batch_size
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.out_dir = args.out
    return config


def cmd_train(args) -> int:
    config = _build_experiment(args)
    train_ds = _load_dataset(
        config.dataset.kind, config.dataset.root, "train", aug_seed=config.seed
    )
    val_split = "test" if config.dataset.kind in ("synth", "cub") else "val"
    try:
        val_ds = _load_dataset(config.dataset.kind, config.dataset.root, val_split)
    except Exception:
        val_ds = None
    if config.model.num_classes != getattr(train_ds, "num_classes", config.model.num_classes):
        model_cfg = config.model.to_json()
        model_cfg["num_classes"] = train_ds.num_classes
        config.model = ModelConfig.from_json(model_cfg)
    result = train(config, train_ds, val_ds, resume=args.resume)
    _manifest_row(config.out_dir, "train", args)
    final = result.history[-1] if result.history else {}
    print(f"training done: {json.dumps(final)}")
    print(f"best checkpoint: {result.best_checkpoint}")
    return 0


# -- gen-masks ---------------------------------------------------------------


def cmd_gen_masks(args) -> int:
    dataset = _load_dataset(args.dataset, args.data_root, args.split)
    grid = GridPromptConfig(grid_side=args.grid_side)
    if args.provider == "fake":
        if not isinstance(dataset, SynthDataset):
            raise ConfigError("the fake provider needs a synthetic corpus with instance masks")
        provider = FakeMaskProvider(dataset.instance_masks)
    else:
        provider = SamMaskProvider(checkpoint=args.sam_checkpoint, model_type=args.sam_model)
    cache = GalleryCache(args.cache_dir)
    count = 0
    for i in range(len(dataset)):
        sample = dataset.sample(i, train=False)
        image = (unnormalize(sample.image, dataset.preprocess.mean, dataset.preprocess.std) * 255).astype(np.uint8)
        gallery = cache.get_or_generate(image, provider, sample.image_id, grid)
        count += len(gallery)
    _manifest_row(args.cache_dir, "gen-masks", args)
    print(f"{len(dataset)} galleries cached under {args.cache_dir} ({count} masks)")
    return 0


# -- infer -------------------------------------------------------------------


def _load_class_preds(path: str | None) -> dict[str, list[int]] | None:
    if not path:
        return None
    preds = {}
    for line in Path(path).read_text().splitlines():
        obj = json.loads(line)
        preds[obj["image_id"]] = [int(c) for c in obj["top5_classes"]]
    return preds


def cmd_infer(args) -> int:
    model, _ = load_model(args.checkpoint)
    dataset = _load_dataset(args.dataset, args.data_root, args.split)
    gallery_lookup = None
    if args.mode == "matched":
        cache = GalleryCache(args.gallery_dir)
        chash = config_hash_parts(args.provider, args.provider_version, args.grid_side)
        gallery_lookup = lambda image_id: cache.read(image_id, chash)
    out = infer(
        model,
        dataset,
        mode=args.mode,
        gallery_lookup=gallery_lookup,
        map_threshold=args.map_threshold,
        box_tau=args.tau,
        class_preds=_load_class_preds(args.class_preds),
        save_maps_dir=args.save_maps,
    )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w") as fh:
        for idx, record in enumerate(out.records):
            obj = record.to_json()
            if args.mode == "matched":
                match = out.matches[idx]
                obj["fallback_used"] = match.fallback_used
                obj["winner_index"] = match.winner_index
                obj["scores"] = match.scores
                obj["mask_rle"] = rle_encode(match.final_mask)
                obj["mask_shape"] = list(match.final_mask.shape)
            fh.write(json.dumps(obj) + "\n")
    _manifest_row(out_path.parent, "infer", args)
    print(f"{len(out.records)} prediction records written to {out_path}")
    return 0


# -- match -------------------------------------------------------------------


def cmd_match(args) -> int:
    from .mask_provider import read_gallery

    gallery_files = sorted(Path(args.galleries).glob("*.p2m"))
    if not gallery_files:
        raise InputError(f"no gallery files under {args.galleries}")
    maps_dir = Path(args.maps)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with out_path.open("w") as fh:
        for path in gallery_files:
            gallery = read_gallery(path)
            map_path = maps_dir / f"{safe_stem(gallery.image_id)}.png"
            if not map_path.exists():
                raise InputError(f"no map image for {gallery.image_id!r} at {map_path}")
            fg_map = read_map_image(map_path)
            match = select_mask(gallery, fg_map, threshold=args.threshold)
            fh.write(
                json.dumps(
                    {
                        "image_id": gallery.image_id,
                        "scores": match.scores,
                        "winner_index": match.winner_index,
                        "fallback_used": match.fallback_used,
                        "map_threshold": match.map_threshold,
                        "mask_rle": rle_encode(match.final_mask),
                        "mask_shape": list(match.final_mask.shape),
                    }
                )
                + "\n"
            )
            n += 1
    _manifest_row(out_path.parent, "match", args)
    print(f"{n} match results written to {out_path}")
    return 0


# -- evaluate ----------------------------------------------------------------


def _read_records(path: str | Path) -> tuple[list[PredictionRecord], list[dict]]:
    records, raw = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        raw.append(obj)
        records.append(PredictionRecord.from_json(obj))
    return records, raw


def cmd_evaluate(args) -> int:
    records, raw = _read_records(args.records)
    predictions = None
    if args.maps:
        maps_dir = Path(args.maps)
        predictions = [
            read_map_image(maps_dir / f"{safe_stem(r.image_id)}.png") for r in records
        ]
    elif raw and "mask_rle" in raw[0]:
        predictions = [
            rle_decode(obj["mask_rle"], tuple(obj["mask_shape"])) for obj in raw
        ]
    image_shape = (args.image_size, args.image_size) if args.image_size else None
    report, acc = compute_report(
        records,
        predictions,
        deltas=tuple(args.deltas),
        delta=args.delta,
        image_shape=image_shape,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2))
    write_report_csv(report, out_dir / "report.csv")
    save_report_figures(report, acc, out_dir)
    _manifest_row(out_dir, "evaluate", args)
    print(report.table())
    return 0


# -- visualize ---------------------------------------------------------------


def cmd_visualize(args) -> int:
    records, raw = _read_records(args.records)
    dataset = _load_dataset(args.dataset, args.data_root, args.split)
    by_id = {}
    for i in range(len(dataset)):
        sample = dataset.sample(i, train=False)
        by_id[sample.image_id] = sample
    maps_dir = Path(args.maps) if args.maps else None
    out_dir = Path(args.out)
    count = 0
    for record, obj in zip(records, raw):
        if args.limit and count >= args.limit:
            break
        sample = by_id.get(record.image_id)
        if sample is None:
            continue
        image = unnormalize(sample.image, dataset.preprocess.mean, dataset.preprocess.std)
        fg_map = None
        if maps_dir is not None:
            map_path = maps_dir / f"{safe_stem(record.image_id)}.png"
            if map_path.exists():
                fg_map = read_map_image(map_path)
        final_mask = None
        if "mask_rle" in obj:
            final_mask = rle_decode(obj["mask_rle"], tuple(obj["mask_shape"]))
        save_overlay(
            image,
            out_dir / f"{safe_stem(record.image_id)}.png",
            fg_map=fg_map,
            final_mask=final_mask,
            gt_boxes=record.gt_boxes,
            pred_box=record.predicted_box,
        )
        count += 1
    _manifest_row(out_dir, "visualize", args)
    print(f"{count} overlays written to {out_dir}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gtloc",
        description="Weakly supervised localization: coarse maps, mask galleries, IoU matching.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shapes corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--train-per-class", type=int, default=50)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the localization backbone")
    p.add_argument("--config", help="ExperimentConfig JSON file")
    p.add_argument("--dataset", default="synth", choices=["synth", "cub", "ilsvrc"])
    p.add_argument("--data-root")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")
    p.add_argument("--image-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--num-heads", type=int)
    p.add_argument("--num-blocks", type=int)
    p.add_argument("--num-gta-blocks", type=int)
    p.add_argument("--global-tokens", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--downsample-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen-masks", help="build and cache mask galleries")
    p.add_argument("--provider", required=True, choices=["fake", "sam"])
    p.add_argument("--grid-side", type=int, default=32)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--dataset", default="synth", choices=["synth", "cub", "ilsvrc"])
    p.add_argument("--data-root", required=True)
    p.add_argument("--sam-checkpoint")
    p.add_argument("--sam-model", default="vit_h")
    p.set_defaults(func=cmd_gen_masks)

    p = sub.add_parser("infer", help="run the pipeline and emit prediction records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default="synth", choices=["synth", "cub", "ilsvrc"])
    p.add_argument("--data-root", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--mode", default="matched", choices=["matched", "heatmap"])
    p.add_argument("--gallery-dir")
    p.add_argument("--provider", default="fake")
    p.add_argument("--provider-version", default="1")
    p.add_argument("--grid-side", type=int, default=32)
    p.add_argument("--map-threshold", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--class-preds", help="JSONL with external top-5 class predictions")
    p.add_argument("--save-maps", help="directory for 16-bit fused-map images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("match", help="match cached galleries against saved maps")
    p.add_argument("--galleries", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("evaluate", help="score prediction records")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--maps", help="16-bit map directory for the threshold sweep")
    p.add_argument("--image-size", type=int)
    p.add_argument("--deltas", type=float, nargs="+", default=[0.3, 0.5, 0.7, 0.9])
    p.add_argument("--delta", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", help="render per-image overlays")
    p.add_argument("--records", required=True)
    p.add_argument("--dataset", default="synth", choices=["synth", "cub", "ilsvrc"])
    p.add_argument("--data-root", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--maps")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
