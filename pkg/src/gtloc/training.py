"""Experiment configuration, the training loop, and the inference pass that
stitches the three pipeline stages into prediction records."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_model
from .data_pipeline import Sample
from .errors import InputError
from .eval_metrics import PredictionRecord, bbox_from_mask, bbox_from_map, gt_known
from .gtformer import GTFormer, ModelConfig
from .losses import LossWeights, compute_losses, region_loss
from .mask_matching import MatchResult, select_mask, write_map_image
from .mask_provider import MaskGallery, safe_stem


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 5e-4
    cosine: bool = True
    warmup_frac: float = 0.0  # linear warmup over this fraction of total steps


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synth"  # synth | cub | ilsvrc
    root: str = ""


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    out_dir: str = "runs/default"
    map_threshold: float = 0.5
    region_alpha: float = 1.0  # area term weight inside the region loss
    region_beta: float = 1.0  # uncertainty term weight

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        obj["model"] = ModelConfig.from_json(obj.get("model", {}))
        obj["loss"] = LossWeights(**obj.get("loss", {}))
        obj["optimizer"] = OptimizerConfig(**obj.get("optimizer", {}))
        obj["dataset"] = DatasetConfig(**obj.get("dataset", {}))
        return cls(**obj)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


class RunManifest:
    """Append-only JSONL log describing a run well enough to re-execute it."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        record = {"time": time.time(), "version": __version__, **record}
        with self.path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _collate(samples: list[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.stack([s.image for s in samples])
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)
    return images, labels


def _optimizer_arrays(model: GTFormer, opt: torch.optim.AdamW) -> dict[str, np.ndarray]:
    arrays = {}
    names = [name for name, _ in model.named_parameters()]
    state = opt.state_dict()["state"]
    for idx, name in enumerate(names):
        if idx not in state:
            continue
        entry = state[idx]
        arrays[f"optim/{name}/step"] = np.asarray(float(entry["step"]))
        arrays[f"optim/{name}/exp_avg"] = entry["exp_avg"].numpy()
        arrays[f"optim/{name}/exp_avg_sq"] = entry["exp_avg_sq"].numpy()
    return arrays


def _restore_optimizer(model: GTFormer, opt: torch.optim.AdamW, arrays: dict[str, np.ndarray]):
    names = [name for name, _ in model.named_parameters()]
    state = {}
    for idx, name in enumerate(names):
        key = f"optim/{name}/step"
        if key not in arrays:
            continue
        state[idx] = {
            "step": torch.tensor(float(arrays[key])),
            "exp_avg": torch.from_numpy(arrays[f"optim/{name}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"optim/{name}/exp_avg_sq"].copy()),
        }
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


@dataclass
class TrainResult:
    model: GTFormer
    history: list[dict]
    best_checkpoint: Path
    last_checkpoint: Path
    loss_log: Path


def validation_gt_known(model: GTFormer, dataset, tau: float = 0.5, delta: float = 0.5) -> float:
    """Heatmap-only GT-Known on a dataset, the checkpoint-selection metric."""
    model.eval()
    records = []
    size = dataset.image_size
    with torch.no_grad():
        for i in range(len(dataset)):
            s = dataset.sample(i, train=False)
            logits, maps = model(s.image)
            top5 = torch.argsort(logits, descending=True)[:5].tolist()
            box = bbox_from_map(maps.fused.numpy(), tau, (size, size))
            records.append(
                PredictionRecord(
                    image_id=s.image_id,
                    predicted_box=box,
                    top5_classes=top5,
                    gt_boxes=s.gt_boxes,
                    gt_class=s.label,
                )
            )
    return gt_known(records, delta)


def train(
    config: ExperimentConfig,
    train_dataset,
    val_dataset=None,
    resume: str | Path | None = None,
) -> TrainResult:
    """Optimize the composite objective; logs a loss breakdown per step and
    keeps the checkpoint with the best validation GT-Known."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "experiment.json").write_text(json.dumps(config.to_json(), indent=2))
    manifest = RunManifest(out_dir / "manifest.jsonl")
    loss_log = out_dir / "loss_log.jsonl"

    torch.manual_seed(config.seed)
    model = GTFormer(config.model)
    opt_cfg = config.optimizer
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=opt_cfg.lr,
        betas=(opt_cfg.beta1, opt_cfg.beta2),
        eps=opt_cfg.eps,
        weight_decay=opt_cfg.weight_decay,
    )

    steps_per_epoch = math.ceil(len(train_dataset) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    start_epoch, global_step = 0, 0
    best_metric = -1.0

    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()})
        _restore_optimizer(model, opt, ckpt.extra_arrays)
        start_epoch = int(ckpt.extra_meta.get("epoch", -1)) + 1
        global_step = int(ckpt.extra_meta.get("step", 0))
        best_metric = float(ckpt.extra_meta.get("best_metric", -1.0))

    warmup_steps = int(opt_cfg.warmup_frac * total_steps)
    region_fn = lambda m: region_loss(m, alpha=config.region_alpha, beta=config.region_beta)

    def lr_at(step: int) -> float:
        if step < warmup_steps:
            return opt_cfg.lr * (step + 1) / warmup_steps
        if not opt_cfg.cosine:
            return opt_cfg.lr
        frac = (step - warmup_steps) / max(1, total_steps - warmup_steps)
        return opt_cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    manifest.append(
        {
            "event": "train_start",
            "config_hash": config.config_hash(),
            "config": config.to_json(),
            "num_train": len(train_dataset),
            "resume": str(resume) if resume else None,
        }
    )

    history = []
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    log_fh = loss_log.open("a")
    try:
        for epoch in range(start_epoch, config.epochs):
            model.train()
            epoch_rng = np.random.default_rng([config.seed, 1000 + epoch])
            correct = total = 0
            for batch_ids in _batches(len(train_dataset), config.batch_size, epoch_rng):
                samples = [train_dataset.sample(int(i), epoch, train=True) for i in batch_ids]
                images, labels = _collate(samples)
                logits, maps = model(images)
                breakdown = compute_losses(
                    logits, labels, maps.per_token, maps.fused, images, config.loss,
                    region_fn=region_fn,
                )
                if not torch.isfinite(breakdown.total):
                    dump = {
                        "epoch": epoch,
                        "step": global_step,
                        "batch_image_ids": [s.image_id for s in samples],
                        "components": {
                            k: v for k, v in breakdown.to_record().items() if k != "total"
                        },
                    }
                    (out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2))
                    raise RuntimeError(
                        f"non-finite loss at step {global_step}; "
                        f"offending batch dumped to {out_dir / 'nan_dump.json'}"
                    )
                for group in opt.param_groups:
                    group["lr"] = lr_at(global_step)
                opt.zero_grad()
                breakdown.total.backward()
                opt.step()
                record = {
                    "epoch": epoch,
                    "step": global_step,
                    "lr": lr_at(global_step),
                    **breakdown.to_record(),
                }
                log_fh.write(json.dumps(record) + "\n")
                correct += int((logits.argmax(dim=1) == labels).sum())
                total += len(samples)
                global_step += 1
            log_fh.flush()

            row = {
                "event": "epoch",
                "epoch": epoch,
                "step": global_step,
                "train_acc": 100.0 * correct / max(1, total),
            }
            if val_dataset is not None:
                row["val_gt_known"] = validation_gt_known(model, val_dataset)
                if row["val_gt_known"] >= best_metric:
                    best_metric = row["val_gt_known"]
                    save_model(
                        best_path,
                        model,
                        extra_meta={"epoch": epoch, "step": global_step,
                                    "best_metric": best_metric},
                    )
                    row["checkpoint"] = str(best_path)
            save_model(
                last_path,
                model,
                extra_arrays=_optimizer_arrays(model, opt),
                extra_meta={"epoch": epoch, "step": global_step, "best_metric": best_metric},
            )
            history.append(row)
            manifest.append(row)
    finally:
        log_fh.close()

    if not best_path.exists():
        save_model(best_path, model, extra_meta={"epoch": config.epochs - 1, "step": global_step})
    manifest.append({"event": "train_end", "steps": global_step})
    return TrainResult(
        model=model,
        history=history,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        loss_log=loss_log,
    )


# ---------------------------------------------------------------------------
# Inference: forward pass + gallery matching into prediction records.


@dataclass
class InferenceOutput:
    records: list[PredictionRecord]
    matches: list[MatchResult]
    predictions: list[np.ndarray]  # final masks (matched) or fused maps (heatmap)


def infer(
    model: GTFormer,
    dataset,
    mode: str = "matched",
    gallery_lookup=None,
    map_threshold: float = 0.5,
    box_tau: float = 0.5,
    class_preds: dict[str, list[int]] | None = None,
    save_maps_dir: str | Path | None = None,
) -> InferenceOutput:
    """Produce one PredictionRecord per eval image.

    `matched` mode scores each image's gallery against the binarized fused
    map (missing galleries fall back to the map itself); `heatmap` mode
    derives the box directly from the upsampled fused map. Top-5 classes
    come from the model head unless an external per-image class file is
    supplied.
    """
    if mode not in ("matched", "heatmap"):
        raise InputError(f"unknown inference mode {mode!r}")
    if mode == "matched" and gallery_lookup is None:
        raise InputError("matched mode needs a gallery_lookup")
    model.eval()
    size = dataset.image_size
    if save_maps_dir is not None:
        save_maps_dir = Path(save_maps_dir)
        save_maps_dir.mkdir(parents=True, exist_ok=True)

    records, matches, predictions = [], [], []
    with torch.no_grad():
        for i in range(len(dataset)):
            s = dataset.sample(i, train=False)
            logits, maps = model(s.image)
            fused = maps.fused.double().numpy()
            if class_preds is not None and s.image_id in class_preds:
                top5 = [int(c) for c in class_preds[s.image_id][:5]]
            else:
                top5 = torch.argsort(logits, descending=True)[:5].tolist()
            if save_maps_dir is not None:
                write_map_image(fused, save_maps_dir / f"{safe_stem(s.image_id)}.png")

            if mode == "matched":
                gallery = gallery_lookup(s.image_id)
                if gallery is None:
                    gallery = MaskGallery(
                        image_id=s.image_id, masks=[], height=size, width=size
                    )
                match = select_mask(gallery, fused, threshold=map_threshold)
                box = bbox_from_mask(match.final_mask)
                matches.append(match)
                predictions.append(match.final_mask)
            else:
                box = bbox_from_map(fused, box_tau, (size, size))
                predictions.append(fused)

            records.append(
                PredictionRecord(
                    image_id=s.image_id,
                    predicted_box=box,
                    top5_classes=top5,
                    gt_boxes=s.gt_boxes,
                    gt_class=s.label,
                )
            )
    return InferenceOutput(records=records, matches=matches, predictions=predictions)
