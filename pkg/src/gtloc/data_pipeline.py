"""Dataset access and preprocessing.

Covers the CUB-style index-file layout, an ILSVRC-val style image+XML
layout, the resize/crop/flip preprocessing with consistent box transforms,
and a seeded synthetic-shapes corpus used for desk-scale end-to-end runs.
Augmentation randomness derives from (seed, epoch, index), so results never
depend on loader parallelism.
"""

from __future__ import annotations

import hashlib
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, DatasetError
from .eval_metrics import BBox

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class PreprocessConfig:
    resize_size: int = 256
    crop_size: int = 224
    hflip_prob: float = 0.5
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD


@dataclass
class Sample:
    image_id: str
    image: torch.Tensor  # (3, h, w), normalized
    label: int
    gt_boxes: list[BBox] = field(default_factory=list)


def _flip_box(box: BBox, width: float) -> BBox:
    return BBox(width - box.x_max, box.y_min, width - box.x_min, box.y_max)


def preprocess_image(
    image: np.ndarray,
    boxes: list[BBox],
    train: bool,
    rng: np.random.Generator | None,
    cfg: PreprocessConfig,
) -> tuple[torch.Tensor, list[BBox]]:
    """Resize to a square, crop (random when training, else center), flip,
    normalize; boxes follow the same geometry and are clipped to the crop."""
    if train and rng is None:
        raise ConfigError("training preprocessing needs an rng")
    h0, w0 = image.shape[:2]
    pil = Image.fromarray(image)
    if (h0, w0) != (cfg.resize_size, cfg.resize_size):
        pil = pil.resize((cfg.resize_size, cfg.resize_size), Image.BILINEAR)
    sx, sy = cfg.resize_size / w0, cfg.resize_size / h0
    boxes = [BBox(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy) for b in boxes]

    margin = cfg.resize_size - cfg.crop_size
    if margin < 0:
        raise ConfigError("crop_size exceeds resize_size")
    if train:
        ox, oy = int(rng.integers(0, margin + 1)), int(rng.integers(0, margin + 1))
    else:
        ox = oy = margin // 2
    arr = np.asarray(pil)[oy : oy + cfg.crop_size, ox : ox + cfg.crop_size]
    boxes = [
        BBox(b.x_min - ox, b.y_min - oy, b.x_max - ox, b.y_max - oy).clip(
            cfg.crop_size, cfg.crop_size
        )
        for b in boxes
    ]

    if train and rng.random() < cfg.hflip_prob:
        arr = arr[:, ::-1]
        boxes = [_flip_box(b, cfg.crop_size) for b in boxes]

    tensor = torch.from_numpy(arr.copy()).float().permute(2, 0, 1) / 255.0
    mean = torch.tensor(cfg.mean).view(3, 1, 1)
    std = torch.tensor(cfg.std).view(3, 1, 1)
    return (tensor - mean) / std, boxes


# ---------------------------------------------------------------------------
# CUB-style layout: index files plus an images/ tree.


class CubDataset:
    """Parser for the images.txt / labels / split / bounding_boxes layout."""

    INDEX_FILES = (
        "images.txt",
        "image_class_labels.txt",
        "train_test_split.txt",
        "bounding_boxes.txt",
    )

    def __init__(self, root: str | Path, split: str, preprocess: PreprocessConfig | None = None,
                 aug_seed: int = 0):
        if split not in ("train", "test"):
            raise ConfigError(f"unknown split {split!r}")
        self.root = Path(root)
        self.split = split
        self.preprocess = preprocess or PreprocessConfig()
        self.aug_seed = aug_seed

        tables = {}
        for name in self.INDEX_FILES:
            path = self.root / name
            if not path.exists():
                raise DatasetError(f"missing index file: {path}")
            tables[name] = path.read_text().splitlines()

        paths, labels, is_train, boxes = {}, {}, {}, {}
        for line in tables["images.txt"]:
            idx, rel = line.split(maxsplit=1)
            paths[idx] = rel.strip()
        for line in tables["image_class_labels.txt"]:
            idx, cls = line.split()
            labels[idx] = int(cls) - 1
        for line in tables["train_test_split.txt"]:
            idx, flag = line.split()
            is_train[idx] = flag == "1"
        for line in tables["bounding_boxes.txt"]:
            idx, x, y, w, h = line.split()
            boxes[idx] = BBox(float(x), float(y), float(x) + float(w), float(y) + float(h))

        want_train = split == "train"
        self.entries = [
            (paths[i], labels[i], boxes[i])
            for i in sorted(paths, key=int)
            if is_train[i] == want_train
        ]
        self.num_classes = max(labels.values()) + 1 if labels else 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def image_size(self) -> int:
        return self.preprocess.crop_size

    def sample(self, idx: int, epoch: int = 0, train: bool = False) -> Sample:
        rel, label, box = self.entries[idx]
        path = self.root / "images" / rel
        image = np.asarray(Image.open(path).convert("RGB"))
        rng = np.random.default_rng([self.aug_seed, epoch, idx]) if train else None
        tensor, boxes = preprocess_image(image, [box], train, rng, self.preprocess)
        return Sample(image_id=Path(rel).stem, image=tensor, label=label, gt_boxes=boxes)

    def __getitem__(self, idx: int) -> Sample:
        return self.sample(idx, train=self.split == "train")


def load_cub(root: str | Path, split: str, **kwargs) -> CubDataset:
    return CubDataset(root, split, **kwargs)


# ---------------------------------------------------------------------------
# ILSVRC validation layout: images/ plus annotations/ with PASCAL-style XML.


def parse_bbox_xml(path: str | Path) -> list[BBox]:
    """All object boxes from one annotation file, 1-based inclusive to
    0-based half-open."""
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as e:
        raise DatasetError(f"failed to parse annotation {path}: {e}") from e
    boxes = []
    for obj in root.iter("object"):
        bnd = obj.find("bndbox")
        if bnd is None:
            continue
        vals = {tag: float(bnd.find(tag).text) for tag in ("xmin", "ymin", "xmax", "ymax")}
        boxes.append(BBox(vals["xmin"] - 1, vals["ymin"] - 1, vals["xmax"], vals["ymax"]))
    if not boxes:
        raise DatasetError(f"no object boxes in {path}")
    return boxes


class IlsvrcValDataset:
    """Validation images with multi-box XML annotations.

    Expects root/images/*.JPEG and root/annotations/<same stem>.xml; an
    optional root/val_labels.txt ("<stem> <class index>" per line) supplies
    ground-truth classes, otherwise labels are -1.
    """

    def __init__(self, root: str | Path, preprocess: PreprocessConfig | None = None):
        self.root = Path(root)
        self.preprocess = preprocess or PreprocessConfig()
        image_dir = self.root / "images"
        if not image_dir.is_dir():
            raise DatasetError(f"missing image directory: {image_dir}")
        self.files = sorted(image_dir.glob("*.JPEG")) + sorted(image_dir.glob("*.jpg"))
        if not self.files:
            raise DatasetError(f"no images under {image_dir}")
        self.labels = {}
        labels_file = self.root / "val_labels.txt"
        if labels_file.exists():
            for line in labels_file.read_text().splitlines():
                stem, cls = line.split()
                self.labels[stem] = int(cls)

    def __len__(self) -> int:
        return len(self.files)

    @property
    def image_size(self) -> int:
        return self.preprocess.crop_size

    def sample(self, idx: int, epoch: int = 0, train: bool = False) -> Sample:
        path = self.files[idx]
        xml_path = self.root / "annotations" / f"{path.stem}.xml"
        if not xml_path.exists():
            raise DatasetError(f"missing annotation: {xml_path}")
        boxes = parse_bbox_xml(xml_path)
        image = np.asarray(Image.open(path).convert("RGB"))
        tensor, boxes = preprocess_image(image, boxes, False, None, self.preprocess)
        return Sample(
            image_id=path.stem,
            image=tensor,
            label=self.labels.get(path.stem, -1),
            gt_boxes=boxes,
        )

    def __getitem__(self, idx: int) -> Sample:
        return self.sample(idx)


def load_ilsvrc_val(root: str | Path, **kwargs) -> IlsvrcValDataset:
    return IlsvrcValDataset(root, **kwargs)


# ---------------------------------------------------------------------------
# Synthetic shapes corpus.


@dataclass(frozen=True)
class SynthSpec:
    """Seeded recipe for a shapes-on-texture corpus with exact masks.

    Each class pairs a shape kind with a hue band, so the class evidence sits
    entirely on the object; with `color_by_class` off, hues are random and
    only geometry separates the classes (a much harder recognition task).
    """

    num_classes: int = 4
    train_per_class: int = 50
    test_per_class: int = 20
    canvas: int = 64
    shape_kinds: tuple[str, ...] = ("rect", "ellipse", "triangle", "cross")
    size_range: tuple[float, float] = (0.30, 0.52)  # major half-extent, canvas fraction
    aspect_range: tuple[float, float] = (0.45, 0.80)
    max_rotation_deg: float = 25.0
    color_by_class: bool = True
    num_distractors: int = 12  # small off-object color specks (clutter)
    noise: float = 0.015
    seed: int = 0

    def __post_init__(self):
        if self.num_classes > len(self.shape_kinds):
            raise ConfigError(
                f"{self.num_classes} classes need >= {self.num_classes} shape kinds"
            )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        obj = dict(obj)
        for key in ("shape_kinds", "size_range", "aspect_range"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def _shape_mask(kind: str, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Rasterize one randomly placed shape; guaranteed nonempty."""
    canvas = spec.canvas
    yy, xx = np.mgrid[0:canvas, 0:canvas] + 0.5
    # keep the whole bounding circle inside the canvas with a 2px margin
    a = rng.uniform(*spec.size_range) * canvas / 2
    b = a * rng.uniform(*spec.aspect_range)
    theta = np.deg2rad(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    r = max(a, b) + 2
    cx = rng.uniform(r, canvas - r)
    cy = rng.uniform(r, canvas - r)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    if kind == "rect":
        mask = (np.abs(u) <= a) & (np.abs(v) <= b)
    elif kind == "ellipse":
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    elif kind == "triangle":
        # isoceles: apex up at (0,-b), base at v=b
        inside = v <= b
        inside &= v >= -b
        # edges from apex to base corners
        slope = (2 * b) / a
        inside &= v + b >= slope * np.abs(u) - 1e-9
        mask = inside
    elif kind == "cross":
        t = 0.35
        mask = ((np.abs(u) <= a) & (np.abs(v) <= b * t)) | (
            (np.abs(u) <= a * t) & (np.abs(v) <= b)
        )
    else:
        raise ConfigError(f"unknown shape kind {kind!r}")
    if not mask.any():  # degenerate draws cannot happen with the margins above
        mask[int(cy), int(cx)] = True
    return mask


def _hsv_to_rgb(hue: float, sat: float, val: float) -> tuple[float, float, float]:
    i = int(hue * 6) % 6
    f = hue * 6 - int(hue * 6)
    p, q, t = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    return [
        (val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)
    ][i]


def _render_image(
    mask: np.ndarray, spec: SynthSpec, label: int, rng: np.random.Generator
) -> np.ndarray:
    """Shape in a saturated color over a smooth low-contrast texture."""
    canvas = spec.canvas
    base = torch.from_numpy(rng.uniform(0.35, 0.65, size=(1, 3, 4, 4)))
    texture = F.interpolate(base, size=(canvas, canvas), mode="bilinear", align_corners=False)
    img = texture[0].permute(1, 2, 0).numpy()
    if spec.color_by_class:
        # axis-aligned palette: symmetric learnability across classes
        palette = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 0, 1), (0, 1, 1)]
        base = np.array(palette[label % len(palette)], dtype=np.float64)
        color = base * rng.uniform(0.75, 1.0) + rng.uniform(0.0, 0.12, size=3)
        color = tuple(np.clip(color, 0.0, 1.0))
    else:
        color = _hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.8, 1.0), rng.uniform(0.75, 1.0))
    img[mask] = color
    # clutter: small saturated specks off the object, any hue
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    for _ in range(spec.num_distractors):
        dx, dy = rng.uniform(1, canvas - 1, 2)
        radius = rng.uniform(0.8, 1.8)
        speck = (xx - dx) ** 2 + (yy - dy) ** 2 <= radius**2
        speck &= ~mask
        img[speck] = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.8, 1.0), rng.uniform(0.75, 1.0))
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)


def _tight_box(mask: np.ndarray) -> BBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def generate_synth(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write the corpus (images, masks, per-split sidecars) and return its root."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "synth_spec.json").write_text(json.dumps(spec.to_json(), indent=2))
    for split_id, (split, per_class) in enumerate(
        (("train", spec.train_per_class), ("test", spec.test_per_class))
    ):
        records = []
        total = per_class * spec.num_classes
        for idx in range(total):
            label = idx % spec.num_classes
            kind = spec.shape_kinds[label]
            rng = np.random.default_rng([spec.seed, split_id, idx])
            mask = _shape_mask(kind, spec, rng)
            image = _render_image(mask, spec, label, rng)
            image_id = f"{split}_{idx:04d}"
            Image.fromarray(image).save(out / "images" / f"{image_id}.png")
            Image.fromarray((mask * 255).astype(np.uint8)).save(out / "masks" / f"{image_id}.png")
            records.append(
                {
                    "image_id": image_id,
                    "image": f"images/{image_id}.png",
                    "mask": f"masks/{image_id}.png",
                    "label": label,
                    "box": list(_tight_box(mask).as_tuple()),
                }
            )
        (out / f"{split}.json").write_text(json.dumps(records, indent=2))
    return out


class SynthDataset:
    """Reader for a generated shapes corpus.

    The canvas equals the model input size, so eval preprocessing is
    identity geometry; training applies horizontal flips only.
    """

    def __init__(self, root: str | Path, split: str, aug_seed: int = 0):
        self.root = Path(root)
        self.split = split
        sidecar = self.root / f"{split}.json"
        if not sidecar.exists():
            raise DatasetError(f"missing sidecar: {sidecar}")
        self.records = json.loads(sidecar.read_text())
        self.spec = SynthSpec.from_json(json.loads((self.root / "synth_spec.json").read_text()))
        self.aug_seed = aug_seed
        self.num_classes = self.spec.num_classes
        self.preprocess = PreprocessConfig(
            resize_size=self.spec.canvas, crop_size=self.spec.canvas
        )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def image_size(self) -> int:
        return self.spec.canvas

    def sample(self, idx: int, epoch: int = 0, train: bool = False) -> Sample:
        rec = self.records[idx]
        image = np.asarray(Image.open(self.root / rec["image"]).convert("RGB"))
        boxes = [BBox(*rec["box"])]
        rng = np.random.default_rng([self.aug_seed, epoch, idx]) if train else None
        tensor, boxes = preprocess_image(image, boxes, train, rng, self.preprocess)
        return Sample(image_id=rec["image_id"], image=tensor, label=rec["label"], gt_boxes=boxes)

    def __getitem__(self, idx: int) -> Sample:
        return self.sample(idx, train=self.split == "train")

    def instance_masks(self, image_id: str) -> list[np.ndarray]:
        """Ground-truth instance masks, the substrate for the fake provider."""
        for rec in self.records:
            if rec["image_id"] == image_id:
                mask = np.asarray(Image.open(self.root / rec["mask"])) > 127
                return [mask]
        raise DatasetError(f"unknown image id {image_id!r}")


def corpus_digest(root: str | Path) -> str:
    """Order-independent digest of every generated file, for seed-stability checks."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()
