"""Grid-point-prompted mask galleries with a persistent on-disk cache.

A provider turns one image plus a lattice of prompt points into a list of
binary instance masks. The real segmentation backend is optional at
runtime; tests and desk-scale runs use a fake provider built from
ground-truth instance masks. Galleries persist in a line-oriented
run-length format (``P2SMASK 1``) keyed by image id and config hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ChecksumError, ConfigError, ProviderError

FORMAT_HEADER = "P2SMASK 1"


@dataclass(frozen=True)
class GridPromptConfig:
    """Uniform prompt lattice in normalized [0,1]^2 coordinates."""

    grid_side: int = 32

    def __post_init__(self):
        if self.grid_side < 1:
            raise ConfigError(f"grid_side must be >= 1, got {self.grid_side}")

    @property
    def num_points(self) -> int:
        return self.grid_side * self.grid_side


def generate_grid_points(config: GridPromptConfig) -> np.ndarray:
    """Lattice of (x, y) prompts; point (r, c) sits at ((c+0.5)/n, (r+0.5)/n)."""
    n = config.grid_side
    coords = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(coords, coords)  # row-major: r outer, c inner
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


# ---------------------------------------------------------------------------
# Run-length codec: row-major, alternating zero-run/one-run, zero-run first.


def rle_encode(mask: np.ndarray) -> list[int]:
    """Encode a binary mask as alternating zero/one run lengths.

    The first run counts zeros and may be 0 when the mask starts with a one;
    runs always sum to the mask's size.
    """
    flat = np.asarray(mask).astype(bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs: Iterable[int], shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`rle_encode`; raises ChecksumError on malformed runs."""
    runs = list(runs)
    h, w = shape
    if any(r < 0 for r in runs):
        raise ChecksumError("negative run length")
    if sum(runs) != h * w:
        raise ChecksumError(f"runs sum to {sum(runs)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for r in runs:
        if value:
            flat[pos : pos + r] = True
        pos += r
        value = not value
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# Gallery container and file format.


@dataclass
class MaskGallery:
    """Variable-length list of binary instance masks for one image."""

    image_id: str
    masks: list[np.ndarray]
    height: int
    width: int
    provider: str = "unknown"
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.masks)

    def validate(self) -> None:
        for i, m in enumerate(self.masks):
            m = np.asarray(m)
            if m.shape != (self.height, self.width):
                raise ChecksumError(f"mask {i} shape {m.shape} != {(self.height, self.width)}")
            if m.dtype != np.bool_:
                raise ChecksumError(f"mask {i} is not binary (dtype {m.dtype})")
            if not m.any():
                raise ChecksumError(f"mask {i} is empty")


def write_gallery(gallery: MaskGallery, path: str | Path) -> None:
    """Serialize a gallery; header line, JSON metadata line, one RLE line per mask."""
    gallery.validate()
    meta = {
        "image_id": gallery.image_id,
        "height": gallery.height,
        "width": gallery.width,
        "count": len(gallery.masks),
        "provider": gallery.provider,
        "config_hash": gallery.config_hash,
    }
    lines = [FORMAT_HEADER, json.dumps(meta, sort_keys=True)]
    lines.extend(",".join(map(str, rle_encode(m))) for m in gallery.masks)
    Path(path).write_text("\n".join(lines) + "\n")


def read_gallery(path: str | Path) -> MaskGallery:
    """Parse a gallery file; any structural damage raises ChecksumError."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ChecksumError(f"unreadable gallery file {path}: {e}") from e
    lines = text.splitlines()
    if not lines or lines[0] != FORMAT_HEADER:
        raise ChecksumError(f"bad header in {path}")
    try:
        meta = json.loads(lines[1])
        h, w, count = int(meta["height"]), int(meta["width"]), int(meta["count"])
    except (IndexError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise ChecksumError(f"bad metadata in {path}: {e}") from e
    mask_lines = lines[2 : 2 + count]
    if len(mask_lines) != count:
        raise ChecksumError(f"{path}: expected {count} masks, found {len(mask_lines)}")
    masks = []
    for line in mask_lines:
        try:
            runs = [int(tok) for tok in line.split(",")] if line else []
        except ValueError as e:
            raise ChecksumError(f"bad run line in {path}: {e}") from e
        masks.append(rle_decode(runs, (h, w)))
    gallery = MaskGallery(
        image_id=meta["image_id"],
        masks=masks,
        height=h,
        width=w,
        provider=meta.get("provider", "unknown"),
        config_hash=meta.get("config_hash", ""),
    )
    gallery.validate()
    return gallery


# ---------------------------------------------------------------------------
# Providers.


class MaskProvider:
    """Interface: deterministic point-prompted mask generation for one image."""

    name = "abstract"
    version = "0"

    def generate(self, image: np.ndarray, points: np.ndarray, image_id: str) -> list[np.ndarray]:
        raise NotImplementedError


class FakeMaskProvider(MaskProvider):
    """Gallery source backed by ground-truth instance masks.

    Emits every instance mask hit by at least one prompt point plus the
    background complement, mimicking an oracle segmenter. Images with no
    instances yield an empty gallery.
    """

    name = "fake"
    version = "1"

    def __init__(self, instance_masks: dict[str, list[np.ndarray]] | Callable[[str], list[np.ndarray]]):
        self._source = instance_masks

    def _lookup(self, image_id: str) -> list[np.ndarray]:
        if callable(self._source):
            return self._source(image_id)
        try:
            return self._source[image_id]
        except KeyError:
            raise ProviderError(f"no instance masks for {image_id!r}", image_id=image_id) from None

    def generate(self, image: np.ndarray, points: np.ndarray, image_id: str) -> list[np.ndarray]:
        instances = [np.asarray(m).astype(bool) for m in self._lookup(image_id)]
        instances = [m for m in instances if m.any()]
        if not instances:
            return []
        h, w = instances[0].shape
        cols = np.clip((points[:, 0] * w).astype(int), 0, w - 1)
        rows = np.clip((points[:, 1] * h).astype(int), 0, h - 1)
        hit = lambda m: bool(m[rows, cols].any())
        out = [m for m in instances if hit(m)]
        background = ~np.logical_or.reduce(instances)
        if background.any() and hit(background):
            out.append(background)
        return out


class SamMaskProvider(MaskProvider):
    """Real segmentation backend (optional; needs the segment-anything package).

    Runs the backend's automatic mask generation over our prompt lattice and
    inherits its native post-processing, which filters noisy masks and so
    yields a different mask count per image.
    """

    name = "sam"

    def __init__(self, checkpoint: str, model_type: str = "vit_h", device: str = "cpu"):
        try:
            from segment_anything import SamAutomaticMaskGenerator, sam_model_registry
        except ImportError as e:
            raise ProviderError(f"segmentation backend unavailable: {e}") from e
        sam = sam_model_registry[model_type](checkpoint=checkpoint)
        sam.to(device)
        self.version = model_type
        self._generator_cls = SamAutomaticMaskGenerator
        self._sam = sam

    def generate(self, image: np.ndarray, points: np.ndarray, image_id: str) -> list[np.ndarray]:
        gen = self._generator_cls(
            model=self._sam,
            points_per_side=None,
            point_grids=[np.asarray(points, dtype=np.float64)],
        )
        try:
            records = gen.generate(np.asarray(image))
        except Exception as e:  # backend failures should name the image
            raise ProviderError(f"mask generation failed: {e}", image_id=image_id) from e
        return [r["segmentation"].astype(bool) for r in records]


def config_hash_parts(name: str, version: str, grid_side: int) -> str:
    """Stable short hash of (provider identity, prompt config)."""
    payload = json.dumps(
        {"provider": name, "version": version, "grid_side": grid_side}, sort_keys=True
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def provider_config_hash(provider: MaskProvider, config: GridPromptConfig) -> str:
    return config_hash_parts(provider.name, provider.version, config.grid_side)


def generate_gallery(
    image: np.ndarray,
    points: np.ndarray,
    provider: MaskProvider,
    image_id: str,
    config_hash: str = "",
) -> MaskGallery:
    """Run the provider and package its masks; empty masks are dropped."""
    try:
        raw = provider.generate(image, points, image_id)
    except ProviderError:
        raise
    except Exception as e:
        raise ProviderError(f"provider {provider.name} failed: {e}", image_id=image_id) from e
    masks = [np.asarray(m).astype(bool) for m in raw]
    masks = [m for m in masks if m.any()]
    h, w = image.shape[:2]
    gallery = MaskGallery(
        image_id=image_id,
        masks=masks,
        height=h,
        width=w,
        provider=provider.name,
        config_hash=config_hash,
    )
    gallery.validate()
    return gallery


# ---------------------------------------------------------------------------
# Disk cache: one file per (image, config), atomic replace on write.


def safe_stem(image_id: str) -> str:
    """Filesystem-safe, collision-resistant stem for an image id."""
    stem = re.sub(r"[^A-Za-z0-9_.-]", "_", image_id)[:60]
    digest = hashlib.sha1(image_id.encode()).hexdigest()[:8]
    return f"{stem}-{digest}"


class GalleryCache:
    """Persistent gallery store keyed by (image_id, config_hash)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, image_id: str, config_hash: str) -> Path:
        return self.root / f"{safe_stem(image_id)}__{config_hash}.p2m"

    def write(self, gallery: MaskGallery) -> Path:
        path = self._path(gallery.image_id, gallery.config_hash)
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        os.close(fd)
        try:
            write_gallery(gallery, tmp)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        return path

    def read(self, image_id: str, config_hash: str) -> MaskGallery | None:
        """Gallery on hit, None on miss; corrupt entries raise ChecksumError."""
        path = self._path(image_id, config_hash)
        if not path.exists():
            return None
        return read_gallery(path)

    def get_or_generate(
        self,
        image: np.ndarray,
        provider: MaskProvider,
        image_id: str,
        config: GridPromptConfig,
    ) -> MaskGallery:
        """Cached gallery if intact, otherwise regenerate and persist."""
        chash = provider_config_hash(provider, config)
        try:
            cached = self.read(image_id, chash)
        except ChecksumError:
            self._path(image_id, chash).unlink(missing_ok=True)
            cached = None
        if cached is not None:
            return cached
        gallery = generate_gallery(
            image, generate_grid_points(config), provider, image_id, config_hash=chash
        )
        self.write(gallery)
        return gallery
