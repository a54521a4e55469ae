"""Mask matching: score gallery masks against the coarse foreground map.

Every candidate mask is resized to the map grid, scored by pixel IoU
against the binarized map, and the highest-scoring mask becomes the final
localization mask. A fallback to the binarized map itself keeps the
pipeline total when the gallery is empty or nothing overlaps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError


@dataclass(frozen=True)
class BinarizedMap:
    """Binary foreground grid at map resolution plus the threshold that built it."""

    grid: np.ndarray  # bool, (h/P, w/P)
    threshold: float


@dataclass
class MatchResult:
    """Outcome of matching one image's gallery against its coarse map."""

    scores: list[float]
    winner_index: int | None
    final_mask: np.ndarray  # bool, native resolution
    fallback_used: bool
    image_id: str = ""
    map_threshold: float = 0.5
    extras: dict = field(default_factory=dict)


def binarize_map(fg_map: np.ndarray, threshold: float = 0.5) -> BinarizedMap:
    """Threshold a probability map; a cell is foreground iff value >= threshold."""
    fg_map = np.asarray(fg_map)
    if fg_map.ndim != 2:
        raise InputError(f"expected 2-d map, got shape {fg_map.shape}")
    return BinarizedMap(grid=fg_map >= threshold, threshold=float(threshold))


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """Fractional-overlap weight matrix (n_out, n_in) for exact area resampling.

    Row i holds each input cell's overlap with output interval i, normalized
    so rows sum to 1. For divisible sizes this is a plain block average.
    """
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, n_in)):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / scale


def resize_mask_to_map(mask: np.ndarray, map_shape: tuple[int, int]) -> np.ndarray:
    """Area-downsample a binary mask and re-binarize at 0.5 fractional coverage."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InputError(f"expected 2-d mask, got shape {mask.shape}")
    h, w = mask.shape
    mh, mw = map_shape
    if (h, w) == (mh, mw):
        return mask.astype(bool)
    if h % mh == 0 and w % mw == 0:
        cover = mask.astype(np.float64).reshape(mh, h // mh, mw, w // mw).mean(axis=(1, 3))
    else:
        cover = _axis_weights(h, mh) @ mask.astype(np.float64) @ _axis_weights(w, mw).T
    return cover >= 0.5


def similarity_score(mask: np.ndarray, map_bin: BinarizedMap) -> float:
    """Pixel-level IoU between a binary mask and the binarized map.

    Integer intersection/union counts, so equal inputs give exactly 1.0 and
    an empty union gives 0.0.
    """
    mask = np.asarray(mask).astype(bool)
    grid = map_bin.grid
    if mask.shape != grid.shape:
        raise InputError(f"mask shape {mask.shape} != map shape {grid.shape}")
    inter = int(np.count_nonzero(mask & grid))
    union = int(np.count_nonzero(mask | grid))
    if union == 0:
        return 0.0
    return inter / union


def _nearest_upsample(grid: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    oh, ow = out_shape
    mh, mw = grid.shape
    rows = (np.arange(oh) * mh) // oh
    cols = (np.arange(ow) * mw) // ow
    return grid[np.ix_(rows, cols)]


def select_mask(gallery, fg_map: np.ndarray, threshold: float = 0.5) -> MatchResult:
    """Pick the gallery mask with the highest IoU against the binarized map.

    Ties break to the lowest gallery index. When the gallery is empty or no
    mask overlaps the map, the final mask falls back to the binarized map
    upsampled (nearest neighbor) to native resolution; the fallback
    binarization never goes empty because the threshold is capped at the
    map's maximum value.
    """
    fg_map = np.asarray(fg_map, dtype=np.float64)
    map_bin = binarize_map(fg_map, threshold)
    native = (gallery.height, gallery.width)

    scores = [
        similarity_score(resize_mask_to_map(m, map_bin.grid.shape), map_bin)
        for m in gallery.masks
    ]

    if scores and max(scores) > 0.0:
        winner = int(np.argmax(scores))
        return MatchResult(
            scores=scores,
            winner_index=winner,
            final_mask=np.asarray(gallery.masks[winner]).astype(bool),
            fallback_used=False,
            image_id=gallery.image_id,
            map_threshold=float(threshold),
        )

    eff = min(float(threshold), float(fg_map.max()))
    fallback_grid = fg_map >= eff
    return MatchResult(
        scores=scores,
        winner_index=None,
        final_mask=_nearest_upsample(fallback_grid, native),
        fallback_used=True,
        image_id=gallery.image_id,
        map_threshold=float(threshold),
    )


# ---------------------------------------------------------------------------
# Probability maps on disk: 16-bit grayscale, value = round(p * 65535).


def write_map_image(fg_map: np.ndarray, path: str | Path) -> None:
    fg_map = np.asarray(fg_map, dtype=np.float64)
    if fg_map.min() < 0 or fg_map.max() > 1:
        raise InputError("map values must lie in [0, 1]")
    Image.fromarray(np.round(fg_map * 65535.0).astype(np.uint16)).save(path)


def read_map_image(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.dtype != np.uint16:
        raise InputError(f"{path}: expected 16-bit grayscale, got {arr.dtype}")
    return arr.astype(np.float64) / 65535.0
