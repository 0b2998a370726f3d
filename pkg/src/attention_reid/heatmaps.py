# src/attention_reid/heatmaps.py

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
from PIL import Image

from .dataset_store import to_uint8
from .errors import DimensionError

logger = logging.getLogger(__name__)

OVERLAY_ALPHA = 0.5


def heatmap_levels(weights: np.ndarray) -> np.ndarray:
    """K×K attention weights → 8-bit levels, max-normalised per map."""
    weights = np.asarray(weights, dtype=np.float64)
    peak = weights.max()
    if peak <= 0:
        return np.zeros(weights.shape, dtype=np.uint8)
    return np.round(weights / peak * 255.0).astype(np.uint8)


def upsample(levels: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour upsampling of a K×K map to H×W."""
    h, w = size
    return np.asarray(Image.fromarray(levels).resize((w, h), resample=Image.Resampling.NEAREST))


def overlay(pixels: np.ndarray, levels: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend the heat into the red channel of a dimmed copy of the image."""
    base = to_uint8(pixels).astype(np.float64)
    heat = levels.astype(np.float64)
    out = (1.0 - alpha) * base
    out[..., 0] += alpha * heat
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


@dataclass
class HeatmapExport:
    stem: str
    heatmaps: List[Path] = field(default_factory=list)
    overlays: List[Path] = field(default_factory=list)
    raw: Path | None = None


def export_attention_maps(
    maps: np.ndarray,
    pixels: np.ndarray,
    out_dir: Path,
    stem: str,
) -> HeatmapExport:
    """
    For each glimpse step t write <stem>_step<t>.pgm (grayscale heat,
    upsampled to the image) and <stem>_step<t>_overlay.ppm, plus one
    <stem>_maps.csv with the raw weights (step, row, col, weight).
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[1] != maps.shape[2]:
        raise DimensionError(f"attention maps must be T×K×K, got {maps.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = pixels.shape[:2]
    export = HeatmapExport(stem)

    for t, weights in enumerate(maps):
        levels = upsample(heatmap_levels(weights), size)
        heat_path = out_dir / f"{stem}_step{t}.pgm"
        Image.fromarray(levels).save(heat_path, format="PPM")
        export.heatmaps.append(heat_path)
        over_path = out_dir / f"{stem}_step{t}_overlay.ppm"
        Image.fromarray(overlay(pixels, levels)).save(over_path, format="PPM")
        export.overlays.append(over_path)

    export.raw = out_dir / f"{stem}_maps.csv"
    with export.raw.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "row", "col", "weight"])
        for t, weights in enumerate(maps):
            for (r, c), w in np.ndenumerate(weights):
                writer.writerow([t, r, c, repr(float(w))])
    logger.debug("exported %d attention maps for %s", len(maps), stem)
    return export


def read_raw_maps(path: Path) -> np.ndarray:
    """Inverse of the raw CSV: T×K×K weights."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = [(int(r["step"]), int(r["row"]), int(r["col"]), float(r["weight"])) for r in csv.DictReader(fh)]
    steps = max(r[0] for r in rows) + 1
    k = max(r[1] for r in rows) + 1
    maps = np.zeros((steps, k, k))
    for t, r, c, w in rows:
        maps[t, r, c] = w
    return maps
