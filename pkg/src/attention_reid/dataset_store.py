# src/attention_reid/dataset_store.py

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List

import numpy as np
from PIL import Image

from .errors import ConfigurationError
from .models import Dataset, DatasetConfig, ImageSample

logger = logging.getLogger(__name__)

MANIFEST = "manifest.csv"
DATASET_JSON = "dataset.json"
MANIFEST_FIELDS = ("image_id", "identity", "camera", "split", "path")


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def save_pixmap(path: Path, pixels: np.ndarray) -> None:
    """Write an H×W×3 image in [0, 1] as a binary PPM."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels)).save(path, format="PPM")


def load_pixmap(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


class DatasetStore:
    """
    A dataset on disk:

      <root>/images/<split>/<image_id>.ppm
      <root>/manifest.csv   image_id, identity, camera, split, path
      <root>/dataset.json   generator config echo

    Pixels are quantised to 8 bits by the pixmap format, so a loaded
    dataset equals the saved one up to 1/255 per channel.
    """

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    def exists(self) -> bool:
        return self.manifest_path.is_file()

    # ------------------------------------------------------------------ #
    # Save
    # ------------------------------------------------------------------ #

    def save(self, dataset: Dataset) -> Path:
        rows: List[Dict[str, object]] = []
        for split in Dataset.SPLITS:
            for sample in dataset.split(split):
                rel = Path("images") / split / f"{sample.image_id}.ppm"
                save_pixmap(self.root / rel, sample.pixels)
                rows.append(
                    {
                        "image_id": sample.image_id,
                        "identity": sample.identity,
                        "camera": sample.camera,
                        "split": split,
                        "path": rel.as_posix(),
                    }
                )

        self.root.mkdir(parents=True, exist_ok=True)
        with self.manifest_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
            writer.writeheader()
            writer.writerows(rows)

        echo = {} if dataset.config is None else asdict(dataset.config)
        (self.root / DATASET_JSON).write_text(json.dumps(echo, indent=2, sort_keys=True), encoding="utf-8")
        logger.info("wrote %d images to %s", len(rows), self.root)
        return self.root

    # ------------------------------------------------------------------ #
    # Load
    # ------------------------------------------------------------------ #

    def read_manifest(self) -> List[Dict[str, str]]:
        if not self.exists():
            raise FileNotFoundError(f"no dataset manifest at {self.manifest_path}")
        with self.manifest_path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            missing = [f for f in MANIFEST_FIELDS if not row.get(f)]
            if missing:
                raise ConfigurationError(f"manifest row {row!r} lacks {missing}")
            if row["split"] not in Dataset.SPLITS:
                raise ConfigurationError(f"manifest row {row['image_id']!r} has unknown split {row['split']!r}")
        return rows

    def read_config(self) -> DatasetConfig | None:
        path = self.root / DATASET_JSON
        if not path.is_file():
            return None
        raw = json.loads(path.read_text(encoding="utf-8"))
        if not raw:
            return None
        raw["image_size"] = tuple(raw["image_size"])
        return DatasetConfig(**raw)

    def load(self) -> Dataset:
        splits: Dict[str, List[ImageSample]] = {name: [] for name in Dataset.SPLITS}
        for row in self.read_manifest():
            splits[row["split"]].append(
                ImageSample(
                    pixels=load_pixmap(self.root / row["path"]),
                    identity=int(row["identity"]),
                    camera=int(row["camera"]),
                    image_id=row["image_id"],
                )
            )
        dataset = Dataset(splits["train"], splits["val"], splits["test"], config=self.read_config())
        logger.info(
            "loaded %s: %d train / %d val / %d test images",
            self.root,
            len(dataset.train),
            len(dataset.val),
            len(dataset.test),
        )
        return dataset
