# src/attention_reid/data.py

"""
Synthetic two-camera person images, the crop/flip augmentation recipe
and mini-batch assembly.

Every image is a pure function of (seed, identity, camera, index), so
generation is deterministic and per-image streams never interfere.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .errors import UsageError
from .models import Dataset, DatasetConfig, ImageSample

logger = logging.getLogger(__name__)

AUGMENT_CROPS = 10
AUGMENT_FRACTION = 0.05
MIN_AUGMENT_SIZE = 20
LABEL_SHUFFLE_ROUNDS = 10
BACKGROUND = 0.5


# ---------------------------------------------------------------------- #
# Identity appearance
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class Figure:
    """Camera-independent appearance of one identity."""

    head_frac: float
    torso_frac: float
    width_frac: float
    colors: np.ndarray      # 3×3: head, torso, legs
    texture: str            # "plain" | "hstripe" | "vstripe"
    period: int
    amplitude: float


def identity_figure(seed: int, identity: int) -> Figure:
    rng = np.random.default_rng([seed, identity])
    return Figure(
        head_frac=float(rng.uniform(0.16, 0.24)),
        torso_frac=float(rng.uniform(0.30, 0.40)),
        width_frac=float(rng.uniform(0.35, 0.55)),
        colors=rng.uniform(0.05, 0.95, size=(3, 3)),
        texture=("plain", "hstripe", "vstripe")[int(rng.integers(3))],
        period=int(rng.integers(2, 5)),
        amplitude=float(rng.uniform(0.15, 0.3)),
    )


def render_figure(figure: Figure, size: Tuple[int, int], shift: int = 0) -> np.ndarray:
    """Head ellipse, textured torso and two legs on a flat background."""
    h, w = size
    img = np.full((h, w, 3), BACKGROUND)
    yy, xx = np.mgrid[0:h, 0:w]
    cx = (w - 1) / 2.0 + shift
    top = int(round(0.05 * h))
    head_end = top + max(1, int(round(figure.head_frac * h)))
    torso_end = head_end + max(1, int(round(figure.torso_frac * h)))
    bottom = int(round(0.95 * h))
    half = max(1.0, figure.width_frac * w / 2.0)

    head_ry = max(0.5, (head_end - top) / 2.0)
    head_rx = max(0.5, half * 0.55)
    head_cy = top + head_ry - 0.5
    head = ((yy - head_cy) / head_ry) ** 2 + ((xx - cx) / head_rx) ** 2 <= 1.0
    img[head] = figure.colors[0]

    torso = (yy >= head_end) & (yy < torso_end) & (np.abs(xx - cx) <= half)
    pattern = np.ones((h, w))
    if figure.texture == "hstripe":
        pattern = np.where((yy // figure.period) % 2 == 0, 1.0, 1.0 - figure.amplitude)
    elif figure.texture == "vstripe":
        pattern = np.where((xx // figure.period) % 2 == 0, 1.0, 1.0 - figure.amplitude)
    img[torso] = figure.colors[1] * pattern[torso][:, None]

    gap = max(0.5, half * 0.15)
    legs = (yy >= torso_end) & (yy < bottom) & (np.abs(xx - cx) <= half * 0.8) & (np.abs(xx - cx) >= gap)
    img[legs] = figure.colors[2]
    return img


# ---------------------------------------------------------------------- #
# Camera views
# ---------------------------------------------------------------------- #


def _channel_mix(strength: float, camera: int) -> np.ndarray:
    """Blend each channel toward its neighbour; the direction depends on the camera."""
    roll = np.roll(np.eye(3), 1 if camera == 0 else -1, axis=1)
    return (1.0 - strength) * np.eye(3) + strength * roll


def render_view(
    figure: Figure,
    config: DatasetConfig,
    identity: int,
    camera: int,
    index: int,
) -> np.ndarray:
    """
    One camera image of a figure. With every distortion level at 0 the
    result is independent of camera and index.
    """
    rng = np.random.default_rng([config.seed, identity, camera, index, 1])
    u_gain, u_mix, u_occ, row_frac, bar_frac, gray = rng.uniform(size=6)
    shift = int(rng.integers(-config.pose_offset, config.pose_offset + 1)) if config.pose_offset else 0
    noise = rng.standard_normal((*config.image_size, 3))

    img = render_figure(figure, config.image_size, shift)
    sign = -1.0 if camera == 0 else 1.0
    gain = 1.0 + sign * config.illumination_gain * (0.5 + 0.5 * u_gain)
    strength = config.color_shift * (0.5 + 0.5 * u_mix)
    img = (img @ _channel_mix(strength, camera).T) * gain

    if u_occ < config.occlusion_prob:
        h = config.image_size[0]
        bar = max(1, int(round(h * (0.1 + 0.15 * bar_frac))))
        start = int(round(row_frac * (h - bar)))
        img[start : start + bar] = 0.2 + 0.6 * gray

    img = img + config.pixel_noise * noise
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(config: DatasetConfig) -> Dataset:
    """
    Identities 0..n-1 go to train, then val, then test by count. Each
    identity gets images_per_identity_per_camera views from each camera.
    """
    counts = (config.train_identities, config.val_identities, config.test_identities)
    splits: Dict[str, List[ImageSample]] = {name: [] for name in Dataset.SPLITS}
    identity = 0
    for name, count in zip(Dataset.SPLITS, counts):
        for _ in range(count):
            figure = identity_figure(config.seed, identity)
            for camera in (0, 1):
                for index in range(config.images_per_identity_per_camera):
                    splits[name].append(
                        ImageSample(
                            pixels=render_view(figure, config, identity, camera, index),
                            identity=identity,
                            camera=camera,
                            image_id=f"id{identity:04d}_cam{camera}_{index:02d}",
                        )
                    )
            identity += 1
    logger.info(
        "generated %d identities (%d train / %d val / %d test), %d images",
        config.num_identities,
        *counts,
        sum(len(v) for v in splits.values()),
    )
    return Dataset(splits["train"], splits["val"], splits["test"], config=config)


# ---------------------------------------------------------------------- #
# Augmentation
# ---------------------------------------------------------------------- #


def max_translation(size: int) -> int:
    return int(np.floor(AUGMENT_FRACTION * size))


def translate(pixels: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift content by (dy, dx); out-of-frame pixels replicate the edge."""
    h, w = pixels.shape[:2]
    pad = max(abs(dy), abs(dx))
    if pad == 0:
        return pixels.copy()
    padded = np.pad(pixels, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    return padded[pad - dy : pad - dy + h, pad - dx : pad - dx + w].copy()


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1].copy()


def _check_augmentable(image: ImageSample) -> Tuple[int, int]:
    h, w = image.pixels.shape[:2]
    if h < MIN_AUGMENT_SIZE or w < MIN_AUGMENT_SIZE:
        raise UsageError(
            f"image {image.image_id} is {h}×{w}; augmentation needs at least "
            f"{MIN_AUGMENT_SIZE}×{MIN_AUGMENT_SIZE}"
        )
    return max_translation(h), max_translation(w)


def _draw_offset(rng: np.random.Generator, my: int, mx: int) -> Tuple[int, int]:
    return int(rng.integers(-my, my + 1)), int(rng.integers(-mx, mx + 1))


def augment(image: ImageSample, rng: np.random.Generator) -> List[ImageSample]:
    """Ten random translated crops followed by the mirror of each (20 images)."""
    my, mx = _check_augmentable(image)
    crops = []
    for k in range(AUGMENT_CROPS):
        dy, dx = _draw_offset(rng, my, mx)
        crops.append(
            ImageSample(translate(image.pixels, dy, dx), image.identity, image.camera, f"{image.image_id}_c{k}")
        )
    mirrors = [ImageSample(hflip(c.pixels), c.identity, c.camera, f"{c.image_id}f") for c in crops]
    return crops + mirrors


def random_augmentation(image: ImageSample, rng: np.random.Generator) -> ImageSample:
    """One draw from the same crop/flip distribution as ``augment``."""
    my, mx = _check_augmentable(image)
    dy, dx = _draw_offset(rng, my, mx)
    pixels = translate(image.pixels, dy, dx)
    if rng.random() < 0.5:
        pixels = hflip(pixels)
    return ImageSample(pixels, image.identity, image.camera, image.image_id)


# ---------------------------------------------------------------------- #
# Mini-batches
# ---------------------------------------------------------------------- #


def _by_identity(samples: Sequence[ImageSample]) -> Dict[int, List[int]]:
    groups: Dict[int, List[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.identity, []).append(i)
    return groups


def _samples(source: Union[Dataset, Sequence[ImageSample]], split: str) -> Sequence[ImageSample]:
    return source.split(split) if isinstance(source, Dataset) else source


def build_minibatch(
    source: Union[Dataset, Sequence[ImageSample]],
    batch_size: int,
    identities_per_batch: int,
    rng: np.random.Generator,
    augment_images: bool = True,
    split: str = "train",
) -> List[ImageSample]:
    """
    P identities × K samples each (K = batch_size / P), drawn without
    replacement, optionally passed through one random crop/flip each.
    Every batch admits at least one valid triplet.
    """
    samples = _samples(source, split)
    if identities_per_batch < 2:
        raise UsageError(f"identities_per_batch must be >= 2, got {identities_per_batch}")
    if batch_size % identities_per_batch:
        raise UsageError(
            f"batch_size {batch_size} is not a multiple of identities_per_batch {identities_per_batch}"
        )
    per_identity = batch_size // identities_per_batch
    if per_identity < 2:
        raise UsageError(f"batch_size {batch_size} leaves fewer than 2 samples per identity")
    groups = _by_identity(samples)
    eligible = sorted(i for i, idx in groups.items() if len(idx) >= per_identity)
    if len(eligible) < identities_per_batch:
        raise UsageError(
            f"only {len(eligible)} identities have >= {per_identity} samples; "
            f"{identities_per_batch} needed"
        )

    chosen = rng.choice(eligible, size=identities_per_batch, replace=False)
    batch: List[ImageSample] = []
    for identity in chosen:
        for i in rng.choice(groups[int(identity)], size=per_identity, replace=False):
            sample = samples[int(i)]
            batch.append(random_augmentation(sample, rng) if augment_images else sample)
    return batch


def label_shuffle_batches(
    source: Union[Dataset, Sequence[ImageSample]],
    batch_size: int,
    rng: np.random.Generator,
    rounds: int = LABEL_SHUFFLE_ROUNDS,
    split: str = "train",
) -> List[List[int]]:
    """
    Shuffle the identity order ``rounds`` times, lay each shuffled order
    out identity-grouped, and cut the concatenation into batches of
    sample indices. Grouping keeps same-label samples adjacent so most
    batches contain positive pairs; the caller skips those that do not.
    """
    samples = _samples(source, split)
    if batch_size < 2:
        raise UsageError(f"batch_size must be >= 2, got {batch_size}")
    groups = _by_identity(samples)
    identities = sorted(groups)
    order: List[int] = []
    for _ in range(rounds):
        for identity in rng.permutation(identities):
            order.extend(groups[int(identity)])
    return [order[i : i + batch_size] for i in range(0, len(order) - batch_size + 1, batch_size)]
