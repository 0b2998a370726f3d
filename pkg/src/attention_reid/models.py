# src/attention_reid/models.py

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError


class TapLayer(str, Enum):
    """
    Where the feature cube is read from the last backbone stage.

      - POST_CONV – after the last conv + relu, before its pooling
      - POST_POOL – after the last pooling layer (if the stage has one)
    """

    POST_CONV = "post_conv"
    POST_POOL = "post_pool"


class PoolingMode(str, Enum):
    """
    How the glimpse input A_t is formed from the feature cube.

      - ATTENTION – softmax location map predicted from h_{t-1} (full model)
      - AVG_POOL  – uniform spatial mean at every step (no attention)
      - MAX_POOL  – spatial max at every step (no attention)
      - FC_HEAD   – no recurrence at all: two fully-connected layers
    """

    ATTENTION = "attention"
    AVG_POOL = "avg_pool"
    MAX_POOL = "max_pool"
    FC_HEAD = "fc_head"


class LossMode(str, Enum):
    MULTI = "multi"
    TRIPLET = "triplet"
    IDENTIFICATION = "identification"


class BatchMode(str, Enum):
    BALANCED = "balanced"
    LABEL_SHUFFLE = "label_shuffle"


# ---------------------------------------------------------------------- #
# Images and datasets
# ---------------------------------------------------------------------- #


@dataclass
class ImageSample:
    """
    One rendered person image.

    pixels are H×W×C floats in [0, 1]; camera is 0 or 1.
    """

    pixels: np.ndarray
    identity: int
    camera: int
    image_id: str = ""

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise ConfigurationError(
                f"ImageSample pixels must be H×W×C, got shape {self.pixels.shape}"
            )
        self.identity = int(self.identity)
        self.camera = int(self.camera)
        if self.identity < 0:
            raise ConfigurationError(f"identity must be >= 0, got {self.identity}")
        if self.camera not in (0, 1):
            raise ConfigurationError(f"camera must be 0 or 1, got {self.camera}")
        if not self.image_id:
            self.image_id = f"id{self.identity:04d}_cam{self.camera}"


@dataclass
class DatasetConfig:
    """
    Knobs of the synthetic identity generator.

    Identities are split into train / val / test by count; the train
    count is whatever remains after val and test.
    Distortion levels of 0 make both camera views pixel-identical.
    """

    num_identities: int = 35
    val_identities: int = 5
    test_identities: int = 10
    images_per_identity_per_camera: int = 2
    image_size: Tuple[int, int] = (32, 32)
    seed: int = 0

    # per-camera distortions
    color_shift: float = 0.15       # channel-mixing strength
    illumination_gain: float = 0.2  # relative brightness change
    occlusion_prob: float = 0.1     # chance of an occluding bar
    pose_offset: int = 2            # max horizontal shift in pixels
    pixel_noise: float = 0.02       # std of additive sensor noise

    def __post_init__(self) -> None:
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if self.num_identities < 2:
            raise ConfigurationError(
                f"num_identities must be >= 2, got {self.num_identities}"
            )
        if self.images_per_identity_per_camera < 1:
            raise ConfigurationError(
                "images_per_identity_per_camera must be >= 1, "
                f"got {self.images_per_identity_per_camera}"
            )
        if self.val_identities < 0 or self.test_identities < 0:
            raise ConfigurationError("val/test identity counts must be >= 0")
        if self.train_identities < 1:
            raise ConfigurationError(
                f"no identities left for training: {self.num_identities} total, "
                f"{self.val_identities} val, {self.test_identities} test"
            )
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigurationError(
                f"occlusion_prob must be in [0, 1], got {self.occlusion_prob}"
            )

    @property
    def train_identities(self) -> int:
        return self.num_identities - self.val_identities - self.test_identities

    @property
    def images_per_identity(self) -> int:
        return 2 * self.images_per_identity_per_camera

    @classmethod
    def hardened(cls, **overrides) -> "DatasetConfig":
        """Higher-distortion preset used for the attention-vs-pooling checks."""
        values = dict(
            color_shift=0.35,
            illumination_gain=0.4,
            occlusion_prob=0.35,
            pose_offset=4,
            pixel_noise=0.05,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class Dataset:
    """
    train / val / test lists of ImageSample with pairwise disjoint
    identity sets.
    """

    train: List[ImageSample]
    val: List[ImageSample]
    test: List[ImageSample]
    config: Optional[DatasetConfig] = None

    SPLITS = ("train", "val", "test")

    def __post_init__(self) -> None:
        seen: Dict[int, str] = {}
        for name in self.SPLITS:
            for identity in self.identities(name):
                other = seen.get(identity)
                if other is not None and other != name:
                    raise ConfigurationError(
                        f"identity {identity} appears in both {other!r} and {name!r}"
                    )
                seen[identity] = name

    def split(self, name: str) -> List[ImageSample]:
        if name not in self.SPLITS:
            raise ConfigurationError(f"unknown split {name!r}")
        return getattr(self, name)

    def identities(self, name: str) -> List[int]:
        """Sorted identity labels present in a split."""
        return sorted({s.identity for s in self.split(name)})

    def all_samples(self) -> List[ImageSample]:
        return [s for name in self.SPLITS for s in self.split(name)]


# ---------------------------------------------------------------------- #
# Backbone configuration
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class PoolSpec:
    window: int = 2
    stride: Optional[int] = None

    @property
    def effective_stride(self) -> int:
        return self.stride or self.window


@dataclass(frozen=True)
class StageSpec:
    """conv → relu → optional max-pool."""

    conv: ConvSpec
    pool: Optional[PoolSpec] = None


def _default_stages() -> Tuple[StageSpec, ...]:
    return (
        StageSpec(ConvSpec(16), PoolSpec(2)),
        StageSpec(ConvSpec(32), PoolSpec(2)),
        StageSpec(ConvSpec(32), None),
    )


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def pool_output_size(size: int, window: int, stride: int) -> int:
    return (size - window) // stride + 1


@dataclass
class BackboneConfig:
    """
    Small conv/pool stack that stands in for a truncated ImageNet CNN.

    feature_size (K) and feature_depth (D) are declared, then checked
    against the spatial arithmetic of the stack at the tap layer.
    """

    image_size: Tuple[int, int] = (32, 32)
    in_channels: int = 3
    stages: Tuple[StageSpec, ...] = field(default_factory=_default_stages)
    feature_size: int = 8
    feature_depth: int = 32
    tap_layer: TapLayer = TapLayer.POST_POOL

    def __post_init__(self) -> None:
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        self.stages = tuple(self.stages)
        self.tap_layer = TapLayer(self.tap_layer)
        if not self.stages:
            raise ConfigurationError("backbone needs at least one stage")
        h, w, d = self.tap_shape()
        if h != w:
            raise ConfigurationError(f"feature cube must be square, got {h}×{w}")
        if (h, d) != (self.feature_size, self.feature_depth):
            raise ConfigurationError(
                f"backbone arithmetic yields K={h}, D={d} at {self.tap_layer.value} "
                f"but config declares K={self.feature_size}, D={self.feature_depth}"
            )

    def spatial_trace(self) -> List[Tuple[str, int, int, int]]:
        """
        (layer name, h, w, channels) after every conv and pool layer.
        """
        h, w = self.image_size
        c = self.in_channels
        trace: List[Tuple[str, int, int, int]] = []
        for i, stage in enumerate(self.stages):
            conv = stage.conv
            h = conv_output_size(h, conv.kernel, conv.stride, conv.padding)
            w = conv_output_size(w, conv.kernel, conv.stride, conv.padding)
            c = conv.out_channels
            if h < 1 or w < 1:
                raise ConfigurationError(f"conv{i} collapses the spatial grid to {h}×{w}")
            trace.append((f"conv{i}", h, w, c))
            if stage.pool is not None:
                if stage.pool.window > min(h, w):
                    raise ConfigurationError(
                        f"pool{i} window {stage.pool.window} exceeds input {h}×{w}"
                    )
                stride = stage.pool.effective_stride
                h = pool_output_size(h, stage.pool.window, stride)
                w = pool_output_size(w, stage.pool.window, stride)
                trace.append((f"pool{i}", h, w, c))
        return trace

    def tap_shape(self) -> Tuple[int, int, int]:
        trace = self.spatial_trace()
        last = len(self.stages) - 1
        if self.tap_layer is TapLayer.POST_CONV:
            _, h, w, c = next(t for t in trace if t[0] == f"conv{last}")
        else:
            _, h, w, c = trace[-1]
        return h, w, c

    @classmethod
    def micro(cls) -> "BackboneConfig":
        """8×8 input → K=2, D=4; used for full-pipeline gradient checks."""
        return cls(
            image_size=(8, 8),
            in_channels=3,
            stages=(
                StageSpec(ConvSpec(4), PoolSpec(2)),
                StageSpec(ConvSpec(4), PoolSpec(2)),
            ),
            feature_size=2,
            feature_depth=4,
        )


# ---------------------------------------------------------------------- #
# Attention / loss / optimisation configuration
# ---------------------------------------------------------------------- #


@dataclass
class AttentionConfig:
    hidden_size: int = 64
    glimpses: int = 8
    steps: Tuple[int, ...] = (2, 4, 8)
    pooling: PoolingMode = PoolingMode.ATTENTION

    def __post_init__(self) -> None:
        self.steps = tuple(int(s) for s in self.steps)
        self.pooling = PoolingMode(self.pooling)
        if self.hidden_size < 1:
            raise ConfigurationError(f"hidden_size must be >= 1, got {self.hidden_size}")
        if self.glimpses < 1:
            raise ConfigurationError(f"glimpses must be >= 1, got {self.glimpses}")
        if not self.steps:
            raise ConfigurationError("at least one concatenation step is required")
        if any(s < 1 or s > self.glimpses for s in self.steps):
            raise ConfigurationError(
                f"steps {list(self.steps)} must lie in [1, {self.glimpses}]"
            )
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ConfigurationError(
                f"steps {list(self.steps)} must be strictly increasing"
            )

    @property
    def embedding_dim(self) -> int:
        return len(self.steps) * self.hidden_size


@dataclass
class LossConfig:
    margin: float = 0.3
    mode: LossMode = LossMode.MULTI

    def __post_init__(self) -> None:
        self.mode = LossMode(self.mode)
        if self.margin <= 0:
            raise ConfigurationError(f"margin must be > 0, got {self.margin}")


@dataclass
class OptimConfig:
    """
    SGD with momentum, weight decay and the inverse learning-rate policy
    eta_k = eta0 * (1 + gamma * k) ** -power.
    """

    eta0: float = 0.001
    gamma: float = 1e-4
    power: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_iters: int = 5000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.eta0 <= 0:
            raise ConfigurationError(f"eta0 must be > 0, got {self.eta0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(
                f"weight_decay must be >= 0, got {self.weight_decay}"
            )
        if self.max_iters < 0:
            raise ConfigurationError(f"max_iters must be >= 0, got {self.max_iters}")

    @classmethod
    def pretraining(cls, **overrides) -> "OptimConfig":
        values = dict(eta0=0.01, max_iters=2000)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def end_to_end(cls, **overrides) -> "OptimConfig":
        values = dict(eta0=0.001, max_iters=5000)
        values.update(overrides)
        return cls(**values)


# ---------------------------------------------------------------------- #
# Training records
# ---------------------------------------------------------------------- #


@dataclass
class LossReport:
    """
    Loss terms of one iteration.

    multi is always trip + iden; objective is what was actually
    minimised (differs from multi only for single-loss runs).
    """

    trip: float
    iden: float
    active_triplets: int
    objective: Optional[float] = None
    multi: float = field(init=False)

    def __post_init__(self) -> None:
        self.multi = self.trip + self.iden
        if self.objective is None:
            self.objective = self.multi


@dataclass
class TrainState:
    """
    Everything the optimiser mutates: parameters, momentum buffers,
    iteration counter, loss history and the best-validation snapshot.
    """

    params: Dict[str, np.ndarray]
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    history: List[LossReport] = field(default_factory=list)
    best_params: Optional[Dict[str, np.ndarray]] = None
    best_rank1: float = -1.0
    best_loss: float = float("inf")

    def __post_init__(self) -> None:
        for name, value in self.params.items():
            buf = self.velocity.get(name)
            if buf is None:
                self.velocity[name] = np.zeros_like(value)
            elif buf.shape != value.shape:
                raise ConfigurationError(
                    f"momentum buffer {name!r} has shape {buf.shape}, "
                    f"parameter has {value.shape}"
                )


@dataclass
class ScheduleConfig:
    """
    Batch composition and bookkeeping cadence of a training run.

    eval_every / log_every / checkpoint_every are in iterations; 0 turns
    the corresponding action off (validation still runs once at the end).
    """

    batch_size: int = 16
    identities_per_batch: int = 4
    batch_mode: BatchMode = BatchMode.BALANCED
    pretrain_batch_size: int = 32
    eval_every: int = 250
    eval_repeats: int = 10
    log_every: int = 50
    checkpoint_every: int = 500
    mining_retries: int = 10
    augment: bool = True
    freeze_backbone: bool = False
    skip_pretrain: bool = False

    def __post_init__(self) -> None:
        self.batch_mode = BatchMode(self.batch_mode)
        for name in ("batch_size", "pretrain_batch_size", "eval_repeats"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("eval_every", "log_every", "checkpoint_every", "mining_retries"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")

    @property
    def regime(self) -> str:
        return "non-end-to-end" if self.freeze_backbone else "end-to-end"
