# src/attention_reid/config.py

"""
Run configuration: one flat table of dotted keys with typed defaults.

Sources merge in this order, later wins:

    DEFAULTS  <-  TOML file  <-  ATTENTION_REID_* environment  <-  flags

Environment keys spell dots as double underscores, so
ATTENTION_REID_LOSS__MARGIN=0.2 sets ``loss.margin``.
"""

from __future__ import annotations

import json
import logging
import os
import tomllib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

from .data import MIN_AUGMENT_SIZE
from .errors import ConfigurationError
from .models import (
    AttentionConfig,
    BackboneConfig,
    BatchMode,
    DatasetConfig,
    LossConfig,
    LossMode,
    OptimConfig,
    PoolingMode,
    ScheduleConfig,
    TapLayer,
)

logger = logging.getLogger(__name__)

E = TypeVar("E", bound=Enum)

ENV_PREFIX = "ATTENTION_REID_"
CONFIG_ECHO = "config.json"

DEFAULTS: Dict[str, Any] = {
    "run.seed": 0,
    # synthetic data
    "data.num_identities": 35,
    "data.val_identities": 5,
    "data.test_identities": 10,
    "data.images_per_identity_per_camera": 2,
    "data.image_size": [32, 32],
    "data.hardened": False,
    "data.color_shift": 0.15,
    "data.illumination_gain": 0.2,
    "data.occlusion_prob": 0.1,
    "data.pose_offset": 2,
    "data.pixel_noise": 0.02,
    # model
    "backbone.preset": "default",
    "backbone.tap": "post_pool",
    "attention.hidden_size": 64,
    "attention.glimpses": 8,
    "attention.steps": "2,4,8",
    "attention.pooling": "attention",
    "loss.margin": 0.3,
    "loss.mode": "multi",
    # optimisation
    "optim.gamma": 1e-4,
    "optim.power": 0.75,
    "optim.momentum": 0.9,
    "optim.weight_decay": 5e-4,
    "optim.pretrain.eta0": 0.01,
    "optim.pretrain.max_iters": 2000,
    "optim.e2e.eta0": 0.001,
    "optim.e2e.max_iters": 5000,
    # schedule
    "train.batch_size": 16,
    "train.identities_per_batch": 4,
    "train.batch_mode": "balanced",
    "train.pretrain_batch_size": 32,
    "train.eval_every": 250,
    "train.log_every": 50,
    "train.checkpoint_every": 500,
    "train.mining_retries": 10,
    "train.augment": True,
    "train.freeze_backbone": False,
    "train.skip_pretrain": False,
    "train.init_checkpoint": "",
    # evaluation
    "eval.repeats": 10,
}

# which DatasetConfig fields come straight from data.* keys
_DATA_FIELDS = (
    "num_identities",
    "val_identities",
    "test_identities",
    "images_per_identity_per_camera",
    "color_shift",
    "illumination_gain",
    "occlusion_prob",
    "pose_offset",
    "pixel_noise",
)
_HARDENED_FIELDS = ("color_shift", "illumination_gain", "occlusion_prob", "pose_offset", "pixel_noise")


def _coerce(key: str, value: Any) -> Any:
    """Cast ``value`` to the type of DEFAULTS[key]."""
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(value)
                return lowered in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.replace(" ", "").split(",") if v]
            return [int(v) for v in value]
        if key == "attention.steps" and isinstance(value, (list, tuple)):
            return ",".join(str(int(v)) for v in value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{key}: cannot use {value!r} as {type(default).__name__}") from e


def flatten(table: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Nested TOML tables → dotted keys."""
    flat: Dict[str, Any] = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def _merge(values: Dict[str, Any], updates: Mapping[str, Any], source: str) -> None:
    for key, value in updates.items():
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key {key!r} (from {source})")
        values[key] = _coerce(key, value)


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    return {
        name[len(ENV_PREFIX) :].lower().replace("__", "."): value
        for name, value in environ.items()
        if name.startswith(ENV_PREFIX)
    }


def resolve_steps(spec: str, glimpses: int) -> Tuple[int, ...]:
    """'all' → 1..T, 'last' → (T,), otherwise a comma-separated list."""
    spec = spec.strip().lower()
    if spec == "all":
        return tuple(range(1, glimpses + 1))
    if spec == "last":
        return (glimpses,)
    try:
        return tuple(int(s) for s in spec.split(",") if s.strip())
    except ValueError as e:
        raise ConfigurationError(f"attention.steps: cannot parse {spec!r}") from e


@dataclass
class RunConfig:
    """Resolved flat configuration plus typed views onto it."""

    values: Dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def resolve(
        cls,
        config_path: Optional[Path] = None,
        environ: Optional[Mapping[str, str]] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> "RunConfig":
        values = dict(DEFAULTS)
        if config_path is not None:
            with Path(config_path).open("rb") as fh:
                try:
                    table = tomllib.load(fh)
                except tomllib.TOMLDecodeError as e:
                    raise ConfigurationError(f"{config_path}: {e}") from e
            _merge(values, flatten(table), str(config_path))
        _merge(values, env_overrides(environ), "environment")
        _merge(values, {k: v for k, v in (overrides or {}).items() if v is not None}, "flags")
        config = cls(values)
        config.validate()
        return config

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def validate(self) -> None:
        """Build every typed view once so bad values fail before any work starts."""
        dataset = self.dataset()
        backbone = self.backbone()
        self.attention()
        self.loss()
        self.pretrain_optim()
        self.train_optim()
        schedule = self.schedule()
        if dataset.image_size != backbone.image_size:
            raise ConfigurationError(
                f"data.image_size {list(dataset.image_size)} does not match the "
                f"{self.values['backbone.preset']} backbone input {list(backbone.image_size)}"
            )
        if schedule.augment and min(dataset.image_size) < MIN_AUGMENT_SIZE:
            raise ConfigurationError(
                f"train.augment needs images of at least {MIN_AUGMENT_SIZE} pixels; "
                f"set train.augment = false for {list(dataset.image_size)}"
            )

    @property
    def seed(self) -> int:
        return int(self.values["run.seed"])

    # ------------------------------------------------------------------ #
    # Typed views
    # ------------------------------------------------------------------ #

    def dataset(self) -> DatasetConfig:
        v = self.values
        fields = {name: v[f"data.{name}"] for name in _DATA_FIELDS}
        if v["data.hardened"]:
            preset = DatasetConfig.hardened()
            # hardened levels apply unless a source changed the key explicitly
            for name in _HARDENED_FIELDS:
                if fields[name] == DEFAULTS[f"data.{name}"]:
                    fields[name] = getattr(preset, name)
        return DatasetConfig(image_size=tuple(v["data.image_size"]), seed=self.seed, **fields)

    def backbone(self) -> BackboneConfig:
        preset = self.values["backbone.preset"]
        tap = self._choice("backbone.tap", TapLayer)
        if preset == "default":
            base = BackboneConfig()
        elif preset == "micro":
            base = BackboneConfig.micro()
        else:
            raise ConfigurationError(f"backbone.preset must be 'default' or 'micro', got {preset!r}")
        if tap is base.tap_layer:
            return base
        # post_conv skips the last pool; K follows from the arithmetic
        last = f"conv{len(base.stages) - 1}"
        _, h, _, d = next(t for t in base.spatial_trace() if t[0] == last)
        return BackboneConfig(
            image_size=base.image_size,
            in_channels=base.in_channels,
            stages=base.stages,
            feature_size=h,
            feature_depth=d,
            tap_layer=tap,
        )

    def attention(self) -> AttentionConfig:
        v = self.values
        glimpses = v["attention.glimpses"]
        return AttentionConfig(
            hidden_size=v["attention.hidden_size"],
            glimpses=glimpses,
            steps=resolve_steps(v["attention.steps"], glimpses),
            pooling=self._choice("attention.pooling", PoolingMode),
        )

    def loss(self) -> LossConfig:
        return LossConfig(margin=self.values["loss.margin"], mode=self._choice("loss.mode", LossMode))

    def _optim(self, stage: str) -> OptimConfig:
        v = self.values
        return OptimConfig(
            eta0=v[f"optim.{stage}.eta0"],
            gamma=v["optim.gamma"],
            power=v["optim.power"],
            momentum=v["optim.momentum"],
            weight_decay=v["optim.weight_decay"],
            max_iters=v[f"optim.{stage}.max_iters"],
            seed=self.seed,
        )

    def pretrain_optim(self) -> OptimConfig:
        return self._optim("pretrain")

    def train_optim(self) -> OptimConfig:
        return self._optim("e2e")

    def schedule(self) -> ScheduleConfig:
        v = self.values
        return ScheduleConfig(
            batch_size=v["train.batch_size"],
            identities_per_batch=v["train.identities_per_batch"],
            batch_mode=self._choice("train.batch_mode", BatchMode),
            pretrain_batch_size=v["train.pretrain_batch_size"],
            eval_every=v["train.eval_every"],
            eval_repeats=v["eval.repeats"],
            log_every=v["train.log_every"],
            checkpoint_every=v["train.checkpoint_every"],
            mining_retries=v["train.mining_retries"],
            augment=v["train.augment"],
            freeze_backbone=v["train.freeze_backbone"],
            skip_pretrain=v["train.skip_pretrain"],
        )

    def _choice(self, key: str, kind: Type[E]) -> E:
        raw = str(self.values[key]).strip().lower()
        try:
            return kind(raw)
        except ValueError as e:
            allowed = ", ".join(m.value for m in kind)
            raise ConfigurationError(f"{key} must be one of {allowed}; got {raw!r}") from e

    # ------------------------------------------------------------------ #
    # Echo
    # ------------------------------------------------------------------ #

    def echo(self, out_dir: Path) -> Path:
        """Write the resolved configuration into a run directory."""
        from . import __version__

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / CONFIG_ECHO
        payload = {"version": __version__, "seed": self.seed, "config": self.values}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def from_echo(cls, path: Path) -> "RunConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        values = dict(DEFAULTS)
        _merge(values, raw.get("config", {}), str(path))
        return cls(values)
