# src/attention_reid/__init__.py

__version__ = "0.1.0"

from .models import (
    AttentionConfig,
    BackboneConfig,
    BatchMode,
    Dataset,
    DatasetConfig,
    ImageSample,
    LossConfig,
    LossMode,
    OptimConfig,
    PoolingMode,
    ScheduleConfig,
    TapLayer,
)
from .errors import ReidError
from .config import RunConfig
from .network import ReidNetwork
from .trainer import Trainer
from .evaluation import CmcSetting, evaluate

__all__ = [
    "__version__",
    "AttentionConfig",
    "BackboneConfig",
    "BatchMode",
    "Dataset",
    "DatasetConfig",
    "ImageSample",
    "LossConfig",
    "LossMode",
    "OptimConfig",
    "PoolingMode",
    "ScheduleConfig",
    "TapLayer",
    "ReidError",
    "RunConfig",
    "ReidNetwork",
    "Trainer",
    "CmcSetting",
    "evaluate",
]
