# src/attention_reid/network.py

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .attention import (
    ATTENTION_PREFIX,
    AttentionParams,
    GlimpseTrace,
    build_embedding,
    init_attention_params,
    run_glimpses,
)
from .autograd import Tape, Tensor, l2_normalize, linear, matmul, relu, reshape
from .backbone import (
    BACKBONE_PREFIX,
    CLASSIFIER_PREFIX,
    backbone_forward,
    glorot_uniform,
    init_backbone_params,
)
from .errors import ConfigurationError
from .models import (
    AttentionConfig,
    BackboneConfig,
    ConvSpec,
    PoolingMode,
    PoolSpec,
    StageSpec,
    TapLayer,
)

logger = logging.getLogger(__name__)

FC_HEAD_PREFIX = "fc_head."
IDENTITY_HEAD = "identity_head.weight"


@dataclass
class NetworkOutput:
    embeddings: Tensor                   # N×mq, unit rows
    trace: Optional[GlimpseTrace] = None


@dataclass
class ReidNetwork:
    """
    Backbone → attention glimpses → normalised embedding, plus the
    identity softmax head S (mq×G) used by the identification loss.

    pooling=fc_head swaps the recurrence for two fully-connected layers
    on the flattened cube; avg_pool / max_pool keep the LSTM but feed it
    a fixed pooled glimpse.
    """

    backbone: BackboneConfig
    attention: AttentionConfig
    num_classes: int

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {self.num_classes}")

    @property
    def embedding_dim(self) -> int:
        return self.attention.embedding_dim

    @property
    def pooling(self) -> PoolingMode:
        return self.attention.pooling

    # ------------------------------------------------------------------ #
    # Parameters
    # ------------------------------------------------------------------ #

    def init_params(
        self,
        rng: np.random.Generator,
        backbone_params: Optional[Mapping[str, np.ndarray]] = None,
    ) -> Dict[str, np.ndarray]:
        """
        Fresh head parameters. Backbone arrays are taken as given when
        supplied (pretrained handoff), otherwise drawn from rng.
        """
        if backbone_params is None:
            params = init_backbone_params(self.backbone, rng)
        else:
            params = {k: v for k, v in backbone_params.items() if k.startswith(BACKBONE_PREFIX)}
        k, d = self.backbone.feature_size, self.backbone.feature_depth
        if self.pooling is PoolingMode.FC_HEAD:
            q, flat = self.attention.hidden_size, k * k * d
            params[f"{FC_HEAD_PREFIX}fc0.weight"] = glorot_uniform((q, flat), flat, q, rng)
            params[f"{FC_HEAD_PREFIX}fc0.bias"] = np.zeros(q)
            params[f"{FC_HEAD_PREFIX}fc1.weight"] = glorot_uniform(
                (self.embedding_dim, q), q, self.embedding_dim, rng
            )
            params[f"{FC_HEAD_PREFIX}fc1.bias"] = np.zeros(self.embedding_dim)
        else:
            params.update(init_attention_params(self.attention, k, d, rng))
        params[IDENTITY_HEAD] = glorot_uniform(
            (self.embedding_dim, self.num_classes), self.embedding_dim, self.num_classes, rng
        )
        self.check_params(params)
        return params

    def expected_shapes(self) -> Dict[str, tuple]:
        rng = np.random.default_rng(0)
        shapes = init_backbone_params(self.backbone, rng)
        k, d = self.backbone.feature_size, self.backbone.feature_depth
        if self.pooling is PoolingMode.FC_HEAD:
            q, flat, e = self.attention.hidden_size, k * k * d, self.embedding_dim
            shapes.update({
                f"{FC_HEAD_PREFIX}fc0.weight": np.empty((q, flat)),
                f"{FC_HEAD_PREFIX}fc0.bias": np.empty(q),
                f"{FC_HEAD_PREFIX}fc1.weight": np.empty((e, q)),
                f"{FC_HEAD_PREFIX}fc1.bias": np.empty(e),
            })
        else:
            shapes.update(init_attention_params(self.attention, k, d, rng))
        shapes[IDENTITY_HEAD] = np.empty((self.embedding_dim, self.num_classes))
        return {name: value.shape for name, value in shapes.items()}

    def check_params(self, params: Mapping[str, np.ndarray]) -> None:
        """Names and shapes must match this network exactly (classifier head excepted)."""
        expected = self.expected_shapes()
        own = {k: v for k, v in params.items() if not k.startswith(CLASSIFIER_PREFIX)}
        missing = sorted(set(expected) - set(own))
        extra = sorted(set(own) - set(expected))
        if missing or extra:
            raise ConfigurationError(
                f"parameters do not fit this network: missing {missing}, unexpected {extra}"
            )
        for name, shape in expected.items():
            if own[name].shape != shape:
                raise ConfigurationError(
                    f"parameter {name!r} has shape {own[name].shape}, network expects {shape}"
                )

    def trainable(self, freeze_backbone: bool = False) -> Callable[[str], bool]:
        if freeze_backbone:
            return lambda name: not name.startswith(BACKBONE_PREFIX)
        return lambda name: True

    # ------------------------------------------------------------------ #
    # Forward
    # ------------------------------------------------------------------ #

    def forward(self, images: Tensor, bound: Mapping[str, Tensor]) -> NetworkOutput:
        cubes = backbone_forward(images, self.backbone, bound)
        if self.pooling is PoolingMode.FC_HEAD:
            x = reshape(cubes, (cubes.shape[0], -1))
            x = relu(linear(x, bound[f"{FC_HEAD_PREFIX}fc0.weight"], bound[f"{FC_HEAD_PREFIX}fc0.bias"]))
            x = linear(x, bound[f"{FC_HEAD_PREFIX}fc1.weight"], bound[f"{FC_HEAD_PREFIX}fc1.bias"])
            return NetworkOutput(l2_normalize(x, axis=1))
        attn = AttentionParams.from_bound({k: v for k, v in bound.items() if k.startswith(ATTENTION_PREFIX)})
        trace = run_glimpses(cubes, self.attention.glimpses, attn, self.pooling)
        return NetworkOutput(build_embedding(trace, self.attention.steps), trace)

    def identity_logits(self, embeddings: Tensor, bound: Mapping[str, Tensor]) -> Tensor:
        return matmul(embeddings, bound[IDENTITY_HEAD])

    def embed(
        self,
        params: Mapping[str, np.ndarray],
        images: Sequence[np.ndarray],
        batch_size: int = 64,
    ) -> np.ndarray:
        """Inference embeddings, one row per image; each image is independent."""
        rows: List[np.ndarray] = []
        for start in range(0, len(images), batch_size):
            chunk = np.stack([np.asarray(im, dtype=np.float64) for im in images[start : start + batch_size]])
            tape = Tape()
            bound = tape.bind(params, trainable=False)
            rows.append(self.forward(tape.constant(chunk), bound).embeddings.data.copy())
        if not rows:
            return np.zeros((0, self.embedding_dim))
        return np.concatenate(rows, axis=0)

    def attention_maps(self, params: Mapping[str, np.ndarray], image: np.ndarray) -> np.ndarray:
        """
        T×K×K location maps l_0..l_{T-1} for one image. The embedding is
        not built, so a dead model (all h_t = 0) still yields its maps.
        """
        if self.pooling is not PoolingMode.ATTENTION:
            raise ConfigurationError(f"pooling mode {self.pooling.value!r} predicts no attention maps")
        tape = Tape()
        bound = tape.bind(params, trainable=False)
        cubes = backbone_forward(tape.constant(np.asarray(image, dtype=np.float64)[None]), self.backbone, bound)
        attn = AttentionParams.from_bound({k: v for k, v in bound.items() if k.startswith(ATTENTION_PREFIX)})
        trace = run_glimpses(cubes, self.attention.glimpses, attn, self.pooling)
        return np.stack([m.grid()[0] for m in trace.attention_maps])

    # ------------------------------------------------------------------ #
    # Description (checkpoint echo)
    # ------------------------------------------------------------------ #

    def describe(self) -> Dict[str, Any]:
        b, a = self.backbone, self.attention
        return {
            "backbone": {
                "image_size": list(b.image_size),
                "in_channels": b.in_channels,
                "stages": [
                    {
                        "conv": [s.conv.out_channels, s.conv.kernel, s.conv.stride, s.conv.padding],
                        "pool": None if s.pool is None else [s.pool.window, s.pool.effective_stride],
                    }
                    for s in b.stages
                ],
                "feature_size": b.feature_size,
                "feature_depth": b.feature_depth,
                "tap_layer": b.tap_layer.value,
            },
            "attention": {
                "hidden_size": a.hidden_size,
                "glimpses": a.glimpses,
                "steps": list(a.steps),
                "pooling": a.pooling.value,
            },
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_description(cls, d: Mapping[str, Any]) -> "ReidNetwork":
        try:
            b = d["backbone"]
            stages = tuple(
                StageSpec(
                    ConvSpec(*s["conv"]),
                    None if s["pool"] is None else PoolSpec(*s["pool"]),
                )
                for s in b["stages"]
            )
            backbone = BackboneConfig(
                image_size=tuple(b["image_size"]),
                in_channels=b["in_channels"],
                stages=stages,
                feature_size=b["feature_size"],
                feature_depth=b["feature_depth"],
                tap_layer=TapLayer(b["tap_layer"]),
            )
            attention = AttentionConfig(**d["attention"])
            return cls(backbone=backbone, attention=attention, num_classes=int(d["num_classes"]))
        except (KeyError, TypeError) as e:
            raise ConfigurationError(f"malformed network description: {e}") from e
