# src/attention_reid/backbone.py

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from .autograd import Tape, Tensor, linear, relu, reshape
from .errors import ConfigurationError, DimensionError, NumericalError, UsageError
from .models import BackboneConfig, ImageSample, TapLayer

logger = logging.getLogger(__name__)

BACKBONE_PREFIX = "backbone."
CLASSIFIER_PREFIX = "classifier."
CLASSIFIER_LAYERS = 3


@dataclass
class FeatureCube:
    """K×K×D spatial feature map tapped from the backbone."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] != self.values.shape[1]:
            raise DimensionError(f"feature cube must be K×K×D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("feature cube contains non-finite values")

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[2]


# ---------------------------------------------------------------------- #
# Differentiable conv / pool
# ---------------------------------------------------------------------- #


def _as_batch(x: Tensor, op: str) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], False
    if x.ndim == 4:
        return x.data, True
    raise DimensionError(f"{op} expects h×w×c or n×h×w×c input, got shape {x.shape}")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    Cross-correlation plus bias.

    x is h×w×cin (or batched n×h×w×cin), weight kh×kw×cin×cout, bias cout.
    Output side is floor((h + 2·padding − kh) / stride) + 1.
    """
    data, batched = _as_batch(x, "conv2d")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be kh×kw×cin×cout, got {weight.shape}")
    kh, kw, cin, cout = weight.shape
    n, h, w, c = data.shape
    if c != cin:
        raise DimensionError(f"conv2d input has {c} channels, weight {weight.shape} expects {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(
            f"conv2d kernel {kh}×{kw} does not fit input {h}×{w} with padding {padding}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    padded = np.pad(data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((n, oh, ow, kh, kw, cin))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = padded[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
    cols = cols.reshape(n * oh * ow, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat + bias.data).reshape(n, oh, ow, cout)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        g2 = g.reshape(n * oh * ow, cout)
        d_weight = (cols.T @ g2).reshape(weight.shape)
        d_bias = g2.sum(axis=0)
        d_cols = (g2 @ wmat.T).reshape(n, oh, ow, kh, kw, cin)
        d_padded = np.zeros(padded.shape)
        for i in range(kh):
            for j in range(kw):
                d_padded[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += d_cols[:, :, :, i, j, :]
        d_x = d_padded[:, padding : padding + h, padding : padding + w, :]
        return (d_x if batched else d_x[0]), d_weight, d_bias

    return x.tape.record(out if batched else out[0], (x, weight, bias), vjp, "conv2d")


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """
    Per-window max. The gradient goes to the first maximal cell in
    row-major order inside each window.
    """
    data, batched = _as_batch(x, "maxpool2d")
    stride = stride or window
    n, h, w, c = data.shape
    if window < 1 or window > h or window > w:
        raise DimensionError(f"pool window {window} does not fit input {h}×{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    offsets = [(i, j) for i in range(window) for j in range(window)]

    stack = np.empty((n, oh, ow, c, len(offsets)))
    for k, (i, j) in enumerate(offsets):
        stack[..., k] = data[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
    winner = stack.argmax(axis=-1)
    out = np.take_along_axis(stack, winner[..., None], axis=-1)[..., 0]

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        g = g if batched else g[None]
        d_x = np.zeros(data.shape)
        for k, (i, j) in enumerate(offsets):
            d_x[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += np.where(winner == k, g, 0.0)
        return (d_x if batched else d_x[0],)

    return x.tape.record(out if batched else out[0], (x,), vjp, "maxpool2d")


# ---------------------------------------------------------------------- #
# Parameters
# ---------------------------------------------------------------------- #


def glorot_uniform(
    shape: Tuple[int, ...],
    fan_in: int,
    fan_out: int,
    rng: np.random.Generator,
) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_backbone_params(config: BackboneConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    params: Dict[str, np.ndarray] = {}
    cin = config.in_channels
    for i, stage in enumerate(config.stages):
        k = stage.conv.kernel
        cout = stage.conv.out_channels
        params[f"{BACKBONE_PREFIX}conv{i}.weight"] = glorot_uniform(
            (k, k, cin, cout), k * k * cin, k * k * cout, rng
        )
        params[f"{BACKBONE_PREFIX}conv{i}.bias"] = np.zeros(cout)
        cin = cout
    return params


def init_classifier_head(
    config: BackboneConfig,
    num_classes: int,
    rng: np.random.Generator,
    hidden: int = 64,
) -> Dict[str, np.ndarray]:
    """Three fully-connected layers, flattened cube → hidden → hidden → G."""
    if num_classes < 1:
        raise ConfigurationError(f"classifier needs >= 1 class, got {num_classes}")
    sizes = [config.feature_size * config.feature_size * config.feature_depth, hidden, hidden, num_classes]
    params: Dict[str, np.ndarray] = {}
    for i in range(CLASSIFIER_LAYERS):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        params[f"{CLASSIFIER_PREFIX}fc{i}.weight"] = glorot_uniform((fan_out, fan_in), fan_in, fan_out, rng)
        params[f"{CLASSIFIER_PREFIX}fc{i}.bias"] = np.zeros(fan_out)
    return params


def has_classifier_head(params: Mapping[str, object]) -> bool:
    return all(f"{CLASSIFIER_PREFIX}fc{i}.weight" in params for i in range(CLASSIFIER_LAYERS))


def strip_classifier_head(params: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """
    Drop the pretraining head. The remaining arrays are the same objects,
    so backbone weights are handed over bitwise unchanged.
    """
    return {k: v for k, v in params.items() if not k.startswith(CLASSIFIER_PREFIX)}


def _check_backbone_params(config: BackboneConfig, params: Mapping[str, object]) -> None:
    for i in range(len(config.stages)):
        for suffix in ("weight", "bias"):
            name = f"{BACKBONE_PREFIX}conv{i}.{suffix}"
            if name not in params:
                raise ConfigurationError(f"backbone parameter {name!r} missing")


# ---------------------------------------------------------------------- #
# Forward passes
# ---------------------------------------------------------------------- #


def backbone_forward(images: Tensor, config: BackboneConfig, params: Mapping[str, Tensor]) -> Tensor:
    """n×H×W×C images → n×K×K×D feature cubes."""
    x = images
    last = len(config.stages) - 1
    for i, stage in enumerate(config.stages):
        x = conv2d(
            x,
            params[f"{BACKBONE_PREFIX}conv{i}.weight"],
            params[f"{BACKBONE_PREFIX}conv{i}.bias"],
            stride=stage.conv.stride,
            padding=stage.conv.padding,
        )
        x = relu(x)
        if stage.pool is None or (i == last and config.tap_layer is TapLayer.POST_CONV):
            continue
        x = maxpool2d(x, stage.pool.window, stage.pool.effective_stride)
    return x


def classifier_forward(cubes: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """n×K×K×D cubes → n×G logits."""
    x = reshape(cubes, (cubes.shape[0], -1))
    for i in range(CLASSIFIER_LAYERS):
        x = linear(x, params[f"{CLASSIFIER_PREFIX}fc{i}.weight"], params[f"{CLASSIFIER_PREFIX}fc{i}.bias"])
        if i < CLASSIFIER_LAYERS - 1:
            x = relu(x)
    return x


def _pixels(image: Union[ImageSample, np.ndarray], config: BackboneConfig) -> np.ndarray:
    pixels = image.pixels if isinstance(image, ImageSample) else np.asarray(image, dtype=np.float64)
    expected = (*config.image_size, config.in_channels)
    if pixels.shape != expected:
        raise ConfigurationError(f"image has shape {pixels.shape}, backbone expects {expected}")
    return pixels


def extract_feature_cube(
    image: Union[ImageSample, np.ndarray],
    config: BackboneConfig,
    params: Mapping[str, np.ndarray],
) -> FeatureCube:
    """Deterministic forward pass of one image to its K×K×D cube."""
    pixels = _pixels(image, config)
    _check_backbone_params(config, params)
    tape = Tape()
    bound = tape.bind({k: v for k, v in params.items() if k.startswith(BACKBONE_PREFIX)}, trainable=False)
    cube = backbone_forward(tape.constant(pixels[None]), config, bound)
    return FeatureCube(cube.data[0].copy())


def classify(
    image: Union[ImageSample, np.ndarray],
    params: Mapping[str, np.ndarray],
    config: BackboneConfig,
) -> np.ndarray:
    """Logits over the G pretraining identities for one image."""
    if not has_classifier_head(params):
        raise UsageError("classification head missing: classify() needs pretraining parameters")
    pixels = _pixels(image, config)
    _check_backbone_params(config, params)
    tape = Tape()
    bound = tape.bind(params, trainable=False)
    cube = backbone_forward(tape.constant(pixels[None]), config, bound)
    return classifier_forward(cube, bound).data[0].copy()
