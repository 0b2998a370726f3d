# src/attention_reid/attention.py

"""
Comparative attention: an LSTM that glimpses the same feature cube
several times through a soft location map.

All ops are batched over a leading axis N. A single cube is simply N=1.

    (c0, h0) = init_states(X)
    l0       = predict_attention(h0)
    for t in 1..T:
        A_t        = apply_attention(X, l_{t-1})
        (h_t, c_t) = lstm_step(A_t, (h_{t-1}, c_{t-1}))
        l_t        = predict_attention(h_t)      # only l_0..l_{T-1} kept
    H = normalise(concat(h_s for s in steps))
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .autograd import (
    Tape,
    Tensor,
    add,
    concat,
    l2_normalize,
    linear,
    max_reduce,
    mean,
    mul,
    reduce_sum,
    reshape,
    sigmoid,
    softmax,
    tanh,
)
from .backbone import FeatureCube, glorot_uniform
from .errors import ConfigurationError, DimensionError, UsageError
from .models import AttentionConfig, PoolingMode

logger = logging.getLogger(__name__)

ATTENTION_PREFIX = "attn."
GATES = ("i", "f", "o", "g")
FORGET_BIAS = 1.0


@dataclass
class LstmState:
    h: Tensor  # N×q
    c: Tensor  # N×q


@dataclass
class AttentionMap:
    """Softmax location map over the K² cells, one row per batch item."""

    weights: Tensor  # N×K²
    step_index: int

    def grid(self) -> np.ndarray:
        n, cells = self.weights.shape
        k = int(round(np.sqrt(cells)))
        return self.weights.data.reshape(n, k, k)


@dataclass
class GlimpseTrace:
    hidden_states: List[Tensor] = field(default_factory=list)       # h_1..h_T
    attention_maps: List[AttentionMap] = field(default_factory=list)  # l_0..l_{T-1}

    @property
    def steps(self) -> int:
        return len(self.hidden_states)


@dataclass
class AttentionParams:
    """
    Attention parameters bound to one tape, shared by every time step
    and every branch of a triplet.

    Gate weights are q×(q+D) and act on [h, A] (h first).
    """

    gate_weights: Dict[str, Tensor]
    gate_biases: Dict[str, Tensor]
    location: Tensor                       # K²×q
    init_c: Tuple[Tensor, Tensor, Tensor, Tensor]  # fc0 w/b, fc1 w/b
    init_h: Tuple[Tensor, Tensor, Tensor, Tensor]

    @property
    def hidden_size(self) -> int:
        return self.location.shape[1]

    @property
    def cells(self) -> int:
        return self.location.shape[0]

    @property
    def feature_depth(self) -> int:
        return self.gate_weights["i"].shape[1] - self.hidden_size

    @classmethod
    def from_bound(cls, bound: Mapping[str, Tensor]) -> "AttentionParams":
        try:
            return cls(
                gate_weights={g: bound[f"{ATTENTION_PREFIX}gate_{g}.weight"] for g in GATES},
                gate_biases={g: bound[f"{ATTENTION_PREFIX}gate_{g}.bias"] for g in GATES},
                location=bound[f"{ATTENTION_PREFIX}location.weight"],
                init_c=_mlp_tensors(bound, "init_c"),
                init_h=_mlp_tensors(bound, "init_h"),
            )
        except KeyError as e:
            raise ConfigurationError(f"attention parameter {e.args[0]!r} missing") from e

    @classmethod
    def bind(
        cls,
        tape: Tape,
        params: Mapping[str, np.ndarray],
        trainable: bool = True,
    ) -> "AttentionParams":
        own = {k: v for k, v in params.items() if k.startswith(ATTENTION_PREFIX)}
        return cls.from_bound(tape.bind(own, trainable=trainable))


def _mlp_tensors(bound: Mapping[str, Tensor], name: str) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    p = f"{ATTENTION_PREFIX}{name}"
    return (bound[f"{p}.fc0.weight"], bound[f"{p}.fc0.bias"], bound[f"{p}.fc1.weight"], bound[f"{p}.fc1.bias"])


def init_attention_params(
    config: AttentionConfig,
    feature_size: int,
    feature_depth: int,
    rng: np.random.Generator,
) -> Dict[str, np.ndarray]:
    """
    Glorot-uniform weights, zero biases except the forget gate (1.0).
    """
    q, d, cells = config.hidden_size, feature_depth, feature_size * feature_size
    params: Dict[str, np.ndarray] = {}
    for g in GATES:
        params[f"{ATTENTION_PREFIX}gate_{g}.weight"] = glorot_uniform((q, q + d), q + d, q, rng)
        params[f"{ATTENTION_PREFIX}gate_{g}.bias"] = np.full(q, FORGET_BIAS if g == "f" else 0.0)
    params[f"{ATTENTION_PREFIX}location.weight"] = glorot_uniform((cells, q), q, cells, rng)
    for name in ("init_c", "init_h"):
        params[f"{ATTENTION_PREFIX}{name}.fc0.weight"] = glorot_uniform((q, d), d, q, rng)
        params[f"{ATTENTION_PREFIX}{name}.fc0.bias"] = np.zeros(q)
        params[f"{ATTENTION_PREFIX}{name}.fc1.weight"] = glorot_uniform((q, q), q, q, rng)
        params[f"{ATTENTION_PREFIX}{name}.fc1.bias"] = np.zeros(q)
    return params


# ---------------------------------------------------------------------- #
# Ops
# ---------------------------------------------------------------------- #


def as_cube_batch(tape: Tape, cubes: Union[FeatureCube, Sequence[FeatureCube], np.ndarray]) -> Tensor:
    """Constant N×K×K×D tensor from one cube, a list of cubes or an array."""
    if isinstance(cubes, FeatureCube):
        data = cubes.values[None]
    elif isinstance(cubes, np.ndarray):
        data = cubes[None] if cubes.ndim == 3 else cubes
    else:
        data = np.stack([c.values for c in cubes])
    return tape.constant(data)


def _flat_cells(x: Tensor, params: AttentionParams) -> Tensor:
    """N×K×K×D → N×K²×D, checking K and D against the parameters."""
    if x.ndim != 4 or x.shape[1] != x.shape[2]:
        raise DimensionError(f"feature cubes must be N×K×K×D, got {x.shape}")
    n, k, _, d = x.shape
    if k * k != params.cells or d != params.feature_depth:
        raise DimensionError(
            f"feature cube K={k}, D={d} does not match attention parameters "
            f"(K²={params.cells}, D={params.feature_depth})"
        )
    return reshape(x, (n, k * k, d))


def _mlp(x: Tensor, layers: Tuple[Tensor, Tensor, Tensor, Tensor]) -> Tensor:
    w0, b0, w1, b1 = layers
    return linear(tanh(linear(x, w0, b0)), w1, b1)


def init_states(x: Tensor, params: AttentionParams) -> LstmState:
    """c0 and h0 from two-layer perceptrons on the spatial mean of X."""
    pooled = mean(_flat_cells(x, params), axis=1)
    return LstmState(h=_mlp(pooled, params.init_h), c=_mlp(pooled, params.init_c))


def predict_attention(h: Tensor, params: AttentionParams, step_index: int = 0) -> AttentionMap:
    if h.ndim != 2 or h.shape[1] != params.hidden_size:
        raise DimensionError(f"hidden state must be N×{params.hidden_size}, got {h.shape}")
    return AttentionMap(softmax(linear(h, params.location), axis=1), step_index)


def apply_attention(x: Tensor, attention: AttentionMap, params: AttentionParams) -> Tensor:
    """A = Σ_i l_i X_i, the expectation of the cube's cells under l."""
    cells = _flat_cells(x, params)
    n, k2, _ = cells.shape
    if attention.weights.shape != (n, k2):
        raise DimensionError(
            f"attention map shape {attention.weights.shape} does not match cube cells ({n}, {k2})"
        )
    return reduce_sum(mul(cells, reshape(attention.weights, (n, k2, 1))), axis=1)


def lstm_step(a: Tensor, state: LstmState, params: AttentionParams) -> LstmState:
    z = concat([state.h, a], axis=1)
    if z.shape[1] != params.hidden_size + params.feature_depth:
        raise DimensionError(
            f"[h, A] has width {z.shape[1]}, gates expect {params.hidden_size + params.feature_depth}"
        )
    w, b = params.gate_weights, params.gate_biases
    i = sigmoid(linear(z, w["i"], b["i"]))
    f = sigmoid(linear(z, w["f"], b["f"]))
    o = sigmoid(linear(z, w["o"], b["o"]))
    g = tanh(linear(z, w["g"], b["g"]))
    c = add(mul(f, state.c), mul(i, g))
    return LstmState(h=mul(o, tanh(c)), c=c)


def pooled_glimpse(x: Tensor, params: AttentionParams, pooling: PoolingMode) -> Tensor:
    """Attention-free glimpse input for the pooled-LSTM ablations."""
    cells = _flat_cells(x, params)
    if pooling is PoolingMode.AVG_POOL:
        return mean(cells, axis=1)
    if pooling is PoolingMode.MAX_POOL:
        return max_reduce(cells, axis=1)
    raise ConfigurationError(f"pooling mode {pooling.value!r} has no fixed glimpse input")


def run_glimpses(
    x: Tensor,
    glimpses: int,
    params: AttentionParams,
    pooling: PoolingMode = PoolingMode.ATTENTION,
) -> GlimpseTrace:
    """
    T steps over the same cube. The trace holds h_1..h_T and, for
    attention pooling, l_0..l_{T-1}; pooled ablations record no maps.
    """
    if glimpses < 1:
        raise UsageError(f"need at least one glimpse, got T={glimpses}")
    pooling = PoolingMode(pooling)
    if pooling is PoolingMode.FC_HEAD:
        raise ConfigurationError("fc_head has no recurrence; use the network's fc head instead")

    state = init_states(x, params)
    trace = GlimpseTrace()
    fixed_input = None if pooling is PoolingMode.ATTENTION else pooled_glimpse(x, params, pooling)
    location = predict_attention(state.h, params, 0) if fixed_input is None else None

    for t in range(1, glimpses + 1):
        if fixed_input is None:
            trace.attention_maps.append(location)
            a = apply_attention(x, location, params)
        else:
            a = fixed_input
        state = lstm_step(a, state, params)
        trace.hidden_states.append(state.h)
        if fixed_input is None and t < glimpses:
            location = predict_attention(state.h, params, t)
    return trace


def check_steps(steps: Sequence[int], glimpses: int) -> Tuple[int, ...]:
    steps = tuple(int(s) for s in steps)
    if not steps:
        raise UsageError("at least one concatenation step is required")
    bad = [s for s in steps if s < 1 or s > glimpses]
    if bad:
        raise UsageError(f"steps {bad} outside [1, {glimpses}]")
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise UsageError(f"steps {list(steps)} must be strictly increasing")
    return steps


def build_embedding(trace: GlimpseTrace, steps: Sequence[int]) -> Tensor:
    """H = R / ||R||, R the concatenation of h at the listed 1-based steps."""
    steps = check_steps(steps, trace.steps)
    r = concat([trace.hidden_states[s - 1] for s in steps], axis=1)
    return l2_normalize(r, axis=1)
