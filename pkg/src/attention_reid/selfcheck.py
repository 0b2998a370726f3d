# src/attention_reid/selfcheck.py

"""
Finite-difference self-check of every differentiable op and of the
micro-config pipeline (backbone → attention → embedding → multi-task loss).

Each registered check draws its operands from a seeded generator, reduces
the op output to a scalar through a fixed random projection, and compares
the tape gradient of every operand with central differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from . import autograd as ag
from .attention import (
    AttentionMap,
    AttentionParams,
    GlimpseTrace,
    LstmState,
    apply_attention,
    build_embedding,
    init_attention_params,
    init_states,
    lstm_step,
    predict_attention,
)
from .autograd import GradientCheck, Tape, Tensor, finite_difference_check
from .backbone import conv2d, maxpool2d
from .errors import UsageError
from .losses import SoftmaxHead, TripletBatch, compute_objective, identity_loss, mine_triplets, triplet_loss
from .models import AttentionConfig, BackboneConfig, LossConfig
from .network import IDENTITY_HEAD, ReidNetwork

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-5

Check = Callable[[np.random.Generator, float], GradientCheck]
OpFn = Callable[[Dict[str, Tensor]], Tensor]

CHECKS: Dict[str, Check] = {}

# micro attention: q=3, T=3 over a 2×2×4 cube
_MICRO_ATTENTION = AttentionConfig(hidden_size=3, glimpses=3, steps=(2, 3))
_MICRO_K = 2
_MICRO_D = 4


def register(name: str) -> Callable[[Check], Check]:
    def wrap(fn: Check) -> Check:
        if name in CHECKS:
            raise UsageError(f"gradient check {name!r} registered twice")
        CHECKS[name] = fn
        return fn

    return wrap


def combine(checks: List[GradientCheck]) -> GradientCheck:
    return GradientCheck(
        max_relative_error=max((c.max_relative_error for c in checks), default=0.0),
        nonfinite_count=sum(c.nonfinite_count for c in checks),
        coordinates=sum(c.coordinates for c in checks),
    )


def check_operands(
    fn: OpFn,
    operands: Mapping[str, np.ndarray],
    rng: np.random.Generator,
    step: float = DEFAULT_STEP,
    wrt: Optional[List[str]] = None,
) -> GradientCheck:
    """
    Gradient of sum(w ⊙ fn(operands)) against central differences, one
    operand at a time with the others held constant. w is drawn once so
    every operand is scored against the same scalar.
    """
    scratch = Tape(check_finite=False)
    shape = fn({k: scratch.constant(v) for k, v in operands.items()}).shape
    weights = rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)

    results = []
    for name in wrt or list(operands):

        def f(x: Tensor, name: str = name) -> Tensor:
            bound = {k: (x if k == name else x.tape.constant(v)) for k, v in operands.items()}
            return ag.reduce_sum(ag.mul(fn(bound), weights))

        results.append(finite_difference_check(f, operands[name], step))
    return combine(results)


def _u(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.uniform(-2.0, 2.0, size=shape)


def _attention_operands(rng: np.random.Generator) -> Dict[str, np.ndarray]:
    return init_attention_params(_MICRO_ATTENTION, _MICRO_K, _MICRO_D, rng)


def _attention(bound: Mapping[str, Tensor]) -> AttentionParams:
    return AttentionParams.from_bound(bound)


# ---------------------------------------------------------------------- #
# Tensor ops
# ---------------------------------------------------------------------- #


@register("add")
def _check_add(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.add(b["a"], b["b"]), {"a": _u(rng, 3, 4), "b": _u(rng, 4)}, rng, step)


@register("sub")
def _check_sub(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.sub(b["a"], b["b"]), {"a": _u(rng, 3, 4), "b": _u(rng, 3, 1)}, rng, step)


@register("mul")
def _check_mul(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.mul(b["a"], b["b"]), {"a": _u(rng, 2, 3, 4), "b": _u(rng, 2, 1, 4)}, rng, step)


@register("scale")
def _check_scale(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.scale(b["x"], -1.7), {"x": _u(rng, 5)}, rng, step)


@register("sigmoid")
def _check_sigmoid(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.sigmoid(b["x"]), {"x": _u(rng, 6)}, rng, step)


@register("tanh")
def _check_tanh(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.tanh(b["x"]), {"x": _u(rng, 6)}, rng, step)


@register("relu")
def _check_relu(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.relu(b["x"]), {"x": _u(rng, 6)}, rng, step)


@register("matmul")
def _check_matmul(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.matmul(b["a"], b["b"]), {"a": _u(rng, 3, 4), "b": _u(rng, 4, 2)}, rng, step)


@register("transpose")
def _check_transpose(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.transpose(b["x"]), {"x": _u(rng, 3, 2)}, rng, step)


@register("linear")
def _check_linear(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(
        lambda b: ag.linear(b["x"], b["w"], b["b"]),
        {"x": _u(rng, 3, 4), "w": _u(rng, 2, 4), "b": _u(rng, 2)},
        rng,
        step,
    )


@register("reshape")
def _check_reshape(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.reshape(b["x"], (3, 4)), {"x": _u(rng, 2, 6)}, rng, step)


@register("concat")
def _check_concat(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(
        lambda b: ag.concat([b["a"], b["b"]], axis=1),
        {"a": _u(rng, 2, 3), "b": _u(rng, 2, 2)},
        rng,
        step,
    )


@register("take")
def _check_take(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.take(b["x"], [2, 0, 2, 1], axis=0), {"x": _u(rng, 4, 3)}, rng, step)


@register("reduce_sum")
def _check_reduce_sum(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.reduce_sum(b["x"], axis=1), {"x": _u(rng, 3, 4)}, rng, step)


@register("mean")
def _check_mean(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.mean(b["x"], axis=(0, 2)), {"x": _u(rng, 2, 3, 4)}, rng, step)


@register("max_reduce")
def _check_max_reduce(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.max_reduce(b["x"], axis=1), {"x": _u(rng, 3, 5)}, rng, step)


@register("softmax")
def _check_softmax(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.softmax(b["x"], axis=1), {"x": _u(rng, 2, 5)}, rng, step)


@register("l2_normalize")
def _check_l2_normalize(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: ag.l2_normalize(b["x"], axis=1), {"x": _u(rng, 2, 6)}, rng, step)


@register("softmax_cross_entropy")
def _check_softmax_cross_entropy(rng: np.random.Generator, step: float) -> GradientCheck:
    labels = rng.integers(0, 4, size=3)
    return check_operands(lambda b: ag.softmax_cross_entropy(b["x"], labels), {"x": _u(rng, 3, 4)}, rng, step)


# ---------------------------------------------------------------------- #
# Backbone ops
# ---------------------------------------------------------------------- #


@register("conv2d")
def _check_conv2d(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(
        lambda b: conv2d(b["x"], b["w"], b["b"], stride=1, padding=1),
        {"x": _u(rng, 2, 5, 5, 2), "w": _u(rng, 3, 3, 2, 3), "b": _u(rng, 3)},
        rng,
        step,
    )


@register("maxpool2d")
def _check_maxpool2d(rng: np.random.Generator, step: float) -> GradientCheck:
    return check_operands(lambda b: maxpool2d(b["x"], 2), {"x": _u(rng, 2, 4, 4, 3)}, rng, step)


# ---------------------------------------------------------------------- #
# Attention ops
# ---------------------------------------------------------------------- #


@register("init_states")
def _check_init_states(rng: np.random.Generator, step: float) -> GradientCheck:
    operands = _attention_operands(rng)
    operands["x"] = _u(rng, 2, _MICRO_K, _MICRO_K, _MICRO_D)

    def fn(b: Dict[str, Tensor]) -> Tensor:
        state = init_states(b["x"], _attention(b))
        return ag.concat([state.h, state.c], axis=1)

    return check_operands(fn, operands, rng, step, wrt=[k for k in operands if "init_" in k or k == "x"])


@register("predict_attention")
def _check_predict_attention(rng: np.random.Generator, step: float) -> GradientCheck:
    operands = _attention_operands(rng)
    operands["h"] = _u(rng, 2, _MICRO_ATTENTION.hidden_size)
    return check_operands(
        lambda b: predict_attention(b["h"], _attention(b)).weights,
        operands,
        rng,
        step,
        wrt=["h", "attn.location.weight"],
    )


@register("apply_attention")
def _check_apply_attention(rng: np.random.Generator, step: float) -> GradientCheck:
    operands = _attention_operands(rng)
    operands["x"] = _u(rng, 2, _MICRO_K, _MICRO_K, _MICRO_D)
    operands["logits"] = _u(rng, 2, _MICRO_K * _MICRO_K)

    def fn(b: Dict[str, Tensor]) -> Tensor:
        return apply_attention(b["x"], AttentionMap(ag.softmax(b["logits"], axis=1), 0), _attention(b))

    return check_operands(fn, operands, rng, step, wrt=["x", "logits"])


@register("lstm_step")
def _check_lstm_step(rng: np.random.Generator, step: float) -> GradientCheck:
    q = _MICRO_ATTENTION.hidden_size
    operands = _attention_operands(rng)
    operands.update({"a": _u(rng, 2, _MICRO_D), "h": _u(rng, 2, q), "c": _u(rng, 2, q)})

    def fn(b: Dict[str, Tensor]) -> Tensor:
        state = lstm_step(b["a"], LstmState(h=b["h"], c=b["c"]), _attention(b))
        return ag.concat([state.h, state.c], axis=1)

    return check_operands(fn, operands, rng, step, wrt=[k for k in operands if "gate_" in k or k in ("a", "h", "c")])


@register("build_embedding")
def _check_build_embedding(rng: np.random.Generator, step: float) -> GradientCheck:
    q = _MICRO_ATTENTION.hidden_size
    operands = {f"h{t}": _u(rng, 2, q) for t in (1, 2, 3)}

    def fn(b: Dict[str, Tensor]) -> Tensor:
        return build_embedding(GlimpseTrace([b["h1"], b["h2"], b["h3"]]), _MICRO_ATTENTION.steps)

    return check_operands(fn, operands, rng, step)


# ---------------------------------------------------------------------- #
# Losses
# ---------------------------------------------------------------------- #


@register("triplet_loss")
def _check_triplet_loss(rng: np.random.Generator, step: float) -> GradientCheck:
    labels = np.array([0, 0, 1, 1, 2, 2])
    triples = mine_triplets(labels, rng)
    return check_operands(
        lambda b: triplet_loss(b["e"], triples, margin=1.0),
        {"e": rng.uniform(-1.0, 1.0, size=(labels.size, 4))},
        rng,
        step,
    )


@register("identity_loss")
def _check_identity_loss(rng: np.random.Generator, step: float) -> GradientCheck:
    labels = np.array([0, 1, 2, 1])
    return check_operands(
        lambda b: identity_loss(b["e"], labels, SoftmaxHead(b["s"])),
        {"e": _u(rng, 4, 6), "s": _u(rng, 6, 3)},
        rng,
        step,
    )


# ---------------------------------------------------------------------- #
# Full pipeline
# ---------------------------------------------------------------------- #


def micro_network() -> ReidNetwork:
    return ReidNetwork(BackboneConfig.micro(), _MICRO_ATTENTION, num_classes=2)


@register("pipeline")
def check_pipeline(rng: np.random.Generator, step: float) -> GradientCheck:
    """
    Multi-task loss of a two-identity micro batch, differentiated with
    respect to every network parameter in turn.
    """
    network = micro_network()
    params = network.init_params(rng)
    images = rng.uniform(0.0, 1.0, size=(4, *network.backbone.image_size, network.backbone.in_channels))
    labels = np.array([0, 0, 1, 1])
    triples: TripletBatch = mine_triplets(labels, rng)
    config = LossConfig(margin=0.3)

    def fn(b: Dict[str, Tensor]) -> Tensor:
        tape = next(iter(b.values())).tape
        out = network.forward(tape.constant(images), b)
        objective, _ = compute_objective(out.embeddings, labels, SoftmaxHead(b[IDENTITY_HEAD]), triples, config)
        return objective

    results = []
    for name in sorted(params):
        # a scalar objective needs no projection
        def f(x: Tensor, name: str = name) -> Tensor:
            return fn({k: (x if k == name else x.tape.constant(v)) for k, v in params.items()})

        result = finite_difference_check(f, params[name], step)
        logger.debug("pipeline %s: max rel err %.3e", name, result.max_relative_error)
        results.append(result)
    return combine(results)


# ---------------------------------------------------------------------- #
# Runner
# ---------------------------------------------------------------------- #


@dataclass
class OpResult:
    name: str
    check: GradientCheck
    passed: bool


@dataclass
class SelfCheckReport:
    tolerance: float
    results: List[OpResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failing(self) -> List[str]:
        return [r.name for r in self.results if not r.passed]

    def lines(self) -> List[str]:
        out = []
        for r in self.results:
            status = "ok" if r.passed else "FAIL"
            extra = f" ({r.check.nonfinite_count} non-finite)" if r.check.nonfinite_count else ""
            out.append(f"{r.name:<24} {r.check.max_relative_error:.3e}  {status}{extra}")
        return out


def run_selfcheck(
    checks: Optional[Mapping[str, Check]] = None,
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = DEFAULT_STEP,
    seed: int = 0,
) -> SelfCheckReport:
    """Run every check once, each from its own seeded generator."""
    checks = CHECKS if checks is None else checks
    report = SelfCheckReport(tolerance)
    for i, (name, check) in enumerate(checks.items()):
        result = check(np.random.default_rng([seed, i]), step)
        report.results.append(OpResult(name, result, result.passed(tolerance)))
        logger.debug("%s: max rel err %.3e", name, result.max_relative_error)
    if report.failing:
        logger.error("gradient check failed for: %s", ", ".join(report.failing))
    return report
