# src/attention_reid/losses.py

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .autograd import (
    Tape,
    Tensor,
    add,
    matmul,
    mean,
    mul,
    reduce_sum,
    relu,
    softmax_cross_entropy,
    sub,
    take,
)
from .errors import DimensionError, MiningError, UsageError
from .models import LossConfig, LossMode, LossReport

logger = logging.getLogger(__name__)


@dataclass
class TripletBatch:
    """(anchor, positive, negative) index rows into one mini-batch."""

    triples: np.ndarray  # N×3 ints

    def __post_init__(self) -> None:
        self.triples = np.asarray(self.triples, dtype=np.intp).reshape(-1, 3)

    def __len__(self) -> int:
        return self.triples.shape[0]

    @property
    def anchors(self) -> np.ndarray:
        return self.triples[:, 0]

    @property
    def positives(self) -> np.ndarray:
        return self.triples[:, 1]

    @property
    def negatives(self) -> np.ndarray:
        return self.triples[:, 2]

    def validate(self, labels: Sequence[int]) -> None:
        labels = np.asarray(labels)
        if len(self) and (self.triples.min() < 0 or self.triples.max() >= labels.size):
            raise DimensionError(f"triplet index out of range for a batch of {labels.size}")
        for a, p, n in self.triples:
            if a == p or labels[a] != labels[p] or labels[a] == labels[n]:
                raise UsageError(
                    f"invalid triple ({a}, {p}, {n}) for labels "
                    f"({labels[a]}, {labels[p]}, {labels[n]})"
                )


@dataclass
class SoftmaxHead:
    """Identity classifier S (δ×G) applied to normalised embeddings."""

    weight: Tensor

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def logits(self, embeddings: Tensor) -> Tensor:
        if embeddings.ndim != 2 or embeddings.shape[1] != self.weight.shape[0]:
            raise DimensionError(
                f"embeddings {embeddings.shape} do not fit softmax head {self.weight.shape}"
            )
        return matmul(embeddings, self.weight)


def _as_tensor(embeddings: Union[Tensor, np.ndarray], tape: Optional[Tape] = None) -> Tensor:
    if isinstance(embeddings, Tensor):
        return embeddings
    return (tape or Tape()).constant(np.asarray(embeddings, dtype=np.float64))


def triplet_hinge(embeddings: Tensor, triples: TripletBatch, margin: float) -> Tensor:
    """Per-triple [d(a,p)² − d(a,n)² + α]₊ with squared Euclidean distances."""
    if margin <= 0:
        raise UsageError(f"margin must be > 0, got {margin}")
    a = take(embeddings, triples.anchors, axis=0)
    p = take(embeddings, triples.positives, axis=0)
    n = take(embeddings, triples.negatives, axis=0)
    ap = sub(a, p)
    an = sub(a, n)
    d_pos = reduce_sum(mul(ap, ap), axis=1)
    d_neg = reduce_sum(mul(an, an), axis=1)
    return relu(add(sub(d_pos, d_neg), margin))


def triplet_loss(
    embeddings: Union[Tensor, np.ndarray],
    triples: TripletBatch,
    margin: float = 0.3,
) -> Tensor:
    """Mean hinge over the mined triples; an empty batch is an error, not 0."""
    if len(triples) == 0:
        raise UsageError("triplet loss over zero triples is undefined")
    embeddings = _as_tensor(embeddings)
    if triples.triples.max() >= embeddings.shape[0] or triples.triples.min() < 0:
        raise DimensionError(f"triplet index out of range for {embeddings.shape[0]} embeddings")
    return mean(triplet_hinge(embeddings, triples, margin))


def active_triplets(embeddings: Union[Tensor, np.ndarray], triples: TripletBatch, margin: float) -> int:
    """Triples whose hinge is strictly positive."""
    if len(triples) == 0:
        return 0
    hinge = triplet_hinge(_as_tensor(embeddings), triples, margin)
    return int(np.count_nonzero(hinge.data > 0))


def identity_loss(
    embeddings: Union[Tensor, np.ndarray],
    labels: Sequence[int],
    head: SoftmaxHead,
) -> Tensor:
    """Mean −log softmax(SᵀH)[label], once per unique batch sample."""
    embeddings = _as_tensor(embeddings, head.weight.tape)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and labels.max() >= head.num_classes:
        raise UsageError(f"label {int(labels.max())} >= G={head.num_classes}")
    return softmax_cross_entropy(head.logits(embeddings), labels)


def multi_task_loss(trip: Union[Tensor, float], iden: Union[Tensor, float]) -> Union[Tensor, float]:
    """Equal-weight sum of the triplet and identification costs."""
    if isinstance(trip, Tensor) or isinstance(iden, Tensor):
        return add(trip, iden)
    return float(trip) + float(iden)


def mine_triplets(labels: Sequence[int], rng: np.random.Generator) -> TripletBatch:
    """
    One triple per ordered positive pair (a, p), in batch order, each with
    a negative drawn uniformly from the differently-labelled samples.
    """
    labels = np.asarray(labels)
    rows = []
    for a in range(labels.size):
        negatives = np.flatnonzero(labels != labels[a])
        positives = [p for p in np.flatnonzero(labels == labels[a]) if p != a]
        if not positives:
            continue
        if negatives.size == 0:
            raise MiningError(f"no negative available for identity {labels[a]} in this batch")
        for p in positives:
            rows.append((a, p, negatives[rng.integers(negatives.size)]))
    if not rows:
        raise MiningError(f"no positive pair among {labels.size} batch samples")
    return TripletBatch(np.array(rows, dtype=np.intp))


def compute_objective(
    embeddings: Tensor,
    labels: Sequence[int],
    head: SoftmaxHead,
    triples: TripletBatch,
    config: LossConfig,
) -> Tuple[Tensor, LossReport]:
    """
    Both loss terms plus the objective selected by ``config.mode``.
    The report always carries trip, iden and multi = trip + iden.
    """
    if len(triples) == 0:
        raise UsageError("triplet loss over zero triples is undefined")
    hinge = triplet_hinge(embeddings, triples, config.margin)
    trip = mean(hinge)
    iden = identity_loss(embeddings, labels, head)
    if config.mode is LossMode.MULTI:
        objective = multi_task_loss(trip, iden)
    elif config.mode is LossMode.TRIPLET:
        objective = trip
    else:
        objective = iden
    report = LossReport(
        trip=trip.item(),
        iden=iden.item(),
        active_triplets=int(np.count_nonzero(hinge.data > 0)),
        objective=objective.item(),
    )
    return objective, report
