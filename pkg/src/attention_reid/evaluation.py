# src/attention_reid/evaluation.py

"""
Ranking evaluation: Euclidean distance matrices, CMC curves and mAP.

Gallery order for every query is a stable sort by (distance, gallery
index). Ranking uses unsquared L2; the triplet loss works on squared
distances, which orders the gallery identically.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, ProtocolError, UsageError
from .models import ImageSample

logger = logging.getLogger(__name__)

REPORT_RANKS = (1, 5, 10, 20)
REPORT_FIELDS = ("label", "rank1", "rank5", "rank10", "rank20", "mAP", "queries", "gallery", "curve")


class CmcSetting(str, Enum):
    """
      - SINGLE_SHOT   – one gallery image per identity, subsampled with a
                        seeded rng, repeated and averaged
      - MULTI_GALLERY – the full gallery, first cross-camera true match
    """

    SINGLE_SHOT = "single_shot"
    MULTI_GALLERY = "multi_gallery"


@dataclass
class Embedding:
    """Descriptor of one image: unit-norm values plus where they came from."""

    values: np.ndarray
    identity: int
    camera: int = 0
    source: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)


@dataclass
class DistanceMatrix:
    values: np.ndarray           # Q×G, unsquared L2
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def order(self, row: int, keep: Optional[np.ndarray] = None) -> np.ndarray:
        """Gallery indices of one query, nearest first, ties by index."""
        candidates = np.arange(self.values.shape[1]) if keep is None else np.flatnonzero(keep)
        return candidates[np.argsort(self.values[row, candidates], kind="stable")]


@dataclass
class CmcCurve:
    accuracy_at_rank: np.ndarray  # index m-1 holds rank-m accuracy

    def rank(self, m: int) -> float:
        """Rank-m accuracy; ranks past the gallery size saturate."""
        if m < 1:
            raise UsageError(f"rank must be >= 1, got {m}")
        if self.accuracy_at_rank.size == 0:
            return 0.0
        return float(self.accuracy_at_rank[min(m, self.accuracy_at_rank.size) - 1])

    def __len__(self) -> int:
        return self.accuracy_at_rank.size


def distance_matrix(queries: Sequence[Embedding], gallery: Sequence[Embedding]) -> DistanceMatrix:
    q = np.stack([e.values for e in queries]) if queries else np.zeros((0, 0))
    g = np.stack([e.values for e in gallery]) if gallery else np.zeros((0, 0))
    if queries and gallery and q.shape[1] != g.shape[1]:
        raise DimensionError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    if queries and gallery:
        diff = q[:, None, :] - g[None, :, :]
        values = np.sqrt((diff * diff).sum(axis=2))
    else:
        values = np.zeros((len(queries), len(gallery)))
    return DistanceMatrix(
        values=values,
        query_ids=np.array([e.identity for e in queries], dtype=np.int64),
        query_cams=np.array([e.camera for e in queries], dtype=np.int64),
        gallery_ids=np.array([e.identity for e in gallery], dtype=np.int64),
        gallery_cams=np.array([e.camera for e in gallery], dtype=np.int64),
    )


def _check_queries_present(dist: DistanceMatrix) -> None:
    present = set(dist.gallery_ids.tolist())
    for identity in dist.query_ids.tolist():
        if identity not in present:
            raise ProtocolError(f"query identity {identity} has no entry in the gallery")


def _single_shot_once(dist: DistanceMatrix, rng: np.random.Generator) -> np.ndarray:
    identities = np.unique(dist.gallery_ids)
    picks = np.array([rng.choice(np.flatnonzero(dist.gallery_ids == i)) for i in identities])
    keep = np.zeros(dist.values.shape[1], dtype=bool)
    keep[picks] = True
    hits = np.zeros(identities.size)
    for row in range(dist.values.shape[0]):
        ranked = dist.gallery_ids[dist.order(row, keep)]
        first = int(np.flatnonzero(ranked == dist.query_ids[row])[0])
        hits[first:] += 1
    return hits / dist.values.shape[0]


def _multi_gallery(dist: DistanceMatrix) -> np.ndarray:
    hits = np.zeros(dist.values.shape[1])
    for row in range(dist.values.shape[0]):
        qid, qcam = dist.query_ids[row], dist.query_cams[row]
        keep = ~((dist.gallery_ids == qid) & (dist.gallery_cams == qcam))
        ranked = dist.gallery_ids[dist.order(row, keep)]
        matches = np.flatnonzero(ranked == qid)
        if matches.size == 0:
            raise ProtocolError(f"query {row} (identity {qid}) has no cross-camera match in the gallery")
        hits[int(matches[0]):] += 1
    return hits / dist.values.shape[0]


def cmc(
    dist: DistanceMatrix,
    setting: CmcSetting = CmcSetting.SINGLE_SHOT,
    repeats: int = 10,
    seed: int = 0,
) -> CmcCurve:
    """
    Cumulative match characteristic.

    single_shot keeps one gallery entry per identity, drawn with a seeded
    rng, and averages the curve over ``repeats`` draws. multi_gallery
    ranks the whole gallery with same-identity same-camera entries
    removed, Market-1501 style.
    """
    setting = CmcSetting(setting)
    if dist.values.shape[0] == 0:
        raise ProtocolError("no queries to evaluate")
    _check_queries_present(dist)
    if setting is CmcSetting.MULTI_GALLERY:
        return CmcCurve(_multi_gallery(dist))
    if repeats < 1:
        raise UsageError(f"repeats must be >= 1, got {repeats}")
    rng = np.random.default_rng(seed)
    curves = [_single_shot_once(dist, rng) for _ in range(repeats)]
    return CmcCurve(np.mean(curves, axis=0))


def average_precision(ranked_matches: np.ndarray) -> float:
    """Mean over true-match positions r of (matches up to r) / r."""
    positions = np.flatnonzero(ranked_matches)
    if positions.size == 0:
        raise ProtocolError("average precision of a ranking without true matches")
    return float(np.mean(np.arange(1, positions.size + 1) / (positions + 1)))


def mean_average_precision(dist: DistanceMatrix) -> float:
    """mAP with cross-camera ground truth (same-id same-camera entries dropped)."""
    if dist.values.shape[0] == 0:
        raise ProtocolError("no queries to evaluate")
    aps = []
    for row in range(dist.values.shape[0]):
        qid, qcam = dist.query_ids[row], dist.query_cams[row]
        keep = ~((dist.gallery_ids == qid) & (dist.gallery_cams == qcam))
        ranked = dist.gallery_ids[dist.order(row, keep)] == qid
        if not ranked.any():
            raise ProtocolError(f"query {row} (identity {qid}) has no cross-camera match in the gallery")
        aps.append(average_precision(ranked))
    return float(np.mean(aps))


# ---------------------------------------------------------------------- #
# Query / gallery assembly and reporting
# ---------------------------------------------------------------------- #


def embeddings_for(samples: Sequence[ImageSample], values: np.ndarray) -> List[Embedding]:
    if len(samples) != values.shape[0]:
        raise DimensionError(f"{len(samples)} samples but {values.shape[0]} embedding rows")
    return [Embedding(v, s.identity, s.camera, s.image_id) for s, v in zip(samples, values)]


def split_query_gallery(
    embeddings: Sequence[Embedding],
    query_camera: int = 0,
) -> Tuple[List[Embedding], List[Embedding]]:
    """Query set from one camera, gallery from the other."""
    queries = [e for e in embeddings if e.camera == query_camera]
    gallery = [e for e in embeddings if e.camera != query_camera]
    return queries, gallery


def sanity_pairs(embeddings: Sequence[Embedding]) -> Tuple[List[Embedding], List[Embedding]]:
    """Gallery == query set: the first embedding of every identity on both sides."""
    seen: Dict[int, Embedding] = {}
    for e in embeddings:
        seen.setdefault(e.identity, e)
    chosen = [seen[k] for k in sorted(seen)]
    return chosen, list(chosen)


@dataclass
class EvaluationReport:
    label: str
    cmc: CmcCurve
    mean_ap: float
    num_queries: int
    gallery_size: int
    extra: Dict[str, float] = field(default_factory=dict)

    def rank(self, m: int) -> float:
        return self.cmc.rank(m)

    @property
    def rank1(self) -> float:
        return self.rank(1)

    def row(self) -> Dict[str, str]:
        row = {"label": self.label}
        for m in REPORT_RANKS:
            row[f"rank{m}"] = f"{self.rank(m):.6f}"
        row["mAP"] = f"{self.mean_ap:.6f}"
        row["queries"] = str(self.num_queries)
        row["gallery"] = str(self.gallery_size)
        row["curve"] = " ".join(f"{v:.6f}" for v in self.cmc.accuracy_at_rank)
        return row

    def append_csv(self, path: Path) -> Path:
        """Append one row; the header is written when the file is new."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not path.exists() or path.stat().st_size == 0
        with path.open("a", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            if new:
                writer.writeheader()
            writer.writerow(self.row())
        return path


def evaluate(
    queries: Sequence[Embedding],
    gallery: Sequence[Embedding],
    label: str = "",
    repeats: int = 10,
    seed: int = 0,
    sanity: bool = False,
) -> EvaluationReport:
    """
    Single-shot CMC plus cross-camera mAP, with the multi-gallery rank-1 as an extra.

    With sanity set the gallery shares the queries' cameras, so mAP is NaN
    instead of a ProtocolError. Any other split must have cross-camera matches.
    """
    dist = distance_matrix(queries, gallery)
    curve = cmc(dist, CmcSetting.SINGLE_SHOT, repeats=repeats, seed=seed)
    extra: Dict[str, float] = {}
    try:
        m_ap = mean_average_precision(dist)
        extra["multi_gallery_rank1"] = cmc(dist, CmcSetting.MULTI_GALLERY).rank(1)
    except ProtocolError:
        if not sanity:
            raise
        m_ap = float("nan")
    report = EvaluationReport(label, curve, m_ap, len(queries), len(gallery), extra)
    logger.info(
        "%s: rank-1 %.4f rank-5 %.4f mAP %.4f (%d queries, %d gallery)",
        label or "eval",
        report.rank(1),
        report.rank(5),
        m_ap,
        len(queries),
        len(gallery),
    )
    return report


def write_embeddings_csv(path: Path, embeddings: Sequence[Embedding]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        dim = embeddings[0].values.size if embeddings else 0
        writer.writerow(["source", "identity", "camera"] + [f"h{i}" for i in range(dim)])
        for e in embeddings:
            writer.writerow([e.source, e.identity, e.camera] + [repr(float(v)) for v in e.values])
    return path


def read_embeddings_csv(path: Path) -> List[Embedding]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return [
            Embedding(np.array([float(v) for v in row[3:]]), int(row[1]), int(row[2]), row[0])
            for row in reader
        ]
