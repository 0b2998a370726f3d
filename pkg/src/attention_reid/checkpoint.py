# src/attention_reid/checkpoint.py

"""
Versioned checkpoint container.

A checkpoint is a zip archive of .npy members plus one meta.json:

    param/<name>.npy      model parameters
    velocity/<name>.npy   momentum buffers
    best/<name>.npy       best-validation parameters (training checkpoints)
    meta.json             format_version, network description, iteration,
                          rng state, best-validation record, loss history,
                          regime and any caller extras

Member timestamps are fixed, so identical content gives identical bytes.
"""

from __future__ import annotations

import io
import json
import logging
import os
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np

from .errors import ConfigurationError
from .models import LossReport, TrainState

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META = "meta.json"
PARAM_DIR = "param/"
VELOCITY_DIR = "velocity/"
BEST_DIR = "best/"
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    best: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def iteration(self) -> int:
        return int(self.meta.get("iteration", 0))

    @property
    def network(self) -> Dict[str, Any]:
        try:
            return self.meta["network"]
        except KeyError as e:
            raise ConfigurationError("checkpoint carries no network description") from e

    def history(self) -> list[LossReport]:
        reports = []
        for row in self.meta.get("history", []):
            report = LossReport(
                trip=row["trip"],
                iden=row["iden"],
                active_triplets=row["active_triplets"],
                objective=row["objective"],
            )
            reports.append(report)
        return reports

    def restore_rng(self) -> Optional[np.random.Generator]:
        state = self.meta.get("rng_state")
        if state is None:
            return None
        rng = np.random.default_rng()
        rng.bit_generator.state = state
        return rng

    def train_state(self) -> TrainState:
        best = self.meta.get("best", {})
        return TrainState(
            params={k: v.copy() for k, v in self.params.items()},
            velocity={k: v.copy() for k, v in self.velocity.items()},
            iteration=self.iteration,
            history=self.history(),
            best_params={k: v.copy() for k, v in self.best.items()} or None,
            best_rank1=float(best.get("rank1", -1.0)),
            best_loss=float(best.get("loss", float("inf"))),
        )


def _array_bytes(value: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(value, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _history_rows(history: list[LossReport]) -> list[Dict[str, Any]]:
    return [
        {k: v for k, v in asdict(r).items() if k in ("trip", "iden", "active_triplets", "objective")}
        for r in history
    ]


def save_checkpoint(
    path: Path,
    params: Mapping[str, np.ndarray],
    velocity: Optional[Mapping[str, np.ndarray]] = None,
    meta: Optional[Mapping[str, Any]] = None,
    best: Optional[Mapping[str, np.ndarray]] = None,
) -> Path:
    """
    Write atomically: the archive goes to a sibling temp file first and
    replaces ``path`` only once complete.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": FORMAT_VERSION, **dict(meta or {})}
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        for name in sorted(params):
            _write_member(zf, f"{PARAM_DIR}{name}.npy", _array_bytes(params[name]))
        for name in sorted(velocity or {}):
            _write_member(zf, f"{VELOCITY_DIR}{name}.npy", _array_bytes(velocity[name]))
        for name in sorted(best or {}):
            _write_member(zf, f"{BEST_DIR}{name}.npy", _array_bytes(best[name]))
        _write_member(zf, META, json.dumps(header, indent=2, sort_keys=True).encode("utf-8"))
    os.replace(tmp, path)
    logger.debug("checkpoint written to %s", path)
    return path


def save_train_state(
    path: Path,
    state: TrainState,
    network: Mapping[str, Any],
    rng: Optional[np.random.Generator] = None,
    **extra: Any,
) -> Path:
    meta: Dict[str, Any] = {
        "network": dict(network),
        "iteration": state.iteration,
        "rng_state": None if rng is None else rng.bit_generator.state,
        "best": {"rank1": state.best_rank1, "loss": state.best_loss},
        "history": _history_rows(state.history),
    }
    meta.update(extra)
    return save_checkpoint(path, state.params, state.velocity, meta, best=state.best_params)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as e:
        raise ConfigurationError(f"{path} is not a checkpoint archive") from e
    with zf:
        names = zf.namelist()
        if META not in names:
            raise ConfigurationError(f"{path} has no {META}")
        meta = json.loads(zf.read(META).decode("utf-8"))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise ConfigurationError(
                f"checkpoint {path} has format_version {version!r}, expected {FORMAT_VERSION}"
            )
        params: Dict[str, np.ndarray] = {}
        velocity: Dict[str, np.ndarray] = {}
        best: Dict[str, np.ndarray] = {}
        for name in names:
            if not name.endswith(".npy"):
                continue
            with zf.open(name) as fh:
                value = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
            if name.startswith(PARAM_DIR):
                params[name[len(PARAM_DIR) : -4]] = value
            elif name.startswith(VELOCITY_DIR):
                velocity[name[len(VELOCITY_DIR) : -4]] = value
            elif name.startswith(BEST_DIR):
                best[name[len(BEST_DIR) : -4]] = value
    return Checkpoint(params=params, velocity=velocity, best=best, meta=meta)
