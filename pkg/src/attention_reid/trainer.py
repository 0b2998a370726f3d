# src/attention_reid/trainer.py

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tape, softmax_cross_entropy
from .backbone import (
    backbone_forward,
    classifier_forward,
    init_backbone_params,
    init_classifier_head,
    strip_classifier_head,
)
from .checkpoint import load_checkpoint, save_train_state
from .data import build_minibatch, label_shuffle_batches, random_augmentation
from .errors import ConfigurationError, MiningError, NumericalError, UsageError
from .evaluation import embeddings_for, evaluate, split_query_gallery
from .losses import SoftmaxHead, TripletBatch, compute_objective, mine_triplets
from .models import (
    BatchMode,
    Dataset,
    ImageSample,
    LossConfig,
    LossReport,
    OptimConfig,
    ScheduleConfig,
    TrainState,
)
from .network import IDENTITY_HEAD, ReidNetwork

logger = logging.getLogger(__name__)

TRAIN_LOG_FIELDS = ("iter", "lr", "trip", "iden", "multi", "active_triplets", "val_rank1")
PRETRAIN_LOG_FIELDS = ("iter", "lr", "loss", "accuracy")

CHECKPOINT = "checkpoint.ckpt"
MODEL = "model.ckpt"
PRETRAIN = "pretrain.ckpt"
LAST_GOOD = "last_good.ckpt"


# ---------------------------------------------------------------------- #
# Optimiser
# ---------------------------------------------------------------------- #


def lr_at(k: int, config: OptimConfig) -> float:
    """Inverse policy: eta0 * (1 + gamma * k) ** -power."""
    if k < 0:
        raise UsageError(f"iteration must be >= 0, got {k}")
    return config.eta0 * (1.0 + config.gamma * k) ** (-config.power)


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices and kernels only, never biases."""
    return name.endswith(".weight")


def sgd_step(
    state: TrainState,
    grads: Mapping[str, np.ndarray],
    config: OptimConfig,
    trainable: Optional[Callable[[str], bool]] = None,
) -> TrainState:
    """
    v ← μv − η(g + λθ);  θ ← θ + v;  k ← k + 1

    η is lr_at(k) of the current iteration. Parameters without a gradient
    are treated as g = 0; parameters rejected by ``trainable`` are left
    untouched together with their momentum. All gradients are checked
    before anything is updated.
    """
    for name, g in grads.items():
        if name not in state.params:
            raise ConfigurationError(f"gradient for unknown parameter {name!r}")
        if g.shape != state.params[name].shape:
            raise ConfigurationError(
                f"gradient {name!r} has shape {g.shape}, parameter has {state.params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r} at iteration {state.iteration}")

    lr = lr_at(state.iteration, config)
    mu = config.momentum
    for name, theta in state.params.items():
        if trainable is not None and not trainable(name):
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        lam = config.weight_decay if decays(name) else 0.0
        v = mu * state.velocity[name] - lr * (g + lam * theta)
        state.velocity[name] = v
        state.params[name] = theta + v
    state.iteration += 1
    return state


# ---------------------------------------------------------------------- #
# CSV logs
# ---------------------------------------------------------------------- #


class CsvLog:
    """
    Row-per-iteration CSV file. With path=None nothing touches disk.

    On resume, rows past the checkpoint iteration are dropped so the
    file reads as one uninterrupted run.
    """

    def __init__(self, path: Optional[Path], fields: Sequence[str]) -> None:
        self.path = None if path is None else Path(path)
        self.fields = tuple(fields)
        self._fh = None
        self._writer: Optional[csv.DictWriter] = None

    def open(self, resume_from: Optional[int] = None) -> "CsvLog":
        if self.path is None:
            return self
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept: List[Dict[str, str]] = []
        if resume_from is not None and self.path.exists():
            with self.path.open(newline="", encoding="utf-8") as fh:
                kept = [r for r in csv.DictReader(fh) if int(r["iter"]) <= resume_from]
        self._fh = self.path.open("w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.fields)
        self._writer.writeheader()
        self._writer.writerows(kept)
        return self

    def write(self, row: Mapping[str, object]) -> None:
        if self._writer is None:
            return
        self._writer.writerow({k: row.get(k, "") for k in self.fields})
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
        self._fh = None
        self._writer = None

    def __enter__(self) -> "CsvLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _fmt(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------------- #
# Trainer
# ---------------------------------------------------------------------- #


def class_index(samples: Sequence[ImageSample]) -> Dict[int, int]:
    """Identity label → class index in [0, G), by sorted identity."""
    return {identity: i for i, identity in enumerate(sorted({s.identity for s in samples}))}


def stack_pixels(samples: Sequence[ImageSample]) -> np.ndarray:
    return np.stack([s.pixels for s in samples])


@dataclass
class PretrainSummary:
    losses: List[float] = field(default_factory=list)
    train_accuracy: float = 0.0


@dataclass
class ValidationPoint:
    iteration: int
    rank1: float
    loss: float


class Trainer:
    """
    Two-stage optimisation: softmax pretraining of the backbone, then
    end-to-end training of backbone + attention + identity head under
    the configured loss.

    out_dir is opt-in: without it no logs or checkpoints are written.
    """

    def __init__(
        self,
        network: ReidNetwork,
        loss: LossConfig | None = None,
        schedule: ScheduleConfig | None = None,
        out_dir: Optional[Path] = None,
    ) -> None:
        self.network = network
        self.loss = loss or LossConfig()
        self.schedule = schedule or ScheduleConfig()
        self.out_dir = None if out_dir is None else Path(out_dir)

        self.pretrain_summary: Optional[PretrainSummary] = None
        self.validation: List[ValidationPoint] = []
        self.state: Optional[TrainState] = None
        self._pending: List[List[int]] = []

    def _path(self, name: str) -> Optional[Path]:
        return None if self.out_dir is None else self.out_dir / name

    def _images(self, batch: Sequence[ImageSample]) -> np.ndarray:
        return stack_pixels(batch)

    # ------------------------------------------------------------------ #
    # Stage 1: softmax pretraining
    # ------------------------------------------------------------------ #

    def pretrain_backbone(
        self,
        dataset: Dataset,
        optim: OptimConfig | None = None,
        init: Optional[Mapping[str, np.ndarray]] = None,
    ) -> Dict[str, np.ndarray]:
        """
        Backbone + three-layer classifier trained with cross-entropy on
        the train identities. Returns the backbone parameters with the
        classifier discarded.
        """
        optim = optim or OptimConfig.pretraining()
        samples = dataset.train
        if not samples:
            raise UsageError("pretraining needs a non-empty train split")
        classes = class_index(samples)
        config = self.network.backbone
        rng = np.random.default_rng(optim.seed)

        params = init_backbone_params(config, rng) if init is None else {k: v.copy() for k, v in init.items()}
        params.update(init_classifier_head(config, len(classes), rng))
        state = TrainState(params)
        summary = PretrainSummary()
        batch_size = min(self.schedule.pretrain_batch_size, len(samples))
        logger.info(
            "pretraining backbone: %d images, %d classes, %d iterations",
            len(samples),
            len(classes),
            optim.max_iters,
        )

        with CsvLog(self._path("pretrain_log.csv"), PRETRAIN_LOG_FIELDS).open() as log:
            while state.iteration < optim.max_iters:
                k = state.iteration
                picks = rng.choice(len(samples), size=batch_size, replace=False)
                batch = [samples[int(i)] for i in picks]
                if self.schedule.augment:
                    batch = [random_augmentation(s, rng) for s in batch]
                labels = np.array([classes[s.identity] for s in batch])
                try:
                    tape = Tape()
                    bound = tape.bind(state.params)
                    logits = classifier_forward(backbone_forward(tape.constant(self._images(batch)), config, bound), bound)
                    loss = softmax_cross_entropy(logits, labels)
                    if not np.isfinite(loss.item()):
                        raise NumericalError(f"pretraining loss is {loss.item()} at iteration {k}")
                    tape.backward(loss)
                    grads = {n: t.grad for n, t in bound.items() if t.grad is not None}
                    sgd_step(state, grads, optim)
                except NumericalError:
                    self._save_last_good(state, rng, stage="pretrain")
                    raise
                accuracy = float(np.mean(np.argmax(logits.data, axis=1) == labels))
                summary.losses.append(loss.item())
                log.write({"iter": k, "lr": _fmt(lr_at(k, optim)), "loss": _fmt(loss.item()), "accuracy": _fmt(accuracy)})
                if self.schedule.log_every and k % self.schedule.log_every == 0:
                    logger.info("pretrain iter %d lr %.6g loss %.4f acc %.3f", k, lr_at(k, optim), loss.item(), accuracy)

        summary.train_accuracy = self.classification_accuracy(state.params, samples, classes)
        self.pretrain_summary = summary
        logger.info("pretraining done: train accuracy %.3f", summary.train_accuracy)
        if self.out_dir is not None:
            save_train_state(self._path(PRETRAIN), state, self.network.describe(), rng, stage="pretrain")
        return strip_classifier_head(state.params)

    def classification_accuracy(
        self,
        params: Mapping[str, np.ndarray],
        samples: Sequence[ImageSample],
        classes: Mapping[int, int],
        batch_size: int = 64,
    ) -> float:
        correct = 0
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            tape = Tape()
            bound = tape.bind(params, trainable=False)
            logits = classifier_forward(backbone_forward(tape.constant(self._images(chunk)), self.network.backbone, bound), bound)
            labels = np.array([classes[s.identity] for s in chunk])
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
        return correct / max(1, len(samples))

    # ------------------------------------------------------------------ #
    # Stage 2: end-to-end training
    # ------------------------------------------------------------------ #

    def _next_batch(
        self,
        samples: Sequence[ImageSample],
        classes: Mapping[int, int],
        rng: np.random.Generator,
    ) -> Tuple[List[ImageSample], np.ndarray, TripletBatch]:
        """A batch that admits at least one triplet; resampled on mining failure."""
        s = self.schedule
        last_error: Optional[MiningError] = None
        for attempt in range(s.mining_retries + 1):
            if s.batch_mode is BatchMode.BALANCED:
                batch = build_minibatch(samples, s.batch_size, s.identities_per_batch, rng, augment_images=s.augment)
            else:
                if not self._pending:
                    self._pending = label_shuffle_batches(samples, s.batch_size, rng)
                    if not self._pending:
                        raise UsageError(f"train split has fewer than {s.batch_size} samples")
                batch = [samples[i] for i in self._pending.pop(0)]
                if s.augment:
                    batch = [random_augmentation(b, rng) for b in batch]
            labels = np.array([classes[b.identity] for b in batch])
            try:
                return batch, labels, mine_triplets(labels, rng)
            except MiningError as e:
                last_error = e
                logger.warning("mining failed (%s); resampling batch (%d/%d)", e, attempt + 1, s.mining_retries)
        raise MiningError(f"no minable batch after {s.mining_retries} retries: {last_error}")

    def validate(self, dataset: Dataset, params: Mapping[str, np.ndarray], seed: int = 0) -> Optional[float]:
        """Single-shot rank-1 on the val split (camera 0 queries, camera 1 gallery)."""
        samples = dataset.val
        if not samples:
            return None
        values = self.network.embed(params, [s.pixels for s in samples])
        queries, gallery = split_query_gallery(embeddings_for(samples, values))
        if not queries or not gallery:
            return None
        return evaluate(queries, gallery, label="val", repeats=self.schedule.eval_repeats, seed=seed).rank1

    def _save_last_good(self, state: TrainState, rng: np.random.Generator, **extra) -> None:
        path = self._path(LAST_GOOD)
        if path is None:
            return
        save_train_state(path, state, self.network.describe(), rng, **extra)
        logger.error("numerical failure at iteration %d; last good state saved to %s", state.iteration, path)

    def _checkpoint(self, name: str, state: TrainState, rng: np.random.Generator, window: List[float]) -> None:
        path = self._path(name)
        if path is None:
            return
        save_train_state(
            path,
            state,
            self.network.describe(),
            rng,
            regime=self.schedule.regime,
            loss_mode=self.loss.mode.value,
            pending_batches=self._pending,
            loss_window=window,
            validation=[[v.iteration, v.rank1, v.loss] for v in self.validation],
        )
        logger.info("checkpoint at iteration %d written to %s", state.iteration, path)

    def train_end_to_end(
        self,
        dataset: Dataset,
        init: Optional[Mapping[str, np.ndarray]] = None,
        optim: OptimConfig | None = None,
        resume: Optional[Path] = None,
    ) -> Dict[str, np.ndarray]:
        """
        Embed each batch, mine triplets, backpropagate the configured
        objective into every trainable parameter and step. Validation
        rank-1 is computed every eval_every iterations and at the end;
        the best validation snapshot (ties → lower mean loss since the
        previous validation) is returned, or the final parameters when
        there is no validation split.
        """
        optim = optim or OptimConfig.end_to_end()
        s = self.schedule
        samples = dataset.train
        if not samples:
            raise UsageError("end-to-end training needs a non-empty train split")
        classes = class_index(samples)
        if len(classes) != self.network.num_classes:
            raise ConfigurationError(
                f"network has {self.network.num_classes} identity classes, train split has {len(classes)}"
            )

        window: List[float] = []
        if resume is not None:
            ckpt = load_checkpoint(resume)
            self.network.check_params(ckpt.params)
            state = ckpt.train_state()
            rng = ckpt.restore_rng() or np.random.default_rng(optim.seed)
            self._pending = [list(b) for b in ckpt.meta.get("pending_batches", [])]
            window = list(ckpt.meta.get("loss_window", []))
            self.validation = [ValidationPoint(int(i), r, l) for i, r, l in ckpt.meta.get("validation", [])]
            logger.info("resumed from %s at iteration %d", resume, state.iteration)
        else:
            if init is None and not s.skip_pretrain:
                raise UsageError("train_end_to_end needs pretrained backbone parameters or skip_pretrain (cold start)")
            rng = np.random.default_rng(optim.seed)
            state = TrainState(self.network.init_params(rng, backbone_params=init))
            self._pending = []
            self.validation = []

        self.state = state
        trainable = self.network.trainable(s.freeze_backbone)
        logger.info(
            "training %s, regime %s, loss %s, %d iterations",
            self.network.pooling.value,
            s.regime,
            self.loss.mode.value,
            optim.max_iters,
        )

        log = CsvLog(self._path("train_log.csv"), TRAIN_LOG_FIELDS)
        with log.open(resume_from=state.iteration - 1 if resume is not None else None):
            while state.iteration < optim.max_iters:
                k = state.iteration
                batch, labels, triples = self._next_batch(samples, classes, rng)
                try:
                    report = self._step(state, batch, labels, triples, optim, trainable)
                except NumericalError:
                    self._save_last_good(state, rng, regime=s.regime)
                    raise
                state.history.append(report)
                window.append(report.objective)

                val_rank1: Optional[float] = None
                due = s.eval_every and state.iteration % s.eval_every == 0
                if due or state.iteration == optim.max_iters:
                    val_rank1 = self._validation_point(dataset, state, window, optim.seed)
                    window = []

                log.write(
                    {
                        "iter": k,
                        "lr": _fmt(lr_at(k, optim)),
                        "trip": _fmt(report.trip),
                        "iden": _fmt(report.iden),
                        "multi": _fmt(report.multi),
                        "active_triplets": report.active_triplets,
                        "val_rank1": "" if val_rank1 is None else _fmt(val_rank1),
                    }
                )
                if s.log_every and k % s.log_every == 0:
                    logger.info(
                        "iter %d lr %.6g trip %.4f iden %.4f multi %.4f active %d/%d",
                        k,
                        lr_at(k, optim),
                        report.trip,
                        report.iden,
                        report.multi,
                        report.active_triplets,
                        len(triples),
                    )
                if s.checkpoint_every and state.iteration % s.checkpoint_every == 0:
                    self._checkpoint(CHECKPOINT, state, rng, window)

        self._checkpoint(CHECKPOINT, state, rng, window)
        result = state.best_params if state.best_params is not None else state.params
        if self.out_dir is not None:
            final = TrainState(
                params=result,
                iteration=state.iteration,
                history=state.history,
                best_rank1=state.best_rank1,
                best_loss=state.best_loss,
            )
            save_train_state(
                self._path(MODEL),
                final,
                self.network.describe(),
                None,
                regime=s.regime,
                loss_mode=self.loss.mode.value,
            )
        logger.info("training done: best val rank-1 %.4f (%s)", state.best_rank1, s.regime)
        return {k: v.copy() for k, v in result.items()}

    def _step(
        self,
        state: TrainState,
        batch: Sequence[ImageSample],
        labels: np.ndarray,
        triples: TripletBatch,
        optim: OptimConfig,
        trainable: Callable[[str], bool],
    ) -> LossReport:
        tape = Tape()
        bound = tape.bind(state.params, trainable)
        out = self.network.forward(tape.constant(self._images(batch)), bound)
        objective, report = compute_objective(out.embeddings, labels, SoftmaxHead(bound[IDENTITY_HEAD]), triples, self.loss)
        if not np.isfinite(report.objective):
            raise NumericalError(f"loss is {report.objective} at iteration {state.iteration}")
        tape.backward(objective)
        grads = {n: t.grad for n, t in bound.items() if t.grad is not None}
        sgd_step(state, grads, optim, trainable)
        return report

    def _validation_point(
        self,
        dataset: Dataset,
        state: TrainState,
        window: Sequence[float],
        seed: int,
    ) -> Optional[float]:
        rank1 = self.validate(dataset, state.params, seed)
        if rank1 is None:
            return None
        loss = float(np.mean(window)) if window else float("inf")
        self.validation.append(ValidationPoint(state.iteration, rank1, loss))
        if rank1 > state.best_rank1 or (rank1 == state.best_rank1 and loss < state.best_loss):
            state.best_rank1 = rank1
            state.best_loss = loss
            state.best_params = {k: v.copy() for k, v in state.params.items()}
            logger.info("iter %d: new best val rank-1 %.4f (loss %.4f)", state.iteration, rank1, loss)
        else:
            logger.info("iter %d: val rank-1 %.4f (best %.4f)", state.iteration, rank1, state.best_rank1)
        return rank1
