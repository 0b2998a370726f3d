# src/attention_reid/cli.py

"""
Command-line surface.

    attention-reid gen        --out DATA
    attention-reid train      --data DATA --out RUN [--ablation avg_pool] [--freeze-backbone] ...
    attention-reid eval       --checkpoint RUN/model.ckpt --data DATA --out RUN
    attention-reid attn       --checkpoint RUN/model.ckpt --data DATA --out MAPS
    attention-reid selfcheck

Exit codes: 0 success, 2 configuration/usage, 3 I/O, 4 evaluation
protocol, 5 numerical or mining failure, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import csv
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .config import RunConfig
from .data import generate_synthetic_dataset
from .dataset_store import DatasetStore
from .errors import IO_EXIT_CODE, ConfigurationError, NumericalError, ReidError
from .evaluation import (
    EvaluationReport,
    embeddings_for,
    evaluate,
    sanity_pairs,
    split_query_gallery,
    write_embeddings_csv,
)
from .heatmaps import export_attention_maps
from .models import Dataset, PoolingMode
from .network import ReidNetwork
from .selfcheck import DEFAULT_TOLERANCE, run_selfcheck
from .trainer import Trainer

logger = logging.getLogger("attention_reid")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
REPORT_CSV = "report.csv"
EMBEDDINGS_CSV = "embeddings.csv"
CMC_CSV = "cmc.csv"


# ---------------------------------------------------------------------- #
# Shared plumbing
# ---------------------------------------------------------------------- #


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Flag values as dotted config keys; unset flags are left out."""
    out: Dict[str, Any] = {
        "run.seed": getattr(args, "seed", None),
        "attention.pooling": getattr(args, "ablation", None),
        "attention.steps": getattr(args, "steps", None),
        "attention.glimpses": getattr(args, "glimpses", None),
        "loss.margin": getattr(args, "margin", None),
        "loss.mode": getattr(args, "loss", None),
    }
    if getattr(args, "freeze_backbone", False):
        out["train.freeze_backbone"] = True
    return {k: v for k, v in out.items() if v is not None}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config_path = None if args.config is None else Path(args.config)
    return RunConfig.resolve(config_path, overrides=_overrides(args))


def load_dataset(data: Optional[str], config: RunConfig) -> Dataset:
    """From a generated directory when given, otherwise regenerated from the config."""
    if data is None:
        return generate_synthetic_dataset(config.dataset())
    return DatasetStore(Path(data)).load()


def load_model(path: str) -> Tuple[ReidNetwork, Dict[str, np.ndarray], Checkpoint]:
    """Network and the parameters to evaluate (the best snapshot when one is stored)."""
    ckpt = load_checkpoint(Path(path))
    network = ReidNetwork.from_description(ckpt.network)
    params = ckpt.best or ckpt.params
    network.check_params(params)
    return network, params, ckpt


def _check_image_size(network: ReidNetwork, dataset: Dataset) -> None:
    for sample in dataset.all_samples()[:1]:
        if sample.pixels.shape[:2] != tuple(network.backbone.image_size):
            raise ConfigurationError(
                f"dataset images are {sample.pixels.shape[:2]}, checkpoint expects "
                f"{tuple(network.backbone.image_size)}"
            )


def run_evaluation(
    network: ReidNetwork,
    params: Dict[str, np.ndarray],
    dataset: Dataset,
    config: RunConfig,
    out_dir: Path,
    label: str,
    split: str = "test",
    sanity: bool = False,
) -> EvaluationReport:
    samples = dataset.split(split)
    embeddings = embeddings_for(samples, network.embed(params, [s.pixels for s in samples]))
    queries, gallery = sanity_pairs(embeddings) if sanity else split_query_gallery(embeddings)
    report = evaluate(queries, gallery, label=label, repeats=config["eval.repeats"], seed=config.seed, sanity=sanity)

    out_dir.mkdir(parents=True, exist_ok=True)
    report.append_csv(out_dir / REPORT_CSV)
    write_embeddings_csv(out_dir / EMBEDDINGS_CSV, embeddings)
    with (out_dir / CMC_CSV).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "accuracy"])
        for m, value in enumerate(report.cmc.accuracy_at_rank, start=1):
            writer.writerow([m, repr(float(value))])
    return report


def _print_report(report: EvaluationReport) -> None:
    print(
        f"{report.label}: rank-1 {report.rank(1):.4f}  rank-5 {report.rank(5):.4f}  "
        f"rank-10 {report.rank(10):.4f}  rank-20 {report.rank(20):.4f}  mAP {report.mean_ap:.4f}"
    )


def run_label(config: RunConfig) -> str:
    pooling = config.attention().pooling.value
    return f"{pooling}/{config.schedule().regime}/{config.loss().mode.value}"


# ---------------------------------------------------------------------- #
# Commands
# ---------------------------------------------------------------------- #


def cmd_gen(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    dataset = generate_synthetic_dataset(config.dataset())
    root = DatasetStore(Path(args.out)).save(dataset)
    config.echo(root)
    print(f"{len(dataset.all_samples())} images, {len(dataset.identities('train'))} train identities → {root}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out_dir = Path(args.out)
    config.echo(out_dir)
    dataset = load_dataset(args.data, config)
    schedule = config.schedule()
    network = ReidNetwork(config.backbone(), config.attention(), num_classes=len(dataset.identities("train")))
    _check_image_size(network, dataset)
    trainer = Trainer(network, config.loss(), schedule, out_dir=out_dir)
    logger.info("run %s, seed %d, regime %s", run_label(config), config.seed, schedule.regime)

    if args.resume:
        params = trainer.train_end_to_end(dataset, optim=config.train_optim(), resume=Path(args.resume))
    else:
        init = None
        warm = config["train.init_checkpoint"]
        if warm:
            _, warm_params, _ = load_model(warm)
            init = warm_params
            logger.info("backbone warm-started from %s", warm)
        elif not schedule.skip_pretrain:
            init = trainer.pretrain_backbone(dataset, config.pretrain_optim())
        params = trainer.train_end_to_end(dataset, init=init, optim=config.train_optim())

    if dataset.test:
        report = run_evaluation(network, params, dataset, config, out_dir, args.label or run_label(config))
        _print_report(report)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    network, params, _ = load_model(args.checkpoint)
    dataset = load_dataset(args.data, config)
    _check_image_size(network, dataset)
    label = args.label or ("sanity" if args.sanity else Path(args.checkpoint).stem)
    out_dir = Path(args.out)
    config.echo(out_dir)
    report = run_evaluation(network, params, dataset, config, out_dir, label, args.split, args.sanity)
    _print_report(report)
    return 0


def cmd_attention_maps(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    network, params, _ = load_model(args.checkpoint)
    if network.pooling is not PoolingMode.ATTENTION:
        raise ConfigurationError(f"checkpoint uses {network.pooling.value!r}, which predicts no attention maps")
    dataset = load_dataset(args.data, config)
    _check_image_size(network, dataset)
    samples = dataset.split(args.split)[: args.limit]
    out_dir = Path(args.out)
    config.echo(out_dir)
    for sample in samples:
        maps = network.attention_maps(params, sample.pixels)
        export_attention_maps(maps, sample.pixels, out_dir, sample.image_id)
    print(f"{len(samples)} images × {network.attention.glimpses} steps → {out_dir}")
    return 0


def cmd_selfcheck(args: argparse.Namespace) -> int:
    report = run_selfcheck(tolerance=args.tolerance, seed=args.seed or 0)
    for line in report.lines():
        print(line)
    if not report.passed:
        raise NumericalError(f"gradient check failed for: {', '.join(report.failing)}")
    print(f"all {len(report.results)} checks below {args.tolerance:g}")
    return 0


# ---------------------------------------------------------------------- #
# Parser
# ---------------------------------------------------------------------- #


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, metavar="PATH", help="TOML config file")
    p.add_argument("--seed", type=int, default=None, help="run.seed override")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ablation", choices=[m.value for m in PoolingMode], default=None, help="attention.pooling")
    p.add_argument("--freeze-backbone", action="store_true", help="non-end-to-end regime")
    p.add_argument("--steps", default=None, help="concatenated glimpse steps: 2,4,8 | all | last")
    p.add_argument("--glimpses", type=int, default=None, help="number of glimpses T")
    p.add_argument("--margin", type=float, default=None, help="triplet margin")
    p.add_argument("--loss", choices=["multi", "triplet", "identification"], default=None, help="loss.mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attention-reid", description="Comparative attention re-identification")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate and store the synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("train", help="pretrain, train end to end and evaluate on the test split")
    _common(p)
    _model_flags(p)
    p.add_argument("--data", default=None, help="dataset directory (default: regenerate from config)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", default=None, metavar="CKPT", help="resume end-to-end training")
    p.add_argument("--label", default=None, help="row label in report.csv")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="CMC / mAP report for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=list(Dataset.SPLITS))
    p.add_argument("--sanity", action="store_true", help="gallery == query set (rank-1 must be 1.0)")
    p.add_argument("--label", default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("attn", help="export attention heatmaps")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=list(Dataset.SPLITS))
    p.add_argument("--limit", type=int, default=8, help="number of images")
    p.set_defaults(handler=cmd_attention_maps)

    p = sub.add_parser("selfcheck", help="finite-difference gradient checks")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_selfcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        return args.handler(args)
    except ReidError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error("I/O error: %s", e)
        return IO_EXIT_CODE


if __name__ == "__main__":
    raise SystemExit(main())
