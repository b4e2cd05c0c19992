"""Command-line entry point: train, translate, evaluate, and visualize.

Every subcommand honors ``--seed``; runs that produce a directory record a
run manifest (config echo, content hash, seed, timestamps) as append-only
JSON lines. The ``RACEGAN_NUM_WORKERS`` environment variable controls data
loading workers (0 keeps loading deterministic and in-thread).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from . import evaluation, trainer
from .config import TrainConfig, config_hash, parse_config
from .data_pipeline import (
    IMAGE_EXTENSIONS,
    ConfigurationError,
    decode_image,
    dump_dataset,
    load_dataset,
)

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="racegan",
        description="Multi-domain style-conditioned image-to-image translation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training schedule")
    p.add_argument("--config", help="config file; omitted keys use defaults")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", default="run", help="run directory (default: ./run)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument(
        "--dump-synthetic",
        metavar="DIR",
        help="also write the synthetic dataset as <DIR>/<domain>/*.png",
    )

    p = sub.add_parser("translate", help="translate a single image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--domain", required=True, help="target domain name or index")
    p.add_argument("--seed", type=int, help="style latent seed")
    p.add_argument("--output", required=True)

    p = sub.add_parser("evaluate", help="run the classifier evaluation protocol")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--setting", choices=("ssc", "sc", "cc", "all"), default="all")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("visualize-latent", help="latent clustering plots + silhouettes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perplexity", type=float, default=30.0)

    p = sub.add_parser("sample-grid", help="inputs vs. per-domain translations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--inputs", required=True, help="directory of input images")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-images", type=int, default=4)
    return parser


def _append_manifest(out_dir: Path, record: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "a") as handle:
        handle.write(json.dumps(record, sort_keys=True) + "\n")


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def _num_workers() -> int:
    return int(os.environ.get("RACEGAN_NUM_WORKERS", "0"))


def _cmd_train(args) -> int:
    if args.config:
        config = parse_config(args.config)
    else:
        config = TrainConfig()
    if args.resume:
        resumed = trainer.CheckpointState.load(args.resume)
        if args.config and config_hash(config) != config_hash(resumed.config):
            logger.warning(
                "config file differs from the checkpoint echo; the checkpoint wins"
            )
        config = resumed.config
    if args.seed is not None:
        config = config.replace(seed=args.seed)

    out = Path(args.out)
    if args.dump_synthetic:
        if not config.dataset.is_synthetic:
            raise ConfigurationError("--dump-synthetic requires a synthetic dataset")
        dataset = load_dataset(config.dataset, config.synthetic, config.seed)
        dump_dataset(dataset, args.dump_synthetic)
        logger.info("synthetic dataset written to %s", args.dump_synthetic)

    started = _timestamp()
    _append_manifest(
        out,
        {
            "event": "start",
            "timestamp": started,
            "seed": config.seed,
            "config_hash": config_hash(config),
            "config": config.to_dict(),
            "layout": {
                "checkpoints": "checkpoints/",
                "samples": "samples/",
                "metrics": "metrics.csv",
            },
        },
    )
    final, metrics_path = trainer.train(
        config, out, resume=args.resume, num_workers=_num_workers()
    )
    _append_manifest(
        out,
        {
            "event": "end",
            "started": started,
            "timestamp": _timestamp(),
            "seed": config.seed,
            "config_hash": config_hash(config),
            "final_iteration": final.iteration,
            "metrics": str(metrics_path),
        },
    )
    print(f"trained to iteration {final.iteration}; run directory: {out}")
    return 0


def _cmd_translate(args) -> int:
    state = trainer.CheckpointState.load(args.ckpt)
    image = decode_image(Path(args.input), state.config.dataset)
    domain = int(args.domain) if args.domain.lstrip("-").isdigit() else args.domain
    result = trainer.translate(image, domain, state, seed=args.seed)
    Image.fromarray(result).save(args.output)
    print(f"translated {args.input} -> {args.output}")
    return 0


def _cmd_evaluate(args) -> int:
    state = trainer.CheckpointState.load(args.ckpt)
    dataset = load_dataset(state.config.dataset, state.config.synthetic, state.config.seed)
    settings = list(evaluation.SETTINGS) if args.setting == "all" else [args.setting]
    results = {}
    for setting in settings:
        metrics = evaluation.run_experiment_setting(setting, state, dataset, args.seed)
        results[setting] = metrics.to_dict()
        print(
            f"{setting.upper()}: accuracy {metrics.accuracy:.3f}  precision "
            f"{metrics.precision:.3f}  recall {metrics.recall:.3f}  f1 {metrics.f1:.3f}"
        )
    report = {
        "seed": args.seed,
        "config_hash": config_hash(state.config),
        "config": state.config.to_dict(),
        "checkpoint_iteration": state.iteration,
        "settings": results,
    }
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"report written to {out}")
    return 0


def _cmd_visualize_latent(args) -> int:
    state = trainer.CheckpointState.load(args.ckpt)
    dataset = load_dataset(state.config.dataset, state.config.synthetic, state.config.seed)
    out = Path(args.out)
    started = _timestamp()
    report = evaluation.latent_cluster_report(
        state, dataset, out, seed=args.seed, perplexity=args.perplexity
    )
    _append_manifest(
        out,
        {
            "event": "visualize-latent",
            "started": started,
            "timestamp": _timestamp(),
            "seed": args.seed,
            "config_hash": config_hash(state.config),
            "config": state.config.to_dict(),
            "silhouette_latent": report.silhouette_latent,
            "silhouette_pixels": report.silhouette_pixels,
            "plots": report.plot_paths,
        },
    )
    print(
        f"latent silhouette {report.silhouette_latent:.3f}, "
        f"pixel silhouette {report.silhouette_pixels:.3f}; plots in {out}"
    )
    return 0


def _cmd_sample_grid(args) -> int:
    state = trainer.CheckpointState.load(args.ckpt)
    inputs = Path(args.inputs)
    if not inputs.is_dir():
        raise ConfigurationError(f"inputs directory does not exist: {inputs}")
    paths = sorted(
        p for p in inputs.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS
    )[: args.num_images]
    if not paths:
        raise ConfigurationError(f"no images found under {inputs}")
    images = np.stack([decode_image(p, state.config.dataset) for p in paths])
    evaluation.sample_grid(state, images, seed=args.seed or 0, out_path=args.out)
    print(f"sample grid with {len(paths)} inputs written to {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "translate": _cmd_translate,
    "evaluate": _cmd_evaluate,
    "visualize-latent": _cmd_visualize_latent,
    "sample-grid": _cmd_sample_grid,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, ValueError, OSError, FloatingPointError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
