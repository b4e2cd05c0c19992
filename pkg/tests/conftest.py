"""Shared fixtures: micro configs for fast unit tests and the desk-scale
training runs backing the acceptance suite.

Set RACEGAN_DESK_CACHE to a writable directory to reuse desk checkpoints
across pytest sessions (clear it after code changes); by default the desk
runs train fresh inside the session tmp dir.
"""

import hashlib
import json
import os
from pathlib import Path

import pytest
import torch

from racegan.config import TrainConfig
from racegan.trainer import train

torch.set_num_threads(max(1, os.cpu_count() or 1))


def micro_config(seed: int = 0, **overrides) -> TrainConfig:
    """Tiny everything: H=8, 30 images, narrow nets. Seconds per run."""
    tree = {
        "dataset": {
            "root_path": "synthetic",
            "domain_names": ["a", "b", "c"],
            "image_size": 8,
            "crop_size": "none",
        },
        "synthetic": {"num_per_domain": 10},
        "generator": {"base_width": 4, "num_residual_blocks": 1},
        "style_extractor": {"hidden_width": 16},
        "discriminator": {"base_width": 4, "num_hidden_layers": 1},
        "batch_size": 2,
        "max_iterations": 10,
        "n_critic": 2,
        "checkpoint_every": 5,
        "seed": seed,
    }
    tree.update(overrides)
    return TrainConfig.from_dict(tree)


def desk_config(seed: int) -> TrainConfig:
    """The desk-scale experiment: synthetic 3-domain, H=64, batch 16,
    2000 iterations."""
    return TrainConfig.from_dict(
        {
            "dataset": {
                "root_path": "synthetic",
                "domain_names": ["a", "b", "c"],
                "image_size": 64,
                "crop_size": "none",
            },
            "synthetic": {"num_per_domain": 100},
            "generator": {"base_width": 8, "num_residual_blocks": 3},
            "discriminator": {"base_width": 8, "num_hidden_layers": 4},
            "batch_size": 16,
            "max_iterations": 2000,
            "n_critic": 5,
            "checkpoint_every": 1000,
            "seed": seed,
        }
    )


DESK_SEEDS = (0, 1, 2)


def _desk_cache_key(config: TrainConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory) -> dict:
    """Final checkpoint + metrics paths of the desk runs, one per seed."""
    cache_root = os.environ.get("RACEGAN_DESK_CACHE")
    runs = {}
    for seed in DESK_SEEDS:
        config = desk_config(seed)
        if cache_root:
            run_dir = Path(cache_root) / f"desk-{_desk_cache_key(config)}-s{seed}"
        else:
            run_dir = tmp_path_factory.mktemp(f"desk-s{seed}")
        ckpt = run_dir / "checkpoints" / "final.ckpt"
        metrics = run_dir / "metrics.csv"
        if not (ckpt.exists() and metrics.exists()):
            train(config, run_dir)
        runs[seed] = {"checkpoint": ckpt, "metrics": metrics, "config": config}
    return runs


@pytest.fixture(scope="session")
def micro_checkpoint(tmp_path_factory):
    """A trained-for-a-few-steps checkpoint for plumbing tests."""
    run_dir = tmp_path_factory.mktemp("micro-ckpt")
    final, metrics = train(micro_config(seed=3), run_dir)
    return {
        "state": final,
        "checkpoint": run_dir / "checkpoints" / "final.ckpt",
        "metrics": metrics,
        "run_dir": run_dir,
    }
