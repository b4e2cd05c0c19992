"""Adversarial training loop: critic/generator interleaving, learning-rate
schedule, checkpointing with exact resumability, and single-image
translation.

One iteration is ``n_critic`` discriminator steps followed by one joint
generator/style-extractor step, each on a fresh batch. All stochastic
draws during training come from one serialized torch generator plus the
stateless data stream, so a run can be checkpointed and resumed with
bit-identical results.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.optim import Adam

from .config import TrainConfig
from .data_pipeline import (
    Dataset,
    EpochBatcher,
    ImageBatch,
    load_dataset,
    split_train_test,
)
from .losses import (
    METRICS_HEADER,
    LossReport,
    adversarial_loss_d,
    adversarial_loss_g,
    classification_loss_fake,
    classification_loss_real,
    gradient_penalty,
    reconstruction_loss,
    total_d_loss,
    total_g_loss,
)
from .models import Discriminator, Generator, StyleExtractor, sample_latent

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "RACEGAN-CKPT"
FORMAT_VERSION = 1
TEST_FRACTION = 0.05  # the 95/5 protocol split
LR_HOLD_INTERVAL = 10


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries the partial report."""

    def __init__(self, message: str, partials: dict):
        super().__init__(f"{message}; partial losses: {partials}")
        self.partials = partials


@dataclass
class ModelBundle:
    generator: Generator
    style_extractor: StyleExtractor
    discriminator: Discriminator

    def state_dicts(self) -> dict:
        return {
            "generator": self.generator.state_dict(),
            "style_extractor": self.style_extractor.state_dict(),
            "discriminator": self.discriminator.state_dict(),
        }

    def load_state_dicts(self, states: dict) -> None:
        self.generator.load_state_dict(states["generator"])
        self.style_extractor.load_state_dict(states["style_extractor"])
        self.discriminator.load_state_dict(states["discriminator"])

    def eval(self) -> "ModelBundle":
        for module in (self.generator, self.style_extractor, self.discriminator):
            module.eval()
        return self


def build_models(config: TrainConfig) -> ModelBundle:
    """Construct all three networks with seed-deterministic initialization."""
    torch.manual_seed(config.seed)
    return ModelBundle(
        generator=Generator(config.generator_spec()),
        style_extractor=StyleExtractor(config.style_extractor_spec()),
        discriminator=Discriminator(config.discriminator_spec()),
    )


@dataclass
class CheckpointState:
    """Self-describing snapshot of a training run."""

    iteration: int
    config: TrainConfig
    model_states: dict
    optimizer_states: dict
    rng_state: dict
    format_version: int = FORMAT_VERSION

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {
            "magic": CHECKPOINT_MAGIC,
            "format_version": self.format_version,
            "iteration": self.iteration,
            "config": self.config.to_dict(),
            "models": self.model_states,
            "optimizers": self.optimizer_states,
            "rng": self.rng_state,
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        os.replace(tmp, path)  # atomic on POSIX
        return path

    @classmethod
    def load(cls, path: str | Path) -> "CheckpointState":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except OSError as exc:
            raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"not a recognized checkpoint file: {path}")
        if payload.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format_version "
                f"{payload.get('format_version')} in {path}"
            )
        return cls(
            iteration=payload["iteration"],
            config=TrainConfig.from_dict(payload["config"]),
            model_states=payload["models"],
            optimizer_states=payload["optimizers"],
            rng_state=payload["rng"],
        )


def load_checkpoint(path: str | Path) -> CheckpointState:
    return CheckpointState.load(path)


def models_from_state(state: CheckpointState) -> ModelBundle:
    bundle = build_models(state.config)
    bundle.load_state_dicts(state.model_states)
    return bundle.eval()


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """Linear decay to zero, re-evaluated every 10th iteration and held
    constant in between."""
    held = (iteration // LR_HOLD_INTERVAL) * LR_HOLD_INTERVAL
    if config.max_iterations == 0:
        return config.lr_initial
    return config.lr_initial * max(0.0, 1.0 - held / config.max_iterations)


def as_float_tensor(array: np.ndarray) -> torch.Tensor:
    """Bridge numpy image arrays to torch, copying read-only dataset views."""
    array = np.asarray(array, dtype=np.float32)
    if not array.flags.writeable:
        array = array.copy()
    return torch.from_numpy(array)


def _batch_tensors(batch: ImageBatch) -> tuple[torch.Tensor, torch.Tensor]:
    return as_float_tensor(batch.pixels), torch.from_numpy(batch.labels)


def _finite_or_raise(partials: dict, step_name: str) -> None:
    if not all(np.isfinite(v) for v in partials.values()):
        raise TrainingDiverged(f"non-finite loss in {step_name}", partials)


def train_step_d(
    batch: ImageBatch,
    models: ModelBundle,
    optimizer_d: Adam,
    config: TrainConfig,
    rng: torch.Generator,
) -> dict:
    """One discriminator update; gradients never reach G or E."""
    pixels, labels = _batch_tensors(batch)
    b = pixels.shape[0]
    k = config.dataset.num_domains
    z = sample_latent(b, config.style_extractor.latent_length, rng)
    targets = torch.randint(0, k, (b,), generator=rng)
    with torch.no_grad():
        style = models.style_extractor(z, targets)
        fake = models.generator(pixels, targets, style)
    src_real, cls_real = models.discriminator(pixels)
    src_fake, _ = models.discriminator(fake)
    gp = gradient_penalty(models.discriminator, pixels, fake, rng)
    d_adv = adversarial_loss_d(src_real, src_fake, gp, config.weights.lambda_gp)
    d_cls = classification_loss_real(cls_real, labels)
    d_total = total_d_loss(d_adv, d_cls, config.weights)
    # report totals as the float64 composition of the reported components
    # so the documented identities hold at 1e-6 even at large magnitudes
    partials = {
        "d_adv": float(d_adv.detach()),
        "d_gp": float(gp.detach()),
        "d_cls_real": float(d_cls.detach()),
    }
    partials["d_total"] = total_d_loss(
        partials["d_adv"], partials["d_cls_real"], config.weights
    )
    _finite_or_raise(partials, "discriminator step")
    optimizer_d.zero_grad(set_to_none=True)
    d_total.backward()
    optimizer_d.step()
    return partials


def train_step_g(
    batch: ImageBatch,
    models: ModelBundle,
    optimizer_g: Adam,
    config: TrainConfig,
    rng: torch.Generator,
) -> dict:
    """One joint generator/style-extractor update through the cycle pass."""
    pixels, labels = _batch_tensors(batch)
    b = pixels.shape[0]
    k = config.dataset.num_domains
    z = sample_latent(b, config.style_extractor.latent_length, rng)
    targets = torch.randint(0, k, (b,), generator=rng)
    style = models.style_extractor(z, targets)
    fake = models.generator(pixels, targets, style)
    src_fake, cls_fake = models.discriminator(fake)
    g_adv = adversarial_loss_g(src_fake)
    g_cls = classification_loss_fake(cls_fake, targets)
    # cycle back to the original domain with a fresh latent
    z_back = sample_latent(b, config.style_extractor.latent_length, rng)
    style_back = models.style_extractor(z_back, labels)
    reconstructed = models.generator(fake, labels, style_back)
    g_rec = reconstruction_loss(pixels, reconstructed)
    g_total = total_g_loss(g_adv, g_cls, g_rec, config.weights)
    partials = {
        "g_adv": float(g_adv.detach()),
        "g_cls_fake": float(g_cls.detach()),
        "g_rec": float(g_rec.detach()),
    }
    partials["g_total"] = total_g_loss(
        partials["g_adv"], partials["g_cls_fake"], partials["g_rec"], config.weights
    )
    _finite_or_raise(partials, "generator step")
    optimizer_g.zero_grad(set_to_none=True)
    g_total.backward()
    optimizer_g.step()
    return partials


def _set_lr(optimizer: Adam, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _rng_state(sampler: torch.Generator, batcher: EpochBatcher) -> dict:
    return {"sampler": sampler.get_state(), "batcher": list(batcher.get_state())}


def train(
    config: TrainConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
    num_workers: int = 0,
    log_every: int = 100,
) -> tuple[CheckpointState, Path]:
    """Run the full schedule; returns the final state and the metrics CSV.

    When ``resume`` names a checkpoint, its embedded config is
    authoritative and the run continues the exact rng streams of the
    original, so an interrupted run and an uninterrupted one produce
    identical weights.
    """
    if resume is not None:
        saved = CheckpointState.load(resume)
        config = saved.config
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    sample_dir = out / "samples"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    sample_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"

    dataset = load_dataset(config.dataset, config.synthetic, config.seed)
    train_set, test_set = split_train_test(dataset, TEST_FRACTION, config.seed)
    logger.info(
        "dataset: %d train / %d test items across %d domains",
        len(train_set), len(test_set), dataset.num_domains,
    )

    models = build_models(config)
    optimizer_g = Adam(
        list(models.generator.parameters()) + list(models.style_extractor.parameters()),
        lr=config.lr_initial,
        betas=(config.adam_beta1, config.adam_beta2),
    )
    optimizer_d = Adam(
        models.discriminator.parameters(),
        lr=config.lr_initial,
        betas=(config.adam_beta1, config.adam_beta2),
    )
    sampler = torch.Generator()
    sampler.manual_seed(config.seed)
    batcher = EpochBatcher(
        train_set, config.batch_size, seed=config.seed, num_workers=num_workers
    )

    start_iteration = 0
    if resume is not None:
        models.load_state_dicts(saved.model_states)
        optimizer_g.load_state_dict(saved.optimizer_states["g"])
        optimizer_d.load_state_dict(saved.optimizer_states["d"])
        sampler.set_state(saved.rng_state["sampler"])
        batcher.set_state(tuple(saved.rng_state["batcher"]))
        start_iteration = saved.iteration
        logger.info("resumed from %s at iteration %d", resume, start_iteration)

    new_log = not metrics_path.exists() or resume is None
    with open(metrics_path, "w" if new_log else "a") as metrics:
        if new_log:
            metrics.write(METRICS_HEADER + "\n")
        for iteration in range(start_iteration + 1, config.max_iterations + 1):
            lr = lr_schedule(iteration - 1, config)
            _set_lr(optimizer_g, lr)
            _set_lr(optimizer_d, lr)
            for _ in range(config.n_critic):
                d_partials = train_step_d(
                    batcher.next_batch(), models, optimizer_d, config, sampler
                )
            g_partials = train_step_g(
                batcher.next_batch(), models, optimizer_g, config, sampler
            )
            report = LossReport(iteration=iteration, lr=lr, **d_partials, **g_partials)
            report.validate(config.weights)
            metrics.write(report.csv_row() + "\n")
            metrics.flush()
            if log_every and iteration % log_every == 0:
                logger.info(
                    "iter %6d  d_total %+.4f  g_total %+.4f  g_rec %.4f  gp %.4f  lr %.2e",
                    iteration, report.d_total, report.g_total, report.g_rec,
                    report.d_gp, lr,
                )
            if iteration % config.checkpoint_every == 0:
                state = CheckpointState(
                    iteration=iteration,
                    config=config,
                    model_states=models.state_dicts(),
                    optimizer_states={
                        "g": optimizer_g.state_dict(),
                        "d": optimizer_d.state_dict(),
                    },
                    rng_state=_rng_state(sampler, batcher),
                )
                state.save(ckpt_dir / f"{iteration:07d}.ckpt")
                _write_training_samples(
                    models, test_set, sample_dir / f"{iteration:07d}.png", config, iteration
                )

    final = CheckpointState(
        iteration=max(start_iteration, config.max_iterations),
        config=config,
        model_states=models.state_dicts(),
        optimizer_states={
            "g": optimizer_g.state_dict(),
            "d": optimizer_d.state_dict(),
        },
        rng_state=_rng_state(sampler, batcher),
    )
    final.save(ckpt_dir / "final.ckpt")
    return final, metrics_path


def _write_training_samples(
    models: ModelBundle,
    test_set: Dataset,
    path: Path,
    config: TrainConfig,
    iteration: int,
) -> None:
    from .evaluation import render_sample_grid  # local import avoids a cycle

    count = min(4, len(test_set))
    if count == 0:
        return
    was_training = models.generator.training
    models.eval()
    grid = render_sample_grid(
        models, test_set.images[:count], seed=config.seed + iteration
    )
    from PIL import Image

    Image.fromarray(grid).save(path)
    if was_training:
        for module in (models.generator, models.style_extractor, models.discriminator):
            module.train()


def to_uint8(image: torch.Tensor | np.ndarray) -> np.ndarray:
    """[3,H,W] in [-1,1] to [H,W,3] uint8."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = (np.clip(image, -1.0, 1.0).transpose(1, 2, 0) + 1.0) * 127.5
    return arr.round().astype(np.uint8)


def resolve_domain(domain: int | str, domain_names: tuple[str, ...]) -> int:
    if isinstance(domain, str):
        if domain not in domain_names:
            raise ValueError(
                f"unknown domain {domain!r}; available: {', '.join(domain_names)}"
            )
        return domain_names.index(domain)
    index = int(domain)
    if not 0 <= index < len(domain_names):
        raise ValueError(
            f"domain index {index} out of range [0, {len(domain_names)})"
        )
    return index


def translate(
    image: np.ndarray,
    target_domain: int | str,
    checkpoint: CheckpointState | str | Path,
    z: torch.Tensor | None = None,
    seed: int | None = None,
) -> np.ndarray:
    """Translate one [3,H,W] image in [-1,1] into the target domain.

    The style latent defaults to a fresh Gaussian sample; pass ``z`` or
    ``seed`` for a deterministic result. Returns 8-bit RGB [H,W,3].
    """
    state = checkpoint if isinstance(checkpoint, CheckpointState) else CheckpointState.load(checkpoint)
    models = models_from_state(state)
    index = resolve_domain(target_domain, state.config.dataset.domain_names)
    latent_length = state.config.style_extractor.latent_length
    if z is None:
        generator = None
        if seed is not None:
            generator = torch.Generator()
            generator.manual_seed(seed)
        z = sample_latent(1, latent_length, generator)
    else:
        z = torch.as_tensor(z, dtype=torch.float32).reshape(1, latent_length)
    pixels = as_float_tensor(image)[None]
    targets = torch.tensor([index])
    with torch.no_grad():
        style = models.style_extractor(z, targets)
        fake = models.generator(pixels, targets, style)
    return to_uint8(fake[0])
