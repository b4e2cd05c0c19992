"""Adversarial, classification, and reconstruction objectives.

All operations are pure functions of network outputs. The discriminator's
patch score map is reduced to one scalar per sample by its mean before any
critic arithmetic, and the gradient penalty norm is taken over the full
input gradient of that scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

METRICS_COLUMNS = (
    "iteration",
    "d_adv",
    "d_gp",
    "d_cls_real",
    "d_total",
    "g_adv",
    "g_cls_fake",
    "g_rec",
    "g_total",
    "lr",
)
METRICS_HEADER = ",".join(METRICS_COLUMNS)


@dataclass(frozen=True)
class LossWeights:
    lambda_gp: float = 10.0
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0

    def __post_init__(self):
        if min(self.lambda_gp, self.lambda_cls, self.lambda_rec) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    """Scalar losses of one training iteration.

    ``d_adv`` is the critic term the discriminator minimizes, including the
    scaled gradient penalty: mean(fake) - mean(real) + lambda_gp * d_gp.
    ``d_gp`` is the raw unscaled penalty. With multiple critic steps per
    iteration the discriminator columns come from the last critic step.
    """

    iteration: int
    d_adv: float
    d_gp: float
    d_cls_real: float
    d_total: float
    g_adv: float
    g_cls_fake: float
    g_rec: float
    g_total: float
    lr: float = 0.0

    def validate(self, weights: LossWeights, tol: float = 1e-6) -> None:
        values = [
            self.d_adv, self.d_gp, self.d_cls_real, self.d_total,
            self.g_adv, self.g_cls_fake, self.g_rec, self.g_total,
        ]
        if not all(map(torch.isfinite, map(torch.tensor, values))):
            raise FloatingPointError(f"non-finite loss at iteration {self.iteration}: {self}")
        if abs(self.d_total - (self.d_adv + weights.lambda_cls * self.d_cls_real)) > tol:
            raise ValueError("d_total does not match its composition")
        g_expected = (
            self.g_adv
            + weights.lambda_cls * self.g_cls_fake
            + weights.lambda_rec * self.g_rec
        )
        if abs(self.g_total - g_expected) > tol:
            raise ValueError("g_total does not match its composition")

    def csv_row(self) -> str:
        return ",".join(repr(getattr(self, col)) for col in METRICS_COLUMNS)


def _patch_scores(critic_output) -> torch.Tensor:
    """Per-sample scalar critic scores: mean over the patch map."""
    if isinstance(critic_output, tuple):
        critic_output = critic_output[0]
    return critic_output.flatten(1).mean(dim=1)


def _as_pixels(images) -> torch.Tensor:
    pixels = getattr(images, "pixels", images)
    if not isinstance(pixels, torch.Tensor):
        pixels = torch.as_tensor(pixels)
    return pixels


def gradient_penalty(
    discriminator,
    real,
    fake: torch.Tensor,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean squared deviation of the critic's input-gradient norm from 1.

    Evaluated at per-sample uniform interpolates between real and fake
    images. Returned unscaled; the caller applies lambda_gp.
    """
    real = _as_pixels(real).detach()
    fake = fake.detach().to(real.dtype)
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    b = real.shape[0]
    eps = torch.rand(b, 1, 1, 1, generator=rng, dtype=real.dtype, device=real.device)
    interp = (eps * real + (1.0 - eps) * fake).requires_grad_(True)
    scores = _patch_scores(discriminator(interp))
    grads = torch.autograd.grad(
        outputs=scores.sum(), inputs=interp, create_graph=True
    )[0]
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def adversarial_loss_d(
    d_src_real: torch.Tensor,
    d_src_fake: torch.Tensor,
    gp: torch.Tensor | float,
    lambda_gp: float = 10.0,
) -> torch.Tensor:
    """Critic term minimized by the discriminator, penalty included."""
    gp = torch.as_tensor(gp, dtype=d_src_real.dtype) if not isinstance(gp, torch.Tensor) else gp
    return d_src_fake.mean() - d_src_real.mean() + lambda_gp * gp


def adversarial_loss_g(d_src_fake: torch.Tensor) -> torch.Tensor:
    """The generator maximizes the critic score on its fakes."""
    return -d_src_fake.mean()


def _cross_entropy(class_logits: torch.Tensor, domains: torch.Tensor) -> torch.Tensor:
    if domains.numel() == 0:
        raise ValueError("empty domain labels")
    k = class_logits.shape[1]
    if domains.min() < 0 or domains.max() >= k:
        raise ValueError(
            f"domain indices must lie in [0, {k}), got range "
            f"[{int(domains.min())}, {int(domains.max())}]"
        )
    return F.cross_entropy(class_logits, domains)


def classification_loss_real(
    class_logits: torch.Tensor, true_domains: torch.Tensor
) -> torch.Tensor:
    """Mean negative log-softmax at the true domain of each real image."""
    return _cross_entropy(class_logits, true_domains)


def classification_loss_fake(
    class_logits_of_fake: torch.Tensor, target_domains: torch.Tensor
) -> torch.Tensor:
    """Same computation against the target domain of each generated image."""
    return _cross_entropy(class_logits_of_fake, target_domains)


def reconstruction_loss(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements (cycle consistency)."""
    return (x - x_rec).abs().mean()


def total_g_loss(g_adv, g_cls_fake, g_rec, weights: LossWeights):
    return g_adv + weights.lambda_cls * g_cls_fake + weights.lambda_rec * g_rec


def total_d_loss(d_adv_with_gp, d_cls_real, weights: LossWeights):
    return d_adv_with_gp + weights.lambda_cls * d_cls_real
