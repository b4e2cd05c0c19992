import math

import numpy as np
import pytest
import torch

from racegan.losses import (
    LossReport,
    LossWeights,
    adversarial_loss_d,
    adversarial_loss_g,
    classification_loss_fake,
    classification_loss_real,
    gradient_penalty,
    reconstruction_loss,
    total_d_loss,
    total_g_loss,
)
from racegan.models import Discriminator, DiscriminatorSpec


class UnitGradientCritic:
    """Critic whose per-sample score has input gradient of exactly norm 1.

    The patch map is constant per sample with value
    sum(channel 0) / sqrt(H*W), so the gradient has H*W entries of
    1/sqrt(H*W) each.
    """

    def __init__(self, patch=2):
        self.patch = patch

    def __call__(self, x):
        h, w = x.shape[2], x.shape[3]
        score = x[:, 0].sum(dim=(1, 2)) / math.sqrt(h * w)
        return score[:, None, None, None].expand(-1, 1, self.patch, self.patch)


class ConstantCritic:
    def __call__(self, x):
        return torch.ones(x.shape[0], 1, 2, 2) * 3.0 + x.sum() * 0.0


def random_tiny_discriminator(seed):
    torch.manual_seed(seed)
    disc = Discriminator(
        DiscriminatorSpec(image_size=8, num_domains=2, base_width=4, num_hidden_layers=1)
    ).double()
    # scale weights up so gradients are far from zero
    with torch.no_grad():
        for p in disc.parameters():
            p.mul_(20.0).add_(torch.randn_like(p) * 0.3)
    return disc


def numeric_gradient_penalty(critic, real, fake, seed, h=1e-6):
    """Independent oracle: central finite differences over the interpolates."""
    rng = torch.Generator()
    rng.manual_seed(seed)
    eps = torch.rand(real.shape[0], 1, 1, 1, generator=rng, dtype=real.dtype)
    xhat = eps * real + (1 - eps) * fake

    def per_sample_scores(x):
        with torch.no_grad():
            out = critic(x)
            if isinstance(out, tuple):
                out = out[0]
            return out.flatten(1).mean(dim=1)

    b = xhat.shape[0]
    per_image = xhat[0].numel()
    grads = torch.zeros_like(xhat)
    for sample in range(b):
        base = xhat[sample]
        plus = base.repeat(per_image, 1, 1, 1).reshape(per_image, -1)
        minus = plus.clone()
        idx = torch.arange(per_image)
        plus[idx, idx] += h
        minus[idx, idx] -= h
        shape = (per_image, *base.shape)
        diff = per_sample_scores(plus.reshape(shape)) - per_sample_scores(minus.reshape(shape))
        grads[sample] = (diff / (2 * h)).reshape(base.shape)
    norms = grads.flatten(1).norm(2, dim=1)
    return float(((norms - 1.0) ** 2).mean())


class TestGradientPenalty:
    def test_unit_gradient_construction_gives_zero(self):
        real = torch.rand(4, 3, 8, 8, dtype=torch.float64)
        fake = torch.rand(4, 3, 8, 8, dtype=torch.float64)
        rng = torch.Generator()
        rng.manual_seed(0)
        gp = gradient_penalty(UnitGradientCritic(), real, fake, rng)
        assert float(gp) < 1e-10

    def test_constant_critic_gives_exactly_one(self):
        real = torch.rand(4, 3, 8, 8)
        fake = torch.rand(4, 3, 8, 8)
        rng = torch.Generator()
        rng.manual_seed(0)
        gp = gradient_penalty(ConstantCritic(), real, fake, rng)
        assert float(gp) == 1.0

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_finite_differences(self, seed):
        disc = random_tiny_discriminator(seed)
        gen = torch.Generator()
        gen.manual_seed(seed + 1000)
        real = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
        fake = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
        rng = torch.Generator()
        rng.manual_seed(seed)
        analytic = float(gradient_penalty(disc, real, fake, rng).detach())
        numeric = numeric_gradient_penalty(disc, real, fake, seed)
        assert abs(analytic - numeric) / max(abs(numeric), 1e-12) < 1e-3

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            gradient_penalty(ConstantCritic(), torch.rand(2, 3, 8, 8), torch.rand(2, 3, 4, 4))

    def test_non_differentiable_critic_rejected(self):
        def detached_critic(x):
            return x.detach().sum()[None, None, None, None].expand(x.shape[0], 1, 2, 2)

        with pytest.raises(RuntimeError):
            gradient_penalty(detached_critic, torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8))


class TestAdversarialLosses:
    def test_d_separated_scores(self):
        real = torch.ones(4, 1, 2, 2)
        fake = torch.zeros(4, 1, 2, 2)
        assert float(adversarial_loss_d(real, fake, gp=0.0)) == -1.0

    def test_d_symmetric_scores(self):
        scores = torch.randn(4, 1, 2, 2)
        assert float(adversarial_loss_d(scores, scores, gp=0.0)) == 0.0

    def test_d_penalty_scaling(self):
        zeros = torch.zeros(4, 1, 2, 2)
        assert float(adversarial_loss_d(zeros, zeros, gp=0.25, lambda_gp=10.0)) == 2.5

    def test_g_constant_scores(self):
        assert float(adversarial_loss_g(torch.full((3, 1, 2, 2), 2.0))) == -2.0
        assert float(adversarial_loss_g(torch.zeros(3, 1, 2, 2))) == 0.0

    def test_g_mean_reduction(self):
        scores = torch.tensor([[1.0], [3.0]])
        assert float(adversarial_loss_g(scores)) == -2.0

    def test_sign_sanity(self):
        # improving real/fake separation strictly decreases D's loss
        fake = torch.zeros(4, 1, 2, 2)
        worse = adversarial_loss_d(torch.full((4, 1, 2, 2), 0.5), fake, gp=0.0)
        better = adversarial_loss_d(torch.full((4, 1, 2, 2), 1.5), fake, gp=0.0)
        assert float(better) < float(worse)
        # increasing the critic score on fakes strictly decreases G's loss
        assert float(adversarial_loss_g(torch.full((2, 1), 2.0))) < float(
            adversarial_loss_g(torch.full((2, 1), 1.0))
        )


class TestClassificationLosses:
    def test_uniform_logits(self):
        logits = torch.zeros(5, 3)
        labels = torch.tensor([0, 1, 2, 1, 0])
        loss = classification_loss_real(logits, labels)
        assert abs(float(loss) - math.log(3)) < 1e-6

    def test_confident_correct_logits(self):
        logits = torch.full((2, 3), 0.0)
        logits[0, 1] = 100.0
        logits[1, 1] = 100.0
        labels = torch.tensor([1, 1])
        assert float(classification_loss_real(logits, labels)) < 1e-6

    def test_hand_computed_value(self):
        # -ln(e^0 / (e^1 + e^0 + e^0)) = ln(e + 2)
        logits = torch.tensor([[1.0, 0.0, 0.0]])
        labels = torch.tensor([1])
        expected = math.log(math.e + 2.0)
        assert abs(float(classification_loss_real(logits, labels)) - expected) < 1e-6
        assert abs(expected - 1.5514) < 1e-4

    def test_fake_variant_same_computation(self):
        logits = torch.randn(6, 4)
        labels = torch.randint(0, 4, (6,))
        real = classification_loss_real(logits, labels)
        fake = classification_loss_fake(logits, labels)
        assert torch.equal(real, fake)

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            classification_loss_real(torch.zeros(2, 3), torch.tensor([0, 3]))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            logits = torch.tensor(rng.normal(size=(8, 4)), dtype=torch.float64)
            labels = torch.tensor(rng.integers(0, 4, size=8))
            perm = torch.tensor(rng.permutation(4))
            inverse = torch.empty_like(perm)
            inverse[perm] = torch.arange(4)
            base = classification_loss_real(logits, labels)
            permuted = classification_loss_real(logits[:, perm], inverse[labels])
            assert abs(float(base) - float(permuted)) < 1e-12


class TestReconstructionLoss:
    def test_identity(self):
        x = torch.rand(2, 3, 4, 4)
        assert float(reconstruction_loss(x, x)) == 0.0

    def test_constant_offset(self):
        x = torch.zeros(2, 3, 4, 4)
        assert float(reconstruction_loss(x, x + 0.5)) == 0.5

    def test_alternating_signs(self):
        x = torch.zeros(1, 3, 4, 4)
        rec = torch.ones(1, 3, 4, 4)
        rec[:, :, ::2] = -1.0
        assert float(reconstruction_loss(x, rec)) == 1.0

    def test_metric_properties(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a, b, c = (
                torch.tensor(rng.normal(size=(2, 3, 4, 4)), dtype=torch.float64)
                for _ in range(3)
            )
            ab = float(reconstruction_loss(a, b))
            ba = float(reconstruction_loss(b, a))
            assert ab == ba
            assert ab > 0 or torch.equal(a, b)
            ac = float(reconstruction_loss(a, c))
            cb = float(reconstruction_loss(c, b))
            assert ab <= ac + cb + 1e-12


class TestTotals:
    def test_g_zero(self):
        weights = LossWeights()
        assert total_g_loss(0.0, 0.0, 0.0, weights) == 0.0

    def test_g_weighted_sum(self):
        weights = LossWeights(lambda_cls=1.0, lambda_rec=10.0)
        value = total_g_loss(-1.0, 1.0986, 0.1, weights)
        assert abs(value - 1.0986) < 1e-9

    def test_g_rec_ablation(self):
        weights = LossWeights(lambda_rec=0.0)
        assert total_g_loss(0.5, 0.25, 99.0, weights) == 0.75

    def test_d_zero(self):
        assert total_d_loss(0.0, 0.0, LossWeights()) == 0.0

    def test_d_weighted_sum(self):
        value = total_d_loss(-1.0, 1.0986, LossWeights(lambda_cls=1.0))
        assert abs(value - 0.0986) < 1e-9

    def test_d_cls_ablation(self):
        assert total_d_loss(-2.0, 123.0, LossWeights(lambda_cls=0.0)) == -2.0

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_gp=-1.0)


class TestBatchDuplicationInvariance:
    def test_mean_reduced_losses_unchanged(self):
        torch.manual_seed(0)
        real = torch.randn(4, 1, 2, 2, dtype=torch.float64)
        fake = torch.randn(4, 1, 2, 2, dtype=torch.float64)
        logits = torch.randn(4, 3, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 1])
        x = torch.randn(4, 3, 4, 4, dtype=torch.float64)
        rec = torch.randn(4, 3, 4, 4, dtype=torch.float64)

        def double(t):
            return torch.cat([t, t])

        assert abs(
            float(adversarial_loss_d(real, fake, 0.0))
            - float(adversarial_loss_d(double(real), double(fake), 0.0))
        ) < 1e-12
        assert abs(
            float(adversarial_loss_g(fake)) - float(adversarial_loss_g(double(fake)))
        ) < 1e-12
        assert abs(
            float(classification_loss_real(logits, labels))
            - float(classification_loss_real(double(logits), double(labels)))
        ) < 1e-12
        assert abs(
            float(reconstruction_loss(x, rec))
            - float(reconstruction_loss(double(x), double(rec)))
        ) < 1e-12


class TestLossReport:
    def _report(self, **overrides):
        fields = dict(
            iteration=1,
            d_adv=-1.0,
            d_gp=0.1,
            d_cls_real=1.0986,
            d_total=0.0986,
            g_adv=-0.5,
            g_cls_fake=1.0986,
            g_rec=0.2,
            g_total=2.5986,
            lr=1e-4,
        )
        fields.update(overrides)
        return LossReport(**fields)

    def test_valid_composition_passes(self):
        self._report().validate(LossWeights())

    def test_broken_d_composition_rejected(self):
        with pytest.raises(ValueError, match="d_total"):
            self._report(d_total=1.0).validate(LossWeights())

    def test_broken_g_composition_rejected(self):
        with pytest.raises(ValueError, match="g_total"):
            self._report(g_total=0.0).validate(LossWeights())

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            self._report(g_rec=float("nan")).validate(LossWeights())

    def test_csv_row_roundtrip(self):
        report = self._report()
        row = report.csv_row().split(",")
        assert row[0] == "1"
        assert float(row[7]) == report.g_rec
        assert float(row[9]) == report.lr
