import math

import numpy as np
import pytest
import torch

from conftest import micro_config
from racegan.data_pipeline import EpochBatcher, load_dataset, split_train_test
from racegan.trainer import (
    TEST_FRACTION,
    CheckpointState,
    TrainingDiverged,
    build_models,
    load_checkpoint,
    lr_schedule,
    models_from_state,
    train,
    train_step_d,
    train_step_g,
    translate,
)


def paper_schedule_config():
    return micro_config(max_iterations=400_000, lr_initial=1e-4)


class TestLrSchedule:
    def test_initial_value(self):
        assert lr_schedule(0, paper_schedule_config()) == 1e-4

    def test_midpoint(self):
        assert lr_schedule(200_000, paper_schedule_config()) == pytest.approx(5e-5)

    def test_endpoint(self):
        assert lr_schedule(400_000, paper_schedule_config()) == 0.0

    def test_held_constant_between_tenths(self):
        config = paper_schedule_config()
        for t in range(20, 30):
            assert lr_schedule(t, config) == lr_schedule(20, config)
        assert lr_schedule(30, config) < lr_schedule(20, config)

    def test_closed_form_at_every_multiple_of_ten(self):
        config = paper_schedule_config()
        for t in range(0, 400_001, 40_000):
            expected = 1e-4 * max(0.0, 1.0 - t / 400_000)
            assert lr_schedule(t, config) == pytest.approx(expected, abs=0.0)

    def test_monotone_non_increasing(self):
        config = micro_config(max_iterations=500)
        values = [lr_schedule(t, config) for t in range(0, 520)]
        assert all(a >= b for a, b in zip(values, values[1:]))


def _training_pieces(config, seed_offset=0):
    dataset = load_dataset(config.dataset, config.synthetic, config.seed)
    train_set, _ = split_train_test(dataset, TEST_FRACTION, config.seed)
    models = build_models(config)
    opt_g = torch.optim.Adam(
        list(models.generator.parameters()) + list(models.style_extractor.parameters()),
        lr=config.lr_initial,
        betas=(config.adam_beta1, config.adam_beta2),
    )
    opt_d = torch.optim.Adam(
        models.discriminator.parameters(),
        lr=config.lr_initial,
        betas=(config.adam_beta1, config.adam_beta2),
    )
    batcher = EpochBatcher(train_set, config.batch_size, seed=config.seed)
    rng = torch.Generator()
    rng.manual_seed(config.seed + seed_offset)
    return models, opt_g, opt_d, batcher, rng


def _clone_state(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def _states_equal(a, b):
    return set(a) == set(b) and all(torch.equal(a[k], b[k]) for k in a)


class TestTrainSteps:
    def test_d_step_touches_only_discriminator(self):
        config = micro_config()
        models, _, opt_d, batcher, rng = _training_pieces(config)
        g_before = _clone_state(models.generator)
        e_before = _clone_state(models.style_extractor)
        d_before = _clone_state(models.discriminator)
        train_step_d(batcher.next_batch(), models, opt_d, config, rng)
        assert _states_equal(g_before, models.generator.state_dict())
        assert _states_equal(e_before, models.style_extractor.state_dict())
        assert not _states_equal(d_before, models.discriminator.state_dict())

    def test_g_step_touches_generator_and_extractor_not_discriminator(self):
        config = micro_config()
        models, opt_g, _, batcher, rng = _training_pieces(config)
        g_before = _clone_state(models.generator)
        e_before = _clone_state(models.style_extractor)
        d_before = _clone_state(models.discriminator)
        train_step_g(batcher.next_batch(), models, opt_g, config, rng)
        assert _states_equal(d_before, models.discriminator.state_dict())
        assert not _states_equal(g_before, models.generator.state_dict())
        assert not _states_equal(e_before, models.style_extractor.state_dict())

    def test_steps_deterministic_across_fresh_runs(self):
        results = []
        for _ in range(2):
            config = micro_config()
            models, opt_g, opt_d, batcher, rng = _training_pieces(config)
            d = train_step_d(batcher.next_batch(), models, opt_d, config, rng)
            g = train_step_g(batcher.next_batch(), models, opt_g, config, rng)
            results.append((d, g))
        assert results[0] == results[1]

    def test_zero_discriminator_and_no_penalty_gives_ln_k(self):
        # with lambda_gp = 0 and D identically zero, only the classification
        # term remains, and uniform logits score ln K
        config = micro_config(weights={"lambda_gp": 0.0})
        models, _, opt_d, batcher, rng = _training_pieces(config)
        with torch.no_grad():
            for p in models.discriminator.parameters():
                p.zero_()
        partials = train_step_d(batcher.next_batch(), models, opt_d, config, rng)
        assert partials["d_adv"] == 0.0
        assert abs(partials["d_total"] - math.log(3)) < 1e-6

    def test_divergence_aborts_with_diagnostics(self):
        config = micro_config()
        models, _, opt_d, batcher, rng = _training_pieces(config)
        with torch.no_grad():
            models.discriminator.src_head.bias.fill_(float("inf"))
        with pytest.raises(TrainingDiverged) as excinfo:
            train_step_d(batcher.next_batch(), models, opt_d, config, rng)
        assert "d_adv" in excinfo.value.partials


class TestTrainLoop:
    def test_zero_iterations_returns_initial_state(self, tmp_path):
        config = micro_config(max_iterations=0)
        final, metrics = train(config, tmp_path)
        assert final.iteration == 0
        assert metrics.read_text().strip().splitlines() == [
            "iteration,d_adv,d_gp,d_cls_real,d_total,g_adv,g_cls_fake,g_rec,g_total,lr"
        ]
        fresh = build_models(config)
        assert _states_equal(final.model_states["generator"], fresh.generator.state_dict())

    def test_fixed_seed_bit_identical_metrics(self, tmp_path):
        config = micro_config(max_iterations=8)
        train(config, tmp_path / "a")
        train(config, tmp_path / "b")
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b

    def test_metrics_lr_column_follows_schedule(self, tmp_path):
        config = micro_config(max_iterations=25, checkpoint_every=100)
        _, metrics = train(config, tmp_path)
        rows = metrics.read_text().strip().splitlines()[1:]
        assert len(rows) == 25
        for row in rows:
            fields = row.split(",")
            iteration, lr = int(fields[0]), float(fields[9])
            assert lr == lr_schedule(iteration - 1, config)

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        config = micro_config(max_iterations=14, checkpoint_every=10)
        straight, _ = train(config, tmp_path / "straight")
        resumed, _ = train(
            config,
            tmp_path / "resumed",
            resume=tmp_path / "straight" / "checkpoints" / "0000010.ckpt",
        )
        for model in straight.model_states:
            assert _states_equal(
                straight.model_states[model], resumed.model_states[model]
            )

    def test_checkpoint_save_load_roundtrip(self, tmp_path):
        config = micro_config(max_iterations=6, checkpoint_every=3)
        final, _ = train(config, tmp_path)
        path = tmp_path / "checkpoints" / "final.ckpt"
        loaded = load_checkpoint(path)
        assert loaded.iteration == 6
        assert loaded.config == config
        for model in final.model_states:
            assert _states_equal(final.model_states[model], loaded.model_states[model])

    def test_checkpoint_rejects_foreign_files(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        torch.save({"surprise": 1}, path)
        with pytest.raises(ValueError, match="not a recognized checkpoint"):
            load_checkpoint(path)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "missing.ckpt")


class TestTranslate:
    def test_fixed_z_is_deterministic(self, micro_checkpoint):
        state = micro_checkpoint["state"]
        dataset = load_dataset(state.config.dataset, state.config.synthetic, state.config.seed)
        image = dataset.images[0]
        z = torch.zeros(1, state.config.style_extractor.latent_length)
        a = translate(image, 1, state, z=z)
        b = translate(image, 1, state, z=z)
        assert np.array_equal(a, b)
        assert a.shape == (8, 8, 3) and a.dtype == np.uint8

    def test_seeded_latent_is_deterministic(self, micro_checkpoint):
        state = micro_checkpoint["state"]
        dataset = load_dataset(state.config.dataset, state.config.synthetic, state.config.seed)
        image = dataset.images[0]
        a = translate(image, "b", state, seed=7)
        b = translate(image, "b", state, seed=7)
        assert np.array_equal(a, b)

    def test_invalid_domain_rejected(self, micro_checkpoint):
        state = micro_checkpoint["state"]
        image = np.zeros((3, 8, 8), dtype=np.float32)
        with pytest.raises(ValueError, match="out of range"):
            translate(image, 5, state)
        with pytest.raises(ValueError, match="unknown domain"):
            translate(image, "zebra", state)

    def test_checkpoint_file_is_selfdescribing(self, micro_checkpoint):
        models = models_from_state(CheckpointState.load(micro_checkpoint["checkpoint"]))
        assert models.generator.spec.image_size == 8
        assert models.discriminator.spec.num_domains == 3
