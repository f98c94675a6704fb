"""Тесты стадий обучения и журнала обучения."""
import json
import math
from pathlib import Path

import numpy as np
import pytest

from src.bundle import BUNDLE_MANIFEST, component_dir, load_component, stage_completed
from src.config import RunConfig
from src.dataset import MANIFEST_FILENAMES, TRAIN_SPLIT, load_mel_arrays, read_manifest
from src.exceptions import InputError, NumericalError, StageDependencyError, UsageError
from src.scene_encoder import SceneEncoder
from src.train_log import TRAIN_LOG_FILENAME, TrainingLog
from src.training import (
    build_ldm_trainer, measure_latent_scale, retrieval_batch, train_stage
)
from src.vae import SpectrogramVAE


@pytest.fixture
def ldm_batch(tiny_dataset: Path, session_config: RunConfig):
    rows = read_manifest(tiny_dataset / MANIFEST_FILENAMES[TRAIN_SPLIT])
    return load_mel_arrays(rows[:2], tiny_dataset, session_config)


@pytest.fixture
def trainer(session_config: RunConfig, ldm_batch):
    rng = np.random.default_rng(1)
    vae = SpectrogramVAE(session_config.vae, 16, rng)
    scene_encoder = SceneEncoder(session_config.scene, 16, rng)
    scale = measure_latent_scale(vae, ldm_batch.target)
    return build_ldm_trainer(session_config, vae, scene_encoder, scale, rng)


class TestTrainingLog:
    """Тесты журнала потерь."""

    def test_record_cadence(self):
        log = TrainingLog("vae", log_every=3)
        for step in range(1, 8):
            log.record(step, float(step), 7)
        assert [e["step"] for e in log.entries] == [1, 3, 6, 7]
        assert log.entries[1]["smoothed_loss"] == pytest.approx(2.5)
        assert log.first_loss == 1.0 and log.last_loss == 7.0

    def test_log_every_is_capped(self):
        assert TrainingLog("ldm", 1000).log_every == 100

    def test_divergence(self):
        with pytest.raises(NumericalError):
            TrainingLog("ldm").record(4, math.nan, 10)

    def test_write(self, tmp_path: Path):
        log = TrainingLog("scene", 1)
        log.record(1, 0.5, 1)
        path = log.write(tmp_path, {"holdout": 1.0})
        payload = json.loads(path.read_text())
        assert path.name == TRAIN_LOG_FILENAME
        assert payload["stage"] == "scene"
        assert payload["summary"] == {"holdout": 1.0}


class TestStages:
    """Тесты запуска стадий по имени и порядка стадий."""

    def test_all_stages_completed(self, trained_bundle: Path):
        for stage in ("vae", "scene", "probes", "ldm"):
            assert stage_completed(trained_bundle, stage)

    def test_train_logs_written(self, trained_bundle: Path):
        for component in ("vae", "scene", "speaker_probe", "content_probe", "unet"):
            payload = json.loads(
                (component_dir(trained_bundle, component) / TRAIN_LOG_FILENAME).read_text()
            )
            assert [e["step"] for e in payload["entries"]] == [1, 2]

    def test_summaries(self, trained_bundle: Path):
        def summary(component):
            path = component_dir(trained_bundle, component) / TRAIN_LOG_FILENAME
            return json.loads(path.read_text())["summary"]

        assert summary("vae")["holdout_mae"] >= 0
        assert 0 <= summary("scene")["holdout_retrieval_at_1"] <= 1
        assert 0 <= summary("speaker_probe")["holdout_accuracy"] <= 1

    def test_bundle_manifest(self, trained_bundle: Path):
        manifest = json.loads((trained_bundle / BUNDLE_MANIFEST).read_text())
        assert manifest["latent_scale"] > 0
        assert manifest["schedule"]["train_timesteps"] == 50
        vae = load_component(trained_bundle, "vae", SpectrogramVAE)
        assert manifest["frozen_hashes"]["vae"] == vae.parameter_hash()

    def test_ldm_needs_predecessors(self, tiny_dataset, session_config, bundle_dir):
        with pytest.raises(StageDependencyError) as exc_info:
            train_stage("ldm", session_config, tiny_dataset, bundle_dir)
        assert exc_info.value.missing == ["vae", "scene"]

    def test_unknown_stage(self, tiny_dataset, session_config, bundle_dir):
        with pytest.raises(UsageError):
            train_stage("decoder", session_config, tiny_dataset, bundle_dir)

    def test_stage_result(self, tiny_dataset, session_config, bundle_dir):
        result = train_stage("vae", session_config, tiny_dataset, bundle_dir)
        assert result.stage == "vae"
        assert result.directory == component_dir(bundle_dir, "vae")
        assert result.first_loss is not None and math.isfinite(result.last_loss)

    def test_stage_is_deterministic(self, tiny_dataset, session_config, tmp_path):
        first = train_stage("vae", session_config, tiny_dataset, tmp_path / "a")
        second = train_stage("vae", session_config, tiny_dataset, tmp_path / "b")
        assert first.last_loss == second.last_loss
        assert load_component(tmp_path / "a", "vae", SpectrogramVAE).parameter_hash() == \
            load_component(tmp_path / "b", "vae", SpectrogramVAE).parameter_hash()

    def test_retrieval_batch_prefers_distinct_captions(self, rng):
        captions = ["a", "a", "b", "a", "c"]
        chosen = retrieval_batch(captions, 3, rng)
        assert sorted(captions[i] for i in chosen) == ["a", "b", "c"]


class TestLatentDiffusionTrainer:
    """Тесты шага обучения диффузии."""

    def test_frozen_parts_do_not_change(self, trainer, ldm_batch, rng):
        before = trainer.frozen_hashes()
        unet_before = trainer.unet.parameter_hash()
        content_before = trainer.content_encoder.parameter_hash()
        for _ in range(2):
            loss = trainer.training_step(ldm_batch.reference, ldm_batch.content,
                                         ldm_batch.target, rng)
            assert math.isfinite(loss)
        assert trainer.frozen_hashes() == before
        assert trainer.unet.parameter_hash() != unet_before
        assert trainer.content_encoder.parameter_hash() != content_before

    def test_latent_targets_are_scaled(self, trainer, ldm_batch, rng):
        x0 = trainer.diffusion_targets(ldm_batch.target, rng)
        assert x0.shape == (2, 2, 4, 12)
        assert x0.std() == pytest.approx(1.0, rel=1e-3)

    def test_empty_batch(self, trainer, rng):
        empty = np.zeros((0, 16, 48), dtype=np.float32)
        with pytest.raises(UsageError):
            trainer.training_step(empty, empty, empty, rng)

    def test_batch_parts_must_match(self, trainer, ldm_batch, rng):
        with pytest.raises(InputError):
            trainer.training_step(ldm_batch.reference[:1], ldm_batch.content,
                                  ldm_batch.target, rng)

    @pytest.mark.slow
    def test_loss_decreases(self, trainer, ldm_batch):
        rng = np.random.default_rng(3)
        losses = [
            trainer.training_step(ldm_batch.reference, ldm_batch.content,
                                  ldm_batch.target, rng)
            for _ in range(300)
        ]
        assert np.mean(losses[-50:]) < np.mean(losses[:50])

    @pytest.mark.slow
    def test_overfits_fixed_batch(self, default_config: RunConfig, default_dataset: Path):
        rows = read_manifest(default_dataset / MANIFEST_FILENAMES[TRAIN_SPLIT])
        batch = load_mel_arrays(rows[:4], default_dataset, default_config)
        rng = np.random.default_rng(1)
        n_mels = default_config.audio.n_mels
        vae = SpectrogramVAE(default_config.vae, n_mels, rng)
        scale = measure_latent_scale(vae, batch.target)
        trainer = build_ldm_trainer(default_config, vae,
                                    SceneEncoder(default_config.scene, n_mels, rng),
                                    scale, rng)
        losses = []
        for _ in range(2000):
            # одно и то же зерно: одинаковые шаг, шум и отбрасывание условий
            losses.append(trainer.training_step(batch.reference, batch.content,
                                                batch.target, np.random.default_rng(5)))
            if losses[-1] < 0.05:
                break
        assert losses[-1] < 0.05


@pytest.mark.slow
class TestDefaultStages:
    """Качество стадий, обученных с конфигурацией по умолчанию."""

    def test_vae_reconstruction(self, default_stages):
        assert default_stages["vae"].summary["holdout_mae"] < 0.25

    def test_scene_retrieval(self, default_stages):
        summary = default_stages["scene"].summary
        assert summary["retrieval_batch"] == 16
        assert summary["holdout_retrieval_at_1"] >= 0.6

    def test_probe_accuracy(self, default_stages):
        summary = default_stages["probes"].summary
        assert summary["speaker_holdout_accuracy"] >= 0.95
        assert summary["content_holdout_accuracy"] >= 0.95

    def test_diffusion_loss_falls(self, default_stages):
        result = default_stages["ldm"]
        assert result.last_loss < result.first_loss
