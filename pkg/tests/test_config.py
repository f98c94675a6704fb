"""Тесты конфигурации и проверки порядка стадий."""
import json
from pathlib import Path

import pytest

from src.config import (
    RUN_LOG_FILENAME, SEED_ENV_VAR, RunConfig, apply_overrides, load_config,
    read_run_log, seed_source, write_run_log
)
from src.exceptions import AudioFileError, ConfigError, StageDependencyError, UsageError
from src.validators import StageValidator, validate_reference


class TestRunConfig:
    """Тесты значений по умолчанию и вычисляемых полей."""

    def test_defaults(self):
        config = RunConfig()
        assert config.audio.sample_rate == 16000
        assert config.audio.n_mels == 64
        assert config.diffusion.train_timesteps == 1000
        assert config.diffusion.sample_steps == 100
        assert config.clip_samples == 16000

    def test_mel_frames_divisible_by_four(self):
        config = RunConfig()
        assert config.mel_frames == 100
        assert apply_overrides(config, {"audio.clip_seconds": 0.5}).mel_frames == 48

    def test_fingerprint_is_stable(self):
        assert RunConfig().fingerprint() == RunConfig().fingerprint()
        changed = apply_overrides(RunConfig(), {"vae.beta": 0.5})
        assert changed.fingerprint("vae") != RunConfig().fingerprint("vae")
        assert changed.fingerprint("unet") == RunConfig().fingerprint("unet")

    def test_validate_rejects_betas(self):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), {"diffusion.beta_min": 0.5})

    def test_validate_rejects_cfg_mode(self):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), {"diffusion.cfg_mode": "sequential"})


class TestOverrides:
    """Тесты переопределений и загрузки из файла."""

    def test_nested_override(self):
        config = apply_overrides(RunConfig(), {"training.vae_steps": "10"})
        assert config.training.vae_steps == 10

    def test_list_from_comma_string(self):
        config = apply_overrides(RunConfig(), {"unet.channels": "8,16"})
        assert config.unet.channels == (8, 16)

    def test_bool_from_string(self):
        config = apply_overrides(RunConfig(), {"eval.vocode": "true"})
        assert config.eval.vocode is True

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), {"training.epochs": 3})

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), {"optimizer.lr": 3})

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), {"training.vae_steps": "many"})

    def test_precedence(self, tmp_path: Path, monkeypatch):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed": 5, "training": {"lr": 0.01}}))
        monkeypatch.setenv(SEED_ENV_VAR, "3")
        config = load_config(path, {"training.lr": 0.02})
        assert config.seed == 5
        assert config.training.lr == 0.02

    def test_env_seed(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, "42")
        assert load_config().seed == 42

    def test_env_seed_not_integer(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, "abc")
        with pytest.raises(ConfigError):
            load_config()

    def test_missing_file(self, tmp_path: Path):
        with pytest.raises(AudioFileError):
            load_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path: Path):
        path = tmp_path / "config.json"
        path.write_text("{seed: 1")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_run_log_reproduces_config(self, tmp_path: Path, tiny_config: RunConfig,
                                       monkeypatch):
        monkeypatch.delenv(SEED_ENV_VAR, raising=False)
        path = write_run_log(tiny_config, tmp_path)
        assert path.name == RUN_LOG_FILENAME
        assert load_config(path).fingerprint() == tiny_config.fingerprint()

    def test_run_log_records_command(self, tmp_path: Path, tiny_config: RunConfig):
        path = write_run_log(tiny_config, tmp_path, "train",
                             {"stage": "vae", "splits": ("train",)}, "env")
        payload = read_run_log(path)
        assert payload["command"] == "train"
        assert payload["args"] == {"stage": "vae", "splits": ["train"]}
        assert payload["seed"] == tiny_config.seed
        assert payload["seed_source"] == "env"

    def test_plain_config_is_not_run_log(self, tmp_path: Path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed": 5}))
        with pytest.raises(ConfigError):
            read_run_log(path)

    def test_seed_source(self, tmp_path: Path, monkeypatch):
        monkeypatch.delenv(SEED_ENV_VAR, raising=False)
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed": 5}))
        assert seed_source() == "default"
        assert seed_source(path) == "config"
        assert seed_source(path, {"seed": 1}) == "flag"
        monkeypatch.setenv(SEED_ENV_VAR, "3")
        assert seed_source() == "env"
        assert seed_source(path) == "config"


class TestStageValidator:
    """Тесты порядка стадий."""

    def test_available_stages(self):
        assert StageValidator.is_valid_stage("ldm")
        assert not StageValidator.is_valid_stage("transfer")
        assert not StageValidator.is_valid_stage("decoder")

    def test_ldm_requires_vae_and_scene(self, bundle_dir: Path):
        with pytest.raises(StageDependencyError) as exc_info:
            StageValidator(bundle_dir).require("ldm")
        assert exc_info.value.missing == ["vae", "scene"]
        assert exc_info.value.category == "stage-order"

    def test_independent_stages(self, bundle_dir: Path):
        for stage in ("vae", "scene", "probes"):
            StageValidator(bundle_dir).require(stage)

    def test_reference_exactly_one(self):
        validate_reference("ref.wav", None)
        validate_reference(None, "A male speaks in a hall")
        with pytest.raises(UsageError):
            validate_reference(None, None)
        with pytest.raises(UsageError):
            validate_reference("ref.wav", "A male speaks in a hall")
