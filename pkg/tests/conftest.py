"""Общие фикстуры для всех тестов."""
from pathlib import Path
from typing import Dict

import numpy as np
import pytest

from src.config import RunConfig, apply_overrides
from src.dataset import build_dataset
from src.training import train_stage
from src.train_log import set_quiet

# Минимальные размеры, при которых собираются все модели
TINY_OVERRIDES: Dict[str, object] = {
    "seed": 7,
    "audio.clip_seconds": 0.5,
    "audio.n_mels": 16,
    "audio.griffin_lim_iters": 2,
    "data.n_speakers": 2,
    "data.n_contents": 2,
    "data.items_per_cell": 2,
    "data.eval_items_per_cell": 2,
    "data.use_multiprocessing": False,
    "data.holdout_fraction": 0.25,
    "scene.embed_dim": 8,
    "scene.audio_channels": [4, 8],
    "scene.text_width": 8,
    "scene.text_heads": 2,
    "scene.text_layers": 1,
    "scene.ffn_dim": 16,
    "vae.latent_channels": 2,
    "vae.hidden_channels": [4, 8],
    "content.width": 8,
    "content.heads": 2,
    "content.filter_layers": 1,
    "content.embed_layers": 1,
    "content.ffn_dim": 16,
    "unet.channels": [8, 16],
    "unet.blocks_per_level": 1,
    "unet.attn_width": 16,
    "unet.attn_heads": 2,
    "unet.time_embed_dim": 16,
    "probes.channels": [4, 8],
    "probes.embed_dim": 8,
    "probes.time_bins": 3,
    "probes.renderings_per_pair": 2,
    "diffusion.train_timesteps": 50,
    "diffusion.sample_steps": 5,
    "training.vae_steps": 2,
    "training.scene_steps": 2,
    "training.probe_steps": 2,
    "training.ldm_steps": 2,
    "training.batch_size": 4,
    "training.ldm_batch_size": 2,
    "training.log_every": 1,
}


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False,
        help="Запускать медленные тесты (обучение до сходимости)"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="нужен --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session", autouse=True)
def quiet_progress():
    """Индикаторы прогресса не должны попадать в вывод тестов."""
    set_quiet(True)
    yield
    set_quiet(False)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config(tmp_path: Path) -> RunConfig:
    """Крошечная конфигурация с путями во временном каталоге."""
    return apply_overrides(RunConfig(), {
        **TINY_OVERRIDES,
        "paths.data_dir": str(tmp_path / "data"),
        "paths.bundle_dir": str(tmp_path / "bundle"),
        "paths.output_dir": str(tmp_path / "out"),
    })


@pytest.fixture(scope="session")
def session_config() -> RunConfig:
    return apply_overrides(RunConfig(), TINY_OVERRIDES)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, session_config: RunConfig) -> Path:
    """Датасет крошечной конфигурации: 8 обучающих и 8 оценочных элементов."""
    data_dir = tmp_path_factory.mktemp("dataset")
    build_dataset(session_config, data_dir)
    return data_dir


@pytest.fixture(scope="session")
def trained_bundle(tiny_dataset: Path, session_config: RunConfig, tmp_path_factory) -> Path:
    """Набор, в котором каждая стадия обучена по два шага."""
    bundle = tmp_path_factory.mktemp("trained") / "bundle"
    for stage in ("vae", "scene", "probes", "ldm"):
        train_stage(stage, session_config, tiny_dataset, bundle)
    return bundle


@pytest.fixture
def bundle_dir(tmp_path: Path) -> Path:
    return tmp_path / "bundle"


@pytest.fixture(scope="session")
def default_config(tmp_path_factory) -> RunConfig:
    """Конфигурация по умолчанию с путями во временном каталоге."""
    root = tmp_path_factory.mktemp("default")
    return apply_overrides(RunConfig(), {
        "seed": 0,
        "paths.data_dir": str(root / "data"),
        "paths.bundle_dir": str(root / "bundle"),
        "paths.output_dir": str(root / "out"),
    })


@pytest.fixture(scope="session")
def default_dataset(default_config: RunConfig) -> Path:
    data_dir = Path(default_config.paths.data_dir)
    build_dataset(default_config, data_dir)
    return data_dir


@pytest.fixture(scope="session")
def default_stages(default_config: RunConfig, default_dataset: Path) -> Dict:
    """Все стадии, обученные с шагами по умолчанию (только для --runslow)."""
    bundle = Path(default_config.paths.bundle_dir)
    return {
        stage: train_stage(stage, default_config, default_dataset, bundle)
        for stage in ("vae", "scene", "probes", "ldm")
    }
