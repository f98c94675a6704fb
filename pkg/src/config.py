"""Конфигурация запуска: dataclass-дерево, JSON-файл, переопределения."""
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .exceptions import AudioFileError, ConfigError

SEED_ENV_VAR = "SCENE_TRANSFER_SEED"
RUN_LOG_FILENAME = "run_config.json"


@dataclass
class AudioConfig:
    """Параметры сигнала и признаков (16 кГц, 64 мел, шаг 10 мс, окно 64 мс)."""
    sample_rate: int = 16000
    clip_seconds: float = 1.0
    n_fft: int = 1024
    hop_length: int = 160
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    # нормировка лог-мела на входе сетей
    mel_mean: float = -6.0
    mel_std: float = 3.0
    griffin_lim_iters: int = 32


@dataclass
class DataConfig:
    """Сетка синтетического корпуса и состав сценариев."""
    n_speakers: int = 8
    n_contents: int = 10
    items_per_cell: int = 64
    eval_items_per_cell: int = 32
    snr_min_db: float = 4.0
    snr_max_db: float = 20.0
    t60_values: Tuple[float, ...] = (0.0, 0.15, 0.3, 0.6)
    holdout_fraction: float = 0.125
    mismatched_speaker: bool = False
    num_workers: int = 0
    use_multiprocessing: bool = True


@dataclass
class SceneEncoderConfig:
    embed_dim: int = 64
    audio_channels: Tuple[int, ...] = (16, 32, 64)
    text_width: int = 64
    text_heads: int = 4
    text_layers: int = 2
    ffn_dim: int = 128
    temperature: float = 0.1


@dataclass
class VAEConfig:
    latent_channels: int = 8
    hidden_channels: Tuple[int, ...] = (16, 32)
    beta: float = 1e-2


@dataclass
class ContentEncoderConfig:
    width: int = 256
    heads: int = 8
    filter_layers: int = 2
    embed_layers: int = 4
    ffn_dim: int = 512


@dataclass
class UNetConfig:
    channels: Tuple[int, ...] = (32, 64, 128)
    blocks_per_level: int = 2
    attn_width: int = 128
    attn_heads: int = 4
    time_embed_dim: int = 128


@dataclass
class ProbeConfig:
    channels: Tuple[int, ...] = (16, 32)
    embed_dim: int = 64
    time_bins: int = 5
    renderings_per_pair: int = 6


@dataclass
class DiffusionConfig:
    train_timesteps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    p_drop_scene: float = 0.1
    p_drop_content: float = 0.1
    sample_steps: int = 100
    w_ref: float = 1.0
    w_cont: float = 1.0
    cfg_mode: str = "composable"
    use_posterior_mean: bool = True


@dataclass
class TrainingConfig:
    vae_steps: int = 3000
    scene_steps: int = 3000
    probe_steps: int = 2000
    ldm_steps: int = 8000
    batch_size: int = 16
    ldm_batch_size: int = 8
    lr: float = 1e-3
    ldm_lr: float = 5e-4
    grad_clip: float = 1.0
    log_every: int = 50


@dataclass
class EvalConfig:
    vocode: bool = False
    modalities: Tuple[str, ...] = ("audio", "text")


@dataclass
class PathsConfig:
    data_dir: str = "data"
    bundle_dir: str = "bundle"
    output_dir: str = "out"


@dataclass
class RunConfig:
    """Полная конфигурация запуска; у каждого поля есть значение по умолчанию."""
    seed: int = 1234
    audio: AudioConfig = field(default_factory=AudioConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneEncoderConfig = field(default_factory=SceneEncoderConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    content: ContentEncoderConfig = field(default_factory=ContentEncoderConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    probes: ProbeConfig = field(default_factory=ProbeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def clip_samples(self) -> int:
        return int(round(self.audio.clip_seconds * self.audio.sample_rate))

    @property
    def mel_frames(self) -> int:
        """Число кадров лог-мела клипа после обрезки до кратного 4."""
        frames = self.clip_samples // self.audio.hop_length + 1
        return frames - frames % 4

    def to_dict(self) -> Dict[str, Any]:
        return _to_jsonable(dataclasses.asdict(self))

    def fingerprint(self, section: Optional[str] = None) -> str:
        """sha256 канонического JSON всей конфигурации или одной секции."""
        payload = self.to_dict() if section is None else self.to_dict()[section]
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def validate(self) -> "RunConfig":
        """Проверяет согласованность значений.

        Raises:
            ConfigError: При недопустимых значениях
        """
        if self.audio.clip_seconds <= 0:
            raise ConfigError("audio.clip_seconds must be positive")
        if self.mel_frames < 4:
            raise ConfigError("clip too short for a single latent frame")
        if not 0 < self.diffusion.beta_min < self.diffusion.beta_max < 1:
            raise ConfigError("diffusion betas must satisfy 0 < min < max < 1")
        if self.diffusion.cfg_mode not in ("composable", "cascaded"):
            raise ConfigError(
                f"Unknown diffusion.cfg_mode '{self.diffusion.cfg_mode}'"
            )
        if not self.data.snr_min_db <= self.data.snr_max_db:
            raise ConfigError("data.snr_min_db exceeds data.snr_max_db")
        for modality in self.eval.modalities:
            if modality not in ("audio", "text"):
                raise ConfigError(f"Unknown eval modality '{modality}'")
        return self


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    return value


def _build(cls: type, values: Mapping[str, Any], path: str) -> Any:
    """Собирает dataclass из словаря, отвергая неизвестные ключи."""
    if not isinstance(values, Mapping):
        raise ConfigError(f"Config section '{path or 'root'}' must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(
            f"Unknown config key(s) in '{path or 'root'}': {', '.join(unknown)}"
        )
    kwargs = {}
    for name, value in values.items():
        default = known[name].default_factory() \
            if known[name].default_factory is not dataclasses.MISSING \
            else known[name].default
        dotted = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, dotted)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _coerce(value, default, dotted)
    return cls(**kwargs)


def _coerce(value: Any, default: Any, dotted: str) -> Any:
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Config key '{dotted}': bad value {value!r}") from e
    return value


def apply_overrides(
    config: RunConfig,
    overrides: Mapping[str, Any]
) -> RunConfig:
    """Применяет переопределения вида {"training.vae_steps": 10}."""
    data = config.to_dict()
    for dotted, value in overrides.items():
        node = data
        keys = dotted.split(".")
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"Unknown config section in '{dotted}'")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"Unknown config key '{dotted}'")
        if isinstance(node[keys[-1]], list) and isinstance(value, str):
            value = [
                type(node[keys[-1]][0])(v) if node[keys[-1]] else v
                for v in value.split(",")
            ]
        node[keys[-1]] = value
    return _build(RunConfig, data, "").validate()


def _read_json_object(path: Path) -> Dict[str, Any]:
    try:
        loaded = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise AudioFileError(path, str(e)) from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config {path} is not valid JSON: {e}") from e
    if not isinstance(loaded, dict):
        raise ConfigError(f"Config {path} must be a JSON object")
    return loaded


def _is_run_log(payload: Mapping[str, Any]) -> bool:
    return "command" in payload and "config" in payload


def read_config_file(path: Path) -> Dict[str, Any]:
    """Читает JSON-конфигурацию; из лога запуска берется секция config."""
    loaded = _read_json_object(path)
    return loaded["config"] if _is_run_log(loaded) else loaded


def read_run_log(path: Path) -> Dict[str, Any]:
    """Читает лог запуска (команда, аргументы, источник зерна, конфигурация).

    Raises:
        ConfigError: Если файл не является логом запуска
    """
    payload = _read_json_object(path)
    if not _is_run_log(payload) or not payload.get("command"):
        raise ConfigError(f"{path} is not a run log (no command recorded)")
    if not isinstance(payload.get("args"), dict):
        raise ConfigError(f"{path} has no recorded command arguments")
    return payload


def load_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Загружает конфигурацию: значения по умолчанию <- env <- файл <- флаги.

    Args:
        path: JSON-файл конфигурации (или лог предыдущего запуска)
        overrides: Переопределения из командной строки

    Returns:
        RunConfig: Проверенная конфигурация

    Raises:
        AudioFileError: Если файл не читается
        ConfigError: Если содержимое некорректно
    """
    values: Dict[str, Any] = {}
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError as e:
            raise ConfigError(
                f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}"
            ) from e
    if path is not None:
        values.update(read_config_file(path))
    config = _build(RunConfig, values, "").validate()
    return apply_overrides(config, overrides or {})


def seed_source(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None
) -> str:
    """Откуда взято итоговое зерно: flag, config, env или default."""
    if "seed" in (overrides or {}):
        return "flag"
    if path is not None and "seed" in read_config_file(path):
        return "config"
    if os.environ.get(SEED_ENV_VAR) is not None:
        return "env"
    return "default"


def write_run_log(
    config: RunConfig,
    directory: Path,
    command: Optional[str] = None,
    args: Optional[Mapping[str, Any]] = None,
    source: str = "default"
) -> Path:
    """Записывает команду, ее аргументы и разрешенную конфигурацию.

    ``main.py replay <этот файл>`` повторяет команду; ``--config <этот
    файл>`` берет из него только конфигурацию.
    """
    directory = Path(directory)
    path = directory / RUN_LOG_FILENAME
    payload = {
        "command": command,
        "args": _to_jsonable(dict(args or {})),
        "seed": config.seed,
        "seed_source": source,
        "config": config.to_dict(),
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True),
                        encoding="utf-8")
    except OSError as e:
        raise AudioFileError(path, str(e)) from e
    return path
