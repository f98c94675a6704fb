"""Набор обученных моделей на диске и конвейер переноса сцены."""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Type, TypeVar, Union

import numpy as np

from .checkpoint import (
    has_checkpoint, load_checkpoint, load_component_config, save_checkpoint
)
from .config import AudioConfig, RunConfig
from .content_encoder import ContentEncoder, content_encode
from .diffusion import GuidanceWeights, NoiseSchedule, ddim_sample, make_schedule
from .dsp import MelSpectrogram, Waveform, griffin_lim, wav_to_logmel
from .exceptions import AudioFileError, InputError, UsageError
from .nn import Module
from .probes import Probe
from .scene_encoder import SceneEncoder, scene_encode_audio, scene_encode_text
from .unet import ConditionalUNet, guided_denoiser
from .vae import SpectrogramVAE, vae_decode

logger = logging.getLogger(__name__)

BUNDLE_MANIFEST = "bundle.json"
COMPONENT_DIRS = {
    "vae": "vae",
    "scene": "scene",
    "speaker_probe": "probes/speaker",
    "content_probe": "probes/content",
    "unet": "ldm/unet",
    "content_encoder": "ldm/content",
}
STAGE_COMPONENTS = {
    "vae": ("vae",),
    "scene": ("scene",),
    "probes": ("speaker_probe", "content_probe"),
    "ldm": ("unet", "content_encoder"),
}

M = TypeVar("M", bound=Module)


def component_dir(bundle_dir: Path, component: str) -> Path:
    return Path(bundle_dir) / COMPONENT_DIRS[component]


def save_component(bundle_dir: Path, component: str, module: Module) -> Path:
    """Сохраняет параметры и JSON-конфигурацию компонента."""
    return save_checkpoint(
        component_dir(bundle_dir, component),
        module.state_dict(),
        module.component_config(),
    )


def load_component(bundle_dir: Path, component: str, cls: Type[M]) -> M:
    """Восстанавливает компонент из каталога набора (в режиме eval)."""
    directory = component_dir(bundle_dir, component)
    module = cls.from_component_config(load_component_config(directory))
    module.load_state_dict(load_checkpoint(directory))
    return module.eval()


def stage_completed(bundle_dir: Path, stage: str) -> bool:
    """Есть ли чекпоинты всех компонентов стадии."""
    return all(
        has_checkpoint(component_dir(bundle_dir, c))
        for c in STAGE_COMPONENTS[stage]
    )


def read_bundle_manifest(bundle_dir: Path) -> Dict:
    path = Path(bundle_dir) / BUNDLE_MANIFEST
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        return {}
    except (OSError, json.JSONDecodeError) as e:
        raise AudioFileError(path, f"unreadable bundle manifest: {e}") from e


def update_bundle_manifest(bundle_dir: Path, config: RunConfig, **fields) -> Path:
    """Дополняет bundle.json: расписание, guidance, хэши конфигураций
    компонентов и переданные поля."""
    path = Path(bundle_dir) / BUNDLE_MANIFEST
    manifest = read_bundle_manifest(bundle_dir)
    diffusion = config.diffusion
    manifest.update({
        "format_version": 1,
        "schedule": {
            "train_timesteps": diffusion.train_timesteps,
            "beta_min": diffusion.beta_min,
            "beta_max": diffusion.beta_max,
        },
        "guidance": {
            "w_ref": diffusion.w_ref,
            "w_cont": diffusion.w_cont,
            "cfg_mode": diffusion.cfg_mode,
            "sample_steps": diffusion.sample_steps,
        },
        "audio": config.to_dict()["audio"],
    })
    hashes = manifest.setdefault("config_hashes", {})
    for section in ("audio", "vae", "scene", "probes", "content", "unet",
                    "diffusion"):
        hashes[section] = config.fingerprint(section)
    manifest.update(fields)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True),
                        encoding="utf-8")
    except OSError as e:
        raise AudioFileError(path, str(e)) from e
    return path


@dataclass
class ModelBundle:
    """Загруженные модели; после загрузки не изменяются.

    Attributes:
        vae, scene_encoder, content_encoder, unet: Компоненты переноса
        speaker_probe, content_probe: Пробы для метрик (если обучены)
        schedule: Расписание шума
        guidance: Веса guidance по умолчанию
        cfg_mode: Форма двойного guidance
        sample_steps: Шаги DDIM по умолчанию
        latent_scale: Множитель латента диффузии
        audio: Параметры признаков
    """
    vae: SpectrogramVAE
    scene_encoder: SceneEncoder
    content_encoder: Optional[ContentEncoder]
    unet: Optional[ConditionalUNet]
    speaker_probe: Optional[Probe]
    content_probe: Optional[Probe]
    schedule: NoiseSchedule
    guidance: GuidanceWeights
    cfg_mode: str
    sample_steps: int
    latent_scale: float
    audio: AudioConfig

    @classmethod
    def load(cls, bundle_dir: Path, require_probes: bool = False) -> "ModelBundle":
        """Загружает набор.

        Raises:
            UsageError: Если VAE, энкодер сцены или диффузия не обучены
                (или пробы при require_probes)
        """
        bundle_dir = Path(bundle_dir)
        required = ["vae", "scene", "ldm"] + (["probes"] if require_probes else [])
        missing = [s for s in required if not stage_completed(bundle_dir, s)]
        if missing:
            raise UsageError(
                f"Bundle {bundle_dir} is not trained: missing stage(s) "
                + ", ".join(missing)
            )
        manifest = read_bundle_manifest(bundle_dir)
        if "latent_scale" not in manifest:
            raise UsageError(f"Bundle {bundle_dir} has no latent_scale in {BUNDLE_MANIFEST}")
        with_probes = stage_completed(bundle_dir, "probes")
        schedule_cfg = manifest["schedule"]
        guidance_cfg = manifest["guidance"]
        vae = load_component(bundle_dir, "vae", SpectrogramVAE)
        scene_encoder = load_component(bundle_dir, "scene", SceneEncoder)
        frozen = manifest.get("frozen_hashes", {})
        for name, module in (("vae", vae), ("scene", scene_encoder)):
            if name in frozen and frozen[name] != module.parameter_hash():
                raise UsageError(
                    f"Stage '{name}' was retrained after the diffusion stage; "
                    "retrain ldm"
                )
        return cls(
            vae=vae,
            scene_encoder=scene_encoder,
            content_encoder=load_component(bundle_dir, "content_encoder",
                                           ContentEncoder),
            unet=load_component(bundle_dir, "unet", ConditionalUNet),
            speaker_probe=(load_component(bundle_dir, "speaker_probe", Probe)
                           if with_probes else None),
            content_probe=(load_component(bundle_dir, "content_probe", Probe)
                           if with_probes else None),
            schedule=make_schedule(schedule_cfg["train_timesteps"],
                                   schedule_cfg["beta_min"],
                                   schedule_cfg["beta_max"]),
            guidance=GuidanceWeights(guidance_cfg["w_ref"], guidance_cfg["w_cont"]),
            cfg_mode=guidance_cfg["cfg_mode"],
            sample_steps=guidance_cfg["sample_steps"],
            latent_scale=float(manifest["latent_scale"]),
            audio=AudioConfig(**{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in manifest["audio"].items()
            }),
        )


@dataclass(frozen=True, eq=False)
class TransferResult:
    """Результат переноса.

    Attributes:
        mel: Сгенерированный лог-мел (форма как у мела промпта содержания)
        latent: Латент диффузии после сэмплирования
        scene_embedding: Эмбеддинг целевой сцены
        waveform: Сигнал Griffin-Lim (если запрошен)
    """
    mel: MelSpectrogram
    latent: np.ndarray
    scene_embedding: np.ndarray
    waveform: Optional[Waveform] = None


Prompt = Union[Waveform, MelSpectrogram]


def _to_mel(prompt: Prompt, audio: AudioConfig) -> MelSpectrogram:
    if isinstance(prompt, MelSpectrogram):
        return prompt
    return wav_to_logmel(prompt, audio)


def reference_embedding(bundle: ModelBundle, reference: Union[Prompt, str]) -> np.ndarray:
    """Эмбеддинг сцены референса: аудио или подпись.

    Raises:
        InputError: Для пустой подписи
    """
    if isinstance(reference, str):
        if not reference.strip():
            raise InputError("Reference caption is empty")
        return scene_encode_text(bundle.scene_encoder, reference)
    return scene_encode_audio(bundle.scene_encoder, _to_mel(reference, bundle.audio))


def transfer(
    bundle: ModelBundle,
    content: Prompt,
    reference: Union[Prompt, str],
    w: Optional[GuidanceWeights] = None,
    seed: int = 0,
    steps: Optional[int] = None,
    vocode: bool = False
) -> TransferResult:
    """Переносит речь промпта содержания в сцену референса.

    Args:
        bundle: Обученный набор моделей
        content: Промпт содержания (сигнал или лог-мел)
        reference: Референсный клип или текстовая подпись сцены
        w: Веса guidance (по умолчанию из набора)
        seed: Зерно начального шума DDIM
        steps: Шаги DDIM (по умолчанию из набора)
        vocode: Восстановить также сигнал Griffin-Lim

    Raises:
        UsageError: Если набор не содержит диффузию
        InputError: Для пустой подписи
    """
    if bundle.unet is None or bundle.content_encoder is None:
        raise UsageError("Bundle has no trained diffusion stage")
    content_mel = _to_mel(content, bundle.audio)
    scene = reference_embedding(bundle, reference)
    conditioning = content_encode(bundle.content_encoder, content_mel)
    shape = bundle.vae.latent_shape(content_mel.n_frames)
    denoise = guided_denoiser(
        bundle.unet, scene, conditioning.sequence, w or bundle.guidance,
        bundle.cfg_mode
    )
    latent = ddim_sample(
        denoise, shape, bundle.schedule, steps or bundle.sample_steps, seed
    )
    decoded = vae_decode(bundle.vae, latent / bundle.latent_scale)
    mel = MelSpectrogram(
        np.maximum(decoded.values, np.log(bundle.audio.log_floor)),
        hop_seconds=content_mel.hop_seconds,
        frame_seconds=content_mel.frame_seconds,
        floor=content_mel.floor,
    )
    waveform = None
    if vocode:
        waveform = griffin_lim(
            mel, bundle.audio.griffin_lim_iters, seed, bundle.audio,
            bundle.audio.sample_rate
        )
    return TransferResult(mel=mel, latent=latent, scene_embedding=scene,
                          waveform=waveform)


MEL_MAGIC = b"SMEL"


def write_mel(path: Path, mel: MelSpectrogram) -> Path:
    """Пишет лог-мел: магия, n_mels и T (int32 LE), затем значения f32 LE
    построчно по полосам.

    Raises:
        AudioFileError: Если файл не удалось записать
    """
    path = Path(path)
    header = np.array([mel.n_mels, mel.n_frames], dtype="<i4").tobytes()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(
            MEL_MAGIC + header + mel.values.astype("<f4").tobytes(order="C")
        )
    except OSError as e:
        raise AudioFileError(path, str(e)) from e
    return path


def read_mel(path: Path) -> MelSpectrogram:
    """Читает файл write_mel.

    Raises:
        AudioFileError: Если файл не читается или поврежден
    """
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise AudioFileError(path, str(e)) from e
    if payload[:4] != MEL_MAGIC or len(payload) < 12:
        raise AudioFileError(path, "not a mel file")
    n_mels, frames = np.frombuffer(payload[4:12], dtype="<i4")
    values = np.frombuffer(payload[12:], dtype="<f4")
    if values.size != n_mels * frames:
        raise AudioFileError(
            path, f"expected {n_mels}x{frames} values, found {values.size}"
        )
    return MelSpectrogram(values.reshape(n_mels, frames).copy())
