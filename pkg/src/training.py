"""Поэтапное обучение: VAE, энкодер сцены, пробы, латентная диффузия.

Каждая стадия пишет чекпоинт компонента и train_log.json в каталог набора.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .bundle import component_dir, load_component, save_component, update_bundle_manifest
from .config import DiffusionConfig, RunConfig
from .content_encoder import ContentEncoder
from .dataset import (
    MANIFEST_FILENAMES, TRAIN_SPLIT, ManifestRow, clean_speech_corpus,
    load_mel_arrays, read_manifest, split_holdout
)
from .diffusion import NoiseSchedule, draw_condition_drops, make_schedule, q_sample
from .exceptions import InputError, NumericalError, UsageError
from .optim import Adam, clip_grad_norm
from .probes import ProbeKind, probe_accuracy, probe_train
from .scene_encoder import SceneEncoder, contrastive_train_step, retrieval_at_1
from .scenes import sub_seed
from .tensor import Tensor, no_grad
from .train_log import TrainingLog, progress_bar
from .unet import ConditionalUNet
from .validators import StageValidator
from .vae import SpectrogramVAE, vae_loss

logger = logging.getLogger(__name__)

RETRIEVAL_BATCH = 16


@dataclass
class StageResult:
    """Итог стадии обучения.

    Attributes:
        stage: Имя стадии
        directory: Каталог чекпоинта (первого компонента стадии)
        first_loss, last_loss: Сглаженные потери в начале и в конце
        summary: Метрики на отложенной части
    """
    stage: str
    directory: Path
    first_loss: Optional[float]
    last_loss: Optional[float]
    summary: Dict = field(default_factory=dict)


def _stage_rows(
    config: RunConfig,
    data_dir: Path,
    seed: int
) -> Tuple[List[ManifestRow], List[ManifestRow]]:
    rows = read_manifest(Path(data_dir) / MANIFEST_FILENAMES[TRAIN_SPLIT])
    train, holdout = split_holdout(rows, config.data.holdout_fraction, seed)
    if not train:
        raise InputError(f"No training rows in {data_dir}")
    logger.info("Training on %d items, %d held out", len(train), len(holdout))
    return train, holdout


def _optimizer_step(optimizer: Adam, grad_clip: float) -> None:
    if grad_clip > 0:
        clip_grad_norm(optimizer.params, grad_clip)
    optimizer.step()


# --- VAE ---

def vae_reconstruction_mae(vae: SpectrogramVAE, mels: np.ndarray,
                           batch: int = 32) -> float:
    """Средняя абсолютная ошибка реконструкции через mu (в лог-единицах)."""
    vae.eval()
    errors = []
    with no_grad():
        for i in range(0, len(mels), batch):
            chunk = mels[i:i + batch]
            mu, _ = vae.encode(chunk)
            errors.append(np.abs(vae.decode(mu).data - chunk).mean(axis=(1, 2)))
    return float(np.concatenate(errors).mean())


def train_vae(config: RunConfig, data_dir: Path, bundle_dir: Path,
              seed: Optional[int] = None) -> StageResult:
    """Обучает VAE на лог-мелах референсов и промптов содержания."""
    seed = config.seed if seed is None else seed
    training = config.training
    train_rows, holdout_rows = _stage_rows(config, data_dir, seed)
    train = load_mel_arrays(train_rows, data_dir, config)
    pool = np.concatenate([train.reference, train.content])

    rng = np.random.default_rng(sub_seed(seed, 101))
    audio = config.audio
    vae = SpectrogramVAE(config.vae, audio.n_mels, rng, audio.mel_mean, audio.mel_std)
    optimizer = Adam(vae.trainable_parameters(), lr=training.lr)
    log = TrainingLog("vae", training.log_every)
    steps = training.vae_steps
    batch = min(training.batch_size, len(pool))

    vae.train()
    with progress_bar(steps, "vae") as bar:
        for step in range(1, steps + 1):
            mels = pool[rng.choice(len(pool), size=batch, replace=False)]
            optimizer.zero_grad()
            mu, logvar = vae.encode(mels)
            recon = vae.decode(vae.sample(mu, logvar, rng))
            loss = vae_loss(mels, recon, mu, logvar, config.vae.beta)
            loss.backward()
            _optimizer_step(optimizer, training.grad_clip)
            log.record(step, loss.item(), steps)
            bar.update(1)
    vae.eval()

    summary = {"train_items": len(train_rows)}
    if holdout_rows:
        held = load_mel_arrays(holdout_rows, data_dir, config)
        summary["holdout_mae"] = vae_reconstruction_mae(
            vae, np.concatenate([held.reference, held.content])
        )
        logger.info("VAE held-out MAE: %.4f", summary["holdout_mae"])
    directory = save_component(bundle_dir, "vae", vae)
    log.write(directory, summary)
    return StageResult("vae", directory, log.first_loss, log.last_loss, summary)


# --- Энкодер сцены ---

def retrieval_batch(captions: Sequence[str], size: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Индексы батча для retrieval@1: сначала клипы с разными подписями."""
    order = rng.permutation(len(captions))
    seen, distinct, rest = set(), [], []
    for i in order:
        (rest if captions[i] in seen else distinct).append(int(i))
        seen.add(captions[i])
    return np.array((distinct + rest)[:size])


def scene_retrieval(encoder: SceneEncoder, mels: np.ndarray,
                    captions: Sequence[str]) -> float:
    encoder.eval()
    with no_grad():
        audio = encoder.encode_audio(mels).data
        text = encoder.encode_text(list(captions)).data
    return retrieval_at_1(audio, text, list(captions))


def train_scene_encoder(config: RunConfig, data_dir: Path, bundle_dir: Path,
                        seed: Optional[int] = None) -> StageResult:
    """Контрастное обучение энкодера сцены на парах (клип, подпись)."""
    seed = config.seed if seed is None else seed
    training = config.training
    train_rows, holdout_rows = _stage_rows(config, data_dir, seed)
    train = load_mel_arrays(train_rows, data_dir, config)
    pool = np.concatenate([train.reference, train.content])
    captions = np.array(train.captions + train.content_captions, dtype=object)

    rng = np.random.default_rng(sub_seed(seed, 102))
    audio = config.audio
    encoder = SceneEncoder(config.scene, audio.n_mels, rng,
                           mel_mean=audio.mel_mean, mel_std=audio.mel_std)
    optimizer = Adam(encoder.trainable_parameters(), lr=training.lr)
    log = TrainingLog("scene", training.log_every)
    steps = training.scene_steps
    batch = min(training.batch_size, len(pool))
    if batch < 2:
        raise InputError("Scene encoder training needs at least 2 clips")

    with progress_bar(steps, "scene") as bar:
        for step in range(1, steps + 1):
            chosen = rng.choice(len(pool), size=batch, replace=False)
            loss = contrastive_train_step(
                encoder, optimizer, pool[chosen], list(captions[chosen]),
                config.scene.temperature, training.grad_clip
            )
            log.record(step, loss, steps)
            bar.update(1)
    encoder.eval()

    summary = {"train_items": len(train_rows)}
    if holdout_rows:
        held = load_mel_arrays(holdout_rows, data_dir, config)
        held_mels = np.concatenate([held.reference, held.content])
        held_captions = held.captions + held.content_captions
        chosen = retrieval_batch(held_captions, RETRIEVAL_BATCH,
                                 np.random.default_rng(sub_seed(seed, 103)))
        if len(chosen) >= 2:
            summary["holdout_retrieval_at_1"] = scene_retrieval(
                encoder, held_mels[chosen], [held_captions[i] for i in chosen]
            )
            summary["retrieval_batch"] = len(chosen)
            logger.info("Scene retrieval@1 on %d held-out clips: %.3f",
                        len(chosen), summary["holdout_retrieval_at_1"])
    directory = save_component(bundle_dir, "scene", encoder)
    log.write(directory, summary)
    return StageResult("scene", directory, log.first_loss, log.last_loss, summary)


# --- Пробы ---

def train_probes(config: RunConfig, bundle_dir: Path,
                 seed: Optional[int] = None) -> StageResult:
    """Обучает пробы диктора и содержания на чистой синтетической речи.

    Отложенная проверка использует отдельный поток зерен синтеза.
    """
    seed = config.seed if seed is None else seed
    data = config.data
    mels, speakers, contents = clean_speech_corpus(
        config, seed, config.probes.renderings_per_pair, stream=0
    )
    held_mels, held_speakers, held_contents = clean_speech_corpus(
        config, seed, 1, stream=1
    )
    results = {}
    for kind, labels, held_labels, n_classes, offset in (
        (ProbeKind.SPEAKER, speakers, held_speakers, data.n_speakers, 104),
        (ProbeKind.CONTENT, contents, held_contents, data.n_contents, 105),
    ):
        log = TrainingLog(f"probe-{kind.value}", config.training.log_every)
        probe = probe_train(kind, mels, labels, n_classes, config.probes,
                            config.training, sub_seed(seed, offset), log=log)
        accuracy = probe_accuracy(probe, held_mels, held_labels)
        logger.info("%s probe held-out accuracy: %.3f", kind.value, accuracy)
        summary = {"holdout_accuracy": accuracy, "train_items": len(mels)}
        directory = save_component(bundle_dir, f"{kind.value}_probe", probe)
        log.write(directory, summary)
        results[kind.value] = (log, summary)

    speaker_log = results["speaker"][0]
    return StageResult(
        "probes", component_dir(bundle_dir, "speaker_probe"),
        speaker_log.first_loss, speaker_log.last_loss,
        {f"{kind}_{key}": value
         for kind, (_, summary) in results.items()
         for key, value in summary.items()},
    )


# --- Латентная диффузия ---

def measure_latent_scale(vae: SpectrogramVAE, mels: np.ndarray,
                         batch: int = 32) -> float:
    """1 / std(mu) по обучающим целям.

    Raises:
        NumericalError: Если разброс латента нулевой или не конечен
    """
    vae.eval()
    with no_grad():
        mus = [vae.encode(mels[i:i + batch])[0].data
               for i in range(0, len(mels), batch)]
    std = float(np.concatenate(mus).std())
    if not math.isfinite(std) or std <= 0:
        raise NumericalError(f"Latent standard deviation is {std}")
    return 1.0 / std


class LatentDiffusionTrainer:
    """Совместное обучение U-Net и энкодера содержания при замороженных
    VAE и энкодере сцены.

    Args:
        unet: Обучаемый U-Net
        content_encoder: Обучаемый энкодер содержания
        vae: Замороженный VAE
        scene_encoder: Замороженный энкодер сцены
        schedule: Расписание шума
        diffusion: Вероятности отбрасывания условий и выбор x0
        latent_scale: Множитель латента
        lr: Шаг Adam
        grad_clip: Порог нормы градиента (0 - без клиппинга)
    """

    def __init__(
        self,
        unet: ConditionalUNet,
        content_encoder: ContentEncoder,
        vae: SpectrogramVAE,
        scene_encoder: SceneEncoder,
        schedule: NoiseSchedule,
        diffusion: DiffusionConfig,
        latent_scale: float,
        lr: float = 5e-4,
        grad_clip: float = 1.0
    ):
        self.unet = unet
        self.content_encoder = content_encoder
        self.vae = vae.freeze().eval()
        self.scene_encoder = scene_encoder.freeze().eval()
        self.schedule = schedule
        self.diffusion = diffusion
        self.latent_scale = float(latent_scale)
        self.grad_clip = grad_clip
        self.optimizer = Adam(
            unet.trainable_parameters() + content_encoder.trainable_parameters(),
            lr=lr,
        )

    def frozen_hashes(self) -> Dict[str, str]:
        return {
            "vae": self.vae.parameter_hash(),
            "scene": self.scene_encoder.parameter_hash(),
        }

    def diffusion_targets(self, target: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray:
        """Масштабированный латент цели: mu или сэмпл апостериорного."""
        with no_grad():
            mu, logvar = self.vae.encode(target)
        x0 = mu.data
        if not self.diffusion.use_posterior_mean:
            noise = rng.standard_normal(x0.shape).astype(x0.dtype)
            x0 = x0 + np.exp(0.5 * logvar.data) * noise
        return x0 * self.latent_scale

    def training_step(
        self,
        reference: np.ndarray,
        content: np.ndarray,
        target: np.ndarray,
        rng: np.random.Generator
    ) -> float:
        """Один шаг: шумим латент цели и предсказываем шум по условиям.

        Args:
            reference, content, target: Лог-мелы батча [B, n_mels, T]
            rng: Генератор шагов, шума и отбрасывания условий

        Returns:
            float: L2 между шумом и предсказанием

        Raises:
            UsageError: Для пустого батча
        """
        if len(target) == 0:
            raise UsageError("training_step needs a non-empty batch")
        if not len(reference) == len(content) == len(target):
            raise InputError(
                f"Batch parts differ in size: {len(reference)}, "
                f"{len(content)}, {len(target)}"
            )
        batch = len(target)
        x0 = self.diffusion_targets(target, rng)
        with no_grad():
            scene = self.scene_encoder.encode_audio(reference).data
        drop_scene, drop_content = draw_condition_drops(
            rng, batch, self.diffusion.p_drop_scene, self.diffusion.p_drop_content
        )
        t = rng.integers(1, self.schedule.train_timesteps + 1, size=batch)
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
        x_t = q_sample(self.schedule, x0, t, eps)

        self.unet.train()
        self.content_encoder.train()
        self.optimizer.zero_grad()
        _, _, sequence = self.content_encoder(content)
        eps_hat = self.unet(Tensor(x_t), t, Tensor(scene), sequence,
                            drop_scene, drop_content)
        loss = ops.mse_loss(eps_hat, eps)
        loss.backward()
        _optimizer_step(self.optimizer, self.grad_clip)
        return loss.item()


def build_ldm_trainer(
    config: RunConfig,
    vae: SpectrogramVAE,
    scene_encoder: SceneEncoder,
    latent_scale: float,
    rng: np.random.Generator
) -> LatentDiffusionTrainer:
    """Создает U-Net и энкодер содержания под размерности замороженных частей."""
    audio = config.audio
    content_encoder = ContentEncoder(
        config.content, audio.n_mels, rng, float(np.log(audio.log_floor)),
        audio.mel_mean, audio.mel_std,
    )
    unet = ConditionalUNet(
        config.unet, vae.latent_channels, scene_encoder.config.embed_dim,
        content_encoder.width, config.mel_frames // 4, rng,
    )
    diffusion = config.diffusion
    return LatentDiffusionTrainer(
        unet, content_encoder, vae, scene_encoder,
        make_schedule(diffusion.train_timesteps, diffusion.beta_min,
                      diffusion.beta_max),
        diffusion, latent_scale,
        lr=config.training.ldm_lr, grad_clip=config.training.grad_clip,
    )


def train_ldm(config: RunConfig, data_dir: Path, bundle_dir: Path,
              seed: Optional[int] = None) -> StageResult:
    """Обучает диффузию; VAE и энкодер сцены берутся из набора и не меняются.

    Raises:
        StageDependencyError: Если VAE или энкодер сцены не обучены
        NumericalError: Если замороженные параметры изменились
    """
    seed = config.seed if seed is None else seed
    StageValidator(bundle_dir).require("ldm")
    training = config.training
    vae = load_component(bundle_dir, "vae", SpectrogramVAE)
    scene_encoder = load_component(bundle_dir, "scene", SceneEncoder)
    train_rows, _ = _stage_rows(config, data_dir, seed)
    train = load_mel_arrays(train_rows, data_dir, config)

    latent_scale = measure_latent_scale(vae, train.target)
    logger.info("Latent scale: %.4f", latent_scale)
    rng = np.random.default_rng(sub_seed(seed, 106))
    trainer = build_ldm_trainer(config, vae, scene_encoder, latent_scale, rng)
    frozen_before = trainer.frozen_hashes()

    log = TrainingLog("ldm", training.log_every)
    steps = training.ldm_steps
    batch = min(training.ldm_batch_size, len(train))
    with progress_bar(steps, "ldm") as bar:
        for step in range(1, steps + 1):
            chosen = rng.choice(len(train), size=batch, replace=False)
            loss = trainer.training_step(
                train.reference[chosen], train.content[chosen],
                train.target[chosen], rng
            )
            log.record(step, loss, steps)
            bar.update(1)

    frozen_after = trainer.frozen_hashes()
    if frozen_after != frozen_before:
        changed = [k for k in frozen_before if frozen_before[k] != frozen_after[k]]
        raise NumericalError(
            "Frozen component(s) changed during ldm training: " + ", ".join(changed)
        )
    directory = save_component(bundle_dir, "unet", trainer.unet)
    save_component(bundle_dir, "content_encoder", trainer.content_encoder)
    update_bundle_manifest(bundle_dir, config, latent_scale=latent_scale,
                           frozen_hashes=frozen_after)
    summary = {"train_items": len(train_rows), "latent_scale": latent_scale}
    log.write(directory, summary)
    return StageResult("ldm", directory, log.first_loss, log.last_loss, summary)


def train_stage(stage: str, config: RunConfig, data_dir: Path,
                bundle_dir: Path, seed: Optional[int] = None) -> StageResult:
    """Запускает стадию по имени.

    Raises:
        UsageError: Для неизвестной стадии
        StageDependencyError: Если предшественники не обучены
    """
    if not StageValidator.is_valid_stage(stage):
        raise UsageError(f"Unknown training stage '{stage}'")
    StageValidator(bundle_dir).require(stage)
    logger.info("Training stage '%s'", stage)
    if stage == "vae":
        return train_vae(config, data_dir, bundle_dir, seed)
    if stage == "scene":
        return train_scene_encoder(config, data_dir, bundle_dir, seed)
    if stage == "probes":
        return train_probes(config, bundle_dir, seed)
    return train_ldm(config, data_dir, bundle_dir, seed)
