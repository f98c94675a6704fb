"""Пробы диктора и содержания: сверточные классификаторы лог-мела."""
import logging
from enum import Enum
from typing import Dict, Optional, Union

import numpy as np

from . import ops
from .config import AudioConfig, ProbeConfig, TrainingConfig
from .dsp import MelSpectrogram, Waveform, wav_to_logmel
from .exceptions import InputError, UsageError
from .nn import Conv2d, Linear, Module
from .optim import Adam, clip_grad_norm
from .scene_encoder import MelBatch, mel_batch
from .tensor import Tensor, concat, no_grad
from .train_log import TrainingLog, progress_bar

logger = logging.getLogger(__name__)


class ProbeKind(str, Enum):
    SPEAKER = "speaker"
    CONTENT = "content"


class Probe(Module):
    """Классификатор: свертки с шагом только по частоте, усреднение по
    time_bins отрезкам времени, эмбеддинг, логиты.

    Args:
        kind: Что распознает проба
        n_classes: Число классов
        config: Размерности
        n_mels: Число мел-полос
        rng: Генератор для инициализации
    """

    def __init__(
        self,
        kind: ProbeKind,
        n_classes: int,
        config: ProbeConfig,
        n_mels: int,
        rng: np.random.Generator,
        mel_mean: float = AudioConfig.mel_mean,
        mel_std: float = AudioConfig.mel_std
    ):
        super().__init__()
        self.kind = ProbeKind(kind)
        self.n_classes = n_classes
        self.config = config
        self.n_mels = n_mels
        self.mel_mean = mel_mean
        self.mel_std = mel_std
        self.trained = False

        convs = []
        in_channels, freq = 1, n_mels
        for channels in config.channels:
            convs.append(Conv2d(in_channels, channels, 3, rng,
                                stride=(2, 1), padding=1))
            in_channels, freq = channels, (freq - 1) // 2 + 1
        self.convs = convs
        self.embed_layer = Linear(in_channels * freq * config.time_bins,
                                  config.embed_dim, rng)
        self.classifier = Linear(config.embed_dim, n_classes, rng)

    def embed(self, mels: MelBatch) -> Tensor:
        """Эмбеддинг предпоследнего слоя [B, embed_dim]."""
        values = mel_batch(mels)
        if values.shape[1] != self.n_mels:
            raise InputError(
                f"Probe expects {self.n_mels} mel bands, got {values.shape[1]}"
            )
        bins = self.config.time_bins
        if values.shape[2] < bins:
            raise InputError(
                f"Probe needs at least {bins} frames, got {values.shape[2]}"
            )
        x = Tensor(((values - self.mel_mean) / self.mel_std)[:, None])
        for conv in self.convs:
            x = ops.gelu(conv(x))
        bounds = np.linspace(0, x.shape[3], bins + 1).astype(int)
        pooled = concat([
            x[:, :, :, start:stop].mean(axis=3, keepdims=True)
            for start, stop in zip(bounds[:-1], bounds[1:])
        ], axis=3)
        flat = pooled.reshape(pooled.shape[0], -1)
        return ops.gelu(self.embed_layer(flat))

    def forward(self, mels: MelBatch) -> Tensor:
        return self.classifier(self.embed(mels))

    def component_config(self) -> Dict:
        return {
            "kind": self.kind.value,
            "n_classes": self.n_classes,
            "n_mels": self.n_mels,
            "mel_mean": self.mel_mean,
            "mel_std": self.mel_std,
            "channels": list(self.config.channels),
            "embed_dim": self.config.embed_dim,
            "time_bins": self.config.time_bins,
            "renderings_per_pair": self.config.renderings_per_pair,
        }

    @classmethod
    def from_component_config(cls, data: Dict) -> "Probe":
        config = ProbeConfig(
            channels=tuple(data["channels"]),
            embed_dim=data["embed_dim"],
            time_bins=data["time_bins"],
            renderings_per_pair=data["renderings_per_pair"],
        )
        probe = cls(data["kind"], data["n_classes"], config, data["n_mels"],
                    np.random.default_rng(0), data["mel_mean"], data["mel_std"])
        # пробы сохраняются только после обучения
        probe.trained = True
        return probe


def _as_mel(item: Union[Waveform, MelSpectrogram, np.ndarray],
            audio: AudioConfig) -> np.ndarray:
    if isinstance(item, Waveform):
        return wav_to_logmel(item, audio).values
    if isinstance(item, MelSpectrogram):
        return item.values
    return np.asarray(item)


def _require_trained(probe: Probe) -> None:
    if not probe.trained:
        raise UsageError(f"The {probe.kind.value} probe has not been trained")


def probe_train(
    kind: ProbeKind,
    mels: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    config: ProbeConfig,
    training: TrainingConfig,
    seed: int,
    steps: Optional[int] = None,
    log: Optional[TrainingLog] = None
) -> Probe:
    """Обучает пробу на чистой речи.

    Args:
        kind: speaker или content
        mels: Лог-мелы [N, n_mels, T]
        labels: Номера классов [N]
        n_classes: Число классов
        config: Размерности пробы
        training: Шаги, батч, lr, клиппинг
        seed: Зерно инициализации и батчей
        steps: Переопределение числа шагов

    Returns:
        Probe: Обученная проба в режиме eval
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(mels) != len(labels) or len(mels) == 0:
        raise InputError(f"{len(mels)} clips for {len(labels)} labels")
    rng = np.random.default_rng(seed)
    probe = Probe(kind, n_classes, config, mels.shape[1], rng)
    optimizer = Adam(probe.trainable_parameters(), lr=training.lr)
    steps = training.probe_steps if steps is None else steps
    log = log or TrainingLog(f"probe-{ProbeKind(kind).value}", training.log_every)
    batch = min(training.batch_size, len(mels))

    probe.train()
    with progress_bar(steps, f"probe:{ProbeKind(kind).value}") as bar:
        for step in range(1, steps + 1):
            chosen = rng.choice(len(mels), size=batch, replace=False)
            optimizer.zero_grad()
            loss = ops.cross_entropy(probe(mels[chosen]), labels[chosen])
            loss.backward()
            if training.grad_clip > 0:
                clip_grad_norm(optimizer.params, training.grad_clip)
            optimizer.step()
            log.record(step, loss.item(), steps)
            bar.update(1)
    probe.trained = True
    return probe.eval()


def probe_logits(probe: Probe, mels: MelBatch) -> np.ndarray:
    _require_trained(probe)
    probe.eval()
    with no_grad():
        return probe(mel_batch(mels)).data.copy()


def probe_embed(
    probe: Probe,
    item: Union[Waveform, MelSpectrogram, np.ndarray],
    audio: AudioConfig = AudioConfig()
) -> np.ndarray:
    """Эмбеддинг предпоследнего слоя одного клипа.

    Raises:
        UsageError: Если проба не обучена
    """
    _require_trained(probe)
    probe.eval()
    with no_grad():
        return probe.embed(_as_mel(item, audio)).data[0].copy()


def probe_classify(
    probe: Probe,
    item: Union[Waveform, MelSpectrogram, np.ndarray],
    audio: AudioConfig = AudioConfig()
) -> int:
    """argmax логитов.

    Raises:
        UsageError: Если проба не обучена
    """
    return int(np.argmax(probe_logits(probe, _as_mel(item, audio))[0]))


def probe_accuracy(probe: Probe, mels: np.ndarray, labels: np.ndarray,
                   batch: int = 64) -> float:
    predictions = np.concatenate([
        np.argmax(probe_logits(probe, mels[i:i + batch]), axis=1)
        for i in range(0, len(mels), batch)
    ])
    return float(np.mean(predictions == np.asarray(labels)))
