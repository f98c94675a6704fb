"""Энкодер содержания: фильтр-модуль (маска) и модуль эмбеддинга."""
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from . import ops
from .config import AudioConfig, ContentEncoderConfig
from .exceptions import TensorShapeError
from .nn import Conv2d, LayerNorm, Linear, Module, TransformerLayer, \
    sinusoidal_embedding
from .scene_encoder import MelBatch, mel_batch
from .tensor import Tensor, no_grad


@dataclass(frozen=True, eq=False)
class ContentConditioning:
    """Выход энкодера содержания для одного клипа.

    Attributes:
        mask: Маска [n_mels, T] в (0, 1)
        masked_mel: Лог-мел после маски [n_mels, T]
        sequence: Последовательность условий [T/4, width]
    """
    mask: np.ndarray
    masked_mel: np.ndarray
    sequence: np.ndarray


def apply_mask(logmel: Tensor, logits: Tensor, log_floor: float) -> Tensor:
    """Маска умножает линейный мел: log(max(sigmoid(l)·exp(m), floor)).

    Считается в лог-области; при маске, равной 1, вход возвращается без
    изменений (вход уже не ниже порога).
    """
    return (logmel + ops.log_sigmoid(logits)).clamp_min(log_floor)


# ближайшие к 0 и 1 значения, различимые во float32
MASK_EPS = float(np.finfo(np.float32).eps)


def mask_from_logits(logits: Tensor) -> Tensor:
    """sigmoid(logits) в [MASK_EPS, 1 - MASK_EPS], то есть строго в (0, 1)."""
    return 1.0 - (1.0 - ops.sigmoid(logits).clamp_min(MASK_EPS)).clamp_min(MASK_EPS)


class ContentEncoder(Module):
    """Фильтр-модуль (трансформер по кадрам, сигмоида) и модуль эмбеддинга
    (две свертки stride 2 по времени, трансформер).

    Args:
        config: Ширина, головы и число слоев
        n_mels: Число мел-полос
        rng: Генератор для инициализации
        log_floor: Натуральный логарифм порога мел-мощности
        mel_mean, mel_std: Нормировка лог-мела
    """

    def __init__(
        self,
        config: ContentEncoderConfig,
        n_mels: int,
        rng: np.random.Generator,
        log_floor: float = float(np.log(AudioConfig.log_floor)),
        mel_mean: float = AudioConfig.mel_mean,
        mel_std: float = AudioConfig.mel_std
    ):
        super().__init__()
        self.config = config
        self.n_mels = n_mels
        self.log_floor = log_floor
        self.mel_mean = mel_mean
        self.mel_std = mel_std
        width = config.width

        self.filter_in = Linear(n_mels, width, rng)
        self.filter_layers = [
            TransformerLayer(width, config.heads, config.ffn_dim, rng)
            for _ in range(config.filter_layers)
        ]
        self.filter_norm = LayerNorm(width)
        self.filter_out = Linear(width, n_mels, rng)

        self.embed_conv1 = Conv2d(n_mels, width, (1, 3), rng,
                                  stride=(1, 2), padding=(0, 1))
        self.embed_conv2 = Conv2d(width, width, (1, 3), rng,
                                  stride=(1, 2), padding=(0, 1))
        self.embed_layers = [
            TransformerLayer(width, config.heads, config.ffn_dim, rng)
            for _ in range(config.embed_layers)
        ]
        self.embed_norm = LayerNorm(width)

    @property
    def width(self) -> int:
        return self.config.width

    def _normalize(self, logmel: Tensor) -> Tensor:
        return (logmel - self.mel_mean) / self.mel_std

    def mask_logits(self, logmel: Tensor) -> Tensor:
        """Логиты маски [B, n_mels, T]."""
        frames = logmel.shape[2]
        x = self.filter_in(self._normalize(logmel).transpose(0, 2, 1))
        x = x + sinusoidal_embedding(np.arange(frames), self.width)
        for layer in self.filter_layers:
            x = layer(x)
        return self.filter_out(self.filter_norm(x)).transpose(0, 2, 1)

    def embed(self, masked: Tensor) -> Tensor:
        """Последовательность условий [B, T/4, width]."""
        batch, n_mels, frames = masked.shape
        x = self._normalize(masked).reshape(batch, n_mels, 1, frames)
        x = ops.gelu(self.embed_conv1(x))
        x = ops.gelu(self.embed_conv2(x))
        _, width, _, length = x.shape
        x = x.reshape(batch, width, length).transpose(0, 2, 1)
        x = x + sinusoidal_embedding(np.arange(length), width)
        for layer in self.embed_layers:
            x = layer(x)
        return self.embed_norm(x)

    def forward(self, mels: MelBatch) -> Tuple[Tensor, Tensor, Tensor]:
        """Маска, маскированный лог-мел и последовательность условий.

        Raises:
            TensorShapeError: Если число полос не совпадает или T не кратно 4
        """
        values = mel_batch(mels)
        if values.shape[1] != self.n_mels:
            raise TensorShapeError(
                f"Content encoder expects {self.n_mels} mel bands, "
                f"got {values.shape[1]}"
            )
        if values.shape[2] % 4:
            raise TensorShapeError(
                f"Mel length {values.shape[2]} is not divisible by 4"
            )
        logmel = Tensor(values)
        logits = self.mask_logits(logmel)
        masked = apply_mask(logmel, logits, self.log_floor)
        return mask_from_logits(logits), masked, self.embed(masked)

    def component_config(self) -> Dict:
        return {
            "n_mels": self.n_mels,
            "log_floor": self.log_floor,
            "mel_mean": self.mel_mean,
            "mel_std": self.mel_std,
            "width": self.config.width,
            "heads": self.config.heads,
            "filter_layers": self.config.filter_layers,
            "embed_layers": self.config.embed_layers,
            "ffn_dim": self.config.ffn_dim,
        }

    @classmethod
    def from_component_config(cls, data: Dict) -> "ContentEncoder":
        config = ContentEncoderConfig(
            width=data["width"],
            heads=data["heads"],
            filter_layers=data["filter_layers"],
            embed_layers=data["embed_layers"],
            ffn_dim=data["ffn_dim"],
        )
        return cls(config, data["n_mels"], np.random.default_rng(0),
                   data["log_floor"], data["mel_mean"], data["mel_std"])


def content_encode(encoder: ContentEncoder, mel: MelBatch) -> ContentConditioning:
    """Условия содержания для одного клипа (режим eval, без графа)."""
    encoder.eval()
    with no_grad():
        mask, masked, sequence = encoder(mel)
    return ContentConditioning(
        mask=mask.data[0].copy(),
        masked_mel=masked.data[0].copy(),
        sequence=sequence.data[0].copy(),
    )
