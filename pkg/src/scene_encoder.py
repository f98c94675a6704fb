"""Двухветвевой контрастный энкодер сцены (аудио и подписи в общем
пространстве)."""
import logging
import re
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .config import AudioConfig, SceneEncoderConfig
from .dsp import MelSpectrogram
from .exceptions import InputError, UsageError
from .nn import Conv2d, Embedding, LayerNorm, Linear, Module, TransformerLayer, \
    sinusoidal_embedding
from .optim import Adam, clip_grad_norm
from .scenes import PLACE_WORDS, QUIET_ROOM, SOUND_WORDS
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
_TEMPLATE_WORDS = "a male female speaks in with behind"


def build_vocabulary() -> List[str]:
    """Закрытый словарь шаблонных подписей."""
    words = set(_TEMPLATE_WORDS.split())
    for phrase in [QUIET_ROOM, *PLACE_WORDS.values(), *SOUND_WORDS.values()]:
        words.update(phrase.split())
    return [PAD_TOKEN, UNK_TOKEN] + sorted(words)


class CaptionTokenizer:
    """Токенизатор: нижний регистр, разбиение по словам, UNK для
    незнакомых слов."""

    def __init__(self, vocabulary: Optional[Sequence[str]] = None):
        self.vocabulary = list(vocabulary or build_vocabulary())
        self.index = {word: i for i, word in enumerate(self.vocabulary)}
        self.pad_id = self.index[PAD_TOKEN]
        self.unk_id = self.index[UNK_TOKEN]

    def __len__(self) -> int:
        return len(self.vocabulary)

    def tokenize(self, caption: str) -> List[str]:
        return re.findall(r"[a-z0-9']+", caption.lower())

    def encode(self, caption: str) -> np.ndarray:
        """Номера токенов подписи.

        Raises:
            InputError: Для пустой подписи
        """
        words = self.tokenize(caption)
        if not words:
            raise InputError("Caption is empty")
        return np.array([self.index.get(w, self.unk_id) for w in words],
                        dtype=np.int64)

    def encode_batch(self, captions: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        """Дополненный батч: номера [B, L] и маска непустых позиций [B, L]."""
        encoded = [self.encode(c) for c in captions]
        length = max(len(e) for e in encoded)
        ids = np.full((len(encoded), length), self.pad_id, dtype=np.int64)
        mask = np.zeros((len(encoded), length), dtype=bool)
        for row, tokens in enumerate(encoded):
            ids[row, :len(tokens)] = tokens
            mask[row, :len(tokens)] = True
        return ids, mask


MelBatch = Union[np.ndarray, MelSpectrogram, Sequence[MelSpectrogram]]


def mel_batch(mels: MelBatch) -> np.ndarray:
    """Приводит мел(ы) к массиву [B, n_mels, T]."""
    if isinstance(mels, MelSpectrogram):
        return mels.values[None]
    if isinstance(mels, np.ndarray):
        if mels.ndim == 2:
            return mels[None]
        if mels.ndim == 3:
            return mels
        raise InputError(f"Mel batch must be 2-d or 3-d, got shape {mels.shape}")
    return np.stack([m.values for m in mels])


class SceneEncoder(Module):
    """Энкодер сцены с аудио- и текстовой ветвями.

    Args:
        config: Размерности энкодера
        n_mels: Число мел-полос входа
        rng: Генератор для инициализации
        vocabulary: Словарь подписей (по умолчанию шаблонный)
        mel_mean, mel_std: Нормировка лог-мела
    """

    def __init__(
        self,
        config: SceneEncoderConfig,
        n_mels: int,
        rng: np.random.Generator,
        vocabulary: Optional[Sequence[str]] = None,
        mel_mean: float = AudioConfig.mel_mean,
        mel_std: float = AudioConfig.mel_std
    ):
        super().__init__()
        self.config = config
        self.n_mels = n_mels
        self.mel_mean = mel_mean
        self.mel_std = mel_std
        self.tokenizer = CaptionTokenizer(vocabulary)

        convs = []
        in_channels, freq = 1, n_mels
        for channels in config.audio_channels:
            convs.append(Conv2d(in_channels, channels, 3, rng, stride=2, padding=1))
            in_channels, freq = channels, (freq - 1) // 2 + 1
        self.audio_convs = convs
        self.audio_norm = LayerNorm(in_channels * freq)
        self.audio_proj = Linear(in_channels * freq, config.embed_dim, rng)

        self.token_embedding = Embedding(len(self.tokenizer), config.text_width, rng)
        self.text_layers = [
            TransformerLayer(config.text_width, config.text_heads,
                             config.ffn_dim, rng)
            for _ in range(config.text_layers)
        ]
        self.text_norm = LayerNorm(config.text_width)
        self.text_proj = Linear(config.text_width, config.embed_dim, rng)

    def encode_audio(self, mels: MelBatch) -> Tensor:
        """Аудиоветвь: свертки, среднее по времени, проекция, L2-нормировка.

        Returns:
            Tensor: [B, embed_dim] с единичной нормой строк
        """
        values = mel_batch(mels)
        if values.shape[1] != self.n_mels:
            raise InputError(
                f"Expected {self.n_mels} mel bands, got {values.shape[1]}"
            )
        x = Tensor(((values - self.mel_mean) / self.mel_std)[:, None])
        for conv in self.audio_convs:
            x = ops.gelu(conv(x))
        batch, channels, freq, _ = x.shape
        pooled = x.mean(axis=3).reshape(batch, channels * freq)
        return ops.normalize(self.audio_proj(self.audio_norm(pooled)), axis=-1)

    def encode_text(self, captions: Sequence[str]) -> Tensor:
        """Текстовая ветвь: эмбеддинги токенов, трансформер, среднее по
        непустым позициям, проекция, L2-нормировка.

        Raises:
            InputError: Для пустой подписи
        """
        if isinstance(captions, str):
            captions = [captions]
        ids, mask = self.tokenizer.encode_batch(captions)
        x = self.token_embedding(ids) + sinusoidal_embedding(
            np.arange(ids.shape[1]), self.config.text_width
        )
        key_mask = mask[:, None, None, :]
        for layer in self.text_layers:
            x = layer(x, mask=key_mask)
        weights = (mask / mask.sum(axis=1, keepdims=True))[:, :, None]
        pooled = (self.text_norm(x) * weights.astype(x.dtype)).sum(axis=1)
        return ops.normalize(self.text_proj(pooled), axis=-1)

    def component_config(self) -> Dict:
        return {
            "n_mels": self.n_mels,
            "mel_mean": self.mel_mean,
            "mel_std": self.mel_std,
            "vocabulary": self.tokenizer.vocabulary,
            "embed_dim": self.config.embed_dim,
            "audio_channels": list(self.config.audio_channels),
            "text_width": self.config.text_width,
            "text_heads": self.config.text_heads,
            "text_layers": self.config.text_layers,
            "ffn_dim": self.config.ffn_dim,
            "temperature": self.config.temperature,
        }

    @classmethod
    def from_component_config(cls, data: Dict) -> "SceneEncoder":
        config = SceneEncoderConfig(
            embed_dim=data["embed_dim"],
            audio_channels=tuple(data["audio_channels"]),
            text_width=data["text_width"],
            text_heads=data["text_heads"],
            text_layers=data["text_layers"],
            ffn_dim=data["ffn_dim"],
            temperature=data["temperature"],
        )
        return cls(config, data["n_mels"], np.random.default_rng(0),
                   data["vocabulary"], data["mel_mean"], data["mel_std"])


def scene_encode_audio(encoder: SceneEncoder, mel: MelSpectrogram) -> np.ndarray:
    """Эмбеддинг сцены одного клипа (режим eval, без графа)."""
    encoder.eval()
    with no_grad():
        return encoder.encode_audio(mel).data[0].copy()


def scene_encode_text(encoder: SceneEncoder, caption: str) -> np.ndarray:
    """Эмбеддинг сцены по подписи.

    Raises:
        InputError: Для пустой подписи
    """
    encoder.eval()
    with no_grad():
        return encoder.encode_text([caption]).data[0].copy()


def caption_targets(captions: Sequence[str]) -> np.ndarray:
    """Мягкие метки: равномерно по элементам с той же подписью."""
    captions = np.asarray(captions, dtype=object)
    same = (captions[:, None] == captions[None, :]).astype(np.float64)
    return same / same.sum(axis=1, keepdims=True)


def contrastive_loss(
    audio_emb: Tensor,
    text_emb: Tensor,
    temperature: float,
    targets: Optional[np.ndarray] = None
) -> Tensor:
    """Симметричный InfoNCE по матрице косинусов / temperature.

    Args:
        audio_emb: [N, D] нормированные аудиоэмбеддинги
        text_emb: [N, D] нормированные текстовые эмбеддинги
        temperature: Температура > 0
        targets: Мягкие метки [N, N] (по умолчанию диагональ)

    Raises:
        UsageError: Если N < 2 или temperature <= 0
    """
    batch = audio_emb.shape[0]
    if batch < 2:
        raise UsageError(f"Contrastive loss needs a batch of at least 2, got {batch}")
    if temperature <= 0:
        raise UsageError(f"temperature must be positive, got {temperature}")
    if targets is None:
        targets = np.arange(batch)
    else:
        targets = np.asarray(targets)
    logits = ops.matmul(audio_emb, text_emb.transpose(1, 0)) / temperature
    back_targets = targets if targets.ndim == 1 else targets.T
    return (ops.cross_entropy(logits, targets)
            + ops.cross_entropy(logits.transpose(1, 0), back_targets)) * 0.5


def contrastive_train_step(
    encoder: SceneEncoder,
    optimizer: Adam,
    mels: np.ndarray,
    captions: Sequence[str],
    temperature: Optional[float] = None,
    grad_clip: float = 0.0
) -> float:
    """Один шаг обучения энкодера сцены.

    Подписи одинаковых сцен совпадают, поэтому используются мягкие метки.

    Returns:
        float: Значение потерь
    """
    if len(captions) != len(mels):
        raise InputError(
            f"{len(mels)} clips but {len(captions)} captions in a batch"
        )
    encoder.train()
    optimizer.zero_grad()
    loss = contrastive_loss(
        encoder.encode_audio(mels), encoder.encode_text(captions),
        temperature or encoder.config.temperature, caption_targets(captions)
    )
    loss.backward()
    if grad_clip > 0:
        clip_grad_norm(optimizer.params, grad_clip)
    optimizer.step()
    return loss.item()


def retrieval_at_1(
    audio_emb: np.ndarray,
    text_emb: np.ndarray,
    captions: Sequence[str]
) -> float:
    """Доля клипов, для которых ближайшая подпись совпадает с их собственной."""
    if len(audio_emb) != len(text_emb) or len(audio_emb) != len(captions):
        raise InputError("retrieval_at_1: batch sizes differ")
    nearest = np.argmax(np.asarray(audio_emb) @ np.asarray(text_emb).T, axis=1)
    hits = [captions[j] == captions[i] for i, j in enumerate(nearest)]
    return float(np.mean(hits))
