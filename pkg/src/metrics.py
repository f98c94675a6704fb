"""Метрики переноса: расстояние Фреше по эмбеддингам сцены, косинусные
сходства и доля ошибок распознавания содержания."""
import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import linalg

from .config import AudioConfig
from .dsp import MelSpectrogram, Waveform, wav_to_logmel
from .exceptions import InputError, NumericalError
from .probes import Probe, probe_classify, probe_embed
from .scene_encoder import SceneEncoder, scene_encode_audio, scene_encode_text

logger = logging.getLogger(__name__)

# допуск на отрицательные собственные значения вырожденных ковариаций
EIGENVALUE_TOLERANCE = 1e-5

Clip = Union[Waveform, MelSpectrogram]


@dataclass(frozen=True, eq=False)
class GaussianStats:
    """Среднее и несмещенная ковариация набора эмбеддингов."""
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def fit_gaussian(embeddings: Sequence[np.ndarray]) -> GaussianStats:
    """Оценивает среднее и ковариацию (делитель n - 1, симметризация).

    Raises:
        InputError: Если эмбеддингов меньше двух
    """
    data = np.asarray(embeddings, dtype=np.float64)
    if data.ndim != 2 or len(data) < 2:
        raise InputError(
            f"fit_gaussian needs at least 2 embeddings, got {len(data)}"
        )
    sigma = np.cov(data, rowvar=False, ddof=1).reshape(data.shape[1], data.shape[1])
    return GaussianStats(mu=data.mean(axis=0), sigma=(sigma + sigma.T) / 2, n=len(data))


def _psd_eigenvalues(matrix: np.ndarray, what: str):
    try:
        values, vectors = linalg.eigh(matrix)
    except linalg.LinAlgError as e:
        raise NumericalError(f"Eigendecomposition of {what} failed: {e}") from e
    if values.min() < -EIGENVALUE_TOLERANCE:
        raise NumericalError(
            f"{what} has eigenvalue {values.min():.3g} below "
            f"-{EIGENVALUE_TOLERANCE}"
        )
    return np.clip(values, 0.0, None), vectors


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    След корня считается через симметричную матрицу S_a^(1/2) S_b S_a^(1/2),
    у которой те же собственные значения, что у S_a S_b.

    Raises:
        InputError: При разной размерности
        NumericalError: При сильно отрицательных собственных значениях
    """
    if a.dim != b.dim:
        raise InputError(f"Gaussian dimensions differ: {a.dim} vs {b.dim}")
    values, vectors = _psd_eigenvalues(a.sigma, "sigma_a")
    root_a = (vectors * np.sqrt(values)) @ vectors.T
    middle = root_a @ b.sigma @ root_a
    product_values, _ = _psd_eigenvalues((middle + middle.T) / 2, "sigma product")
    diff = a.mu - b.mu
    distance = (diff @ diff + np.trace(a.sigma) + np.trace(b.sigma)
                - 2.0 * np.sqrt(product_values).sum())
    return float(max(distance, 0.0))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Косинус в [-1, 1]; для нулевого вектора 0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        return 0.0
    return float(np.clip(a @ b / norm, -1.0, 1.0))


def _mel(clip: Clip, audio: AudioConfig) -> MelSpectrogram:
    return clip if isinstance(clip, MelSpectrogram) else wav_to_logmel(clip, audio)


def scene_embedding(encoder: SceneEncoder, clip: Union[Clip, str],
                    audio: AudioConfig = AudioConfig()) -> np.ndarray:
    if isinstance(clip, str):
        if not clip.strip():
            raise InputError("Reference caption is empty")
        return scene_encode_text(encoder, clip)
    return scene_encode_audio(encoder, _mel(clip, audio))


def scene_similarity(
    encoder: SceneEncoder,
    gen: Clip,
    reference: Union[Clip, str],
    audio: AudioConfig = AudioConfig()
) -> float:
    """Косинус эмбеддинга сцены результата и референса (аудио или подпись)."""
    return cosine_similarity(
        scene_embedding(encoder, gen, audio),
        scene_embedding(encoder, reference, audio),
    )


def content_error_rate(
    probe: Probe,
    gens: Sequence[Clip],
    truth: Sequence[int],
    audio: AudioConfig = AudioConfig()
) -> float:
    """Доля клипов, которые проба содержания относит не к своему классу.

    Raises:
        InputError: При разной длине списков или пустом списке
        UsageError: Если проба не обучена
    """
    if len(gens) != len(truth):
        raise InputError(f"{len(gens)} clips for {len(truth)} labels")
    if not gens:
        raise InputError("content_error_rate needs at least one clip")
    errors = [
        probe_classify(probe, _mel(gen, audio), audio) != int(label)
        for gen, label in zip(gens, truth)
    ]
    return float(np.mean(errors))


def speaker_similarity(
    probe: Probe,
    gen: Clip,
    content_prompt: Clip,
    audio: AudioConfig = AudioConfig()
) -> float:
    """Косинус эмбеддингов пробы диктора для результата и промпта содержания."""
    return cosine_similarity(
        probe_embed(probe, _mel(gen, audio), audio),
        probe_embed(probe, _mel(content_prompt, audio), audio),
    )


def scene_transfer_rate(
    outputs: np.ndarray,
    references: np.ndarray,
    contents: np.ndarray
) -> float:
    """Доля элементов, где эмбеддинг результата ближе к референсу, чем
    к сцене промпта содержания."""
    outputs, references, contents = map(np.asarray, (outputs, references, contents))
    if not len(outputs) == len(references) == len(contents) or len(outputs) == 0:
        raise InputError("scene_transfer_rate: embedding sets differ in size")
    wins = [
        cosine_similarity(o, r) > cosine_similarity(o, c)
        for o, r, c in zip(outputs, references, contents)
    ]
    return float(np.mean(wins))
