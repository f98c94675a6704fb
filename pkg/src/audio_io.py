"""Чтение и запись WAV (PCM 16 бит, моно)."""
from pathlib import Path

import numpy as np
import soundfile as sf

from .dsp import Waveform
from .exceptions import AudioFileError


def write_wav(path: Path, w: Waveform) -> Path:
    """Пишет сигнал в WAV PCM_16; значения вне [-1, 1] обрезаются.

    Raises:
        AudioFileError: Если файл не удалось записать
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        sf.write(
            str(path), np.clip(w.samples, -1.0, 1.0), w.sample_rate,
            subtype="PCM_16", format="WAV"
        )
    except (OSError, RuntimeError, sf.LibsndfileError) as e:
        raise AudioFileError(path, str(e)) from e
    return path


def read_wav(path: Path) -> Waveform:
    """Читает моно WAV в Waveform (float32).

    Raises:
        AudioFileError: Если файл отсутствует, поврежден или не моно
    """
    path = Path(path)
    try:
        samples, sample_rate = sf.read(str(path), dtype="float32", always_2d=True)
    except (OSError, RuntimeError, sf.LibsndfileError) as e:
        raise AudioFileError(path, str(e)) from e
    if samples.shape[1] != 1:
        raise AudioFileError(path, f"expected mono audio, got {samples.shape[1]} channels")
    return Waveform(samples[:, 0], int(sample_rate))
