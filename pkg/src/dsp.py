"""Детерминированная обработка сигналов: STFT, лог-мел, Griffin-Lim,
свертка с RIR, смешивание по SNR и нарезка клипов."""
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import List, Optional, Tuple, Union

import librosa
import numpy as np
from scipy import signal

from .config import AudioConfig
from .exceptions import InputError

DEFAULT_SAMPLE_RATE = 16000
_AUDIO = AudioConfig()


@dataclass(frozen=True, eq=False)
class Waveform:
    """Моно сигнал во временной области.

    Attributes:
        samples: Отсчеты в [-1, 1]
        sample_rate: Частота дискретизации, Гц
    """
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InputError("Waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def rms(self) -> float:
        if self.num_samples == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples.astype(np.float64) ** 2)))

    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if self.num_samples else 0.0


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """Лог-мел спектрограмма [n_mels, T].

    Attributes:
        values: Натуральный логарифм мел-мощности, не ниже log(floor)
        hop_seconds: Шаг кадров
        frame_seconds: Длина окна
        floor: Линейный порог мощности перед логарифмом
    """
    values: np.ndarray
    hop_seconds: float = 0.010
    frame_seconds: float = 0.064
    floor: float = 1e-5

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise InputError(f"Mel values must be 2-d, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def log_floor(self) -> float:
        return float(np.log(self.floor))


@dataclass(frozen=True, eq=False)
class RIR:
    """Импульсная характеристика помещения (нормирована по энергии).

    Attributes:
        taps: Отсчеты отклика
        t60_seconds: Время спада на 60 дБ; при 0 единичный отсчет
    """
    taps: np.ndarray
    t60_seconds: float = 0.0

    def __post_init__(self):
        object.__setattr__(
            self, "taps", np.asarray(self.taps, dtype=np.float64).reshape(-1)
        )

    @property
    def energy(self) -> float:
        return float(np.sum(self.taps ** 2))


# --- Анализ ---

def stft(
    w: Waveform,
    n_fft: int = _AUDIO.n_fft,
    hop_length: int = _AUDIO.hop_length,
    pad_mode: str = "reflect"
) -> np.ndarray:
    """Комплексная STFT с окном Ханна и центрированием.

    Returns:
        np.ndarray: [n_fft/2 + 1, floor(len/hop) + 1]

    Raises:
        InputError: Для пустого сигнала
    """
    if w.num_samples == 0:
        raise InputError("Cannot analyse an empty waveform")
    # отражение невозможно, если сигнал короче половины окна
    if w.num_samples <= n_fft // 2:
        pad_mode = "constant"
    return librosa.stft(
        w.samples, n_fft=n_fft, hop_length=hop_length, window="hann",
        center=True, pad_mode=pad_mode
    )


def istft(
    spectrum: np.ndarray,
    length: int,
    n_fft: int = _AUDIO.n_fft,
    hop_length: int = _AUDIO.hop_length,
    sample_rate: int = DEFAULT_SAMPLE_RATE
) -> Waveform:
    """Обратная STFT (оценка наименьших квадратов по перекрытию окон)."""
    samples = librosa.istft(
        spectrum, hop_length=hop_length, n_fft=n_fft, window="hann",
        center=True, length=length
    )
    return Waveform(samples.astype(np.float32), sample_rate)


@lru_cache(maxsize=8)
def mel_filterbank(
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    n_fft: int = _AUDIO.n_fft,
    n_mels: int = _AUDIO.n_mels,
    fmin: float = _AUDIO.fmin,
    fmax: float = _AUDIO.fmax
) -> np.ndarray:
    """Треугольный мел-банк по шкале HTK [n_mels, n_fft/2 + 1]."""
    bank = librosa.filters.mel(
        sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax,
        htk=True, norm=None
    )
    bank.setflags(write=False)
    return bank


@lru_cache(maxsize=8)
def _mel_pseudo_inverse(
    sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float
) -> np.ndarray:
    inverse = np.linalg.pinv(
        mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax).astype(np.float64)
    )
    inverse.setflags(write=False)
    return inverse


def wav_to_logmel(w: Waveform, audio: AudioConfig = _AUDIO) -> MelSpectrogram:
    """Лог-мел спектрограмма: мел-банк по мощности, log с порогом,
    число кадров обрезано до кратного 4."""
    power = np.abs(stft(w, audio.n_fft, audio.hop_length)) ** 2
    bank = mel_filterbank(
        w.sample_rate, audio.n_fft, audio.n_mels, audio.fmin, audio.fmax
    )
    mel = bank @ power
    values = np.log(np.maximum(mel, audio.log_floor))
    frames = values.shape[1] - values.shape[1] % 4
    if frames == 0:
        raise InputError(
            f"Waveform of {w.num_samples} samples gives fewer than 4 frames"
        )
    return MelSpectrogram(
        values[:, :frames],
        hop_seconds=audio.hop_length / w.sample_rate,
        frame_seconds=audio.n_fft / w.sample_rate,
        floor=audio.log_floor,
    )


# --- Синтез ---

def mel_to_magnitude(
    m: MelSpectrogram,
    audio: AudioConfig = _AUDIO,
    sample_rate: int = DEFAULT_SAMPLE_RATE
) -> np.ndarray:
    """Линейная амплитудная спектрограмма через псевдообратный мел-банк.

    Порог вычитается, поэтому кадры на пороге дают нулевую амплитуду.
    """
    mel_power = np.maximum(np.exp(m.values.astype(np.float64)) - m.floor, 0.0)
    inverse = _mel_pseudo_inverse(
        sample_rate, audio.n_fft, m.n_mels, audio.fmin, audio.fmax
    )
    return np.sqrt(np.maximum(inverse @ mel_power, 0.0))


def logmel_error(w: Waveform, m: MelSpectrogram, audio: AudioConfig = _AUDIO) -> float:
    """Средняя абсолютная ошибка лог-мела сигнала w относительно m."""
    analysed = wav_to_logmel(w, replace(audio, n_mels=m.n_mels)).values
    frames = min(analysed.shape[1], m.n_frames)
    diff = analysed[:, :frames].astype(np.float64) - m.values[:, :frames]
    return float(np.mean(np.abs(diff)))


def griffin_lim(
    m: MelSpectrogram,
    iters: int = _AUDIO.griffin_lim_iters,
    seed: int = 0,
    audio: AudioConfig = _AUDIO,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    return_history: bool = False
) -> Union[Waveform, Tuple[Waveform, List[float]]]:
    """Восстановление сигнала по лог-мелу алгоритмом Griffin-Lim.

    Возвращается лучшее по ошибке лог-мела приближение, поэтому результат
    не хуже начального (случайные фазы) и история не возрастает.

    Args:
        m: Лог-мел спектрограмма
        iters: Число итераций
        seed: Зерно начальных фаз
        return_history: Вернуть также ошибку лог-мела по итерациям

    Returns:
        Waveform длиной (T - 1) * hop; при return_history еще и список
        из iters + 1 значений logmel_error лучшего приближения
    """
    magnitude = mel_to_magnitude(m, audio, sample_rate)
    frames = magnitude.shape[1]
    length = max((frames - 1) * audio.hop_length, 1)
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(magnitude.shape))

    best = istft(magnitude * angles, length, audio.n_fft, audio.hop_length,
                 sample_rate)
    best_error = logmel_error(best, m, audio)
    history = [best_error]
    w = best
    for _ in range(max(iters, 1)):
        rebuilt = stft(w, audio.n_fft, audio.hop_length, pad_mode="constant")
        angles = np.exp(1j * np.angle(rebuilt[:, :frames]))
        w = istft(magnitude * angles, length, audio.n_fft,
                  audio.hop_length, sample_rate)
        error = logmel_error(w, m, audio)
        if error <= best_error:
            best, best_error = w, error
        history.append(best_error)

    samples = best.samples
    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak
    out = Waveform(samples, sample_rate)
    if return_history:
        return out, history
    return out


# --- Акустические преобразования ---

def convolve_rir(w: Waveform, h: RIR) -> Waveform:
    """Линейная свертка с RIR, обрезанная до длины входа.

    Пиковое значение выхода приводится к пику входа.

    Raises:
        InputError: Для пустой RIR
    """
    if h.taps.size == 0:
        raise InputError("RIR has no taps")
    x = w.samples.astype(np.float64)
    if h.taps.size == 1:
        wet = x * h.taps[0]
    else:
        wet = signal.convolve(x, h.taps, mode="full")[:x.size]
    peak_in = float(np.max(np.abs(x))) if x.size else 0.0
    peak_out = float(np.max(np.abs(wet))) if wet.size else 0.0
    if peak_out > 0.0 and peak_out != peak_in:
        wet = wet * (peak_in / peak_out)
    return Waveform(wet.astype(np.float32), w.sample_rate)


def rms(samples: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.asarray(samples, dtype=np.float64) ** 2)))


def snr_gain(speech: Waveform, noise: Waveform, snr_db: float) -> float:
    """Усиление шума g = (RMS_s / RMS_n) * 10^(-snr/20).

    Raises:
        InputError: Если речь или шум беззвучны (SNR не определен)
    """
    speech_rms, noise_rms = speech.rms(), noise.rms()
    if speech_rms <= 1e-8 or noise_rms <= 1e-8:
        raise InputError(
            "SNR undefined: speech or noise is silent "
            f"(rms {speech_rms:.2e} / {noise_rms:.2e})"
        )
    return (speech_rms / noise_rms) * 10.0 ** (-snr_db / 20.0)


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Смешивает речь и фон с заданным SNR.

    Шум зацикливается или обрезается до длины речи; при выходе за
    [-1, 1] смесь масштабируется целиком (SNR не меняется).
    """
    looped = np.resize(noise.samples, speech.num_samples)
    looped_noise = Waveform(looped, noise.sample_rate)
    gain = snr_gain(speech, looped_noise, snr_db)
    mixture = (
        speech.samples.astype(np.float64)
        + gain * looped_noise.samples.astype(np.float64)
    )
    peak = float(np.max(np.abs(mixture)))
    if peak > 1.0:
        mixture = mixture / peak
    return Waveform(mixture.astype(np.float32), speech.sample_rate)


def chunk_or_pad(
    w: Waveform,
    target_seconds: float,
    seed: int = 0
) -> Waveform:
    """Приводит сигнал к точной длительности.

    Длинный сигнал обрезается со случайного (по seed) смещения,
    короткий дополняется нулями в конце.
    """
    if target_seconds <= 0:
        raise InputError(f"target_seconds must be positive, got {target_seconds}")
    target = int(round(target_seconds * w.sample_rate))
    if w.num_samples == target:
        return w
    if w.num_samples > target:
        offset = int(np.random.default_rng(seed).integers(
            0, w.num_samples - target + 1
        ))
        return Waveform(w.samples[offset:offset + target], w.sample_rate)
    padded = np.zeros(target, dtype=np.float32)
    padded[:w.num_samples] = w.samples
    return Waveform(padded, w.sample_rate)
