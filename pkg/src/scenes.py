"""Процедурный симулятор акустических сцен: речь, фоны, RIR, подписи."""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from .dsp import DEFAULT_SAMPLE_RATE, RIR, Waveform, convolve_rir, mix_at_snr
from .exceptions import InputError, UsageError

SCENARIOS = ("Clean→Clean", "Clean→Env", "Env→Clean", "Env→Env")
T60_BUCKETS = (0.0, 0.15, 0.3, 0.6)
SPEECH_RMS = 0.1
BABBLE_VOICES = 6

# (F1, F2) в Гц для мужского тракта; formant_shift масштабирует оба
VOWEL_FORMANTS = (
    (730.0, 1090.0),
    (270.0, 2290.0),
    (300.0, 870.0),
    (530.0, 1840.0),
    (570.0, 840.0),
)
FORMANT_BANDWIDTHS = (90.0, 110.0)

F0_BANDS = {"male": (100.0, 140.0), "female": (180.0, 240.0)}


class Gender(str, Enum):
    MALE = "male"
    FEMALE = "female"


class BackgroundKind(str, Enum):
    NONE = "none"
    WHITE = "white"
    PINK = "pink"
    CHIRP_TRAIN = "chirp_train"
    AM_TONE = "am_tone"
    BABBLE = "babble"


class SceneClass(str, Enum):
    CLEAN = "clean"
    NOISY = "noisy"
    REVERBERANT = "reverberant"
    NOISY_REVERBERANT = "noisy_reverberant"


NOISE_KINDS = tuple(k for k in BackgroundKind if k is not BackgroundKind.NONE)
ENV_CLASSES = (
    SceneClass.NOISY, SceneClass.REVERBERANT, SceneClass.NOISY_REVERBERANT
)

QUIET_ROOM = "a quiet room"
PLACE_WORDS: Dict[float, str] = {
    0.0: "an open field",
    0.15: "a small office",
    0.3: "a hall",
    0.6: "a cathedral",
}
SOUND_WORDS: Dict[BackgroundKind, str] = {
    BackgroundKind.WHITE: "static hiss",
    BackgroundKind.PINK: "steady rain",
    BackgroundKind.CHIRP_TRAIN: "chirping birds",
    BackgroundKind.AM_TONE: "an engine hum",
    BackgroundKind.BABBLE: "crowd murmur",
}


def sub_seed(seed: int, *stream: int) -> int:
    """Независимое зерно для подпотока (не зависит от порядка вызовов)."""
    return int(np.random.SeedSequence([int(seed), *stream]).generate_state(1)[0])


def t60_bucket(t60_seconds: float) -> float:
    """Ближайшее табличное значение T60."""
    return min(T60_BUCKETS, key=lambda b: abs(b - t60_seconds))


@dataclass(frozen=True)
class SpeakerSpec:
    """Синтетический диктор.

    Attributes:
        speaker_id: Номер диктора
        gender: Пол (определяет диапазон F0)
        f0_hz: Базовая высота тона
        formant_shift: Множитель формант (длина тракта)
    """
    speaker_id: int
    gender: Gender
    f0_hz: float
    formant_shift: float


def make_speaker(speaker_id: int, n_speakers: int = 8) -> SpeakerSpec:
    """Детерминированный диктор: четные номера мужские, нечетные женские,
    F0 равномерно разнесены внутри полосы пола."""
    if not 0 <= speaker_id < n_speakers:
        raise InputError(f"speaker_id {speaker_id} outside [0, {n_speakers})")
    gender = Gender.MALE if speaker_id % 2 == 0 else Gender.FEMALE
    per_gender = (n_speakers + (1 if gender is Gender.MALE else 0)) // 2
    rank = speaker_id // 2
    fraction = (rank + 0.5) / max(per_gender, 1)
    low, high = F0_BANDS[gender.value]
    base_shift = 1.0 if gender is Gender.MALE else 1.15
    return SpeakerSpec(
        speaker_id=speaker_id,
        gender=gender,
        f0_hz=low + fraction * (high - low),
        formant_shift=base_shift + 0.1 * (fraction - 0.5),
    )


def speaker_roster(n_speakers: int) -> List[SpeakerSpec]:
    return [make_speaker(i, n_speakers) for i in range(n_speakers)]


@dataclass(frozen=True)
class NoteSegment:
    f0_multiplier: float
    duration: float
    vowel: int


@dataclass(frozen=True)
class ContentSpec:
    """Синтетическое «высказывание»: последовательность слогов.

    Attributes:
        content_id: Номер содержания
        segments: Слоги (множитель F0, длительность, гласная)
    """
    content_id: int
    segments: Tuple[NoteSegment, ...]

    @property
    def duration(self) -> float:
        return float(sum(s.duration for s in self.segments))


def make_content(content_id: int, seconds: float) -> ContentSpec:
    """Рисунок слогов, однозначно определяемый content_id.

    Длительности слогов в сумме равны seconds.
    """
    if seconds <= 0:
        raise InputError(f"seconds must be positive, got {seconds}")
    rng = np.random.default_rng(np.random.SeedSequence([content_id, 7919]))
    count = 4 + content_id % 3
    min_duration = min(0.08, seconds / (2 * count))
    shares = rng.dirichlet(np.full(count, 4.0))
    durations = min_duration + (seconds - min_duration * count) * shares
    durations[-1] = seconds - float(durations[:-1].sum())
    multipliers = rng.uniform(0.85, 1.25, size=count)
    vowels = rng.integers(0, len(VOWEL_FORMANTS), size=count)
    return ContentSpec(content_id, tuple(
        NoteSegment(float(m), float(d), int(v))
        for m, d, v in zip(multipliers, durations, vowels)
    ))


def _resonator(x: np.ndarray, freq: float, bandwidth: float, sr: int) -> np.ndarray:
    """Двухполюсный резонатор Клатта с единичным усилением на нуле."""
    c = -math.exp(-2.0 * math.pi * bandwidth / sr)
    b = 2.0 * math.exp(-math.pi * bandwidth / sr) * math.cos(2.0 * math.pi * freq / sr)
    a = 1.0 - b - c
    return signal.lfilter([a], [1.0, -b, -c], x)


def _raised_cosine(length: int, ramp: int) -> np.ndarray:
    envelope = np.ones(length)
    ramp = min(ramp, length // 2)
    if ramp > 0:
        rise = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        envelope[:ramp] = rise
        envelope[length - ramp:] = rise[::-1]
    return envelope


def synth_speech(
    speaker: SpeakerSpec,
    content: ContentSpec,
    seconds: float,
    seed: int,
    sample_rate: int = DEFAULT_SAMPLE_RATE
) -> Waveform:
    """Речеподобный сигнал: пилообразный источник через два формантных
    резонатора, огибающая по слогам.

    Высота тона внутри слога постоянна; seed задает начальную фазу и
    слабый придыхательный шум.

    Raises:
        InputError: Если seconds <= 0
    """
    if seconds <= 0:
        raise InputError(f"seconds must be positive, got {seconds}")
    rng = np.random.default_rng(seed)
    total = int(round(seconds * sample_rate))
    scale = seconds / content.duration
    bounds = np.round(
        np.cumsum([0.0] + [s.duration * scale for s in content.segments])
        * sample_rate
    ).astype(int)
    bounds[-1] = total

    out = np.zeros(total)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ramp = int(0.02 * sample_rate)
    for segment, start, stop in zip(content.segments, bounds[:-1], bounds[1:]):
        length = stop - start
        if length <= 0:
            continue
        f0 = speaker.f0_hz * segment.f0_multiplier
        t = np.arange(length) / sample_rate
        source = signal.sawtooth(phase + 2.0 * np.pi * f0 * t)
        phase = (phase + 2.0 * np.pi * f0 * length / sample_rate) % (2.0 * np.pi)
        source = source + 0.01 * rng.standard_normal(length)
        voiced = source
        for formant, bandwidth in zip(VOWEL_FORMANTS[segment.vowel],
                                      FORMANT_BANDWIDTHS):
            voiced = _resonator(
                voiced, formant * speaker.formant_shift,
                bandwidth * speaker.formant_shift, sample_rate
            )
        out[start:stop] = voiced * _raised_cosine(length, ramp)

    level = np.sqrt(np.mean(out ** 2))
    if level > 0:
        out *= SPEECH_RMS / level
    return Waveform(out.astype(np.float32), sample_rate)


def _babble(seconds: float, rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    total = int(round(seconds * sample_rate))
    mix = np.zeros(total)
    for voice in range(BABBLE_VOICES):
        gender = Gender.MALE if voice % 2 == 0 else Gender.FEMALE
        low, high = F0_BANDS[gender.value]
        speaker = SpeakerSpec(
            speaker_id=-1, gender=gender,
            f0_hz=float(rng.uniform(low, high)) * float(rng.uniform(0.97, 1.03)),
            formant_shift=float(rng.uniform(0.95, 1.2)),
        )
        content = make_content(int(rng.integers(1000, 10 ** 6)), seconds)
        mix += synth_speech(
            speaker, content, seconds, int(rng.integers(2 ** 31)), sample_rate
        ).samples
    return mix


def synth_background(
    kind: BackgroundKind,
    seconds: float,
    seed: int,
    sample_rate: int = DEFAULT_SAMPLE_RATE
) -> Waveform:
    """Фоновый звук единичной RMS.

    Raises:
        UsageError: Для kind=none
        InputError: Если seconds <= 0
    """
    kind = BackgroundKind(kind)
    if kind is BackgroundKind.NONE:
        raise UsageError("synth_background() needs a background kind other than 'none'")
    if seconds <= 0:
        raise InputError(f"seconds must be positive, got {seconds}")
    rng = np.random.default_rng(seed)
    total = int(round(seconds * sample_rate))
    t = np.arange(total) / sample_rate

    if kind is BackgroundKind.WHITE:
        samples = rng.standard_normal(total)
    elif kind is BackgroundKind.PINK:
        spectrum = np.fft.rfft(rng.standard_normal(total))
        freqs = np.fft.rfftfreq(total, d=1.0 / sample_rate)
        shaping = np.zeros_like(freqs)
        shaping[1:] = 1.0 / np.sqrt(freqs[1:])
        samples = np.fft.irfft(spectrum * shaping, n=total)
    elif kind is BackgroundKind.CHIRP_TRAIN:
        period = rng.uniform(0.18, 0.3)
        sweep = 0.6 * period
        f_start = rng.uniform(2000.0, 3000.0)
        local = (t + rng.uniform(0.0, period)) % period
        tone = signal.chirp(
            np.minimum(local, sweep), f0=f_start, t1=sweep,
            f1=f_start + 1500.0, method="linear"
        )
        gate = np.where(local < sweep, np.sin(np.pi * local / sweep) ** 2, 0.0)
        samples = tone * gate
    elif kind is BackgroundKind.AM_TONE:
        carrier = rng.uniform(150.0, 400.0)
        modulation = 1.0 + 0.8 * np.sin(
            2.0 * np.pi * 4.0 * t + rng.uniform(0.0, 2.0 * np.pi)
        )
        samples = modulation * np.sin(2.0 * np.pi * carrier * t)
    else:
        samples = _babble(seconds, rng, sample_rate)

    level = np.sqrt(np.mean(samples ** 2))
    if level <= 0:
        raise InputError(f"Background '{kind.value}' rendered silent")
    return Waveform((samples / level).astype(np.float32), sample_rate)


def synth_rir(
    t60_seconds: float,
    seed: int,
    sample_rate: int = DEFAULT_SAMPLE_RATE
) -> RIR:
    """Синтетическая RIR: прямой звук плюс экспоненциально затухающий шум,
    энергия которого падает на 60 дБ к моменту t60. Нормирована по энергии.

    Raises:
        InputError: Для отрицательного t60
    """
    if t60_seconds < 0:
        raise InputError(f"t60 must be non-negative, got {t60_seconds}")
    if t60_seconds == 0:
        return RIR(np.array([1.0]), 0.0)
    rng = np.random.default_rng(seed)
    length = int(math.ceil(t60_seconds * sample_rate)) + 1
    t = np.arange(length) / sample_rate
    # амплитуда падает в 1000 раз (60 дБ по энергии) за t60
    decay = np.exp(-math.log(1000.0) * t / t60_seconds)
    taps = rng.standard_normal(length) * decay
    taps[0] = 1.0
    taps /= np.sqrt(np.sum(taps ** 2))
    return RIR(taps, t60_seconds)


@dataclass(frozen=True)
class SceneSpec:
    """Акустическая сцена: фон, реверберация, SNR.

    Attributes:
        background_kind: Тип фона
        t60_seconds: Время реверберации
        snr_db: SNR речи к фону (None без фона)
    """
    background_kind: BackgroundKind = BackgroundKind.NONE
    t60_seconds: float = 0.0
    snr_db: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "background_kind", BackgroundKind(self.background_kind))
        if self.t60_seconds < 0:
            raise InputError(f"t60 must be non-negative, got {self.t60_seconds}")
        if self.background_kind is BackgroundKind.NONE:
            object.__setattr__(self, "snr_db", None)
        elif self.snr_db is None:
            raise InputError(
                f"Background '{self.background_kind.value}' needs an snr_db"
            )

    @property
    def is_clean(self) -> bool:
        return self.background_kind is BackgroundKind.NONE and self.t60_seconds == 0

    @property
    def scene_class(self) -> SceneClass:
        noisy = self.background_kind is not BackgroundKind.NONE
        reverberant = self.t60_seconds > 0
        if noisy and reverberant:
            return SceneClass.NOISY_REVERBERANT
        if noisy:
            return SceneClass.NOISY
        if reverberant:
            return SceneClass.REVERBERANT
        return SceneClass.CLEAN

    @property
    def place_word(self) -> str:
        if self.is_clean:
            return QUIET_ROOM
        return PLACE_WORDS[t60_bucket(self.t60_seconds)]

    @property
    def sound_word(self) -> Optional[str]:
        return SOUND_WORDS.get(self.background_kind)


def draw_scene(
    scene_class: SceneClass,
    rng: np.random.Generator,
    snr_range: Tuple[float, float] = (4.0, 20.0),
    t60_values: Sequence[float] = T60_BUCKETS
) -> SceneSpec:
    """Случайная сцена заданного класса."""
    scene_class = SceneClass(scene_class)
    if scene_class is SceneClass.CLEAN:
        return SceneSpec()
    reverb_values = [t for t in t60_values if t > 0]
    if scene_class in (SceneClass.REVERBERANT, SceneClass.NOISY_REVERBERANT) \
            and not reverb_values:
        raise InputError("No positive t60 values configured for reverberant scenes")
    kind, snr_db, t60 = BackgroundKind.NONE, None, 0.0
    if scene_class in (SceneClass.NOISY, SceneClass.NOISY_REVERBERANT):
        kind = NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
        snr_db = float(rng.uniform(*snr_range))
    if scene_class in (SceneClass.REVERBERANT, SceneClass.NOISY_REVERBERANT):
        t60 = float(reverb_values[int(rng.integers(len(reverb_values)))])
    return SceneSpec(kind, t60, snr_db)


def draw_side_scene(
    side: str,
    rng: np.random.Generator,
    snr_range: Tuple[float, float] = (4.0, 20.0),
    t60_values: Sequence[float] = T60_BUCKETS
) -> SceneSpec:
    """Сцена для стороны сценария: "Clean" или "Env" (один из трех
    нечистых классов равновероятно)."""
    if side == "Clean":
        return SceneSpec()
    if side != "Env":
        raise InputError(f"Unknown scenario side '{side}'")
    scene_class = ENV_CLASSES[int(rng.integers(len(ENV_CLASSES)))]
    return draw_scene(scene_class, rng, snr_range, t60_values)


def split_scenario(scenario: str) -> Tuple[str, str]:
    """'Clean→Env' -> ('Clean', 'Env') (сторона содержания, сторона референса)."""
    if scenario not in SCENARIOS:
        raise InputError(f"Unknown scenario '{scenario}'")
    content_side, reference_side = scenario.split("→")
    return content_side, reference_side


def scenario_label(content_scene: SceneSpec, reference_scene: SceneSpec) -> str:
    def side(scene: SceneSpec) -> str:
        return "Clean" if scene.is_clean else "Env"
    return f"{side(content_scene)}→{side(reference_scene)}"


def compose_scene(
    speech: Waveform,
    scene: SceneSpec,
    seed: int
) -> Waveform:
    """Накладывает сцену на чистую речь: RIR, затем фон с заданным SNR.

    Для чистой сцены возвращает вход без изменений.
    """
    if scene.is_clean:
        return speech
    wet = speech
    if scene.t60_seconds > 0:
        wet = convolve_rir(
            speech, synth_rir(scene.t60_seconds, sub_seed(seed, 1), speech.sample_rate)
        )
    if scene.background_kind is not BackgroundKind.NONE:
        noise = synth_background(
            scene.background_kind, speech.duration, sub_seed(seed, 2),
            speech.sample_rate
        )
        wet = mix_at_snr(wet, noise, scene.snr_db)
    return wet


def render_caption(scene: SceneSpec, gender: Gender) -> str:
    """Подпись по шаблону "A [male/female] speaks in [place] with [sound] behind"."""
    gender = Gender(gender)
    caption = f"A {gender.value} speaks in {scene.place_word}"
    if scene.sound_word is not None:
        caption += f" with {scene.sound_word} behind"
    return caption


def parse_caption(caption: str) -> Tuple[Gender, BackgroundKind, float]:
    """Обратное отображение подписи в (пол, фон, T60).

    Raises:
        InputError: Если подпись не соответствует шаблону
    """
    words = caption.strip()
    prefix = "A "
    marker = " speaks in "
    if not words.startswith(prefix) or marker not in words:
        raise InputError(f"Caption does not follow the template: {caption!r}")
    gender_text, rest = words[len(prefix):].split(marker, 1)
    try:
        gender = Gender(gender_text)
    except ValueError as e:
        raise InputError(f"Unknown gender in caption: {gender_text!r}") from e

    kind = BackgroundKind.NONE
    if rest.endswith(" behind") and " with " in rest:
        rest, sound = rest[:-len(" behind")].split(" with ", 1)
        matches = [k for k, word in SOUND_WORDS.items() if word == sound]
        if not matches:
            raise InputError(f"Unknown background in caption: {sound!r}")
        kind = matches[0]
    if rest == QUIET_ROOM and kind is BackgroundKind.NONE:
        return gender, kind, 0.0
    places = [t60 for t60, word in PLACE_WORDS.items() if word == rest]
    if not places:
        raise InputError(f"Unknown place in caption: {rest!r}")
    return gender, kind, places[0]
