"""Тройки (референс, содержание, цель), манифест JSONL и параллельная
сборка датасета."""
import hashlib
import json
import logging
import multiprocessing as mp
from dataclasses import MISSING, asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .audio_io import read_wav, write_wav
from .config import RunConfig
from .dsp import Waveform, wav_to_logmel
from .exceptions import AudioFileError, InputError, MultipleItemsError
from .scenes import (
    SCENARIOS, BackgroundKind, ContentSpec, Gender, SceneSpec, SpeakerSpec,
    compose_scene, draw_side_scene, make_content, make_speaker,
    render_caption, scenario_label, speaker_roster, split_scenario, sub_seed,
    synth_speech
)

logger = logging.getLogger(__name__)

TRAIN_SPLIT = "train"
EVAL_SPLIT = "eval"
SPLITS = (TRAIN_SPLIT, EVAL_SPLIT)
MANIFEST_FILENAMES = {
    TRAIN_SPLIT: "train_manifest.jsonl",
    EVAL_SPLIT: "eval_manifest.jsonl",
}
# непересекающиеся потоки зерен: сцены оценки не встречаются в обучении
_SEED_STREAMS = {TRAIN_SPLIT: 0, EVAL_SPLIT: 1}


@dataclass(frozen=True, eq=False)
class PromptPair:
    """Пример для обучения или оценки.

    Attributes:
        reference: Референсный промпт (целевая сцена)
        content: Промпт содержания
        target: Цель генерации
        ref_scene, content_scene: Сцены промптов
        speaker: Диктор промпта содержания
        content_spec: Содержание промпта содержания
        caption: Подпись референсной сцены
        ref_speaker, ref_content_spec: Диктор и содержание референса,
            если они отличаются (пары оценки)
    """
    reference: Waveform
    content: Waveform
    target: Waveform
    ref_scene: SceneSpec
    content_scene: SceneSpec
    speaker: SpeakerSpec
    content_spec: ContentSpec
    caption: str
    ref_speaker: Optional[SpeakerSpec] = None
    ref_content_spec: Optional[ContentSpec] = None

    @property
    def scenario(self) -> str:
        return scenario_label(self.content_scene, self.ref_scene)


def make_training_triplet(
    speaker: SpeakerSpec,
    content_spec: ContentSpec,
    ref_scene: SceneSpec,
    content_scene: SceneSpec,
    seed: int,
    seconds: float = 1.0,
    sample_rate: int = 16000
) -> PromptPair:
    """Одна чистая речь в двух сценах; цель совпадает с референсом.

    Args:
        speaker: Диктор
        content_spec: Содержание
        ref_scene: Сцена референса (и цели)
        content_scene: Сцена промпта содержания
        seed: Зерно элемента
        seconds: Длительность клипа

    Returns:
        PromptPair: Тройка с target is reference
    """
    speech = synth_speech(
        speaker, content_spec, seconds, sub_seed(seed, 0), sample_rate
    )
    reference = compose_scene(speech, ref_scene, sub_seed(seed, 10))
    content = compose_scene(speech, content_scene, sub_seed(seed, 20))
    return PromptPair(
        reference=reference,
        content=content,
        target=reference,
        ref_scene=ref_scene,
        content_scene=content_scene,
        speaker=speaker,
        content_spec=content_spec,
        caption=render_caption(ref_scene, speaker.gender),
    )


def make_evaluation_pair(
    speaker: SpeakerSpec,
    content_spec: ContentSpec,
    ref_content_spec: ContentSpec,
    ref_scene: SceneSpec,
    content_scene: SceneSpec,
    seed: int,
    seconds: float = 1.0,
    sample_rate: int = 16000,
    ref_speaker: Optional[SpeakerSpec] = None
) -> PromptPair:
    """Пара для оценки: референс это другое высказывание того же пола.

    Цель: речь промпта содержания в сцене референса с той же
    реализацией фона и RIR, что у референса.

    Raises:
        InputError: Если пол дикторов различается или содержание совпадает
    """
    ref_speaker = ref_speaker or speaker
    if ref_speaker.gender is not speaker.gender:
        raise InputError(
            f"Evaluation pair genders differ: {speaker.gender.value} content, "
            f"{ref_speaker.gender.value} reference"
        )
    if ref_content_spec.content_id == content_spec.content_id:
        raise InputError("Evaluation reference must use a different content id")
    speech = synth_speech(
        speaker, content_spec, seconds, sub_seed(seed, 0), sample_rate
    )
    ref_speech = synth_speech(
        ref_speaker, ref_content_spec, seconds, sub_seed(seed, 1), sample_rate
    )
    scene_seed = sub_seed(seed, 10)
    return PromptPair(
        reference=compose_scene(ref_speech, ref_scene, scene_seed),
        content=compose_scene(speech, content_scene, sub_seed(seed, 20)),
        target=compose_scene(speech, ref_scene, scene_seed),
        ref_scene=ref_scene,
        content_scene=content_scene,
        speaker=speaker,
        content_spec=content_spec,
        caption=render_caption(ref_scene, speaker.gender),
        ref_speaker=ref_speaker,
        ref_content_spec=ref_content_spec,
    )


# --- Манифест ---

@dataclass(frozen=True)
class ManifestRow:
    """Строка манифеста; пути относительны каталогу манифеста.

    Поля snr_db, t60, background_kind описывают сцену референса.
    """
    ref_path: str
    content_path: str
    target_path: str
    caption: str
    scenario: str
    speaker_id: int
    content_id: int
    gender: str
    snr_db: Optional[float]
    t60: float
    background_kind: str
    seed: int
    split: str = TRAIN_SPLIT
    index: int = 0
    content_background_kind: str = BackgroundKind.NONE.value
    content_t60: float = 0.0
    content_snr_db: Optional[float] = None
    ref_speaker_id: Optional[int] = None
    ref_content_id: Optional[int] = None

    @property
    def ref_scene(self) -> SceneSpec:
        return SceneSpec(self.background_kind, self.t60, self.snr_db)

    @property
    def content_scene(self) -> SceneSpec:
        return SceneSpec(
            self.content_background_kind, self.content_t60, self.content_snr_db
        )

    @property
    def content_caption(self) -> str:
        return render_caption(self.content_scene, Gender(self.gender))

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict, source: str = "<manifest>") -> "ManifestRow":
        known = {f.name for f in fields(cls)}
        required = {
            f.name for f in fields(cls)
            if f.default is MISSING and f.default_factory is MISSING
        }
        missing = sorted(required - set(data))
        if missing:
            raise InputError(
                f"{source}: manifest row missing field(s) {', '.join(missing)}"
            )
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(
                f"{source}: manifest row has unknown field(s) {', '.join(unknown)}"
            )
        return cls(**data)


def write_manifest(rows: Sequence[ManifestRow], path: Path) -> Path:
    """Пишет JSONL (по строке на пример, ключи отсортированы).

    Raises:
        AudioFileError: Если файл не удалось записать
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row.to_dict(), sort_keys=True,
                                   ensure_ascii=False))
                f.write("\n")
    except OSError as e:
        raise AudioFileError(path, str(e)) from e
    return path


def read_manifest(path: Path) -> List[ManifestRow]:
    """Читает манифест JSONL.

    Raises:
        AudioFileError: Если файл отсутствует или не читается
        InputError: Если строка не является корректной записью
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise AudioFileError(path, str(e)) from e
    rows = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise InputError(f"{path}:{number}: invalid JSON: {e}") from e
        if not isinstance(data, dict):
            raise InputError(f"{path}:{number}: manifest row must be an object")
        rows.append(ManifestRow.from_dict(data, f"{path}:{number}"))
    return rows


def manifest_hash(path: Path) -> str:
    """sha256 манифеста вместе со всеми аудиофайлами, на которые он ссылается."""
    path = Path(path)
    digest = hashlib.sha256()
    try:
        digest.update(path.read_bytes())
        for row in read_manifest(path):
            for relative in (row.ref_path, row.content_path, row.target_path):
                digest.update((path.parent / relative).read_bytes())
    except OSError as e:
        raise AudioFileError(path, str(e)) from e
    return digest.hexdigest()


def scenario_histogram(rows: Sequence[ManifestRow]) -> Dict[str, int]:
    histogram = {scenario: 0 for scenario in SCENARIOS}
    for row in rows:
        histogram[row.scenario] = histogram.get(row.scenario, 0) + 1
    return histogram


def missing_scenarios(rows: Sequence[ManifestRow]) -> List[str]:
    histogram = scenario_histogram(rows)
    return [scenario for scenario in SCENARIOS if histogram[scenario] == 0]


def split_holdout(
    rows: Sequence[ManifestRow],
    fraction: float,
    seed: int
) -> Tuple[List[ManifestRow], List[ManifestRow]]:
    """Делит строки на обучающие и отложенные (детерминированно по seed)."""
    order = np.random.default_rng(sub_seed(seed, 77)).permutation(len(rows))
    held = int(round(fraction * len(rows)))
    if 0 < fraction and held == 0 and len(rows) > 1:
        held = 1
    held_ids = set(order[:held].tolist())
    train = [r for i, r in enumerate(rows) if i not in held_ids]
    holdout = [r for i, r in enumerate(rows) if i in held_ids]
    return train, holdout


# --- Сборка ---

@dataclass(frozen=True)
class ItemPlan:
    """Все случайные решения для одного элемента датасета."""
    index: int
    split: str
    scenario: str
    seed: int
    speaker: SpeakerSpec
    content_spec: ContentSpec
    ref_scene: SceneSpec
    content_scene: SceneSpec
    ref_speaker: Optional[SpeakerSpec] = None
    ref_content_spec: Optional[ContentSpec] = None


def plan_item(config: RunConfig, split: str, seed: int, index: int) -> ItemPlan:
    """Разыгрывает элемент index по зерну hash(seed, split, index).

    Результат не зависит от порядка и числа процессов.
    """
    if split not in SPLITS:
        raise InputError(f"Unknown split '{split}'")
    data = config.data
    per_cell = data.items_per_cell if split == TRAIN_SPLIT \
        else data.eval_items_per_cell
    scenario = SCENARIOS[index // per_cell]
    item_seed = sub_seed(seed, _SEED_STREAMS[split], index)
    rng = np.random.default_rng(item_seed)
    seconds = config.audio.clip_seconds

    speaker = make_speaker(int(rng.integers(data.n_speakers)), data.n_speakers)
    content_id = int(rng.integers(data.n_contents))
    content_side, reference_side = split_scenario(scenario)
    snr_range = (data.snr_min_db, data.snr_max_db)
    content_scene = draw_side_scene(content_side, rng, snr_range, data.t60_values)
    ref_scene = draw_side_scene(reference_side, rng, snr_range, data.t60_values)

    ref_speaker = ref_content_spec = None
    if split == EVAL_SPLIT:
        if data.n_contents < 2:
            raise InputError("Evaluation pairs need at least 2 content ids")
        ref_content_id = (
            content_id + 1 + int(rng.integers(data.n_contents - 1))
        ) % data.n_contents
        ref_content_spec = make_content(ref_content_id, seconds)
        ref_speaker = speaker
        if data.mismatched_speaker:
            candidates = [
                s for s in speaker_roster(data.n_speakers)
                if s.gender is speaker.gender and s.speaker_id != speaker.speaker_id
            ]
            if not candidates:
                raise InputError(
                    f"No other {speaker.gender.value} speaker for a "
                    "mismatched-speaker pair"
                )
            ref_speaker = candidates[int(rng.integers(len(candidates)))]

    return ItemPlan(
        index=index,
        split=split,
        scenario=scenario,
        seed=item_seed,
        speaker=speaker,
        content_spec=make_content(content_id, seconds),
        ref_scene=ref_scene,
        content_scene=content_scene,
        ref_speaker=ref_speaker,
        ref_content_spec=ref_content_spec,
    )


def render_item(plan: ItemPlan, config: RunConfig) -> PromptPair:
    audio = config.audio
    if plan.split == TRAIN_SPLIT:
        return make_training_triplet(
            plan.speaker, plan.content_spec, plan.ref_scene, plan.content_scene,
            plan.seed, audio.clip_seconds, audio.sample_rate
        )
    return make_evaluation_pair(
        plan.speaker, plan.content_spec, plan.ref_content_spec,
        plan.ref_scene, plan.content_scene, plan.seed,
        audio.clip_seconds, audio.sample_rate, ref_speaker=plan.ref_speaker
    )


class DatasetBuilder:
    """Сборщик синтетического корпуса."""

    def __init__(
        self,
        config: RunConfig,
        output_dir: Path,
        num_workers: Optional[int] = None,
        use_multiprocessing: bool = True
    ):
        """Инициализация сборщика.

        Args:
            config: Конфигурация запуска
            output_dir: Каталог датасета (создается при необходимости)
            num_workers: Количество процессов (по умолчанию равно количеству CPU)
            use_multiprocessing: Использовать ли многопроцессорную обработку
        """
        self.config = config
        self.output_dir = Path(output_dir)
        self.num_workers = num_workers or mp.cpu_count()
        self.use_multiprocessing = use_multiprocessing

    def build(self, split: str, seed: int) -> Path:
        """Генерирует все элементы сплита и пишет манифест.

        Args:
            split: "train" или "eval"
            seed: Глобальное зерно

        Returns:
            Path: Путь к манифесту

        Raises:
            AudioFileError: Если каталог недоступен для записи
            MultipleItemsError: Если часть элементов не удалось построить
        """
        per_cell = self.config.data.items_per_cell if split == TRAIN_SPLIT \
            else self.config.data.eval_items_per_cell
        jobs = [(split, seed, index) for index in range(per_cell * len(SCENARIOS))]
        try:
            (self.output_dir / split).mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise AudioFileError(self.output_dir, str(e)) from e

        logger.info("Building %d %s items in %s", len(jobs), split, self.output_dir)
        if self.use_multiprocessing and len(jobs) > 1:
            with mp.Pool(self.num_workers) as pool:
                results = pool.map(self._build_single_item, jobs)
        else:
            results = [self._build_single_item(job) for job in jobs]

        failed = [(index, err) for index, err in results if isinstance(err, Exception)]
        if len(failed) == 1 and isinstance(failed[0][1], AudioFileError):
            raise failed[0][1]
        if failed:
            raise MultipleItemsError(failed)
        rows = [row for _, row in results]
        return write_manifest(rows, self.output_dir / MANIFEST_FILENAMES[split])

    def _build_single_item(self, job: Tuple[str, int, int]):
        """Строит и сохраняет один элемент.

        Returns:
            Tuple[int, ManifestRow | Exception]: Номер и результат или ошибка
        """
        split, seed, index = job
        try:
            plan = plan_item(self.config, split, seed, index)
            pair = render_item(plan, self.config)
            stem = f"{split}/{index:05d}"
            paths = {
                role: f"{stem}_{role}.wav" for role in ("ref", "content", "target")
            }
            write_wav(self.output_dir / paths["ref"], pair.reference)
            write_wav(self.output_dir / paths["content"], pair.content)
            write_wav(self.output_dir / paths["target"], pair.target)
        except Exception as e:  # собираем ошибки всех элементов
            return index, e
        ref, content = pair.ref_scene, pair.content_scene
        return index, ManifestRow(
            ref_path=paths["ref"],
            content_path=paths["content"],
            target_path=paths["target"],
            caption=pair.caption,
            scenario=plan.scenario,
            speaker_id=plan.speaker.speaker_id,
            content_id=plan.content_spec.content_id,
            gender=plan.speaker.gender.value,
            snr_db=ref.snr_db,
            t60=ref.t60_seconds,
            background_kind=ref.background_kind.value,
            seed=plan.seed,
            split=split,
            index=index,
            content_background_kind=content.background_kind.value,
            content_t60=content.t60_seconds,
            content_snr_db=content.snr_db,
            ref_speaker_id=plan.ref_speaker.speaker_id if plan.ref_speaker else None,
            ref_content_id=(
                plan.ref_content_spec.content_id if plan.ref_content_spec else None
            ),
        )


def build_dataset(
    config: RunConfig,
    output_dir: Path,
    seed: Optional[int] = None,
    splits: Sequence[str] = SPLITS
) -> Dict[str, Path]:
    """Собирает сплиты датасета.

    Returns:
        Dict[str, Path]: Сплит -> путь к манифесту
    """
    seed = config.seed if seed is None else seed
    builder = DatasetBuilder(
        config, output_dir,
        num_workers=config.data.num_workers or None,
        use_multiprocessing=config.data.use_multiprocessing,
    )
    return {split: builder.build(split, seed) for split in splits}


# --- Загрузка признаков ---

@dataclass
class MelArrays:
    """Лог-мелы и метки строк манифеста.

    Attributes:
        reference, content, target: [N, n_mels, T]
        captions: Подписи сцен референсов
        content_captions: Подписи сцен промптов содержания
        rows: Исходные строки манифеста
    """
    reference: np.ndarray
    content: np.ndarray
    target: np.ndarray
    captions: List[str]
    content_captions: List[str]
    rows: List[ManifestRow]

    def __len__(self) -> int:
        return len(self.rows)


def load_mel(path: Path, config: RunConfig) -> np.ndarray:
    return wav_to_logmel(read_wav(path), config.audio).values


def load_mel_arrays(
    rows: Sequence[ManifestRow],
    base_dir: Path,
    config: RunConfig
) -> MelArrays:
    """Читает WAV строк манифеста и считает лог-мелы."""
    if not rows:
        raise InputError("No manifest rows to load")
    base_dir = Path(base_dir)
    stacks = {"reference": [], "content": [], "target": []}
    for row in rows:
        stacks["reference"].append(load_mel(base_dir / row.ref_path, config))
        stacks["content"].append(load_mel(base_dir / row.content_path, config))
        stacks["target"].append(load_mel(base_dir / row.target_path, config))
    return MelArrays(
        reference=np.stack(stacks["reference"]),
        content=np.stack(stacks["content"]),
        target=np.stack(stacks["target"]),
        captions=[row.caption for row in rows],
        content_captions=[row.content_caption for row in rows],
        rows=list(rows),
    )


def clean_speech_corpus(
    config: RunConfig,
    seed: int,
    renderings: int,
    stream: int = 0
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Чистая речь для проб: все пары (диктор, содержание) по renderings раз.

    Returns:
        Tuple: Лог-мелы [N, n_mels, T], номера дикторов [N], номера содержаний [N]
    """
    data, audio = config.data, config.audio
    mels, speakers, contents = [], [], []
    for speaker in speaker_roster(data.n_speakers):
        for content_id in range(data.n_contents):
            spec = make_content(content_id, audio.clip_seconds)
            for k in range(renderings):
                speech = synth_speech(
                    speaker, spec, audio.clip_seconds,
                    sub_seed(seed, 500 + stream, speaker.speaker_id, content_id, k),
                    audio.sample_rate,
                )
                mels.append(wav_to_logmel(speech, audio).values)
                speakers.append(speaker.speaker_id)
                contents.append(content_id)
    return np.stack(mels), np.array(speakers), np.array(contents)
