import json
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import ClassVar, Dict, List, NamedTuple, Optional, Sequence

from .exceptions import AudioFileError, NumericalError

REPORT_JSON = "report.json"
REPORT_TABLE = "report.txt"
MEAN_ROW = "Mean"


@dataclass
class MetricReport:
    """Метрики одной ячейки оценки.

    Attributes:
        scenario: Сценарий переноса ("Clean→Env" и т.п.) или "Mean"
        modality: Тип референса: audio или text
        fad: Расстояние Фреше между эмбеддингами результатов и целей
        scene_sim_audio: Косинус с эмбеддингом референсного клипа
        scene_sim_text: Косинус с эмбеддингом подписи референса
        content_error_rate: Доля ошибок пробы содержания
        speaker_sim: Косинус эмбеддингов пробы диктора
        scene_transfer_rate: Доля результатов, ближе к референсу чем к входу
        n_items: Число элементов ячейки
    """
    STAT_FIELDS: ClassVar[List[str]] = [
        'fad',
        'scene_sim_audio',
        'scene_sim_text',
        'content_error_rate',
        'speaker_sim',
        'scene_transfer_rate',
    ]

    scenario: str
    modality: str
    fad: float
    scene_sim_audio: float
    scene_sim_text: float
    content_error_rate: float
    speaker_sim: float
    scene_transfer_rate: float
    n_items: int

    def __post_init__(self):
        for field in self.STAT_FIELDS:
            value = getattr(self, field)
            if not math.isfinite(value):
                raise NumericalError(
                    f"{self.scenario}/{self.modality}: {field} is {value}"
                )
        if self.n_items < 1:
            raise NumericalError(f"{self.scenario}/{self.modality}: no items")

    @classmethod
    def create_mean(
        cls,
        reports: Sequence['MetricReport'],
        modality: str
    ) -> 'MetricReport':
        """Создает строку со средним по сценариям одной модальности.

        Args:
            reports: Отчеты по сценариям

        Returns:
            MetricReport: Невзвешенное среднее полей, сумма n_items
        """
        return cls(
            scenario=MEAN_ROW,
            modality=modality,
            n_items=sum(r.n_items for r in reports),
            **{
                field: sum(getattr(r, field) for r in reports) / len(reports)
                for field in cls.STAT_FIELDS
            }
        )

    def to_dict(self) -> Dict:
        return asdict(self)


class ColumnReportConfig(NamedTuple):
    """Конфигурация колонки отчета.

    Attributes:
        name: Название колонки в заголовке
        field: Имя поля в MetricReport
        width: Ширина колонки для форматирования
    """
    name: str
    field: str
    width: int


class BaseReport(ABC):
    """Общий интерфейс текстовых отчетов по метрикам."""

    @property
    @abstractmethod
    def data_column_width(self) -> int:
        """Ширина колонки для данных."""
        pass

    @property
    @abstractmethod
    def no_data_message(self) -> str:
        """Сообщение при отсутствии данных."""
        pass

    @abstractmethod
    def generate(self, reports: List[MetricReport]) -> str:
        """Генерирует отчет.

        Args:
            reports: Отчеты по ячейкам

        Returns:
            str: Отформатированная строка с отчетом
        """
        pass


class ScenarioReport(BaseReport):
    """Таблица метрик по сценариям, по блоку на модальность референса,
    со строкой среднего в конце блока."""

    @property
    def data_column_width(self) -> int:
        return 9

    @property
    def no_data_message(self) -> str:
        return "No data available for report."

    @property
    def identifier_columns(self) -> List[ColumnReportConfig]:
        return [
            ColumnReportConfig("SCENARIO", "scenario", 12),
            ColumnReportConfig("REF", "modality", 6),
        ]

    @property
    def stat_columns(self) -> List[ColumnReportConfig]:
        width = self.data_column_width
        return [
            ColumnReportConfig("FAD", "fad", width),
            ColumnReportConfig("SIM_A", "scene_sim_audio", width),
            ColumnReportConfig("SIM_T", "scene_sim_text", width),
            ColumnReportConfig("CER", "content_error_rate", width),
            ColumnReportConfig("SSM", "speaker_sim", width),
            ColumnReportConfig("STR", "scene_transfer_rate", width),
            ColumnReportConfig("N", "n_items", 5),
        ]

    def generate(self, reports: List[MetricReport]) -> str:
        if not reports:
            return self.no_data_message
        lines = [self._get_header()]
        for modality in dict.fromkeys(r.modality for r in reports):
            block = [r for r in reports if r.modality == modality]
            lines.extend(self._format_line(r) for r in block)
            lines.append(self._format_line(MetricReport.create_mean(block, modality)))
        return "\n".join(lines)

    def _get_header(self) -> str:
        columns = [
            f"{col.name:<{col.width}}"
            for col in self.identifier_columns + self.stat_columns
        ]
        return "\t".join(columns)

    def _format_line(self, report: MetricReport) -> str:
        columns = [
            f"{getattr(report, col.field):<{col.width}}"
            for col in self.identifier_columns
        ]
        for col in self.stat_columns:
            value = getattr(report, col.field)
            text = f"{value:.4f}" if isinstance(value, float) else str(value)
            columns.append(f"{text:<{col.width}}")
        return "\t".join(columns)


def write_reports(
    reports: List[MetricReport],
    output_dir: Path,
    extra: Optional[Dict] = None
) -> Dict[str, Path]:
    """Пишет report.json (строки и средние) и report.txt (таблица).

    Raises:
        AudioFileError: Если каталог недоступен для записи
    """
    output_dir = Path(output_dir)
    means = [
        MetricReport.create_mean([r for r in reports if r.modality == m], m)
        for m in dict.fromkeys(r.modality for r in reports)
    ]
    payload = {
        "reports": [r.to_dict() for r in reports],
        "means": [m.to_dict() for m in means],
    }
    payload.update(extra or {})
    paths = {"json": output_dir / REPORT_JSON, "table": output_dir / REPORT_TABLE}
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        paths["json"].write_text(json.dumps(payload, indent=2, ensure_ascii=False),
                                 encoding="utf-8")
        paths["table"].write_text(ScenarioReport().generate(reports) + "\n",
                                  encoding="utf-8")
    except OSError as e:
        raise AudioFileError(output_dir, str(e)) from e
    return paths
