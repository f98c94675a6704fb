from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .bundle import stage_completed
from .exceptions import StageDependencyError, UsageError


class StageValidator:
    """Проверка порядка стадий обучения по чекпоинтам набора."""

    AVAILABLE_STAGES: List[str] = ['vae', 'scene', 'probes', 'ldm']
    DEPENDENCIES: Dict[str, Tuple[str, ...]] = {
        'vae': (),
        'scene': (),
        'probes': (),
        'ldm': ('vae', 'scene'),
        'transfer': ('vae', 'scene', 'ldm'),
        'evaluate': ('vae', 'scene', 'probes', 'ldm'),
    }

    def __init__(self, bundle_dir: Path):
        self.bundle_dir = Path(bundle_dir)

    @classmethod
    def is_valid_stage(cls, stage: str) -> bool:
        """Проверяет корректность имени стадии.

        Args:
            stage: Имя стадии для проверки

        Returns:
            bool: True если стадия известна, иначе False
        """
        return stage in cls.AVAILABLE_STAGES

    def missing(self, target: str) -> List[str]:
        """Стадии, которые должны быть обучены до target, но не обучены."""
        return [
            stage for stage in self.DEPENDENCIES[target]
            if not stage_completed(self.bundle_dir, stage)
        ]

    def require(self, target: str) -> None:
        """Проверяет, что все предшественники target обучены.

        Raises:
            StageDependencyError: С перечнем необученных стадий
        """
        missing = self.missing(target)
        if missing:
            raise StageDependencyError(target, missing)


def validate_reference(
    ref_audio: Optional[str],
    ref_text: Optional[str]
) -> None:
    """Проверяет, что задан ровно один референс: аудио или подпись.

    Raises:
        UsageError: Если заданы оба флага или ни одного
    """
    if (ref_audio is None) == (ref_text is None):
        raise UsageError(
            "Exactly one of --ref-audio and --ref-text must be given"
        )
