"""Журнал обучения (train_log.json) и индикатор прогресса."""
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional

from tqdm import tqdm

from .exceptions import AudioFileError, NumericalError

logger = logging.getLogger(__name__)

TRAIN_LOG_FILENAME = "train_log.json"
_QUIET = {"enabled": False}


def set_quiet(quiet: bool) -> None:
    """Глобально отключает индикаторы прогресса (флаг --quiet)."""
    _QUIET["enabled"] = quiet


def progress_bar(total: int, desc: str) -> tqdm:
    """tqdm, отключенный вне терминала и в тихом режиме."""
    disable = _QUIET["enabled"] or not sys.stderr.isatty()
    return tqdm(total=total, desc=desc, disable=disable, leave=False)


class TrainingLog:
    """Потери по шагам с периодической записью.

    Args:
        stage: Имя стадии (для сообщений)
        log_every: Период записи (не больше 100 шагов)
    """

    def __init__(self, stage: str, log_every: int = 50):
        self.stage = stage
        self.log_every = max(1, min(int(log_every), 100))
        self.entries: List[Dict] = []
        self._window: List[float] = []

    def record(self, step: int, loss: float, total_steps: int, **extra) -> None:
        """Учитывает потери шага; запись делается на первом шаге, каждые
        log_every шагов и на последнем шаге.

        Raises:
            NumericalError: Если потери не конечны
        """
        if not math.isfinite(loss):
            raise NumericalError(
                f"Stage '{self.stage}' diverged at step {step}: loss={loss}"
            )
        self._window.append(loss)
        if step == 1 or step % self.log_every == 0 or step == total_steps:
            entry = {
                "step": step,
                "loss": loss,
                "smoothed_loss": sum(self._window) / len(self._window),
            }
            entry.update(extra)
            self.entries.append(entry)
            self._window = []
            logger.debug("%s step %d: loss %.5f", self.stage, step, loss)

    @property
    def first_loss(self) -> Optional[float]:
        return self.entries[0]["smoothed_loss"] if self.entries else None

    @property
    def last_loss(self) -> Optional[float]:
        return self.entries[-1]["smoothed_loss"] if self.entries else None

    def write(self, directory: Path, summary: Optional[Dict] = None) -> Path:
        """Пишет {"stage", "entries", "summary"} в train_log.json.

        Raises:
            AudioFileError: Если файл не удалось записать
        """
        path = Path(directory) / TRAIN_LOG_FILENAME
        payload = {
            "stage": self.stage,
            "entries": self.entries,
            "summary": summary or {},
        }
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        except OSError as e:
            raise AudioFileError(path, str(e)) from e
        return path
