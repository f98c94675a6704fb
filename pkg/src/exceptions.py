"""Исключения для приложения."""
from typing import List


class SceneTransferError(Exception):
    """Базовое исключение для ошибок переноса акустической сцены.

    Attributes:
        category: Машиночитаемая категория ошибки для CLI
    """

    category: str = "error"


class TensorShapeError(SceneTransferError):
    """Несовпадение размерностей тензоров."""

    category = "dimension"


class ConfigError(SceneTransferError):
    """Некорректная конфигурация или гиперпараметры."""

    category = "config"


class UsageError(SceneTransferError):
    """Неправильное использование API (порядок вызовов, аргументы)."""

    category = "usage"


class InputError(SceneTransferError):
    """Некорректные входные данные."""

    category = "input"


class NumericalError(SceneTransferError):
    """NaN/Inf или расходящиеся численные процедуры."""

    category = "numerical"


class AudioFileError(SceneTransferError):
    """Ошибка при работе с файлом (WAV, манифест, чекпоинт)."""

    category = "io"

    def __init__(self, file_path: str, message: str):
        self.file_path = str(file_path)
        self.message = message
        super().__init__(
            f"Error processing file {file_path}: {message}"
        )


class StageDependencyError(SceneTransferError):
    """Попытка обучить стадию без обученных предшественников."""

    category = "stage-order"

    def __init__(self, stage: str, missing: List[str]):
        self.stage = stage
        self.missing = list(missing)
        super().__init__(
            f"Stage '{stage}' requires trained stage(s): "
            + ", ".join(self.missing)
        )


class MultipleItemsError(SceneTransferError):
    """Ошибка при генерации нескольких элементов датасета."""

    category = "dataset"

    def __init__(self, failed_items: List[tuple[int, Exception]]):
        self.failed_items = failed_items
        messages = [f"item {index}: {err}" for index, err in failed_items]
        super().__init__(
            "Errors in multiple items:\n" + "\n".join(messages)
        )
