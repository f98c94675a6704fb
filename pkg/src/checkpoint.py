"""Формат чекпоинтов: manifest.json + один little-endian f32 blob."""
import json
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .exceptions import AudioFileError

MANIFEST_FILENAME = "manifest.json"
BLOB_FILENAME = "params.bin"
CONFIG_FILENAME = "config.json"
CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(
    directory: Path,
    state: Dict[str, np.ndarray],
    config: Optional[Dict[str, Any]] = None
) -> Path:
    """Сохраняет параметры в каталог.

    Args:
        directory: Каталог чекпоинта (создается при необходимости)
        state: Имя параметра -> массив
        config: JSON-конфигурация компонента (размерности, словарь)

    Returns:
        Path: Каталог чекпоинта

    Raises:
        AudioFileError: Если каталог недоступен для записи
    """
    directory = Path(directory)
    entries = []
    offset = 0
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / BLOB_FILENAME).open("wb") as blob:
            for name in sorted(state):
                values = np.ascontiguousarray(state[name], dtype="<f4")
                raw = values.tobytes()
                entries.append({
                    "name": name,
                    "shape": list(values.shape),
                    "offset": offset,
                    "nbytes": len(raw),
                })
                blob.write(raw)
                offset += len(raw)
        manifest = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "dtype": "float32-le",
            "parameters": entries,
        }
        (directory / MANIFEST_FILENAME).write_text(
            json.dumps(manifest, indent=2), encoding="utf-8"
        )
        if config is not None:
            (directory / CONFIG_FILENAME).write_text(
                json.dumps(config, indent=2, sort_keys=True), encoding="utf-8"
            )
    except OSError as e:
        raise AudioFileError(directory, str(e)) from e
    return directory


def load_checkpoint(directory: Path) -> Dict[str, np.ndarray]:
    """Читает параметры из каталога чекпоинта.

    Raises:
        AudioFileError: Если manifest или blob отсутствуют/повреждены
    """
    directory = Path(directory)
    try:
        manifest = json.loads(
            (directory / MANIFEST_FILENAME).read_text(encoding="utf-8")
        )
        raw = (directory / BLOB_FILENAME).read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise AudioFileError(directory, f"unreadable checkpoint: {e}") from e

    state = {}
    for entry in manifest.get("parameters", []):
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(raw):
            raise AudioFileError(
                directory, f"blob truncated at parameter {entry['name']}"
            )
        values = np.frombuffer(raw[start:start + nbytes], dtype="<f4")
        state[entry["name"]] = values.reshape(entry["shape"]).astype(np.float32)
    return state


def load_component_config(directory: Path) -> Dict[str, Any]:
    path = Path(directory) / CONFIG_FILENAME
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise AudioFileError(path, f"unreadable component config: {e}") from e


def has_checkpoint(directory: Path) -> bool:
    directory = Path(directory)
    return (directory / MANIFEST_FILENAME).is_file() and (
        directory / BLOB_FILENAME
    ).is_file()
