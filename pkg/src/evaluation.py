"""Оценка переноса по четырем сценариям и двум типам референса."""
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .audio_io import read_wav
from .bundle import ModelBundle, transfer
from .dataset import ManifestRow, missing_scenarios, read_manifest
from .dsp import MelSpectrogram, wav_to_logmel
from .exceptions import InputError, UsageError
from .metrics import (
    content_error_rate, cosine_similarity, fit_gaussian, frechet_distance,
    scene_embedding, scene_transfer_rate, speaker_similarity
)
from .reports import MetricReport
from .scenes import SCENARIOS, sub_seed
from .train_log import progress_bar

logger = logging.getLogger(__name__)

MODALITIES = ("audio", "text")


@dataclass
class ItemResult:
    """Эмбеддинги и метрики одного элемента при одном типе референса."""
    row: ManifestRow
    generated: MelSpectrogram
    gen_embedding: np.ndarray
    target_embedding: np.ndarray
    ref_embedding: np.ndarray
    caption_embedding: np.ndarray
    content_embedding: np.ndarray
    speaker_sim: float


def _load_mel(path: Path, bundle: ModelBundle) -> MelSpectrogram:
    return wav_to_logmel(read_wav(path), bundle.audio)


def evaluate_item(
    bundle: ModelBundle,
    row: ManifestRow,
    base_dir: Path,
    modality: str,
    seed: int,
    oracle: bool = False,
    vocode: bool = False,
    steps: Optional[int] = None
) -> ItemResult:
    """Переносит один элемент и считает его эмбеддинги.

    Args:
        oracle: Использовать цель вместо результата (проверка метрик)
        vocode: Оценивать сигнал Griffin-Lim, а не сгенерированный мел
    """
    reference = _load_mel(base_dir / row.ref_path, bundle)
    content = _load_mel(base_dir / row.content_path, bundle)
    target = _load_mel(base_dir / row.target_path, bundle)
    if oracle:
        generated = target
    else:
        result = transfer(
            bundle, content, reference if modality == "audio" else row.caption,
            seed=sub_seed(seed, row.index), steps=steps, vocode=vocode,
        )
        generated = result.mel
        if vocode:
            generated = wav_to_logmel(result.waveform, bundle.audio)
    encoder, audio = bundle.scene_encoder, bundle.audio
    return ItemResult(
        row=row,
        generated=generated,
        gen_embedding=scene_embedding(encoder, generated, audio),
        target_embedding=scene_embedding(encoder, target, audio),
        ref_embedding=scene_embedding(encoder, reference, audio),
        caption_embedding=scene_embedding(encoder, row.caption, audio),
        content_embedding=scene_embedding(encoder, content, audio),
        speaker_sim=speaker_similarity(bundle.speaker_probe, generated, content, audio),
    )


def summarize_cell(
    bundle: ModelBundle,
    scenario: str,
    modality: str,
    items: Sequence[ItemResult]
) -> MetricReport:
    """Сводит элементы одной ячейки в MetricReport.

    Raises:
        InputError: Если в ячейке меньше двух элементов (FAD не определен)
    """
    gens = np.stack([item.gen_embedding for item in items])
    fad = frechet_distance(
        fit_gaussian(gens),
        fit_gaussian(np.stack([item.target_embedding for item in items])),
    )
    return MetricReport(
        scenario=scenario,
        modality=modality,
        fad=fad,
        scene_sim_audio=float(np.mean([
            cosine_similarity(i.gen_embedding, i.ref_embedding) for i in items
        ])),
        scene_sim_text=float(np.mean([
            cosine_similarity(i.gen_embedding, i.caption_embedding) for i in items
        ])),
        content_error_rate=content_error_rate(
            bundle.content_probe, [i.generated for i in items],
            [i.row.content_id for i in items], bundle.audio,
        ),
        speaker_sim=float(np.mean([i.speaker_sim for i in items])),
        scene_transfer_rate=scene_transfer_rate(
            gens,
            np.stack([i.ref_embedding if modality == "audio" else i.caption_embedding
                      for i in items]),
            np.stack([i.content_embedding for i in items]),
        ),
        n_items=len(items),
    )


def evaluate_scenarios(
    bundle: ModelBundle,
    manifest_path: Path,
    modalities: Sequence[str] = MODALITIES,
    seed: int = 0,
    oracle: bool = False,
    vocode: bool = False,
    steps: Optional[int] = None
) -> List[MetricReport]:
    """Оценивает набор на манифесте: отчет на каждую пару (модальность, сценарий).

    Элементы обрабатываются в порядке манифеста, зерно DDIM каждого
    элемента выводится из seed и номера элемента.

    Raises:
        InputError: Если в манифесте нет какого-либо сценария
        UsageError: Если в наборе нет обученных проб
    """
    if bundle.speaker_probe is None or bundle.content_probe is None:
        raise UsageError("Evaluation needs trained probes (train the 'probes' stage)")
    for modality in modalities:
        if modality not in MODALITIES:
            raise InputError(f"Unknown reference modality '{modality}'")
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    missing = missing_scenarios(rows)
    if missing:
        raise InputError(
            f"Manifest {manifest_path} is missing scenario cell(s): "
            + ", ".join(missing)
        )
    base_dir = manifest_path.parent

    reports = []
    for modality in modalities:
        cells: Dict[str, List[ItemResult]] = defaultdict(list)
        with progress_bar(len(rows), f"evaluate:{modality}") as bar:
            for row in rows:
                cells[row.scenario].append(evaluate_item(
                    bundle, row, base_dir, modality, seed, oracle, vocode, steps
                ))
                bar.update(1)
        for scenario in SCENARIOS:
            report = summarize_cell(bundle, scenario, modality, cells[scenario])
            logger.info("%s / %s: FAD %.4f, CER %.3f", scenario, modality,
                        report.fad, report.content_error_rate)
            reports.append(report)
    return reports
