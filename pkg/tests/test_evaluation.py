"""Тесты оценки по сценариям."""
import dataclasses
from pathlib import Path

import pytest

from src.bundle import ModelBundle
from src.dataset import EVAL_SPLIT, MANIFEST_FILENAMES, read_manifest, write_manifest
from src.evaluation import evaluate_scenarios
from src.exceptions import InputError, UsageError
from src.scenes import SCENARIOS


@pytest.fixture(scope="module")
def bundle(trained_bundle: Path) -> ModelBundle:
    return ModelBundle.load(trained_bundle, require_probes=True)


@pytest.fixture(scope="module")
def eval_manifest(tiny_dataset: Path) -> Path:
    return tiny_dataset / MANIFEST_FILENAMES[EVAL_SPLIT]


class TestEvaluateScenarios:
    """Тесты ячеек отчета и проверок входа."""

    def test_oracle_has_zero_distance(self, bundle, eval_manifest):
        reports = evaluate_scenarios(bundle, eval_manifest, oracle=True)
        assert len(reports) == 8
        assert [r.scenario for r in reports] == list(SCENARIOS) * 2
        assert [r.modality for r in reports] == ["audio"] * 4 + ["text"] * 4
        for report in reports:
            assert report.fad == pytest.approx(0.0, abs=1e-4)
            assert report.scene_transfer_rate in (0.0, 0.5, 1.0)
            assert report.n_items == 2

    def test_oracle_needs_no_diffusion(self, bundle, eval_manifest):
        without = dataclasses.replace(bundle, unet=None, content_encoder=None)
        reports = evaluate_scenarios(without, eval_manifest, modalities=["audio"],
                                     oracle=True)
        assert len(reports) == 4

    def test_generated_reports(self, bundle, eval_manifest):
        reports = evaluate_scenarios(bundle, eval_manifest, modalities=["text"],
                                     seed=1, steps=2)
        assert len(reports) == 4
        for report in reports:
            assert report.fad >= 0
            assert 0 <= report.content_error_rate <= 1
            assert 0 <= report.scene_transfer_rate <= 1
            assert -1 <= report.scene_sim_audio <= 1

    def test_generation_is_reproducible(self, bundle, eval_manifest):
        first = evaluate_scenarios(bundle, eval_manifest, modalities=["audio"],
                                   seed=4, steps=2)
        second = evaluate_scenarios(bundle, eval_manifest, modalities=["audio"],
                                    seed=4, steps=2)
        assert [r.to_dict() for r in first] == [r.to_dict() for r in second]

    def test_needs_probes(self, bundle, eval_manifest):
        with pytest.raises(UsageError):
            evaluate_scenarios(dataclasses.replace(bundle, speaker_probe=None),
                               eval_manifest)

    def test_unknown_modality(self, bundle, eval_manifest):
        with pytest.raises(InputError):
            evaluate_scenarios(bundle, eval_manifest, modalities=["video"])

    def test_missing_scenario(self, bundle, eval_manifest, tmp_path):
        rows = [r for r in read_manifest(eval_manifest) if r.scenario != SCENARIOS[3]]
        partial = write_manifest(rows, tmp_path / "partial.jsonl")
        with pytest.raises(InputError, match=SCENARIOS[3]):
            evaluate_scenarios(bundle, partial, oracle=True)


@pytest.mark.slow
class TestDefaultEvaluation:
    """Перенос сцены набором, обученным с конфигурацией по умолчанию."""

    @pytest.fixture(scope="class")
    def reports(self, default_stages, default_config, default_dataset: Path):
        bundle = ModelBundle.load(Path(default_config.paths.bundle_dir),
                                  require_probes=True)
        reports = evaluate_scenarios(bundle,
                                     default_dataset / MANIFEST_FILENAMES[EVAL_SPLIT],
                                     seed=0)
        return {(r.modality, r.scenario): r for r in reports}

    @pytest.mark.parametrize("modality", ["audio", "text"])
    def test_clean_to_env_transfers_scene(self, reports, modality):
        report = reports[(modality, "Clean→Env")]
        assert report.n_items >= 32
        assert report.scene_transfer_rate >= 0.7

    @pytest.mark.parametrize("modality", ["audio", "text"])
    def test_noisy_content_is_harder(self, reports, modality):
        assert reports[(modality, "Env→Clean")].content_error_rate >= \
            reports[(modality, "Clean→Clean")].content_error_rate
