import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from .audio_io import read_wav, write_wav
from .bundle import ModelBundle, transfer, write_mel
from .cli import CliParser, config_overrides, replay_argv
from .config import RunConfig, load_config, seed_source, write_run_log
from .dataset import (
    EVAL_SPLIT, MANIFEST_FILENAMES, build_dataset, manifest_hash,
    read_manifest, scenario_histogram
)
from .diffusion import GuidanceWeights
from .evaluation import evaluate_scenarios
from .exceptions import SceneTransferError, UsageError
from .reports import ScenarioReport, write_reports
from .train_log import set_quiet
from .training import train_stage
from .validators import validate_reference

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    """Настраивает корневой логгер (stderr)."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def echo_run_log(args: argparse.Namespace, config: RunConfig,
                 directory: Path) -> Path:
    """Пишет run_config.json и печатает разрешенную конфигурацию."""
    logged = {k: v for k, v in vars(args).items() if k != "seed_source"}
    path = write_run_log(config, directory, args.command, logged,
                         getattr(args, "seed_source", "default"))
    logger.info("Resolved config: %s", json.dumps(config.to_dict(), sort_keys=True))
    print(f"run log: {path} (seed {config.seed} from "
          f"{getattr(args, 'seed_source', 'default')}, "
          f"config sha256={config.fingerprint()})")
    return path


def cmd_simulate(args: argparse.Namespace, config: RunConfig) -> int:
    """Собирает датасет и печатает гистограмму сценариев."""
    data_dir = Path(config.paths.data_dir)
    manifests = build_dataset(config, data_dir, splits=args.splits)
    for split, path in manifests.items():
        print(f"{split}: {path} sha256={manifest_hash(path)}")
        for scenario, count in scenario_histogram(read_manifest(path)).items():
            print(f"  {scenario:<12}\t{count}")
    echo_run_log(args, config, data_dir)
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    """Обучает одну стадию и печатает итог."""
    bundle_dir = Path(config.paths.bundle_dir)
    result = train_stage(args.stage, config, Path(config.paths.data_dir), bundle_dir)
    if result.first_loss is not None:
        print(f"{result.stage}: loss {result.first_loss:.4f} -> {result.last_loss:.4f}")
    for key, value in sorted(result.summary.items()):
        print(f"  {key}: {value}")
    print(f"checkpoint: {result.directory}")
    echo_run_log(args, config, bundle_dir / "runs" / args.stage)
    return 0


def cmd_transfer(args: argparse.Namespace, config: RunConfig) -> int:
    """Переносит промпт содержания в сцену референса; пишет .wav и .mel."""
    validate_reference(args.ref_audio, args.ref_text)
    bundle = ModelBundle.load(Path(config.paths.bundle_dir))
    content = read_wav(args.content)
    reference = read_wav(args.ref_audio) if args.ref_audio is not None \
        else args.ref_text
    result = transfer(
        bundle, content, reference,
        w=GuidanceWeights(config.diffusion.w_ref, config.diffusion.w_cont),
        seed=config.seed,
        steps=config.diffusion.sample_steps,
        vocode=True,
    )
    stem = Path(args.out) if args.out else Path(config.paths.output_dir) / "transfer"
    mel_path = write_mel(stem.with_suffix(".mel"), result.mel)
    wav_path = write_wav(stem.with_suffix(".wav"), result.waveform)
    print(f"mel: {mel_path}")
    print(f"wav: {wav_path}")
    echo_run_log(args, config, stem.parent)
    return 0


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    """Оценивает набор и пишет report.json и report.txt."""
    bundle = ModelBundle.load(Path(config.paths.bundle_dir), require_probes=True)
    manifest = Path(args.manifest) if args.manifest \
        else Path(config.paths.data_dir) / MANIFEST_FILENAMES[EVAL_SPLIT]
    reports = evaluate_scenarios(
        bundle, manifest,
        modalities=config.eval.modalities,
        seed=config.seed,
        oracle=args.oracle,
        vocode=config.eval.vocode,
        steps=config.diffusion.sample_steps,
    )
    out_dir = Path(config.paths.output_dir)
    write_reports(reports, out_dir, extra={
        "manifest": str(manifest),
        "manifest_sha256": manifest_hash(manifest),
        "seed": config.seed,
        "oracle": args.oracle,
    })
    print(ScenarioReport().generate(reports))
    echo_run_log(args, config, out_dir)
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Точка входа в приложение.

    Returns:
        int: Код возврата (0 - успех, 1 - ошибка, 2 - неверные аргументы,
            130 - прервано пользователем)
    """
    try:
        # Парсинг аргументов командной строки
        cli_parser = CliParser()
        try:
            args = cli_parser.parse(argv)
            if args.command == "replay":
                verbosity = ["--verbose"] if args.verbose else \
                    ["--quiet"] if args.quiet else []
                args = cli_parser.parse(replay_argv(Path(args.run_log)) + verbosity)
        except UsageError as e:
            print(f"error: {e.category}: {e}", file=sys.stderr)
            return 2
        except SystemExit as e:
            return e.code if isinstance(e.code, int) else 2
        setup_logging(args.verbose, args.quiet)
        set_quiet(args.quiet)
        overrides = config_overrides(args)
        config = load_config(args.config, overrides)
        args.seed_source = seed_source(args.config, overrides)
        logger.debug("Resolved config fingerprint %s", config.fingerprint())
        return COMMANDS[args.command](args, config)

    except KeyboardInterrupt:
        print("error: interrupted: operation cancelled by user", file=sys.stderr)
        return 130

    except SceneTransferError as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return 1

    except Exception as e:
        logger.debug("Unexpected failure", exc_info=True)
        print(f"error: internal: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
