import argparse
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .config import read_run_log
from .exceptions import ConfigError, UsageError
from .validators import StageValidator

# аргументы команд, которые не входят в RunConfig и повторяются при replay
REPLAY_FLAGS: Tuple[Tuple[str, str], ...] = (
    ("splits", "--splits"),
    ("content", "--content"),
    ("ref_audio", "--ref-audio"),
    ("ref_text", "--ref-text"),
    ("out", "--out"),
    ("manifest", "--manifest"),
    ("oracle", "--oracle"),
)


class UsageErrorParser(argparse.ArgumentParser):
    """ArgumentParser, сообщающий об ошибке исключением вместо exit."""

    def error(self, message: str):
        raise UsageError(message)


class CliParser:
    """Парсер аргументов командной строки."""

    def __init__(self):
        """Инициализация парсера с настройкой параметров."""
        self.parser = self._create_parser()

    def _common_options(self) -> argparse.ArgumentParser:
        """Флаги, общие для всех подкоманд."""
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument(
            "--config",
            "-c",
            type=str,
            help="JSON config file (a run_config.json reproduces a run)"
        )
        common.add_argument(
            "--seed",
            type=int,
            help="Global seed (overrides the config and SCENE_TRANSFER_SEED)"
        )
        common.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override a config value, e.g. --set training.vae_steps=100"
        )
        common.add_argument(
            "--data",
            type=str,
            help="Dataset directory (paths.data_dir)"
        )
        common.add_argument(
            "--bundle",
            type=str,
            help="Model bundle directory (paths.bundle_dir)"
        )
        verbosity = common.add_mutually_exclusive_group()
        verbosity.add_argument(
            "--verbose",
            "-v",
            action="store_true",
            help="Debug logging"
        )
        verbosity.add_argument(
            "--quiet",
            "-q",
            action="store_true",
            help="Only warnings, no progress bars"
        )
        return common

    def _create_parser(self) -> argparse.ArgumentParser:
        """Создает и настраивает парсер аргументов.

        Returns:
            argparse.ArgumentParser: Настроенный парсер
        """
        parser = UsageErrorParser(
            description="Acoustic scene transfer with a conditional latent "
                        "diffusion model",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
        Examples:
            %(prog)s simulate --data data
            %(prog)s train vae --data data --bundle bundle
            %(prog)s transfer --content in.wav --ref-audio ref.wav --out out/speech
            %(prog)s transfer --content in.wav --ref-text "A female speaks in a hall"
            %(prog)s evaluate --bundle bundle --out reports
            %(prog)s replay out/run_config.json
                    """
                )
        common = self._common_options()
        commands = parser.add_subparsers(dest="command", required=True)

        simulate = commands.add_parser(
            "simulate", parents=[common],
            help="Synthesize the dataset and write manifests"
        )
        simulate.add_argument(
            "--splits",
            nargs="+",
            choices=["train", "eval"],
            default=["train", "eval"],
            help="Splits to build"
        )

        train = commands.add_parser(
            "train", parents=[common], help="Train one stage"
        )
        train.add_argument(
            "stage",
            choices=StageValidator.AVAILABLE_STAGES,
            help="Stage to train (ldm requires vae and scene)"
        )

        transfer = commands.add_parser(
            "transfer", parents=[common],
            help="Move a speech clip into the reference scene"
        )
        transfer.add_argument(
            "--content",
            required=True,
            type=str,
            help="Content prompt WAV"
        )
        transfer.add_argument(
            "--ref-audio",
            type=str,
            help="Reference scene WAV"
        )
        transfer.add_argument(
            "--ref-text",
            type=str,
            help='Reference scene caption, e.g. "A female speaks in a hall"'
        )
        transfer.add_argument(
            "--w-ref",
            type=float,
            help="Scene guidance weight (default 1.0)"
        )
        transfer.add_argument(
            "--w-cont",
            type=float,
            help="Content guidance weight (default 1.0)"
        )
        transfer.add_argument(
            "--steps",
            type=int,
            help="DDIM steps (default 100)"
        )
        transfer.add_argument(
            "--out",
            "-o",
            type=str,
            help="Output path stem; writes <out>.wav and <out>.mel"
        )

        evaluate = commands.add_parser(
            "evaluate", parents=[common],
            help="Score the bundle on the evaluation manifest"
        )
        evaluate.add_argument(
            "--manifest",
            type=str,
            help="Evaluation manifest (default <data>/eval_manifest.jsonl)"
        )
        evaluate.add_argument(
            "--out",
            "-o",
            type=str,
            help="Report directory (paths.output_dir)"
        )
        evaluate.add_argument(
            "--modalities",
            nargs="+",
            choices=["audio", "text"],
            help="Reference modalities to score"
        )
        evaluate.add_argument(
            "--steps",
            type=int,
            help="DDIM steps"
        )
        evaluate.add_argument(
            "--vocode",
            action="store_true",
            help="Score Griffin-Lim audio instead of generated mels"
        )
        evaluate.add_argument(
            "--oracle",
            action="store_true",
            help="Use the targets as generated output (metric sanity check)"
        )

        replay = commands.add_parser(
            "replay", help="Rerun a command from its run_config.json"
        )
        replay.add_argument(
            "run_log",
            type=str,
            help="run_config.json written by an earlier command"
        )
        replay_verbosity = replay.add_mutually_exclusive_group()
        replay_verbosity.add_argument("--verbose", "-v", action="store_true",
                                      help="Debug logging")
        replay_verbosity.add_argument("--quiet", "-q", action="store_true",
                                      help="Only warnings, no progress bars")

        return parser

    def parse(self, args: Optional[List[str]] = None) -> argparse.Namespace:
        """Парсит аргументы командной строки.

        Args:
            args: Список аргументов (если None, берутся из sys.argv)

        Returns:
            argparse.Namespace: Объект с распарсенными аргументами

        Raises:
            UsageError: Для неверных аргументов (текст ошибки argparse)
        """
        return self.parser.parse_args(args)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Собирает переопределения конфигурации из флагов.

    Флаги применяются после --set.

    Raises:
        ConfigError: Для --set без знака "="
    """
    overrides: Dict[str, Any] = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        overrides[key.strip()] = _parse_value(value.strip())
    flags = {
        "seed": getattr(args, "seed", None),
        "paths.data_dir": getattr(args, "data", None),
        "paths.bundle_dir": getattr(args, "bundle", None),
        "diffusion.w_ref": getattr(args, "w_ref", None),
        "diffusion.w_cont": getattr(args, "w_cont", None),
        "diffusion.sample_steps": getattr(args, "steps", None),
        "eval.modalities": getattr(args, "modalities", None),
        "eval.vocode": getattr(args, "vocode", None) or None,
    }
    if args.command == "evaluate":
        flags["paths.output_dir"] = args.out
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return overrides


def replay_argv(run_log: Path) -> List[str]:
    """Восстанавливает командную строку по логу запуска.

    Конфигурация (включая зерно и пути) берется из самого лога через
    --config, остальные аргументы команды повторяются как были.

    Raises:
        ConfigError: Если файл не является логом запуска
    """
    payload = read_run_log(run_log)
    logged: Dict[str, Any] = payload["args"]
    argv = [payload["command"]]
    if payload["command"] == "train":
        if not logged.get("stage"):
            raise ConfigError(f"{run_log} has no recorded train stage")
        argv.append(logged["stage"])
    for key, flag in REPLAY_FLAGS:
        value = logged.get(key)
        if value is None or value is False:
            continue
        if value is True:
            argv.append(flag)
        elif isinstance(value, list):
            argv += [flag, *map(str, value)]
        else:
            argv += [flag, str(value)]
    return argv + ["--config", str(run_log)]
