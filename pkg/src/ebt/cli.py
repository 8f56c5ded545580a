"""Command-line entry point: ``ebt <command> --project DIR [options]``.

Commands are the pipeline stages, ``ingest`` (replace the target footage with
external PPM frames and landmark text) and ``all``.

Exit codes: 0 ok, 1 I/O or file-format failure, 2 usage, 3 configuration,
4 missing stage, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .audio_features import WavError
from .config import ConfigError, PipelineConfig, load_config
from .face_model import FitError
from .id_removal import TrainingError
from .raster import PpmError
from .render_compose import BlendError
from .storage import ModelFormatError

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_CONFIG, EXIT_STAGE, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5
COMMANDS = pipeline.STAGES + ("ingest", "all")

log = logging.getLogger("ebt")


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ebt", description="Audio-driven mouth re-synthesis pipeline.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--project", required=True, help="project directory")
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--source-audio", help="driving WAV for 'drive' (default: the project's synthetic source)")
    ap.add_argument("--frames", help="PPM frame directory for 'ingest'")
    ap.add_argument("--landmarks", help="landmark text file for 'ingest'")
    ap.add_argument("--blink", help="optional per-frame blink values for 'ingest'")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def requested_config(args) -> PipelineConfig | None:
    """The config named on the command line, or ``None`` when neither --config nor --seed is given."""
    if args.config is None and args.seed is None:
        return None
    cfg = load_config(args.config) if args.config else PipelineConfig()
    return cfg.replace(seed=args.seed) if args.seed is not None else cfg


def run(args) -> None:
    cfg = requested_config(args)
    if args.command in ("synth", "all"):
        cfg = cfg or PipelineConfig()
        if args.command == "all":
            report = pipeline.run_all(args.project, cfg, args.source_audio)
            if report is not None:
                sys.stdout.write(report.to_text())
            return
        pipeline.cmd_synth(args.project, cfg)
        return
    if cfg is not None and args.config is None:
        # --seed alone only has to agree with the snapshot's seed
        proj = pipeline.open_project(args.project)
        if proj.config.seed != args.seed:
            raise ConfigError(f"--seed {args.seed} differs from the project seed {proj.config.seed}")
    else:
        proj = pipeline.open_project(args.project, cfg)
    if args.source_audio is not None and args.command != "drive":
        raise ConfigError("--source-audio only applies to 'drive'")
    if args.command == "ingest":
        if not (args.frames and args.landmarks):
            raise UsageError("'ingest' needs --frames and --landmarks")
        n = pipeline.cmd_ingest(proj, args.frames, args.landmarks, args.blink)
        sys.stdout.write(f"frames={n}\n")
    elif args.command == "drive":
        pipeline.cmd_drive(proj, args.source_audio)
    elif args.command == "eval":
        report = pipeline.cmd_eval(proj)
        sys.stdout.write(report.to_text() if report is not None else "no ground truth for this output\n")
    else:
        stats = pipeline.COMMANDS[args.command](proj)
        if isinstance(stats, dict):
            sys.stdout.write("".join(f"{k}={v}\n" for k, v in stats.items()))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except UsageError as exc:
        log.error("usage: %s", exc)
        return EXIT_USAGE
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except pipeline.MissingStageError as exc:
        log.error("missing stage: %s", exc)
        return EXIT_STAGE
    except (FitError, TrainingError, BlendError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (OSError, WavError, PpmError, ModelFormatError) as exc:
        log.error("I/O: %s", exc)
        return EXIT_IO
    except ValueError as exc:  # inconsistent input data
        log.error("input: %s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
