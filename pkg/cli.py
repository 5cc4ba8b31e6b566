"""
Command-line entry point.

    python cli.py run --config exp.json --out results/ [--format csv|json] [--seed N]
    python cli.py scalability --config exp.json --sizes 50,100,200 --readings 2,4,8 --repeats 10 --out results/
    python cli.py gen-track --spec track.json --out track.json

Exit codes: 0 success, 2 invalid configuration, 1 runtime failure.
PATHSPACE_SEED and PATHSPACE_OUT_DIR override the seed and output directory.
"""
import os

# Timing runs are single threaded
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import List, Optional  # noqa: E402

from pydantic import ValidationError  # noqa: E402

from app.config import configure_logging, get_settings  # noqa: E402
from app.errors import InvalidConfigurationError, PathSpaceError, TrackGenerationError  # noqa: E402
from app.harness import (  # noqa: E402
    apply_overrides,
    emit,
    emit_scalability,
    load_config,
    run_comparison,
    run_scalability,
)
from app.schemas import OutputFormat, TrackSpec  # noqa: E402
from app.simworld import generate_track, save_track  # noqa: E402

logger = logging.getLogger("pathspace.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got '{text}'")


def _parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="pathspace",
        description="Run boundary-spline vs landmark mapping experiments on a simulated circuit.",
    )
    parser.add_argument("--log-level", default=None)
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="per-lap comparison")
    run.add_argument("--config", type=Path, required=True)
    run.add_argument("--out", type=Path)
    run.add_argument("--format", choices=[f.value for f in OutputFormat], default=OutputFormat.CSV.value)
    run.add_argument("--seed", type=int)

    sweep = commands.add_parser("scalability", help="update time against map size")
    sweep.add_argument("--config", type=Path, required=True)
    sweep.add_argument("--sizes", type=_int_list, default=[50, 100, 200, 400, 800])
    sweep.add_argument("--readings", type=_int_list, default=[2, 4, 8])
    sweep.add_argument("--repeats", type=int, default=10)
    sweep.add_argument("--out", type=Path)
    sweep.add_argument("--format", choices=[f.value for f in OutputFormat], default=OutputFormat.CSV.value)
    sweep.add_argument("--seed", type=int)

    track = commands.add_parser("gen-track", help="write a track ground truth as JSON")
    track.add_argument("--spec", type=Path, required=True)
    track.add_argument("--out", type=Path, required=True)
    return parser.parse_args(argv)


def _out_dir(args: argparse.Namespace) -> Path:
    settings = get_settings()
    if args.out is not None:
        return args.out
    if settings.out_dir:
        return Path(settings.out_dir)
    raise InvalidConfigurationError("no output directory: pass --out or set PATHSPACE_OUT_DIR")


def _run(args: argparse.Namespace) -> int:
    config = apply_overrides(load_config(args.config), get_settings(), args.seed)
    out_dir = _out_dir(args)
    result = run_comparison(config)
    fmt = OutputFormat(args.format)
    emit(result.metrics, fmt, out_dir / f"metrics.{fmt.value}")
    for failure in result.failures:
        logger.error("%s stopped at frame %d: %s", failure.backend, failure.frame, failure.detail)
    return EXIT_FAILURE if result.failures else EXIT_OK


def _scalability(args: argparse.Namespace) -> int:
    if args.repeats < 3:
        raise InvalidConfigurationError("--repeats must be at least 3")
    config = apply_overrides(load_config(args.config), get_settings(), args.seed)
    out_dir = _out_dir(args)
    cells = run_scalability(config, args.sizes, args.readings, args.repeats)
    fmt = OutputFormat(args.format)
    emit_scalability(cells, fmt, out_dir / f"scalability.{fmt.value}")
    return EXIT_OK


def _gen_track(args: argparse.Namespace) -> int:
    try:
        spec = TrackSpec.model_validate_json(args.spec.read_text())
    except OSError as exc:
        raise InvalidConfigurationError(f"cannot read spec {args.spec}: {exc}") from exc
    except ValidationError as exc:
        raise InvalidConfigurationError(f"invalid track spec {args.spec}: {exc}") from exc
    truth = generate_track(spec)
    save_track(truth, args.out)
    print(f"Track: {truth.lap_length:.1f} m, {truth.cone_count} cones -> {args.out}")
    return EXIT_OK


COMMANDS = {"run": _run, "scalability": _scalability, "gen-track": _gen_track}


def main(argv: Optional[List[str]] = None) -> int:
    args = _parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (InvalidConfigurationError, TrackGenerationError) as exc:
        logger.error("configuration error: %s", exc.detail)
        return EXIT_CONFIG
    except PathSpaceError as exc:
        logger.error("%s failed: %s", args.command, exc.detail)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
