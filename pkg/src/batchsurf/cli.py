"""Command line entry point: ``batchsurf firstpass|refine|surface``."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import BatchSurfError
from .pipeline import STAGES, RunConfig, load_config, with_overrides

EXIT_OK, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="batchsurf",
        description="Chop multi-specimen CT packet scans and surface each specimen as a PLY mesh.",
    )
    parser.add_argument("stage", choices=sorted(STAGES), help="pipeline stage to run")
    parser.add_argument("--config", help="key = value config file; flags below override it")
    parser.add_argument("--input", dest="input_dir", help="directory of packet scans")
    parser.add_argument("--output", dest="output_dir", help="directory for CSV, previews, meshes and reports")
    parser.add_argument("--manifest", dest="manifest_path", help="packet manifest CSV")
    parser.add_argument("--threshold", dest="threshold_hu", type=float, help="segmentation threshold (HU)")
    parser.add_argument("--iso", dest="iso_hu", type=float, help="surfacing iso value (HU)")
    parser.add_argument("--jobs", dest="parallelism", type=int, help="worker threads")
    parser.add_argument("--gifs", dest="emit_gifs", action="store_true", default=None, help="write turntable GIFs")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    log = logging.getLogger("batchsurf")
    try:
        config = load_config(args.config) if args.config else RunConfig()
        config = with_overrides(
            config,
            input_dir=args.input_dir,
            output_dir=args.output_dir,
            manifest_path=args.manifest_path,
            threshold_hu=args.threshold_hu,
            iso_hu=args.iso_hu,
            parallelism=args.parallelism,
            emit_gifs=args.emit_gifs,
        )
        report = STAGES[args.stage](config)
    except (BatchSurfError, ValueError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FATAL
    totals = report.totals()
    log.info(
        "%s done: %d packets, %d fragments surfaced, %d failures, %d warnings in %.1f s",
        args.stage,
        totals["packets"],
        totals["fragments_surfaced"],
        totals["failures"],
        totals["warnings"],
        totals["elapsed_s"],
    )
    return report.exit_code()


if __name__ == "__main__":
    sys.exit(main())
