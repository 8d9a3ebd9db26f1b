"""Command-line entry point: ``avdet <stage> [--config PATH] [--out DIR] [--seed N] [--workers N] [--force]``.

Exit codes: 0 success, 2 invalid configuration, 3 missing or stale artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .pipeline import (
    ConfigInvalid,
    MissingArtifact,
    Run,
    StaleArtifact,
    emit_config,
    load_config,
    run_all,
    run_stage,
)

COMMANDS = {
    "synth": "synth",
    "train-ssl": "ssl",
    "extract": "extract",
    "train-det": "detector",
    "eval": "eval",
}

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON pipeline config (defaults if omitted)")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--workers", type=int, default=1, help="intra-stage threads; never changes results")
    common.add_argument("--force", action="store_true", help="re-run even if outputs are current")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="avdet", description="Audio-visual self-supervised detection pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name in [*COMMANDS, "e2e"]:
        sub.add_parser(name, parents=[common])
    sub.add_parser("show-config", parents=[common], help="print the effective config as TOML")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.workers < 1:
            raise ConfigInvalid("--workers must be at least 1")
        config = load_config(args.config).with_overrides(seed=args.seed, out_dir=args.out)
        if args.command == "show-config":
            sys.stdout.write(emit_config(config))
            return EXIT_OK
        run = Run(config, workers=args.workers)
        if args.command == "e2e":
            ran = run_all(run, force=args.force)
            for stage, did in ran.items():
                print(f"{stage:<9} {'ran' if did else 'skipped'}")
        else:
            did = run_stage(run, COMMANDS[args.command], force=args.force)
            print(f"{COMMANDS[args.command]:<9} {'ran' if did else 'skipped'}")
        report = run.root / "eval" / "report.txt"
        if args.command in ("eval", "e2e") and report.exists():
            sys.stdout.write(report.read_text())
    except ConfigInvalid as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, StaleArtifact) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
