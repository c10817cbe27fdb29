"""Command-line entry point: ``recfusion <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import PipelineConfig, load_config
from .errors import RecFusionError
from .pipeline import STAGES, run_pipeline, run_stage
from .synth import synth_generate, write_corpus

log = logging.getLogger("recfusion")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML key-value config file")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--workers", type=int, help="worker threads (never changes outputs)")
    common.add_argument("--oracle-mode", action="store_true", default=None,
                        help="drive hybrids with measured instead of predicted metrics")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--events", metavar="PATH", help="events.tsv")
    common.add_argument("--songs", metavar="PATH", help="songs.tsv")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="recfusion", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic events.tsv and songs.tsv to --out")
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    pl = sub.add_parser("pipeline", parents=[common], help="run all stages")
    pl.add_argument("--stage", metavar="NAME", help="resume from this stage")
    return p


def _config(args) -> PipelineConfig:
    overrides = {
        "seed": args.seed,
        "workers": args.workers,
        "oracle_mode": args.oracle_mode,
        "out": args.out,
        "events": args.events,
        "songs": args.songs,
    }
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "synth":
            spec = cfg.synth if args.seed is None else replace(cfg.synth, seed=cfg.seed)
            ev, so = write_corpus(synth_generate(spec), cfg.out_dir)
            print(f"wrote {ev} and {so}")
        elif args.command == "pipeline":
            out = run_pipeline(cfg, args.stage)
            print(f"outputs in {Path(out)}")
        else:
            run_stage(cfg, args.command)
    except RecFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
