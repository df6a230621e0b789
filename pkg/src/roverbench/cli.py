"""Command-line entry point: ``roverbench <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import load_config, validate_config
from .pipeline import run_pipeline
from .validation import ConfigError, RoverBenchError, StageError

COMMAND_STAGES = {
    "gen-terrain": ("terrain",),
    "gen-path": ("path",),
    "simulate": ("simulate",),
    "odom": ("odom",),
    "evaluate": ("eval",),
    "run": ("gen", "simulate", "odom", "eval"),
}

HELP = {
    "gen-terrain": "build the rock-strewn terrain world (OBJ, STL, SDF)",
    "gen-path": "sample the ground-truth path (TUM, SDF actor)",
    "simulate": "ray-cast sensor frames along the path",
    "odom": "run the reference ICP odometry on simulated frames",
    "evaluate": "score an estimated trajectory against ground truth",
    "run": "full pipeline: gen-terrain, gen-path, simulate, odom, evaluate",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration file (defaults when omitted)")
    common.add_argument("--out", type=Path, help="run directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides seed)")
    common.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    common.add_argument("--json", action="store_true", help="machine-readable result on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="roverbench", description=__doc__)
    parser.add_argument("--version", action="version", version=f"roverbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMAND_STAGES:
        p = sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
        if name == "evaluate":
            p.add_argument("--gt", type=Path, help="ground-truth TUM file")
            p.add_argument("--est", type=Path, help="estimated TUM file")
            p.add_argument("--segment-len", type=float, help="drift segment length, m")
            p.add_argument("--align-fraction", type=float, help="leading fraction of pairs used for alignment")
            p.add_argument("--max-dt", type=float, help="timestamp association tolerance, s")
    return parser


def _config(args):
    cfg = load_config(args.config) if args.config else validate_config({}, Path.cwd())
    doc = cfg.data
    changed = False
    if args.seed is not None:
        doc["seed"] = args.seed
        changed = True
    if args.command == "evaluate":
        for attr, key in (("segment_len", "segment_len"), ("align_fraction", "align_fraction"),
                          ("max_dt", "max_dt")):
            if getattr(args, attr) is not None:
                doc["eval"][key] = getattr(args, attr)
                changed = True
        for key in ("gt", "est"):
            value = getattr(args, key)
            if value is not None:
                doc["eval"][key] = str(value.resolve())
                changed = True
    if changed:
        cfg = validate_config(doc, cfg.base_dir)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        run_dir = args.out if args.out is not None else cfg.resolve(cfg["out_dir"])
        result = run_pipeline(cfg, COMMAND_STAGES[args.command], run_dir, force=args.force)
    except ConfigError as exc:
        _fail(args, "config", str(exc), getattr(exc, "pointer", None))
        return 2
    except StageError as exc:
        _fail(args, exc.stage, str(exc))
        return 1
    except RoverBenchError as exc:
        _fail(args, None, str(exc))
        return 1

    payload = {
        "status": "ok",
        "command": args.command,
        "run_dir": str(result.run_dir),
        "ran": result.ran,
        "skipped": result.skipped,
        "config_hash": result.manifest["config_hash"],
    }
    if result.report is not None:
        r = result.report
        payload["metrics"] = {
            "ate_rms": r.ate_rms,
            "ate_median": r.ate_median,
            "drift_rms": r.drift_rms,
            "drift_median": r.drift_median,
            "pairs": r.metadata["pairs"],
        }
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for stage in result.ran:
            print(f"{stage:9s} done")
        for stage in result.skipped:
            print(f"{stage:9s} up to date")
        if result.report is not None:
            print(result.report.summary_text())
        print(f"run directory: {result.run_dir}")
    return 0


def _fail(args, stage, message, pointer=None):
    if args.json:
        out = {"status": "error", "stage": stage, "error": message}
        if pointer:
            out["pointer"] = pointer
        print(json.dumps(out, indent=2, sort_keys=True))
    else:
        print(f"roverbench: error: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
