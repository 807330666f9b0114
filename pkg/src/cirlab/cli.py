"""Command-line orchestration for the experiment pipeline.

    cirlab <stage> [--config FILE] [-o DIR] [section.key=value ...]
    cirlab report RUN_DIR

Stages: gen, pretrain, train, probe, merge, eval, sweep, ablate.  The output
directory comes from ``run.out_dir``, overridable with ``-o`` or the
``CIRLAB_OUT`` environment variable.  Exit codes: 0 success, 1 invalid
configuration, 2 runtime failure (diagnostic on stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import load_config
from .errors import CirlabError, ConfigInvalid
from . import pipeline

STAGES = {
    "gen": pipeline.run_gen,
    "pretrain": pipeline.run_pretrain,
    "train": pipeline.run_train,
    "probe": pipeline.run_probe,
    "merge": pipeline.run_merge,
    "eval": pipeline.run_eval,
    "sweep": pipeline.run_sweep,
    "ablate": pipeline.run_ablate,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cirlab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", default=None, help="configuration file")
        p.add_argument("-o", "--out", default=None, help="output directory override")
        p.add_argument("overrides", nargs="*", help="dotted overrides: section.key=value")
    rep = sub.add_parser("report", help="consolidate a run directory")
    rep.add_argument("run_dir", help="directory holding pipeline outputs")
    return parser


def cmd_run(command: str, config_path: str | None, overrides: list[str],
            out_override: str | None = None) -> int:
    cfg = load_config(config_path, overrides)
    out_dir = out_override or os.environ.get("CIRLAB_OUT") or cfg["run"]["out_dir"]
    result = STAGES[command](cfg, Path(out_dir))
    if command == "eval":
        print(json.dumps(result.as_flat_dict(), sort_keys=True, indent=2))
    elif command == "ablate":
        print(json.dumps(result["means"], sort_keys=True, indent=2))
    else:
        for name in result:
            print(f"wrote {Path(out_dir) / name}")
    return 0


def cmd_report(run_dir: str) -> int:
    report = pipeline.run_report(Path(run_dir))
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.run_dir)
        return cmd_run(args.command, args.config, list(args.overrides), args.out)
    except ConfigInvalid as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except CirlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
