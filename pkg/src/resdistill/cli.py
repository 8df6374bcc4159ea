"""Command-line front end for the distillation pipeline.

Every subcommand runs the stage chain up to its stage, so completed work is
reused through the content-addressed stage directories and an interrupted run
resumes after the last finished stage.

    resdistill pipeline --config run.yaml --out runs/
    resdistill score --set scoring.mode=learned
    resdistill sweep --set "sweep.p=[0.01, 0.02, 0.05]"

The output root comes from --out, else the RESDISTILL_OUT_ROOT environment
variable, else ./runs. Exit code is 0 only when every requested stage finished.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .errors import ConfigurationError
from .pipeline import PipelineConfig, STAGES, run_pipeline, run_sweep

ENV_OUT_ROOT = "RESDISTILL_OUT_ROOT"


def parse_set(values: list[str]) -> dict:
    """Parse repeated --set key=value flags; values use YAML scalar syntax."""
    out = {}
    for item in values:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"--set {key}: unparseable value {raw!r}: {exc}") from exc
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resdistill",
        description="Entropy-guided dataset distillation for image restoration.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="YAML config file (defaults apply for missing keys)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path; repeatable")
    common.add_argument("--out", type=Path, default=None,
                        help=f"output root (default: ${ENV_OUT_ROOT} or ./runs)")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common],
                       help=f"run stages up to and including {stage!r}")
    sub.add_parser("pipeline", parents=[common], help="run every stage")
    sub.add_parser("sweep", parents=[common],
                   help="run the configured sweep axes plus a full-set baseline")
    return parser


def load_config(args) -> PipelineConfig:
    if args.config is not None:
        config = PipelineConfig.from_yaml(args.config)
    else:
        config = PipelineConfig.resolve({})
    overrides = parse_set(args.set)
    if overrides:
        config = config.with_overrides(overrides)
    return config


def resolve_out_root(args) -> Path:
    if args.out is not None:
        return args.out
    env = os.environ.get(ENV_OUT_ROOT)
    if env:
        return Path(env)
    return Path("runs")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args)
        out_root = resolve_out_root(args)
        if args.command == "sweep":
            result = run_sweep(config, out_root)
            print(f"sweep report: {result['report_dir']}")
            for name, (rows, _) in sorted(result["tables"].items()):
                print(f"  {name}: {len(rows)} rows")
            return 0
        stop_after = None if args.command == "pipeline" else args.command
        report = run_pipeline(config, out_root, stop_after=stop_after)
        for stage in report.executed:
            print(f"ran     {stage}: {report.stage_dirs[stage]}")
        for stage in report.reused:
            print(f"reused  {stage}: {report.stage_dirs[stage]}")
        if report.summary:
            print(f"psnr={report.summary['psnr']} ssim={report.summary['ssim']} "
                  f"n_train={report.summary['n_train']}")
        return 0
    except Exception as exc:  # noqa: BLE001 - CLI boundary: report and signal failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
