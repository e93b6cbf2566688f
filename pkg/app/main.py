"""
Camera Feature Fusion - Main Entry Point
========================================
Command-line front end of the selective camera-to-BEV projection engine.

Usage:
    python -m app.main simulate --scene data/demo_scene.txt --out frame/
    python -m app.main project --frame frame/ --out bev/ --pgm
    python -m app.main bench --frame frame/ --thresholds 0.5,0.1,0.05,0.01,0.0 --out bench.csv
    python -m app.main augment --cloud frame/cloud.cffp --out aug/ --seed 7
    python -m app.main depth --frame frame/ --method nn

Global flags (--seed, --threshold, --cell-size, --stride, --config,
--log-level) may appear before or after the command.
"""

import argparse
import logging
import sys
from typing import Dict, List, Optional

from app.cli import commands
from app.config import load_settings
from app.exceptions import CFFError

logger = logging.getLogger(__name__)

COMMANDS = {
    "simulate": commands.cmd_simulate,
    "project": commands.cmd_project,
    "bench": commands.cmd_bench,
    "augment": commands.cmd_augment,
    "depth": commands.cmd_depth,
}


def _add_global_flags(parser: argparse.ArgumentParser, default=None) -> None:
    parser.add_argument("--seed", type=int, default=default, help="Random seed")
    parser.add_argument("--threshold", type=float, default=default, help="Heatmap threshold in [0, 1]")
    parser.add_argument("--cell-size", type=float, default=default, help="BEV cell size in meters")
    parser.add_argument("--stride", type=int, default=default, help="Image-to-grid stride")
    parser.add_argument("--config", default=default, help="key=value configuration file")
    parser.add_argument("--log-level", default=default, help="DEBUG, INFO, WARNING, ...")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app.main",
        description="Selective camera-feature projection into a LiDAR BEV grid",
    )
    _add_global_flags(parser)

    # Same flags after the command; SUPPRESS keeps them from overwriting earlier values
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, default=argparse.SUPPRESS)

    sub = parser.add_subparsers(dest="command")

    simulate = sub.add_parser("simulate", parents=[common], help="Ray-cast a scene into a frame directory")
    simulate.add_argument("--scene", required=True, help="Scene text file")
    simulate.add_argument("--out", required=True, help="Output frame directory")
    simulate.add_argument("--cameras", type=int, default=None, help="Number of rig cameras")

    project = sub.add_parser("project", parents=[common], help="Fuse one frame into BEV grids")
    project.add_argument("--frame", required=True, help="Frame directory")
    project.add_argument("--out", required=True, help="Output directory")
    project.add_argument("--augment", default=None, help="Augmentation record to replay")
    project.add_argument(
        "--augment-mode", choices=["none", "lidar_only", "aligned"], default="aligned",
        help="Which branches the augmentation moves",
    )
    project.add_argument("--completion", choices=["ipbasic", "nn"], default="ipbasic")
    project.add_argument("--gt-depth", action="store_true", help="Use ground-truth depth instead of completion")
    project.add_argument("--pgm", action="store_true", help="Also write occupancy.pgm")

    bench = sub.add_parser("bench", parents=[common], help="Projection latency per threshold")
    bench.add_argument("--frame", required=True, help="Frame directory")
    bench.add_argument("--thresholds", default="0.5,0.1,0.05,0.01,0.0", help="Comma-separated thresholds")
    bench.add_argument("--repetitions", type=int, default=3, help="Timing repetitions (>= 3)")
    bench.add_argument("--completion", choices=["ipbasic", "nn"], default="ipbasic")
    bench.add_argument("--out", required=True, help="Output CSV")

    augment = sub.add_parser("augment", parents=[common], help="Apply a recorded or sampled augmentation")
    augment.add_argument("--record", default=None, help="Params record (default: sample from --seed)")
    augment.add_argument("--cloud", required=True, help="CFFP point cloud")
    augment.add_argument("--points", default=None, help="CFFT pseudo-point table (N, 5 + C)")
    augment.add_argument("--invert", action="store_true", help="Apply the inverse transform")
    augment.add_argument("--out", required=True, help="Output directory")

    depth = sub.add_parser("depth", parents=[common], help="Complete depth and score it against ground truth")
    depth.add_argument("--frame", required=True, help="Frame directory")
    depth.add_argument("--camera", type=int, default=None, help="Camera index (default: all)")
    depth.add_argument("--method", choices=["ipbasic", "nn"], default="ipbasic")
    depth.add_argument("--out", default=None, help="Output directory (default: the frame directory)")

    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    return {
        "seed": args.seed,
        "threshold": args.threshold,
        "grid.cell_size": args.cell_size,
        "stride": args.stride,
        "log_level": args.log_level,
    }


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, load settings and run one command.

    Returns:
        Process exit status: 0 on success, 1 on a domain error, 2 on usage errors
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    try:
        settings = load_settings(args.config, _overrides(args))
        logging.basicConfig(
            level=settings.log_level.upper(),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        logger.debug("Running %s", args.command)
        COMMANDS[args.command](args, settings)
    except CFFError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
