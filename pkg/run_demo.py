"""
Demo Script for the Projection Engine
=====================================
Runs the whole flow on the bundled demo scene:
simulate -> depth -> project -> bench.

Usage:
    python run_demo.py
    python run_demo.py --scene data/demo_scene.txt --workdir demo_out --threshold 0.05
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from app.main import main as run_command


def run_step(title, argv):
    """Run one command; stop the demo on failure."""
    print(f"\n▶️  {title}")
    print("-" * 50)
    status = run_command(argv)
    if status != 0:
        print(f"❌ Step failed with status {status}")
        sys.exit(status)


def main():
    parser = argparse.ArgumentParser(description="End-to-end demo of the projection engine")
    parser.add_argument("--scene", default=os.path.join("data", "demo_scene.txt"), help="Scene file")
    parser.add_argument("--workdir", default="demo_out", help="Directory for all artifacts")
    parser.add_argument("--threshold", default="0.1", help="Heatmap threshold for the project step")
    parser.add_argument("--seed", default="0", help="Simulation seed")
    args = parser.parse_args()

    frame_dir = os.path.join(args.workdir, "frame")
    bev_dir = os.path.join(args.workdir, "bev")

    print("=" * 50)
    print("🚗 Camera Feature Fusion Demo")
    print("=" * 50)

    run_step("Simulating LiDAR sweep and camera heatmaps",
             ["simulate", "--scene", args.scene, "--out", frame_dir, "--seed", args.seed])
    run_step("Completing depth (IP-Basic)", ["depth", "--frame", frame_dir, "--method", "ipbasic"])
    run_step("Completing depth (nearest neighbor)",
             ["depth", "--frame", frame_dir, "--method", "nn", "--out", os.path.join(args.workdir, "nn_depth")])
    run_step("Projecting selected pixels into BEV",
             ["project", "--frame", frame_dir, "--out", bev_dir, "--threshold", args.threshold, "--pgm"])
    run_step("Benchmarking thresholds",
             ["bench", "--frame", frame_dir, "--out", os.path.join(args.workdir, "bench.csv")])

    print("\n✅ Demo complete. Artifacts in", args.workdir)


if __name__ == "__main__":
    main()
