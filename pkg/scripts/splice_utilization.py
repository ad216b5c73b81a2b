"""Occupancy grids and utilization for the three-row demo manifest, with and
without splicing. Same numbers as ``crossutt plan`` on tests/data/splice_demo.tsv."""

import argparse
import os

from crossutt.scheduler import plan, read_manifest, render_grid, utilization

DEFAULT = os.path.join(os.path.dirname(__file__), os.pardir, "tests", "data", "splice_demo.tsv")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--manifest", default=DEFAULT)
    ap.add_argument("--rows", type=int, default=3)
    ap.add_argument("--capacity", type=int, default=7)
    ap.add_argument("--window", type=int, default=5)
    args = ap.parse_args()

    m = read_manifest(args.manifest)
    for splicing in (False, True):
        p = plan(m, args.rows, args.capacity, splicing)
        u = utilization(p, args.window)
        steps = min(args.window, p.num_steps)
        print(f"splicing={splicing}: {p.num_steps} steps in total")
        print(render_grid(p, args.window), end="")
        print(f"  {p.filled_frames(steps)} / {args.rows * args.capacity * steps} frames = {u:.1%}\n")


if __name__ == "__main__":
    main()
