"""Utilization with and without splicing over random conversational manifests,
swept over row capacity. Prints one line per capacity."""

import argparse

import numpy as np

from crossutt.scheduler import Manifest, plan, utilization


def random_manifest(rng, conversations, max_utts, max_frames):
    return Manifest.from_lengths({
        f"c{i}": list(rng.integers(1, max_frames + 1, size=int(rng.integers(1, max_utts + 1))))
        for i in range(conversations)})


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=4)
    ap.add_argument("--conversations", type=int, default=16)
    ap.add_argument("--max-utts", type=int, default=12)
    ap.add_argument("--max-frames", type=int, default=100)
    ap.add_argument("--trials", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    print("capacity  no-splice  splice  gain(pp)")
    for mult in (1, 1.5, 2, 3, 4, 6):
        capacity = int(args.max_frames * mult)
        base, spliced = [], []
        for _ in range(args.trials):
            m = random_manifest(rng, args.conversations, args.max_utts, args.max_frames)
            base.append(utilization(plan(m, args.rows, capacity, False)))
            spliced.append(utilization(plan(m, args.rows, capacity, True)))
        b, s = np.mean(base), np.mean(spliced)
        print(f"{capacity:8d}  {b:9.3f}  {s:6.3f}  {100 * (s - b):+8.1f}")


if __name__ == "__main__":
    main()
