"""Algorithmic delay (ms) over a grid of block sizes and subsampling factors, as CSV."""
import argparse
import csv
import sys

from jointasr.blocking import BlockSpec, algorithmic_delay


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--blocks", type=int, nargs="*", default=[8, 16, 20, 32, 40, 60, 80])
    ap.add_argument("--subsample", type=int, nargs="*", default=[1, 2, 4])
    ap.add_argument("--hop", type=int, default=16)
    ap.add_argument("--look-ahead", type=int, default=16)
    ap.add_argument("--frame-ms", type=float, default=10.0)
    args = ap.parse_args()

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["block"] + [f"x{f}" for f in args.subsample])
    for b in args.blocks:
        spec = BlockSpec(b, min(args.hop, b), args.look_ahead, args.frame_ms)
        w.writerow([b] + [f"{algorithmic_delay(spec, f):g}" for f in args.subsample])


if __name__ == "__main__":
    main()
