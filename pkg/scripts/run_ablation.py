"""Train one model per distillation mode and tabulate test CER on both paths.

    python3 scripts/run_ablation.py --config configs/smoke.json --out runs/ablation
"""
import argparse
import json
import os

from jointasr import cli
from jointasr.decode import cerr
from jointasr.trainer import DISTILL_MODES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/smoke.json")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--modes", nargs="*", default=list(DISTILL_MODES), choices=DISTILL_MODES)
    args = ap.parse_args()

    results = {}
    for mode in args.modes:
        out = os.path.join(args.out, mode)
        argv = ["train", "--config", args.config, "--out", out, "--distill", mode, "--eval-splits", "test"]
        if args.seed is not None:
            argv += ["--seed", str(args.seed)]
        if cli.main(argv) != 0:
            raise SystemExit(f"training failed for {mode}")
        with open(os.path.join(out, "summary.json")) as fh:
            results[mode] = json.load(fh)

    base = results.get("none")
    print(f"{'mode':<8} {'streaming':>10} {'rel%':>7} {'full-ctx':>10} {'rel%':>7}")
    for mode, s in results.items():
        cols = []
        for key in ("cer_streaming", "cer_nonstreaming"):
            rel = cerr(base[key], s[key]) if base and base[key] > 0 else float("nan")
            cols.append(f"{s[key]:>10.4f} {rel:>7.2f}")
        print(f"{mode:<8} " + " ".join(cols))
    with open(os.path.join(args.out, "ablation.json"), "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
