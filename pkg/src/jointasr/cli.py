"""Command line entry point: train | eval | latency | gen-data | check."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys

from . import checks
from .blocking import BlockSpec, block60_note, algorithmic_delay
from .config import ConfigError, RunConfig, config_hash, dump_config, from_run_dict, load_config, run_dict
from .corpus import corpus_splits, generate, load_manifest, write_corpus
from .decode import corpus_cer, cerr, write_hypotheses
from .model import Model, load_checkpoint, save_checkpoint
from .trainer import DISTILL_MODES, decode_utterances, fit

log = logging.getLogger("jointasr")
SPLITS = ("train", "dev", "test")
MODES = ("streaming", "non-streaming")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(train={"seed": args.seed})
    if getattr(args, "distill", None) is not None:
        cfg = cfg.replace(train={"distill_mode": args.distill})
    if getattr(args, "block", None) is not None:
        cfg = cfg.replace(block={"block_size": args.block})
    if getattr(args, "beam", None) is not None:
        cfg = cfg.replace(decode={"beam": args.beam})
    if getattr(args, "out", None) is not None:
        cfg = cfg.replace(out_dir=args.out)
    return cfg


def _git_describe() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True, text=True, timeout=10
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def _load_splits(data: str | None, manifest: str | None, cfg: RunConfig) -> dict:
    if manifest:
        name = os.path.splitext(os.path.basename(manifest))[0]
        return {name: load_manifest(manifest)}
    if data:
        return {s: load_manifest(os.path.join(data, f"{s}.tsv")) for s in SPLITS}
    return corpus_splits(generate(cfg.corpus))


def _decode_split(model, utts, mode, beam):
    hyps = decode_utterances(model, utts, mode, beam)
    return corpus_cer([u.tokens for u in utts], [h.ids for h in hyps]), hyps


# -- commands -------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = args.out or os.path.join(cfg.out_dir, "data")
    paths = write_corpus(cfg.corpus, out)
    for name in ("train", "dev", "test"):
        with open(paths[name]) as fh:
            print(f"{name}: {sum(1 for _ in fh)} utterances -> {paths[name]}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    if args.data:
        splits = _load_splits(args.data, None, cfg)
    else:
        data_dir = os.path.join(out, "data")
        write_corpus(cfg.corpus, data_dir)
        splits = _load_splits(data_dir, None, cfg)
    dump_config(cfg, os.path.join(out, "config.json"))

    model = Model(cfg.model, cfg.block, seed=cfg.train.seed)
    history = fit(
        splits["train"], model, cfg.train, cfg.mtl, cfg.loss,
        dev=splits["dev"], log_path=os.path.join(out, "train_log.ndjson"),
    )
    with open(os.path.join(out, "epochs.ndjson"), "w") as fh:
        for rec in history.epochs:
            fh.write(json.dumps(rec) + "\n")
    h = config_hash(cfg)
    save_checkpoint(os.path.join(out, "model.ckpt"), model.state_dict(), {"config": run_dict(cfg), "config_hash": h})

    per_split = {}
    for split in args.eval_splits:
        per_split[split] = {m: _decode_split(model, splits[split], m, cfg.decode.beam)[0] for m in MODES}
    summary = {
        "config_hash": h,
        "cer_streaming": per_split.get("test", {}).get("streaming"),
        "cer_nonstreaming": per_split.get("test", {}).get("non-streaming"),
        "per_split": per_split,
        "git_describe": _git_describe(),
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for split, r in per_split.items():
        print(f"{split}: CER streaming {r['streaming']:.4f}  non-streaming {r['non-streaming']:.4f}")
    return 0


def _read_baseline(path: str, mode: str) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {r["split"]: float(r["cer"]) for r in csv.DictReader(fh) if r["mode"] == mode}


def cmd_eval(args) -> int:
    state, meta = load_checkpoint(args.checkpoint)
    cfg = from_run_dict(meta["config"])
    if args.beam is not None:
        cfg = cfg.replace(decode={"beam": args.beam})
    model = Model(cfg.model, cfg.block, seed=0)
    model.load_state_dict(state)
    splits = _load_splits(args.data, args.manifest, cfg)
    baseline = _read_baseline(args.baseline, args.mode) if args.baseline else {}

    rows, hyp_rows = [], []
    for split in sorted(splits):
        utts = sorted(splits[split], key=lambda u: u.utt_id)
        value, hyps = _decode_split(model, utts, args.mode, cfg.decode.beam)
        rel = cerr(baseline[split], value) if split in baseline else None
        rows.append({"split": split, "mode": args.mode, "beam": cfg.decode.beam, "n_utts": len(utts),
                     "cer": value, "cerr_pct": "" if rel is None else rel})
        hyp_rows += [(u.utt_id, args.mode, h.ids, h.score) for u, h in zip(utts, hyps)]
        line = f"{split}: CER {value:.4f}"
        if rel is not None:
            line += f"  CERR {rel:.2f}% vs baseline {baseline[split]:.4f}"
        print(line)

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"report_{args.mode}.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        write_hypotheses(os.path.join(args.out, f"hyps_{args.mode}.tsv"), hyp_rows)
    return 0


def cmd_latency(args) -> int:
    cfg = _resolve_config(args)
    sub = args.subsample if args.subsample is not None else cfg.model.subsample_factor
    period = cfg.block.frame_period_ms
    sizes = sorted({20, 40, 60} | ({args.block} if args.block else set()))
    print(f"frame period {period:g} ms, subsample x{sub}")
    print("block  delay_ms")
    delays = {}
    for b in sizes:
        spec = BlockSpec(b, min(cfg.block.hop, b), cfg.block.look_ahead, period)
        delays[b] = algorithmic_delay(spec, sub)
        print(f"{b:>5}  {delays[b]:g}")
    if 60 in delays:
        print(f"note: {block60_note(delays[60])}")
    return 0


def cmd_check(args) -> int:
    ok = checks.run_all(args.only or None)
    print("all checks passed" if ok else "some checks FAILED")
    return 0 if ok else 1


# -- parser ---------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jointasr", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="run config JSON (defaults used when omitted)")
        if seed:
            p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train a joint model and write checkpoint, log and summary")
    common(p)
    p.add_argument("--distill", choices=DISTILL_MODES)
    p.add_argument("--block", type=int, help="override block.block_size")
    p.add_argument("--beam", type=int, help="beam width for the final evaluation")
    p.add_argument("--data", help="existing corpus directory with train/dev/test.tsv")
    p.add_argument("--eval-splits", nargs="*", default=list(SPLITS), choices=SPLITS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a checkpoint and report CER")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--beam", type=int)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="corpus directory with train/dev/test.tsv")
    src.add_argument("--manifest", help="a single manifest TSV")
    p.add_argument("--baseline", help="report CSV of a baseline system for CERR")
    p.add_argument("--out", help="directory for report CSV and hypothesis TSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("latency", help="algorithmic block delay table")
    common(p, seed=False)
    p.add_argument("--block", type=int, help="extra block size to list")
    p.add_argument("--subsample", type=int, help="override model.subsample_factor")
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("gen-data", help="write the synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("check", help="oracle and gradient self-checks")
    p.add_argument("--config", help="accepted for symmetry; checks use fixed small shapes")
    p.add_argument("--only", nargs="*", choices=sorted(checks.PROPERTIES))
    p.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
