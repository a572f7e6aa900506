"""Synthetic token-template corpus standing in for real speech data."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    V: int = 8
    n_utts: int = 200
    min_tokens: int = 3
    max_tokens: int = 8
    frames_per_token: int = 3
    D_in: int = 16
    sigma: float = 0.1
    seed: int = 7
    frame_period_ms: float = 10.0

    def __post_init__(self):
        if self.V < 2:
            raise ValueError("V must be >= 2")
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")
        if self.n_utts < 1 or self.D_in < 1:
            raise ValueError("n_utts and D_in must be positive")


@dataclass
class Utterance:
    utt_id: str
    tokens: list[int]
    feats: np.ndarray  # (T, D_in)


def templates(spec: SyntheticCorpusSpec) -> np.ndarray:
    """(V+1, D_in) template table; row 0 is unused."""
    rng = np.random.default_rng(spec.seed)
    return rng.standard_normal((spec.V + 1, spec.D_in))


def generate(spec: SyntheticCorpusSpec) -> list[Utterance]:
    table = templates(spec)
    rng = np.random.default_rng([spec.seed, 1])
    utts = []
    for i in range(spec.n_utts):
        n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        tokens = rng.integers(1, spec.V + 1, size=n).tolist()
        clean = np.repeat(table[tokens], spec.frames_per_token, axis=0)
        noise = rng.standard_normal(clean.shape) * spec.sigma if spec.sigma > 0 else 0.0
        utts.append(Utterance(f"utt{i:05d}", tokens, clean + noise))
    return utts


def split_indices(n: int) -> dict[str, range]:
    """80/10/10 by utterance index."""
    n_train = round(0.8 * n)
    n_dev = round(0.1 * n)
    return {
        "train": range(0, n_train),
        "dev": range(n_train, n_train + n_dev),
        "test": range(n_train + n_dev, n),
    }


def write_corpus(spec: SyntheticCorpusSpec, out_dir: str) -> dict[str, str]:
    """Write features, sidecars and manifests; returns split -> manifest path."""
    feat_dir = os.path.join(out_dir, "feats")
    os.makedirs(feat_dir, exist_ok=True)
    utts = generate(spec)
    rows = []
    for u in utts:
        rel = os.path.join("feats", f"{u.utt_id}.f64")
        u.feats.astype("<f8").tofile(os.path.join(out_dir, rel))
        with open(os.path.join(out_dir, rel[:-4] + ".json"), "w") as fh:
            json.dump({"shape": list(u.feats.shape), "frame_period_ms": spec.frame_period_ms}, fh, sort_keys=True)
        rows.append((u.utt_id, rel, " ".join(map(str, u.tokens))))
    paths = {"all": os.path.join(out_dir, "manifest.tsv")}
    _write_tsv(paths["all"], rows)
    for name, idx in split_indices(len(rows)).items():
        paths[name] = os.path.join(out_dir, f"{name}.tsv")
        _write_tsv(paths[name], [rows[i] for i in idx])
    return paths


def _write_tsv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerows(rows)


def load_manifest(path: str) -> list[Utterance]:
    base = os.path.dirname(os.path.abspath(path))
    utts = []
    with open(path, newline="") as fh:
        for utt_id, rel, ids in csv.reader(fh, delimiter="\t"):
            full = os.path.join(base, rel)
            with open(full[:-4] + ".json") as side:
                shape = json.load(side)["shape"]
            feats = np.fromfile(full, dtype="<f8").reshape(shape).astype(np.float64)
            utts.append(Utterance(utt_id, [int(t) for t in ids.split()], feats))
    return utts


def corpus_splits(utts: list[Utterance]) -> dict[str, list[Utterance]]:
    return {k: [utts[i] for i in idx] for k, idx in split_indices(len(utts)).items()}
