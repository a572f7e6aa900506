"""Transducer greedy/beam decoding, CTC best-path collapse, and CER."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BLANK = 0
MAX_SYMBOLS_PER_FRAME = 10

# step(t, last_token) -> log-probabilities over blank + content tokens
StepFn = Callable[[int, int], np.ndarray]


@dataclass(order=True)
class Hypothesis:
    score: float
    ids: list[int] = field(default_factory=list, compare=False)


def rnnt_greedy(step: StepFn, T: int, max_symbols: int = MAX_SYMBOLS_PER_FRAME) -> Hypothesis:
    """Emit the argmax token until blank wins, then move to the next frame."""
    ids: list[int] = []
    score = 0.0
    last = BLANK
    for t in range(T):
        for n in range(max_symbols + 1):
            lp = step(t, last)
            k = BLANK if n == max_symbols else int(np.argmax(lp))
            score += float(lp[k])
            if k == BLANK:
                break
            ids.append(k)
            last = k
    return Hypothesis(score, ids)


def rnnt_beam(step: StepFn, T: int, beam: int, max_symbols: int = MAX_SYMBOLS_PER_FRAME) -> Hypothesis:
    """Frame-synchronous transducer beam search with prefix merging.

    Within a frame, candidates (either closing the frame with blank or
    emitting one more token) of all live hypotheses compete for ``beam``
    slots. Hypotheses that close the frame with the same prefix are merged
    by log-adding their scores. With ``beam=1`` this reduces to greedy.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    hyps: dict[tuple[int, ...], float] = {(): 0.0}
    for t in range(T):
        closed: dict[tuple[int, ...], float] = {}
        live = list(hyps.items())
        for n in range(max_symbols + 1):
            candidates: list[tuple[float, tuple[int, ...], bool]] = []
            for prefix, score in live:
                lp = step(t, prefix[-1] if prefix else BLANK)
                candidates.append((score + float(lp[BLANK]), prefix, True))
                if n < max_symbols:
                    for k in range(1, len(lp)):
                        candidates.append((score + float(lp[k]), prefix + (k,), False))
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
            live = []
            for score, prefix, done in candidates[:beam]:
                if done:
                    closed[prefix] = float(np.logaddexp(closed[prefix], score)) if prefix in closed else score
                else:
                    live.append((prefix, score))
            if not live:
                break
        ranked = sorted(closed.items(), key=lambda kv: (-kv[1], kv[0]))
        hyps = dict(ranked[:beam])
    prefix, score = max(hyps.items(), key=lambda kv: (kv[1], tuple(-k for k in kv[0])))
    return Hypothesis(score, list(prefix))


def ctc_greedy(log_probs: np.ndarray) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    path = np.argmax(np.asarray(log_probs), axis=-1)
    out, prev = [], None
    for k in path.tolist():
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def cer(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(ref, hyp) / len(ref)


def corpus_cer(refs: Iterable[Sequence], hyps: Iterable[Sequence]) -> float:
    """Total edit distance over total reference length."""
    errs = n = 0
    for r, h in zip(refs, hyps):
        errs += edit_distance(r, h)
        n += len(r)
    if n == 0:
        raise ValueError("references are empty")
    return errs / n


def cerr(baseline: float, system: float) -> float:
    """Relative error reduction in percent."""
    if baseline == 0:
        raise ValueError("baseline error rate is zero")
    return (baseline - system) / baseline * 100.0


def write_hypotheses(path: str, rows: Iterable[tuple[str, str, Sequence[int], float]]) -> None:
    """TSV of utt_id, mode, space-separated ids, score."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for utt, mode, ids, score in rows:
            w.writerow([utt, mode, " ".join(str(i) for i in ids), repr(float(score))])
