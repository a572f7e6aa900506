"""Brute-force reference implementations used by tests and ``check``.

Everything here enumerates explicitly (alignment paths, label sequences)
or evaluates dense matrices directly, so it shares no code with the
dynamic-programming and autodiff paths it verifies. Exponential cost:
only for tiny shapes.
"""
from __future__ import annotations

import itertools
import math
from typing import Iterator, Sequence

import numpy as np

BLANK = 0


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    out, prev = [], None
    for k in path:
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return tuple(out)


def ctc_nll_enumerate(log_probs: np.ndarray, y: Sequence[int]) -> float:
    """-log sum over every length-T path that collapses to ``y``."""
    T, C = log_probs.shape
    y = tuple(y)
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if collapse(path) == y:
            total += math.exp(sum(log_probs[t, k] for t, k in enumerate(path)))
    return math.inf if total == 0.0 else -math.log(total)


def rnnt_alignments(T: int, U: int) -> Iterator[tuple[tuple[int, int, bool], ...]]:
    """Every monotone lattice walk as a tuple of (t, u, is_blank) steps.

    A walk emits U labels and T blanks; the last step is the blank at (T-1, U).
    """
    def walk(t, u, steps):
        if t == T - 1 and u == U:
            yield steps + ((t, u, True),)
            return
        if u < U:
            yield from walk(t, u + 1, steps + ((t, u, False),))
        if t < T - 1:
            yield from walk(t + 1, u, steps + ((t, u, True),))

    yield from walk(0, 0, ())


def rnnt_nll_enumerate(lattice: np.ndarray, y: Sequence[int]) -> float:
    T, U1, _ = lattice.shape
    U = U1 - 1
    scores = []
    for steps in rnnt_alignments(T, U):
        s = 0.0
        for t, u, is_blank in steps:
            s += lattice[t, u, BLANK] if is_blank else lattice[t, u, y[u]]
        scores.append(s)
    m = max(scores)
    return -(m + math.log(sum(math.exp(s - m) for s in scores)))


def all_label_sequences(V: int, max_len: int) -> Iterator[tuple[int, ...]]:
    for n in range(max_len + 1):
        yield from itertools.product(range(1, V + 1), repeat=n)


def sp_kd_dense(teacher: Sequence[np.ndarray], student: Sequence[np.ndarray], zeta) -> float:
    """Direct matrix evaluation: Q Q^T, divide rows by their norms, squared Frobenius, / B^2."""
    total = 0.0
    B = None
    for lt, ls in zeta:
        qt = np.asarray(teacher[lt], dtype=np.float64)
        qs = np.asarray(student[ls], dtype=np.float64)
        B = qt.shape[0]
        gt = _rownorm(qt.reshape(B, -1) @ qt.reshape(B, -1).T)
        gs = _rownorm(qs.reshape(B, -1) @ qs.reshape(B, -1).T)
        total += float(np.sum((gt - gs) ** 2))
    return total / (B * B)


def _rownorm(g: np.ndarray) -> np.ndarray:
    out = np.zeros_like(g)
    for i in range(g.shape[0]):
        n = np.linalg.norm(g[i])
        if n > 0:
            out[i] = g[i] / n
    return out


def brute_num_blocks(T: int, block: int, hop: int) -> int:
    """Smallest count of hop-spaced blocks whose union covers [0, T)."""
    n = 1
    while (n - 1) * hop + block < T:
        n += 1
    return n
