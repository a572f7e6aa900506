"""Sequence NLL objectives with exact gradients, and their weighted sum.

CTC and RNN-T run their forward-backward recursions in numpy and enter the
tape as single fused nodes; the cross-entropy style losses are composed
from tape primitives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .numerics import Tensor, as_tensor, custom_op, getitem, log_softmax

BLANK = 0
NEG_INF = -np.inf


@dataclass(frozen=True)
class LossWeights:
    lambda_ctc: float = 0.15
    lambda_rnnt: float = 0.10
    lambda_att: float = 0.30
    lambda_mlm: float = 0.45

    def __post_init__(self):
        for name in ("lambda_ctc", "lambda_rnnt", "lambda_att", "lambda_mlm"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


# -- CTC ---------------------------------------------------------------------
def ctc_forward_backward(lp: np.ndarray, y: Sequence[int], blank: int = BLANK):
    """Log-likelihood of ``y`` and its gradient w.r.t. the (T, C) scores.

    Returns ``(log_p, grad)`` where grad is d(log_p)/d(lp). An infeasible
    label gives ``(-inf, zeros)``.
    """
    T = lp.shape[0]
    ext = np.full(2 * len(y) + 1, blank, dtype=np.int64)
    ext[1::2] = y
    S = len(ext)
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    em = lp[:, ext]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = em[0, 0]
    if S > 1:
        alpha[0, 1] = em[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + em[t]

    # beta[t, s]: log prob of completing the label after sitting at s at time t,
    # not counting the emission at t.
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + em[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b

    log_p = alpha[T - 1, S - 1]
    if S > 1:
        log_p = np.logaddexp(log_p, alpha[T - 1, S - 2])
    grad = np.zeros_like(lp)
    if not np.isfinite(log_p):
        return NEG_INF, grad
    occ = np.exp(alpha + beta - log_p)
    np.add.at(grad, (np.arange(T)[:, None], ext[None, :]), occ)
    return float(log_p), grad


def ctc_loss_batch(
    log_probs: Tensor, targets: Sequence[Sequence[int]], input_lengths: Sequence[int]
) -> Tensor:
    """Per-sequence CTC NLL, shape (B,). Infeasible labels give +inf with zero gradient."""
    log_probs = as_tensor(log_probs)
    B = log_probs.shape[0]
    nll = np.zeros(B)
    grads = np.zeros_like(log_probs.data)
    for b in range(B):
        T = int(input_lengths[b])
        if T < 1:
            raise ValueError("CTC needs at least one input frame")
        _check_labels(targets[b], log_probs.shape[-1])
        log_p, g = ctc_forward_backward(log_probs.data[b, :T], targets[b])
        nll[b] = -log_p
        grads[b, :T] = -g

    def backward(gout):
        return (grads * gout[:, None, None],)

    return custom_op(nll, (log_probs,), backward, "ctc_loss", allow_inf=True)


def ctc_loss(log_probs: Tensor, y: Sequence[int]) -> Tensor:
    """-log sum over blank-augmented alignments of ``y`` for one (T, C) sequence."""
    log_probs = as_tensor(log_probs)
    nll = ctc_loss_batch(log_probs.reshape(1, *log_probs.shape), [y], [log_probs.shape[0]])
    return nll.reshape(())


# -- RNN-T -------------------------------------------------------------------
def rnnt_forward_backward(lattice: np.ndarray, y: Sequence[int]):
    """Log-likelihood of ``y`` under a (T, U+1, C) transducer lattice, plus its gradient."""
    T, U1, _ = lattice.shape
    U = U1 - 1
    if len(y) != U:
        raise ValueError(f"lattice has U+1={U1} rows but label length is {len(y)}")
    y = np.asarray(y, dtype=np.int64)
    blank = lattice[:, :, BLANK]
    lab = lattice[:, np.arange(U), y]  # (T, U) score of emitting y[u] from row u
    # prefix sums of label scores along u, per frame
    e = np.concatenate([np.zeros((T, 1)), np.cumsum(lab, axis=1)], axis=1)

    alpha = np.empty((T, U1))
    alpha[0] = e[0]
    for t in range(1, T):
        a = alpha[t - 1] + blank[t - 1]
        # alpha[t,u] = lse(a[u], alpha[t,u-1] + lab[t,u-1]), unrolled as a running lse
        alpha[t] = np.logaddexp.accumulate(a - e[t]) + e[t]
    log_p = alpha[T - 1, U] + blank[T - 1, U]

    beta = np.empty((T, U1))  # includes the final blank
    nxt = np.full(U1, NEG_INF)
    nxt[U] = 0.0
    for t in range(T - 1, -1, -1):
        bv = nxt + blank[t]
        beta[t] = np.logaddexp.accumulate((bv + e[t])[::-1])[::-1] - e[t]
        nxt = beta[t]

    grad = np.zeros_like(lattice)
    beta_next = np.full((T, U1), NEG_INF)
    beta_next[:-1] = beta[1:]
    beta_next[T - 1, U] = 0.0
    grad[:, :, BLANK] = np.exp(alpha + blank + beta_next - log_p)
    if U:
        occ = np.exp(alpha[:, :U] + lab + beta[:, 1:] - log_p)
        grad[:, np.arange(U), y] += occ
    return float(log_p), grad


def rnnt_loss_batch(
    lattice: Tensor, targets: Sequence[Sequence[int]], input_lengths: Sequence[int]
) -> Tensor:
    """Per-sequence transducer NLL, shape (B,), for a padded (B, T, U+1, C) lattice."""
    lattice = as_tensor(lattice)
    B = lattice.shape[0]
    nll = np.zeros(B)
    grads = np.zeros_like(lattice.data)
    for b in range(B):
        T, U = int(input_lengths[b]), len(targets[b])
        if T < 1:
            raise ValueError("RNN-T needs at least one input frame")
        _check_labels(targets[b], lattice.shape[-1])
        log_p, g = rnnt_forward_backward(lattice.data[b, :T, : U + 1], targets[b])
        nll[b] = -log_p
        grads[b, :T, : U + 1] = -g

    def backward(gout):
        return (grads * gout[:, None, None, None],)

    return custom_op(nll, (lattice,), backward, "rnnt_loss")


def rnnt_loss(lattice: Tensor, y: Sequence[int]) -> Tensor:
    """-log P(y) for one (T, U+1, C) lattice; index 0 of the last axis is blank."""
    lattice = as_tensor(lattice)
    nll = rnnt_loss_batch(lattice.reshape(1, *lattice.shape), [y], [lattice.shape[0]])
    return nll.reshape(())


def _check_labels(y: Sequence[int], n_classes: int) -> None:
    for k in y:
        if k == BLANK or not 0 < k < n_classes:
            raise ValueError(f"label id {k} is reserved or out of range for {n_classes} classes")


# -- cross-entropy style ------------------------------------------------------
def attention_ce_loss(logits: Tensor, y_with_eos: Sequence[int]) -> Tensor:
    """Mean over positions of -log P(target). Rows are renormalised first."""
    logits = as_tensor(logits)
    if logits.shape[0] != len(y_with_eos):
        raise ValueError(
            f"logits have {logits.shape[0]} rows but the target has {len(y_with_eos)} positions"
        )
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(len(y_with_eos)), np.asarray(y_with_eos, dtype=np.int64)))
    return -picked.mean()


def attention_ce_batch(
    logits: Tensor, targets: np.ndarray, lengths: Sequence[int]
) -> Tensor:
    """Per-sequence mean CE for padded (B, L, C) logits; returns shape (B,)."""
    B, L, _ = logits.shape
    lp = log_softmax(logits, axis=-1)
    rows = np.arange(B)[:, None]
    cols = np.arange(L)[None, :]
    picked = getitem(lp, (rows, cols, np.asarray(targets, dtype=np.int64)))
    mask = cols < np.asarray(lengths)[:, None]
    return -(picked * mask).sum(axis=1) / np.asarray(lengths, dtype=np.float64)


def mlm_loss(logits: Tensor, y_original: Sequence[int], mask_positions: Sequence[int]) -> Tensor:
    """Mean over masked positions only of -log P(original token)."""
    logits = as_tensor(logits)
    pos = np.asarray(sorted(mask_positions), dtype=np.int64)
    if pos.size == 0:
        raise ValueError("mlm_loss needs at least one masked position")
    lp = log_softmax(logits, axis=-1)
    tgt = np.asarray(y_original, dtype=np.int64)[pos]
    return -getitem(lp, (pos, tgt)).mean()


def mlm_loss_batch(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-sequence MLM loss for padded (B, U, C) logits; ``mask`` flags masked slots."""
    B, U, _ = logits.shape
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("every sequence needs at least one masked position")
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(B)[:, None], np.arange(U)[None, :], np.asarray(targets, np.int64)))
    return -(picked * mask).sum(axis=1) / counts.astype(np.float64)


# -- combination ---------------------------------------------------------------
def offline_loss(parts: Mapping[str, Tensor | float], w: LossWeights):
    """lambda_ctc*ctc + lambda_rnnt*rnnt + lambda_att*att + lambda_mlm*mlm."""
    for name in ("ctc", "rnnt", "att", "mlm"):
        v = parts[name]
        val = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        if not np.isfinite(val).all():
            raise ValueError(f"offline loss part {name!r} is not finite")
    return (
        w.lambda_ctc * parts["ctc"]
        + w.lambda_rnnt * parts["rnnt"]
        + w.lambda_att * parts["att"]
        + w.lambda_mlm * parts["mlm"]
    )
