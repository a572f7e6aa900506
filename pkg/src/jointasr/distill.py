"""Similarity-preserving distillation between teacher and student activations.

Each side's activations are flattened per batch member, turned into a
B x B Gram matrix, row-normalised, and the two Gram matrices are compared
with a squared Frobenius norm scaled by 1/B^2. Only batch-level
similarities are matched, so teacher and student widths and lengths may
differ. An element-wise MSE baseline is provided for comparison.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import HiddenStates
from .numerics import Tensor

LayerPairSet = list[tuple[int, int]]


def _flatten(h) -> Tensor:
    if isinstance(h, HiddenStates):
        values = h.values * h.mask[:, :, None].astype(np.float64)
    else:
        values = nx.as_tensor(h)
    return values.reshape(values.shape[0], -1)


def _row_normalize(g: Tensor) -> Tensor:
    """Divide each row by its L2 norm; all-zero rows stay zero."""
    norms = np.sqrt((g.data**2).sum(axis=1, keepdims=True))
    nonzero = norms > 0
    safe = np.where(nonzero, norms, 1.0)
    out = np.where(nonzero, g.data / safe, 0.0)

    def backward(gout):
        proj = (gout * out).sum(axis=1, keepdims=True)
        return (np.where(nonzero, (gout - out * proj) / safe, 0.0),)

    return nx.custom_op(out, (g,), backward, "row_normalize")


def gram_rownorm(h) -> Tensor:
    """Row-L2-normalised batch Gram matrix of ``h`` (HiddenStates or (B, ...) array).

    Padded frames of HiddenStates are zeroed before flattening.
    """
    q = _flatten(h)
    return _row_normalize(q @ q.transpose(1, 0))


def sp_kd_loss(
    teacher: Sequence,
    student: Sequence,
    zeta: LayerPairSet,
    detach_teacher: bool = True,
) -> Tensor:
    """(1/B^2) * sum over (l, l') in zeta of ||G_teacher(l) - G_student(l')||_F^2."""
    if not zeta:
        raise ValueError("zeta must contain at least one layer pair")
    total = None
    B = None
    for lt, ls in zeta:
        if not (0 <= lt < len(teacher) and 0 <= ls < len(student)):
            raise IndexError(f"layer pair {(lt, ls)} does not reference existing layers")
        t, s = teacher[lt], student[ls]
        bt, bs = _batch(t), _batch(s)
        if bt != bs:
            raise ValueError(f"teacher batch {bt} != student batch {bs}")
        B = bt
        g_t = gram_rownorm(t)
        if detach_teacher:
            g_t = g_t.detach()
        diff = g_t - gram_rownorm(s)
        term = (diff * diff).sum()
        total = term if total is None else total + term
    return total * (1.0 / (B * B))


def _batch(h) -> int:
    return (h.values if isinstance(h, HiddenStates) else nx.as_tensor(h)).shape[0]


def mse_ed_loss(teacher: HiddenStates, student: HiddenStates, detach_teacher: bool = True) -> Tensor:
    """Mean over valid elements of (teacher - student)^2."""
    if teacher.values.shape != student.values.shape:
        raise ValueError(f"shape mismatch: teacher {teacher.values.shape}, student {student.values.shape}")
    if not np.array_equal(teacher.lengths, student.lengths):
        raise ValueError("teacher and student lengths differ")
    t = teacher.values.detach() if detach_teacher else teacher.values
    mask = teacher.mask[:, :, None].astype(np.float64)
    diff = (t - student.values) * mask
    count = mask.sum() * teacher.values.shape[-1]
    return (diff * diff).sum() * (1.0 / count)


def collect_sp_ed_pairs(te_layers: Sequence[HiddenStates], st_layers: Sequence[HiddenStates], every: int | None = None):
    """Encoder-side pairs.

    By default the last full-context layer is paired with the last
    streaming layer. With ``every=k`` layer k, 2k, ... of both stacks are
    paired (1-based, up to the shorter stack).
    """
    if every is None:
        zeta = [(len(te_layers) - 1, len(st_layers) - 1)]
    else:
        if every < 1:
            raise ValueError("every must be >= 1")
        depth = min(len(te_layers), len(st_layers))
        zeta = [(i - 1, i - 1) for i in range(every, depth + 1, every)]
    if not zeta:
        raise ValueError(f"no layer pairs with every={every} over {len(te_layers)}/{len(st_layers)} layers")
    return list(te_layers), list(st_layers), zeta


def collect_sp_dd_pairs(att_hidden: Tensor, pred_hidden: Tensor, lengths: Sequence[int]):
    """Decoder-side pair: attention-decoder states (teacher) vs streaming prediction states.

    Both are (B, U+1, width) with the sos / blank prefix in position 0.
    """
    if att_hidden.shape[:2] != pred_hidden.shape[:2]:
        raise ValueError(f"position mismatch: {att_hidden.shape[:2]} vs {pred_hidden.shape[:2]}")
    lengths = np.asarray(lengths)
    teacher = HiddenStates(att_hidden, lengths)
    student = HiddenStates(pred_hidden, lengths)
    return [teacher], [student], [(0, 0)]
