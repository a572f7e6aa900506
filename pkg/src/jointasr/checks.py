"""Self-verification suite behind the ``check`` command.

Each property returns ``(ok, detail)``. Library functions are looked up on
their modules at call time, so a patched implementation is what gets
checked.
"""
from __future__ import annotations

import itertools
import math
import time
from typing import Callable

import numpy as np

from . import blocking, distill, losses, oracles
from . import numerics as nx
from .model import HiddenStates, Model, ModelConfig
from .numerics import Tensor

GRAD_TOL = 1e-6
PROPERTIES: dict[str, Callable[[], tuple[bool, str]]] = {}


def prop(fn):
    PROPERTIES[fn.__name__] = fn
    return fn


def _rand_lp(rng, *shape):
    return nx.log_softmax(rng.normal(size=shape) * 2.0, axis=-1)


@prop
def ctc_matches_enumeration():
    worst = 0.0
    for T, U, V in itertools.product(range(1, 5), range(0, 3), range(1, 4)):
        for seed in range(3):
            rng = np.random.default_rng([seed, T, U, V])
            y = rng.integers(1, V + 1, size=U).tolist()
            lp = _rand_lp(rng, T, V + 1)
            want = oracles.ctc_nll_enumerate(lp, y)
            got = losses.ctc_loss(Tensor(lp), y).item()
            if math.isinf(want) or math.isinf(got):
                if want != got:
                    return False, f"T={T} y={y}: {got} vs {want}"
                continue
            worst = max(worst, abs(got - want))
    return worst <= 1e-9, f"max |diff| {worst:.2e}"


@prop
def rnnt_matches_enumeration():
    worst = 0.0
    for T, U, V in itertools.product(range(1, 5), range(0, 3), range(1, 4)):
        for seed in range(3):
            rng = np.random.default_rng([seed, T, U, V, 1])
            y = rng.integers(1, V + 1, size=U).tolist()
            lat = _rand_lp(rng, T, U + 1, V + 1)
            worst = max(worst, abs(losses.rnnt_loss(Tensor(lat), y).item() - oracles.rnnt_nll_enumerate(lat, y)))
    return worst <= 1e-9, f"max |diff| {worst:.2e}"


@prop
def ctc_sums_to_one():
    worst = 0.0
    for seed in range(5):
        lp = _rand_lp(np.random.default_rng(seed), 3, 3)
        total = sum(math.exp(-losses.ctc_loss(Tensor(lp), list(y)).item()) for y in oracles.all_label_sequences(2, 3))
        worst = max(worst, abs(total - 1.0))
    return worst <= 1e-9, f"max |sum - 1| {worst:.2e}"


def _grad_prop(f, x):
    err = nx.grad_check(f, Tensor(x))
    return err <= GRAD_TOL, f"max rel err {err:.2e}"


@prop
def ctc_gradient():
    rng = np.random.default_rng(11)
    return _grad_prop(lambda x: losses.ctc_loss(nx.log_softmax(x), [1, 2, 2]), rng.normal(size=(7, 4)))


@prop
def rnnt_gradient():
    rng = np.random.default_rng(12)
    return _grad_prop(lambda x: losses.rnnt_loss(nx.log_softmax(x), [2, 1]), rng.normal(size=(4, 3, 4)))


@prop
def attention_gradient():
    rng = np.random.default_rng(13)
    return _grad_prop(lambda x: losses.attention_ce_loss(x, [1, 3, 0]), rng.normal(size=(3, 4)))


@prop
def mlm_gradient():
    rng = np.random.default_rng(14)
    return _grad_prop(lambda x: losses.mlm_loss(x, [1, 3, 2, 2], [0, 2]), rng.normal(size=(4, 5)))


@prop
def sp_kd_student_gradient():
    rng = np.random.default_rng(15)
    t = rng.normal(size=(4, 3, 2))
    return _grad_prop(lambda x: distill.sp_kd_loss([t], [x], [(0, 0)]), rng.normal(size=(4, 5)))


@prop
def sp_kd_teacher_gradient_zero():
    rng = np.random.default_rng(16)
    t = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    s = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    distill.sp_kd_loss([t], [s], [(0, 0)]).backward()
    g = t.grad if t.grad is not None else np.zeros_like(t.data)
    return bool(np.all(g == 0)), f"max |teacher grad| {np.abs(g).max():.1e}"


@prop
def sp_kd_matches_dense():
    worst = 0.0
    rng = np.random.default_rng(17)
    for B in (2, 4, 8):
        t = [rng.normal(size=(B, 5)), rng.normal(size=(B, 2, 3))]
        s = [rng.normal(size=(B, 7))]
        zeta = [(0, 0), (1, 0)]
        worst = max(worst, abs(distill.sp_kd_loss(t, s, zeta).item() - oracles.sp_kd_dense(t, s, zeta)))
    hand = distill.sp_kd_loss([np.eye(2)], [np.ones((2, 2))], [(0, 0)]).item()
    hand_err = abs(hand - (2 - math.sqrt(2)) / 2)
    return worst <= 1e-10 and hand_err <= 1e-12, f"dense {worst:.1e}, hand case {hand_err:.1e}"


@prop
def sp_kd_scale_invariant():
    rng = np.random.default_rng(18)
    t, s = rng.normal(size=(4, 6)), rng.normal(size=(4, 3))
    base = distill.sp_kd_loss([t], [s], [(0, 0)]).item()
    worst = max(abs(distill.sp_kd_loss([t], [c * s], [(0, 0)]).item() - base) for c in (0.1, 3.0))
    return worst <= 1e-10, f"max |diff| {worst:.1e}"


@prop
def mse_ed_gradient():
    rng = np.random.default_rng(19)
    lengths = np.array([3, 2])
    t = HiddenStates(Tensor(rng.normal(size=(2, 3, 4))), lengths)
    return _grad_prop(lambda x: distill.mse_ed_loss(t, HiddenStates(x, lengths)), rng.normal(size=(2, 3, 4)))


@prop
def block_count_and_coverage():
    for L, hop in ((4, 1), (4, 2), (4, 4), (5, 3), (8, 4), (40, 16)):
        spec = blocking.BlockSpec(L, hop, 0)
        for T in range(1, 121):
            n = blocking.num_blocks(T, spec)
            if n != oracles.brute_num_blocks(T, L, hop):
                return False, f"L={L} hop={hop} T={T}: {n}"
            covered = set()
            for b in blocking.segment_blocks(T, spec):
                covered.update(range(b.start_frame, b.end_frame))
            if covered != set(range(T)):
                return False, f"coverage fails at L={L} hop={hop} T={T}"
    return True, "L/hop grid, T <= 120"


@prop
def delay_table():
    got = [blocking.algorithmic_delay(blocking.BlockSpec(b, min(16, b), 16), 4) for b in (20, 40, 60)]
    return got == [800.0, 1600.0, 2400.0], f"{got}"


@prop
def streaming_is_block_causal():
    cfg = ModelConfig(D=8, heads=2, ff_dim=8, D_in=3, subsample_factor=1)
    spec = blocking.BlockSpec(4, 2, 1)
    T = 11
    layout = blocking.block_layout(T, spec)
    worst, seen = 0.0, math.inf
    for seed in range(2):
        model = Model(cfg, spec, seed=seed)
        x = np.random.default_rng(seed).normal(size=(1, T, 3))
        with nx.no_grad():
            base = model.encode(Tensor(x), [T])[0].values.data[0]
            for tau in range(T):
                xp = x.copy()
                xp[0, tau] += 1.0
                out = model.encode(Tensor(xp), [T])[0].values.data[0]
                for t in range(T):
                    d = float(np.abs(out[t] - base[t]).max())
                    if tau >= layout.horizon(layout.owner[t]):
                        worst = max(worst, d)
                    elif tau in layout.window[layout.owner[t]]:
                        seen = min(seen, d)
    return worst < 1e-12 and seen > 1e-9, f"max leak {worst:.1e}, min in-window response {seen:.1e}"


@prop
def full_context_sees_future():
    cfg = ModelConfig(D=8, heads=2, ff_dim=8, D_in=3, subsample_factor=1)
    model = Model(cfg, blocking.BlockSpec(4, 2, 1), seed=3)
    T = 11
    x = np.random.default_rng(3).normal(size=(1, T, 3))
    with nx.no_grad():
        base = model.encode(Tensor(x), [T])[2].values.data[0]
        xp = x.copy()
        xp[0, T - 1] += 1.0
        out = model.encode(Tensor(xp), [T])[2].values.data[0]
    d = float(np.abs(out[0] - base[0]).max())
    return d > 1e-9, f"frame 0 response to last frame {d:.1e}"


def run_all(names=None, out=print) -> bool:
    ok_all = True
    for name, fn in PROPERTIES.items():
        if names and name not in names:
            continue
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failure of that property
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok_all &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - start:.1f}s)")
    return ok_all
