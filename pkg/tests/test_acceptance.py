"""Acceptance criteria, one test each, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary block at
the end of the pytest output lists every criterion.
"""
import itertools
import json
import math
import os
import time

import numpy as np

from jointasr import cli
from jointasr import numerics as nx
from jointasr import oracles
from jointasr.blocking import BlockSpec, algorithmic_delay, block60_note, block_layout, num_blocks, segment_blocks
from jointasr.config import dump_config, load_config
from jointasr.decode import cer, cerr, rnnt_beam, rnnt_greedy
from jointasr.distill import mse_ed_loss, sp_kd_loss
from jointasr.losses import LossWeights, attention_ce_loss, ctc_loss, mlm_loss, offline_loss, rnnt_loss
from jointasr.model import HiddenStates, Model, ModelConfig, load_checkpoint
from jointasr.numerics import Tensor, grad_check
from jointasr.trainer import MtlWeights, TrainConfig, lr_schedule, total_loss

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SMOKE = os.path.join(ROOT, "configs", "smoke.json")


def _lp(rng, *shape):
    return nx.log_softmax(rng.normal(size=shape) * 2.0, axis=-1)


def test_c01_loss_oracles(acceptance):
    start = time.perf_counter()
    worst = {"ctc": 0.0, "rnnt": 0.0}
    inf_ok = True
    for T, U, V in itertools.product(range(1, 5), range(0, 3), range(1, 4)):
        for seed in range(20):
            rng = np.random.default_rng([seed, T, U, V, 11])
            y = rng.integers(1, V + 1, size=U).tolist()
            lp = _lp(rng, T, V + 1)
            want = oracles.ctc_nll_enumerate(lp, y)
            got = ctc_loss(Tensor(lp), y).item()
            if math.isinf(want):
                inf_ok &= got == math.inf
            else:
                worst["ctc"] = max(worst["ctc"], abs(got - want))
            lat = _lp(rng, T, U + 1, V + 1)
            worst["rnnt"] = max(worst["rnnt"], abs(rnnt_loss(Tensor(lat), y).item() - oracles.rnnt_nll_enumerate(lat, y)))
    elapsed = time.perf_counter() - start
    acceptance(1, "loss oracles", [
        (worst["ctc"] <= 1e-9, f"ctc max |d| {worst['ctc']:.1e}"),
        (worst["rnnt"] <= 1e-9, f"rnnt max |d| {worst['rnnt']:.1e}"),
        (inf_ok, "infeasible ctc targets give inf"),
        (elapsed < 30, f"{elapsed:.1f}s < 30s"),
    ])


def test_c02_ctc_normalisation(acceptance):
    worst = 0.0
    for seed in range(10):
        lp = _lp(np.random.default_rng([seed, 22]), 3, 3)
        total = sum(math.exp(-ctc_loss(Tensor(lp), list(y)).item()) for y in oracles.all_label_sequences(2, 3))
        worst = max(worst, abs(total - 1))
    acceptance(2, "ctc normalisation", [(worst <= 1e-9, f"max |sum - 1| {worst:.1e} over 10 draws")])


def test_c03_sp_kd_oracle(acceptance):
    worst = 0.0
    for B in (2, 4, 8):
        for seed in range(10):
            rng = np.random.default_rng([B, seed, 33])
            teacher = [rng.normal(size=(B, 5, 4)), rng.normal(size=(B, 7))]
            student = [rng.normal(size=(B, 3)), rng.normal(size=(B, 2, 3))]
            zeta = [(0, 0), (1, 1), (0, 1)]
            worst = max(worst, abs(sp_kd_loss(teacher, student, zeta).item() - oracles.sp_kd_dense(teacher, student, zeta)))
    hand = sp_kd_loss([np.eye(2)], [np.ones((2, 2))], [(0, 0)]).item()
    hand_err = abs(hand - (2 - math.sqrt(2)) / 2)
    acceptance(3, "sp-KD oracle", [
        (worst <= 1e-10, f"dense oracle max |d| {worst:.1e}"),
        (hand_err <= 1e-12, f"hand case |d| {hand_err:.1e}"),
    ])


def test_c04_sp_kd_invariances(acceptance):
    worst = {"scale": 0.0, "rotation": 0.0, "permutation": 0.0}
    bound_ok = True
    pair = [(0, 0)]
    for B in (2, 4, 8):
        for seed in range(10):
            rng = np.random.default_rng([B, seed, 44])
            t, s = rng.normal(size=(B, 3, 2)), rng.normal(size=(B, 5))
            base = sp_kd_loss([t], [s], pair).item()
            for c in (0.1, 3.0):
                worst["scale"] = max(worst["scale"], abs(sp_kd_loss([t], [c * s], pair).item() - base))
            rot, _ = np.linalg.qr(rng.normal(size=(5, 5)))
            worst["rotation"] = max(worst["rotation"], abs(sp_kd_loss([t], [s @ rot], pair).item() - base))
            perm = rng.permutation(B)
            worst["permutation"] = max(worst["permutation"], abs(sp_kd_loss([t[perm]], [s[perm]], pair).item() - base))
            bound_ok &= base <= 4 / B
    acceptance(4, "sp-KD invariances", [
        (worst["scale"] <= 1e-10, f"scale {worst['scale']:.1e}"),
        (worst["rotation"] <= 1e-9, f"rotation {worst['rotation']:.1e}"),
        (worst["permutation"] <= 1e-12, f"permutation {worst['permutation']:.1e}"),
        (bound_ok, "loss <= 4/B"),
    ])


def test_c05_gradients(acceptance):
    rng = np.random.default_rng(55)
    y = [1, 3, 2]
    errs = {
        "ctc": grad_check(lambda x: ctc_loss(nx.log_softmax(x), y), Tensor(rng.normal(size=(6, 4)))),
        "rnnt": grad_check(lambda x: rnnt_loss(nx.log_softmax(x), y), Tensor(rng.normal(size=(4, 4, 4)))),
        "attention": grad_check(lambda x: attention_ce_loss(x, [1, 3, 0]), Tensor(rng.normal(size=(3, 4)))),
        "mlm": grad_check(lambda x: mlm_loss(x, [1, 3, 2], [0, 2]), Tensor(rng.normal(size=(3, 5)))),
    }
    # the streaming transducer loss through the whole streaming encoder
    model = Model(ModelConfig(D=8, heads=2, ff_dim=8, pred_dim=8, joint_dim=8, D_in=3, V=3), BlockSpec(4, 2, 1), seed=5)

    def streaming_nll(x):
        from jointasr.model import rnnt_forward

        h_st = model.encode(x, [6])[0]
        lat, _ = rnnt_forward(h_st, [y], model.params, model.cfg, path="rnnt_st")
        return rnnt_loss(lat[0], y)

    errs["streaming rnnt"] = grad_check(streaming_nll, Tensor(rng.normal(size=(1, 6, 3))))
    t = rng.normal(size=(4, 6))
    errs["sp-KD student"] = grad_check(lambda s: sp_kd_loss([t], [s], [(0, 0)]), Tensor(rng.normal(size=(4, 3, 2))))
    lengths = [3, 2]
    te = HiddenStates(Tensor(rng.normal(size=(2, 3, 4))), lengths)
    errs["mse-ED"] = grad_check(lambda s: mse_ed_loss(te, HiddenStates(s, lengths)), Tensor(rng.normal(size=(2, 3, 4))))
    tt = Tensor(t, requires_grad=True)
    ss = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    sp_kd_loss([tt], [ss], [(0, 0)]).backward()
    teacher_zero = tt.grad is None or not np.any(tt.grad)
    acceptance(5, "gradients", [(e <= 1e-6, f"{k} {e:.1e}") for k, e in errs.items()]
               + [(teacher_zero, "teacher-side sp-KD gradient is zero")])


def test_c06_blocking_and_delay(acceptance):
    count_ok = cover_ok = True
    for L in range(1, 21):
        for hop in range(1, L + 1):
            spec = BlockSpec(L, hop, 0)
            for T in range(1, 201):
                blocks = segment_blocks(T, spec)
                count_ok &= len(blocks) == max(1, math.ceil((T - L) / hop) + 1)
                covered = np.zeros(T, bool)
                for b in blocks:
                    covered[b.start_frame : b.end_frame] = True
                cover_ok &= bool(covered.all())
    # full grid: the last block reaches T and none is superfluous
    for L in range(1, 201):
        for hop in range(1, L + 1):
            spec = BlockSpec(L, hop, 0)
            for T in range(L, 201):
                n = num_blocks(T, spec)
                count_ok &= n == max(1, math.ceil((T - L) / hop) + 1)
                cover_ok &= (n - 1) * hop + L >= T and (n == 1 or (n - 2) * hop + L < T)
    d = [algorithmic_delay(BlockSpec(b, 16, 16), 4) for b in (20, 40, 60)]
    note = block60_note(d[2])
    acceptance(6, "blocking and delay", [
        (count_ok, "block count formula, hop <= L <= T <= 200"),
        (cover_ok, "coverage"),
        (d[:2] == [800.0, 1600.0], f"delays 20/40: {d[0]:g}/{d[1]:g} ms"),
        (d[2] == 2400.0 and "3200" in note, f"block 60: {d[2]:g} ms with note"),
    ])


def test_c07_streaming_causality(acceptance):
    cfg = ModelConfig(D=8, heads=2, ff_dim=8, pred_dim=8, joint_dim=8, D_in=3, subsample_factor=1)
    spec = BlockSpec(4, 2, 1)
    T = 13
    lay = block_layout(T, spec)
    leak, sensitive = 0.0, True
    for seed in range(5):
        model = Model(cfg, spec, seed=seed)
        x = np.random.default_rng(seed).normal(size=(1, T, 3))
        with nx.no_grad():
            base_st, _, base_te, _ = model.encode(Tensor(x), [T])
            for tau in range(T):
                xp = x.copy()
                xp[0, tau] += 1.0
                h_st, _, h_te, _ = model.encode(Tensor(xp), [T])
                diff = np.abs(h_st.values.data[0] - base_st.values.data[0]).max(axis=-1)
                for t in range(T):
                    if tau >= lay.horizon(lay.owner[t]):
                        leak = max(leak, float(diff[t]))
                sensitive &= float(np.abs(h_te.values.data - base_te.values.data).max()) > 1e-9
                if tau == T - 1:
                    sensitive &= float(np.abs(h_te.values.data[0, 0] - base_te.values.data[0, 0]).max()) > 1e-9
    acceptance(7, "streaming causality", [
        (leak < 1e-12, f"max response beyond horizon {leak:.1e} over 5 seeds"),
        (sensitive, "full-context encoder responds to every frame"),
    ])


def test_c08_mtl_composition(acceptance):
    tot = total_loss(1.0, 2.0, 0.001, MtlWeights(1.0, 1.0, 3000.0))
    off = offline_loss({"ctc": 1.0, "rnnt": 1.0, "att": 1.0, "mlm": 1.0}, LossWeights())
    cfg = TrainConfig(peak_lr=0.0015, warmup_steps=1500)
    lr = (lr_schedule(1500, cfg), lr_schedule(6000, cfg))
    acceptance(8, "MTL composition", [
        (tot == 6.0, f"total_loss {tot!r}"),
        (off == 1.0, f"offline_loss {off!r}"),
        (lr == (0.0015, 0.00075), f"lr {lr[0]!r}, {lr[1]!r}"),
    ])


def test_c09_training_smoke(acceptance, tmp_path):
    cfg = load_config(SMOKE)
    out = tmp_path / "smoke"
    start = time.perf_counter()
    assert cli.main(["train", "--config", SMOKE, "--out", str(out), "--eval-splits", "test"]) == 0
    elapsed = time.perf_counter() - start
    summary = json.loads((out / "summary.json").read_text())

    twin_cfg = tmp_path / "twin.json"
    dump_config(cfg.replace(mtl={"lambda_dist": 0.0}), str(twin_cfg))
    assert cli.main(["train", "--config", str(twin_cfg), "--out", str(tmp_path / "twin"), "--eval-splits"]) == 0
    a, _ = load_checkpoint(str(out / "model.ckpt"))
    b, _ = load_checkpoint(str(tmp_path / "twin" / "model.ckpt"))
    differ = sum(not np.array_equal(a[k], b[k]) for k in a)

    st_cer, nst_cer = summary["cer_streaming"], summary["cer_nonstreaming"]
    acceptance(9, "training smoke", [
        (cfg.train.epochs == 30 and cfg.train.distill_mode == "sp-ED" and cfg.mtl.lambda_dist == 3000.0
         and cfg.decode.beam == 10, "30 epochs, sp-ED, lambda_dist 3000, beam 10"),
        (elapsed <= 300, f"{elapsed:.0f}s <= 300s"),
        (st_cer <= 0.20, f"streaming test CER {st_cer:.3f}"),
        (nst_cer <= 0.20, f"non-streaming test CER {nst_cer:.3f}"),
        (differ > 0, f"lambda_dist=0 twin differs in {differ}/{len(a)} parameters"),
    ])


def test_c10_decoding(acceptance):
    cfg = ModelConfig(D=8, heads=2, ff_dim=8, pred_dim=8, joint_dim=8, D_in=3, V=4)
    same, dominates = 0, True
    for seed in range(50):
        model = Model(cfg, BlockSpec(4, 2, 1), seed=seed)
        T = 6
        scorer = model.scorer(np.random.default_rng(seed).normal(size=(T, 8)) * 2.0, "rnnt_st")
        greedy = rnnt_greedy(scorer, T)
        same += rnnt_beam(scorer, T, 1).ids == greedy.ids
        dominates &= rnnt_beam(scorer, T, 10).score >= greedy.score - 1e-12
    c = cer("kitten", "sitting")
    r = cerr(6.84, 6.66)
    acceptance(10, "decoding", [
        (same == 50, f"beam 1 == greedy on {same}/50 models"),
        (dominates, "beam 10 score >= greedy score on the same 50"),
        (c == 0.5, f"cer(kitten, sitting) = {c}"),
        (round(r, 2) == 2.63, f"CERR(6.84, 6.66) = {r:.4f}%"),
    ])


def test_c11_determinism(acceptance, tmp_path):
    cfg = load_config(SMOKE).replace(train={"epochs": 2})
    path = tmp_path / "short.json"
    dump_config(cfg, str(path))
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / name), "--eval-splits"]) == 0
    checks = []
    # config.json is left out: it records each run's own out_dir
    for f in ("model.ckpt", "train_log.ndjson", "epochs.ndjson", "summary.json"):
        a = (tmp_path / "a" / f).read_bytes()
        b = (tmp_path / "b" / f).read_bytes()
        checks.append((a == b, f"{f} identical"))
    acceptance(11, "determinism", checks)
