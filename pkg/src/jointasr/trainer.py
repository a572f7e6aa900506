"""Joint streaming / full-context training with optional distillation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .corpus import Utterance
from .decode import corpus_cer, rnnt_beam, rnnt_greedy
from .distill import collect_sp_dd_pairs, collect_sp_ed_pairs, mse_ed_loss, sp_kd_loss
from .losses import (
    LossWeights,
    attention_ce_batch,
    ctc_loss_batch,
    mlm_loss_batch,
    offline_loss,
    rnnt_loss_batch,
)
from .model import Model, attention_logits, ctc_logits, mlm_logits, mlm_mask, pad_targets, rnnt_forward
from .numerics import Tensor

log = logging.getLogger(__name__)

DISTILL_MODES = ("none", "mse-ED", "sp-ED", "sp-DD")
LOSS_SERIES = ("l_onl", "l_ctc", "l_rnnt", "l_att", "l_mlm", "l_dist", "total")


@dataclass(frozen=True)
class MtlWeights:
    lambda_onl: float = 1.0
    lambda_off: float = 1.0
    lambda_dist: float = 3000.0

    def __post_init__(self):
        for name in ("lambda_onl", "lambda_off", "lambda_dist"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    peak_lr: float = 0.0015
    warmup_steps: int = 1500
    seed: int = 7
    distill_mode: str = "sp-ED"
    sp_ed_every: int | None = None
    detach_teacher: bool = True
    mask_ratio_min: float = 0.3
    mask_ratio_max: float = 0.7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float | None = None

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.distill_mode not in DISTILL_MODES:
            raise ValueError(f"distill_mode must be one of {DISTILL_MODES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.distill_mode in ("sp-ED", "sp-DD") and self.batch_size < 2:
            raise ValueError("similarity-preserving distillation needs batch_size >= 2")
        if not 0 < self.mask_ratio_min <= self.mask_ratio_max <= 1:
            raise ValueError("need 0 < mask_ratio_min <= mask_ratio_max <= 1")


def total_loss(l_onl, l_off, l_dist, w: MtlWeights):
    for name, v in (("l_onl", l_onl), ("l_off", l_off), ("l_dist", l_dist)):
        val = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        if not np.isfinite(val).all():
            raise ValueError(f"{name} is not finite")
    return w.lambda_onl * l_onl + w.lambda_off * l_off + w.lambda_dist * l_dist


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr at warmup_steps, then inverse square-root decay."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return cfg.peak_lr * min(step / cfg.warmup_steps, math.sqrt(cfg.warmup_steps / step))


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class Batch:
    feats: np.ndarray  # (B, T, D_in) zero padded
    lengths: np.ndarray
    targets: list[list[int]]
    utt_ids: list[str] = field(default_factory=list)


def make_batch(utts: list[Utterance]) -> Batch:
    T = max(u.feats.shape[0] for u in utts)
    feats = np.zeros((len(utts), T, utts[0].feats.shape[1]))
    for i, u in enumerate(utts):
        feats[i, : u.feats.shape[0]] = u.feats
    return Batch(feats, np.array([u.feats.shape[0] for u in utts]), [list(u.tokens) for u in utts], [u.utt_id for u in utts])


def _per_token_mean(nll: Tensor, targets) -> Tensor:
    """Batch mean of NLL / max(U, 1); infeasible (+inf) sequences are dropped."""
    denom = np.array([max(len(y), 1) for y in targets], dtype=np.float64)
    finite = np.isfinite(nll.data)
    kept = nx.where(finite, nll, 0.0) if not finite.all() else nll
    return (kept / denom).sum() * (1.0 / max(int(finite.sum()), 1))


def compute_losses(batch: Batch, model: Model, cfg: TrainConfig, loss_w: LossWeights, rng: np.random.Generator):
    """Forward pass through both paths; returns named loss tensors (no weighting by MTL)."""
    mcfg, p = model.cfg, model.params
    targets = batch.targets
    h_st, st_layers, h_te, te_layers = model.encode(Tensor(batch.feats), batch.lengths)

    lattice_st, pred_st = rnnt_forward(h_st, targets, p, mcfg, path="rnnt_st")
    l_onl = _per_token_mean(rnnt_loss_batch(lattice_st, targets, h_st.lengths), targets)

    l_ctc = _per_token_mean(ctc_loss_batch(ctc_logits(h_te, p), targets, h_te.lengths), targets)
    lattice_te, _ = rnnt_forward(h_te, targets, p, mcfg, path="rnnt_nst")
    l_rnnt = _per_token_mean(rnnt_loss_batch(lattice_te, targets, h_te.lengths), targets)

    att_lp, att_hidden = attention_logits(h_te, targets, p, mcfg)
    eos_targets, eos_lengths = pad_targets(targets, suffix=0)
    l_att = attention_ce_batch(att_lp, eos_targets, eos_lengths).mean()

    ratio = float(rng.uniform(cfg.mask_ratio_min, cfg.mask_ratio_max))
    masked, mask = [], np.zeros((len(targets), max(len(y) for y in targets)), bool)
    for i, y in enumerate(targets):
        ym, pos = mlm_mask(y, ratio, rng, mcfg.mask_id)
        masked.append(ym)
        mask[i, pos] = True
    padded, _ = pad_targets(targets)
    l_mlm = mlm_loss_batch(mlm_logits(h_te, masked, p, mcfg), padded, mask).mean()

    if cfg.distill_mode == "none":
        l_dist = Tensor(0.0)
    elif cfg.distill_mode == "mse-ED":
        l_dist = mse_ed_loss(h_te, h_st, detach_teacher=cfg.detach_teacher)
    elif cfg.distill_mode == "sp-ED":
        te, st, zeta = collect_sp_ed_pairs(te_layers, st_layers, cfg.sp_ed_every)
        l_dist = sp_kd_loss(te, st, zeta, detach_teacher=cfg.detach_teacher)
    else:
        te, st, zeta = collect_sp_dd_pairs(att_hidden, pred_st, [len(y) + 1 for y in targets])
        l_dist = sp_kd_loss(te, st, zeta, detach_teacher=cfg.detach_teacher)
    l_off = offline_loss({"ctc": l_ctc, "rnnt": l_rnnt, "att": l_att, "mlm": l_mlm}, loss_w)
    return {"l_onl": l_onl, "l_ctc": l_ctc, "l_rnnt": l_rnnt, "l_att": l_att, "l_mlm": l_mlm, "l_dist": l_dist, "l_off": l_off}


def compute_grads(batch, model, cfg, w: MtlWeights, loss_w: LossWeights, rng):
    """Forward + backward. Returns (losses, total, grads) or (losses, None, None) when non-finite."""
    for t in model.params.values():
        t.grad = None
    parts = compute_losses(batch, model, cfg, loss_w, rng)
    try:
        total = total_loss(parts["l_onl"], parts["l_off"], parts["l_dist"], w)
    except ValueError:
        return parts, None, None
    if total.requires_grad:
        total.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in model.params.items()}
    return parts, total, grads


def train_step(batch: Batch, model: Model, cfg: TrainConfig, w: MtlWeights, loss_w: LossWeights, opt: Adam, rng, step: int) -> dict:
    """One forward/backward/update. Skips the update if the total loss is not finite."""
    parts, total, grads = compute_grads(batch, model, cfg, w, loss_w, rng)
    lr = lr_schedule(step, cfg)
    metrics = {k: float(v.item() if isinstance(v, Tensor) else v) for k, v in parts.items()}
    if total is None:
        log.warning("step %d: non-finite loss, update skipped: %s", step, metrics)
        metrics.update(total=float("nan"), grad_norm=float("nan"), lr=lr, skipped=True)
        return metrics
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if cfg.grad_clip is not None and norm > cfg.grad_clip:
        scale = cfg.grad_clip / norm
        grads = {k: g * scale for k, g in grads.items()}
    opt.step(grads, lr)
    metrics.update(total=total.item(), grad_norm=norm, lr=lr, skipped=False)
    return metrics


# -- evaluation ----------------------------------------------------------------------
def decode_utterances(model: Model, utts: list[Utterance], mode: str, beam: int = 1, batch_size: int = 16):
    """Decode with the streaming or non-streaming transducer. Returns hypotheses in input order."""
    if mode not in ("streaming", "non-streaming"):
        raise ValueError(f"mode must be 'streaming' or 'non-streaming', got {mode!r}")
    path = "rnnt_st" if mode == "streaming" else "rnnt_nst"
    out = []
    with nx.no_grad():
        for i in range(0, len(utts), batch_size):
            b = make_batch(utts[i : i + batch_size])
            h_st, _, h_te, _ = model.encode(Tensor(b.feats), b.lengths)
            h = h_st if mode == "streaming" else h_te
            for j in range(len(b.targets)):
                T = int(h.lengths[j])
                scorer = model.scorer(h.values.data[j, :T], path)
                hyp = rnnt_greedy(scorer, T) if beam == 1 else rnnt_beam(scorer, T, beam)
                out.append(hyp)
    return out


def evaluate_cer(model: Model, utts: list[Utterance], mode: str, beam: int = 1) -> float:
    hyps = decode_utterances(model, utts, mode, beam)
    return corpus_cer([u.tokens for u in utts], [h.ids for h in hyps])


# -- training loop -------------------------------------------------------------------------
@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def series(self, name: str) -> list[float]:
        return [r[name] for r in self.steps]


def fit(
    train: list[Utterance],
    model: Model,
    cfg: TrainConfig,
    w: MtlWeights = MtlWeights(),
    loss_w: LossWeights = LossWeights(),
    dev: list[Utterance] | None = None,
    log_path: str | None = None,
) -> TrainLog:
    """Epochs x shuffled batches of train_step, with per-epoch greedy dev CER on both paths."""
    rng = np.random.default_rng([cfg.seed, 2])
    opt = Adam(model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    history = TrainLog()
    fh = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train))
            sums = {k: 0.0 for k in LOSS_SERIES}
            n = 0
            for i in range(0, len(order), cfg.batch_size):
                step += 1
                batch = make_batch([train[j] for j in order[i : i + cfg.batch_size]])
                m = train_step(batch, model, cfg, w, loss_w, opt, rng, step)
                rec = {"step": step, "epoch": epoch, **{k: m[k] for k in LOSS_SERIES}, "lr": m["lr"]}
                history.steps.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if not m["skipped"]:
                    n += 1
                    for k in LOSS_SERIES:
                        sums[k] += m[k]
            ep = {"epoch": epoch, **{k: sums[k] / max(n, 1) for k in LOSS_SERIES}}
            if dev:
                ep["dev_cer_streaming"] = evaluate_cer(model, dev, "streaming")
                ep["dev_cer_nonstreaming"] = evaluate_cer(model, dev, "non-streaming")
            history.epochs.append(ep)
            log.info("epoch %d: %s", epoch, ep)
    finally:
        if fh:
            fh.close()
    return history
