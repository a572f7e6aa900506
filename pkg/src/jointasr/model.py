"""Cascaded streaming / full-context encoders and the four decoder heads.

The streaming encoder runs every block of the utterance as its own short
attention window (block frames plus look-ahead, plus one context token).
Context tokens are inherited diagonally: the context output of block b-1
at layer l becomes the context input of block b at layer l+1, so blocks in
one layer can be computed together. The full-context encoder consumes the
streaming encoder's output.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .blocking import BlockSpec, block_layout
from .numerics import MASK_VALUE, Tensor

BLANK = 0
SOS = EOS = 0


@dataclass(frozen=True)
class ModelConfig:
    M: int = 2  # streaming layers
    N: int = 2  # full-context layers
    D: int = 32
    heads: int = 4
    D_in: int = 16
    V: int = 8  # content tokens 1..V; 0 is blank/sos/eos, V+1 is <mask>
    subsample_factor: int = 1
    ff_dim: int = 64
    pred_dim: int = 32
    joint_dim: int = 32
    dec_layers: int = 1

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError(f"need M >= 1 and N >= 1, got M={self.M}, N={self.N}")
        if self.D % self.heads:
            raise ValueError(f"D={self.D} is not divisible by heads={self.heads}")
        if self.V < 1 or self.D_in < 1 or self.subsample_factor < 1 or self.dec_layers < 1:
            raise ValueError("V, D_in, subsample_factor and dec_layers must be positive")

    @property
    def mask_id(self) -> int:
        return self.V + 1

    @property
    def n_out(self) -> int:
        return self.V + 1


@dataclass
class HiddenStates:
    values: Tensor  # (B, T, D), zero beyond lengths
    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if (self.lengths > self.values.shape[1]).any():
            raise ValueError("a length exceeds the padded time axis")

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.values.shape[1])[None, :] < self.lengths[:, None]

    @property
    def shape(self):
        return self.values.shape


def validate_targets(y: Sequence[int], V: int) -> None:
    for k in y:
        if not 1 <= int(k) <= V:
            raise ValueError(f"target id {k} is reserved or outside 1..{V}")


# -- parameters --------------------------------------------------------------------
def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _ParamBuilder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def weight(self, name, shape, fan_in=None):
        self.params[name] = Tensor(_uniform(self.rng, shape, fan_in or shape[0]), requires_grad=True)

    def zeros(self, name, shape):
        self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(self, name, shape):
        self.params[name] = Tensor(np.ones(shape), requires_grad=True)

    def linear(self, name, d_in, d_out):
        self.weight(f"{name}.w", (d_in, d_out))
        self.zeros(f"{name}.b", (d_out,))

    def norm(self, name, d):
        self.ones(f"{name}.g", (d,))
        self.zeros(f"{name}.b", (d,))

    def attention(self, name, d):
        for p in ("q", "k", "v", "o"):
            self.linear(f"{name}.{p}", d, d)

    def ff(self, name, d, hidden):
        self.linear(f"{name}.ff1", d, hidden)
        self.linear(f"{name}.ff2", hidden, d)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    pb = _ParamBuilder(seed)
    D = cfg.D
    pb.linear("st.in", cfg.D_in, D)
    pb.weight("st.ctx0", (D,), fan_in=D)
    for i in range(cfg.M):
        pb.norm(f"st.l{i}.ln1", D)
        pb.attention(f"st.l{i}.att", D)
        pb.norm(f"st.l{i}.ln2", D)
        pb.ff(f"st.l{i}", D, cfg.ff_dim)
    pb.norm("st.out_ln", D)
    for i in range(cfg.N):
        pb.norm(f"nst.l{i}.ln1", D)
        pb.attention(f"nst.l{i}.att", D)
        pb.norm(f"nst.l{i}.ln2", D)
        pb.ff(f"nst.l{i}", D, cfg.ff_dim)
    pb.norm("nst.out_ln", D)
    pb.linear("ctc.out", D, cfg.n_out)
    for path in ("rnnt_st", "rnnt_nst"):
        pb.weight(f"{path}.emb", (cfg.n_out, cfg.pred_dim), fan_in=1)
        pb.linear(f"{path}.pred", cfg.pred_dim, cfg.pred_dim)
        pb.weight(f"{path}.enc_proj", (D, cfg.joint_dim))
        pb.linear(f"{path}.pred_proj", cfg.pred_dim, cfg.joint_dim)
        pb.linear(f"{path}.out", cfg.joint_dim, cfg.n_out)
    for dec, vocab, n_cls in (("att", cfg.n_out, cfg.n_out), ("mlm", cfg.n_out + 1, cfg.n_out + 1)):
        pb.weight(f"{dec}.emb", (vocab, D), fan_in=1)
        for i in range(cfg.dec_layers):
            pb.norm(f"{dec}.l{i}.ln1", D)
            pb.attention(f"{dec}.l{i}.self", D)
            pb.norm(f"{dec}.l{i}.ln2", D)
            pb.attention(f"{dec}.l{i}.src", D)
            pb.norm(f"{dec}.l{i}.ln3", D)
            pb.ff(f"{dec}.l{i}", D, cfg.ff_dim)
        pb.norm(f"{dec}.out_ln", D)
        pb.linear(f"{dec}.out", D, n_cls)
    return pb.params


# -- building blocks ---------------------------------------------------------------
def _linear(p, name, x):
    return x @ p[f"{name}.w"] + p[f"{name}.b"]


def _norm(p, name, x):
    return nx.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def _ff(p, name, x):
    return _linear(p, f"{name}.ff2", nx.relu(_linear(p, f"{name}.ff1", x)))


def positional_encoding(T: int, D: int, offset: int = 0) -> np.ndarray:
    pos = np.arange(offset, offset + T)[:, None]
    i = np.arange(D // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / D)
    pe = np.zeros((T, D))
    pe[:, 0 : 2 * (D // 2) : 2] = np.sin(angle)
    pe[:, 1 : 2 * (D // 2) : 2] = np.cos(angle)
    return pe


def multi_head_attention(p, name, xq: Tensor, xkv: Tensor, allowed: np.ndarray, heads: int) -> Tensor:
    """``allowed`` broadcasts to (B, Lq, Lk); False entries get zero weight."""
    B, Lq, D = xq.shape
    Lk = xkv.shape[1]
    dh = D // heads
    q = _linear(p, f"{name}.q", xq).reshape(B, Lq, heads, dh).transpose(0, 2, 1, 3)
    k = _linear(p, f"{name}.k", xkv).reshape(B, Lk, heads, dh).transpose(0, 2, 3, 1)
    v = _linear(p, f"{name}.v", xkv).reshape(B, Lk, heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k) * (1.0 / math.sqrt(dh))
    allowed = np.broadcast_to(np.asarray(allowed, bool)[:, None], (B, heads, Lq, Lk))
    weights = nx.softmax(nx.masked_fill(scores, ~allowed, MASK_VALUE), axis=-1)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Lq, D)
    return _linear(p, f"{name}.o", out)


def _encoder_layer(p, name, x, allowed, heads):
    y = _norm(p, f"{name}.ln1", x)
    x = x + multi_head_attention(p, f"{name}.att", y, y, allowed, heads)
    return x + _ff(p, name, _norm(p, f"{name}.ln2", x))


def _masked(x: Tensor, mask: np.ndarray) -> Tensor:
    return x * mask[:, :, None].astype(np.float64)


# -- encoders ----------------------------------------------------------------------
def streaming_encode(
    x: Tensor, lengths: Sequence[int], cfg: ModelConfig, spec: BlockSpec, params
) -> tuple[HiddenStates, list[HiddenStates]]:
    """Block-restricted encoder. Returns the final states and each layer's states."""
    x = nx.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != cfg.D_in:
        raise ValueError(f"expected (B, T, {cfg.D_in}) features, got {x.shape}")
    B, T, _ = x.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    p, D, f = params, cfg.D, cfg.subsample_factor

    h = _linear(p, "st.in", x)
    if f > 1:
        h = _masked(h, np.arange(T)[None, :] < lengths[:, None])
        Tp = -(-T // f) * f
        if Tp > T:
            h = nx.concat([h, Tensor(np.zeros((B, Tp - T, D)))], axis=1)
        h = h.reshape(B, Tp // f, f, D).mean(axis=2)
        lengths = -(-lengths // f)
        T = Tp // f
    h = h + positional_encoding(T, D)

    lay = block_layout(T, spec)
    nb, W = lay.window.shape
    idx = np.minimum(lay.window, T - 1)
    valid = lay.window_valid[None] & (lay.window[None] < lengths[:, None, None])  # (B, nb, W)
    allowed = np.concatenate([np.ones((B, nb, 1), bool), valid], axis=2).reshape(B * nb, 1, W + 1)

    win = h[:, idx].reshape(B * nb, W, D)
    ctx0 = p["st.ctx0"].reshape(1, 1, D)
    ctx = ctx0 + Tensor(np.zeros((B * nb, 1, D)))
    frame_mask = np.arange(T)[None, :] < lengths[:, None]
    layers = []
    for i in range(cfg.M):
        z = _encoder_layer(p, f"st.l{i}", nx.concat([ctx, win], axis=1), allowed, cfg.heads)
        win = z[:, 1:]
        ctx_out = z[:, 0].reshape(B, nb, D)
        if nb > 1:
            shifted = nx.concat([ctx0.reshape(1, 1, D) + Tensor(np.zeros((B, 1, D))), ctx_out[:, :-1]], axis=1)
        else:
            shifted = ctx0.reshape(1, 1, D) + Tensor(np.zeros((B, 1, D)))
        ctx = shifted.reshape(B * nb, 1, D)
        frames = win.reshape(B, nb, W, D)[:, lay.owner, lay.owner_pos]
        if i == cfg.M - 1:
            frames = _norm(p, "st.out_ln", frames)
        layers.append(HiddenStates(_masked(frames, frame_mask), lengths))
    return layers[-1], layers


def nonstreaming_encode(
    h_st: HiddenStates, cfg: ModelConfig, params
) -> tuple[HiddenStates, list[HiddenStates]]:
    """Full-context encoder over the streaming encoder's output."""
    if h_st.values.shape[-1] != cfg.D:
        raise ValueError(f"expected width {cfg.D}, got {h_st.values.shape[-1]}")
    mask = h_st.mask
    allowed = mask[:, None, :]
    x = h_st.values
    layers = []
    for i in range(cfg.N):
        x = _encoder_layer(params, f"nst.l{i}", x, allowed, cfg.heads)
        out = _norm(params, "nst.out_ln", x) if i == cfg.N - 1 else x
        layers.append(HiddenStates(_masked(out, mask), h_st.lengths))
    return layers[-1], layers


# -- decoder heads ---------------------------------------------------------------
def pad_targets(targets: Sequence[Sequence[int]], prefix: int | None = None, suffix: int | None = None, fill: int = 0):
    seqs = [([prefix] if prefix is not None else []) + list(y) + ([suffix] if suffix is not None else []) for y in targets]
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, np.array([len(s) for s in seqs], dtype=np.int64)


def prediction_network(params, path: str, ids: np.ndarray) -> Tensor:
    """Stateless prediction network: embedding of the previous token, projected."""
    return nx.tanh(_linear(params, f"{path}.pred", params[f"{path}.emb"][ids]))


def rnnt_forward(
    h: HiddenStates, targets: Sequence[Sequence[int]], params, cfg: ModelConfig, path: str = "rnnt_nst"
) -> tuple[Tensor, Tensor]:
    """Joint log-probability lattice (B, T, U+1, V+1) and the prediction states (B, U+1, P)."""
    for y in targets:
        validate_targets(y, cfg.V)
    ids, _ = pad_targets(targets, prefix=BLANK)
    pred = prediction_network(params, path, ids)
    B, T, _ = h.values.shape
    U1 = ids.shape[1]
    J = cfg.joint_dim
    enc = (h.values @ params[f"{path}.enc_proj"]).reshape(B, T, 1, J)
    dec = _linear(params, f"{path}.pred_proj", pred).reshape(B, 1, U1, J)
    joint = nx.tanh(enc + dec)
    lattice = nx.log_softmax(_linear(params, f"{path}.out", joint), axis=-1)
    return lattice, pred


def ctc_logits(h: HiddenStates, params) -> Tensor:
    return nx.log_softmax(_linear(params, "ctc.out", h.values), axis=-1)


def _decoder(params, dec: str, ids: np.ndarray, lengths: np.ndarray, h: HiddenStates, cfg: ModelConfig, causal: bool):
    B, L = ids.shape
    x = params[f"{dec}.emb"][ids] + positional_encoding(L, cfg.D)
    pad = np.arange(L)[None, :] < lengths[:, None]
    self_allowed = np.broadcast_to(pad[:, None, :], (B, L, L))
    if causal:
        self_allowed = self_allowed & np.tril(np.ones((L, L), bool))[None]
    src_allowed = h.mask[:, None, :]
    for i in range(cfg.dec_layers):
        n = f"{dec}.l{i}"
        y = _norm(params, f"{n}.ln1", x)
        x = x + multi_head_attention(params, f"{n}.self", y, y, self_allowed, cfg.heads)
        x = x + multi_head_attention(params, f"{n}.src", _norm(params, f"{n}.ln2", x), h.values, src_allowed, cfg.heads)
        x = x + _ff(params, n, _norm(params, f"{n}.ln3", x))
    hidden = _masked(_norm(params, f"{dec}.out_ln", x), pad)
    return nx.log_softmax(_linear(params, f"{dec}.out", hidden), axis=-1), hidden


def attention_logits(h: HiddenStates, targets: Sequence[Sequence[int]], params, cfg: ModelConfig):
    """Teacher-forced (B, U+1, V+1) log-probs over the sos-prefixed input, plus decoder states."""
    for y in targets:
        validate_targets(y, cfg.V)
    ids, lengths = pad_targets(targets, prefix=SOS)
    return _decoder(params, "att", ids, lengths, h, cfg, causal=True)


def mlm_logits(h: HiddenStates, masked: Sequence[Sequence[int]], params, cfg: ModelConfig):
    """(B, U, V+2) log-probs from the masked sequence, attending both ways."""
    for y in masked:
        if cfg.mask_id not in y:
            raise ValueError("mlm_logits needs at least one masked position per sequence")
    ids, lengths = pad_targets(masked)
    return _decoder(params, "mlm", ids, lengths, h, cfg, causal=False)[0]


def mlm_mask(y: Sequence[int], mask_ratio: float, seed, mask_id: int):
    """Replace ceil(mask_ratio * U) randomly chosen positions with ``mask_id``.

    ``seed`` may be an int or a numpy Generator.
    """
    if not 0 < mask_ratio <= 1:
        raise ValueError(f"mask_ratio must be in (0, 1], got {mask_ratio}")
    U = len(y)
    if U == 0:
        raise ValueError("cannot mask an empty target")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = max(1, math.ceil(mask_ratio * U - 1e-12))
    positions = sorted(int(i) for i in rng.choice(U, size=k, replace=False))
    masked = list(y)
    for i in positions:
        masked[i] = mask_id
    return masked, positions


# -- model wrapper -----------------------------------------------------------------
class Model:
    def __init__(self, cfg: ModelConfig, spec: BlockSpec, seed: int = 0, params=None):
        self.cfg = cfg
        self.spec = spec
        self.params = params if params is not None else init_params(cfg, seed)

    def encode(self, feats: Tensor, lengths):
        h_st, st_layers = streaming_encode(feats, lengths, self.cfg, self.spec, self.params)
        h_te, te_layers = nonstreaming_encode(h_st, self.cfg, self.params)
        return h_st, st_layers, h_te, te_layers

    def scorer(self, h_frames: np.ndarray, path: str) -> "TransducerScorer":
        return TransducerScorer(self.params, path, h_frames)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k] = Tensor(np.array(v), requires_grad=True)


class TransducerScorer:
    """Numpy joint-network evaluation for decoding one utterance.

    The prediction network is stateless, so its output for every possible
    previous token is tabulated once.
    """

    def __init__(self, params, path: str, h_frames: np.ndarray):
        d = {k: v.data for k, v in params.items() if k.startswith(path + ".")}
        pred = np.tanh(d[f"{path}.emb"] @ d[f"{path}.pred.w"] + d[f"{path}.pred.b"])
        self.pred_table = pred @ d[f"{path}.pred_proj.w"] + d[f"{path}.pred_proj.b"]
        self.enc = np.asarray(h_frames) @ d[f"{path}.enc_proj"]
        self.out_w = d[f"{path}.out.w"]
        self.out_b = d[f"{path}.out.b"]
        self.T = self.enc.shape[0]

    def __call__(self, t: int, last_token: int) -> np.ndarray:
        logits = np.tanh(self.enc[t] + self.pred_table[last_token]) @ self.out_w + self.out_b
        return nx.log_softmax(logits)


# -- checkpoint I/O --------------------------------------------------------------------
CKPT_MAGIC = b"JASRCKPT"


def save_checkpoint(path: str, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Flat container: magic, u64 header length, JSON header, raw little-endian float64."""
    entries, offset, blobs = [], 0, []
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"params": entries, "meta": meta or {}}, sort_keys=True).encode()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    base = 16 + hlen
    state = {}
    for e in header["params"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw[start : start + e["nbytes"]], dtype="<f8")
        state[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return state, header["meta"]


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
