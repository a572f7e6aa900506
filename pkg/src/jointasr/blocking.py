"""Block segmentation for the streaming encoder and its algorithmic delay."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# The reference delay figures for blocks 20 and 40 follow block * 10 ms * 4,
# but the one quoted for block 60 (3200 ms) does not. We report the formula.
BLOCK60_REFERENCE_MS = 3200.0


def block60_note(delay_ms: float) -> str:
    return (
        f"block 60: the delay formula gives {delay_ms:g} ms; the quoted reference "
        f"value of {BLOCK60_REFERENCE_MS:g} ms does not follow the pattern of blocks 20 and 40"
    )


@dataclass(frozen=True)
class BlockSpec:
    block_size: int = 40
    hop: int = 16
    look_ahead: int = 16
    frame_period_ms: float = 10.0

    def __post_init__(self):
        if not 1 <= self.hop <= self.block_size:
            raise ValueError(f"need 1 <= hop <= block_size, got hop={self.hop}, block={self.block_size}")
        if self.look_ahead < 0:
            raise ValueError("look_ahead must be >= 0")
        if self.frame_period_ms <= 0:
            raise ValueError("frame_period_ms must be positive")


@dataclass(frozen=True)
class Block:
    index: int  # 1-based
    start_frame: int
    end_frame: int  # exclusive, clipped to T
    pad_count: int


def num_blocks(T: int, spec: BlockSpec) -> int:
    if T < 1:
        raise ValueError("cannot segment an empty sequence")
    return max(1, math.ceil((T - spec.block_size) / spec.hop) + 1)


def segment_blocks(T: int, spec: BlockSpec) -> list[Block]:
    """Split ``T`` frames into blocks of ``block_size`` frames every ``hop``.

    The final block is zero-padded up to ``block_size``.
    """
    blocks = []
    for b in range(num_blocks(T, spec)):
        start = b * spec.hop
        end = min(start + spec.block_size, T)
        blocks.append(Block(b + 1, start, end, spec.block_size - (end - start)))
    return blocks


def algorithmic_delay(spec: BlockSpec, subsample_factor: int) -> float:
    """Audio (ms) buffered before a block is complete."""
    if subsample_factor < 1:
        raise ValueError("subsample_factor must be >= 1")
    return spec.block_size * spec.frame_period_ms * subsample_factor


@dataclass(frozen=True)
class BlockLayout:
    """Index tables the streaming encoder uses to run all blocks at once.

    window[b] lists the frames block b attends to (its own frames followed
    by look-ahead); ``window_valid`` flags positions that fall inside the
    sequence. Each frame's output is taken from the earliest block that
    contains it: ``owner[t]`` and ``owner_pos[t]`` locate it in the window.
    """

    window: np.ndarray  # (n_blocks, block_size + look_ahead) int, may exceed T - 1
    window_valid: np.ndarray  # same shape, bool
    owner: np.ndarray  # (T,) 0-based block index
    owner_pos: np.ndarray  # (T,) position inside the owner's window

    @property
    def n_blocks(self) -> int:
        return self.window.shape[0]

    def horizon(self, b: int) -> int:
        """First frame index block ``b`` (0-based) can no longer see."""
        return int(self.window[b, -1]) + 1


def block_layout(T: int, spec: BlockSpec) -> BlockLayout:
    nb = num_blocks(T, spec)
    width = spec.block_size + spec.look_ahead
    starts = np.arange(nb) * spec.hop
    window = starts[:, None] + np.arange(width)[None, :]
    valid = window < T
    t = np.arange(T)
    owner = np.maximum(0, -((spec.block_size - 1 - t) // spec.hop))  # ceil((t-L+1)/hop)
    owner = np.minimum(owner, nb - 1)
    owner_pos = t - starts[owner]
    return BlockLayout(window, valid, owner, owner_pos)


def owned_range(b: int, T: int, spec: BlockSpec) -> tuple[int, int]:
    """[start, end) frames whose output comes from block ``b`` (0-based)."""
    start = 0 if b == 0 else b * spec.hop + spec.block_size - spec.hop
    end = b * spec.hop + spec.block_size
    return min(start, T), min(end, T)
