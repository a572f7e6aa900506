import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointasr import numerics as nx
from jointasr.blocking import BlockSpec
from jointasr.decode import (
    cer,
    cerr,
    corpus_cer,
    ctc_greedy,
    edit_distance,
    rnnt_beam,
    rnnt_greedy,
    write_hypotheses,
)
from jointasr.model import Model, ModelConfig
from jointasr.oracles import all_label_sequences, rnnt_alignments


def table_step(seed, T, V, sharp=2.0):
    """Random tabulated transducer: log-probs depend on frame and previous token."""
    table = nx.log_softmax(np.random.default_rng(seed).normal(size=(T, V + 1, V + 1)) * sharp, axis=-1)
    return (lambda t, last: table[t, last]), table


def model_step(seed, T=6):
    cfg = ModelConfig(D=8, heads=2, ff_dim=8, pred_dim=8, joint_dim=8, D_in=3, V=4)
    model = Model(cfg, BlockSpec(4, 2, 1), seed=seed)
    h = np.random.default_rng(seed).normal(size=(T, 8)) * 2.0
    return model.scorer(h, "rnnt_st"), T


def capped_log_prob(table, y, cap):
    """log P(y) summed over alignments with at most ``cap`` labels per frame."""
    T = table.shape[0]
    prev = [0] + list(y)
    total = []
    for steps in rnnt_alignments(T, len(y)):
        per_frame = Counter(t for t, _, blank in steps if not blank)
        if per_frame and max(per_frame.values()) > cap:
            continue
        total.append(sum(table[t, prev[u], 0 if b else y[u]] for t, u, b in steps))
    return -math.inf if not total else float(np.logaddexp.reduce(total))


def test_all_blank_gives_empty():
    lp = np.full(4, -50.0)
    lp[0] = 0.0
    step = lambda t, last: lp
    assert rnnt_greedy(step, 5).ids == []
    assert rnnt_beam(step, 5, 4).ids == []


def test_single_frame_forced_trace():
    # frame 0: after blank-context the argmax is token 1; after token 1 it is blank
    def step(t, last):
        lp = np.full(3, -20.0)
        lp[1 if last == 0 else 0] = -0.01
        return lp

    hyp = rnnt_greedy(step, 1)
    assert hyp.ids == [1]
    assert hyp.score == pytest.approx(-0.02)


def test_emission_cap():
    lp = np.array([-5.0, -0.01])
    hyp = rnnt_greedy(lambda t, last: lp, 2, max_symbols=10)
    assert hyp.ids == [1] * 20
    assert len(rnnt_beam(lambda t, last: lp, 2, 3).ids) <= 20


def test_beam_rejects_zero():
    with pytest.raises(ValueError):
        rnnt_beam(lambda t, last: np.zeros(2), 1, 0)


@pytest.mark.parametrize("seed", range(50))
def test_beam1_equals_greedy(seed):
    step, T = model_step(seed)
    greedy = rnnt_greedy(step, T)
    beam = rnnt_beam(step, T, 1)
    assert beam.ids == greedy.ids
    assert beam.score == pytest.approx(greedy.score, abs=1e-12)
    assert 0 not in greedy.ids and greedy.score <= 0


@pytest.mark.parametrize("seed", range(20))
def test_beam_score_monotone(seed):
    step, T = model_step(seed + 100)
    scores = [rnnt_beam(step, T, b).score for b in (1, 2, 4, 10)]
    assert all(a <= b + 1e-12 for a, b in zip(scores, scores[1:]))
    assert scores[-1] >= rnnt_greedy(step, T).score - 1e-12


@pytest.mark.parametrize("seed", range(15))
def test_wide_beam_finds_most_probable_sequence(seed):
    T, V, cap = 2, 2, 2
    step, table = table_step(seed, T, V)
    best = max(capped_log_prob(table, y, cap) for y in all_label_sequences(V, T * cap))
    hyp = rnnt_beam(step, T, 10_000, max_symbols=cap)
    assert hyp.score == pytest.approx(best, abs=1e-10)
    assert hyp.score == pytest.approx(capped_log_prob(table, hyp.ids, cap), abs=1e-10)


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_beam_hypothesis_is_valid(seed, beam):
    step, _ = table_step(seed, 3, 3)
    hyp = rnnt_beam(step, 3, beam, max_symbols=3)
    assert 0 not in hyp.ids and hyp.score <= 0


def test_ctc_greedy_examples():
    def onehot(path, C=3):
        lp = np.full((len(path), C), -10.0)
        lp[np.arange(len(path)), path] = 0.0
        return lp

    assert ctc_greedy(onehot([1, 1, 0, 2])) == [1, 2]
    assert ctc_greedy(onehot([0, 0, 0])) == []
    assert ctc_greedy(onehot([1, 0, 1])) == [1, 1]


@given(st.integers(1, 12), st.integers(0, 10_000))
def test_ctc_greedy_length(T, seed):
    assert len(ctc_greedy(np.random.default_rng(seed).normal(size=(T, 4)))) <= T


def test_cer_examples():
    assert cer("abc", "abc") == 0.0
    assert cer("abc", "") == 1.0
    assert cer("kitten", "sitting") == 0.5
    with pytest.raises(ValueError):
        cer("", "a")
    assert corpus_cer(["ab", "cd"], ["ab", "c"]) == 0.25


def _brute_edit(a, b):
    # recursion over suffixes, independent of the row-by-row table
    from functools import lru_cache

    @lru_cache(None)
    def d(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(d(i + 1, j) + 1, d(i, j + 1) + 1, d(i + 1, j + 1) + (a[i] != b[j]))

    return d(0, 0)


seqs = st.lists(st.integers(1, 3), max_size=7)


@given(seqs, seqs, seqs)
def test_edit_distance_metric(a, b, c):
    assert edit_distance(a, b) == _brute_edit(tuple(a), tuple(b))
    assert (edit_distance(a, b) == 0) == (a == b)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    if a:
        assert (cer(a, b) == 0) == (a == b)


def test_cerr():
    assert cerr(6.84, 6.66) == pytest.approx(2.63, abs=5e-3)
    assert cerr(0.2, 0.2) == 0.0
    with pytest.raises(ValueError):
        cerr(0.0, 0.1)


def test_write_hypotheses(tmp_path):
    path = tmp_path / "h.tsv"
    write_hypotheses(str(path), [("u1", "streaming", [3, 1], -1.5), ("u2", "non-streaming", [], 0.0)])
    assert path.read_text() == "u1\tstreaming\t3 1\t-1.5\nu2\tnon-streaming\t\t0.0\n"
