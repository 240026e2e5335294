import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_log, random_log
from gru4rec.corpus import (
    NegativeSampler,
    SessionCorpus,
    SessionParallelIterator,
    batch_candidate_set,
    build_corpus,
    draw_negatives,
    index_sessions,
    next_batch,
    pair_multiset,
)


def test_build_corpus_dense_vocabulary():
    log = make_log([(1, "x", 0.0), (1, "y", 1.0), (2, "y", 2.0), (2, "z", 3.0)])
    c = build_corpus(log)
    assert c.n_items == 3
    assert sorted(c.index_of(["x", "y", "z"])) == [0, 1, 2]
    np.testing.assert_array_equal(c.supports[c.index_of(["x", "y", "z"])], [1, 2, 1])
    assert c.supports.sum() == c.n_events == 4


def test_build_corpus_orders_sessions_by_start_time():
    log = make_log([(7, "a", 50.0), (7, "b", 51.0), (3, "c", 10.0), (3, "d", 60.0)])
    c = build_corpus(log)
    assert list(c.item_ids[c.session(0)]) == ["c", "d"]
    assert list(c.item_ids[c.session(1)]) == ["a", "b"]


def test_build_corpus_errors():
    with pytest.raises(ValueError, match="empty"):
        build_corpus(make_log([]))
    with pytest.raises(ValueError, match="at least 2"):
        build_corpus(make_log([(1, "a", 0.0)]))


def test_index_sessions_unknown_items():
    c = build_corpus(make_log([(1, "a", 0.0), (1, "b", 1.0)]))
    idx, offsets = index_sessions(make_log([(5, "a", 0.0), (5, "zz", 1.0), (6, "b", 2.0)]), c)
    np.testing.assert_array_equal(idx, [c.index_of(["a"])[0], -1, c.index_of(["b"])[0]])
    np.testing.assert_array_equal(offsets, [0, 2, 3])


def test_item_map_round_trip(tmp_path, small_corpus):
    small_corpus.write_item_map(tmp_path / "items.tsv")
    assert SessionCorpus.read_item_map(tmp_path / "items.tsv").equals(small_corpus.item_ids)


# ---------------------------------------------------------------------------
# iterator


def corpus_from_sessions(sessions):
    items, offsets = [], [0]
    for s in sessions:
        items += s
        offsets.append(len(items))
    return np.array(items), np.array(offsets)


def test_iterator_worked_example():
    a, b, c, d, e, f, g = range(7)
    items, offsets = corpus_from_sessions([[a, b, c], [d, e], [f, g]])
    batches = list(SessionParallelIterator(items, offsets, 2))
    assert len(batches) == 2
    np.testing.assert_array_equal(batches[0].inputs, [a, d])
    np.testing.assert_array_equal(batches[0].targets, [b, e])
    np.testing.assert_array_equal(batches[0].reset_mask, [True, True])
    np.testing.assert_array_equal(batches[1].inputs, [b, f])
    np.testing.assert_array_equal(batches[1].targets, [c, g])
    np.testing.assert_array_equal(batches[1].reset_mask, [False, True])


def test_iterator_single_session_batch_of_one():
    items, offsets = corpus_from_sessions([[4, 5, 6, 7]])
    it = iter(SessionParallelIterator(items, offsets, 1))
    seen = []
    while (batch := next_batch(it)) is not None:
        seen.append((int(batch.inputs[0]), int(batch.targets[0]), bool(batch.reset_mask[0])))
    assert seen == [(4, 5, True), (5, 6, False), (6, 7, False)]


def test_iterator_batch_shrinks_at_epoch_end():
    items, offsets = corpus_from_sessions([[0, 1], [2, 3, 4, 5, 6], [7, 8]])
    sizes = [len(b) for b in SessionParallelIterator(items, offsets, 2)]
    assert sizes == [2, 2, 1, 1]


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.lists(st.integers(0, 9), min_size=2, max_size=7), min_size=1, max_size=25),
    st.integers(1, 10),
    st.booleans(),
)
def test_iterator_epoch_completeness(sessions, batch_size, shuffle):
    items, offsets = corpus_from_sessions(sessions)
    order = np.random.default_rng(0).permutation(len(sessions)) if shuffle else None
    emitted = []
    for batch in SessionParallelIterator(items, offsets, batch_size, order=order):
        emitted += list(zip(batch.inputs.tolist(), batch.targets.tolist()))
    assert sorted(emitted) == pair_multiset(items, offsets)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.integers(2, 7), min_size=1, max_size=25),
    st.integers(1, 6),
)
def test_reset_mask_marks_session_changes(lengths, batch_size):
    # session k holds distinct global positions, so each slot's lineage is checkable
    offsets = np.r_[0, np.cumsum(lengths)]
    items = np.arange(offsets[-1])
    session_of = np.repeat(np.arange(len(lengths)), lengths)
    last = {}
    for batch in SessionParallelIterator(items, offsets, batch_size):
        for slot, inp, reset in zip(batch.slots, batch.inputs, batch.reset_mask):
            if reset:
                assert inp == offsets[session_of[inp]]
            else:
                assert inp == last[slot] + 1 and session_of[inp] == session_of[last[slot]]
            last[slot] = inp


def test_iterator_deterministic_for_seed(small_corpus):
    def stream(seed):
        sampler = NegativeSampler(small_corpus.supports, 0.5, np.random.default_rng(seed), cache_size=100)
        it = SessionParallelIterator.for_corpus(small_corpus, 4, rng=np.random.default_rng(seed), sampler=sampler, n_sample=3)
        return [np.concatenate([b.inputs, b.targets, b.extra_negatives]) for b in it]

    a, b = stream(9), stream(9)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


# ---------------------------------------------------------------------------
# sampling


@pytest.mark.parametrize("alpha, p_a", [(1.0, 0.8), (0.5, 2 / 3)])
def test_sampler_probabilities(alpha, p_a):
    s = NegativeSampler(np.array([4, 1]), alpha, np.random.default_rng(0), cache_size=10)
    np.testing.assert_allclose(s.probabilities[0], p_a)


def test_sampler_n_sample_zero_and_refill():
    s = NegativeSampler(np.array([1, 2, 3]), 1.0, np.random.default_rng(0), cache_size=5)
    assert len(draw_negatives(s, 0)) == 0
    draws = np.concatenate([s.draw(3) for _ in range(10)])
    assert len(draws) == 30 and draws.min() >= 0 and draws.max() <= 2


def test_sampler_marginals_within_four_standard_errors():
    supports = np.random.default_rng(1).integers(1, 50, size=40)
    for alpha in (0.0, 0.5, 1.0):
        s = NegativeSampler(supports, alpha, np.random.default_rng(2), cache_size=200_000)
        n = 1_000_000
        counts = np.bincount(s.draw(n), minlength=len(supports))
        p = supports**alpha / (supports**alpha).sum()
        z = np.abs(counts / n - p) / np.sqrt(p * (1 - p) / n)
        assert z.max() < 4


def test_candidate_set_layout():
    batch = SessionParallelIterator(np.array([0, 1, 2, 3, 4, 5]), np.array([0, 2, 4, 6]), 3)
    b = next(iter(batch))
    b.extra_negatives = np.array([9, 8])
    np.testing.assert_array_equal(batch_candidate_set(b), [1, 3, 5, 9, 8])
    b.extra_negatives = np.zeros(0, dtype=np.int64)
    np.testing.assert_array_equal(batch_candidate_set(b), [1, 3, 5])


def test_read_corpus_tsv(tmp_path):
    log = random_log(np.random.default_rng(3), 10, 6)
    log.to_tsv(tmp_path / "t.tsv")
    from gru4rec.corpus import read_corpus_tsv

    c = read_corpus_tsv(tmp_path / "t.tsv")
    assert c.n_events == len(log) and c.n_sessions == 10
