import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_log, random_log
from gru4rec.corpus import build_corpus
from gru4rec.evaluation import (
    EvalConfig,
    PopularityRanker,
    evaluate,
    metrics_from_ranks,
    naive_evaluate,
    popularity_baseline,
    prepare_test,
    rank_of_target,
)
from gru4rec.model import init_model


def test_metric_arithmetic():
    recall, mrr = metrics_from_ranks(np.array([1, 3, 25]), [20])
    assert recall[20] == pytest.approx(2 / 3)
    assert mrr[20] == pytest.approx((1 + 1 / 3) / 3)


def test_rank_counting_and_ties():
    assert rank_of_target(np.array([0.9, 0.1, 0.5]), 2) == 2
    assert rank_of_target(np.zeros(5), 3) == 1
    with pytest.raises(ValueError):
        rank_of_target(np.array([0.0, np.nan]), 0)


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=30), st.data())
def test_rank_matches_sort_oracle(values, data):
    scores = np.array(values, dtype=float)
    target = data.draw(st.integers(0, len(values) - 1))
    desc = sorted(values, reverse=True)
    assert rank_of_target(scores, target) == desc.index(values[target]) + 1


@given(st.lists(st.integers(1, 60), min_size=1, max_size=50))
def test_metric_monotonicity(ranks):
    recall, mrr = metrics_from_ranks(np.array(ranks), (1, 5, 10, 20))
    assert recall[1] == mrr[1]
    for a, b in zip((1, 5, 10), (5, 10, 20)):
        assert recall[a] <= recall[b] and mrr[a] <= mrr[b]
        assert mrr[b] <= recall[b]


def test_popularity_order():
    ranker = PopularityRanker(np.array([5, 3, 1]))
    np.testing.assert_array_equal(ranker.recommend(), [0, 1, 2])


class Oracle:
    """Ranker that scores the true next item of a fixed sequence highest."""

    def __init__(self, n_items, successor):
        self.n_items = n_items
        self.successor = successor

    def zero_state(self, n):
        return [np.zeros((n, 1))]

    def step(self, state, inputs):
        return np.asarray(inputs, dtype=float)[:, None], state

    def score_all(self, output):
        scores = np.zeros((len(output), self.n_items))
        scores[np.arange(len(output)), self.successor[output[:, 0].astype(int)]] = 1.0
        return scores


def test_perfect_ranker_scores_one():
    train = make_log([(s, f"i{(s + t) % 5}", float(t)) for s in range(5) for t in range(3)])
    corpus = build_corpus(train)
    idx = corpus.index_of([f"i{k}" for k in range(5)])
    succ = np.empty(5, dtype=int)
    succ[idx] = idx[(np.arange(5) + 1) % 5]
    test = make_log([(9, f"i{k % 5}", float(k)) for k in range(2, 8)])
    result = evaluate(Oracle(5, succ), test, corpus)
    assert all(v == 1.0 for v in result.recall.values())
    assert all(v == 1.0 for v in result.mrr.values())
    assert result.evaluated_events == 5


def test_unknown_items_skipped_and_state_carried():
    train = make_log([(1, "a", 0.0), (1, "b", 1.0), (2, "c", 2.0), (2, "a", 3.0)])
    corpus = build_corpus(train)
    # session 10: a, X (unknown), b, c -> targets b, c; X skipped
    # session 11: Y (unknown), a, b -> a has no known context, b evaluated
    # session 12: Z alone -> first event only
    test = make_log(
        [(10, "a", 0.0), (10, "X", 1.0), (10, "b", 2.0), (10, "c", 3.0),
         (11, "Y", 4.0), (11, "a", 5.0), (11, "b", 6.0), (12, "Z", 7.0), (12, "W", 8.0)]
    )
    params = init_model(corpus.n_items, [4], "shared", 0, np.random.default_rng(0), dtype=np.float64)
    result = evaluate(params, test, corpus)
    assert result.evaluated_events == 3
    assert result.skipped_unknown == 2
    assert result.skipped_no_context == 1
    assert result.first_events == 3
    assert result.evaluated_events + result.skipped + result.first_events == result.total_events == 9
    assert result == naive_evaluate(params, test, corpus)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 9), st.sampled_from([(1, 5, 10, 20), (3,), (2, 7)]))
def test_batched_matches_naive_replay(seed, batch_size, cutoffs):
    rng = np.random.default_rng(seed)
    corpus = build_corpus(random_log(rng, 20, 15))
    test = random_log(rng, 12, 18, min_len=1, start=500)
    params = init_model(corpus.n_items, [5], "separate", 3, rng, dtype=np.float64)
    fast = evaluate(params, test, corpus, EvalConfig(cutoffs, batch_size))
    slow = naive_evaluate(params, test, corpus, cutoffs)
    assert fast == slow
    assert fast.evaluated_events + fast.skipped + fast.first_events == fast.total_events == len(test)


def test_evaluation_is_deterministic(small_corpus):
    rng = np.random.default_rng(1)
    test = random_log(rng, 10, 12, start=300)
    params = init_model(small_corpus.n_items, [4], "shared", 0, rng)
    assert evaluate(params, test, small_corpus) == evaluate(params, test, small_corpus)


def test_popularity_baseline_metrics(small_corpus):
    test = random_log(np.random.default_rng(2), 15, 12, start=300)
    result = evaluate(popularity_baseline(small_corpus), test, small_corpus)
    ranks = []
    prep = prepare_test(test, small_corpus)
    for k in range(len(prep.offsets) - 1):
        s = prep.items[prep.offsets[k] : prep.offsets[k + 1]]
        ranks += [rank_of_target(small_corpus.supports.astype(float), t) for t in s[1:]]
    assert result.recall == metrics_from_ranks(np.array(ranks), (1, 5, 10, 20))[0]


def test_empty_test_set_rejected(small_corpus):
    with pytest.raises(ValueError, match="empty"):
        evaluate(init_model(small_corpus.n_items, [3]), make_log([]), small_corpus)


def test_eval_config_validation():
    assert EvalConfig((20,)).cutoffs == (20,)
    for bad in [(), (0,), (5, 1), (5, 5)]:
        with pytest.raises(ValueError):
            EvalConfig(bad)


def test_result_outputs(small_corpus):
    test = random_log(np.random.default_rng(3), 5, 12, start=300)
    result = evaluate(init_model(small_corpus.n_items, [3]), test, small_corpus, EvalConfig((1, 20)))
    lines = result.to_tsv().splitlines()
    assert lines[0] == "cutoff\trecall\tmrr" and len(lines) == 3
    d = json.loads(result.to_json(version="x"))
    assert set(d["recall"]) == {"1", "20"} and d["version"] == "x"
