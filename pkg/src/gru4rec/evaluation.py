"""Next-item evaluation: recall@N and MRR@N over test sessions."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import SessionCorpus, SessionParallelIterator, index_sessions
from .datasets import EventLog
from .model import ModelParams, reset_rows, score_all, step

DEFAULT_CUTOFFS = (1, 5, 10, 20)


@dataclass
class EvalConfig:
    cutoffs: tuple[int, ...] = DEFAULT_CUTOFFS
    batch_size: int = 512

    def __post_init__(self):
        self.cutoffs = tuple(int(n) for n in self.cutoffs)
        if not self.cutoffs or min(self.cutoffs) < 1:
            raise ValueError("cutoffs must be positive")
        if list(self.cutoffs) != sorted(set(self.cutoffs)):
            raise ValueError("cutoffs must be strictly ascending")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class EvalResult:
    recall: dict[int, float]
    mrr: dict[int, float]
    evaluated_events: int
    skipped_unknown: int
    skipped_no_context: int
    first_events: int
    total_events: int
    extra: dict = field(default_factory=dict)

    @property
    def skipped(self) -> int:
        return self.skipped_unknown + self.skipped_no_context

    def rows(self) -> list[tuple[int, float, float]]:
        return [(n, self.recall[n], self.mrr[n]) for n in sorted(self.recall)]

    def to_tsv(self) -> str:
        lines = ["cutoff\trecall\tmrr"]
        lines += [f"{n}\t{r:.6f}\t{m:.6f}" for n, r, m in self.rows()]
        return "\n".join(lines) + "\n"

    def to_json(self, **extra) -> str:
        d = asdict(self)
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        d["mrr"] = {str(k): v for k, v in self.mrr.items()}
        d["skipped"] = self.skipped
        d.update(extra)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def rank_of_target(scores: np.ndarray, target: int) -> int:
    """1 + number of items scored strictly higher than the target (ties are optimistic)."""
    scores = np.asarray(scores)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    return int(np.count_nonzero(scores > scores[target])) + 1


def metrics_from_ranks(ranks: np.ndarray, cutoffs) -> tuple[dict, dict]:
    """Recall@N and MRR@N; ranks are sorted first so the result does not depend on event order."""
    ranks = np.sort(np.asarray(ranks, dtype=np.int64))
    recall, mrr = {}, {}
    for n in cutoffs:
        hit = ranks[ranks <= n]
        recall[n] = len(hit) / len(ranks) if len(ranks) else 0.0
        mrr[n] = float(np.sum(1.0 / hit)) / len(ranks) if len(ranks) else 0.0
    return recall, mrr


class ModelRanker:
    """Frozen GRU4Rec model seen as a ranker: feed items, score the catalog."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.n_items = params.n_items

    def zero_state(self, n):
        return self.params.zero_state(n)

    def step(self, state, inputs):
        out, new_state, _ = step(self.params, state, inputs)
        return out, new_state

    def score_all(self, output):
        return score_all(self.params, output)


class PopularityRanker:
    """Ranks every item by training support, whatever the session did so far."""

    def __init__(self, supports: np.ndarray):
        self.supports = np.asarray(supports, dtype=np.float64)
        self.n_items = len(self.supports)

    def zero_state(self, n):
        return [np.zeros((n, 1))]

    def step(self, state, inputs):
        return np.zeros((len(inputs), 1)), state

    def score_all(self, output):
        return np.broadcast_to(self.supports, (len(output), self.n_items))

    def recommend(self, n: int | None = None) -> np.ndarray:
        order = np.argsort(-self.supports, kind="stable")
        return order if n is None else order[:n]


def popularity_baseline(corpus: SessionCorpus) -> PopularityRanker:
    return PopularityRanker(corpus.supports)


def _as_ranker(model):
    return ModelRanker(model) if isinstance(model, ModelParams) else model


@dataclass
class PreparedTest:
    items: np.ndarray  # known items only, sessions back to back
    offsets: np.ndarray  # sessions with at least two known items
    first_events: int
    skipped_unknown: int
    skipped_no_context: int
    total_events: int


def prepare_test(test: EventLog, corpus: SessionCorpus) -> PreparedTest:
    """Drop unknown items from each test session and do the event accounting.

    The first event of a session is never a target. Later events are skipped
    when their item is unknown, or when no known item precedes them.
    """
    idx, offsets = index_sessions(test, corpus)
    n_sessions = len(offsets) - 1
    known = idx >= 0
    first = np.zeros(len(idx), dtype=bool)
    first[offsets[:-1]] = True
    skipped_unknown = int(np.count_nonzero(~known & ~first))
    # per session: number of known items and whether the first event is known
    session_of = np.repeat(np.arange(n_sessions), np.diff(offsets))
    n_known = np.bincount(session_of[known], minlength=n_sessions)
    first_known = known[offsets[:-1]] if n_sessions else np.zeros(0, bool)
    # the earliest known item of a session with an unknown first event has no context
    skipped_no_context = int(np.count_nonzero(~first_known & (n_known > 0)))
    kept = known & np.repeat(n_known >= 2, np.diff(offsets))
    items = idx[kept]
    lengths = n_known[n_known >= 2]
    new_offsets = np.r_[0, np.cumsum(lengths)].astype(np.int64)
    return PreparedTest(items, new_offsets, n_sessions, skipped_unknown, skipped_no_context, len(idx))


def evaluate(model, test: EventLog, corpus: SessionCorpus, config: EvalConfig | None = None) -> EvalResult:
    """Session-parallel replay: before every non-first known event, rank the whole catalog."""
    config = config or EvalConfig()
    if len(test) == 0:
        raise ValueError("empty test set")
    ranker = _as_ranker(model)
    prep = prepare_test(test, corpus)
    ranks = []
    state = ranker.zero_state(config.batch_size)
    for batch in SessionParallelIterator(prep.items, prep.offsets, config.batch_size):
        h = [s[batch.slots] for s in state]
        reset_rows(h, batch.reset_mask)
        out, h = ranker.step(h, batch.inputs)
        for s, hn in zip(state, h):
            s[batch.slots] = hn
        scores = ranker.score_all(out)
        target = scores[np.arange(len(batch)), batch.targets]
        ranks.append(np.count_nonzero(scores > target[:, None], axis=1) + 1)
    ranks = np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)
    recall, mrr = metrics_from_ranks(ranks, config.cutoffs)
    return EvalResult(
        recall, mrr, len(ranks), prep.skipped_unknown, prep.skipped_no_context, prep.first_events, prep.total_events
    )


def naive_evaluate(model, test: EventLog, corpus: SessionCorpus, cutoffs=DEFAULT_CUTOFFS) -> EvalResult:
    """Reference evaluator: a fresh replay of the session prefix for every event and a full sort."""
    ranker = _as_ranker(model)
    prep = prepare_test(test, corpus)
    ranks = []
    for k in range(len(prep.offsets) - 1):
        session = prep.items[prep.offsets[k] : prep.offsets[k + 1]]
        for j in range(1, len(session)):
            state = ranker.zero_state(1)
            for item in session[:j]:
                out, state = ranker.step(state, np.array([item]))
            scores = np.asarray(ranker.score_all(out))[0]
            desc = np.sort(scores)[::-1]
            ranks.append(int(np.flatnonzero(desc <= scores[session[j]])[0]) + 1)
    recall, mrr = metrics_from_ranks(np.array(ranks), cutoffs)
    return EvalResult(
        recall, mrr, len(ranks), prep.skipped_unknown, prep.skipped_no_context, prep.first_events, prep.total_events
    )
