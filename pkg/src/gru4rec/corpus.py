"""Indexed training data: item vocabulary, session-parallel batches, negative sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

from .datasets import ITEM, SESSION, TIME, EventLog

SAMPLE_CACHE_SIZE = 10_000_000


def item_keys(frame: pd.DataFrame) -> pd.Index:
    """External item IDs normalised to strings, so TSV and in-memory logs agree."""
    return pd.Index(frame[ITEM].astype(str).to_numpy())


@dataclass
class SessionCorpus:
    item_ids: pd.Index  # position = contiguous index
    supports: np.ndarray
    items: np.ndarray  # flattened item indices, sessions back to back
    session_offsets: np.ndarray  # len n_sessions + 1

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_sessions(self) -> int:
        return len(self.session_offsets) - 1

    @property
    def n_events(self) -> int:
        return len(self.items)

    def index_of(self, external) -> np.ndarray:
        """Map external IDs to indices; unknown IDs map to -1."""
        keys = pd.Index(pd.Series(external).astype(str).to_numpy())
        return self.item_ids.get_indexer(keys)

    def session(self, k: int) -> np.ndarray:
        return self.items[self.session_offsets[k] : self.session_offsets[k + 1]]

    def write_item_map(self, path) -> None:
        pd.DataFrame({"external_id": self.item_ids, "index": np.arange(self.n_items)}).to_csv(
            path, sep="\t", index=False, lineterminator="\n"
        )

    @staticmethod
    def read_item_map(path) -> pd.Index:
        df = pd.read_csv(path, sep="\t", dtype={"external_id": str, "index": np.int64}, keep_default_na=False)
        if not np.array_equal(df["index"].to_numpy(), np.arange(len(df))):
            raise ValueError(f"{path}: item map indices are not dense")
        return pd.Index(df["external_id"].to_numpy())


def build_corpus(train: EventLog, min_session_len: int = 2) -> SessionCorpus:
    """Index a preprocessed training log.

    Sessions are ordered by start time (ties by first appearance); item
    indices follow first appearance in that order.
    """
    frame = train.frame
    if len(frame) == 0:
        raise ValueError("cannot build a corpus from an empty event log")
    start = frame.groupby(SESSION, sort=False)[TIME].transform("min").to_numpy()
    order = np.lexsort((np.arange(len(frame)), frame[TIME].to_numpy(), frame[SESSION].factorize()[0], start))
    # lexsort keys run last-to-first: start time, then session, then time, then input order
    frame = frame.iloc[order]
    codes, ids = pd.factorize(item_keys(frame))
    sessions = frame[SESSION].to_numpy()
    boundary = np.flatnonzero(np.r_[True, sessions[1:] != sessions[:-1]])
    offsets = np.r_[boundary, len(frame)].astype(np.int64)
    if np.any(np.diff(offsets) < min_session_len):
        raise ValueError(f"training sessions must have at least {min_session_len} events")
    supports = np.bincount(codes, minlength=len(ids)).astype(np.int64)
    return SessionCorpus(pd.Index(ids), supports, codes.astype(np.int64), offsets)


def index_sessions(log_: EventLog, corpus: SessionCorpus) -> tuple[np.ndarray, np.ndarray]:
    """Flatten a log into (indices, offsets) using the corpus vocabulary; unknown items are -1."""
    frame = log_.frame
    sessions = frame[SESSION].to_numpy()
    boundary = np.flatnonzero(np.r_[True, sessions[1:] != sessions[:-1]]) if len(frame) else np.zeros(0, int)
    offsets = np.r_[boundary, len(frame)].astype(np.int64)
    return corpus.item_ids.get_indexer(item_keys(frame)).astype(np.int64), offsets


@dataclass
class MiniBatch:
    inputs: np.ndarray
    targets: np.ndarray
    extra_negatives: np.ndarray
    reset_mask: np.ndarray
    slots: np.ndarray  # rows of the full hidden state these examples occupy

    def __len__(self) -> int:
        return len(self.inputs)


class SessionParallelIterator:
    """Session-parallel mini-batches over one epoch.

    Each of ``batch_size`` slots walks one session a step at a time. A slot
    whose session is consumed takes the next session from the pool and is
    flagged for a hidden-state reset. Once the pool is empty, finished slots
    retire and the batch shrinks until every session is consumed.
    """

    def __init__(
        self,
        items: np.ndarray,
        offsets: np.ndarray,
        batch_size: int,
        order: np.ndarray | None = None,
        sampler: "NegativeSampler | None" = None,
        n_sample: int = 0,
    ):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.items = items
        self.offsets = offsets
        self.batch_size = batch_size
        self.order = np.arange(len(offsets) - 1) if order is None else np.asarray(order)
        self.sampler = sampler
        self.n_sample = n_sample

    @classmethod
    def for_corpus(cls, corpus: SessionCorpus, batch_size: int, rng=None, **kw) -> "SessionParallelIterator":
        order = None if rng is None else rng.permutation(corpus.n_sessions)
        return cls(corpus.items, corpus.session_offsets, batch_size, order=order, **kw)

    def __iter__(self) -> Iterator[MiniBatch]:
        offsets, items = self.offsets, self.items
        order = self.order
        n = min(self.batch_size, len(order))
        slots = np.arange(n)
        pos = offsets[order[:n]].copy()
        end = offsets[order[:n] + 1].copy()
        reset = np.ones(n, dtype=bool)
        next_session = n
        empty = np.zeros(0, dtype=np.int64)
        while len(slots):
            negatives = self.sampler.draw(self.n_sample) if self.sampler is not None and self.n_sample else empty
            yield MiniBatch(items[pos], items[pos + 1], negatives, reset, slots)
            pos = pos + 1
            reset = np.zeros(len(slots), dtype=bool)
            done = np.flatnonzero(pos + 1 >= end)
            keep = np.ones(len(slots), dtype=bool)
            for k in done:
                if next_session < len(order):
                    s = order[next_session]
                    next_session += 1
                    pos[k] = offsets[s]
                    end[k] = offsets[s + 1]
                    reset[k] = True
                else:
                    keep[k] = False
            if not keep.all():
                slots, pos, end, reset = slots[keep], pos[keep], end[keep], reset[keep]


def next_batch(it: Iterator[MiniBatch]) -> MiniBatch | None:
    """Advance an iterator; ``None`` marks the end of the epoch."""
    return next(it, None)


class NegativeSampler:
    """Draws item indices with probability proportional to ``support ** alpha``.

    Draws come from a pre-sampled cache that is refilled when exhausted.
    """

    def __init__(self, supports: np.ndarray, alpha: float, rng: np.random.Generator, cache_size: int = SAMPLE_CACHE_SIZE):
        if alpha < 0:
            raise ValueError("sample_alpha must be non-negative")
        weights = np.asarray(supports, dtype=np.float64) ** alpha
        if np.any(weights <= 0):
            raise ValueError("every item needs positive support")
        self.alpha = alpha
        self.cumulative_weights = np.cumsum(weights)
        self.probabilities = weights / self.cumulative_weights[-1]
        self.rng = rng
        self.cache_size = max(1, int(cache_size))
        self.cache = np.zeros(0, dtype=np.int64)
        self.cursor = 0

    def _refill(self, at_least: int) -> None:
        size = max(self.cache_size, at_least)
        u = self.rng.random(size) * self.cumulative_weights[-1]
        self.cache = np.searchsorted(self.cumulative_weights, u, side="right").astype(np.int64)
        # guard against u landing exactly on the total after rounding
        np.minimum(self.cache, len(self.cumulative_weights) - 1, out=self.cache)
        self.cursor = 0

    def draw(self, n_sample: int) -> np.ndarray:
        if n_sample < 0:
            raise ValueError("n_sample must be non-negative")
        if n_sample == 0:
            return np.zeros(0, dtype=np.int64)
        if self.cursor + n_sample > len(self.cache):
            self._refill(n_sample)
        out = self.cache[self.cursor : self.cursor + n_sample]
        self.cursor += n_sample
        return out


def draw_negatives(state: NegativeSampler, n_sample: int) -> np.ndarray:
    return state.draw(n_sample)


def batch_candidate_set(batch: MiniBatch) -> np.ndarray:
    """Targets of the batch followed by the shared extra negatives, duplicates kept.

    Column ``k`` is the positive for example ``k``; every other column is a negative.
    """
    return np.concatenate([batch.targets, batch.extra_negatives]).astype(np.int64)


def pair_multiset(items: np.ndarray, offsets: np.ndarray) -> list[tuple[int, int]]:
    """All consecutive (input, target) pairs of every session, by direct extraction."""
    pairs = []
    for k in range(len(offsets) - 1):
        s = items[offsets[k] : offsets[k + 1]]
        pairs.extend(zip(s[:-1].tolist(), s[1:].tolist()))
    return sorted(pairs)


def read_corpus_tsv(path: Path | str) -> SessionCorpus:
    return build_corpus(EventLog.read_tsv(path))
