"""Raw clickstream ingestion and the train/test preprocessing pipeline.

Every stage works on an :class:`EventLog`, a thin wrapper around a pandas
frame with the canonical columns ``SessionId``, ``ItemId`` and ``Time``
(seconds since epoch, float). Stages never mutate their input.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

SESSION, ITEM, TIME = "SessionId", "ItemId", "Time"
COLUMNS = [SESSION, ITEM, TIME]
USER = "UserId"
DAY = 86400

ADAPTERS = ("yoochoose", "rees46", "coveo", "retailrocket", "diginetica", "generic-tsv")
# datasets whose raw export only has user histories
RESESSIONIZED = ("rees46", "retailrocket")
DEFAULT_TEST_DAYS = {
    "yoochoose": 1,
    "rees46": 1,
    "coveo": 1,
    "retailrocket": 7,
    "diginetica": 7,
}


class MalformedRowError(ValueError):
    """A raw input row could not be parsed."""

    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


@dataclass
class EventLog:
    frame: pd.DataFrame
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        missing = [c for c in COLUMNS if c not in self.frame.columns]
        if missing:
            raise ValueError(f"event log is missing columns {missing}")

    def derive(self, frame: pd.DataFrame, step: str) -> "EventLog":
        return EventLog(frame.reset_index(drop=True), self.provenance + (step,))

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def n_events(self) -> int:
        return len(self.frame)

    @property
    def n_sessions(self) -> int:
        return int(self.frame[SESSION].nunique())

    @property
    def n_items(self) -> int:
        return int(self.frame[ITEM].nunique())

    def session_lengths(self) -> pd.Series:
        return self.frame.groupby(SESSION, sort=False).size()

    def stats(self) -> dict:
        """Counts in the layout of the dataset statistics table."""
        if len(self.frame) == 0:
            return {"events": 0, "sessions": 0, "items": 0, "days": 0, "events_per_session": 0.0}
        t = self.frame[TIME]
        return {
            "events": self.n_events,
            "sessions": self.n_sessions,
            "items": self.n_items,
            "days": int(round((t.max() - t.min()) / DAY)),
            "events_per_session": round(self.n_events / self.n_sessions, 2),
        }

    def to_tsv(self, path) -> None:
        self.frame[COLUMNS].to_csv(path, sep="\t", index=False, lineterminator="\n")

    @classmethod
    def read_tsv(cls, path, strict: bool = True) -> "EventLog":
        return load_events(path, "generic-tsv", strict=strict)


@dataclass(frozen=True)
class SplitSpec:
    split_time: float
    test_window_days: int

    @classmethod
    def from_log(cls, log_: EventLog, test_window_days: int) -> "SplitSpec":
        last = float(log_.frame[TIME].max())
        return cls(last - test_window_days * DAY, test_window_days)


def canonical_sort(frame: pd.DataFrame, key: str = SESSION) -> pd.DataFrame:
    """Sort by (key, Time), ties kept in input order."""
    order = np.arange(len(frame))
    frame = frame.assign(_order=order)
    frame = frame.sort_values([key, TIME, "_order"], kind="stable")
    return frame.drop(columns="_order").reset_index(drop=True)


# ---------------------------------------------------------------------------
# raw adapters


def _paths(path) -> list[Path]:
    if isinstance(path, (str, Path)):
        return [Path(path)]
    return [Path(p) for p in path]


def _check_rows(frame: pd.DataFrame, required: Sequence[str], path, strict: bool, line_offset: int = 2):
    bad = frame[list(required)].isna().any(axis=1)
    if not bad.any():
        return frame
    first = int(np.flatnonzero(bad.to_numpy())[0])
    line = int(frame.index[first]) + line_offset
    if strict:
        raise MalformedRowError(path, line, f"unparseable value in columns {list(required)}")
    warnings.warn(f"{path}: skipping {int(bad.sum())} malformed rows (first at line {line})", stacklevel=3)
    return frame[~bad]


def _read_csv(path: Path, **kwargs) -> pd.DataFrame:
    if not path.is_file():
        raise FileNotFoundError(f"no such input file: {path}")
    return pd.read_csv(path, **kwargs)


def _load_yoochoose(paths, strict):
    frames = []
    for p in paths:
        df = _read_csv(p, header=None, usecols=[0, 1, 2], names=[SESSION, "ts", ITEM], dtype=str)
        df[SESSION] = pd.to_numeric(df[SESSION], errors="coerce")
        ts = pd.to_datetime(df["ts"], errors="coerce", utc=True, format="ISO8601")
        df[TIME] = _epoch_seconds(ts)
        df = _check_rows(df, [SESSION, ITEM, TIME], p, strict, line_offset=1)
        frames.append(df[COLUMNS])
    out = pd.concat(frames, ignore_index=True)
    out[SESSION] = out[SESSION].astype(np.int64)
    return out


def _load_rees46(paths, strict):
    frames = []
    for p in paths:
        df = _read_csv(p, usecols=["event_time", "event_type", "product_id", "user_id"], dtype=str)
        df = df[df["event_type"] == "view"]
        ts = pd.to_datetime(df["event_time"].str.replace(" UTC", "", regex=False), errors="coerce", utc=True)
        df = pd.DataFrame(
            {
                USER: pd.to_numeric(df["user_id"], errors="coerce"),
                ITEM: df["product_id"],
                TIME: _epoch_seconds(ts),
            },
            index=df.index,
        )
        frames.append(_check_rows(df, [USER, ITEM, TIME], p, strict))
    out = pd.concat(frames, ignore_index=True)
    out[USER] = out[USER].astype(np.int64)
    return out


def _load_coveo(paths, strict):
    frames = []
    for p in paths:
        df = _read_csv(
            p,
            usecols=["session_id_hash", "product_action", "product_sku_hash", "server_timestamp_epoch_ms"],
            dtype=str,
        )
        df = df[df["product_action"] == "detail"]
        df = pd.DataFrame(
            {
                SESSION: df["session_id_hash"],
                ITEM: df["product_sku_hash"],
                TIME: pd.to_numeric(df["server_timestamp_epoch_ms"], errors="coerce") / 1000.0,
            },
            index=df.index,
        )
        frames.append(_check_rows(df, COLUMNS, p, strict))
    return pd.concat(frames, ignore_index=True)


def _load_retailrocket(paths, strict):
    frames = []
    for p in paths:
        df = _read_csv(p, usecols=["timestamp", "visitorid", "event", "itemid"], dtype=str)
        df = df[df["event"] == "view"]
        df = pd.DataFrame(
            {
                USER: pd.to_numeric(df["visitorid"], errors="coerce"),
                ITEM: df["itemid"],
                TIME: pd.to_numeric(df["timestamp"], errors="coerce") / 1000.0,
            },
            index=df.index,
        )
        frames.append(_check_rows(df, [USER, ITEM, TIME], p, strict))
    out = pd.concat(frames, ignore_index=True)
    out[USER] = out[USER].astype(np.int64)
    return out


def _load_diginetica(paths, strict):
    frames = []
    for p in paths:
        df = _read_csv(p, sep=";", usecols=["sessionId", "itemId", "timeframe", "eventdate"], dtype=str)
        day = pd.to_datetime(df["eventdate"], errors="coerce", format="%Y-%m-%d", utc=True)
        offset = pd.to_numeric(df["timeframe"], errors="coerce") / 1000.0
        df = pd.DataFrame(
            {
                SESSION: pd.to_numeric(df["sessionId"], errors="coerce"),
                ITEM: df["itemId"],
                TIME: _epoch_seconds(day) + offset,
            },
            index=df.index,
        )
        df = _check_rows(df, COLUMNS, p, strict)
        frames.append(df)
    out = pd.concat(frames, ignore_index=True)
    out[SESSION] = out[SESSION].astype(np.int64)
    return out


def _load_generic(paths, strict):
    frames = []
    for p in paths:
        df = _read_csv(p, sep="\t", dtype=str, keep_default_na=False, na_values=[""])
        missing = [c for c in COLUMNS if c not in df.columns]
        if missing:
            raise MalformedRowError(p, 1, f"header lacks columns {missing}")
        df = df[COLUMNS].copy()
        df[TIME] = pd.to_numeric(df[TIME], errors="coerce")
        df.loc[~np.isfinite(df[TIME]) | (df[TIME] < 0), TIME] = np.nan
        frames.append(_check_rows(df, COLUMNS, p, strict))
    out = pd.concat(frames, ignore_index=True)
    numeric = pd.to_numeric(out[SESSION], errors="coerce")
    if len(out) and numeric.notna().all() and (numeric == numeric.round()).all():
        out[SESSION] = numeric.astype(np.int64)
    return out


def _epoch_seconds(ts: pd.Series) -> pd.Series:
    out = (ts - pd.Timestamp(0, tz="UTC")).dt.total_seconds()
    return out


_LOADERS = {
    "yoochoose": _load_yoochoose,
    "rees46": _load_rees46,
    "coveo": _load_coveo,
    "retailrocket": _load_retailrocket,
    "diginetica": _load_diginetica,
    "generic-tsv": _load_generic,
}


def load_events(path, adapter: str, strict: bool = True) -> EventLog:
    """Read one or more raw files with a dataset adapter.

    Only view/click/detail events are kept. Adapters whose raw data has no
    usable sessions (``rees46``, ``retailrocket``) return a frame keyed by
    ``UserId`` instead of ``SessionId``; pass it through :func:`sessionize`.
    """
    if adapter not in _LOADERS:
        raise ValueError(f"unknown adapter {adapter!r}; expected one of {ADAPTERS}")
    frame = _LOADERS[adapter](_paths(path), strict)
    key = USER if adapter in RESESSIONIZED else SESSION
    frame = canonical_sort(frame, key)
    if key == USER:
        # placeholder so the frame satisfies the EventLog contract
        frame[SESSION] = frame[USER]
        frame = frame[[USER] + COLUMNS]
    return EventLog(frame, (f"load:{adapter}",))


# ---------------------------------------------------------------------------
# pipeline stages


def sessionize(log_: EventLog, gap_seconds: float = 3600, key: str = USER) -> EventLog:
    """Split each user's history wherever the inactivity gap exceeds ``gap_seconds``.

    A gap of exactly ``gap_seconds`` does not start a new session. Session IDs
    are consecutive integers in (user, time) order.
    """
    if gap_seconds <= 0:
        raise ValueError("gap_seconds must be positive")
    frame = log_.frame
    if key not in frame.columns:
        key = SESSION
    if len(frame) == 0:
        return log_.derive(frame[COLUMNS].copy(), f"sessionize:{gap_seconds:g}")
    frame = canonical_sort(frame, key)
    user = frame[key].to_numpy()
    t = frame[TIME].to_numpy()
    new = np.ones(len(frame), dtype=bool)
    new[1:] = (user[1:] != user[:-1]) | (np.diff(t) > gap_seconds)
    out = pd.DataFrame({SESSION: np.cumsum(new) - 1, ITEM: frame[ITEM].to_numpy(), TIME: t})
    return log_.derive(out, f"sessionize:{gap_seconds:g}")


def dedup_consecutive(log_: EventLog) -> EventLog:
    """Keep only the first event of every run of the same item within a session."""
    frame = log_.frame
    s = frame[SESSION].to_numpy()
    i = frame[ITEM].to_numpy()
    keep = np.ones(len(frame), dtype=bool)
    keep[1:] = (s[1:] != s[:-1]) | (i[1:] != i[:-1])
    return log_.derive(frame.loc[keep, COLUMNS], "dedup_consecutive")


def iterative_support_filter(log_: EventLog, min_session_len: int = 2, min_item_support: int = 5) -> EventLog:
    """Drop rare items, then short sessions, until neither removes anything."""
    frame = log_.frame[COLUMNS]
    while True:
        n = len(frame)
        support = frame.groupby(ITEM, sort=False)[ITEM].transform("size")
        frame = frame[support.to_numpy() >= min_item_support]
        length = frame.groupby(SESSION, sort=False)[SESSION].transform("size")
        frame = frame[length.to_numpy() >= min_session_len]
        if len(frame) == n:
            break
    return log_.derive(frame, f"support_filter:{min_session_len},{min_item_support}")


def time_split(log_: EventLog, spec: SplitSpec) -> tuple[EventLog, EventLog]:
    """Time-based split.

    Test holds the complete sessions that start strictly after the split
    time. Train holds every event at or before it; sessions truncated to a
    single event are dropped.
    """
    frame = log_.frame[COLUMNS]
    start = frame.groupby(SESSION, sort=False)[TIME].transform("min").to_numpy()
    test = frame[start > spec.split_time]
    train = frame[frame[TIME].to_numpy() <= spec.split_time]
    length = train.groupby(SESSION, sort=False)[SESSION].transform("size")
    train = train[length.to_numpy() >= 2]
    if len(train) == 0 or len(test) == 0:
        warnings.warn(f"split time {spec.split_time} leaves one side of the split empty", stacklevel=2)
    tag = f"time_split:{spec.test_window_days}d"
    return log_.derive(train, tag + ":train"), log_.derive(test, tag + ":test")


@dataclass
class PipelineResult:
    train: EventLog
    test: EventLog
    split: SplitSpec
    stats: dict = field(default_factory=dict)


def preprocess(
    paths,
    dataset: str,
    test_days: int | None = None,
    gap_seconds: float = 3600,
    min_session_len: int = 2,
    min_item_support: int = 5,
    strict: bool = True,
) -> PipelineResult:
    """Run the full pipeline from raw files to a train/test pair."""
    if test_days is None:
        test_days = DEFAULT_TEST_DAYS.get(dataset, 1)
    raw = load_events(paths, dataset, strict=strict)
    log_ = sessionize(raw, gap_seconds) if dataset in RESESSIONIZED else raw
    log_ = log_.derive(log_.frame[COLUMNS], "project")
    log_ = dedup_consecutive(log_)
    log_ = iterative_support_filter(log_, min_session_len, min_item_support)
    if len(log_) == 0:
        raise ValueError(f"{dataset}: no events survive filtering")
    split = SplitSpec.from_log(log_, test_days)
    train, test = time_split(log_, split)
    stats = pipeline_stats(dataset, train, test, split)
    log.info("%s: %s", dataset, json.dumps(stats))
    return PipelineResult(train, test, split, stats)


def pipeline_stats(dataset: str, train: EventLog, test: EventLog, split: SplitSpec) -> dict:
    tr, te = train.stats(), test.stats()
    # test-window length is the configured window, not the observed span
    te["days"] = split.test_window_days
    return {
        "dataset": dataset,
        "split_time": split.split_time,
        "test_window_days": split.test_window_days,
        "train": tr,
        "test": te,
        "items": tr["items"],
        "test_items_unknown_to_train": int((~test.frame[ITEM].isin(train.frame[ITEM].unique())).sum()),
    }


def write_outputs(result: PipelineResult, output_dir, name: str) -> dict[str, Path]:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": output_dir / f"{name}_train.tsv",
        "test": output_dir / f"{name}_test.tsv",
        "stats": output_dir / f"{name}_stats.json",
    }
    result.train.to_tsv(paths["train"])
    result.test.to_tsv(paths["test"])
    paths["stats"].write_text(json.dumps(result.stats, indent=2, sort_keys=True) + "\n")
    return paths


def iter_sessions(log_: EventLog) -> Iterable[tuple[object, np.ndarray]]:
    frame = log_.frame
    for sid, grp in frame.groupby(SESSION, sort=False):
        yield sid, grp[ITEM].to_numpy()
