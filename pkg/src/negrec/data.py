"""Feedback events, user sequences, ingestion and the train/validation/test split."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import coerce, read_kv

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86_400
MALFORMED_TOLERANCE = 0.01
NULL_STATION = 0


class IngestError(ValueError):
    pass


class SplitError(ValueError):
    pass


class FeedbackType(IntEnum):
    UP = 0
    DOWN = 1
    SKIP = 2
    PLAY = 3
    # cloze slot only; never stored
    MASK = 4

    @classmethod
    def parse(cls, label: str, plays_as_positive: bool = False) -> "FeedbackType":
        key = label.strip().lower()
        aliases = {
            "up": cls.UP, "+": cls.UP, "thumbs_up": cls.UP, "like": cls.UP,
            "down": cls.DOWN, "-": cls.DOWN, "thumbs_down": cls.DOWN, "dislike": cls.DOWN,
            "skip": cls.SKIP, "/": cls.SKIP,
            "play": cls.PLAY,
        }
        if key not in aliases:
            raise ValueError(f"unknown feedback label {label!r}")
        kind = aliases[key]
        if kind is cls.PLAY and plays_as_positive:
            return cls.UP
        return kind

    @property
    def label(self) -> str:
        return self.name.lower()


NEGATIVE_TYPES = (FeedbackType.DOWN, FeedbackType.SKIP)


@dataclass(frozen=True, slots=True)
class FeedbackEvent:
    user_id: str
    song_id: int
    station_id: int
    feedback: FeedbackType
    timestamp: int
    session_id: str | None = None

    @property
    def day(self) -> int:
        """UTC calendar day index."""
        return self.timestamp // SECONDS_PER_DAY


@dataclass
class Catalog:
    """Interned string ids. Station index 0 is the null station."""

    songs: list[str] = field(default_factory=list)
    stations: list[str] = field(default_factory=lambda: [""])

    def __post_init__(self) -> None:
        if not self.stations or self.stations[0] != "":
            self.stations.insert(0, "")
        self._song_index = {s: i for i, s in enumerate(self.songs)}
        self._station_index = {s: i for i, s in enumerate(self.stations)}

    @property
    def n_songs(self) -> int:
        return len(self.songs)

    @property
    def n_stations(self) -> int:
        """Number of real stations (the null station is not counted)."""
        return len(self.stations) - 1

    def song(self, name: str) -> int:
        idx = self._song_index.get(name)
        if idx is None:
            idx = self._song_index[name] = len(self.songs)
            self.songs.append(name)
        return idx

    def station(self, name: str | None) -> int:
        if not name:
            return NULL_STATION
        idx = self._station_index.get(name)
        if idx is None:
            idx = self._station_index[name] = len(self.stations)
            self.stations.append(name)
        return idx

    def song_index(self, name: str) -> int:
        return self._song_index[name]


@dataclass(frozen=True)
class DatasetDescriptor:
    columns: tuple[str, ...] = ("user", "song", "station", "feedback", "timestamp")
    delimiter: str = ","
    header: bool = False
    granularity: str = "user"
    plays_as_positive: bool = False
    max_len: int = 400

    def __post_init__(self) -> None:
        required = {"user", "song", "feedback", "timestamp"}
        missing = required - set(self.columns)
        if missing:
            raise ValueError(f"descriptor lacks columns: {sorted(missing)}")
        if self.granularity not in ("user", "session"):
            raise ValueError(f"granularity must be 'user' or 'session', got {self.granularity!r}")
        if self.granularity == "session" and "session" not in self.columns:
            raise ValueError("session granularity requires a 'session' column")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetDescriptor":
        raw = read_kv(path)
        default = cls()
        kwargs: dict = {}
        for key, value in raw.items():
            if key == "columns":
                kwargs[key] = tuple(c.strip() for c in value.split(","))
            elif key == "delimiter":
                kwargs[key] = "\t" if value in ("\\t", "tab") else value
            elif hasattr(default, key):
                kwargs[key] = coerce(value, getattr(default, key))
        return cls(**kwargs)

    def save(self, path: str | Path) -> None:
        delim = "tab" if self.delimiter == "\t" else self.delimiter
        Path(path).write_text(
            f"columns = {','.join(self.columns)}\n"
            f"delimiter = {delim}\n"
            f"header = {str(self.header).lower()}\n"
            f"granularity = {self.granularity}\n"
            f"plays_as_positive = {str(self.plays_as_positive).lower()}\n"
            f"max_len = {self.max_len}\n",
            encoding="utf-8",
        )


@dataclass
class IngestResult:
    events: list[FeedbackEvent]
    catalog: Catalog
    malformed: int = 0
    samples: list[str] = field(default_factory=list)


def ingest(
    path: str | Path,
    schema: DatasetDescriptor | None = None,
    catalog: Catalog | None = None,
) -> IngestResult:
    """Read a delimited event file into validated events.

    Unknown song and station names are interned into ``catalog`` in order of
    first appearance. Up to 1% malformed rows are skipped with a warning; more
    than that raises :class:`IngestError` carrying a few offending rows.
    """
    schema = schema or DatasetDescriptor()
    catalog = catalog if catalog is not None else Catalog()
    col = {name: i for i, name in enumerate(schema.columns)}
    events: list[FeedbackEvent] = []
    bad: list[str] = []
    total = 0
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        for lineno, row in enumerate(reader):
            if lineno == 0 and schema.header:
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            total += 1
            try:
                events.append(_parse_row(row, col, schema, catalog))
            except (ValueError, IndexError) as exc:
                bad.append(f"line {lineno + 1}: {schema.delimiter.join(row)!r} ({exc})")
    if total and len(bad) / total > MALFORMED_TOLERANCE:
        raise IngestError(
            f"{len(bad)}/{total} malformed rows in {path}; first: " + "; ".join(bad[:5])
        )
    if bad:
        logger.warning("skipped %d malformed rows in %s", len(bad), path)
    return IngestResult(events, catalog, len(bad), bad[:5])


def _parse_row(row: list[str], col: dict[str, int], schema: DatasetDescriptor, catalog: Catalog) -> FeedbackEvent:
    if len(row) != len(schema.columns):
        raise ValueError(f"expected {len(schema.columns)} fields, got {len(row)}")
    user = row[col["user"]].strip()
    song = row[col["song"]].strip()
    if not user or not song:
        raise ValueError("empty user or song")
    feedback = FeedbackType.parse(row[col["feedback"]], schema.plays_as_positive)
    timestamp = int(float(row[col["timestamp"]]))
    if timestamp < 0:
        raise ValueError("negative timestamp")
    station = row[col["station"]].strip() if "station" in col else ""
    session = row[col["session"]].strip() if "session" in col else None
    return FeedbackEvent(user, catalog.song(song), catalog.station(station), feedback, timestamp, session or None)


def write_events(
    path: str | Path,
    events: Iterable[FeedbackEvent],
    catalog: Catalog,
    schema: DatasetDescriptor | None = None,
) -> None:
    """Serialize events in the ingestion format (inverse of :func:`ingest`)."""
    schema = schema or DatasetDescriptor()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=schema.delimiter, lineterminator="\n")
        if schema.header:
            writer.writerow(schema.columns)
        for ev in events:
            values = {
                "user": ev.user_id,
                "song": catalog.songs[ev.song_id],
                "station": catalog.stations[ev.station_id],
                "feedback": ev.feedback.label,
                "timestamp": str(ev.timestamp),
                "session": ev.session_id or "",
            }
            writer.writerow([values[c] for c in schema.columns])


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    events: tuple[FeedbackEvent, ...]
    max_len: int = 400

    def __len__(self) -> int:
        return len(self.events)

    @cached_property
    def songs(self) -> np.ndarray:
        return np.fromiter((e.song_id for e in self.events), dtype=np.int64, count=len(self.events))

    @cached_property
    def stations(self) -> np.ndarray:
        return np.fromiter((e.station_id for e in self.events), dtype=np.int64, count=len(self.events))

    @cached_property
    def feedback(self) -> np.ndarray:
        return np.fromiter((int(e.feedback) for e in self.events), dtype=np.int64, count=len(self.events))

    @cached_property
    def timestamps(self) -> np.ndarray:
        return np.fromiter((e.timestamp for e in self.events), dtype=np.int64, count=len(self.events))

    @property
    def days(self) -> np.ndarray:
        return self.timestamps // SECONDS_PER_DAY

    def has_up(self) -> bool:
        return any(e.feedback is FeedbackType.UP for e in self.events)

    def ends_with_up(self) -> bool:
        return bool(self.events) and self.events[-1].feedback is FeedbackType.UP

    def tail(self, n: int) -> "UserSequence":
        """Keep the most recent ``n`` events."""
        if len(self.events) <= n:
            return self if self.max_len == n else UserSequence(self.user_id, self.events, n)
        return UserSequence(self.user_id, self.events[-n:], n)

    def before(self, timestamp: int) -> "UserSequence":
        return UserSequence(self.user_id, tuple(e for e in self.events if e.timestamp <= timestamp), self.max_len)

    def trimmed_to_up(self) -> "UserSequence":
        """Drop trailing non-Up events so the sequence ends with an Up target."""
        events = self.events
        end = len(events)
        while end and events[end - 1].feedback is not FeedbackType.UP:
            end -= 1
        return UserSequence(self.user_id, events[:end], self.max_len)


def build_sequences(events: Sequence[FeedbackEvent], max_len: int = 400) -> list[UserSequence]:
    """Group events per user (or per session when events carry a session id).

    Each sequence is stably sorted by timestamp and truncated to its most
    recent ``max_len`` events. Output order follows first appearance.
    """
    grouped: dict[str, list[FeedbackEvent]] = defaultdict(list)
    for ev in events:
        grouped[ev.session_id if ev.session_id is not None else ev.user_id].append(ev)
    out = []
    for key, evs in grouped.items():
        evs.sort(key=lambda e: e.timestamp)
        out.append(UserSequence(key, tuple(evs[-max_len:]), max_len))
    return out


@dataclass(frozen=True)
class PairedTestCase:
    user_id: str
    context: UserSequence
    positive: FeedbackEvent
    negative: FeedbackEvent

    @property
    def station_id(self) -> int:
        return self.positive.station_id


@dataclass(frozen=True)
class HoldoutUser:
    """A user's history before a cutoff plus the events inside the held-out window."""

    user_id: str
    context: UserSequence
    window: tuple[FeedbackEvent, ...]


@dataclass(frozen=True)
class DatasetSplit:
    train: list[UserSequence]
    validation: list[UserSequence]
    test: list[HoldoutUser]
    inference_only: list[UserSequence]
    validation_holdout: list[HoldoutUser]
    cutoff: int
    validation_cutoff: int

    def all_users(self) -> list[str]:
        seen: dict[str, None] = {}
        for group in (self.train, self.validation, self.inference_only):
            for seq in group:
                seen.setdefault(seq.user_id)
        for h in self.test:
            seen.setdefault(h.user_id)
        return list(seen)


def split(
    sequences: Sequence[UserSequence],
    test_window: int,
    val_frac: float = 0.1,
    seed: int = 0,
) -> DatasetSplit:
    """Time-separate the final ``test_window`` seconds and split the rest by user.

    Users without any Up before the cutoff but with some Down/Skip go to
    ``inference_only``. The remaining users are shuffled with ``seed`` and the
    first ``floor(val_frac * n)`` become validation users. Validation pairs are
    drawn from the ``test_window`` immediately preceding the test cutoff.
    """
    if not sequences:
        raise SplitError("no sequences to split")
    t_min = min(int(s.timestamps.min()) for s in sequences if len(s))
    t_max = max(int(s.timestamps.max()) for s in sequences if len(s))
    if t_max - t_min <= test_window:
        raise SplitError(f"data spans {t_max - t_min}s, not more than test window {test_window}s")
    cutoff = t_max - test_window
    val_cutoff = cutoff - test_window

    eligible: list[UserSequence] = []
    inference_only: list[UserSequence] = []
    test: list[HoldoutUser] = []
    for seq in sequences:
        pre = tuple(e for e in seq.events if e.timestamp <= cutoff)
        post = tuple(e for e in seq.events if e.timestamp > cutoff)
        history = UserSequence(seq.user_id, pre, seq.max_len)
        if post:
            test.append(HoldoutUser(seq.user_id, history, post))
        if not pre:
            continue
        if history.has_up():
            eligible.append(history)
        elif any(e.feedback in NEGATIVE_TYPES for e in pre):
            inference_only.append(history)

    eligible.sort(key=lambda s: s.user_id)
    order = np.random.default_rng(seed).permutation(len(eligible))
    n_val = int(np.floor(val_frac * len(eligible)))
    val_idx = set(order[:n_val].tolist())
    train, validation, val_holdout = [], [], []
    for i, seq in enumerate(eligible):
        trimmed = seq.trimmed_to_up()
        if i in val_idx:
            validation.append(trimmed)
            ctx = UserSequence(seq.user_id, tuple(e for e in seq.events if e.timestamp <= val_cutoff), seq.max_len)
            window = tuple(e for e in seq.events if e.timestamp > val_cutoff)
            if window:
                val_holdout.append(HoldoutUser(seq.user_id, ctx, window))
        else:
            train.append(trimmed)
    if not train:
        raise SplitError("empty train partition")
    if not test:
        raise SplitError("empty test partition")
    return DatasetSplit(train, validation, test, inference_only, val_holdout, cutoff, val_cutoff)


@dataclass
class PairingStats:
    users: int = 0
    pairs: int = 0
    skipped_users: int = 0


def make_paired_tests(
    holdout: Sequence[HoldoutUser],
    *,
    one_per_user: bool = False,
    stats: PairingStats | None = None,
) -> list[PairedTestCase]:
    """Pair every held-out Up with a same-station negative from the window.

    Downs are preferred: a station's Skips are only used when the user gave no
    Down on that station in the window. Datasets without stations use the
    null station everywhere, so the station constraint is vacuous there.
    """
    stats = stats if stats is not None else PairingStats()
    cases: list[PairedTestCase] = []
    for h in holdout:
        ups_by_station: dict[int, list[FeedbackEvent]] = defaultdict(list)
        downs: dict[int, list[FeedbackEvent]] = defaultdict(list)
        skips: dict[int, list[FeedbackEvent]] = defaultdict(list)
        for ev in h.window:
            if ev.feedback is FeedbackType.UP:
                ups_by_station[ev.station_id].append(ev)
            elif ev.feedback is FeedbackType.DOWN:
                downs[ev.station_id].append(ev)
            elif ev.feedback is FeedbackType.SKIP:
                skips[ev.station_id].append(ev)
        user_cases = []
        for station, ups in ups_by_station.items():
            negatives = downs.get(station) or skips.get(station) or []
            for up in ups:
                for neg in negatives:
                    user_cases.append(PairedTestCase(h.user_id, h.context, up, neg))
        if not user_cases:
            stats.skipped_users += 1
            continue
        if one_per_user:
            user_cases = user_cases[:1]
        stats.users += 1
        stats.pairs += len(user_cases)
        cases.extend(user_cases)
    return cases
