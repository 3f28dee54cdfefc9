"""Listening-log ingestion: parsing, sessionization, skip labeling, filtering,
vocabularies and next-positive targets.

Two input schemas are understood, both tab-separated UTF-8 with one event per
line:

* ``raw-log``:          user_key, timestamp (int seconds), track_key
* ``pre-sessionized``:  session_key, position (int), track_key, skip_flag (0/1)

Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np

PAD, MASK, END = 0, 1, 2
NUM_RESERVED = 3

SCHEMAS = ("raw-log", "pre-sessionized")

DATASET_MAGIC = "SKIPREC-DS/1"


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class IntegrityError(DataError):
    """Stored content does not match its recorded hash."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    """One log row.  For pre-sessionized input ``user_key`` holds the session
    key and ``timestamp`` the position within the session."""

    user_key: str
    timestamp: int
    track_key: str
    skip_annotation: bool | None = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")
        if not self.track_key:
            raise DataError("empty track_key")


@dataclass(frozen=True)
class Session:
    items: tuple[int, ...]
    skipped: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(int(i) for i in self.items))
        object.__setattr__(self, "skipped", tuple(bool(s) for s in self.skipped))
        if len(self.items) != len(self.skipped):
            raise DataError("items and skipped differ in length")
        if not self.items:
            raise DataError("empty session")

    def __len__(self):
        return len(self.items)

    @property
    def skip_count(self) -> int:
        return sum(self.skipped)


@dataclass(frozen=True)
class LabeledSession:
    """A session still keyed by track strings (before vocabulary mapping)."""

    tracks: tuple[str, ...]
    skipped: tuple[bool, ...]

    def __len__(self):
        return len(self.tracks)


@dataclass
class Vocabulary:
    reverse: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.forward = {k: i + NUM_RESERVED for i, k in enumerate(self.reverse)}
        if len(self.forward) != len(self.reverse):
            raise DataError("duplicate track keys in vocabulary")

    def __len__(self):
        """Total index space, reserved tokens included."""
        return len(self.reverse) + NUM_RESERVED

    @property
    def num_items(self) -> int:
        return len(self.reverse)

    def index(self, track_key: str) -> int:
        return self.forward[track_key]

    def key(self, index: int) -> str:
        if index < NUM_RESERVED:
            raise KeyError(f"index {index} is a reserved token")
        return self.reverse[index - NUM_RESERVED]

    def item_indices(self) -> np.ndarray:
        return np.arange(NUM_RESERVED, len(self), dtype=np.int64)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in self.reverse:
            h.update(k.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


@dataclass(frozen=True)
class TargetMap:
    next_positive: tuple[int | None, ...]
    negatives_between: tuple[tuple[int, ...], ...]
    negatives_all: tuple[int, ...]


@dataclass(frozen=True)
class HoldoutSplit:
    train_prefix: Session
    validation_target: tuple[int, bool]
    test_target: tuple[int, bool]

    def reassemble(self) -> Session:
        items = self.train_prefix.items + (self.validation_target[0], self.test_target[0])
        skipped = self.train_prefix.skipped + (self.validation_target[1], self.test_target[1])
        return Session(items, skipped)


# ---------------------------------------------------------------------------
# parsing


def parse_events(stream: BinaryIO | bytes | str, schema: str) -> list[Event]:
    if schema not in SCHEMAS:
        raise ConfigError(f"unknown schema {schema!r}; expected one of {SCHEMAS}")
    if isinstance(stream, str):
        stream = stream.encode("utf-8")
    if isinstance(stream, bytes):
        stream = io.BytesIO(stream)

    n_fields = 3 if schema == "raw-log" else 4
    events = []
    for line_no, raw in enumerate(stream, start=1):
        try:
            line = raw.decode("utf-8").rstrip("\r\n")
        except UnicodeDecodeError as exc:
            raise ParseError(line_no, f"invalid UTF-8 ({exc.reason})") from None
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split(",")
        if len(parts) != n_fields:
            raise ParseError(line_no, f"expected {n_fields} fields, got {len(parts)}")
        key, ts, track = parts[0], parts[1], parts[2]
        try:
            ts_val = int(ts)
        except ValueError:
            raise ParseError(line_no, f"non-integer timestamp/position {ts!r}") from None
        if ts_val < 0:
            raise ParseError(line_no, f"negative timestamp/position {ts_val}")
        if not track:
            raise ParseError(line_no, "empty track key")
        skip = None
        if schema == "pre-sessionized":
            if parts[3] not in ("0", "1"):
                raise ParseError(line_no, f"skip flag must be 0 or 1, got {parts[3]!r}")
            skip = parts[3] == "1"
        events.append(Event(key, ts_val, track, skip))
    return events


# ---------------------------------------------------------------------------
# sessionization and labeling


def sessionize(events: Iterable[Event], gap_seconds: int = 1200) -> list[list[Event]]:
    """Split each user's chronological stream wherever the gap exceeds
    ``gap_seconds``.  Output is ordered by (user_key, start time)."""
    by_user: dict[str, list[Event]] = defaultdict(list)
    for ev in events:
        by_user[ev.user_key].append(ev)

    sessions = []
    for user in sorted(by_user):
        stream = sorted(by_user[user], key=lambda e: e.timestamp)  # stable
        current = [stream[0]]
        for prev, ev in zip(stream, stream[1:]):
            if ev.timestamp - prev.timestamp > gap_seconds:
                sessions.append(current)
                current = []
            current.append(ev)
        sessions.append(current)
    return sessions


def group_presessionized(events: Iterable[Event]) -> list[list[Event]]:
    """Group pre-sessionized rows by session key, ordered by position."""
    by_key: dict[str, list[Event]] = defaultdict(list)
    for ev in events:
        by_key[ev.user_key].append(ev)
    return [sorted(by_key[k], key=lambda e: e.timestamp) for k in sorted(by_key)]


def label_skips(session: Sequence[Event], threshold_seconds: int = 30,
                mode: str = "raw-log") -> LabeledSession:
    """Raw-log mode: a track is skipped iff the next event starts less than
    ``threshold_seconds`` later; the final track is labeled positive.
    Pre-sessionized mode copies the provided annotation."""
    tracks = tuple(e.track_key for e in session)
    if mode == "pre-sessionized":
        if any(e.skip_annotation is None for e in session):
            raise DataError("pre-sessionized event without skip annotation")
        return LabeledSession(tracks, tuple(e.skip_annotation for e in session))
    if mode != "raw-log":
        raise ConfigError(f"unknown schema {mode!r}")
    if any(e.timestamp is None for e in session):
        raise DataError("raw-log event without timestamp")
    skipped = [
        session[t + 1].timestamp - session[t].timestamp < threshold_seconds
        for t in range(len(session) - 1)
    ]
    skipped.append(False)
    return LabeledSession(tracks, tuple(skipped))


def filter_and_split(sessions: Iterable, min_events: int = 5, max_len: int = 20) -> list:
    """Chunk sessions into consecutive pieces of at most ``max_len`` and drop
    every piece shorter than ``min_events``.  Works on any sliceable session
    type exposing parallel sequences (``LabeledSession`` or ``Session``)."""
    out = []
    for s in sessions:
        first = s.tracks if isinstance(s, LabeledSession) else s.items
        for start in range(0, len(first), max_len):
            stop = start + max_len
            if len(first[start:stop]) < min_events:
                continue
            out.append(type(s)(first[start:stop], s.skipped[start:stop]))
    return out


# ---------------------------------------------------------------------------
# vocabulary and targets


def build_vocabulary(sessions: Iterable[LabeledSession]) -> Vocabulary:
    seen: dict[str, None] = {}
    for s in sessions:
        for k in s.tracks:
            seen.setdefault(k, None)
    return Vocabulary(list(seen))


def encode_sessions(sessions: Iterable[LabeledSession], vocab: Vocabulary) -> list[Session]:
    return [Session([vocab.index(k) for k in s.tracks], s.skipped) for s in sessions]


def build_targets(session: Session) -> TargetMap:
    skipped = session.skipped
    n = len(skipped)
    next_pos: list[int | None] = [None] * n
    upcoming = None
    for t in range(n - 1, -1, -1):
        next_pos[t] = upcoming
        if not skipped[t]:
            upcoming = t
    between = tuple(
        tuple(range(t + 1, m)) if m is not None else ()
        for t, m in enumerate(next_pos)
    )
    return TargetMap(
        next_positive=tuple(next_pos),
        negatives_between=between,
        negatives_all=tuple(t for t in range(n) if skipped[t]),
    )


def holdout_split(session: Session) -> HoldoutSplit:
    if len(session) < 3:
        raise SplitError(f"holdout needs at least 3 events, session has {len(session)}")
    return HoldoutSplit(
        train_prefix=Session(session.items[:-2], session.skipped[:-2]),
        validation_target=(session.items[-2], session.skipped[-2]),
        test_target=(session.items[-1], session.skipped[-1]),
    )


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    sessions: list[Session]
    vocab: Vocabulary
    settings: dict = field(default_factory=dict)

    @property
    def skip_rate(self) -> float:
        total = sum(len(s) for s in self.sessions)
        return sum(s.skip_count for s in self.sessions) / total if total else 0.0

    def splits(self) -> list[HoldoutSplit]:
        return [holdout_split(s) for s in self.sessions]

    def sessions_bytes(self) -> bytes:
        lines = [DATASET_MAGIC]
        for s in self.sessions:
            items = ",".join(str(i) for i in s.items)
            flags = "".join("1" if f else "0" for f in s.skipped)
            lines.append(f"{items}\t{flags}")
        return ("\n".join(lines) + "\n").encode("utf-8")

    def vocab_bytes(self) -> bytes:
        return "".join(k + "\n" for k in self.vocab.reverse).encode("utf-8")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.sessions_bytes())
        h.update(self.vocab_bytes())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "format": DATASET_MAGIC,
            "vocab_size": self.vocab.num_items,
            "session_count": len(self.sessions),
            "event_count": sum(len(s) for s in self.sessions),
            "skip_rate": self.skip_rate,
            "dataset_hash": self.digest(),
            "vocab_hash": self.vocab.digest(),
            "settings": self.settings,
        }

    def save(self, directory: str | os.PathLike) -> None:
        """Write ``sessions.txt``, ``vocab.txt`` and ``manifest.json``."""
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "sessions.txt"), "wb") as f:
            f.write(self.sessions_bytes())
        with open(os.path.join(directory, "vocab.txt"), "wb") as f:
            f.write(self.vocab_bytes())
        with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as f:
            json.dump(self.manifest(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "Dataset":
        with open(os.path.join(directory, "vocab.txt"), encoding="utf-8") as f:
            vocab = Vocabulary([line.rstrip("\n") for line in f if line.rstrip("\n")])
        with open(os.path.join(directory, "sessions.txt"), encoding="utf-8") as f:
            header = f.readline().rstrip("\n")
            if header != DATASET_MAGIC:
                raise DataError(f"bad dataset header {header!r}, expected {DATASET_MAGIC!r}")
            sessions = []
            for line_no, line in enumerate(f, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    items_s, flags_s = line.split("\t")
                    items = [int(x) for x in items_s.split(",")]
                except ValueError:
                    raise ParseError(line_no, "malformed session record") from None
                if len(flags_s) != len(items) or set(flags_s) - {"0", "1"}:
                    raise ParseError(line_no, "flag string does not match items")
                if min(items) < NUM_RESERVED or max(items) >= len(vocab):
                    raise ParseError(line_no, "item index outside vocabulary")
                sessions.append(Session(items, [c == "1" for c in flags_s]))
        settings, recorded = {}, None
        manifest_path = os.path.join(directory, "manifest.json")
        if os.path.exists(manifest_path):
            with open(manifest_path, encoding="utf-8") as f:
                manifest = json.load(f)
            settings = manifest.get("settings", {})
            recorded = manifest.get("dataset_hash")
        dataset = cls(sessions, vocab, settings)
        if recorded is not None and recorded != dataset.digest():
            raise IntegrityError(f"dataset in {directory} does not match its manifest hash")
        return dataset


def sample_skip_sessions(sessions: list, fraction: float, seed: int) -> list:
    """Subsample so that roughly ``fraction`` of the kept sessions contain a
    skip.  All sessions of the scarcer kind are kept; the other kind is
    thinned at random (order preserved)."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("skip-session fraction must lie in (0, 1)")
    with_skip = [i for i, s in enumerate(sessions) if any(s.skipped)]
    without = [i for i, s in enumerate(sessions) if not any(s.skipped)]
    rng = np.random.Generator(np.random.PCG64(seed))
    n_with, n_without = len(with_skip), len(without)
    want_without = int(round(n_with * (1 - fraction) / fraction))
    if want_without <= n_without:
        keep_without = rng.choice(without, size=want_without, replace=False) if want_without else []
        keep = set(with_skip) | set(int(i) for i in keep_without)
    else:
        want_with = int(round(n_without * fraction / (1 - fraction)))
        keep_with = rng.choice(with_skip, size=min(want_with, n_with), replace=False)
        keep = set(without) | set(int(i) for i in keep_with)
    return [s for i, s in enumerate(sessions) if i in keep]


def ingest(stream, schema: str = "raw-log", gap_seconds: int = 1200, skip_seconds: int = 30,
           min_events: int = 5, max_len: int = 20, skip_session_fraction: float | None = None,
           seed: int = 0) -> Dataset:
    """Full pipeline from raw bytes to an encoded ``Dataset``."""
    events = parse_events(stream, schema)
    if schema == "raw-log":
        raw = sessionize(events, gap_seconds)
    else:
        raw = group_presessionized(events)
    labeled = [label_skips(s, skip_seconds, mode=schema) for s in raw]
    labeled = filter_and_split(labeled, min_events, max_len)
    if skip_session_fraction is not None:
        labeled = sample_skip_sessions(labeled, skip_session_fraction, seed)
    vocab = build_vocabulary(labeled)
    settings = {
        "schema": schema,
        "gap_seconds": gap_seconds,
        "skip_seconds": skip_seconds,
        "min_events": min_events,
        "max_len": max_len,
        "skip_session_fraction": skip_session_fraction,
        "seed": seed,
    }
    return Dataset(encode_sessions(labeled, vocab), vocab, settings)
