"""Log parsing, deduplication, sessionization, vocabularies and dataset splits."""

from __future__ import annotations

import json
import math
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

SESSION_GAP = 300
DEDUP_WINDOW = 60
EVENT_KINDS = ("launch", "interact", "close", "install", "uninstall")

QUERY_COLUMNS = ("user_id", "timestamp", "query", "target_app")
USAGE_COLUMNS = ("user_id", "timestamp", "app_id", "kind")
STATS_COLUMNS = ("user_id", "snapshot_timestamp", "app_id", "seconds_in_past_24h")


class SchemaError(ValueError):
    """A log file whose header does not match the expected columns."""


@dataclass(frozen=True)
class QueryRecord:
    user_id: str
    timestamp: int
    query: str
    target_app: str

    def __post_init__(self):
        if not self.query.strip():
            raise ValueError("empty query")
        if self.timestamp <= 0:
            raise ValueError(f"timestamp must be positive, got {self.timestamp}")
        if not self.target_app:
            raise ValueError("empty target_app")


@dataclass(frozen=True)
class UsageEvent:
    user_id: str
    timestamp: int
    app_id: str
    kind: str = "launch"

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.timestamp <= 0:
            raise ValueError(f"timestamp must be positive, got {self.timestamp}")
        if not self.app_id:
            raise ValueError("empty app_id")


@dataclass(frozen=True)
class StatsRecord:
    """Foreground seconds per app over the 24 h before a snapshot."""
    user_id: str
    snapshot_timestamp: int
    app_id: str
    seconds: float

    def __post_init__(self):
        if self.snapshot_timestamp <= 0:
            raise ValueError("snapshot timestamp must be positive")
        if not self.app_id:
            raise ValueError("empty app_id")


@dataclass
class Session:
    session_id: int
    user_id: str
    items: list
    start: int
    end: int

    def __len__(self):
        return len(self.items)


@dataclass
class LineError:
    line: int
    message: str
    text: str

    def to_dict(self):
        return {"line": self.line, "message": self.message, "text": self.text}


# ---------------------------------------------------------------------------
# parsing


def _read_tsv(path, columns: Sequence[str], build: Callable[[list[str]], object]):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    records, errors = [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
        if tuple(h.strip() for h in header) != tuple(columns):
            raise SchemaError(f"{path}: expected header {list(columns)}, got {header}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != len(columns):
                errors.append(LineError(lineno, f"expected {len(columns)} fields, got {len(fields)}", line))
                continue
            try:
                records.append(build(fields))
            except ValueError as exc:
                errors.append(LineError(lineno, str(exc), line))
    return records, errors


def _int(value: str, name: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"{name} is not an integer: {value!r}") from None


def parse_query_log(path):
    """Read ``queries.tsv``. Returns ``(records, errors)``; bad lines go to ``errors``."""
    return _read_tsv(path, QUERY_COLUMNS, lambda f: QueryRecord(
        f[0], _int(f[1], "timestamp"), f[2].strip(), f[3].strip()))


def parse_usage_log(path):
    """Read ``usage.tsv``. Returns ``(events, errors)``."""
    return _read_tsv(path, USAGE_COLUMNS, lambda f: UsageEvent(
        f[0], _int(f[1], "timestamp"), f[2].strip(), f[3].strip().lower()))


def parse_stats_log(path):
    def build(f):
        try:
            seconds = float(f[3])
        except ValueError:
            raise ValueError(f"seconds is not a number: {f[3]!r}") from None
        if not np.isfinite(seconds):
            raise ValueError("seconds must be finite")
        return StatsRecord(f[0], _int(f[1], "snapshot_timestamp"), f[2].strip(), seconds)
    return _read_tsv(path, STATS_COLUMNS, build)


def parse_category_map(path) -> dict[str, str]:
    records, _ = _read_tsv(path, ("app_id", "category"), lambda f: (f[0].strip(), f[1].strip()))
    return dict(records)


def _write_tsv(path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")


def write_query_log(path, records: Iterable[QueryRecord]):
    _write_tsv(path, QUERY_COLUMNS, ((r.user_id, r.timestamp, r.query, r.target_app) for r in records))


def write_usage_log(path, events: Iterable[UsageEvent]):
    _write_tsv(path, USAGE_COLUMNS, ((e.user_id, e.timestamp, e.app_id, e.kind) for e in events))


def write_stats_log(path, stats: Iterable[StatsRecord]):
    _write_tsv(path, STATS_COLUMNS, ((s.user_id, s.snapshot_timestamp, s.app_id, _fmt(s.seconds)) for s in stats))


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


# ---------------------------------------------------------------------------
# cleaning and sessions


def group_by_user(items: Iterable) -> dict[str, list]:
    groups: dict[str, list] = defaultdict(list)
    for item in items:
        groups[item.user_id].append(item)
    return dict(groups)


def _check_sorted(items: Sequence, what: str):
    for prev, cur in zip(items, items[1:]):
        if prev.user_id == cur.user_id and cur.timestamp < prev.timestamp:
            raise ValueError(f"{what}: input not sorted by timestamp for user {cur.user_id!r}")


def dedup_usage(events: Sequence[UsageEvent], window: int = DEDUP_WINDOW) -> list[UsageEvent]:
    """Merge runs of the same app whose consecutive gaps are below ``window`` seconds.

    Input must be sorted by ``(user, timestamp)``; each run keeps its earliest event.
    """
    seen_users: set[str] = set()
    out: list[UsageEvent] = []
    prev = None
    for ev in events:
        if prev is not None and ev.user_id != prev.user_id:
            if ev.user_id in seen_users or ev.user_id < prev.user_id:
                raise ValueError("dedup_usage: events not sorted by (user, timestamp)")
        elif prev is not None and ev.timestamp < prev.timestamp:
            raise ValueError("dedup_usage: events not sorted by (user, timestamp)")
        if prev is None or ev.user_id != prev.user_id:
            seen_users.add(ev.user_id)
            out.append(ev)
        elif ev.app_id == prev.app_id and ev.timestamp - prev.timestamp < window:
            pass
        else:
            out.append(ev)
        prev = ev
    return out


def sort_events(items: Iterable) -> list:
    return sorted(items, key=lambda e: (e.user_id, e.timestamp))


def segment_sessions(items: Sequence, gap: int = SESSION_GAP, first_id: int = 0) -> list[Session]:
    """Split each user's time-ordered items wherever the inactivity gap exceeds ``gap``.

    Items need ``user_id`` and ``timestamp``. Users are processed in order of first
    appearance and session ids are assigned consecutively.
    """
    sessions: list[Session] = []
    sid = first_id
    for user, user_items in group_by_user(items).items():
        _check_sorted(user_items, "segment_sessions")
        current: list = []
        for item in user_items:
            if current and item.timestamp - current[-1].timestamp > gap:
                sessions.append(Session(sid, user, current, current[0].timestamp, current[-1].timestamp))
                sid += 1
                current = []
            current.append(item)
        if current:
            sessions.append(Session(sid, user, current, current[0].timestamp, current[-1].timestamp))
            sid += 1
    return sessions


def top_apps(events: Iterable[UsageEvent], n: int) -> list[str]:
    counts = Counter(e.app_id for e in events)
    return [a for a, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]]


def filter_top_apps(events: Sequence[UsageEvent], n: int | None) -> list[UsageEvent]:
    """Keep only events of the ``n`` most frequent apps (all events when ``n`` is None)."""
    if n is None:
        return list(events)
    keep = set(top_apps(events, n))
    return [e for e in events if e.app_id in keep]


def launches(events: Iterable[UsageEvent]) -> list[UsageEvent]:
    return [e for e in events if e.kind == "launch"]


# ---------------------------------------------------------------------------
# tokens and vocabularies


def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith("P"):
        end -= 1
    return token[start:end]


def tokenize(query: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    tokens = (_strip_punct(t) for t in query.lower().split())
    return [t for t in tokens if t]


@dataclass
class Vocabulary:
    """Dense token ids. Reserved tokens come first; ``unk`` (if set) absorbs misses."""
    tokens: list[str]
    doc_freq: dict[str, int] = field(default_factory=dict)
    unk: str | None = None

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, docs: Iterable[Iterable[str]], reserved: Sequence[str] = (), unk: str | None = None,
              min_count: int = 1) -> "Vocabulary":
        counts: Counter = Counter()
        df: Counter = Counter()
        for doc in docs:
            doc = list(doc)
            counts.update(doc)
            df.update(set(doc))
        kept = sorted(t for t, c in counts.items() if c >= min_count and t not in reserved)
        return cls(list(reserved) + kept, dict(df), unk)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        if token in self.index:
            return self.index[token]
        if self.unk is None:
            raise KeyError(token)
        return self.index[self.unk]

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def to_dict(self):
        return {"tokens": self.tokens, "unk": self.unk, "doc_freq": self.doc_freq}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["tokens"]), dict(d.get("doc_freq", {})), d.get("unk"))


# ---------------------------------------------------------------------------
# splits


SPLIT_NAMES = ("istas_r", "istas_t", "lsapp")
PARTS = ("train", "validation", "test")


@dataclass
class DatasetSplit:
    name: str
    train: list[int]
    validation: list[int]
    test: list[int]
    seed: int | None = None
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {self.name!r}")

    def part(self, name: str) -> list[int]:
        return getattr(self, name)

    def sizes(self) -> dict[str, int]:
        return {p: len(self.part(p)) for p in PARTS}

    def save(self, path):
        header = {"name": self.name, "seed": self.seed, "ratios": list(self.ratios), **self.sizes()}
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for p in PARTS:
                for i in self.part(p):
                    fh.write(f"{p}\t{i}\n")

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            parts: dict[str, list[int]] = {p: [] for p in PARTS}
            for line in fh:
                if line.strip():
                    p, i = line.rstrip("\n").split("\t")
                    parts[p].append(int(i))
        return cls(header["name"], parts["train"], parts["validation"], parts["test"],
                   header.get("seed"), tuple(header.get("ratios", (0.7, 0.1, 0.2))))


def _ratios(ratios) -> tuple[Fraction, Fraction, Fraction]:
    fr = tuple(Fraction(r).limit_denominator(10_000) for r in ratios)
    if len(fr) != 3 or sum(fr) != 1 or any(r < 0 for r in fr):
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    return fr


def split_istas_r(records: Sequence, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DatasetSplit:
    """Uniformly random partition, deterministic in ``seed``."""
    n = len(records)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    r_train, r_valid, _ = _ratios(ratios)
    n_train = int(r_train * n)
    n_valid = int(r_valid * n)
    perm = np.random.default_rng(seed).permutation(n)
    return DatasetSplit("istas_r", sorted(perm[:n_train].tolist()),
                        sorted(perm[n_train:n_train + n_valid].tolist()),
                        sorted(perm[n_train + n_valid:].tolist()), seed, tuple(ratios))


def chronological_counts(n: int, ratios=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    """Per-user ``(train, validation, test)`` sizes: floor train (at least 1), ceil test."""
    r_train, _, r_test = _ratios(ratios)
    if n <= 0:
        return 0, 0, 0
    train = max(1, int(r_train * n))
    test = min(math.ceil(r_test * n), n - train)
    return train, n - train - test, test


def _chronological_split(name: str, records: Sequence, ratios) -> DatasetSplit:
    by_user: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        by_user[r.user_id].append(i)
    train, valid, test = [], [], []
    for user in sorted(by_user):
        idx = sorted(by_user[user], key=lambda i: (records[i].timestamp, i))
        n_train, n_valid, _ = chronological_counts(len(idx), ratios)
        train += idx[:n_train]
        valid += idx[n_train:n_train + n_valid]
        test += idx[n_train + n_valid:]
    return DatasetSplit(name, sorted(train), sorted(valid), sorted(test), None, tuple(ratios))


def split_istas_t(records: Sequence[QueryRecord], ratios=(0.7, 0.1, 0.2)) -> DatasetSplit:
    """Per-user chronological split of queries."""
    return _chronological_split("istas_t", records, ratios)


def split_lsapp(events: Sequence[UsageEvent], ratios=(0.7, 0.1, 0.2)) -> DatasetSplit:
    """Per-user chronological split of usage records.

    Prediction instances are built afterwards per segment (see
    ``neusa.build_instances``) so no context window crosses a boundary.
    """
    return _chronological_split("lsapp", events, ratios)


def user_segments(records: Sequence, split: DatasetSplit, part: str) -> dict[str, list]:
    """Records of one split part, grouped per user in chronological order."""
    chosen = [records[i] for i in split.part(part)]
    groups = group_by_user(chosen)
    return {u: sorted(items, key=lambda r: r.timestamp) for u, items in sorted(groups.items())}
