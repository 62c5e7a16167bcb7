"""Contextual features: 24 h usage distributions, time bins, recent-app windows."""

from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataio import StatsRecord, UsageEvent

DAY = 86400
NUM_BINS = 8
PAD = "<pad>"
UNK = "<unk>"
# a launch with no closing event counts as foreground for at most this long
MAX_OPEN_SECONDS = 300


@dataclass
class UsageContextDistribution:
    user_id: str
    window: tuple[int, int]
    probs: dict[str, float] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.probs

    def ranked_apps(self) -> list[str]:
        """Apps by descending usage time, ties by app id."""
        return [a for a, _ in sorted(self.seconds.items(), key=lambda kv: (-kv[1], kv[0]))]


def _normalize(user, window, seconds: Mapping[str, float]) -> UsageContextDistribution:
    seconds = {a: float(s) for a, s in seconds.items() if s > 0}
    total = sum(seconds.values())
    if total <= 0:
        return UsageContextDistribution(user, window)
    return UsageContextDistribution(user, window, {a: s / total for a, s in sorted(seconds.items())}, seconds)


class UsageIndex:
    """Per-user lookup of usage time before an instant.

    Built from stats snapshots when available, otherwise from launch/close
    event pairs. Negative durations are clamped to zero and counted in
    ``clamped``.
    """

    def __init__(self, events: Iterable[UsageEvent] = (), stats: Iterable[StatsRecord] = (),
                 horizon: int = DAY):
        self.horizon = horizon
        self.clamped = 0
        self._snapshots: dict[str, dict[int, dict[str, float]]] = defaultdict(lambda: defaultdict(dict))
        for s in stats:
            secs = s.seconds
            if secs < 0:
                self.clamped += 1
                secs = 0.0
            snap = self._snapshots[s.user_id][s.snapshot_timestamp]
            snap[s.app_id] = snap.get(s.app_id, 0.0) + secs
        self._snap_times = {u: sorted(snaps) for u, snaps in self._snapshots.items()}
        self._intervals: dict[str, list[tuple[int, int, str]]] = {}
        self._interval_starts: dict[str, list[int]] = {}
        by_user: dict[str, list[UsageEvent]] = defaultdict(list)
        for e in events:
            by_user[e.user_id].append(e)
        for user, evs in by_user.items():
            evs.sort(key=lambda e: e.timestamp)
            iv = self._foreground_intervals(evs)
            self._intervals[user] = iv
            self._interval_starts[user] = [s for s, _, _ in iv]

    def _foreground_intervals(self, evs: Sequence[UsageEvent]):
        out = []
        for i, e in enumerate(evs):
            if e.kind != "launch":
                continue
            end = e.timestamp + MAX_OPEN_SECONDS
            j = i + 1
            while j < len(evs) and evs[j].timestamp < end:
                nxt = evs[j]
                if (nxt.kind == "close" and nxt.app_id == e.app_id) or nxt.kind == "launch":
                    end = nxt.timestamp
                    break
                j += 1
            if end < e.timestamp:
                self.clamped += 1
                end = e.timestamp
            out.append((e.timestamp, end, e.app_id))
        return out

    def seconds_before(self, user: str, t: int) -> dict[str, float]:
        if user in self._snap_times:
            times = self._snap_times[user]
            i = bisect.bisect_right(times, t) - 1
            if i >= 0 and times[i] > t - self.horizon:
                return dict(self._snapshots[user][times[i]])
            return {}
        lo = t - self.horizon
        intervals = self._intervals.get(user, [])
        # intervals are at most MAX_OPEN_SECONDS long, so earlier starts cannot reach the window
        first = bisect.bisect_left(self._interval_starts.get(user, []), lo - MAX_OPEN_SECONDS)
        secs: dict[str, float] = defaultdict(float)
        for start, end, app in intervals[first:]:
            if start >= t:
                break
            overlap = min(end, t) - max(start, lo)
            if overlap > 0:
                secs[app] += overlap
        return dict(secs)

    def distribution(self, user: str, t: int) -> UsageContextDistribution:
        return _normalize(user, (t - self.horizon, t), self.seconds_before(user, t))


def usage_distribution(user: str, t: int, events: Iterable[UsageEvent] = (),
                       stats: Iterable[StatsRecord] = (), horizon: int = DAY) -> UsageContextDistribution:
    """Normalized foreground time per app in ``[t - horizon, t)``.

    Stats snapshots take precedence: the latest snapshot at or before ``t``
    (and newer than ``t - horizon``) is used as-is.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    events = [e for e in events if e.user_id == user]
    stats = [s for s in stats if s.user_id == user]
    return UsageIndex(events, stats, horizon).distribution(user, t)


def time_bin(t: int, tz_offset: int = 0) -> int:
    """Index of the 3-hour bin of the local time of day, 0..7."""
    local = (int(t) + int(tz_offset)) % DAY
    return local // (DAY // NUM_BINS)


def recent_apps(history: Sequence[UsageEvent], t: int, k: int = 9, pad: str = PAD) -> list[str]:
    """The ``k`` latest apps used strictly before ``t``, oldest first, left-padded."""
    if k < 1:
        raise ValueError("k must be >= 1")
    times = [e.timestamp for e in history]
    end = bisect.bisect_left(times, t)
    apps = [e.app_id for e in history[max(0, end - k):end]]
    return [pad] * (k - len(apps)) + apps


def context_embedding(dist: UsageContextDistribution, app_matrix: np.ndarray,
                      app_index: Mapping[str, int], unk_row: int | None = None) -> np.ndarray:
    """Probability-weighted sum of app rows; zero vector for an empty distribution."""
    out = np.zeros(app_matrix.shape[1])
    for app, p in dist.probs.items():
        row = app_index.get(app, unk_row)
        if row is None:
            raise KeyError(f"app {app!r} has no row and no UNK fallback")
        out += p * app_matrix[row]
    return out


def distribution_matrix(dists: Sequence[UsageContextDistribution], app_index: Mapping[str, int],
                        n_rows: int, unk_row: int | None = None) -> np.ndarray:
    """Stack distributions as rows of a ``(len(dists), n_rows)`` matrix aligned with ``app_index``."""
    P = np.zeros((len(dists), n_rows))
    for i, d in enumerate(dists):
        for app, p in d.probs.items():
            row = app_index.get(app, unk_row)
            if row is not None:
                P[i, row] += p
    return P


def bin_usage_profiles(events: Sequence[UsageEvent], tz_offsets: Mapping[str, int] | None = None,
                       today_only: bool = False) -> "BinUsage":
    return BinUsage(events, tz_offsets or {}, today_only)


class BinUsage:
    """Time spent per app in each time bin, over all of ``events`` by default.

    Pass training-period events only; every event given is treated as history.

    With ``today_only`` only usage from the same calendar day as the query
    instant and before it is counted.
    """

    def __init__(self, events: Sequence[UsageEvent], tz_offsets: Mapping[str, int], today_only: bool = False):
        self.tz = dict(tz_offsets)
        self.today_only = today_only
        self.index = UsageIndex(events)
        self._totals: dict[str, list[dict[str, float]]] = defaultdict(lambda: [defaultdict(float) for _ in range(NUM_BINS)])
        for user, intervals in self.index._intervals.items():
            off = self.tz.get(user, 0)
            for start, end, app in intervals:
                for b, secs in _split_by_bin(start, end, off):
                    self._totals[user][b][app] += secs

    def distribution(self, user: str, t: int) -> UsageContextDistribution:
        off = self.tz.get(user, 0)
        b = time_bin(t, off)
        if self.today_only:
            day_start = t - ((t + off) % DAY)
            lo = day_start + b * (DAY // NUM_BINS)
            return _normalize(user, (lo, t), self._window(user, lo, t))
        return _normalize(user, (0, t), self._totals[user][b] if user in self._totals else {})

    def _window(self, user, lo, hi):
        secs: dict[str, float] = defaultdict(float)
        for start, end, app in self.index._intervals.get(user, []):
            overlap = min(end, hi) - max(start, lo)
            if overlap > 0:
                secs[app] += overlap
        return secs


def _split_by_bin(start: int, end: int, off: int):
    width = DAY // NUM_BINS
    t = start
    while t < end:
        local = t + off
        b = (local % DAY) // width
        boundary = local - (local % width) + width - off
        stop = min(end, boundary)
        yield b, stop - t
        t = stop
