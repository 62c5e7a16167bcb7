"""Descriptive log analyses: query statistics and overlap, session co-occurrence,
app-switch Markov models and usage-context rank histograms."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .context import UsageIndex
from .dataio import (SESSION_GAP, QueryRecord, Session, UsageEvent, group_by_user, launches,
                     segment_sessions, sort_events, tokenize)

START = "<START>"
UNKNOWN_CATEGORY = "Unknown"
OVERLAP_THRESHOLDS = (0.25, 0.5, 0.75)


# ---------------------------------------------------------------------------
# query overlap


def query_overlap(q1: Iterable[str], q2: Iterable[str]) -> float:
    """Jaccard similarity of the two term sets; two empty queries give 0."""
    a, b = set(q1), set(q2)
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def overlap_report(queries_by_app: Mapping[str, Sequence[Sequence[str]]],
                   thresholds: Sequence[float] = OVERLAP_THRESHOLDS, chunk: int = 512) -> dict[str, dict[float, float]]:
    """Percentage of queries that have some *other* query with similarity above each threshold.

    Per-app rows compare against queries of the same app; the ``All`` row pools every app.
    """
    pooled = [(app, sorted(set(q))) for app in sorted(queries_by_app) for q in queries_by_app[app]]
    n = len(pooled)
    if n < 2:
        raise ValueError("overlap_report needs at least 2 queries")
    terms = {w: i for i, w in enumerate(sorted({w for _, q in pooled for w in q}))}
    rows = np.repeat(np.arange(n), [len(q) for _, q in pooled])
    cols = np.array([terms[w] for _, q in pooled for w in q], dtype=np.int64)
    X = sparse.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(n, max(1, len(terms))))
    sizes = np.asarray(X.sum(axis=1)).ravel()
    app_ids = np.array([a for a, _ in pooled])
    best_all = np.zeros(n)
    best_app = np.zeros(n)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        inter = (X[lo:hi] @ X.T).toarray()
        union = sizes[lo:hi, None] + sizes[None, :] - inter
        sim = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        sim[np.arange(hi - lo), np.arange(lo, hi)] = -1.0  # a query is not its own neighbour
        best_all[lo:hi] = sim.max(axis=1)
        same = app_ids[lo:hi, None] == app_ids[None, :]
        best_app[lo:hi] = np.where(same, sim, -1.0).max(axis=1)
    report: dict[str, dict[float, float]] = {}
    for app in sorted(queries_by_app):
        sel = app_ids == app
        if sel.any():
            report[app] = {tau: 100.0 * float(np.mean(best_app[sel] > tau)) for tau in thresholds}
    report["All"] = {tau: 100.0 * float(np.mean(best_all > tau)) for tau in thresholds}
    return report


# ---------------------------------------------------------------------------
# app switching


def category_of(app: str, categories: Mapping[str, str] | None) -> str:
    if categories is None:
        return app
    return categories.get(app, UNKNOWN_CATEGORY)


def _session_apps(session: Session, categories: Mapping[str, str] | None) -> list[str]:
    return [category_of(item.app_id if hasattr(item, "app_id") else item.target_app, categories)
            for item in session.items]


@dataclass
class TransitionModel:
    states: list[str]
    counts: np.ndarray
    threshold: float = 0.05

    @property
    def probabilities(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros_like(self.counts, dtype=float), where=rows > 0)

    def prob(self, src: str, dst: str) -> float:
        i, j = self.states.index(src), self.states.index(dst)
        return float(self.probabilities[i, j])

    def edges(self, threshold: float | None = None) -> list[tuple[str, str, float]]:
        """Edges with probability strictly above the threshold."""
        thr = self.threshold if threshold is None else threshold
        P = self.probabilities
        return [(self.states[i], self.states[j], float(P[i, j]))
                for i in range(len(self.states)) for j in range(len(self.states)) if P[i, j] > thr]

    def write_edges(self, path, threshold: float | None = None):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["src", "dst", "probability"])
            for s, d, p in self.edges(threshold):
                w.writerow([s, d, f"{p:.6f}"])


def markov_transitions(sessions: Sequence[Session], level: str = "app", categories: Mapping[str, str] | None = None,
                       threshold: float = 0.05) -> TransitionModel:
    """First-order switch model over consecutive in-session items, plus START -> first item."""
    if level not in ("app", "category"):
        raise ValueError("level must be 'app' or 'category'")
    if level == "category" and categories is None:
        raise ValueError("category level needs a category map")
    cmap = categories if level == "category" else None
    seqs = [_session_apps(s, cmap) for s in sessions]
    states = [START] + sorted({x for seq in seqs for x in seq})
    index = {s: i for i, s in enumerate(states)}
    counts = np.zeros((len(states), len(states)))
    for seq in seqs:
        prev = START
        for x in seq:
            counts[index[prev], index[x]] += 1
            prev = x
    return TransitionModel(states, counts, threshold)


@dataclass
class CooccurrenceMatrix:
    apps: list[str]
    counts: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total > 0 else np.zeros_like(self.counts, dtype=float)

    @property
    def display(self) -> np.ndarray:
        """Normalized matrix with the diagonal zeroed."""
        M = self.normalized.copy()
        np.fill_diagonal(M, 0.0)
        return M

    def value(self, a: str, b: str) -> float:
        return float(self.normalized[self.apps.index(a), self.apps.index(b)])


def cooccurrence(sessions: Sequence[Session], categories: Mapping[str, str] | None = None) -> CooccurrenceMatrix:
    """Session co-occurrence counts.

    Each unordered pair of distinct apps in a session adds 1 to both symmetric
    cells; each app present adds 1 to its diagonal cell.
    """
    sets = [sorted(set(_session_apps(s, categories))) for s in sessions]
    apps = sorted({a for s in sets for a in s})
    index = {a: i for i, a in enumerate(apps)}
    C = np.zeros((len(apps), len(apps)))
    for members in sets:
        ids = [index[a] for a in members]
        for x, i in enumerate(ids):
            C[i, i] += 1
            for j in ids[x + 1:]:
                C[i, j] += 1
                C[j, i] += 1
    return CooccurrenceMatrix(apps, C)


# ---------------------------------------------------------------------------
# usage context


@dataclass
class RankHistogram:
    max_rank: int
    counts: list[int]   # index r-1 holds rank r
    overflow: int = 0   # unseen targets and ranks beyond max_rank

    @property
    def total(self) -> int:
        return sum(self.counts) + self.overflow

    def fraction(self, rank: int) -> float:
        return self.counts[rank - 1] / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {"max_rank": self.max_rank, "counts": {str(r + 1): c for r, c in enumerate(self.counts)},
                "overflow": self.overflow, "total": self.total}


def context_rank(target: str, seconds: Mapping[str, float]) -> int | None:
    """Rank of ``target`` by descending usage time (ties by app id); None when unused."""
    used = sorted(((a, s) for a, s in seconds.items() if s > 0), key=lambda kv: (-kv[1], kv[0]))
    for i, (a, _) in enumerate(used):
        if a == target:
            return i + 1
    return None


def context_rank_histogram(queries: Sequence[QueryRecord], index: UsageIndex, max_rank: int = 10) -> RankHistogram:
    hist = RankHistogram(max_rank, [0] * max_rank)
    for q in queries:
        r = context_rank(q.target_app, index.seconds_before(q.user_id, q.timestamp))
        if r is None or r > max_rank:
            hist.overflow += 1
        else:
            hist.counts[r - 1] += 1
    return hist


# ---------------------------------------------------------------------------
# descriptive statistics


def summarize(values: Sequence[float]) -> dict[str, float]:
    """Mean, population standard deviation and median."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"mean": 0.0, "sd": 0.0, "median": 0.0, "n": 0}
    return {"mean": float(v.mean()), "sd": float(v.std()), "median": float(np.median(v)), "n": int(v.size)}


def query_characters(query: str) -> int:
    """Length after collapsing whitespace runs to one space and trimming."""
    return len(" ".join(query.split()))


def _day(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%d")


def query_stats(queries: Sequence[QueryRecord], gap: int = SESSION_GAP) -> dict:
    queries = sort_events(queries)
    by_user = group_by_user(queries)
    sessions = segment_sessions(queries, gap)
    per_day = Counter(_day(q.timestamp) for q in queries)
    return {
        "counts": {"queries": len(queries), "users": len(by_user), "sessions": len(sessions)},
        "distinct": {"unique_queries": len({q.query for q in queries}),
                     "unique_apps": len({q.target_app for q in queries}),
                     "days": len(per_day)},
        "queries_per_user": summarize([len(v) for v in by_user.values()]),
        "queries_per_session": summarize([len(s.items) for s in sessions]),
        "queries_per_day": summarize(list(per_day.values())),
        "days_per_user": summarize([len({_day(q.timestamp) for q in v}) for v in by_user.values()]),
        "unique_apps_per_user": summarize([len({q.target_app for q in v}) for v in by_user.values()]),
        "unique_apps_per_session": summarize([len({q.target_app for q in s.items}) for s in sessions]),
        "query_terms": summarize([len(tokenize(q.query)) for q in queries]),
        "query_characters": summarize([query_characters(q.query) for q in queries]),
    }


def app_switches(apps: Sequence[str]) -> int:
    return sum(1 for a, b in zip(apps, apps[1:]) if a != b)


def usage_stats(events: Sequence[UsageEvent], gap: int = SESSION_GAP) -> dict:
    events = sort_events(launches(events))
    by_user = group_by_user(events)
    sessions = segment_sessions(events, gap)
    return {
        "counts": {"records": len(events), "users": len(by_user), "sessions": len(sessions)},
        "distinct": {"unique_apps": len({e.app_id for e in events})},
        "duration_days_per_user": summarize([(v[-1].timestamp - v[0].timestamp) / 86400 for v in by_user.values()]),
        "session_seconds": summarize([s.end - s.start for s in sessions]),
        "unique_apps_per_session": summarize([len({e.app_id for e in s.items}) for s in sessions]),
        "app_switches_per_session": summarize([app_switches([e.app_id for e in s.items]) for s in sessions]),
    }


def descriptive_stats(queries: Sequence[QueryRecord] | None = None, events: Sequence[UsageEvent] | None = None,
                      gap: int = SESSION_GAP) -> dict:
    report: dict = {"meta": {"sd": "population", "session_gap": gap}}
    if queries is not None:
        report["queries"] = query_stats(queries, gap)
    if events is not None:
        report["usage"] = usage_stats(events, gap)
    return report


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_matrix_tsv(path, labels: Sequence[str], M: np.ndarray):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["", *labels])
        for lab, row in zip(labels, M):
            w.writerow([lab, *(f"{x:.6f}" for x in row)])
