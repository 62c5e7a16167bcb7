"""Non-neural rankers for both tasks and the contextual "-CR" interpolation filter."""

from __future__ import annotations

import bisect
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.feature_extraction.text import TfidfVectorizer

from .context import UsageContextDistribution
from .dataio import UsageEvent
from .evalx import ndcg_at_k
from .ranking import RankedPrediction, rank_scores


# ---------------------------------------------------------------------------
# popularity and recency


def mfu_rank(counts: Mapping[str, int], candidates: Iterable[str] | None = None) -> RankedPrediction:
    """Apps by descending training frequency, ties by app id. Query independent."""
    if not counts:
        raise ValueError("MFU needs non-empty training data")
    apps = set(counts) if candidates is None else set(candidates)
    return rank_scores({a: float(counts.get(a, 0)) for a in apps})


def mru_rank(history: Sequence[UsageEvent], t: int, mfu: RankedPrediction) -> RankedPrediction:
    """Apps by the time of their last use strictly before ``t``; unseen apps follow in MFU order.

    Scores are positional (higher is better) so they can be interpolated.
    """
    times = [e.timestamp for e in history]
    end = bisect.bisect_left(times, t)
    order: list[str] = []
    seen: set[str] = set()
    for e in reversed(history[:end]):
        if e.app_id not in seen:
            seen.add(e.app_id)
            order.append(e.app_id)
    order += [a for a in mfu.apps if a not in seen]
    n = len(order)
    return RankedPrediction(tuple((a, float(n - i)) for i, a in enumerate(order)))


class MRUIndex:
    """Latest-use lookups over per-user histories; equivalent to ``mru_rank`` but cached."""

    def __init__(self, events: Iterable[UsageEvent], mfu: RankedPrediction):
        self.mfu = mfu
        self.history: dict[str, list[UsageEvent]] = {}
        for e in sorted(events, key=lambda e: (e.user_id, e.timestamp)):
            self.history.setdefault(e.user_id, []).append(e)

    def rank(self, user: str, t: int) -> RankedPrediction:
        return mru_rank(self.history.get(user, []), t, self.mfu)


# ---------------------------------------------------------------------------
# document-based retrieval (one pseudo-document per app)


@dataclass
class AppDocuments:
    """Training queries concatenated into one bag of terms per app."""
    tf: dict[str, Counter]
    length: dict[str, int] = field(init=False)
    collection: Counter = field(init=False)
    df: Counter = field(init=False)

    def __post_init__(self):
        self.length = {a: sum(c.values()) for a, c in self.tf.items()}
        self.collection = Counter()
        self.df = Counter()
        for c in self.tf.values():
            self.collection.update(c)
            self.df.update(c.keys())
        self.total_terms = sum(self.collection.values())
        self.avg_length = self.total_terms / len(self.tf) if self.tf else 0.0

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]], apps: Iterable[str]) -> "AppDocuments":
        tf: dict[str, Counter] = {}
        for tokens, app in zip(token_lists, apps):
            tf.setdefault(app, Counter()).update(tokens)
        return cls(tf)

    @property
    def apps(self) -> list[str]:
        return sorted(self.tf)


_EMPTY: Counter = Counter()


def _candidates(docs: AppDocuments, candidates) -> list[str]:
    return docs.apps if candidates is None else sorted(set(candidates))


def querylm_scores(tokens: Sequence[str], docs: AppDocuments, mu: float = 2000.0,
                   candidates: Iterable[str] | None = None) -> dict[str, float]:
    """Dirichlet-smoothed query log-likelihood; terms absent from the collection are skipped.

    Candidates without training queries are scored as empty documents.
    """
    q = Counter(tokens)
    scores = {}
    for app in _candidates(docs, candidates):
        tf, dl = docs.tf.get(app, _EMPTY), docs.length.get(app, 0)
        s = 0.0
        for w, c in q.items():
            cf = docs.collection.get(w, 0)
            if cf == 0:
                continue
            p_c = cf / docs.total_terms
            s += c * math.log((tf.get(w, 0) + mu * p_c) / (dl + mu))
        scores[app] = s
    return scores


def querylm_rank(tokens: Sequence[str], docs: AppDocuments, mu: float = 2000.0,
                 candidates: Iterable[str] | None = None) -> RankedPrediction:
    return rank_scores(querylm_scores(tokens, docs, mu, candidates))


def bm25_idf(df: int, n_docs: int) -> float:
    return math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)


def bm25_scores(tokens: Sequence[str], docs: AppDocuments, k1: float = 1.2, b: float = 0.75,
                candidates: Iterable[str] | None = None) -> dict[str, float]:
    n_docs = len(docs.tf)
    q = Counter(tokens)
    scores = {}
    for app in _candidates(docs, candidates):
        tf, dl = docs.tf.get(app, _EMPTY), docs.length.get(app, 0)
        norm = k1 * (1 - b + b * dl / docs.avg_length) if docs.avg_length else k1
        s = 0.0
        for w, c in q.items():
            f = tf.get(w, 0)
            if f:
                s += c * bm25_idf(docs.df[w], n_docs) * f * (k1 + 1) / (f + norm)
        scores[app] = s
    return scores


def bm25_rank(tokens: Sequence[str], docs: AppDocuments, k1: float = 1.2, b: float = 0.75,
              candidates: Iterable[str] | None = None) -> RankedPrediction:
    return rank_scores(bm25_scores(tokens, docs, k1, b, candidates))


# ---------------------------------------------------------------------------
# nearest-neighbour rankers over training queries


class _KNN:
    """Rank apps by the summed cosine similarity of the K nearest training queries."""

    def __init__(self, labels: Sequence[str], mfu: RankedPrediction, K: int = 10):
        if K < 1:
            raise ValueError("K must be >= 1")
        self.labels = list(labels)
        self.mfu = mfu
        self.K = K
        self.apps = sorted(set(mfu.apps) | set(self.labels))

    def _similarities(self, token_lists: Sequence[Sequence[str]]) -> np.ndarray:
        raise NotImplementedError

    def _rank_row(self, sims: np.ndarray, K: int) -> RankedPrediction:
        order = np.argsort(-sims, kind="stable")[:K]
        scores = {a: 0.0 for a in self.apps}
        for i in order:
            scores[self.labels[i]] += float(sims[i])
        return rank_scores(scores, tiebreak=self.mfu.apps)

    def rank(self, tokens: Sequence[str], K: int | None = None) -> RankedPrediction:
        return self._rank_row(self._similarities([tokens])[0], K or self.K)

    def rank_many(self, token_lists: Sequence[Sequence[str]], K: int | None = None) -> list[RankedPrediction]:
        sims = self._similarities(token_lists)
        return [self._rank_row(row, K or self.K) for row in sims]


def _identity(tokens):
    return tokens


class KNNTfidf(_KNN):
    """Cosine over TF-IDF vectors (raw tf, smoothed idf, l2-normalized)."""

    def __init__(self, token_lists: Sequence[Sequence[str]], labels: Sequence[str], mfu: RankedPrediction,
                 K: int = 10):
        super().__init__(labels, mfu, K)
        self.vectorizer = TfidfVectorizer(analyzer=_identity, lowercase=False)
        self.X = self.vectorizer.fit_transform([list(t) for t in token_lists])

    def _similarities(self, token_lists):
        Q = self.vectorizer.transform([list(t) for t in token_lists])
        return (Q @ self.X.T).toarray()


class EmbeddingTable:
    """Word vectors loaded from ``token v1 ... vD`` lines; misses map to the zero vector."""

    def __init__(self, vectors: Mapping[str, np.ndarray]):
        dims = {len(v) for v in vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"embedding vectors have mixed dimensions: {sorted(dims)}")
        self.vectors = {t: np.asarray(v, dtype=float) for t, v in vectors.items()}
        self.dim = dims.pop() if dims else 0

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"embedding file not found: {path}")
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip().split(" ")
                if len(parts) < 2:
                    continue
                try:
                    vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: malformed vector") from None
        return cls(vectors)

    def lookup(self, token: str) -> np.ndarray:
        v = self.vectors.get(token)
        return v if v is not None else np.zeros(self.dim)

    def average(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros(self.dim)
        return np.mean([self.lookup(t) for t in tokens], axis=0)


def _unit_rows(M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    return np.divide(M, norms, out=np.zeros_like(M), where=norms > 0)


class KNNAwe(_KNN):
    """Cosine over average word embeddings; an all-OOV query has similarity 0 to everything."""

    def __init__(self, token_lists: Sequence[Sequence[str]], labels: Sequence[str], table: EmbeddingTable,
                 mfu: RankedPrediction, K: int = 10):
        super().__init__(labels, mfu, K)
        self.table = table
        self.X = _unit_rows(np.array([table.average(t) for t in token_lists]).reshape(len(token_lists), table.dim))

    def _similarities(self, token_lists):
        Q = _unit_rows(np.array([self.table.average(t) for t in token_lists]).reshape(len(token_lists), self.table.dim))
        return Q @ self.X.T


# ---------------------------------------------------------------------------
# contextual interpolation


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def interpolate_scores(base: Sequence[float], ctx: Sequence[float], lam: float) -> np.ndarray:
    """``lam * ctx + (1 - lam) * base`` on already-normalized score vectors."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return lam * np.asarray(ctx, dtype=float) + (1.0 - lam) * np.asarray(base, dtype=float)


def context_filter_cr(base: RankedPrediction, dist: UsageContextDistribution, lam: float) -> RankedPrediction:
    """Interpolate min-max normalized base scores with normalized 24 h usage time.

    ``lam`` weights the context side. Ties keep the base order.
    """
    apps = base.apps
    b = _minmax(np.array([s for _, s in base.items], dtype=float))
    c = _minmax(np.array([dist.seconds.get(a, 0.0) for a in apps], dtype=float))
    combined = interpolate_scores(b, c, lam)
    order = sorted(range(len(apps)), key=lambda i: (-combined[i], i))
    return RankedPrediction(tuple((apps[i], float(combined[i])) for i in order))


LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


def tune_lambda(bases: Sequence[RankedPrediction], dists: Sequence[UsageContextDistribution],
                targets: Sequence[str], grid: Sequence[float] = LAMBDA_GRID) -> tuple[float, dict[float, float]]:
    """Pick the interpolation weight with the best mean nDCG@3; ties go to the smaller value."""
    table = {}
    for lam in grid:
        table[lam] = float(np.mean([ndcg_at_k(context_filter_cr(b, d, lam), t, 3)
                                    for b, d, t in zip(bases, dists, targets)]))
    best = max(grid, key=lambda l: (table[l], -l))
    return best, table


def tune_k(knn: _KNN, token_lists, targets, grid: Sequence[int] = (1, 3, 5, 10, 20, 50)) -> tuple[int, dict[int, float]]:
    table = {}
    for K in grid:
        table[K] = float(np.mean([ndcg_at_k(r, t, 3) for r, t in zip(knn.rank_many(token_lists, K), targets)]))
    best = max(grid, key=lambda k: (table[k], -k))
    knn.K = best
    return best, table
