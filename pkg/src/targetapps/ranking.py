"""Ranked output shared by every model and baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence


@dataclass(frozen=True)
class RankedPrediction:
    """Apps ordered best-first, each with the score that produced the order."""
    items: tuple[tuple[str, float], ...]

    @property
    def apps(self) -> list[str]:
        return [a for a, _ in self.items]

    @property
    def scores(self) -> dict[str, float]:
        return dict(self.items)

    def rank_of(self, app: str) -> int | None:
        """1-based rank, or None when the app is not in the list."""
        for i, (a, _) in enumerate(self.items):
            if a == app:
                return i + 1
        return None

    def top(self, k: int) -> "RankedPrediction":
        return RankedPrediction(self.items[:k])

    def __len__(self):
        return len(self.items)


def rank_scores(scores: Mapping[str, float], tiebreak: Sequence[str] | None = None) -> RankedPrediction:
    """Sort by descending score. Ties follow ``tiebreak`` order if given, else app id."""
    if tiebreak is not None:
        pos = {a: i for i, a in enumerate(tiebreak)}
        end = len(pos)
        key = lambda kv: (-kv[1], pos.get(kv[0], end), kv[0])
    else:
        key = lambda kv: (-kv[1], kv[0])
    return RankedPrediction(tuple((a, float(s)) for a, s in sorted(scores.items(), key=key)))


def from_arrays(apps: Iterable[str], scores: Iterable[float]) -> RankedPrediction:
    return rank_scores(dict(zip(apps, scores)))
