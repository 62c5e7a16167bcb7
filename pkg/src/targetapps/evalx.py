"""Ranking metrics, paired significance tests and breakdown analyses.

Every instance has exactly one relevant app. Rankings are lists of app ids
(or RankedPrediction objects), best first, with rank counted from 1.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .ranking import RankedPrediction

NDCG_CUTOFFS = (1, 3, 5)
RECALL_CUTOFFS = (3, 5)
METRICS = ("mrr", "ndcg@1", "ndcg@3", "ndcg@5", "recall@3", "recall@5")


def _apps(ranked) -> Sequence[str]:
    return ranked.apps if isinstance(ranked, RankedPrediction) else ranked


def rank_of(ranked, relevant) -> int | None:
    for i, a in enumerate(_apps(ranked)):
        if a == relevant:
            return i + 1
    return None


def reciprocal_rank(ranked, relevant) -> float:
    """1/rank of the relevant app; 0 when it is absent from the list."""
    r = rank_of(ranked, relevant)
    return 0.0 if r is None else 1.0 / r


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary single-relevance nDCG: ``1/log2(rank+1)`` inside the cutoff (IDCG = 1)."""
    r = rank_of(ranked, relevant)
    if r is None or r > k:
        return 0.0
    return 1.0 / math.log2(r + 1)


def recall_at_k(ranked, relevant, k: int) -> float:
    r = rank_of(ranked, relevant)
    return 1.0 if r is not None and r <= k else 0.0


def mrr(rankings: Sequence, relevant: Sequence) -> tuple[float, np.ndarray]:
    """Mean reciprocal rank and the per-instance reciprocal ranks."""
    rr = np.array([reciprocal_rank(r, t) for r, t in zip(rankings, relevant)], dtype=float)
    return (float(rr.mean()) if rr.size else 0.0), rr


def per_instance(rank: int | None) -> dict[str, float]:
    """Every metric for an instance whose relevant app sits at ``rank`` (None = absent)."""
    out = {"mrr": 0.0 if rank is None else 1.0 / rank}
    for k in NDCG_CUTOFFS:
        out[f"ndcg@{k}"] = 0.0 if rank is None or rank > k else 1.0 / math.log2(rank + 1)
    for k in RECALL_CUTOFFS:
        out[f"recall@{k}"] = 1.0 if rank is not None and rank <= k else 0.0
    return out


@dataclass
class EvalResult:
    system: str
    ranks: list  # 1-based rank of the relevant app per instance, None if absent
    groups: dict[str, list] = field(default_factory=dict)
    instance_ids: list = field(default_factory=list)

    def __post_init__(self):
        table = [per_instance(r) for r in self.ranks]
        self.per_instance = {m: np.array([row[m] for row in table], dtype=float) for m in METRICS}
        if not self.instance_ids:
            self.instance_ids = list(range(len(self.ranks)))

    @property
    def count(self) -> int:
        return len(self.ranks)

    def aggregate(self, metric: str) -> float:
        v = self.per_instance[metric]
        return float(v.mean()) if v.size else 0.0

    @property
    def aggregates(self) -> dict[str, float]:
        return {m: self.aggregate(m) for m in METRICS}

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "count": self.count,
            "aggregates": self.aggregates,
            "instances": [
                {"id": iid, "rank": r, **{m: float(self.per_instance[m][i]) for m in METRICS},
                 **{g: vals[i] for g, vals in self.groups.items()}}
                for i, (iid, r) in enumerate(zip(self.instance_ids, self.ranks))
            ],
        }


def evaluate(system: str, rankings: Sequence, relevant: Sequence, groups: Mapping[str, Sequence] | None = None,
             instance_ids: Sequence | None = None) -> EvalResult:
    if len(rankings) != len(relevant):
        raise ValueError("rankings and relevant items differ in length")
    return EvalResult(system, [rank_of(r, t) for r, t in zip(rankings, relevant)],
                      {k: list(v) for k, v in (groups or {}).items()}, list(instance_ids or []))


# ---------------------------------------------------------------------------
# significance


@dataclass
class TTestResult:
    t: float
    p: float
    significant: bool
    alpha: float
    comparisons: int
    degenerate: bool = False


def t_two_sided_p(t: float, df: int) -> float:
    """Two-tailed p-value of a Student-t statistic."""
    return float(2.0 * stats.t.sf(abs(t), df))


def paired_ttest(a: Sequence[float], b: Sequence[float], comparisons: int = 1, alpha: float = 0.05) -> TTestResult:
    """Two-tailed paired t-test with Bonferroni correction over ``comparisons`` tests.

    Zero-variance differences: p = 1 when the mean difference is 0, else p = 0,
    flagged as degenerate.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("paired_ttest needs two equal-length samples with at least 2 entries")
    if comparisons < 1:
        raise ValueError("comparisons must be >= 1")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    threshold = alpha / comparisons
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, False, alpha, comparisons, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, True, alpha, comparisons, True)
    t = mean / (sd / math.sqrt(d.size))
    p = t_two_sided_p(t, d.size - 1)
    return TTestResult(float(t), p, p < threshold, alpha, comparisons)


def significance_table(results: Sequence[EvalResult], reference: EvalResult, metric: str = "mrr",
                       alpha: float = 0.05) -> list[dict]:
    """Test ``reference`` against each baseline; Bonferroni divisor = number of baselines."""
    n = max(1, len(results))
    rows = []
    for res in results:
        tt = paired_ttest(reference.per_instance[metric], res.per_instance[metric], n, alpha)
        rows.append({"system": reference.system, "baseline": res.system, "metric": metric, "t": tt.t,
                     "p": tt.p, "significant": tt.significant, "alpha": alpha, "comparisons": n,
                     "degenerate": tt.degenerate})
    return rows


# ---------------------------------------------------------------------------
# breakdowns


def delta_breakdown(a: EvalResult, b: EvalResult, key: str) -> tuple[list[tuple[str, float]], float]:
    """Per-group MRR(a) - MRR(b), sorted descending, and the fraction of improved groups."""
    if a.count != b.count:
        raise ValueError("results cover different instances")
    labels = a.groups[key]
    sums: dict = defaultdict(lambda: [0.0, 0.0, 0])
    for lab, ra, rb in zip(labels, a.per_instance["mrr"], b.per_instance["mrr"]):
        s = sums[lab]
        s[0] += ra
        s[1] += rb
        s[2] += 1
    deltas = [(lab, (sa - sb) / n) for lab, (sa, sb, n) in sums.items()]
    deltas.sort(key=lambda kv: (-kv[1], str(kv[0])))
    improved = sum(1 for _, d in deltas if d > 0)
    return deltas, (improved / len(deltas) if deltas else 0.0)


BUCKET_LABELS = ("Short", "Med.", "Long")


def length_buckets(lengths: Sequence[int], scores: Sequence[float] | None = None) -> list[dict]:
    """Three near-equal buckets by query length; remainders go to the earlier buckets.

    Ties in length keep instance order. Returns per-bucket instance ids and mean score.
    """
    n = len(lengths)
    if n < 3:
        raise ValueError("need at least 3 queries for length buckets")
    order = sorted(range(n), key=lambda i: (lengths[i], i))
    base, extra = divmod(n, 3)
    out, start = [], 0
    for j, label in enumerate(BUCKET_LABELS):
        size = base + (1 if j < extra else 0)
        ids = order[start:start + size]
        start += size
        row = {"bucket": label, "ids": ids, "count": size,
               "min_len": lengths[ids[0]], "max_len": lengths[ids[-1]]}
        if scores is not None:
            row["mrr"] = float(np.mean([scores[i] for i in ids]))
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# output


def write_results_tsv(path, results: Sequence[EvalResult]):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["system", "count", *METRICS])
        for r in results:
            w.writerow([r.system, r.count, *(f"{r.aggregate(m):.6f}" for m in METRICS)])


def write_results_json(path, results: Sequence[EvalResult], extra: dict | None = None):
    payload = {"results": [r.to_dict() for r in results], **(extra or {})}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o)}")
