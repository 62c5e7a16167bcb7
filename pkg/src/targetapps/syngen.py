"""Synthetic usage and query logs with planted, exactly known structure.

Usage streams follow a per-user Markov chain (first or third order) whose
next-app distribution is reweighted by a time-of-day preference table. Query
logs draw terms from per-app vocabularies and pick the target app from the
user's 24 h usage snapshot with a tunable correlation. The generating process
is returned alongside the data so the Bayes-optimal ranking can be computed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .context import DAY, NUM_BINS, PAD, time_bin
from .dataio import QueryRecord, StatsRecord, UsageEvent, write_query_log, write_stats_log, write_usage_log
from .ranking import RankedPrediction, rank_scores

START_TIME = 1_500_000_000
CHAIN_KINDS = ("peaked", "cycle", "uniform", "dirichlet")


@dataclass
class GeneratorSpec:
    seed: int = 0
    num_users: int = 50
    num_apps: int = 10
    num_events: int = 100_000
    zipf: float = 1.0
    order: int = 1
    chain: str = "peaked"
    dominance: float = 0.85
    concentration: float = 0.3
    order3_noise: float = 0.3
    user_chains: int = 1
    time_strength: float = 0.0
    time_boost: float = 5.0
    session_mean_events: float = 5.0
    # in-session gaps: 60 s + Exp(30 s) truncated below 240 s; between sessions 360 s + Exp(1440 s)
    gap_min: int = 60
    gap_extra_mean: float = 30.0
    gap_extra_max: float = 180.0
    session_gap_min: int = 360
    session_gap_mean: float = 1440.0
    # query side
    queries_per_user: int = 40
    terms_per_app: int = 20
    mean_query_terms: float = 3.0
    mixing: float = 0.0
    context_correlation: float = 0.0
    snapshot_app_prob: float = 0.6

    def __post_init__(self):
        if self.order not in (1, 3):
            raise ValueError("order must be 1 or 3")
        if self.chain not in CHAIN_KINDS:
            raise ValueError(f"chain must be one of {CHAIN_KINDS}")
        if not (0 <= self.mixing <= 1 and 0 <= self.context_correlation <= 1):
            raise ValueError("mixing and context_correlation must lie in [0, 1]")
        if self.num_apps < 3 or self.num_users < 1:
            raise ValueError("need at least 3 apps and 1 user")
        if self.gap_min + self.gap_extra_max > 300 or self.session_gap_min <= 300:
            raise ValueError("gap settings must keep planted sessions recoverable at the 300 s threshold")


def app_names(n: int) -> list[str]:
    width = len(str(n - 1))
    return [f"app{i:0{width}d}" for i in range(n)]


def user_names(n: int) -> list[str]:
    width = len(str(n - 1))
    return [f"u{i:0{width}d}" for i in range(n)]


@dataclass
class GroundTruth:
    """The exact generating process; arrays are indexed by app position in ``apps``."""
    spec: GeneratorSpec
    apps: list[str]
    users: list[str]
    popularity: np.ndarray            # (users, N) initial / query-side app distribution
    chains: np.ndarray                # (variants, N, N) or (variants, N, N, N, N) for order 3
    user_chain: dict[str, int]
    time_pref: np.ndarray             # (8, N) positive weights
    vocab: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.app_pos = {a: i for i, a in enumerate(self.apps)}
        self.user_pos = {u: i for i, u in enumerate(self.users)}

    def next_distribution(self, user: str, t: int, prev: Sequence[str]) -> np.ndarray:
        """Exact distribution of the app launched by ``user`` at ``t`` after ``prev`` (oldest first)."""
        prev = [p for p in prev if p != PAD]
        s = self.spec
        if len(prev) < s.order:
            base = self.popularity[self.user_pos[user]]
        else:
            table = self.chains[self.user_chain[user]]
            idx = tuple(self.app_pos[a] for a in prev[-s.order:])
            base = table[idx]
        w = base * self.time_pref[time_bin(t)] ** s.time_strength
        return w / w.sum()

    def target_posterior(self, user: str, tokens: Sequence[str], seconds: dict[str, float]) -> np.ndarray:
        """Exact posterior over the target app of a query given its terms and usage snapshot."""
        s = self.spec
        N = len(self.apps)
        prior = (1 - s.context_correlation) * self.popularity[self.user_pos[user]]
        if seconds:
            top = min(seconds, key=lambda a: (-seconds[a], a))
            prior = prior.copy()
            prior[self.app_pos[top]] += s.context_correlation
        all_terms = N * s.terms_per_app
        log_post = np.log(np.maximum(prior, 1e-300))
        for w in tokens:
            own = np.array([(1.0 / s.terms_per_app if w in self._vocab_sets[a] else 0.0) for a in self.apps])
            log_post += np.log(np.maximum((1 - s.mixing) * own + s.mixing / all_terms, 1e-300))
        log_post -= log_post.max()
        p = np.exp(log_post)
        return p / p.sum()

    @property
    def _vocab_sets(self):
        if not hasattr(self, "_vs"):
            self._vs = {a: set(ws) for a, ws in self.vocab.items()}
        return self._vs

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec), "apps": self.apps, "users": self.users,
            "popularity": self.popularity.tolist(), "chains": self.chains.tolist(),
            "user_chain": self.user_chain, "time_pref": self.time_pref.tolist(), "vocab": self.vocab,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(GeneratorSpec(**d["spec"]), d["apps"], d["users"], np.array(d["popularity"]),
                   np.array(d["chains"]), {k: int(v) for k, v in d["user_chain"].items()},
                   np.array(d["time_pref"]), {k: list(v) for k, v in d.get("vocab", {}).items()})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _rng(spec: GeneratorSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, stream])


def _first_order_chain(spec: GeneratorSpec, rng) -> np.ndarray:
    N = spec.num_apps
    if spec.chain == "uniform":
        return np.full((N, N), 1.0 / N)
    if spec.chain == "cycle":
        T = np.zeros((N, N))
        T[np.arange(N), (np.arange(N) + 1) % N] = 1.0
        return T
    if spec.chain == "dirichlet":
        T = rng.dirichlet(np.full(N, spec.concentration), size=N)
        return T
    # peaked: a fixed-point-free dominant successor plus one secondary successor
    while True:
        dom = rng.permutation(N)
        if not np.any(dom == np.arange(N)):
            break
    T = np.zeros((N, N))
    for a in range(N):
        T[a, dom[a]] = spec.dominance
        others = [b for b in range(N) if b not in (a, dom[a])]
        T[a, rng.choice(others)] += 1.0 - spec.dominance
    return T


def _third_order_chain(spec: GeneratorSpec, rng) -> np.ndarray:
    """Next app depends on the app three steps back through a random derangement."""
    N = spec.num_apps
    while True:
        perm = rng.permutation(N)
        if not np.any(perm == np.arange(N)):
            break
    T = np.full((N, N, N, N), spec.order3_noise / N)
    for x in range(N):
        T[x, :, :, perm[x]] += 1.0 - spec.order3_noise
    return T


def build_truth(spec: GeneratorSpec) -> GroundTruth:
    rng = _rng(spec, 0)
    N = spec.num_apps
    apps, users = app_names(N), user_names(spec.num_users)
    ranks = np.arange(1, N + 1, dtype=float)
    pop = np.empty((spec.num_users, N))
    for u in range(spec.num_users):
        w = ranks ** -spec.zipf
        pop[u] = w[rng.permutation(N)] / w.sum()
    make = _third_order_chain if spec.order == 3 else _first_order_chain
    chains = np.stack([make(spec, rng) for _ in range(spec.user_chains)])
    user_chain = {u: i % spec.user_chains for i, u in enumerate(users)}
    pref = np.ones((NUM_BINS, N))
    for b in range(NUM_BINS):
        pref[b, rng.choice(N, size=max(1, N // 4), replace=False)] = spec.time_boost
    vocab = {a: [f"{a}_w{j}" for j in range(spec.terms_per_app)] for a in apps}
    return GroundTruth(spec, apps, users, pop, chains, user_chain, pref, vocab)


def _in_session_gap(spec: GeneratorSpec, rng) -> int:
    while True:
        extra = rng.exponential(spec.gap_extra_mean)
        if extra < spec.gap_extra_max:
            return spec.gap_min + int(extra)


def generate_usage(spec: GeneratorSpec, truth: GroundTruth | None = None) -> tuple[list[UsageEvent], GroundTruth]:
    """Launch events for every user, sorted by ``(user, timestamp)``, plus the ground truth."""
    truth = truth or build_truth(spec)
    per_user = spec.num_events // spec.num_users
    events: list[UsageEvent] = []
    cont = 1.0 - 1.0 / spec.session_mean_events
    for ui, user in enumerate(truth.users):
        rng = _rng(spec, 100 + ui)
        t = START_TIME + int(rng.integers(0, DAY))
        prev: list[str] = []
        for n in range(per_user):
            if n > 0:
                if rng.random() < cont:
                    t += _in_session_gap(spec, rng)
                else:
                    t += spec.session_gap_min + int(rng.exponential(spec.session_gap_mean))
            p = truth.next_distribution(user, t, prev)
            app = truth.apps[int(rng.choice(len(p), p=p))]
            events.append(UsageEvent(user, t, app, "launch"))
            prev = (prev + [app])[-3:]
    return events, truth


def generate_queries(spec: GeneratorSpec, truth: GroundTruth | None = None
                     ) -> tuple[list[QueryRecord], list[StatsRecord], GroundTruth]:
    """Queries with a 24 h usage snapshot taken at each query instant."""
    truth = truth or build_truth(spec)
    records: list[QueryRecord] = []
    stats: list[StatsRecord] = []
    all_terms = [w for a in truth.apps for w in truth.vocab[a]]
    for ui, user in enumerate(truth.users):
        rng = _rng(spec, 10_000 + ui)
        pop = truth.popularity[ui]
        times = np.sort(rng.integers(0, 14 * DAY, size=spec.queries_per_user))
        t_prev = None
        for off in times:
            t = START_TIME + int(off)
            if t == t_prev:
                t += 1
            t_prev = t
            used = rng.random(len(truth.apps)) < spec.snapshot_app_prob
            if not used.any():
                used[rng.choice(len(truth.apps), p=pop)] = True
            seconds = {truth.apps[i]: float(int(rng.exponential(600.0 * len(truth.apps) * pop[i])) + 1)
                       for i in np.flatnonzero(used)}
            if rng.random() < spec.context_correlation:
                target = min(seconds, key=lambda a: (-seconds[a], a))
            else:
                target = truth.apps[int(rng.choice(len(pop), p=pop))]
            n_terms = 1 + int(rng.poisson(spec.mean_query_terms - 1))
            terms = []
            for _ in range(n_terms):
                if rng.random() < spec.mixing:
                    terms.append(all_terms[int(rng.integers(len(all_terms)))])
                else:
                    own = truth.vocab[target]
                    terms.append(own[int(rng.integers(len(own)))])
            records.append(QueryRecord(user, t, " ".join(terms), target))
            stats.extend(StatsRecord(user, t, a, s) for a, s in sorted(seconds.items()))
    return records, stats, truth


def bayes_oracle(truth: GroundTruth, instance) -> RankedPrediction:
    """Apps ranked by their exact posterior probability (ties by app id).

    ``instance`` is a recommendation instance (``window``, ``user_id``,
    ``timestamp``) or a selection instance (``tokens``, ``user_id``,
    ``context`` with a ``seconds`` mapping).
    """
    if hasattr(instance, "window"):
        p = truth.next_distribution(instance.user_id, instance.timestamp, instance.window)
    else:
        p = truth.target_posterior(instance.user_id, instance.tokens, instance.context.seconds)
    return rank_scores(dict(zip(truth.apps, p.tolist())))


def uniform_oracle_mrr(n: int) -> float:
    """Expected MRR of any ranking when the target is uniform over ``n`` apps."""
    return sum(1.0 / r for r in range(1, n + 1)) / n


def write_dataset(outdir, spec: GeneratorSpec, usage: bool = True, queries: bool = True) -> dict:
    """Emit usage.tsv / queries.tsv / stats.tsv and ground_truth.json into ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    truth = build_truth(spec)
    written = {}
    if usage:
        events, _ = generate_usage(spec, truth)
        write_usage_log(outdir / "usage.tsv", events)
        written["usage"] = len(events)
    if queries:
        records, stats, _ = generate_queries(spec, truth)
        write_query_log(outdir / "queries.tsv", records)
        write_stats_log(outdir / "stats.tsv", stats)
        written["queries"] = len(records)
        written["stats"] = len(stats)
    truth.save(outdir / "ground_truth.json")
    return written
