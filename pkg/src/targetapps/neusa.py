"""Personalized, time-aware sequential next-app recommendation.

The last ``k`` apps go through a single-layer LSTM; its final state is joined
with a user embedding and a time-bin embedding (either can be ablated) and
fed to a two-hidden-layer ReLU network with an N-way softmax output.
"""

from __future__ import annotations

import bisect
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .context import NUM_BINS, PAD, UNK, BinUsage, recent_apps, time_bin
from .dataio import UsageEvent
from .evalx import evaluate
from .ranking import RankedPrediction

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class NeuSAConfig:
    k: int = 9
    d: int = 64
    h: int | None = None
    d_u: int | None = None
    d_t: int | None = None
    hidden: tuple[int, int] = (128, 64)
    dropout: float = 0.2
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 10
    optimizer: str = "adam"
    seed: int = 0
    use_user: bool = True
    use_time: bool = True
    bin_usage_feature: bool = False
    bin_usage_today_only: bool = False
    min_app_count: int = 2

    def __post_init__(self):
        self.hidden = tuple(int(x) for x in self.hidden)
        self.h = self.h or self.d
        self.d_u = self.d_u or self.d
        self.d_t = self.d_t or self.d
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if len(self.hidden) != 2:
            raise ValueError("hidden must list two layer widths")

    @property
    def mlp_input(self) -> int:
        return (self.h + self.d_u * self.use_user + self.d_t * self.use_time
                + self.d * self.bin_usage_feature)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NeuSAConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown NeuSA config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RecommendationInstance:
    user_id: str
    timestamp: int
    window: list[str]
    label: str
    window_times: list[int] = field(default_factory=list, repr=False)
    record: object = field(default=None, repr=False, compare=False)  # source event of the label


def build_instances(segments: Mapping[str, Sequence[UsageEvent]], k: int, start: int | None = None
                    ) -> list[RecommendationInstance]:
    """Every (window, next app) pair inside each user's segment.

    The window only holds records of the same segment that are strictly older
    than the label. A position is used only when at least ``start`` (default
    ``k``) such records exist, so windows never straddle a split boundary.
    """
    start = k if start is None else start
    out = []
    for user in sorted(segments):
        recs = segments[user]
        times = [r.timestamp for r in recs]
        for j, rec in enumerate(recs):
            end = bisect.bisect_left(times, rec.timestamp, 0, j)
            if end < max(start, 1):
                continue
            lo = max(0, end - k)
            window = [r.app_id for r in recs[lo:end]]
            window = [PAD] * (k - len(window)) + window
            out.append(RecommendationInstance(user, rec.timestamp, window, rec.app_id, times[lo:end], rec))
    return out


class NeuSA:
    def __init__(self, apps: Sequence[str], users: Sequence[str], config: NeuSAConfig | None = None,
                 app_counts: Mapping[str, int] | None = None, store: nc.ParameterStore | None = None,
                 tz_offsets: Mapping[str, int] | None = None):
        self.config = config or NeuSAConfig()
        self.apps = sorted(apps)
        if not self.apps:
            raise ValueError("empty app set")
        self.class_index = {a: i for i, a in enumerate(self.apps)}
        counts = app_counts or {a: self.config.min_app_count for a in self.apps}
        # input rows: 0 = pad, 1 = unk (rare or unseen apps), then one row per class
        self.input_index = {PAD: 0, UNK: 1}
        for i, a in enumerate(self.apps):
            if counts.get(a, 0) >= self.config.min_app_count:
                self.input_index[a] = i + 2
        self.app_counts = dict(counts)
        self.users = sorted(users)
        self.user_index = {u: i + 1 for i, u in enumerate(self.users)}  # 0 = unknown user
        self.tz_offsets = dict(tz_offsets or {})
        self.bin_usage: BinUsage | None = None
        self.store = store if store is not None else self._init_params()

    @property
    def n_classes(self) -> int:
        return len(self.apps)

    def _init_params(self) -> nc.ParameterStore:
        c = self.config
        rng = np.random.default_rng([c.seed, 3])
        h1, h2 = c.hidden
        s = nc.ParameterStore()
        s.add("app_emb", nc.uniform_init(rng, (len(self.apps) + 2, c.d)))
        s.add("lstm_Wx", nc.glorot_init(rng, (4 * c.h, c.d)))
        s.add("lstm_Wh", nc.glorot_init(rng, (4 * c.h, c.h)))
        s.add("lstm_b", np.zeros(4 * c.h))
        if c.use_user:
            s.add("user_emb", nc.uniform_init(rng, (len(self.users) + 1, c.d_u)))
        if c.use_time:
            s.add("time_emb", nc.uniform_init(rng, (NUM_BINS, c.d_t)))
        s.add("W1", nc.glorot_init(rng, (h1, c.mlp_input)))
        s.add("b1", np.zeros(h1))
        s.add("W2", nc.glorot_init(rng, (h2, h1)))
        s.add("b2", np.zeros(h2))
        s.add("W3", nc.glorot_init(rng, (self.n_classes, h2)))
        s.add("b3", np.zeros(self.n_classes))
        return s

    # -- encoding -----------------------------------------------------------

    def _lstm_params(self):
        s = self.store
        return s["lstm_Wx"], s["lstm_Wh"], s["lstm_b"]

    def encode(self, instances: Sequence[RecommendationInstance]) -> dict:
        k = self.config.k
        win = np.array([[self.input_index.get(a, 1) for a in inst.window[-k:]] for inst in instances],
                       dtype=np.int64).reshape(len(instances), k)
        batch = {
            "window": win,
            "user": np.array([self.user_index.get(i.user_id, 0) for i in instances], dtype=np.int64),
            "bin": np.array([time_bin(i.timestamp, self.tz_offsets.get(i.user_id, 0)) for i in instances],
                            dtype=np.int64),
            "label": np.array([self.class_index.get(i.label, -1) for i in instances], dtype=np.int64),
        }
        if self.config.bin_usage_feature:
            P = np.zeros((len(instances), len(self.apps) + 2))
            if self.bin_usage is not None:
                for n, inst in enumerate(instances):
                    for app, p in self.bin_usage.distribution(inst.user_id, inst.timestamp).probs.items():
                        P[n, self.input_index.get(app, 1)] += p
            batch["bin_usage"] = P
        return batch

    @staticmethod
    def _take(batch: dict, idx) -> dict:
        return {k: v[idx] for k, v in batch.items()}

    # -- forward / backward ---------------------------------------------------

    def forward(self, batch: dict, training: bool = False, rng=None):
        """Logits and softmax probabilities over the N apps, plus a backward cache."""
        s, c = self.store, self.config
        X = s["app_emb"][batch["window"]]
        h_last, lstm_caches = nc.lstm_forward(self._lstm_params(), X)
        feats = [h_last]
        if c.use_user:
            feats.append(s["user_emb"][batch["user"]])
        if c.use_time:
            feats.append(s["time_emb"][batch["bin"]])
        if c.bin_usage_feature:
            feats.append(batch["bin_usage"] @ s["app_emb"])
        x = np.concatenate(feats, axis=1)
        z1 = nc.dense_forward(s["W1"], s["b1"], x)
        a1, m1 = nc.dropout(nc.relu(z1), c.dropout, training, rng)
        z2 = nc.dense_forward(s["W2"], s["b2"], a1)
        a2, m2 = nc.dropout(nc.relu(z2), c.dropout, training, rng)
        logits = nc.dense_forward(s["W3"], s["b3"], a2)
        probs = nc.softmax(logits)
        return logits, probs, (batch, lstm_caches, x, z1, a1, m1, z2, a2, m2)

    def backward(self, cache, dlogits: np.ndarray) -> None:
        s, c = self.store, self.config
        batch, lstm_caches, x, z1, a1, m1, z2, a2, m2 = cache
        dW3, db3, da2 = nc.dense_backward(s["W3"], a2, dlogits)
        dz2 = nc.relu_backward(z2, nc.dropout_backward(m2, da2))
        dW2, db2, da1 = nc.dense_backward(s["W2"], a1, dz2)
        dz1 = nc.relu_backward(z1, nc.dropout_backward(m1, da1))
        dW1, db1, dx = nc.dense_backward(s["W1"], x, dz1)
        for name, g in (("W3", dW3), ("b3", db3), ("W2", dW2), ("b2", db2), ("W1", dW1), ("b1", db1)):
            s.grad(name)[...] += g
        off = c.h
        dh_last = dx[:, :off]
        if c.use_user:
            np.add.at(s.grad("user_emb"), batch["user"], dx[:, off:off + c.d_u])
            off += c.d_u
        if c.use_time:
            np.add.at(s.grad("time_emb"), batch["bin"], dx[:, off:off + c.d_t])
            off += c.d_t
        if c.bin_usage_feature:
            s.grad("app_emb")[...] += batch["bin_usage"].T @ dx[:, off:off + c.d]
        dWx, dWh, db, dX = nc.lstm_backward(self._lstm_params(), lstm_caches, dh_last)
        s.grad("lstm_Wx")[...] += dWx
        s.grad("lstm_Wh")[...] += dWh
        s.grad("lstm_b")[...] += db
        np.add.at(s.grad("app_emb"), batch["window"].reshape(-1), dX.reshape(-1, c.d))

    def loss(self, batch: dict, training: bool = False, rng=None) -> float:
        """Cross-entropy for a batch; accumulates gradients into the store."""
        logits, _, cache = self.forward(batch, training, rng)
        loss, _, dlogits = nc.softmax_cross_entropy(logits, batch["label"])
        self.backward(cache, dlogits)
        return loss

    # -- inference ------------------------------------------------------------

    def predict_proba(self, instances: Sequence[RecommendationInstance], chunk: int = 1024) -> np.ndarray:
        if not instances:
            return np.zeros((0, self.n_classes))
        batch = self.encode(instances)
        out = []
        for lo in range(0, len(instances), chunk):
            _, p, _ = self.forward(self._take(batch, slice(lo, lo + chunk)))
            out.append(p)
        return np.concatenate(out)

    def _ranked(self, probs: np.ndarray, top_k: int | None = None) -> RankedPrediction:
        # stable sort on -p keeps alphabetical app order for ties
        order = np.argsort(-probs, kind="stable")
        if top_k is not None:
            order = order[:top_k]
        return RankedPrediction(tuple((self.apps[i], float(probs[i])) for i in order))

    def rank_many(self, instances: Sequence[RecommendationInstance]) -> list[RankedPrediction]:
        return [self._ranked(p) for p in self.predict_proba(instances)]

    def recommend(self, user: str, t: int, history: Sequence[UsageEvent], top_k: int | None = None
                  ) -> RankedPrediction:
        """Rank apps for ``user`` at ``t`` from the history strictly before ``t``."""
        inst = RecommendationInstance(user, t, recent_apps(history, t, self.config.k), label="")
        return self._ranked(self.predict_proba([inst])[0], top_k)

    # -- persistence ----------------------------------------------------------

    def meta(self) -> dict:
        cfg = asdict(self.config)
        cfg["hidden"] = list(cfg["hidden"])
        return {"model": "neusa", "config": cfg, "apps": self.apps, "users": self.users,
                "app_counts": dict(sorted(self.app_counts.items())),
                "tz_offsets": dict(sorted(self.tz_offsets.items()))}

    def save(self, path):
        return nc.save_checkpoint(path, self.store, self.meta())

    @classmethod
    def load(cls, path) -> "NeuSA":
        store, meta = nc.load_checkpoint(path)
        return cls(meta["apps"], meta["users"], NeuSAConfig.from_dict(meta["config"]), meta["app_counts"],
                   store, meta.get("tz_offsets"))


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("-inf")


def build_model(train_instances: Sequence[RecommendationInstance], config: NeuSAConfig,
                tz_offsets: Mapping[str, int] | None = None, train_events: Sequence[UsageEvent] = ()) -> NeuSA:
    counts = Counter(i.label for i in train_instances)
    for inst in train_instances:
        counts.update(a for a in inst.window if a != PAD)
    model = NeuSA(sorted({i.label for i in train_instances}), sorted({i.user_id for i in train_instances}),
                  config, counts, tz_offsets=tz_offsets)
    if config.bin_usage_feature:
        model.bin_usage = BinUsage(train_events, tz_offsets or {}, config.bin_usage_today_only)
    return model


def mean_rr(model: NeuSA, instances: Sequence[RecommendationInstance]) -> float:
    if not instances:
        return 0.0
    P = model.predict_proba(instances)
    labels = np.array([model.class_index.get(i.label, -1) for i in instances])
    known = labels >= 0
    rr = np.zeros(len(instances))
    if known.any():
        p_true = P[known, labels[known]]
        # rank = 1 + number of strictly better apps + earlier-id ties
        better = (P[known] > p_true[:, None]).sum(axis=1)
        ids = np.arange(model.n_classes)
        ties = ((P[known] == p_true[:, None]) & (ids[None, :] < labels[known][:, None])).sum(axis=1)
        rr[known] = 1.0 / (1 + better + ties)
    return float(rr.mean())


def train(train_instances: Sequence[RecommendationInstance], config: NeuSAConfig | Mapping | None = None,
          validation: Sequence[RecommendationInstance] = (), model: NeuSA | None = None,
          tz_offsets: Mapping[str, int] | None = None, train_events: Sequence[UsageEvent] = ()
          ) -> tuple[NeuSA, TrainingLog]:
    """Minimize cross-entropy; keep the epoch with the best validation MRR."""
    if isinstance(config, Mapping):
        config = NeuSAConfig.from_dict(config)
    config = config or (model.config if model else NeuSAConfig())
    model = model or build_model(train_instances, config, tz_offsets, train_events)
    batch_all = model.encode(train_instances)
    usable = np.flatnonzero(batch_all["label"] >= 0)
    opt = nc.OptimizerState(config.optimizer, config.lr)
    rng = np.random.default_rng([config.seed, 4])
    history = TrainingLog()
    best = model.store.snapshot()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = usable[rng.permutation(len(usable))]
        losses = []
        for lo in range(0, len(order), config.batch):
            b = model._take(batch_all, order[lo:lo + config.batch])
            model.store.zero_grad()
            loss = model.loss(b, True, rng)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {lo}")
            try:
                nc.optimizer_step(model.store, opt)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch starting {lo}: {exc}") from exc
            losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else 0.0,
               "seconds": time.perf_counter() - t0}
        if validation:
            row["val_mrr"] = mean_rr(model, validation)
            if row["val_mrr"] > history.best_metric:
                history.best_metric, history.best_epoch = row["val_mrr"], epoch
                best = model.store.snapshot()
        else:
            history.best_epoch = epoch
            best = model.store.snapshot()
        log.info("neusa epoch %d loss %.4f %s", epoch, row["train_loss"],
                 f"val MRR {row['val_mrr']:.4f}" if validation else "")
        history.epochs.append(row)
    model.store.restore(best)
    return model, history


def evaluate_model(model: NeuSA, instances: Sequence[RecommendationInstance], system: str = "NeuSA"):
    ranked = model.rank_many(instances)
    return evaluate(system, ranked, [i.label for i in instances],
                    groups={"user": [i.user_id for i in instances], "app": [i.label for i in instances]})


ABLATIONS = {
    "NeuSA": dict(use_user=True, use_time=True),
    "NeuSA_w/o_user": dict(use_user=False, use_time=True),
    "NeuSA_w/o_time": dict(use_user=True, use_time=False),
    "NeuSA_w/o_user_w/o_time": dict(use_user=False, use_time=False),
}


def context_length_sweep(k_values: Sequence[int], train_segments, valid_segments, test_segments,
                         config: NeuSAConfig | None = None, tz_offsets=None) -> list[dict]:
    """Train one model per ``k`` with otherwise identical settings; report test metrics.

    All models are evaluated on the same positions: those with at least
    ``max(k_values)`` in-segment predecessors.
    """
    if not k_values or min(k_values) < 1:
        raise ValueError("k values must be >= 1")
    config = config or NeuSAConfig()
    start = max(k_values)
    rows = []
    for k in k_values:
        cfg = replace(config, k=k)
        tr = build_instances(train_segments, k, start)
        va = build_instances(valid_segments, k, start)
        te = build_instances(test_segments, k, start)
        model, hist = train(tr, cfg, va, tz_offsets=tz_offsets)
        res = evaluate_model(model, te, f"NeuSA_k={k}")
        rows.append({"k": k, "instances": res.count, "best_epoch": hist.best_epoch, **res.aggregates})
    return rows
