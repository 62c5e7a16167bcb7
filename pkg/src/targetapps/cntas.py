"""Context-aware neural target-app selection.

A query is a softmax-weighted sum of term embeddings, an app is a row of an
app matrix and the 24 h usage context is a probability-weighted sum of rows
of a second app matrix. The scorer is a two-hidden-layer ReLU network over
``[q*a, |q-a|, c*a, |c-a|]``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .context import UNK, UsageContextDistribution, distribution_matrix
from .dataio import QueryRecord, Vocabulary, tokenize
from .evalx import ndcg_at_k
from .ranking import RankedPrediction

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class CNTASConfig:
    d: int = 64
    hidden: tuple[int, int] = (128, 64)
    dropout: float = 0.2
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 10
    negatives: int = 4
    loss: str = "pointwise"
    optimizer: str = "adam"
    seed: int = 0
    use_context: bool = True
    restrict_to_user_apps: bool = False
    min_term_count: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.loss not in ("pointwise", "pairwise"):
            raise ValueError(f"loss must be pointwise or pairwise, got {self.loss!r}")
        if len(self.hidden) != 2:
            raise ValueError("hidden must list two layer widths")

    @classmethod
    def from_dict(cls, d: Mapping) -> "CNTASConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown CNTAS config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SelectionInstance:
    tokens: list[str]
    user_id: str
    timestamp: int
    target: str
    context: UsageContextDistribution = field(repr=False)


def make_instances(records: Sequence[QueryRecord], usage_index) -> list[SelectionInstance]:
    """Attach tokens and the 24 h usage context to each query record."""
    return [SelectionInstance(tokenize(r.query), r.user_id, r.timestamp, r.target_app,
                              usage_index.distribution(r.user_id, r.timestamp)) for r in records]


def _pad(id_lists: Sequence[Sequence[int]]):
    L = max(1, max((len(x) for x in id_lists), default=1))
    tok = np.zeros((len(id_lists), L), dtype=np.int64)
    mask = np.zeros((len(id_lists), L), dtype=bool)
    for i, ids in enumerate(id_lists):
        tok[i, :len(ids)] = ids
        mask[i, :len(ids)] = True
    return tok, mask


class CNTAS:
    def __init__(self, vocab: Vocabulary, apps: Sequence[str], config: CNTASConfig | None = None,
                 store: nc.ParameterStore | None = None):
        self.config = config or CNTASConfig()
        self.vocab = vocab
        if vocab.unk is None:
            raise ValueError("term vocabulary needs an UNK token")
        self.apps = sorted(apps)
        if not self.apps:
            raise ValueError("empty candidate app set")
        # row 0 of both app matrices is the UNK app
        self.app_index = {a: i + 1 for i, a in enumerate(self.apps)}
        self.head = "linear" if self.config.loss == "pointwise" else "sigmoid"
        self.user_apps: dict[str, set[str]] = {}
        self.store = store if store is not None else self._init_params()

    def _init_params(self) -> nc.ParameterStore:
        c = self.config
        rng = np.random.default_rng([c.seed, 1])
        n_rows = len(self.apps) + 1
        h1, h2 = c.hidden
        s = nc.ParameterStore()
        s.add("term_emb", nc.uniform_init(rng, (len(self.vocab), c.d)))
        s.add("term_weight", np.zeros(len(self.vocab)))
        s.add("app_emb", nc.uniform_init(rng, (n_rows, c.d)))
        s.add("ctx_app_emb", nc.uniform_init(rng, (n_rows, c.d)))
        s.add("W1", nc.glorot_init(rng, (h1, 4 * c.d)))
        s.add("b1", np.zeros(h1))
        s.add("W2", nc.glorot_init(rng, (h2, h1)))
        s.add("b2", np.zeros(h2))
        s.add("W3", nc.glorot_init(rng, (1, h2)))
        s.add("b3", np.zeros(1))
        return s

    # -- encoding ---------------------------------------------------------

    def token_ids(self, tokens: Iterable[str]) -> list[int]:
        return self.vocab.ids(tokens)

    def app_row(self, app: str) -> int:
        return self.app_index.get(app, 0)

    def context_matrix(self, dists: Sequence[UsageContextDistribution]) -> np.ndarray:
        return distribution_matrix(dists, self.app_index, len(self.apps) + 1, unk_row=0)

    # -- forward / backward --------------------------------------------------

    def represent_query(self, tok: np.ndarray, mask: np.ndarray):
        s = self.store
        weights = nc.softmax(s["term_weight"][tok], mask=mask)
        emb = s["term_emb"][tok]
        return np.einsum("bl,bld->bd", weights, emb), (tok, mask, weights, emb)

    def represent_context(self, P: np.ndarray) -> np.ndarray:
        if not self.config.use_context:
            return np.zeros((P.shape[0], self.config.d))
        return P @ self.store["ctx_app_emb"]

    @staticmethod
    def interaction(phi_q, phi_a, phi_c):
        return np.concatenate([phi_q * phi_a, np.abs(phi_q - phi_a), phi_c * phi_a, np.abs(phi_c - phi_a)], axis=-1)

    def _mlp(self, x, training: bool, rng):
        s, c = self.store, self.config
        z1 = nc.dense_forward(s["W1"], s["b1"], x)
        h1, m1 = nc.dropout(nc.relu(z1), c.dropout, training, rng)
        z2 = nc.dense_forward(s["W2"], s["b2"], h1)
        h2, m2 = nc.dropout(nc.relu(z2), c.dropout, training, rng)
        z3 = nc.dense_forward(s["W3"], s["b3"], h2)[:, 0]
        out = z3 if self.head == "linear" else nc.sigmoid(z3)
        return out, (x, z1, h1, m1, z2, h2, m2, out)

    def forward(self, tok, mask, app_rows, P, training: bool = False, rng=None):
        phi_q, q_cache = self.represent_query(tok, mask)
        phi_a = self.store["app_emb"][app_rows]
        phi_c = self.represent_context(P)
        out, mlp_cache = self._mlp(self.interaction(phi_q, phi_a, phi_c), training, rng)
        return out, (q_cache, app_rows, P, phi_q, phi_a, phi_c, mlp_cache)

    def backward(self, cache, dout: np.ndarray) -> None:
        """Accumulate parameter gradients for upstream gradient ``dout`` on the scores."""
        s, d = self.store, self.config.d
        (tok, mask, weights, emb), app_rows, P, phi_q, phi_a, phi_c, mlp = cache
        x, z1, h1, m1, z2, h2, m2, out = mlp
        dz3 = dout if self.head == "linear" else dout * out * (1.0 - out)
        dW3, db3, dh2 = nc.dense_backward(s["W3"], h2, dz3[:, None])
        dz2 = nc.relu_backward(z2, nc.dropout_backward(m2, dh2))
        dW2, db2, dh1 = nc.dense_backward(s["W2"], h1, dz2)
        dz1 = nc.relu_backward(z1, nc.dropout_backward(m1, dh1))
        dW1, db1, dx = nc.dense_backward(s["W1"], x, dz1)
        for name, g in (("W3", dW3), ("b3", db3), ("W2", dW2), ("b2", db2), ("W1", dW1), ("b1", db1)):
            s.grad(name)[...] += g
        dx1, dx2, dx3, dx4 = dx[:, :d], dx[:, d:2 * d], dx[:, 2 * d:3 * d], dx[:, 3 * d:]
        sq = np.sign(phi_q - phi_a)
        sc = np.sign(phi_c - phi_a)
        dphi_q = dx1 * phi_a + dx2 * sq
        dphi_a = dx1 * phi_q - dx2 * sq + dx3 * phi_c - dx4 * sc
        np.add.at(s.grad("app_emb"), app_rows, dphi_a)
        if self.config.use_context:
            s.grad("ctx_app_emb")[...] += P.T @ (dx3 * phi_a + dx4 * sc)
        d_emb = weights[..., None] * dphi_q[:, None, :]
        d_weight = nc.softmax_backward(weights, np.einsum("bld,bd->bl", emb, dphi_q))
        np.add.at(s.grad("term_emb"), tok[mask], d_emb[mask])
        np.add.at(s.grad("term_weight"), tok[mask], d_weight[mask])

    # -- inference ----------------------------------------------------------

    def score(self, tokens: Sequence[str], app: str, context: UsageContextDistribution) -> float:
        tok, mask = _pad([self.token_ids(tokens)])
        out, _ = self.forward(tok, mask, np.array([self.app_row(app)]), self.context_matrix([context]))
        return float(out[0])

    def score_matrix(self, token_lists: Sequence[Sequence[str]], contexts: Sequence[UsageContextDistribution],
                     chunk: int = 256) -> np.ndarray:
        """Scores of every candidate app for each query, shape ``(n_queries, n_apps)``."""
        n_apps = len(self.apps)
        rows = np.arange(1, n_apps + 1)
        out = np.zeros((len(token_lists), n_apps))
        for lo in range(0, len(token_lists), chunk):
            hi = min(lo + chunk, len(token_lists))
            tok, mask = _pad([self.token_ids(t) for t in token_lists[lo:hi]])
            phi_q, _ = self.represent_query(tok, mask)
            phi_c = self.represent_context(self.context_matrix(contexts[lo:hi]))
            phi_a = self.store["app_emb"][rows]
            B = hi - lo
            x = self.interaction(phi_q[:, None, :], phi_a[None, :, :], phi_c[:, None, :])
            scores, _ = self._mlp(x.reshape(B * n_apps, -1), False, None)
            out[lo:hi] = scores.reshape(B, n_apps)
        return out

    def _rank_row(self, scores: np.ndarray, candidates: Iterable[str] | None) -> RankedPrediction:
        pairs = [(a, float(s)) for a, s in zip(self.apps, scores)]
        if candidates is not None:
            allowed = set(candidates)
            pairs = [p for p in pairs if p[0] in allowed]
        return _sorted(pairs)

    def rank(self, tokens: Sequence[str], context: UsageContextDistribution,
             candidates: Iterable[str] | None = None, user: str | None = None) -> RankedPrediction:
        """Candidates by descending score, ties by ascending app id."""
        if candidates is None and self.config.restrict_to_user_apps and user in self.user_apps:
            candidates = self.user_apps[user]
        if candidates is not None:
            candidates = list(candidates)
            if not candidates:
                raise ValueError("empty candidate set")
            # apps outside the training set are scored through the UNK row
            if any(a not in self.app_index for a in candidates):
                tok, mask = _pad([self.token_ids(tokens)] * len(candidates))
                rows = np.array([self.app_row(a) for a in candidates])
                out, _ = self.forward(tok, mask, rows, self.context_matrix([context] * len(candidates)))
                return _sorted(list(zip(candidates, out.tolist())))
        scores = self.score_matrix([tokens], [context])[0]
        return self._rank_row(scores, candidates)

    def rank_many(self, instances: Sequence[SelectionInstance]) -> list[RankedPrediction]:
        S = self.score_matrix([i.tokens for i in instances], [i.context for i in instances])
        out = []
        for inst, row in zip(instances, S):
            cands = None
            if self.config.restrict_to_user_apps and inst.user_id in self.user_apps:
                cands = self.user_apps[inst.user_id]
            out.append(self._rank_row(row, cands))
        return out

    # -- persistence --------------------------------------------------------

    def meta(self) -> dict:
        cfg = asdict(self.config)
        cfg["hidden"] = list(cfg["hidden"])
        return {"model": "cntas", "config": cfg, "vocab": self.vocab.to_dict(), "apps": self.apps,
                "user_apps": {u: sorted(a) for u, a in sorted(self.user_apps.items())}}

    def save(self, path):
        return nc.save_checkpoint(path, self.store, self.meta())

    @classmethod
    def load(cls, path) -> "CNTAS":
        store, meta = nc.load_checkpoint(path)
        model = cls(Vocabulary.from_dict(meta["vocab"]), meta["apps"], CNTASConfig.from_dict(meta["config"]), store)
        model.user_apps = {u: set(a) for u, a in meta.get("user_apps", {}).items()}
        return model


def _sorted(pairs) -> RankedPrediction:
    return RankedPrediction(tuple(sorted(pairs, key=lambda p: (-p[1], p[0]))))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("-inf")


def build_model(train: Sequence[SelectionInstance], config: CNTASConfig) -> CNTAS:
    vocab = Vocabulary.build((i.tokens for i in train), reserved=(UNK,), unk=UNK, min_count=config.min_term_count)
    model = CNTAS(vocab, sorted({i.target for i in train}), config)
    for inst in train:
        model.user_apps.setdefault(inst.user_id, set()).add(inst.target)
    return model


def validation_ndcg3(model: CNTAS, instances: Sequence[SelectionInstance]) -> float:
    if not instances:
        return 0.0
    ranked = model.rank_many(instances)
    return float(np.mean([ndcg_at_k(r, i.target, 3) for r, i in zip(ranked, instances)]))


def _batch_arrays(model: CNTAS, instances: Sequence[SelectionInstance]):
    ids = [model.token_ids(i.tokens) for i in instances]
    P = model.context_matrix([i.context for i in instances])
    targets = np.array([model.app_row(i.target) for i in instances])
    return ids, P, targets


def _sample_negatives(rng, targets: np.ndarray, n_apps: int, m: int) -> np.ndarray:
    """``m`` uniform draws per target from rows ``1..n_apps`` excluding the target."""
    draws = rng.integers(1, n_apps, size=(len(targets), m))
    return draws + (draws >= targets[:, None])


def train(train_instances: Sequence[SelectionInstance], config: CNTASConfig | Mapping | None = None,
          validation: Sequence[SelectionInstance] = (), model: CNTAS | None = None) -> tuple[CNTAS, TrainingLog]:
    """Fit CNTAS with MSE (pointwise) or hinge (pairwise) loss.

    The parameters from the epoch with the best validation nDCG@3 are kept;
    without validation data the last epoch wins.
    """
    if isinstance(config, Mapping):
        config = CNTASConfig.from_dict(config)
    config = config or (model.config if model else CNTASConfig())
    model = model or build_model(train_instances, config)
    n_apps = len(model.apps)
    if n_apps < 2:
        raise ValueError("training needs at least two candidate apps")
    ids, P, targets = _batch_arrays(model, train_instances)
    keep = np.flatnonzero(targets > 0)
    opt = nc.OptimizerState(config.optimizer, config.lr)
    frozen = () if config.use_context else ("ctx_app_emb",)
    rng = np.random.default_rng([config.seed, 2])
    history = TrainingLog()
    best = model.store.snapshot()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        negs = _sample_negatives(rng, targets[keep], n_apps, config.negatives)
        if config.loss == "pointwise":
            inst = np.concatenate([keep, np.repeat(keep, config.negatives)])
            rows = np.concatenate([targets[keep], negs.reshape(-1)])
            labels = np.concatenate([np.ones(len(keep)), np.zeros(negs.size)])
            order = rng.permutation(len(inst))
            inst, rows, labels = inst[order], rows[order], labels[order]
        else:
            inst = np.repeat(keep, config.negatives)
            rows = np.repeat(targets[keep], config.negatives)
            neg_rows = negs.reshape(-1)
            order = rng.permutation(len(inst))
            inst, rows, neg_rows = inst[order], rows[order], neg_rows[order]
        losses = []
        for lo in range(0, len(inst), config.batch):
            sl = slice(lo, lo + config.batch)
            b_inst = inst[sl]
            tok, mask = _pad([ids[i] for i in b_inst])
            Pb = P[b_inst]
            model.store.zero_grad()
            if config.loss == "pointwise":
                out, cache = model.forward(tok, mask, rows[sl], Pb, True, rng)
                loss, dout = nc.mse(labels[sl], out)
                model.backward(cache, dout)
            else:
                B = len(b_inst)
                out, cache = model.forward(np.concatenate([tok, tok]), np.concatenate([mask, mask]),
                                           np.concatenate([rows[sl], neg_rows[sl]]), np.concatenate([Pb, Pb]),
                                           True, rng)
                loss, d1, d2 = nc.hinge_pair(np.ones(B), np.zeros(B), out[:B], out[B:])
                model.backward(cache, np.concatenate([d1, d2]))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {lo}")
            try:
                nc.optimizer_step(model.store, opt, frozen)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch starting {lo}: {exc}") from exc
            losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else 0.0,
               "seconds": time.perf_counter() - t0}
        if validation:
            row["val_ndcg@3"] = validation_ndcg3(model, validation)
            if row["val_ndcg@3"] > history.best_metric:
                history.best_metric, history.best_epoch = row["val_ndcg@3"], epoch
                best = model.store.snapshot()
        else:
            history.best_epoch = epoch
            best = model.store.snapshot()
        log.info("cntas epoch %d loss %.4f %s", epoch, row["train_loss"],
                 f"val nDCG@3 {row['val_ndcg@3']:.4f}" if validation else "")
        history.epochs.append(row)
    model.store.restore(best)
    return model, history


def train_pointwise(instances, config=None, validation=()):
    config = CNTASConfig.from_dict({**_as_dict(config), "loss": "pointwise"})
    return train(instances, config, validation)


def train_pairwise(instances, config=None, validation=()):
    config = CNTASConfig.from_dict({**_as_dict(config), "loss": "pairwise"})
    return train(instances, config, validation)


def _as_dict(config) -> dict:
    if config is None:
        return {}
    if isinstance(config, CNTASConfig):
        return asdict(config)
    return dict(config)


def validation_hinge(model: CNTAS, instances: Sequence[SelectionInstance], seed: int = 0, m: int = 4) -> float:
    """Mean hinge loss on sampled (target, non-target) pairs; used to monitor pairwise training."""
    ids, P, targets = _batch_arrays(model, instances)
    keep = np.flatnonzero(targets > 0)
    negs = _sample_negatives(np.random.default_rng(seed), targets[keep], len(model.apps), m).reshape(-1)
    inst = np.repeat(keep, m)
    tok, mask = _pad([ids[i] for i in inst])
    pos, _ = model.forward(tok, mask, np.repeat(targets[keep], m), P[inst])
    neg, _ = model.forward(tok, mask, negs, P[inst])
    return nc.hinge_pair(np.ones(len(inst)), np.zeros(len(inst)), pos, neg)[0]
