"""Command-line pipeline: synth, ingest, split, train, eval, analyze, predict.

Subcommands communicate only through files. A dataset directory holds
``queries.tsv``, ``usage.tsv`` and ``stats.tsv`` (any subset). Every run writes
``manifest.json`` next to its outputs with the effective configuration, the
seed, the package version and the argv needed to replay it.

Exit codes: 0 ok, 2 validation error (JSON on stderr), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, analysis, baselines, cntas, dataio, neusa, syngen
from .context import UsageIndex
from .evalx import evaluate, significance_table, write_results_json, write_results_tsv
from .ranking import RankedPrediction

log = logging.getLogger("targetapps")

OUTPUT_ROOT_ENV = "TARGETAPPS_OUTPUT_ROOT"
QUERY_SYSTEMS = ("oracle", "mfu", "querylm", "bm25", "knn_tfidf", "knn_awe")
USAGE_SYSTEMS = ("oracle", "mfu", "mru")


class ValidationError(Exception):
    """Bad arguments, configuration or input data (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


# ---------------------------------------------------------------------------
# helpers


def _out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, args, config: dict, inputs: Sequence[Path] = (), extra: dict | None = None):
    manifest = {
        "command": args.command,
        "argv": list(args.argv),
        "seed": 0 if args.seed is None else args.seed,
        "config": config,
        "versions": {"targetapps": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "inputs": {str(p): _sha256(p) for p in inputs if p.exists()},
        **(extra or {}),
    }
    _write_json(out / "manifest.json", manifest)


def _write_json(path: Path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, (set, tuple)):
        return sorted(o) if isinstance(o, set) else list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError("config file must hold a JSON object")
    return cfg


def _merge(defaults: dict, config: dict, flags: dict) -> dict:
    """flags > config file > defaults; ``None`` flags are treated as unset."""
    return {**defaults, **config, **{k: v for k, v in flags.items() if v is not None}}


def _build(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid {cls.__name__}: {exc}") from None


class Dataset:
    """Lazy access to the files of a dataset directory."""

    def __init__(self, root: str):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ValidationError(f"dataset directory not found: {root}")
        self._cache: dict = {}

    def path(self, name: str) -> Path:
        return self.root / f"{name}.tsv"

    def has(self, name: str) -> bool:
        return self.path(name).exists()

    def _parse(self, name, parser):
        if name not in self._cache:
            if not self.has(name):
                raise ValidationError(f"{self.path(name)} is missing")
            try:
                records, errors = parser(self.path(name))
            except dataio.SchemaError as exc:
                raise ValidationError(str(exc)) from None
            if errors:
                raise ValidationError(f"{self.path(name)}: {len(errors)} malformed lines "
                                      f"(first at line {errors[0].line}: {errors[0].message}); run ingest first")
            self._cache[name] = records
        return self._cache[name]

    @property
    def queries(self) -> list[dataio.QueryRecord]:
        return self._parse("queries", dataio.parse_query_log)

    @property
    def usage(self) -> list[dataio.UsageEvent]:
        return self._parse("usage", dataio.parse_usage_log)

    @property
    def stats(self) -> list[dataio.StatsRecord]:
        return self._parse("stats", dataio.parse_stats_log) if self.has("stats") else []

    @property
    def launches(self) -> list[dataio.UsageEvent]:
        """Launch events in file order; the records an ``lsapp`` split indexes."""
        if "launches" not in self._cache:
            self._cache["launches"] = dataio.launches(self.usage)
        return self._cache["launches"]

    def usage_index(self) -> UsageIndex:
        events = self.usage if self.has("usage") else []
        return UsageIndex(events, self.stats)

    def truth(self) -> syngen.GroundTruth | None:
        p = self.root / "ground_truth.json"
        return syngen.GroundTruth.load(p) if p.exists() else None

    def inputs(self) -> list[Path]:
        return [self.path(n) for n in ("queries", "usage", "stats") if self.has(n)]


def _split_path(path: str) -> Path:
    """A split file, or a directory written by ``split`` holding ``split.tsv``."""
    p = Path(path)
    return p / "split.tsv" if p.is_dir() else p


def _load_split(path: str) -> dataio.DatasetSplit:
    path = _split_path(path)
    try:
        return dataio.DatasetSplit.load(path)
    except FileNotFoundError:
        raise ValidationError(f"split file not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise ValidationError(f"bad split file {path}: {exc}") from None


def _task(split: dataio.DatasetSplit) -> str:
    return "recommendation" if split.name == "lsapp" else "selection"


def _check_split(split: dataio.DatasetSplit, n_records: int):
    idx = split.train + split.validation + split.test
    if idx and (max(idx) >= n_records or min(idx) < 0):
        raise ValidationError(f"split indexes {max(idx) + 1} records but the dataset has {n_records}")


def _selection_parts(data: Dataset, split: dataio.DatasetSplit):
    records = data.queries
    _check_split(split, len(records))
    index = data.usage_index()
    parts = {}
    for p in dataio.PARTS:
        ids = split.part(p)
        parts[p] = (ids, cntas.make_instances([records[i] for i in ids], index))
    return parts


def _recommendation_parts(data: Dataset, split: dataio.DatasetSplit, k: int):
    records = data.launches
    _check_split(split, len(records))
    position = {id(r): i for i, r in enumerate(records)}
    parts = {}
    for p in dataio.PARTS:
        inst = neusa.build_instances(dataio.user_segments(records, split, p), k)
        parts[p] = ([position[id(i.record)] for i in inst], inst)
    return parts


# ---------------------------------------------------------------------------
# subcommands


SYNTH_FLAGS = {"users": "num_users", "apps": "num_apps", "events": "num_events", "order": "order",
               "chain": "chain", "user_chains": "user_chains", "time_strength": "time_strength",
               "time_boost": "time_boost", "queries_per_user": "queries_per_user", "mixing": "mixing",
               "context_correlation": "context_correlation", "zipf": "zipf"}


def cmd_synth(args) -> int:
    flags = {field: getattr(args, flag) for flag, field in SYNTH_FLAGS.items()}
    flags["seed"] = args.seed
    values = _merge(asdict(syngen.GeneratorSpec()), _load_config(args.config), flags)
    spec = _build(syngen.GeneratorSpec, values)
    args.seed = spec.seed
    out = _out_dir(args.out)
    written = syngen.write_dataset(out, spec, usage=not args.no_usage, queries=not args.no_queries)
    write_manifest(out, args, asdict(spec), extra={"written": written})
    log.info("synthetic dataset written to %s: %s", out, written)
    return 0


def cmd_ingest(args) -> int:
    if not (args.queries or args.usage or args.stats):
        raise ValidationError("ingest needs at least one of --queries, --usage, --stats")
    out = _out_dir(args.out)
    report: dict = {}
    inputs = []

    def parse(path, parser, name):
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"{name} file not found: {path}")
        inputs.append(p)
        try:
            records, errors = parser(p)
        except dataio.SchemaError as exc:
            raise ValidationError(str(exc)) from None
        report[name] = {"read": len(records), "errors": [e.to_dict() for e in errors]}
        if errors and args.strict:
            raise ValidationError(f"{path}: {len(errors)} malformed lines (first at line {errors[0].line})")
        return records

    if args.queries:
        queries = dataio.sort_events(parse(args.queries, dataio.parse_query_log, "queries"))
        dataio.write_query_log(out / "queries.tsv", queries)
        report["queries"]["written"] = len(queries)
    if args.usage:
        events = dataio.sort_events(parse(args.usage, dataio.parse_usage_log, "usage"))
        if args.top_apps:
            events = dataio.filter_top_apps(events, args.top_apps)
        launch = dataio.dedup_usage(dataio.launches(events), args.dedup_window)
        other = [e for e in events if e.kind != "launch"]
        events = dataio.sort_events(launch + other)
        dataio.write_usage_log(out / "usage.tsv", events)
        report["usage"]["written"] = len(events)
        report["usage"]["launches"] = len(launch)
    if args.stats:
        stats = sorted(parse(args.stats, dataio.parse_stats_log, "stats"),
                       key=lambda s: (s.user_id, s.snapshot_timestamp, s.app_id))
        dataio.write_stats_log(out / "stats.tsv", stats)
        report["stats"]["written"] = len(stats)
    _write_json(out / "ingest_report.json", report)
    write_manifest(out, args, {"dedup_window": args.dedup_window, "top_apps": args.top_apps,
                               "strict": args.strict}, inputs)
    return 0


def cmd_split(args) -> int:
    data = Dataset(args.data)
    args.seed = _load_config(args.config).get("seed", 0) if args.seed is None else args.seed
    ratios = tuple(args.ratios)
    try:
        if args.strategy == "lsapp":
            split = dataio.split_lsapp(data.launches, ratios)
        elif args.strategy == "istas_t":
            split = dataio.split_istas_t(data.queries, ratios)
        else:
            split = dataio.split_istas_r(data.queries, ratios, args.seed)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    out = _out_dir(args.out)
    split.save(out / "split.tsv")
    write_manifest(out, args, {"strategy": args.strategy, "ratios": list(ratios)}, data.inputs(),
                   {"sizes": split.sizes()})
    return 0


CNTAS_FLAGS = ("epochs", "lr", "batch", "dropout", "loss", "negatives", "optimizer")
NEUSA_FLAGS = ("epochs", "lr", "batch", "dropout", "optimizer", "k")


def _model_config(args):
    cfg = _load_config(args.config)
    if args.model == "cntas":
        flags = {f: getattr(args, f) for f in CNTAS_FLAGS}
        flags.update(d=args.dim, seed=args.seed, hidden=args.hidden,
                     use_context=False if args.no_context else None)
        merged = _merge(asdict(cntas.CNTASConfig()), cfg, flags)
        return _build(cntas.CNTASConfig, merged)
    flags = {f: getattr(args, f) for f in NEUSA_FLAGS}
    flags.update(d=args.dim, seed=args.seed, hidden=args.hidden,
                 use_user=False if args.no_user else None, use_time=False if args.no_time else None,
                 bin_usage_feature=True if args.bin_usage else None)
    defaults = asdict(neusa.NeuSAConfig())
    defaults.update(h=None, d_u=None, d_t=None)  # derived from d unless set explicitly
    return _build(neusa.NeuSAConfig, _merge(defaults, cfg, flags))


def _config_dict(config) -> dict:
    d = asdict(config)
    d["hidden"] = list(d["hidden"])
    return d


def cmd_train(args) -> int:
    data = Dataset(args.data)
    split = _load_split(args.split)
    config = _model_config(args)
    args.seed = config.seed
    task = _task(split)
    if (args.model == "neusa") != (task == "recommendation"):
        raise ValidationError(f"model {args.model} does not fit a {split.name} split")
    if args.model == "cntas":
        parts = _selection_parts(data, split)
        if not parts["train"][1]:
            raise ValidationError("empty training part")
        model, history = cntas.train(parts["train"][1], config, parts["validation"][1])
    else:
        parts = _recommendation_parts(data, split, config.k)
        if not parts["train"][1]:
            raise ValidationError("empty training part")
        train_events = [data.launches[i] for i in split.train] if config.bin_usage_feature else ()
        model, history = neusa.train(parts["train"][1], config, parts["validation"][1],
                                     train_events=train_events)
    out = _out_dir(args.out)
    model.save(out / "model")
    metric = "val_ndcg@3" if args.model == "cntas" else "val_mrr"
    with open(out / "training_curve.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"epoch\ttrain_loss\t{metric}\n")
        for row in history.epochs:
            fh.write(f"{row['epoch']}\t{row['train_loss']:.8f}\t{row.get(metric, float('nan')):.8f}\n")
    write_manifest(out, args, {"model": args.model, **_config_dict(config)},
                   [*data.inputs(), _split_path(args.split)],
                   {"best_epoch": history.best_epoch, "split": split.name})
    return 0


def _load_model(path: str):
    base = Path(path)
    base = base / "model" if base.is_dir() else base
    meta_path = base.with_suffix(".json")
    if not meta_path.exists():
        raise ValidationError(f"checkpoint not found: {meta_path}")
    try:
        kind = json.loads(meta_path.read_text(encoding="utf-8")).get("meta", {}).get("model")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{meta_path} is not valid JSON: {exc}") from None
    if kind == "cntas":
        return cntas.CNTAS.load(base)
    if kind == "neusa":
        return neusa.NeuSA.load(base)
    raise ValidationError(f"{meta_path} does not describe a known model")


def read_predictions(path) -> dict[str, list[str]]:
    """``id<TAB>app app app ...`` lines, best first."""
    preds = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or (lineno == 1 and line.startswith("id\t")):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{path}:{lineno}: expected 'id<TAB>ranking'")
            preds[parts[0]] = parts[1].split()
    return preds


def write_predictions(path, ids: Sequence, rankings: Sequence[RankedPrediction]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id\tranking\n")
        for i, r in zip(ids, rankings):
            fh.write(f"{i}\t{' '.join(r.apps)}\n")


def _selection_rankers(data, parts, systems, args, models, tuned):
    train_ids, train = parts["train"]
    _, valid = parts["validation"]
    counts = Counter(i.target for i in train)
    if not counts:
        raise ValidationError("empty training part")
    mfu = baselines.mfu_rank(counts)
    docs = baselines.AppDocuments.build([i.tokens for i in train], [i.target for i in train])
    truth = data.truth()
    rankers = {}
    for name in systems:
        base = name[:-3] if name.endswith("-cr") else name
        if base == "oracle":
            if truth is None:
                raise ValidationError("oracle needs ground_truth.json in the dataset directory")
            fn = lambda insts, truth=truth: [syngen.bayes_oracle(truth, i) for i in insts]
        elif base == "mfu":
            fn = lambda insts: [mfu] * len(insts)
        elif base == "querylm":
            fn = lambda insts: [baselines.querylm_rank(i.tokens, docs, args.mu) for i in insts]
        elif base == "bm25":
            fn = lambda insts: [baselines.bm25_rank(i.tokens, docs) for i in insts]
        elif base in ("knn_tfidf", "knn_awe"):
            toks, labels = [i.tokens for i in train], [i.target for i in train]
            if base == "knn_tfidf":
                knn = baselines.KNNTfidf(toks, labels, mfu)
            else:
                if not args.embeddings:
                    raise ValidationError("knn_awe needs --embeddings")
                try:
                    table = baselines.EmbeddingTable.load(args.embeddings)
                except FileNotFoundError as exc:
                    raise ValidationError(str(exc)) from None
                knn = baselines.KNNAwe(toks, labels, table, mfu)
            if valid:
                tuned[f"{base}.K"] = baselines.tune_k(knn, [i.tokens for i in valid], [i.target for i in valid])[0]
            fn = lambda insts, knn=knn: knn.rank_many([i.tokens for i in insts])
        elif base in models:
            fn = lambda insts, m=models[base]: m.rank_many(insts)
        else:
            raise ValidationError(f"unknown system {name!r} for a selection split")
        if name.endswith("-cr"):
            fn = _with_cr(fn, valid, name, tuned)
        rankers[name] = fn
    return rankers


def _with_cr(fn, valid, name, tuned):
    lam = 0.5
    if valid:
        lam = baselines.tune_lambda(fn(valid), [i.context for i in valid], [_gold(i) for i in valid])[0]
    tuned[f"{name}.lambda"] = lam
    return lambda insts: [baselines.context_filter_cr(r, i.context, lam) for r, i in zip(fn(insts), insts)]


def _gold(inst) -> str:
    return inst.target if hasattr(inst, "target") else inst.label


def _recommendation_rankers(data, parts, systems, models, split):
    train_events = [data.launches[i] for i in split.train]
    counts = Counter(e.app_id for e in train_events)
    if not counts:
        raise ValidationError("empty training part")
    mfu = baselines.mfu_rank(counts)
    mru = baselines.MRUIndex(data.launches, mfu)
    truth = data.truth()
    rankers = {}
    for name in systems:
        if name == "oracle":
            if truth is None:
                raise ValidationError("oracle needs ground_truth.json in the dataset directory")
            rankers[name] = lambda insts, truth=truth: [syngen.bayes_oracle(truth, i) for i in insts]
        elif name == "mfu":
            rankers[name] = lambda insts: [mfu] * len(insts)
        elif name == "mru":
            rankers[name] = lambda insts: [mru.rank(i.user_id, i.timestamp) for i in insts]
        elif name in models:
            rankers[name] = lambda insts, m=models[name]: m.rank_many(insts)
        else:
            raise ValidationError(f"unknown system {name!r} for an lsapp split")
    return rankers


def cmd_eval(args) -> int:
    data = Dataset(args.data)
    split = _load_split(args.split)
    if args.seed is None:
        # evaluation draws no randomness of its own; record where the data partition came from
        args.seed = _load_config(args.config).get("seed", split.seed)
    if args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    models = {}
    for spec in args.checkpoint or []:
        name, _, path = spec.rpartition("=")
        model = _load_model(path)
        name = name or ("CNTAS" if isinstance(model, cntas.CNTAS) else "NeuSA")
        models[name] = model
    systems = list(args.systems or []) + [m for m in models if m not in (args.systems or [])]
    if not systems and not args.predictions:
        raise ValidationError("nothing to evaluate: give --systems, --checkpoint or --predictions")
    task = _task(split)
    if task == "selection":
        parts = _selection_parts(data, split)
    else:
        ks = {m.config.k for m in models.values() if isinstance(m, neusa.NeuSA)}
        if any(isinstance(m, cntas.CNTAS) for m in models.values()):
            raise ValidationError("CNTAS checkpoints need a selection split")
        if len(ks) > 1:
            raise ValidationError("all NeuSA checkpoints in one eval must share k")
        k = ks.pop() if ks else args.k
        parts = _recommendation_parts(data, split, k)
        for m in models.values():
            if m.config.bin_usage_feature:
                m.bin_usage = neusa.BinUsage([data.launches[i] for i in split.train], m.tz_offsets,
                                             m.config.bin_usage_today_only)
    if task == "selection" and any(isinstance(m, neusa.NeuSA) for m in models.values()):
        raise ValidationError("NeuSA checkpoints need an lsapp split")
    ids, instances = parts[args.part]
    if not instances:
        raise ValidationError(f"the {args.part} part has no instances")
    gold = [_gold(i) for i in instances]
    groups = {"user": [i.user_id for i in instances], "app": gold}
    if task == "selection":
        groups["length"] = [len(i.tokens) for i in instances]
    tuned: dict = {}
    if task == "selection":
        rankers = _selection_rankers(data, parts, systems, args, models, tuned)
    else:
        rankers = _recommendation_rankers(data, parts, systems, models, split)
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        ranked = dict(zip(rankers, pool.map(lambda fn: fn(instances), rankers.values())))

    out = _out_dir(args.out)
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    results = []
    for name, rk in ranked.items():
        write_predictions(pred_dir / f"{_safe(name)}.tsv", ids, rk)
        results.append(evaluate(name, rk, gold, groups, ids))
    for path in args.predictions or []:
        preds = read_predictions(path)
        missing = [i for i in ids if str(i) not in preds]
        if missing:
            raise ValidationError(f"{path}: no prediction for {len(missing)} instances (e.g. id {missing[0]})")
        results.append(evaluate(Path(path).stem, [preds[str(i)] for i in ids], gold, groups, ids))

    write_results_tsv(out / "results.tsv", results)
    write_results_json(out / "results.json", results, {"tuned": tuned, "part": args.part, "split": split.name})
    reference = next((r for r in results if r.system == args.reference), None)
    if reference is None and models:
        reference = next(r for r in results if r.system in models)
    if reference is not None and len(results) > 1:
        rows = significance_table([r for r in results if r is not reference], reference)
        with open(out / "significance.tsv", "w", encoding="utf-8", newline="\n") as fh:
            cols = ["system", "baseline", "metric", "t", "p", "significant", "comparisons"]
            fh.write("\t".join(cols) + "\n")
            for row in rows:
                fh.write("\t".join(f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c]) for c in cols)
                         + "\n")
    inputs = [*data.inputs(), _split_path(args.split), *[Path(p) for p in args.predictions or []]]
    write_manifest(out, args, {"systems": systems, "part": args.part, "reference": args.reference,
                               "mu": args.mu, "k": args.k}, inputs, {"tuned": tuned})
    return 0


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in name)


def cmd_analyze(args) -> int:
    data = Dataset(args.data)
    out = _out_dir(args.out)
    categories = None
    if args.categories:
        if not Path(args.categories).exists():
            raise ValidationError(f"category map not found: {args.categories}")
        categories = dataio.parse_category_map(args.categories)
    queries = data.queries if data.has("queries") else None
    events = data.usage if data.has("usage") else None
    if queries is None and events is None:
        raise ValidationError(f"{data.root} holds neither queries.tsv nor usage.tsv")
    _write_json(out / "descriptive_stats.json", analysis.descriptive_stats(queries, events, args.session_gap))
    if queries:
        by_app: dict[str, list] = {}
        for q in queries:
            by_app.setdefault(q.target_app, []).append(dataio.tokenize(q.query))
        if len(queries) >= 2:
            report = analysis.overlap_report(by_app)
            _write_json(out / "query_overlap.json", {a: {str(t): v for t, v in r.items()} for a, r in report.items()})
        hist = analysis.context_rank_histogram(queries, data.usage_index(), args.max_rank)
        _write_json(out / "context_ranks.json", {**hist.to_dict(), "rank1_fraction": hist.fraction(1)})
    if events:
        sessions = dataio.segment_sessions(dataio.sort_events(dataio.launches(events)), args.session_gap)
        analysis.markov_transitions(sessions, "app", threshold=args.threshold).write_edges(out / "transitions_app.tsv")
        co = analysis.cooccurrence(sessions)
        analysis.write_matrix_tsv(out / "cooccurrence.tsv", co.apps, co.display)
        if categories is not None:
            analysis.markov_transitions(sessions, "category", categories, args.threshold).write_edges(
                out / "transitions_category.tsv")
            cco = analysis.cooccurrence(sessions, categories)
            analysis.write_matrix_tsv(out / "cooccurrence_category.tsv", cco.apps, cco.display)
    inputs = data.inputs() + ([Path(args.categories)] if args.categories else [])
    write_manifest(out, args, {"session_gap": args.session_gap, "threshold": args.threshold,
                               "max_rank": args.max_rank}, inputs)
    return 0


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint)
    data = Dataset(args.data) if args.data else None
    if isinstance(model, cntas.CNTAS):
        if args.query is None:
            raise ValidationError("CNTAS prediction needs --query")
        index = data.usage_index() if data else UsageIndex()
        ctx = index.distribution(args.user, args.time)
        ranked = model.rank(dataio.tokenize(args.query), ctx, user=args.user)
    else:
        history = []
        if data:
            history = [e for e in dataio.sort_events(data.launches) if e.user_id == args.user]
        if args.history:
            history = sorted(history + [dataio.UsageEvent(args.user, args.time - len(args.history) + i, a)
                                        for i, a in enumerate(args.history)], key=lambda e: e.timestamp)
        ranked = model.recommend(args.user, args.time, history)
    payload = {"user": args.user, "time": args.time, "ranking": [[a, s] for a, s in ranked.top(args.top_k).items]}
    text = json.dumps(payload, indent=1, sort_keys=True)
    if args.out:
        out = _out_dir(args.out)
        (out / "prediction.json").write_text(text + "\n", encoding="utf-8")
        write_manifest(out, args, {"checkpoint": args.checkpoint, "top_k": args.top_k})
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="targetapps", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, help="master seed (default: config file value, else 0)")
        sp.add_argument("--jobs", type=int, default=1, help="worker cap for parallel steps")
        sp.add_argument("--config", help="JSON file with configuration values")
        sp.add_argument("--out", required=out_required, help=f"output directory (relative to ${OUTPUT_ROOT_ENV})")

    s = sub.add_parser("synth", help="write a synthetic dataset with known optima")
    common(s)
    s.add_argument("--users", type=int)
    s.add_argument("--apps", type=int)
    s.add_argument("--events", type=int)
    s.add_argument("--order", type=int, choices=(1, 3))
    s.add_argument("--chain", choices=syngen.CHAIN_KINDS)
    s.add_argument("--user-chains", type=int)
    s.add_argument("--time-strength", type=float)
    s.add_argument("--time-boost", type=float)
    s.add_argument("--queries-per-user", type=int)
    s.add_argument("--mixing", type=float)
    s.add_argument("--context-correlation", type=float)
    s.add_argument("--zipf", type=float)
    s.add_argument("--no-usage", action="store_true")
    s.add_argument("--no-queries", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="validate and normalize raw TSV logs")
    common(s)
    s.add_argument("--queries")
    s.add_argument("--usage")
    s.add_argument("--stats")
    s.add_argument("--dedup-window", type=int, default=dataio.DEDUP_WINDOW)
    s.add_argument("--top-apps", type=int, help="keep only the N most used apps")
    s.add_argument("--strict", action="store_true", help="fail on any malformed line")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", help="write a train/validation/test split")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--strategy", choices=dataio.SPLIT_NAMES, required=True)
    s.add_argument("--ratios", type=float, nargs=3, default=(0.7, 0.1, 0.2))
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train CNTAS or NeuSA")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--model", choices=("cntas", "neusa"), required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--hidden", type=int, nargs=2)
    s.add_argument("--dropout", type=float)
    s.add_argument("--optimizer", choices=("adam", "sgd"))
    s.add_argument("--loss", choices=("pointwise", "pairwise"))
    s.add_argument("--negatives", type=int)
    s.add_argument("--no-context", action="store_true")
    s.add_argument("--k", type=int)
    s.add_argument("--no-user", action="store_true")
    s.add_argument("--no-time", action="store_true")
    s.add_argument("--bin-usage", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate models, baselines or prediction files")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--systems", nargs="*",
                   help=f"baselines: {', '.join(QUERY_SYSTEMS)} (selection, append -cr for the context filter) "
                        f"or {', '.join(USAGE_SYSTEMS)} (recommendation)")
    s.add_argument("--checkpoint", action="append", help="[NAME=]PATH of a trained model, repeatable")
    s.add_argument("--predictions", action="append", help="TSV of id<TAB>ranked apps, repeatable")
    s.add_argument("--part", choices=dataio.PARTS, default="test")
    s.add_argument("--reference", help="system tested against all others")
    s.add_argument("--embeddings", help="word vectors for knn_awe")
    s.add_argument("--mu", type=float, default=2000.0)
    s.add_argument("--k", type=int, default=9, help="window length when no NeuSA checkpoint is given")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", help="descriptive statistics and log analyses")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--categories", help="TSV app_id<TAB>category")
    s.add_argument("--session-gap", type=int, default=dataio.SESSION_GAP)
    s.add_argument("--threshold", type=float, default=0.05)
    s.add_argument("--max-rank", type=int, default=10)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("predict", help="rank apps for one ad-hoc input")
    common(s, out_required=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--user", required=True)
    s.add_argument("--time", type=int, required=True)
    s.add_argument("--query")
    s.add_argument("--history", nargs="*", help="previous apps, oldest first")
    s.add_argument("--data", help="dataset directory supplying usage context or history")
    s.add_argument("--top-k", type=int, default=5)
    s.set_defaults(func=cmd_predict)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        _fail(2, "validation", str(exc))
        return 2
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ValidationError as exc:
        _fail(2, "validation", str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        _fail(3, "runtime", f"{type(exc).__name__}: {exc}")
        return 3


def _fail(code: int, kind: str, message: str):
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
