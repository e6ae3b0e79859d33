"""Training loop with early stopping, plus the experiment drivers: the
single-source zero-shot grid, leave-one-language-out, and learning curves
with added target-language data."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import Sentence
from .embeddings import EmbeddingTable
from .errors import ConfigError, NumericError
from .evaluate import EvalReport, exact_span_f1
from .iob import tags_to_spans
from .model import (
    ModelConfig,
    ModelParams,
    decode_tags,
    forward,
    init_model,
    loss_and_gradients,
    pad_batch,
    sentence_matrix,
    tag_ids,
)
from .tensor import LOG_FLOOR, Adam, AdamConfig, make_rng

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = tuple(range(10))
DEFAULT_CURVE_SIZES = (0, 50, 100, 200, 500, 1000, "all")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    val_fraction: float = 0.2
    seeds: tuple = DEFAULT_SEEDS
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigError("patience must lie in [0, max_epochs]")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "adam" in d and not isinstance(d["adam"], AdamConfig):
            d["adam"] = AdamConfig(**d["adam"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class RunRecord:
    source_langs: list
    target_lang: str | None
    seed: int
    epochs_trained: int = 0
    best_val_f1: float = 0.0
    best_epoch: int = 0
    test_f1: float | None = None
    test_counts: list | None = None
    history: list = field(default_factory=list)
    failure: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# --------------------------------------------------------------------------
# data handling


def split_train_val(dataset: Sequence, fraction: float, seed: int):
    """Uniform random split without replacement: (train, val)."""
    n = len(dataset)
    if n < 5:
        raise ConfigError(f"need at least 5 sentences to split, got {n}")
    n_val = int(round(n * fraction))
    if n_val == 0 or n_val == n:
        raise ConfigError(f"fraction {fraction} leaves an empty split for {n} sentences")
    perm = make_rng(seed, "split").permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [dataset[i] for i in range(n) if i not in val_idx]
    val = [dataset[i] for i in range(n) if i in val_idx]
    return train, val


def concat_sources(train_sets: Sequence[tuple[str, Sequence[Sentence]]]) -> list[Sentence]:
    """Concatenate per-language sets in language order, so the result does
    not depend on how the sources were listed."""
    out: list[Sentence] = []
    for _, sents in sorted(train_sets, key=lambda p: p[0]):
        out.extend(s for s in sents if len(s) > 0)
    return out


def make_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, bucket by length, then shuffle the bucket order."""
    perm = rng.permutation(len(lengths))
    ordered = sorted(perm.tolist(), key=lambda i: lengths[i])
    batches = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _scored_pass(params, cfg, sentences, mats, batch_size=64):
    """Spans for every sentence plus the mean token loss (no dropout)."""
    spans, total, count = {}, 0.0, 0
    order = sorted(range(len(sentences)), key=lambda i: len(sentences[i]))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        X, mask, gold = pad_batch([mats[i] for i in idx], [tag_ids(sentences[i].tags) for i in idx])
        q, _ = forward(params, cfg, X, mask)
        q_gold = np.take_along_axis(q, np.where(mask, gold, 0)[..., None], axis=-1)[..., 0]
        total += float(-np.log(np.maximum(q_gold[mask], LOG_FLOOR)).sum())
        count += int(mask.sum())
        for b, i in enumerate(idx):
            s = sentences[i]
            spans[s.id] = tags_to_spans(s.tokens, decode_tags(q[b, : len(s)]), s.text)
    return spans, (total / count if count else 0.0)


def evaluate_corpus(params, cfg, tables, sentences, mats=None) -> EvalReport:
    sentences = [s for s in sentences if len(s) > 0]
    if not sentences:
        return EvalReport(0, 0, 0)
    if mats is None:
        mats = [sentence_matrix(s, tables, cfg) for s in sentences]
    pred, _ = _scored_pass(params, cfg, sentences, mats)
    gold = {s.id: s.targets for s in sentences}
    return exact_span_f1(gold, pred)


# --------------------------------------------------------------------------
# training


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    train_sets: Sequence[tuple[str, Sequence[Sentence]]],
    tables: Mapping[str, EmbeddingTable],
    seed: int,
    test: tuple[str, Sequence[Sentence]] | None = None,
) -> tuple[ModelParams, RunRecord]:
    """Train one model with early stopping on validation exact-span F1.

    Validation ties are broken by lower validation loss. The parameters of
    the best epoch are returned.
    """
    data = concat_sources(train_sets)
    if not data:
        raise ConfigError("no training sentences")
    record = RunRecord(sorted({lang for lang, s in train_sets if len(s)}), test[0] if test else None, seed)
    tr, val = split_train_val(data, cfg.val_fraction, seed)
    tr_mats = [sentence_matrix(s, tables, model_cfg) for s in tr]
    val_mats = [sentence_matrix(s, tables, model_cfg) for s in val]
    tr_gold = [tag_ids(s.tags) for s in tr]
    embed_dim = tr_mats[0].shape[1]

    params = init_model(model_cfg, embed_dim, seed)
    best = params.copy()
    best_key = (-1.0, math.inf)
    since_best = 0
    opt = Adam(cfg.adam)
    lengths = [len(s) for s in tr]
    for epoch in range(1, cfg.max_epochs + 1):
        shuffle_rng = make_rng(seed, "shuffle", epoch)
        drop_rng = make_rng(seed, "dropout", epoch)
        losses = []
        try:
            for batch in make_batches(lengths, cfg.batch_size, shuffle_rng):
                X, mask, gold = pad_batch([tr_mats[i] for i in batch], [tr_gold[i] for i in batch])
                loss, grads = loss_and_gradients(
                    params, model_cfg, X, mask, gold, train=True, rng=drop_rng, ids=[tr[i].id for i in batch]
                )
                opt.step(params, grads)
                losses.append(loss)
        except NumericError as exc:
            logger.error("run seed=%d diverged in epoch %d: %s", seed, epoch, exc)
            record.failure = f"epoch {epoch}: {exc}"
            break
        pred, val_loss = _scored_pass(params, model_cfg, val, val_mats)
        val_f1 = exact_span_f1({s.id: s.targets for s in val}, pred).f1
        record.epochs_trained = epoch
        record.history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_f1": val_f1, "val_loss": val_loss}
        )
        logger.debug("seed %d epoch %d loss %.4f val F1 %.4f", seed, epoch, np.mean(losses), val_f1)
        if val_f1 > best_key[0] or (val_f1 == best_key[0] and val_loss < best_key[1]):
            best_key = (val_f1, val_loss)
            best = params.copy()
            record.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if since_best >= cfg.patience:
            break
    record.best_val_f1 = max(best_key[0], 0.0)
    if test is not None:
        rep = evaluate_corpus(best, model_cfg, tables, test[1])
        record.test_f1 = rep.f1
        record.test_counts = [rep.true_positives, rep.predicted_count, rep.gold_count]
    return best, record


# --------------------------------------------------------------------------
# experiment plumbing

LangData = Mapping[str, tuple[Sequence[Sentence], Sequence[Sentence]]]


@dataclass(frozen=True)
class RunTask:
    """One training run: ``sources`` holds (language, size) pairs where size
    None means the full training set and an int a seeded subsample."""

    key: str
    sources: tuple
    targets: tuple
    seed: int


_CONTEXT: dict = {}


def _init_worker(context):
    _CONTEXT.clear()
    _CONTEXT.update(context)


def subsample(sentences: Sequence[Sentence], size: int, seed: int, language: str) -> list[Sentence]:
    """First ``size`` items of a seeded permutation, so smaller subsamples
    are prefixes of larger ones."""
    if size > len(sentences):
        raise ConfigError(f"requested {size} {language} sentences, only {len(sentences)} available")
    perm = make_rng(seed, "subsample", language).permutation(len(sentences))
    return [sentences[i] for i in perm[:size]]


def _execute(task: RunTask) -> list[RunRecord]:
    data, tables = _CONTEXT["data"], _CONTEXT["tables"]
    model_cfg, cfg = _CONTEXT["model_cfg"], _CONTEXT["train_cfg"]
    train_sets = []
    for lang, size in task.sources:
        full = data[lang][0]
        train_sets.append((lang, list(full) if size is None else subsample(full, size, task.seed, lang)))
    if not concat_sources(train_sets):
        return [RunRecord([], t, task.seed, failure="no training data") for t in task.targets]
    try:
        params, base = train(model_cfg, cfg, train_sets, tables, task.seed)
    except ConfigError as exc:
        return [RunRecord([l for l, _ in task.sources], t, task.seed, failure=str(exc)) for t in task.targets]
    records = []
    for tgt in task.targets:
        rec = RunRecord(**{**base.to_dict(), "target_lang": tgt})
        if base.failure is None:
            rep = evaluate_corpus(params, model_cfg, tables, data[tgt][1])
            rec.test_f1 = rep.f1
            rec.test_counts = [rep.true_positives, rep.predicted_count, rep.gold_count]
        records.append(rec)
    return records


def run_tasks(tasks, data, tables, model_cfg, train_cfg, workers: int = 1) -> dict[str, list[RunRecord]]:
    """Run independent training tasks on a bounded process pool. Results
    are keyed by task key, in task order regardless of completion order."""
    context = {"data": data, "tables": tables, "model_cfg": model_cfg, "train_cfg": train_cfg}
    if workers <= 1 or len(tasks) <= 1:
        _init_worker(context)
        results = [_execute(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(context,)) as pool:
            results = list(pool.map(_execute, tasks))
    out: dict[str, list[RunRecord]] = {}
    for task, recs in zip(tasks, results):
        out.setdefault(task.key, []).extend(recs)
    return out


def mean_f1(records: Sequence[RunRecord]) -> float | None:
    vals = [r.test_f1 for r in records if r.failure is None and r.test_f1 is not None]
    return float(np.mean(vals)) if vals else None


def _available(data: LangData, tables, lang: str) -> bool:
    return lang in data and lang in tables and len(data[lang][0]) > 0


# --------------------------------------------------------------------------
# drivers


@dataclass
class GridResult:
    languages: list
    cells: dict  # (source, target) -> mean F1 or None
    records: list

    def rows(self) -> list[list]:
        header = ["source\\target"] + list(self.languages)
        body = [[s] + [self.cells.get((s, t)) for t in self.languages] for s in self.languages]
        return [header] + body


def zero_shot_grid(languages, data: LangData, tables, model_cfg, train_cfg, workers: int = 1) -> GridResult:
    """Train on each source language and test on every target language.

    One model per (source, seed) serves every target; the diagonal holds
    the monolingual baselines. Cells lacking resources are None.
    """
    languages = list(languages)
    usable = [l for l in languages if _available(data, tables, l)]
    targets = tuple(l for l in languages if l in data and l in tables and len(data[l][1]) > 0)
    tasks = [RunTask(src, ((src, None),), targets, seed) for src in usable for seed in train_cfg.seeds]
    results = run_tasks(tasks, data, tables, model_cfg, train_cfg, workers)
    cells, records = {}, []
    for src in languages:
        recs = results.get(src, [])
        records.extend(recs)
        for tgt in languages:
            cells[(src, tgt)] = mean_f1([r for r in recs if r.target_lang == tgt])
    return GridResult(languages, cells, records)


@dataclass
class LeaveOneOutResult:
    languages: list
    all_others: dict
    monolingual: dict
    best_single: dict
    records: list

    def rows(self) -> list[list]:
        rows = [["target"] + list(self.languages)]
        if self.best_single:
            rows.append(["best->target"] + [self.best_single.get(t) for t in self.languages])
        rows.append(["all others->target"] + [self.all_others.get(t) for t in self.languages])
        if self.monolingual:
            rows.append(["target->target"] + [self.monolingual.get(t) for t in self.languages])
        return rows


def leave_one_out(
    languages, data: LangData, tables, model_cfg, train_cfg, workers: int = 1,
    monolingual: bool = True, grid: GridResult | None = None,
) -> LeaveOneOutResult:
    """Train on all languages but the target, for each target. Optionally
    adds monolingual runs and, from a finished grid, the best single source."""
    languages = list(languages)
    if len(languages) < 2:
        raise ConfigError("leave-one-out needs at least two languages")
    tasks = []
    for tgt in languages:
        others = tuple((l, None) for l in languages if l != tgt and _available(data, tables, l))
        for seed in train_cfg.seeds:
            tasks.append(RunTask(f"others->{tgt}", others, (tgt,), seed))
            if monolingual and _available(data, tables, tgt):
                tasks.append(RunTask(f"{tgt}->{tgt}", ((tgt, None),), (tgt,), seed))
    results = run_tasks(tasks, data, tables, model_cfg, train_cfg, workers)
    all_others = {t: mean_f1(results.get(f"others->{t}", [])) for t in languages}
    mono = {t: mean_f1(results.get(f"{t}->{t}", [])) for t in languages} if monolingual else {}
    best = {}
    if grid is not None:
        for t in languages:
            vals = [grid.cells.get((s, t)) for s in grid.languages if s != t]
            vals = [v for v in vals if v is not None]
            best[t] = max(vals) if vals else None
    records = [r for recs in results.values() for r in recs]
    return LeaveOneOutResult(languages, all_others, mono, best, records)


@dataclass
class CurveResult:
    source: str
    target: str
    sizes: list
    cross_lingual: dict
    monolingual: dict
    all_languages: dict
    records: list

    def rows(self) -> list[list]:
        header = ["size", f"{self.source}+{self.target}", f"{self.target} only"]
        if self.all_languages:
            header.append(f"all+{self.target}")
        rows = [header]
        for s in self.sizes:
            row = [s, self.cross_lingual.get(s), self.monolingual.get(s)]
            if self.all_languages:
                row.append(self.all_languages.get(s))
            rows.append(row)
        return rows


def resolve_sizes(sizes, available: int, strict: bool = True) -> list[int]:
    """Turn a size list (ints and "all") into sorted ints. Defaults that
    exceed the data are dropped when ``strict`` is False."""
    out = []
    for s in sizes:
        n = available if s == "all" else int(s)
        if n > available:
            if strict:
                raise ConfigError(f"curve size {n} exceeds the {available} available target sentences")
            continue
        if n < 0:
            raise ConfigError("curve sizes must be non-negative")
        if n not in out:
            out.append(n)
    return sorted(out)


def learning_curve(
    source: str, target: str, data: LangData, tables, model_cfg, train_cfg,
    sizes=None, extra_languages: Sequence[str] = (), workers: int = 1,
) -> CurveResult:
    """F1 on the target test set as target training data grows.

    Arm A trains on the full source set plus ``s`` target sentences, arm B
    on the ``s`` target sentences alone, and, when ``extra_languages`` are
    given, arm C on every language plus the ``s`` target sentences. The
    validation split is drawn from the pooled data of each arm. Without
    explicit ``sizes`` the defaults that fit the target data are used.
    """
    available = len(data[target][0])
    if sizes is None:
        sizes = resolve_sizes(DEFAULT_CURVE_SIZES, available, strict=False)
    else:
        sizes = resolve_sizes(sizes, available)
    others = [l for l in extra_languages if l not in (source, target)]
    tasks = []
    for s in sizes:
        tgt_part = ((target, s),) if s else ()
        for seed in train_cfg.seeds:
            tasks.append(RunTask(f"A{s}", ((source, None),) + tgt_part, (target,), seed))
            if s:
                tasks.append(RunTask(f"B{s}", tgt_part, (target,), seed))
            if others:
                srcs = tuple((l, None) for l in sorted({source, *others}))
                tasks.append(RunTask(f"C{s}", srcs + tgt_part, (target,), seed))
    results = run_tasks(tasks, data, tables, model_cfg, train_cfg, workers)
    arm = lambda a: {s: mean_f1(results.get(f"{a}{s}", [])) for s in sizes}
    records = [r for recs in results.values() for r in recs]
    return CurveResult(source, target, sizes, arm("A"), arm("B"), arm("C") if others else {}, records)
