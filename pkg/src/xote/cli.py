"""Command-line entry point: ``xote <command> ...``.

Errors are reported as one JSON object on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field

from . import __version__
from .align import (
    align_tables,
    read_dictionary,
    read_projection,
    split_dictionary,
    translation_precision,
    write_projection,
)
from .data import Sentence, dataset_stats, export_conll, import_conll, load_corpus, tokenize
from .embeddings import DEFAULT_CAP, apply_projection, load_table, oov_rate, save_vectors
from .errors import ConfigError, XoteError
from .evaluate import exact_span_f1
from .iob import TargetSpan
from .model import ModelConfig, load_checkpoint, predict_corpus, save_checkpoint
from .train import (
    GridResult,
    TrainConfig,
    evaluate_corpus,
    learning_curve,
    leave_one_out,
    train,
    zero_shot_grid,
)

logger = logging.getLogger("xote")

SCHEMA_VERSION = 1


class UsageError(XoteError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# output helpers


def atomic_write(path: str, data) -> None:
    """Write via a temp file in the same directory and rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _run_dir(out: str, experiment: str, sources, target, seed) -> str:
    src = "+".join(sources) if sources else "none"
    return os.path.join(out, experiment, f"{src}__{target or 'none'}", f"seed{seed}")


def _write_records(out: str, experiment: str, records) -> None:
    rows = [["experiment", "sources", "target", "seed", "epochs_trained", "best_epoch", "best_val_f1", "test_f1", "failure"]]
    for r in records:
        atomic_write(os.path.join(_run_dir(out, experiment, r.source_langs, r.target_lang, r.seed), "record.json"),
                     _dumps(r.to_dict()))
        rows.append([experiment, "+".join(r.source_langs), r.target_lang, r.seed, r.epochs_trained,
                     r.best_epoch, r.best_val_f1, r.test_f1, r.failure or ""])
    atomic_write(os.path.join(out, experiment, "runs.csv"), rows_to_csv(rows))


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    languages: list
    data: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)
    projections: dict = field(default_factory=dict)
    dictionaries: dict = field(default_factory=dict)
    pivot: str | None = None
    normalize: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "results"
    cap: int = DEFAULT_CAP
    sources: list | None = None
    target: str | None = None
    curve: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION


_CONFIG_KEYS = {"schema_version", "languages", "data", "embeddings", "projections", "dictionaries", "pivot",
                "normalize", "model", "train", "out", "cap", "sources", "target", "curve"}


def _parse_embedding_flags(flags) -> dict:
    out = {}
    for item in flags or []:
        lang, sep, path = item.partition("=")
        if not sep or not lang or not path:
            raise UsageError(f"--embeddings expects LANG=PATH, got {item!r}")
        out[lang] = path
    return out


def load_experiment(args) -> ExperimentConfig:
    """Read the JSON config named by --config and apply flag overrides.
    Relative paths resolve against the config file's directory."""
    if not args.config:
        raise UsageError("--config is required for this command")
    with open(args.config, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {raw.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    base = os.path.dirname(os.path.abspath(args.config))
    rel = lambda p: p if os.path.isabs(p) else os.path.join(base, p)

    train_raw = dict(raw.get("train", {}))
    if args.seed is not None:
        train_raw["seeds"] = [args.seed]
    cfg = ExperimentConfig(
        languages=list(raw.get("languages", [])),
        data={l: {k: rel(v) for k, v in d.items()} for l, d in raw.get("data", {}).items()},
        embeddings={l: rel(p) for l, p in raw.get("embeddings", {}).items()},
        projections={l: rel(p) for l, p in raw.get("projections", {}).items()},
        dictionaries={l: rel(p) for l, p in raw.get("dictionaries", {}).items()},
        pivot=raw.get("pivot"),
        normalize=bool(raw.get("normalize", True)),
        model=ModelConfig.from_dict(raw.get("model", {})),
        train=TrainConfig.from_dict(train_raw),
        out=rel(raw.get("out", "results")),
        cap=int(raw.get("cap", DEFAULT_CAP)),
        sources=raw.get("sources"),
        target=raw.get("target"),
        curve=raw.get("curve", {}),
    )
    cfg.embeddings.update({l: os.path.abspath(p) for l, p in _parse_embedding_flags(args.embeddings).items()})
    if args.out:
        cfg.out = os.path.abspath(args.out)
    if args.cap is not None:
        cfg.cap = args.cap
    if not cfg.languages:
        raise ConfigError("config lists no languages")
    if cfg.dictionaries and cfg.pivot not in cfg.embeddings:
        raise ConfigError("dictionaries need a pivot language with embeddings")
    for group in (cfg.embeddings, cfg.projections, cfg.dictionaries):
        for lang, path in group.items():
            if not os.path.exists(path):
                raise ConfigError(f"{lang}: missing file {path}")
    for lang, d in cfg.data.items():
        for split, path in d.items():
            if not os.path.exists(path):
                raise ConfigError(f"{lang} {split}: missing file {path}")
    return cfg


def load_tables(cfg: ExperimentConfig) -> dict:
    """Embedding tables mapped into the shared space: a stored projection
    if given, else a Procrustes fit of the dictionary against the pivot."""
    raw = {l: load_table(p, cap=cfg.cap, language=l) for l, p in cfg.embeddings.items()}
    tables = {}
    for lang, table in raw.items():
        if lang in cfg.projections:
            with open(cfg.projections[lang], "rb") as fh:
                W, _, _ = read_projection(fh)
            table = apply_projection(table, W)
        elif lang in cfg.dictionaries and lang != cfg.pivot:
            with open(cfg.dictionaries[lang], encoding="utf-8") as fh:
                pairs = read_dictionary(fh)
            table = apply_projection(table, align_tables(table, raw[cfg.pivot], pairs, cfg.normalize))
        tables[lang] = table
    return tables


def load_data(cfg: ExperimentConfig) -> dict:
    data = {}
    for lang, paths in cfg.data.items():
        train_c = load_corpus(paths["train"], lang, "train") if "train" in paths else None
        test_c = load_corpus(paths["test"], lang, "test") if "test" in paths else None
        data[lang] = (train_c.sentences if train_c else [], test_c.sentences if test_c else [])
    return data


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get("XOTE_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"XOTE_WORKERS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _flag_tables(args) -> dict:
    if args.config:
        return load_tables(load_experiment(args))
    paths = _parse_embedding_flags(args.embeddings)
    if not paths:
        raise UsageError("pass --embeddings LANG=PATH or --config")
    cap = args.cap if args.cap is not None else DEFAULT_CAP
    return {l: load_table(p, cap=cap, language=l) for l, p in paths.items()}


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    corpus = load_corpus(args.xml, args.lang, args.split or "")
    report = corpus.report()
    if args.embeddings:
        report["oov"] = {}
        for lang, path in _parse_embedding_flags(args.embeddings).items():
            table = load_table(path, cap=args.cap if args.cap is not None else DEFAULT_CAP, language=lang)
            miss, total = oov_rate(table, (t.text for s in corpus.sentences for t in s.tokens))
            report["oov"][lang] = {"oov": miss, "tokens": total, "rate": miss / total if total else 0.0}
    if args.out:
        buf = io.StringIO()
        export_conll(corpus, buf)
        atomic_write(args.out, buf.getvalue())
        atomic_write(args.out + ".report.json", _dumps(report))
    n_sent, n_tok, n_tgt = dataset_stats(corpus)
    print(f"{n_sent}\t{n_tok}\t{n_tgt}")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_align(args) -> int:
    cap = args.cap if args.cap is not None else DEFAULT_CAP
    src = load_table(args.src_vec, cap=cap, language=args.src_lang)
    tgt = load_table(args.tgt_vec, cap=cap, language=args.tgt_lang)
    with open(args.dict, encoding="utf-8") as fh:
        pairs = read_dictionary(fh)
    if args.test_dict:
        with open(args.test_dict, encoding="utf-8") as fh:
            train_pairs, test_pairs = pairs, read_dictionary(fh)
    else:
        split = split_dictionary(pairs, args.test_fraction, args.seed or 0)
        train_pairs, test_pairs = split.train, split.test
    W = align_tables(src, tgt, train_pairs, normalize=not args.no_normalize)
    buf = io.BytesIO()
    write_projection(W, buf, args.src_lang, args.tgt_lang)
    out = args.out or "projection.xprj"
    atomic_write(out, buf.getvalue())
    projected = apply_projection(src, W)
    if args.write_projected:
        text = io.StringIO()
        save_vectors(projected, text, fmt="%.9g")
        atomic_write(args.write_projected, text.getvalue())
    result = {"projection": out, "train_pairs": len(train_pairs), "test_pairs": len(test_pairs)}
    for k in (1, 5):
        rep = translation_precision(projected, tgt, test_pairs, k)
        result[f"precision@{k}"] = rep.precision
        result["evaluated"], result["excluded"] = rep.evaluated, rep.excluded
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = load_experiment(args)
    tables, data = load_tables(cfg), load_data(cfg)
    sources = cfg.sources or [l for l in cfg.languages if l != cfg.target]
    missing = [l for l in sources + ([cfg.target] if cfg.target else []) if l not in data or l not in tables]
    if missing:
        raise ConfigError(f"missing data or embeddings for {missing}")
    seed = cfg.train.seeds[0]
    test = (cfg.target, data[cfg.target][1]) if cfg.target else None
    params, record = train(cfg.model, cfg.train, [(l, data[l][0]) for l in sources], tables, seed, test)
    run_dir = _run_dir(cfg.out, "train", record.source_langs, cfg.target, seed)
    buf = io.BytesIO()
    save_checkpoint(params, cfg.model, buf, {"sources": record.source_langs, "seed": seed})
    atomic_write(os.path.join(run_dir, "checkpoint.xote"), buf.getvalue())
    atomic_write(os.path.join(run_dir, "record.json"), _dumps(record.to_dict()))
    print(json.dumps({"run_dir": run_dir, "best_val_f1": record.best_val_f1, "test_f1": record.test_f1,
                      "epochs_trained": record.epochs_trained, "failure": record.failure}, sort_keys=True))
    return 0 if record.failure is None else 1


def _read_predictions(path: str, lang: str) -> dict:
    if path.endswith(".jsonl") or path.endswith(".json"):
        pred = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    pred[str(obj["id"])] = [TargetSpan(s["start"], s["end"], s.get("surface", "")) for s in obj["spans"]]
        return pred
    with open(path, encoding="utf-8") as fh:
        return {s.id: list(s.targets) for s in import_conll(fh, lang).sentences}


def cmd_eval(args) -> int:
    gold_corpus = load_corpus(args.corpus, args.lang)
    gold = {s.id: list(s.targets) for s in gold_corpus.sentences}
    if args.pred:
        report = exact_span_f1(gold, _read_predictions(args.pred, args.lang))
    elif args.checkpoint:
        with open(args.checkpoint, "rb") as fh:
            params, model_cfg, _ = load_checkpoint(fh)
        report = evaluate_corpus(params, model_cfg, _flag_tables(args), gold_corpus.sentences)
    else:
        raise UsageError("eval needs --checkpoint or --pred")
    if args.out:
        atomic_write(args.out, _dumps(report.to_dict()))
    print(report.to_tsv())
    print(report.to_json())
    return 0


def cmd_predict(args) -> int:
    with open(args.checkpoint, "rb") as fh:
        params, model_cfg, _ = load_checkpoint(fh)
    tables = _flag_tables(args)
    with open(args.text, encoding="utf-8") as fh:
        lines = [l.rstrip("\r\n") for l in fh]
    sents = [Sentence(str(i), args.lang, t, tuple(tokenize(t))) for i, t in enumerate(lines, start=1)]
    pred = predict_corpus(params, model_cfg, tables, sents)
    out = "".join(
        json.dumps({"id": s.id, "text": s.text,
                    "spans": [{"start": p.start, "end": p.end, "surface": p.surface} for p in pred[s.id]]},
                   ensure_ascii=False) + "\n"
        for s in sents
    )
    if args.out:
        atomic_write(args.out, out)
    else:
        sys.stdout.write(out)
    return 0


def cmd_zero_shot(args) -> int:
    cfg = load_experiment(args)
    tables, data = load_tables(cfg), load_data(cfg)
    grid = zero_shot_grid(cfg.languages, data, tables, cfg.model, cfg.train, _workers(args))
    base = os.path.join(cfg.out, "zero_shot")
    _write_records(cfg.out, "zero_shot", grid.records)
    rows = grid.rows()
    atomic_write(os.path.join(base, "grid.csv"), rows_to_csv(rows))
    cells = {f"{s}->{t}": v for (s, t), v in grid.cells.items()}
    atomic_write(os.path.join(base, "grid.json"), _dumps({"languages": grid.languages, "cells": cells}))
    sys.stdout.write(rows_to_csv(rows))
    return 0


def _load_grid(path: str) -> GridResult:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    cells = {tuple(k.split("->")): v for k, v in raw["cells"].items()}
    return GridResult(raw["languages"], cells, [])


def cmd_leave_one_out(args) -> int:
    cfg = load_experiment(args)
    tables, data = load_tables(cfg), load_data(cfg)
    grid_path = args.grid or os.path.join(cfg.out, "zero_shot", "grid.json")
    grid = _load_grid(grid_path) if os.path.exists(grid_path) else None
    res = leave_one_out(cfg.languages, data, tables, cfg.model, cfg.train, _workers(args), grid=grid)
    base = os.path.join(cfg.out, "leave_one_out")
    _write_records(cfg.out, "leave_one_out", res.records)
    rows = res.rows()
    atomic_write(os.path.join(base, "table.csv"), rows_to_csv(rows))
    atomic_write(os.path.join(base, "table.json"), _dumps({
        "languages": res.languages, "best->target": res.best_single,
        "all others->target": res.all_others, "target->target": res.monolingual,
    }))
    sys.stdout.write(rows_to_csv(rows))
    return 0


def cmd_curve(args) -> int:
    cfg = load_experiment(args)
    tables, data = load_tables(cfg), load_data(cfg)
    curve_cfg = cfg.curve
    source = curve_cfg.get("source")
    if source not in data:
        raise ConfigError("curve.source must name a language with data")
    targets = curve_cfg.get("targets") or [l for l in cfg.languages if l != source]
    extra = [l for l in cfg.languages if l in data] if curve_cfg.get("all_languages", True) else []
    base = os.path.join(cfg.out, "curve")
    all_records = []
    for tgt in targets:
        res = learning_curve(source, tgt, data, tables, cfg.model, cfg.train, curve_cfg.get("sizes"),
                             extra_languages=extra, workers=_workers(args))
        all_records.extend(res.records)
        rows = res.rows()
        atomic_write(os.path.join(base, f"{source}_{tgt}.csv"), rows_to_csv(rows))
        atomic_write(os.path.join(base, f"{source}_{tgt}.json"), _dumps({
            "source": source, "target": tgt, "sizes": res.sizes,
            "cross_lingual": {str(k): v for k, v in res.cross_lingual.items()},
            "monolingual": {str(k): v for k, v in res.monolingual.items()},
            "all_languages": {str(k): v for k, v in res.all_languages.items()},
        }))
        sys.stdout.write(f"# {source} -> {tgt}\n" + rows_to_csv(rows))
    _write_records(cfg.out, "curve", all_records)
    return 0


def cmd_make_fixture(args) -> int:
    from .synthetic import write_fixture

    path = write_fixture(args.directory, seed=args.seed or 0)
    print(path)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="single seed, overrides train.seeds")
    common.add_argument("--workers", type=int, help="parallel runs (default: $XOTE_WORKERS or CPU count)")
    common.add_argument("--out", help="output path or results directory")
    common.add_argument("--embeddings", action="append", metavar="LANG=PATH", help="embedding file (repeatable)")
    common.add_argument("--cap", type=int, help=f"vocabulary cap per language (default {DEFAULT_CAP})")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="xote", description="Zero-shot cross-lingual opinion target extraction")
    parser.add_argument("--version", action="version", version=f"xote {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="parse SemEval XML, export CoNLL and stats")
    p.add_argument("xml")
    p.add_argument("--lang", required=True)
    p.add_argument("--split")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("align", parents=[common], help="fit an orthogonal projection from a dictionary")
    p.add_argument("src_vec")
    p.add_argument("tgt_vec")
    p.add_argument("dict")
    p.add_argument("--test-dict")
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--no-normalize", action="store_true", help="align raw instead of unit-length vectors")
    p.add_argument("--src-lang", default="")
    p.add_argument("--tgt-lang", default="")
    p.add_argument("--write-projected", help="also write the projected source vectors (.vec)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="exact-span F1 of a checkpoint or prediction file")
    p.add_argument("corpus")
    p.add_argument("--lang", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--pred", help="predictions as CoNLL or JSON lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="tag raw text, one sentence per line")
    p.add_argument("checkpoint")
    p.add_argument("text")
    p.add_argument("--lang", required=True)
    p.set_defaults(func=cmd_predict)

    for name, func, help_ in (
        ("zero-shot", cmd_zero_shot, "source x target zero-shot grid"),
        ("leave-one-out", cmd_leave_one_out, "train on all languages but the target"),
        ("curve", cmd_curve, "learning curves with added target data"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "leave-one-out":
            p.add_argument("--grid", help="grid.json from zero-shot for the best->target row (default: the one under --out, if any)")
        p.set_defaults(func=func)

    p = sub.add_parser("make-fixture", parents=[common], help="write the synthetic twin-language fixture")
    p.add_argument("directory")
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(json.dumps({"error": "usage", "message": str(exc)}) + "\n")
        return 2
    except (XoteError, OSError, KeyError) as exc:
        kind = "config" if isinstance(exc, ConfigError) else type(exc).__name__
        sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
