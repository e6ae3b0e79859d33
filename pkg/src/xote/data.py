"""SemEval-2016 ABSA ingestion, tokenisation with character offsets, span
repair, and a CoNLL-style column format."""

from __future__ import annotations

import logging
import re
import unicodedata
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from typing import IO, Iterable

from .errors import DataError, FormatError
from .iob import TargetSpan, Token, spans_to_tags, tags_to_spans

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Sentence:
    id: str
    language: str
    text: str
    tokens: tuple[Token, ...]
    targets: tuple[TargetSpan, ...] = ()

    @property
    def tags(self) -> list[str]:
        return spans_to_tags(self.tokens, self.targets, self.id)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Corpus:
    language: str
    split: str = ""
    sentences: list[Sentence] = field(default_factory=list)
    excluded: list[tuple[Sentence, str]] = field(default_factory=list)
    null_targets: int = 0
    duplicate_targets: int = 0
    snapped_targets: int = 0

    def __post_init__(self):
        seen = set()
        for s in self.sentences:
            if s.id in seen:
                raise DataError(f"duplicate sentence id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def report(self) -> dict:
        n_sent, n_tok, n_tgt = dataset_stats(self)
        return {
            "language": self.language,
            "split": self.split,
            "sentences": n_sent,
            "tokens": n_tok,
            "targets": n_tgt,
            "usable_sentences": len(self.sentences),
            "null_targets": self.null_targets,
            "duplicate_targets": self.duplicate_targets,
            "snapped_targets": self.snapped_targets,
            "excluded": [{"id": s.id, "reason": why} for s, why in self.excluded],
        }


# --------------------------------------------------------------------------
# tokenisation


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def tokenize(text: str) -> list[Token]:
    """Whitespace split, then peel leading/trailing punctuation characters
    off into single-character tokens."""
    tokens: list[Token] = []
    for m in re.finditer(r"\S+", text):
        chunk, base = m.group(), m.start()
        lo, hi = 0, len(chunk)
        while lo < hi and _is_punct(chunk[lo]):
            lo += 1
        while hi > lo and _is_punct(chunk[hi - 1]):
            hi -= 1
        for i in range(lo):
            tokens.append(Token(chunk[i], base + i, base + i + 1))
        if lo < hi:
            tokens.append(Token(chunk[lo:hi], base + lo, base + hi))
        for i in range(hi, len(chunk)):
            tokens.append(Token(chunk[i], base + i, base + i + 1))
    return tokens


def align_spans_to_tokens(sentence: Sentence) -> tuple[Sentence, int]:
    """Snap every target to the minimal run of tokens covering it.

    Returns the repaired sentence and the number of spans whose boundaries
    moved. Raises :class:`DataError` if a span covers no token or spans
    overlap after snapping.
    """
    snapped = []
    moved = 0
    for span in sorted(sentence.targets):
        cover = [i for i, t in enumerate(sentence.tokens) if t.end > span.start and t.start < span.end]
        if not cover:
            raise DataError(f"sentence {sentence.id}: span ({span.start}, {span.end}) covers no token")
        start, end = sentence.tokens[cover[0]].start, sentence.tokens[cover[-1]].end
        if (start, end) != (span.start, span.end):
            moved += 1
            logger.info("sentence %s: span %r snapped to %r", sentence.id, span.surface, sentence.text[start:end])
        snapped.append((cover[0], cover[-1], TargetSpan(start, end, sentence.text[start:end])))
    for (a0, a1, _), (b0, b1, _) in zip(snapped, snapped[1:]):
        if b0 <= a1:
            raise DataError(f"sentence {sentence.id}: overlapping targets after snapping")
    return replace(sentence, targets=tuple(s for _, _, s in snapped)), moved


def make_sentence(sid: str, language: str, text: str, spans: Iterable[tuple[int, int]] = ()) -> Sentence:
    """Tokenise ``text`` and attach (start, end) target offsets verbatim."""
    targets = tuple(sorted(TargetSpan(a, b, text[a:b]) for a, b in spans))
    return Sentence(sid, language, text, tuple(tokenize(text)), targets)


# --------------------------------------------------------------------------
# SemEval XML


def parse_semeval_xml(stream, language: str, split: str = "") -> Corpus:
    """Read sentence/Opinions/Opinion elements into a :class:`Corpus`.

    NULL targets are dropped and repeated (from, to) pairs collapse to one
    span. Sentences whose spans cannot be repaired are moved to
    ``Corpus.excluded``.
    """
    try:
        root = ET.parse(stream).getroot()
    except ET.ParseError as exc:
        line, col = exc.position
        raise FormatError(f"malformed XML at line {line}, column {col}: {exc}") from None
    corpus = Corpus(language, split)
    seen_ids = set()
    for el in root.iter("sentence"):
        sid = el.get("id")
        text_el = el.find("text")
        if sid is None or text_el is None:
            raise FormatError("sentence element without id or text")
        if sid in seen_ids:
            raise DataError(f"duplicate sentence id {sid!r}")
        seen_ids.add(sid)
        text = text_el.text or ""
        offsets = []
        for op in el.iter("Opinion"):
            target = op.get("target")
            if target is None or target == "NULL":
                corpus.null_targets += 1
                continue
            try:
                a, b = int(op.get("from")), int(op.get("to"))
            except (TypeError, ValueError):
                raise DataError(f"sentence {sid}: opinion {target!r} lacks integer from/to") from None
            if not 0 <= a < b <= len(text):
                raise DataError(f"sentence {sid}: offsets ({a}, {b}) outside text of length {len(text)}")
            if text[a:b] != target:
                logger.warning("sentence %s: target %r does not match text %r", sid, target, text[a:b])
            if (a, b) in offsets:
                corpus.duplicate_targets += 1
                continue
            offsets.append((a, b))
        raw = make_sentence(sid, language, text, offsets)
        try:
            fixed, moved = align_spans_to_tokens(raw)
        except DataError as exc:
            logger.warning("excluding %s", exc)
            corpus.excluded.append((raw, str(exc)))
            continue
        corpus.snapped_targets += moved
        corpus.sentences.append(fixed)
    return corpus


def dataset_stats(corpus: Corpus) -> tuple[int, int, int]:
    """(sentences, tokens, targets), counting excluded sentences too."""
    every = list(corpus.sentences) + [s for s, _ in corpus.excluded]
    return len(every), sum(len(s.tokens) for s in every), sum(len(s.targets) for s in every)


# --------------------------------------------------------------------------
# CoNLL-style columns


def export_conll(corpus: Corpus, stream: IO[str]) -> None:
    for sent in corpus.sentences:
        stream.write(f"# id={sent.id}\n")
        for tok, tag in zip(sent.tokens, sent.tags):
            stream.write(f"{tok.text}\t{tok.start}\t{tok.end}\t{tag}\n")
        stream.write("\n")


def _rebuild_text(tokens: list[Token]) -> str:
    parts, pos = [], 0
    for t in tokens:
        parts.append(" " * (t.start - pos) + t.text)
        pos = t.end
    return "".join(parts)


def import_conll(stream: IO[str] | Iterable[str], language: str = "", split: str = "") -> Corpus:
    """Inverse of :func:`export_conll`. The sentence text is rebuilt from the
    token offsets, with gaps filled by spaces."""
    corpus = Corpus(language, split)
    ids = set()
    sid, tokens, tags = None, [], []

    def flush():
        if sid is None and not tokens:
            return
        name = sid if sid is not None else str(len(corpus.sentences))
        if name in ids:
            raise DataError(f"duplicate sentence id {name!r}")
        ids.add(name)
        text = _rebuild_text(tokens)
        spans = tags_to_spans(tokens, tags, text)
        corpus.sentences.append(Sentence(name, language, text, tuple(tokens), tuple(spans)))

    for lineno, line in enumerate(stream, start=1):
        line = line.rstrip("\r\n")
        if line.startswith("# id="):
            flush()
            sid, tokens, tags = line[5:], [], []
            continue
        if not line.strip():
            flush()
            sid, tokens, tags = None, [], []
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise FormatError(f"line {lineno}: expected 4 columns, found {len(cols)}")
        text, start, end, tag = cols
        if tag not in ("I", "O", "B"):
            raise FormatError(f"line {lineno}: unknown tag {tag!r}")
        try:
            tok = Token(text, int(start), int(end))
        except ValueError:
            raise FormatError(f"line {lineno}: offsets must be integers") from None
        if tok.start >= tok.end or (tokens and tok.start < tokens[-1].end):
            raise FormatError(f"line {lineno}: bad token offsets")
        tokens.append(tok)
        tags.append(tag)
    flush()
    return corpus


def load_corpus(path: str, language: str, split: str = "") -> Corpus:
    """Dispatch on extension: ``.xml`` is SemEval, anything else CoNLL."""
    if path.lower().endswith(".xml"):
        with open(path, "rb") as fh:
            return parse_semeval_xml(fh, language, split)
    with open(path, encoding="utf-8") as fh:
        return import_conll(fh, language, split)
