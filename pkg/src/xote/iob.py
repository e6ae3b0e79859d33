"""IOB1 tagging of opinion target spans.

Chunks open with ``I``. ``B`` is used only on the first token of a chunk
that directly follows another chunk, so "The wine list ..." with target
"wine list" is tagged ``O I I ...``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import AlignmentError

I, O, B = "I", "O", "B"
TAGS = (I, O, B)  # column order of tag distributions
TIE_ORDER = (O, I, B)  # preferred tag on exact argmax ties


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


@dataclass(frozen=True, order=True)
class TargetSpan:
    start: int
    end: int
    surface: str = ""


def spans_to_tags(tokens: Sequence[Token], spans: Sequence[TargetSpan], sentence_id: str = "?") -> list[str]:
    starts = {t.start: i for i, t in enumerate(tokens)}
    ends = {t.end: i for i, t in enumerate(tokens)}
    tags = [O] * len(tokens)
    owner = [-1] * len(tokens)
    for k, span in enumerate(sorted(spans)):
        first, last = starts.get(span.start), ends.get(span.end)
        if first is None or last is None or last < first:
            raise AlignmentError(
                f"sentence {sentence_id}: span ({span.start}, {span.end}) {span.surface!r} "
                "is not aligned to token boundaries"
            )
        for i in range(first, last + 1):
            if owner[i] != -1:
                raise AlignmentError(f"sentence {sentence_id}: overlapping spans at token {i}")
            owner[i] = k
            tags[i] = I
        if first > 0 and owner[first - 1] != -1:
            tags[first] = B
    return tags


def tags_to_spans(tokens: Sequence[Token], tags: Sequence[str], text: str | None = None) -> list[TargetSpan]:
    """Decode any tag sequence into spans.

    ``B`` always opens a chunk, ``I`` opens one after ``O`` or at the start.
    ``text`` supplies the surface strings; without it token texts are
    joined with the original gaps filled by spaces.
    """
    if len(tokens) != len(tags):
        raise ValueError(f"{len(tokens)} tokens but {len(tags)} tags")
    runs: list[tuple[int, int]] = []
    prev = O
    for i, tag in enumerate(tags):
        if tag == B or (tag == I and prev == O):
            runs.append((i, i))
        elif tag == I:
            runs[-1] = (runs[-1][0], i)
        prev = tag
    return [_make_span(tokens, a, b, text) for a, b in runs]


def _make_span(tokens, a, b, text):
    start, end = tokens[a].start, tokens[b].end
    if text is not None:
        surface = text[start:end]
    else:
        parts = [tokens[a].text]
        for prev, tok in zip(tokens[a:b], tokens[a + 1:b + 1]):
            parts.append(" " * (tok.start - prev.end) + tok.text)
        surface = "".join(parts)
    return TargetSpan(start, end, surface)
