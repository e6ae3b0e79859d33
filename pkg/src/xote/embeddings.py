"""Frozen word vector tables in the fastText ``.vec`` text format, plus a
binary cache container."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

DEFAULT_CAP = 50_000
XEMB_MAGIC = b"XEMB"
XEMB_VERSION = 1


@dataclass(eq=False)
class EmbeddingTable:
    language: str
    words: list[str]
    vectors: np.ndarray
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        vecs = np.array(self.vectors, dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[0] != len(self.words):
            raise ConfigError(f"{len(self.words)} words but vectors of shape {vecs.shape}")
        vecs.flags.writeable = False
        self.vectors = vecs
        self.index = {}
        for i, w in enumerate(self.words):
            if w in self.index:
                raise ConfigError(f"duplicate word {w!r} in table")
            self.index[w] = i

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index


def load_vectors(stream: IO[str] | Iterable[str], cap: int | None = DEFAULT_CAP, language: str = "") -> EmbeddingTable:
    """Read a ``.vec`` stream, keeping the first ``cap`` distinct words.

    File order is taken as frequency order. A leading "<count> <dim>"
    header is optional; duplicates keep their first vector.
    """
    words: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    dim = None
    for lineno, line in enumerate(stream, start=1):
        if cap is not None and len(words) >= cap:
            break
        parts = line.rstrip("\r\n").rstrip(" ").split(" ")
        if lineno == 1 and len(parts) == 2 and parts[0].isdigit() and parts[1].isdigit():
            dim = int(parts[1])
            continue
        if parts == [""]:
            continue
        word, values = parts[0], parts[1:]
        if dim is None:
            dim = len(values)
        if len(values) != dim:
            raise FormatError(f"line {lineno}: expected {dim} values, found {len(values)}")
        try:
            vec = np.array([float(v) for v in values])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"line {lineno}: non-finite value for {word!r}")
        if word in seen:
            logger.warning("line %d: duplicate word %r ignored", lineno, word)
            continue
        seen.add(word)
        words.append(word)
        rows.append(vec)
    if dim is None:
        raise FormatError("no vectors found")
    vectors = np.vstack(rows) if rows else np.zeros((0, dim))
    return EmbeddingTable(language, words, vectors)


def save_vectors(table: EmbeddingTable, stream: IO[str], fmt: str = "%.6g") -> None:
    stream.write(f"{len(table)} {table.dim}\n")
    for word, vec in zip(table.words, table.vectors):
        stream.write(word + " " + " ".join(fmt % v for v in vec) + "\n")


def lookup(table: EmbeddingTable, token: str, lowercase_fallback: bool = True):
    """Vector for ``token`` and whether it was found. Unknown words map to
    the zero vector."""
    i = table.index.get(token)
    if i is None and lowercase_fallback:
        i = table.index.get(token.lower())
    if i is None:
        return np.zeros(table.dim), False
    return table.vectors[i], True


def embed_tokens(table: EmbeddingTable, tokens: Iterable[str], lowercase_fallback: bool = True) -> np.ndarray:
    rows = [lookup(table, t, lowercase_fallback)[0] for t in tokens]
    return np.vstack(rows) if rows else np.zeros((0, table.dim))


def oov_rate(table: EmbeddingTable, tokens: Iterable[str], lowercase_fallback: bool = True) -> tuple[int, int]:
    """(oov count, total count) over ``tokens``."""
    total = miss = 0
    for t in tokens:
        total += 1
        miss += not lookup(table, t, lowercase_fallback)[1]
    return miss, total


def apply_projection(table: EmbeddingTable, W: np.ndarray) -> EmbeddingTable:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape != (table.dim, table.dim):
        raise ConfigError(f"projection of shape {W.shape} does not fit dim {table.dim}")
    return EmbeddingTable(table.language, list(table.words), table.vectors @ W)


def normalized(table: EmbeddingTable) -> EmbeddingTable:
    norms = np.linalg.norm(table.vectors, axis=1, keepdims=True)
    return EmbeddingTable(table.language, list(table.words), table.vectors / np.where(norms > 0, norms, 1.0))


# --------------------------------------------------------------------------
# binary cache


def _write_str(buf, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _read_exact(stream, n: int) -> bytes:
    b = stream.read(n)
    if len(b) != n:
        raise FormatError("unexpected end of file")
    return b


def _read_str(stream) -> str:
    (n,) = struct.unpack("<I", _read_exact(stream, 4))
    try:
        return _read_exact(stream, n).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"invalid UTF-8: {exc}") from None


def write_cache(table: EmbeddingTable, stream: IO[bytes]) -> None:
    """XEMB layout: magic, u32 version, language, u32 count, u32 dim,
    length-prefixed words, then float32 vectors (all little-endian)."""
    buf = io.BytesIO()
    buf.write(XEMB_MAGIC)
    buf.write(struct.pack("<I", XEMB_VERSION))
    _write_str(buf, table.language)
    buf.write(struct.pack("<II", len(table), table.dim))
    for w in table.words:
        _write_str(buf, w)
    buf.write(table.vectors.astype("<f4").tobytes())
    stream.write(buf.getvalue())


def read_cache(stream: IO[bytes]) -> EmbeddingTable:
    if _read_exact(stream, 4) != XEMB_MAGIC:
        raise FormatError("not an XEMB file")
    (version,) = struct.unpack("<I", _read_exact(stream, 4))
    if version != XEMB_VERSION:
        raise FormatError(f"unsupported XEMB version {version}")
    language = _read_str(stream)
    count, dim = struct.unpack("<II", _read_exact(stream, 8))
    words = [_read_str(stream) for _ in range(count)]
    data = np.frombuffer(_read_exact(stream, 4 * count * dim), dtype="<f4")
    return EmbeddingTable(language, words, data.reshape(count, dim).astype(np.float64))


def load_table(path: str, cap: int | None = DEFAULT_CAP, language: str = "") -> EmbeddingTable:
    """Load either a ``.vec`` text file or an XEMB cache, sniffing the magic."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == XEMB_MAGIC:
        with open(path, "rb") as fh:
            table = read_cache(fh)
        if cap is not None and len(table) > cap:
            table = EmbeddingTable(table.language, table.words[:cap], table.vectors[:cap])
        if language and not table.language:
            table.language = language
        return table
    with open(path, encoding="utf-8", errors="surrogateescape") as fh:
        return load_vectors(fh, cap=cap, language=language)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    return (a / np.where(na > 0, na, 1.0)) @ (b / np.where(nb > 0, nb, 1.0)).T


__all__ = [
    "DEFAULT_CAP", "EmbeddingTable", "load_vectors", "save_vectors", "lookup", "embed_tokens",
    "oov_rate", "apply_projection", "normalized", "write_cache", "read_cache", "load_table",
    "cosine_matrix",
]
