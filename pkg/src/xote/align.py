"""Orthogonal Procrustes alignment of two embedding spaces from a bilingual
dictionary, with a one-sided Jacobi SVD and retrieval diagnostics."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from .embeddings import EmbeddingTable, _read_exact, _read_str, _write_str
from .errors import ConfigError, FormatError, NumericError
from .tensor import make_rng

logger = logging.getLogger(__name__)

XPRJ_MAGIC = b"XPRJ"
XPRJ_VERSION = 1


@dataclass
class SvdResult:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _round_robin(n: int):
    """n-1 rounds of n/2 disjoint index pairs covering every pair once."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        rounds.append((np.array(players[:half]), np.array(players[half:][::-1])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def svd(M: np.ndarray, max_sweeps: int = 60, tol: float | None = None) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Pairs of columns are orthogonalised in parallel rounds until every
    normalised inner product falls below ``tol``. Singular values come back
    non-increasing; left vectors for zero singular values are completed to
    an orthonormal basis.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ConfigError(f"svd needs a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericError("svd input has non-finite entries")
    if M.shape[0] < M.shape[1]:
        r = svd(M.T, max_sweeps, tol)
        return SvdResult(r.V, r.S, r.U)
    m, n = M.shape
    if tol is None:
        tol = max(n, 1) * np.finfo(float).eps
    A = M.copy()
    V = np.eye(n)
    size = n + (n % 2)
    rounds = _round_robin(size) if size > 1 else []
    off = 0.0
    for _ in range(max_sweeps):
        off = 0.0
        for I, J in rounds:
            keep = (I < n) & (J < n)
            I, J = I[keep], J[keep]
            if I.size == 0:
                continue
            Ai, Aj = A[:, I], A[:, J]
            alpha = np.einsum("ij,ij->j", Ai, Ai)
            beta = np.einsum("ij,ij->j", Aj, Aj)
            gamma = np.einsum("ij,ij->j", Ai, Aj)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            off = max(off, float(ratio.max()))
            act = ratio > tol
            if not act.any():
                continue
            zeta = np.where(act, (beta - alpha) / np.where(act, 2.0 * gamma, 1.0), 0.0)
            t = np.where(act, np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)), 0.0)
            t = np.where(act & (zeta == 0), 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            A[:, I], A[:, J] = c * Ai - s * Aj, s * Ai + c * Aj
            Vi, Vj = V[:, I], V[:, J]
            V[:, I], V[:, J] = c * Vi - s * Vj, s * Vi + c * Vj
        if off <= tol:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge in {max_sweeps} sweeps (residual {off:.3g})")

    S = np.linalg.norm(A, axis=0)
    order = np.argsort(-S, kind="stable")
    S, A, V = S[order], A[:, order], V[:, order]
    cutoff = S[0] * max(m, n) * np.finfo(float).eps if n and S[0] > 0 else 0.0
    good = S > cutoff
    U = np.zeros((m, n))
    U[:, good] = A[:, good] / S[good]
    S = np.where(good, S, 0.0)
    if not good.all():
        U = _complete_basis(U, good)
    return SvdResult(U, S, V)


def _complete_basis(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    # fill the columns of U flagged as not good with an orthonormal complement
    m = U.shape[0]
    r = int(good.sum())
    q, _ = np.linalg.qr(np.hstack([U[:, good], np.eye(m)]))
    out = U.copy()
    out[:, ~good] = q[:, r:r + int((~good).sum())]
    return out


def procrustes_align(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Orthogonal W minimising ||X W - Y||_F: W = U V^T with X^T Y = U S V^T."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2:
        raise ConfigError(f"paired matrices must have equal 2-d shapes, got {X.shape} and {Y.shape}")
    n, d = X.shape
    if n < d:
        logger.warning("only %d dictionary pairs for dimension %d", n, d)
    res = svd(X.T @ Y)
    if np.any(res.S == 0):
        logger.warning("cross-covariance is rank deficient (%d zero singular values)", int((res.S == 0).sum()))
    return res.U @ res.V.T


# --------------------------------------------------------------------------
# dictionaries


@dataclass
class BilingualDictionary:
    train: list[tuple[str, str]]
    test: list[tuple[str, str]] = field(default_factory=list)


def read_dictionary(stream: IO[str] | Iterable[str]) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise FormatError(f"dictionary line {lineno}: expected 2 fields, found {len(parts)}")
        pairs.append((parts[0], parts[1]))
    return pairs


def split_dictionary(pairs: Sequence[tuple[str, str]], test_fraction: float, seed: int = 0) -> BilingualDictionary:
    """Hold out a fraction of distinct source words for testing."""
    sources = list(dict.fromkeys(s for s, _ in pairs))
    n_test = int(round(len(sources) * test_fraction))
    perm = make_rng(seed, "dictionary").permutation(len(sources))
    held = {sources[i] for i in perm[:n_test]}
    return BilingualDictionary(
        train=[p for p in pairs if p[0] not in held],
        test=[p for p in pairs if p[0] in held],
    )


def dictionary_matrices(src: EmbeddingTable, tgt: EmbeddingTable, pairs, normalize: bool = True):
    """Stack the vectors of usable pairs. Returns (X, Y, n_dropped)."""
    if src.dim != tgt.dim:
        raise ConfigError(f"dimension mismatch: {src.dim} vs {tgt.dim}")
    si, ti = [], []
    dropped = 0
    for s, t in pairs:
        if s in src.index and t in tgt.index:
            si.append(src.index[s])
            ti.append(tgt.index[t])
        else:
            dropped += 1
    if dropped:
        logger.warning("%d of %d dictionary pairs dropped (out of vocabulary)", dropped, len(pairs))
    X, Y = src.vectors[si], tgt.vectors[ti]
    if normalize:
        X = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-300)
        Y = Y / np.maximum(np.linalg.norm(Y, axis=1, keepdims=True), 1e-300)
    return X, Y, dropped


def align_tables(src: EmbeddingTable, tgt: EmbeddingTable, pairs, normalize: bool = True) -> np.ndarray:
    X, Y, _ = dictionary_matrices(src, tgt, pairs, normalize)
    if len(X) == 0:
        raise ConfigError("no usable dictionary pairs")
    return procrustes_align(X, Y)


@dataclass
class PrecisionReport:
    k: int
    precision: float
    hits: int
    evaluated: int
    excluded: int


def translation_precision(src: EmbeddingTable, tgt: EmbeddingTable, test_pairs, k: int = 1) -> PrecisionReport:
    """Precision@k of cosine nearest-neighbour retrieval in ``tgt`` for the
    (already projected) source vectors. Ties go to the earlier vocabulary
    entry. A query counts as a hit if any of its gold targets ranks < k."""
    if src.dim != tgt.dim:
        raise ConfigError(f"dimension mismatch: {src.dim} vs {tgt.dim}")
    gold: dict[str, list[int]] = {}
    excluded = 0
    for s, t in test_pairs:
        if s not in src.index or t not in tgt.index:
            excluded += 1
            continue
        gold.setdefault(s, [])
        if tgt.index[t] not in gold[s]:
            gold[s].append(tgt.index[t])
    if excluded:
        logger.info("%d test pairs excluded (out of vocabulary)", excluded)
    T = tgt.vectors / np.maximum(np.linalg.norm(tgt.vectors, axis=1, keepdims=True), 1e-300)
    queries = list(gold)
    hits = 0
    positions = np.arange(len(tgt))
    for start in range(0, len(queries), 512):
        chunk = queries[start:start + 512]
        Q = src.vectors[[src.index[w] for w in chunk]]
        Q = Q / np.maximum(np.linalg.norm(Q, axis=1, keepdims=True), 1e-300)
        sims = Q @ T.T
        for row, w in zip(sims, chunk):
            for g in gold[w]:
                rank = np.count_nonzero(row > row[g]) + np.count_nonzero((row == row[g]) & (positions < g))
                if rank < k:
                    hits += 1
                    break
    n = len(queries)
    return PrecisionReport(k, hits / n if n else 0.0, hits, n, excluded)


# --------------------------------------------------------------------------
# projection container


def write_projection(W: np.ndarray, stream: IO[bytes], src_lang: str = "", tgt_lang: str = "") -> None:
    """XPRJ layout: magic, u32 version, source and target language tags,
    u32 rows, u32 cols, float64 values row-major (little-endian)."""
    W = np.asarray(W, dtype=np.float64)
    buf = io.BytesIO()
    buf.write(XPRJ_MAGIC)
    buf.write(struct.pack("<I", XPRJ_VERSION))
    _write_str(buf, src_lang)
    _write_str(buf, tgt_lang)
    buf.write(struct.pack("<II", *W.shape))
    buf.write(W.astype("<f8").tobytes())
    stream.write(buf.getvalue())


def read_projection(stream: IO[bytes]) -> tuple[np.ndarray, str, str]:
    if _read_exact(stream, 4) != XPRJ_MAGIC:
        raise FormatError("not an XPRJ file")
    (version,) = struct.unpack("<I", _read_exact(stream, 4))
    if version != XPRJ_VERSION:
        raise FormatError(f"unsupported XPRJ version {version}")
    src_lang, tgt_lang = _read_str(stream), _read_str(stream)
    rows, cols = struct.unpack("<II", _read_exact(stream, 8))
    W = np.frombuffer(_read_exact(stream, 8 * rows * cols), dtype="<f8").reshape(rows, cols).copy()
    return W, src_lang, tgt_lang
