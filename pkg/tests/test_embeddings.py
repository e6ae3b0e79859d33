import io
import logging

import numpy as np
import pytest

from xote.align import align_tables
from xote.embeddings import (
    EmbeddingTable,
    apply_projection,
    cosine_matrix,
    embed_tokens,
    load_table,
    load_vectors,
    lookup,
    oov_rate,
    read_cache,
    save_vectors,
    write_cache,
)
from xote.errors import ConfigError, FormatError
from xote.synthetic import random_rotation


def vec_lines(n, dim=3, start=0):
    return [f"w{i} " + " ".join(str(i + j / 10) for j in range(dim)) + "\n" for i in range(start, start + n)]


def test_minimal_file_with_header():
    t = load_vectors(io.StringIO("2 3\nfoo 1 2 3\nbar 4 5 6\n"))
    assert len(t) == 2 and t.dim == 3
    assert np.array_equal(t.vectors[1], [4, 5, 6])


def test_header_optional():
    t = load_vectors(io.StringIO("foo 1 2\nbar 3 4\n"))
    assert t.words == ["foo", "bar"] and t.dim == 2


def test_cap_keeps_first_words():
    t = load_vectors(vec_lines(60_000, dim=2), cap=50_000)
    assert len(t) == 50_000 and t.words[-1] == "w49999"


def test_duplicate_keeps_first(caplog):
    lines = vec_lines(4) + ["w0 9 9 9\n"] + vec_lines(3, start=4) + ["w0 7 7 7\n"]
    with caplog.at_level(logging.WARNING):
        t = load_vectors(lines)
    assert np.array_equal(lookup(t, "w0")[0], [0, 0.1, 0.2])
    assert len(t) == 7 and "duplicate" in caplog.text


def test_inconsistent_dim_reports_line():
    with pytest.raises(FormatError, match="line 3"):
        load_vectors(io.StringIO("2 2\na 1 2\nb 1 2 3\n"))


@pytest.mark.parametrize("bad", ["nan", "inf", "abc"])
def test_bad_values_rejected(bad):
    with pytest.raises(FormatError, match="line 2"):
        load_vectors(io.StringIO(f"a 1 2\nb 1 {bad}\n"))


def test_lookup_rules():
    t = EmbeddingTable("fr", ["moules", "Paris"], np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(lookup(t, "Paris")[0], [3, 4])
    v, found = lookup(t, "Moules")
    assert found and np.array_equal(v, [1, 2])
    v, found = lookup(t, "Moules", lowercase_fallback=False)
    assert not found
    v, found = lookup(t, "frites")
    assert not found and np.array_equal(v, [0, 0])
    assert oov_rate(t, ["moules", "Moules", "x"]) == (1, 3)
    assert embed_tokens(t, ["x", "Paris"]).shape == (2, 2)


def test_vectors_are_frozen():
    t = EmbeddingTable("xx", ["a"], np.ones((1, 2)))
    with pytest.raises(ValueError):
        t.vectors[0, 0] = 5.0


def test_projection_identity_and_isometry(rng):
    t = EmbeddingTable("xx", [f"w{i}" for i in range(40)], rng.standard_normal((40, 8)))
    assert np.array_equal(apply_projection(t, np.eye(8)).vectors, t.vectors)
    p = apply_projection(t, random_rotation(8, 3))
    np.testing.assert_allclose(cosine_matrix(p.vectors, p.vectors), cosine_matrix(t.vectors, t.vectors), atol=1e-9)
    with pytest.raises(ConfigError):
        apply_projection(t, np.eye(7))


def test_aligned_nearest_neighbour():
    r = np.random.default_rng(11)
    en = [f"e{i}" for i in range(200)] + ["one"]
    es = [f"s{i}" for i in range(200)] + ["uno"]
    E = r.standard_normal((201, 20))
    R = random_rotation(20, 5)
    src = EmbeddingTable("es", es, (E + 0.01 * r.standard_normal(E.shape)) @ R)
    tgt = EmbeddingTable("en", en, E)
    pairs = list(zip(es[:200], en[:200]))  # held out: uno/one
    W = align_tables(src, tgt, pairs)
    proj = apply_projection(src, W)
    sims = cosine_matrix(proj.vectors[[proj.index["uno"]]], tgt.vectors)[0]
    assert tgt.words[int(np.argmax(sims))] == "one"


def test_text_round_trip(rng):
    t = EmbeddingTable("xx", ["a", "b", "ç"], rng.standard_normal((3, 4)))
    buf = io.StringIO()
    save_vectors(t, buf, fmt="%.17g")
    back = load_vectors(io.StringIO(buf.getvalue()))
    assert back.words == t.words and np.array_equal(back.vectors, t.vectors)


def test_binary_cache(tmp_path, rng):
    t = EmbeddingTable("nl", ["a", "bé", "c"], rng.standard_normal((3, 5)))
    buf = io.BytesIO()
    write_cache(t, buf)
    raw = buf.getvalue()
    assert raw[:4] == b"XEMB"
    back = read_cache(io.BytesIO(raw))
    assert back.language == "nl" and back.words == t.words
    np.testing.assert_allclose(back.vectors, t.vectors.astype(np.float32), rtol=0)
    path = tmp_path / "t.xemb"
    path.write_bytes(raw)
    assert load_table(str(path), cap=2).words == ["a", "bé"]
    with pytest.raises(FormatError):
        read_cache(io.BytesIO(raw[:-3]))
    with pytest.raises(FormatError):
        read_cache(io.BytesIO(b"NOPE" + raw[4:]))
