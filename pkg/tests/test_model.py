import io
import math

import numpy as np
import pytest

from xote.data import make_sentence
from xote.embeddings import EmbeddingTable
from xote.errors import ConfigError, FormatError, NumericError
from xote.iob import TargetSpan
from xote.model import (
    ModelConfig,
    ModelParams,
    batch_loss,
    decode_tags,
    forward,
    init_model,
    load_checkpoint,
    loss_and_gradients,
    pad_batch,
    param_shapes,
    predict_corpus,
    predict_spans,
    save_checkpoint,
    sentence_matrix,
    tag_distributions,
    tag_ids,
)
from xote.tensor import gradient_check, make_rng

SMALL = ModelConfig(layers=2, conv_dim=8, dense_dim=6)
WINE = "The wine list is also really nice."


@pytest.fixture(scope="module")
def table():
    words = "the wine list is also really nice . moules were excellent".split()
    r = np.random.default_rng(0)
    return EmbeddingTable("en", words, r.standard_normal((len(words), 5)))


def batch(table, texts, cfg=SMALL, spans=None):
    sents = [make_sentence(f"s{i}", "en", t, (spans or {}).get(i, ())) for i, t in enumerate(texts)]
    mats = [sentence_matrix(s, {"en": table}, cfg) for s in sents]
    return sents, pad_batch(mats, [tag_ids(s.tags) for s in sents])


def test_config_validation():
    for bad in ({"kernel_width": 2}, {"layers": 0}, {"dropout_hidden": 1.0}, {"l1_lambda": -1}, {"activation": "tanh"}):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"layer": 3})
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL


def test_init_deterministic_zero_bias():
    a, b = init_model(SMALL, 5, seed=3), init_model(SMALL, 5, seed=3)
    assert list(a) == [n for n, _ in param_shapes(SMALL, 5)]
    for k in a:
        assert np.array_equal(a[k], b[k]) and a[k].shape == dict(param_shapes(SMALL, 5))[k]
        if k.endswith("b") or k.endswith("bias"):
            assert not a[k].any()
    assert not np.array_equal(a["dense.W"], init_model(SMALL, 5, seed=4)["dense.W"])


def test_forward_distributions(table):
    params = init_model(SMALL, 5, 0)
    _, (X, mask, _) = batch(table, [WINE, "nice"])
    q, _ = forward(params, SMALL, X, mask)
    assert q.shape == (2, 8, 3)
    assert np.all(q > 0) and np.allclose(q.sum(-1), 1.0)


def test_single_token_sentence(table):
    s = make_sentence("x", "en", "wine")
    q = tag_distributions(init_model(SMALL, 5, 0), SMALL, {"en": table}, s)
    assert q.shape == (1, 3)


def test_empty_sentence_rejected(table):
    params = init_model(SMALL, 5, 0)
    with pytest.raises(ConfigError):
        forward(params, SMALL, np.zeros((1, 0, 5)), np.zeros((1, 0), bool))
    with pytest.raises(ConfigError):
        pad_batch([np.zeros((0, 5))])


def test_vocab_order_irrelevant(table):
    perm = np.random.default_rng(1).permutation(len(table))
    shuffled = EmbeddingTable("en", [table.words[i] for i in perm], table.vectors[perm])
    params = init_model(SMALL, 5, 0)
    s = make_sentence("x", "en", WINE)
    assert np.array_equal(tag_distributions(params, SMALL, {"en": table}, s),
                          tag_distributions(params, SMALL, {"en": shuffled}, s))


def test_padding_does_not_change_outputs(table):
    params = init_model(SMALL, 5, 2)
    texts = [WINE, "moules were excellent", "nice"]
    sents, (X, mask, _) = batch(table, texts)
    q, _ = forward(params, SMALL, X, mask)
    for b, s in enumerate(sents):
        np.testing.assert_allclose(q[b, : len(s)], tag_distributions(params, SMALL, {"en": table}, s), atol=1e-12)


def test_inference_deterministic(table):
    params = init_model(ModelConfig(layers=1, conv_dim=4, dense_dim=4), 5, 0)
    _, (X, mask, _) = batch(table, [WINE])
    cfg = ModelConfig(layers=1, conv_dim=4, dense_dim=4)
    assert np.array_equal(forward(params, cfg, X, mask)[0], forward(params, cfg, X, mask)[0])
    with pytest.raises(ConfigError):
        forward(params, cfg, X, mask, train=True)


def constant_output(params, logits):
    p = params.copy()
    p["tag.W"][:] = 0.0
    p["tag.b"][:] = logits
    return p


def test_loss_uniform_outputs_is_ln3(table):
    cfg = ModelConfig(layers=2, conv_dim=8, dense_dim=6, l1_lambda=0.0)
    _, (X, mask, gold) = batch(table, ["the wine list is also really nice moules were excellent"], cfg)
    assert X.shape[1] == 10
    loss = batch_loss(constant_output(init_model(cfg, 5, 0), [0, 0, 0]), cfg, X, mask, gold)
    assert loss == pytest.approx(math.log(3), abs=1e-12)


def test_loss_gold_outputs_is_l1_only(table):
    params = init_model(SMALL, 5, 0)
    _, (X, mask, gold) = batch(table, [WINE])  # all O
    loss, _ = loss_and_gradients(constant_output(params, [-40.0, 40.0, -40.0]), SMALL, X, mask, gold)
    l1 = SMALL.l1_lambda * np.abs(params["dense.W"]).sum()
    assert loss == pytest.approx(l1, abs=1e-12)


@pytest.mark.parametrize("train", [False, True])
def test_end_to_end_gradients(table, train):
    cfg = ModelConfig(layers=3, conv_dim=7, dense_dim=6, l1_lambda=1e-3)
    params = init_model(cfg, 5, 1)
    _, (X, mask, gold) = batch(table, ["the wine list is nice", "moules were excellent"], cfg,
                               spans={0: [(4, 13)], 1: [(0, 6)]})
    seed = 11
    loss, grads = loss_and_gradients(params, cfg, X, mask, gold, train, make_rng(seed, "d") if train else None)
    err = gradient_check(
        lambda p: batch_loss(p, cfg, X, mask, gold, train, make_rng(seed, "d") if train else None),
        params, grads, samples=40)
    assert err < 1e-4


def test_nonfinite_loss_reports_sentence(table):
    cfg = ModelConfig(layers=1, conv_dim=4, dense_dim=4)
    params = init_model(cfg, 5, 0)
    params["tag.W"][0, 0] = np.nan
    _, (X, mask, gold) = batch(table, [WINE], cfg)
    with pytest.raises(NumericError, match="s-bad"):
        loss_and_gradients(params, cfg, X, mask, gold, ids=["s-bad"])


def test_decode_ties():
    # column order (I, O, B)
    assert decode_tags(np.array([[0.4, 0.4, 0.2]])) == ["O"]
    assert decode_tags(np.array([[0.4, 0.2, 0.4]])) == ["I"]
    assert decode_tags(np.array([[0.1, 0.1, 0.8], [0.1, 0.8, 0.1]])) == ["B", "O"]


def fitted_wine_model():
    # feature 0 marks target words, feature 1 is constant; I wins on targets
    cfg = ModelConfig(layers=1, kernel_width=1, conv_dim=2, dense_dim=2, dropout_embed=0, dropout_hidden=0)
    params = ModelParams()
    params["conv0.weights"] = np.eye(2)[None]
    params["conv0.bias"] = np.zeros(2)
    params["dense.W"] = np.eye(2)
    params["dense.b"] = np.zeros(2)
    params["tag.W"] = np.array([[10.0, 0.0, 0.0], [0.0, 5.0, 0.0]])
    params["tag.b"] = np.zeros(3)
    words = "The wine list is also really nice .".split()
    vecs = [[1.0 if w in ("wine", "list") else 0.0, 1.0] for w in words]
    return params, cfg, {"en": EmbeddingTable("en", words, np.array(vecs))}


def test_predict_wine_list():
    params, cfg, tables = fitted_wine_model()
    s = make_sentence("w", "en", WINE)
    assert predict_spans(params, cfg, tables, s) == [TargetSpan(4, 13, "wine list")]
    s2 = make_sentence("n", "en", "The nice .")
    assert predict_spans(params, cfg, tables, s2) == []
    assert predict_corpus(params, cfg, tables, [s, s2]) == {"w": [TargetSpan(4, 13, "wine list")], "n": []}


def test_checkpoint_round_trip():
    params = init_model(SMALL, 5, 0)
    buf = io.BytesIO()
    save_checkpoint(params, SMALL, buf, {"sources": ["en"], "seed": 0})
    back, cfg, meta = load_checkpoint(io.BytesIO(buf.getvalue()), expected=SMALL)
    assert cfg == SMALL and meta == {"sources": ["en"], "seed": 0}
    assert list(back) == list(params)
    for k in params:
        assert np.array_equal(back[k], params[k]) and back[k].dtype == np.float64
    buf2 = io.BytesIO()
    save_checkpoint(back, cfg, buf2, meta)
    assert buf2.getvalue() == buf.getvalue()


def test_checkpoint_failures():
    buf = io.BytesIO()
    save_checkpoint(init_model(SMALL, 5, 0), SMALL, buf)
    raw = buf.getvalue()
    for cut in (3, 10, len(raw) // 2, len(raw) - 1):
        with pytest.raises(FormatError):
            load_checkpoint(io.BytesIO(raw[:cut]))
    with pytest.raises(FormatError):
        load_checkpoint(io.BytesIO(raw + b"\0"))
    with pytest.raises(FormatError):
        load_checkpoint(io.BytesIO(b"XOTF" + raw[4:]))
    with pytest.raises(FormatError):
        load_checkpoint(io.BytesIO(raw[:4] + b"\x02\0\0\0" + raw[8:]))
    with pytest.raises(ConfigError):
        load_checkpoint(io.BytesIO(raw), expected=ModelConfig(layers=3, conv_dim=8, dense_dim=6))
