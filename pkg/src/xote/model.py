"""Convolutional IOB tagger over frozen, cross-lingually aligned embeddings.

embeddings -> dropout -> L x (same-padded conv, ReLU, dropout)
           -> dense ReLU -> dropout -> softmax over (I, O, B) per token

Sentences are batched by zero-padding to the longest one. Hidden states at
padded positions are re-zeroed after every layer, so a sentence gets the
same activations whatever it is batched with.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, fields
from typing import IO, Mapping, Sequence

import numpy as np

from .embeddings import EmbeddingTable, embed_tokens, _read_exact
from .errors import ConfigError, FormatError, NumericError
from .iob import TAGS, TIE_ORDER, TargetSpan, tags_to_spans
from .tensor import (
    LOG_FLOOR,
    ConvKernel,
    conv1d,
    conv1d_backward,
    dropout_mask,
    make_rng,
    l1_penalty,
    relu,
    relu_backward,
    softmax,
)

TAG_INDEX = {t: i for i, t in enumerate(TAGS)}
XOTE_MAGIC = b"XOTE"
XOTE_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 5
    kernel_width: int = 3
    conv_dim: int = 300
    dense_dim: int = 300
    dropout_embed: float = 0.3
    dropout_hidden: float = 0.5
    l1_lambda: float = 1e-6
    activation: str = "relu"
    lowercase_fallback: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.conv_dim < 1 or self.dense_dim < 1:
            raise ConfigError("layer count and widths must be positive")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ConfigError(f"kernel width must be odd, got {self.kernel_width}")
        for rate in (self.dropout_embed, self.dropout_hidden):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"dropout rate {rate} outside [0, 1)")
        if self.l1_lambda < 0:
            raise ConfigError("l1_lambda must be non-negative")
        if self.activation != "relu":
            raise ConfigError("only relu activations are supported")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class ModelParams(OrderedDict):
    """Named trainable tensors in declaration order: conv0..conv{L-1}
    weights/bias, dense W/b, then the tag output layer W/b."""

    @property
    def conv_layers(self) -> list[ConvKernel]:
        n = sum(1 for k in self if k.endswith(".weights"))
        return [ConvKernel(self[f"conv{i}.weights"], self[f"conv{i}.bias"]) for i in range(n)]

    @property
    def dense(self):
        return self["dense.W"], self["dense.b"]

    @property
    def output(self):
        return self["tag.W"], self["tag.b"]

    @property
    def embed_dim(self) -> int:
        return self["conv0.weights"].shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams((k, v.copy()) for k, v in self.items())


def param_shapes(cfg: ModelConfig, embed_dim: int) -> list[tuple[str, tuple]]:
    shapes = []
    d_in = embed_dim
    for i in range(cfg.layers):
        shapes.append((f"conv{i}.weights", (cfg.kernel_width, d_in, cfg.conv_dim)))
        shapes.append((f"conv{i}.bias", (cfg.conv_dim,)))
        d_in = cfg.conv_dim
    shapes += [
        ("dense.W", (cfg.conv_dim, cfg.dense_dim)),
        ("dense.b", (cfg.dense_dim,)),
        ("tag.W", (cfg.dense_dim, len(TAGS))),
        ("tag.b", (len(TAGS),)),
    ]
    return shapes


def init_model(cfg: ModelConfig, embed_dim: int, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if embed_dim < 1:
        raise ConfigError("embedding dimension must be positive")
    rng = make_rng(seed, "init")
    params = ModelParams()
    for name, shape in param_shapes(cfg, embed_dim):
        if len(shape) == 1:
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 3:
            fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def glorot_limit(shape: tuple) -> float:
    if len(shape) == 3:
        return float(np.sqrt(6.0 / (shape[0] * shape[1] + shape[0] * shape[2])))
    return float(np.sqrt(6.0 / (shape[0] + shape[1])))


# --------------------------------------------------------------------------
# inputs


def sentence_matrix(sentence, tables: Mapping[str, EmbeddingTable], cfg: ModelConfig) -> np.ndarray:
    """Frozen embedding rows for a sentence, using its language's table."""
    try:
        table = tables[sentence.language]
    except KeyError:
        raise ConfigError(f"no embedding table for language {sentence.language!r}") from None
    return embed_tokens(table, (t.text for t in sentence.tokens), cfg.lowercase_fallback)


def pad_batch(mats: Sequence[np.ndarray], golds: Sequence[Sequence[int]] | None = None):
    """Stack variable-length inputs: returns (X, mask, gold) with gold = -1
    at padded positions (or None)."""
    if not mats or any(len(m) == 0 for m in mats):
        raise ConfigError("sentences must be non-empty")
    n = max(len(m) for m in mats)
    d = mats[0].shape[1]
    X = np.zeros((len(mats), n, d))
    mask = np.zeros((len(mats), n), dtype=bool)
    for b, m in enumerate(mats):
        X[b, : len(m)] = m
        mask[b, : len(m)] = True
    gold = None
    if golds is not None:
        gold = np.full((len(mats), n), -1, dtype=np.int64)
        for b, g in enumerate(golds):
            gold[b, : len(g)] = g
    return X, mask, gold


def tag_ids(tags: Sequence[str]) -> list[int]:
    return [TAG_INDEX[t] for t in tags]


# --------------------------------------------------------------------------
# forward / backward


def forward(params: ModelParams, cfg: ModelConfig, X: np.ndarray, mask: np.ndarray, train: bool = False, rng=None):
    """Tag distributions (B, n, 3) plus a cache for :func:`backward`.

    Dropout is only applied when ``train`` is set, with masks drawn from
    ``rng`` in layer order.
    """
    if X.shape[-2] < 1:
        raise ConfigError("empty sentence")
    if X.shape[-1] != params.embed_dim:
        raise ConfigError(f"embedding dim {X.shape[-1]} != model input dim {params.embed_dim}")
    if train and rng is None:
        raise ConfigError("training forward pass needs an rng for dropout")
    m = mask[..., None].astype(float)

    def drop(h, rate):
        if not train or rate == 0.0:
            return h, None
        dm = dropout_mask(h.shape, rate, rng)
        return h * dm, dm

    h, dm0 = drop(X * m, cfg.dropout_embed)
    cache = {"mask": m, "inputs": [h], "pre": [], "drop": [dm0]}
    for kernel in params.conv_layers:
        z = conv1d(h, kernel)
        a = relu(z) * m
        h, dm = drop(a, cfg.dropout_hidden)
        cache["pre"].append(z)
        cache["drop"].append(dm)
        cache["inputs"].append(h)
    W, b = params.dense
    z = h @ W + b
    a = relu(z) * m
    h, dm = drop(a, cfg.dropout_hidden)
    cache["pre"].append(z)
    cache["drop"].append(dm)
    cache["inputs"].append(h)
    Wt, bt = params.output
    logits = h @ Wt + bt
    cache["logits"] = logits
    return softmax(logits), cache


def backward(params: ModelParams, cfg: ModelConfig, cache: dict, grad_logits: np.ndarray) -> dict:
    """Gradients of all tensors given dLoss/dlogits. Embeddings get none."""
    grads = {}
    m = cache["mask"]
    L = len(params.conv_layers)
    h = cache["inputs"][-1]
    Wt, _ = params.output
    grads["tag.W"] = h.reshape(-1, h.shape[-1]).T @ grad_logits.reshape(-1, Wt.shape[1])
    grads["tag.b"] = grad_logits.reshape(-1, Wt.shape[1]).sum(axis=0)
    g = grad_logits @ Wt.T

    # dense
    if cache["drop"][L + 1] is not None:
        g = g * cache["drop"][L + 1]
    g = relu_backward(cache["pre"][L], g * m)
    W, _ = params.dense
    h_in = cache["inputs"][L]
    grads["dense.W"] = h_in.reshape(-1, W.shape[0]).T @ g.reshape(-1, W.shape[1])
    grads["dense.b"] = g.reshape(-1, W.shape[1]).sum(axis=0)
    g = g @ W.T

    for i in reversed(range(L)):
        if cache["drop"][i + 1] is not None:
            g = g * cache["drop"][i + 1]
        g = relu_backward(cache["pre"][i], g * m)
        kernel = ConvKernel(params[f"conv{i}.weights"], params[f"conv{i}.bias"])
        g, gw, gb = conv1d_backward(cache["inputs"][i], kernel, g)
        grads[f"conv{i}.weights"] = gw
        grads[f"conv{i}.bias"] = gb
    return {k: grads[k] for k in params}


def _token_loss(q, mask, gold, params, cfg, ids):
    real = mask & (gold >= 0)
    n_real = int(real.sum())
    if n_real == 0:
        raise ConfigError("batch has no labelled tokens")
    g_idx = np.where(real, gold, 0)
    q_gold = np.take_along_axis(q, g_idx[..., None], axis=-1)[..., 0]
    token_loss = -np.log(np.maximum(q_gold, LOG_FLOOR))
    l1, l1_grad = l1_penalty(params["dense.W"], cfg.l1_lambda)
    loss = float(token_loss[real].sum() / n_real) + l1
    if not np.isfinite(loss):
        bad = np.argwhere(real & ~np.isfinite(token_loss))
        where = [(ids[b] if ids else int(b), int(t)) for b, t in bad[:5]]
        raise NumericError(f"non-finite loss at (sentence, token) {where}")
    return loss, real, n_real, g_idx, l1_grad


def batch_loss(params, cfg, X, mask, gold, train=False, rng=None) -> float:
    """The training objective alone (no backward pass)."""
    q, _ = forward(params, cfg, X, mask, train, rng)
    return _token_loss(q, mask, gold, params, cfg, None)[0]


def loss_and_gradients(
    params: ModelParams,
    cfg: ModelConfig,
    X: np.ndarray,
    mask: np.ndarray,
    gold: np.ndarray,
    train: bool = False,
    rng=None,
    ids: Sequence[str] | None = None,
):
    """Mean token cross-entropy over real tokens plus L1 on the dense
    weights. Returns (loss, grads)."""
    q, cache = forward(params, cfg, X, mask, train, rng)
    loss, real, n_real, g_idx, l1_grad = _token_loss(q, mask, gold, params, cfg, ids)
    p = np.zeros_like(q)
    np.put_along_axis(p, g_idx[..., None], 1.0, axis=-1)
    grad_logits = (q - p) * real[..., None] / n_real
    grads = backward(params, cfg, cache, grad_logits)
    grads["dense.W"] = grads["dense.W"] + l1_grad
    return loss, grads


# --------------------------------------------------------------------------
# prediction

_TIE_COLUMNS = [TAG_INDEX[t] for t in TIE_ORDER]


def decode_tags(q: np.ndarray) -> list[str]:
    """Argmax per row of a (n, 3) distribution; exact ties resolve O < I < B."""
    best = np.argmax(q[..., _TIE_COLUMNS], axis=-1)
    return [TIE_ORDER[i] for i in np.atleast_1d(best)]


def tag_distributions(params, cfg, tables, sentence) -> np.ndarray:
    X, mask, _ = pad_batch([sentence_matrix(sentence, tables, cfg)])
    q, _ = forward(params, cfg, X, mask)
    return q[0]


def predict_spans(params, cfg, tables, sentence) -> list[TargetSpan]:
    return tags_to_spans(sentence.tokens, decode_tags(tag_distributions(params, cfg, tables, sentence)), sentence.text)


def predict_corpus(params, cfg, tables, sentences, batch_size: int = 64, mats=None) -> dict[str, list[TargetSpan]]:
    """Spans for many sentences, batched; keyed by sentence id."""
    out: dict[str, list[TargetSpan]] = {}
    sentences = list(sentences)
    order = sorted(range(len(sentences)), key=lambda i: len(sentences[i]))
    for start in range(0, len(order), batch_size):
        idx = [i for i in order[start:start + batch_size] if len(sentences[i]) > 0]
        for i in order[start:start + batch_size]:
            if len(sentences[i]) == 0:
                out[sentences[i].id] = []
        if not idx:
            continue
        batch_mats = [mats[i] if mats is not None else sentence_matrix(sentences[i], tables, cfg) for i in idx]
        X, mask, _ = pad_batch(batch_mats)
        q, _ = forward(params, cfg, X, mask)
        for b, i in enumerate(idx):
            s = sentences[i]
            out[s.id] = tags_to_spans(s.tokens, decode_tags(q[b, : len(s)]), s.text)
    return out


# --------------------------------------------------------------------------
# checkpoints


def _config_block(cfg: ModelConfig, embed_dim: int, metadata: Mapping | None) -> bytes:
    lines = [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in cfg.to_dict().items()]
    lines.append(f"embed_dim={embed_dim}")
    for k in sorted(metadata or {}):
        lines.append(f"meta.{k}={json.dumps(metadata[k], sort_keys=True)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config_block(text: str):
    raw, meta = {}, {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"bad config line {line!r}")
        if key.startswith("meta."):
            meta[key[5:]] = json.loads(value)
        else:
            raw[key] = value
    try:
        embed_dim = int(raw.pop("embed_dim"))
        kwargs = {}
        for f in fields(ModelConfig):
            v = raw.pop(f.name)
            if f.type in ("int", int):
                kwargs[f.name] = int(v)
            elif f.type in ("float", float):
                kwargs[f.name] = float(v)
            elif f.type in ("bool", bool):
                kwargs[f.name] = v == "True"
            else:
                kwargs[f.name] = v
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad checkpoint config: {exc}") from None
    if raw:
        raise FormatError(f"unknown checkpoint config keys {sorted(raw)}")
    return ModelConfig(**kwargs), embed_dim, meta


def save_checkpoint(params: ModelParams, cfg: ModelConfig, stream: IO[bytes], metadata: Mapping | None = None) -> None:
    """XOTE layout: magic, u32 version, u32-length key=value config block,
    u32 tensor count, then per tensor u32 ndim, u32 dims and float64 data."""
    block = _config_block(cfg, params.embed_dim, metadata)
    parts = [XOTE_MAGIC, struct.pack("<I", XOTE_VERSION), struct.pack("<I", len(block)), block]
    parts.append(struct.pack("<I", len(params)))
    for t in params.values():
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    stream.write(b"".join(parts))


def load_checkpoint(stream: IO[bytes], expected: ModelConfig | None = None):
    """Returns (params, cfg, metadata). Rejects corrupt or truncated files and,
    when ``expected`` is given, checkpoints saved under another config."""
    if _read_exact(stream, 4) != XOTE_MAGIC:
        raise FormatError("not an XOTE checkpoint")
    (version,) = struct.unpack("<I", _read_exact(stream, 4))
    if version != XOTE_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", _read_exact(stream, 4))
    try:
        text = _read_exact(stream, n).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config block is not UTF-8") from None
    cfg, embed_dim, meta = _parse_config_block(text)
    if expected is not None and expected != cfg:
        raise ConfigError(f"checkpoint config {cfg} conflicts with expected {expected}")
    shapes = param_shapes(cfg, embed_dim)
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    if count != len(shapes):
        raise FormatError(f"expected {len(shapes)} tensors, found {count}")
    params = ModelParams()
    for name, shape in shapes:
        (ndim,) = struct.unpack("<I", _read_exact(stream, 4))
        dims = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim))
        if tuple(dims) != shape:
            raise FormatError(f"tensor {name}: shape {dims} != {shape}")
        size = int(np.prod(shape))
        params[name] = np.frombuffer(_read_exact(stream, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if stream.read(1):
        raise FormatError("trailing data after last tensor")
    return params, cfg, meta
