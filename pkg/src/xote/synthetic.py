"""Synthetic restaurant-review corpora and twin embedding spaces.

Language ``aa`` uses English-like words; its twin ``bb`` has the same
sentences word by word with rewritten word forms, and embeddings that are
a noisy rotation of ``aa``'s. Used for tests, acceptance checks and the
``make-fixture`` command.
"""

from __future__ import annotations

import json
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass

import numpy as np

from .data import Sentence, make_sentence
from .embeddings import EmbeddingTable, save_vectors
from .tensor import make_rng

WORDS = {
    "noun": "pizza pasta wine service staff menu dessert salad fish bread soup coffee steak sushi waiter "
    "tea burger fries lobster ravioli curry tacos".split(),
    "adj": "good great bad nice cold tasty rude excellent salty fresh slow friendly".split(),
    "det": "the this our".split(),
    "cop": "is was".split(),
    "adv": "very really also quite so".split(),
    "pron": "i we".split(),
    "verb": "loved hated liked ordered enjoyed".split(),
    "conj": ["and"],
    "it": ["it"],
    "punct": [".", "!"],
    "comma": [","],
}

# each template is a list of slots; slots starting with "*" belong to a
# target, "*+" continues the previous target
TEMPLATES = [
    ["det", "*noun", "cop", "adv", "adj", "punct"],
    ["det", "*noun", "*+noun", "cop", "adj", "punct"],
    ["pron", "verb", "det", "*noun", "punct"],
    ["pron", "verb", "det", "*noun", "conj", "det", "*noun", "punct"],
    ["adj", "*noun", "comma", "adj", "*noun", "punct"],
    ["pron", "verb", "it", "adv", "punct"],
]

NO_SPACE_BEFORE = {".", "!", ","}


def translate_word(word: str) -> str:
    """Word form of ``word`` in the twin language."""
    if word in NO_SPACE_BEFORE:
        return word
    return "x" + word[::-1]


def base_vocabulary(dim: int = 32, seed: int = 0, filler: int = 300) -> dict[str, np.ndarray]:
    """Category-clustered vectors for the template words plus random filler."""
    rng = make_rng(seed, "vocab")
    vocab = {}
    for cat, words in WORDS.items():
        centroid = rng.standard_normal(dim)
        centroid *= 2.0 / np.linalg.norm(centroid)
        for w in words:
            vocab[w] = centroid + 0.6 * rng.standard_normal(dim) / np.sqrt(dim)
    for i in range(filler):
        vocab[f"w{i:04d}"] = rng.standard_normal(dim) / np.sqrt(dim) * 2.0
    return vocab


def random_rotation(dim: int, seed: int = 0) -> np.ndarray:
    q, r = np.linalg.qr(make_rng(seed, "rotation").standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def make_corpus(n: int, language: str, seed: int, split: str = "train", translate: bool = False) -> list[Sentence]:
    """``n`` templated sentences. With ``translate`` the twin language's word
    forms are used; the same seed yields parallel sentences."""
    rng = make_rng(seed, "corpus", split)
    out = []
    for k in range(n):
        slots = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
        words, roles = [], []
        for slot in slots:
            cat = slot.lstrip("*+")
            choices = WORDS[cat]
            words.append(choices[int(rng.integers(len(choices)))])
            roles.append("cont" if slot.startswith("*+") else "start" if slot.startswith("*") else None)
        if translate:
            words = [translate_word(w) for w in words]
        text, offsets = "", []
        for w in words:
            if text and w not in NO_SPACE_BEFORE:
                text += " "
            offsets.append((len(text), len(text) + len(w)))
            text += w
        spans = []
        for (a, b), role in zip(offsets, roles):
            if role == "start":
                spans.append([a, b])
            elif role == "cont":
                spans[-1][1] = b
        out.append(make_sentence(f"{language}-{split}-{k}", language, text, [tuple(s) for s in spans]))
    return out


@dataclass
class TwinLanguages:
    source: EmbeddingTable  # aa
    target: EmbeddingTable  # bb, unaligned
    rotation: np.ndarray  # bb vectors ~= aa vectors @ rotation
    dictionary: list  # (bb word, aa word) pairs


def twin_languages(dim: int = 32, seed: int = 0, noise: float = 0.01, filler: int = 300) -> TwinLanguages:
    vocab = base_vocabulary(dim, seed, filler)
    words = list(vocab)
    A = np.vstack([vocab[w] for w in words])
    R = random_rotation(dim, seed)
    rng = make_rng(seed, "twin-noise")
    B = (A + noise * rng.standard_normal(A.shape) / np.sqrt(dim)) @ R
    b_words = [translate_word(w) if not w.startswith("w0") else "z" + w for w in words]
    return TwinLanguages(
        EmbeddingTable("aa", words, A),
        EmbeddingTable("bb", b_words, B),
        R,
        list(zip(b_words, words)),
    )


# --------------------------------------------------------------------------
# on-disk fixture


def write_semeval_xml(sentences, path: str) -> None:
    root = ET.Element("Reviews")
    review = ET.SubElement(root, "Review", rid="1")
    sents = ET.SubElement(review, "sentences")
    for s in sentences:
        el = ET.SubElement(sents, "sentence", id=s.id)
        ET.SubElement(el, "text").text = s.text
        ops = ET.SubElement(el, "Opinions")
        for t in s.targets:
            ET.SubElement(ops, "Opinion", target=t.surface, category="FOOD#QUALITY",
                          polarity="positive", **{"from": str(t.start), "to": str(t.end)})
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


def write_fixture(directory: str, n_train: int = 150, n_test: int = 60, dim: int = 32, seed: int = 0) -> str:
    """Write corpora, embeddings, a dictionary and an experiment config for
    the twin languages. Returns the config path."""
    os.makedirs(directory, exist_ok=True)
    twins = twin_languages(dim, seed)
    for table in (twins.source, twins.target):
        with open(os.path.join(directory, f"{table.language}.vec"), "w", encoding="utf-8") as fh:
            save_vectors(table, fh, fmt="%.9g")
    with open(os.path.join(directory, "bb-aa.dict"), "w", encoding="utf-8") as fh:
        for b, a in twins.dictionary:
            fh.write(f"{b}\t{a}\n")
    data = {}
    for lang, tr in (("aa", False), ("bb", True)):
        data[lang] = {}
        for split, n in (("train", n_train), ("test", n_test)):
            name = f"{lang}.{split}.xml"
            write_semeval_xml(make_corpus(n, lang, seed, split, translate=tr), os.path.join(directory, name))
            data[lang][split] = name
    config = {
        "schema_version": 1,
        "languages": ["aa", "bb"],
        "data": data,
        "embeddings": {"aa": "aa.vec", "bb": "bb.vec"},
        "dictionaries": {"bb": "bb-aa.dict"},
        "pivot": "aa",
        "model": {"layers": 2, "conv_dim": 32, "dense_dim": 32},
        "train": {"seeds": [0, 1], "max_epochs": 60, "patience": 20},
        "curve": {"source": "aa", "targets": ["bb"], "sizes": [0, 10, 40]},
        "out": "results",
    }
    path = os.path.join(directory, "experiment.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
    return path
