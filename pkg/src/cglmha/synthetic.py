"""
Synthetic headline corpora and matching "pre-trained" word vectors.

Headlines are built from pseudo-words in five classes. A headline is
sarcastic exactly when it pairs a praise word with a plight word ("area man
adores endless queue"); praise with an upbeat event, or a neutral report
verb with either kind of event, is not. Within a class, words are drawn with
Zipf-like frequencies from a large pool, so most of them are rare in any one
training set. The companion vector file places each word near its class
centroid, which is exactly the information a randomly initialised table
lacks for rare words.
"""
import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import RawExample

CLASSES = ("praise", "plight", "upbeat", "report", "subject")
FILLER = ("the", "a", "of", "in", "on", "for", "with", "to", "after", "local", "new", "area")

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr", "pl", "gr", "sh")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou", "ee")


@dataclass
class Lexicon:
    words: Dict[str, List[str]]
    weights: Dict[str, np.ndarray]

    def draw(self, rng, cls) -> str:
        pool = self.words[cls]
        return pool[rng.choice(len(pool), p=self.weights[cls])]

    def class_of(self) -> Dict[str, str]:
        return {w: c for c, ws in self.words.items() for w in ws}


def make_lexicon(seed: int = 0, pool_size: int = 600, zipf: float = 0.8) -> Lexicon:
    """Disjoint pools of pronounceable pseudo-words, one per class."""
    rng = np.random.default_rng([seed, 7])
    seen = set(FILLER)
    words = {}
    for cls in CLASSES:
        pool = []
        while len(pool) < pool_size:
            n = int(rng.integers(2, 4))
            w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n))
            if w not in seen:
                seen.add(w)
                pool.append(w)
        words[cls] = pool
    ranks = np.arange(1, pool_size + 1, dtype=np.float64) ** -zipf
    weights = {c: ranks / ranks.sum() for c in CLASSES}
    return Lexicon(words, weights)


# (verb class, event class) -> label
_KINDS = ((("praise", "plight"), 1), (("praise", "upbeat"), 0), (("report", "plight"), 0), (("report", "upbeat"), 0))


def _headline(rng, lex: Lexicon, verb_cls: str, event_cls: str) -> str:
    parts = [lex.draw(rng, "subject")]
    if rng.random() < 0.5:
        parts.insert(0, FILLER[rng.integers(len(FILLER))])
    parts.append(lex.draw(rng, verb_cls))
    if rng.random() < 0.6:
        parts.append(FILLER[rng.integers(len(FILLER))])
    parts.append(lex.draw(rng, event_cls))
    if rng.random() < 0.4:
        parts += [FILLER[rng.integers(len(FILLER))], lex.draw(rng, "subject")]
    return " ".join(parts)


def make_corpus(n: int, seed: int = 0, lexicon: Optional[Lexicon] = None,
                positive_fraction: float = 0.5, label_noise: float = 0.0) -> List[RawExample]:
    """``n`` labelled headlines; ``round(n * positive_fraction)`` are sarcastic."""
    lex = lexicon or make_lexicon(seed)
    rng = np.random.default_rng([seed, 1])
    n_pos = int(round(n * positive_fraction))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(labels)
    out = []
    for y in labels:
        if y == 1:
            verb, event = _KINDS[0][0]
        else:
            verb, event = _KINDS[1 + rng.integers(3)][0]
        label = int(y)
        if label_noise and rng.random() < label_noise:
            label = 1 - label
        out.append(RawExample(_headline(rng, lex, verb, event), label))
    return out


def make_vectors(lexicon: Lexicon, dim: int = 100, seed: int = 0,
                 signal: float = 1.0, noise: float = 0.35) -> Dict[str, np.ndarray]:
    """Vectors scattered around one random centroid per word class."""
    rng = np.random.default_rng([seed, 3])
    out = {}
    for cls in CLASSES:
        centre = rng.normal(size=dim)
        centre *= signal / np.linalg.norm(centre)
        for w in lexicon.words[cls]:
            out[w] = (centre + rng.normal(scale=noise / np.sqrt(dim), size=dim)).astype(np.float32)
    for w in FILLER:
        out[w] = rng.normal(scale=noise / np.sqrt(dim), size=dim).astype(np.float32)
    return out


def write_vectors(path, vectors: Dict[str, np.ndarray]):
    """Whitespace-separated text format: ``word v1 v2 ... vd`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for w, v in vectors.items():
            fh.write(w + " " + " ".join(f"{x:.6f}" for x in v) + "\n")


def write_corpus(path, examples: Sequence[RawExample]):
    """Write JSON lines with ``headline`` and ``is_sarcastic`` fields, or a CSV if the suffix is .csv."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if path.suffix == ".csv":
            w = csv.writer(fh)
            w.writerow(["headline", "label"])
            for ex in examples:
                w.writerow([ex.headline, ex.label])
        else:
            for ex in examples:
                fh.write(json.dumps({"headline": ex.headline, "is_sarcastic": ex.label}) + "\n")


def make_split_files(directory, n_train: int = 1200, n_test: int = 400, dim: int = 100, seed: int = 0,
                     label_noise: float = 0.0) -> Dict[str, Path]:
    """Write train/test corpora and a vector file sharing one lexicon; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lex = make_lexicon(seed)
    paths = {
        "train": directory / "train.jsonl",
        "test": directory / "test.jsonl",
        "embeddings": directory / f"vectors.{dim}d.txt",
    }
    write_corpus(paths["train"], make_corpus(n_train, seed, lex, label_noise=label_noise))
    write_corpus(paths["test"], make_corpus(n_test, seed + 1000, lex, label_noise=label_noise))
    write_vectors(paths["embeddings"], make_vectors(lex, dim, seed))
    return paths
