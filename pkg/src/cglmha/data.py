"""
Dataset ingestion and text preprocessing.

Raw headlines are lowercased and stripped to ``[a-z0-9 ]``, split on spaces,
mapped to integer ids through a frequency-ordered vocabulary (0 = pad,
1 = unknown) and padded or truncated to a fixed length.
"""
import csv
import hashlib
import json
import logging
import re
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DataError
from .layers import EmbeddingParams
from .tensor import Tensor

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1

# expected per-class counts {label: count} of the canonical Headlines splits
HEADLINES_EXPECTED = {
    "train": {1: 2516, 0: 2504},
    "test": {1: 570, 0: 410},
}

_NON_ALNUM = re.compile(r"[^a-z0-9 ]")
_SPACES = re.compile(r"\s+")


@dataclass(frozen=True)
class RawExample:
    headline: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


def normalize(text: str) -> str:
    text = _NON_ALNUM.sub(" ", text.lower())
    return _SPACES.sub(" ", text).strip()


def tokenize(text: str) -> List[str]:
    return [tok for tok in text.split(" ") if tok]


def preprocess(text: str) -> List[str]:
    return tokenize(normalize(text))


class Vocabulary:
    """Token <-> id mapping with ids 0 (pad) and 1 (unknown) reserved.

    Corpus tokens take ids 2, 3, ... in order of descending frequency, ties
    broken lexicographically.
    """

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {tok: i + 2 for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary tokens must be unique")

    def __len__(self):
        return len(self.tokens) + 2

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if idx == PAD_ID:
            return "<pad>"
        if idx == UNK_ID:
            return "<unk>"
        return self.tokens[idx - 2]

    def to_text(self) -> str:
        return "".join(tok + "\n" for tok in self.tokens)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line])


def build_vocab(corpus: Sequence[RawExample]) -> Vocabulary:
    """Build the vocabulary from (training) examples."""
    if not corpus:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for ex in corpus:
        counts.update(preprocess(ex.headline))
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([tok for tok, _ in ordered])


@dataclass
class EncodedExample:
    ids: np.ndarray
    mask: np.ndarray
    label: int = -1

    def __post_init__(self):
        n = int(self.mask.sum())
        if not self.mask[:n].all() or np.any(self.ids[~self.mask] != PAD_ID):
            raise ContractError("mask must be a prefix of real tokens with pad ids elsewhere")

    @property
    def length(self):
        return int(self.mask.sum())


class EmptyExampleError(DataError):
    pass


def encode(tokens: Sequence[str], vocab: Vocabulary, max_len: int = 20, label: int = -1) -> EncodedExample:
    """Map tokens to ids, keep the leftmost ``max_len`` and pad the rest."""
    if max_len < 1:
        raise ContractError("max_len must be positive")
    if not tokens:
        raise EmptyExampleError("example has no tokens")
    kept = [vocab.id_of(t) for t in tokens[:max_len]]
    ids = np.zeros(max_len, dtype=np.int64)
    ids[: len(kept)] = kept
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(kept)] = True
    return EncodedExample(ids, mask, label)


def decode(example: EncodedExample, vocab: Vocabulary) -> List[str]:
    return [vocab.token_of(int(i)) for i in example.ids[example.mask]]


def encode_corpus(corpus: Sequence[RawExample], vocab: Vocabulary, max_len: int = 20) -> List[EncodedExample]:
    """Encode every example, logging and dropping those with no tokens."""
    out = []
    for k, ex in enumerate(corpus):
        try:
            out.append(encode(preprocess(ex.headline), vocab, max_len, ex.label))
        except EmptyExampleError:
            log.warning("dropping example %d: empty after normalization (%r)", k, ex.headline)
    return out


@dataclass
class DatasetStats:
    path: str
    total: int
    counts: Dict[int, int]
    mean_tokens: float
    expected: Optional[Dict[int, int]] = None
    mismatch: Optional[str] = None

    def summary(self) -> str:
        s = (
            f"{self.path}: {self.total} examples, sarcastic={self.counts.get(1, 0)}, "
            f"non-sarcastic={self.counts.get(0, 0)}, mean length {self.mean_tokens:.2f} tokens"
        )
        return s + (f" [{self.mismatch}]" if self.mismatch else "")


def _parse_label(value, line):
    v = str(value).strip()
    if v in ("0", "1"):
        return int(v)
    try:
        f = float(v)
    except ValueError:
        f = None
    if f in (0.0, 1.0):
        return int(f)
    raise DataError(f"unknown label value {value!r}", line)


def _read_delimited(path):
    delim = "\t" if str(path).endswith(".tsv") else ","
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delim)
        header = next(reader, None)
        if header is None:
            return out
        header = [h.strip().lower() for h in header]
        if "headline" not in header:
            raise DataError("header must name a 'headline' column", 1)
        label_col = next((c for c in ("label", "is_sarcastic") if c in header), None)
        if label_col is None:
            raise DataError("header must name a 'label' or 'is_sarcastic' column", 1)
        hi, li = header.index("headline"), header.index(label_col)
        try:
            for row in reader:
                if not row:
                    continue
                n = reader.line_num
                if len(row) != len(header):
                    raise DataError(f"expected {len(header)} fields, found {len(row)}", n)
                out.append(RawExample(row[hi], _parse_label(row[li], n)))
        except csv.Error as exc:
            raise DataError(f"malformed delimited text ({exc})", reader.line_num) from None
    return out


def _read_records(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"malformed record ({exc.msg})", n) from None
            if not isinstance(rec, dict) or "headline" not in rec:
                raise DataError("record lacks a 'headline' field", n)
            label = rec.get("label", rec.get("is_sarcastic"))
            if label is None:
                raise DataError("record lacks a 'label' or 'is_sarcastic' field", n)
            out.append(RawExample(str(rec["headline"]), _parse_label(label, n)))
    return out


def load_dataset(path, fmt: Optional[str] = None, expected=None) -> Tuple[List[RawExample], DatasetStats]:
    """Read a headline/label file and report per-class counts.

    ``fmt`` is ``"delimited"`` or ``"records"``; by default it follows the file
    extension (``.json``/``.jsonl`` are records). ``expected`` may be ``"train"``
    or ``"test"`` (the canonical Headlines counts) or a ``{label: count}`` dict;
    a mismatch is reported through a warning, not an error.
    """
    path = Path(path)
    if fmt is None:
        fmt = "records" if path.suffix in (".json", ".jsonl") else "delimited"
    if fmt == "delimited":
        examples = _read_delimited(path)
    elif fmt == "records":
        examples = _read_records(path)
    else:
        raise ContractError(f"unknown dataset format {fmt!r}")
    if not examples:
        raise ContractError(f"{path} contains no examples")
    counts = {0: 0, 1: 0}
    for ex in examples:
        counts[ex.label] += 1
    lengths = [len(preprocess(ex.headline)) for ex in examples]
    stats = DatasetStats(str(path), len(examples), counts, float(np.mean(lengths)))
    if isinstance(expected, str):
        expected = HEADLINES_EXPECTED[expected]
    if expected is not None:
        stats.expected = dict(expected)
        if counts != stats.expected:
            stats.mismatch = (
                f"class counts {counts} differ from expected {stats.expected}; "
                "using the file as supplied"
            )
            warnings.warn(f"{path}: {stats.mismatch}", stacklevel=2)
    log.info(stats.summary())
    return examples, stats


def load_embeddings(path, dim: int = 100) -> Dict[str, np.ndarray]:
    """Parse ``token v1 ... v_dim`` lines into a token -> vector map."""
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise DataError(f"expected a token and {dim} values, found {len(parts) - 1} values", n)
            try:
                vectors[parts[0]] = np.array(parts[1:], dtype=np.float64)
            except ValueError:
                raise DataError("non-numeric embedding component", n) from None
    return vectors


def init_embeddings(vocab: Vocabulary, source: Optional[Dict[str, np.ndarray]], seed: int,
                    dim: int = 100, dtype=np.float32) -> EmbeddingParams:
    """Embedding table with pre-trained rows where available.

    Tokens missing from ``source`` (and the unknown id) get seeded
    uniform(-0.05, 0.05) rows; the pad row is zero. The fraction of corpus
    tokens found in ``source`` is stored on the result as ``coverage``.
    """
    rng = np.random.default_rng(seed)
    table = rng.uniform(-0.05, 0.05, size=(len(vocab), dim))
    hits = 0
    for tok, idx in vocab.index.items():
        vec = source.get(tok) if source else None
        if vec is None:
            continue
        if vec.shape != (dim,):
            raise DataError(f"vector for {tok!r} has dimension {vec.shape[0]}, expected {dim}")
        table[idx] = vec
        hits += 1
    table[PAD_ID] = 0
    coverage = hits / max(len(vocab.tokens), 1)
    log.info("pre-trained coverage: %d / %d tokens (%.1f%%)", hits, len(vocab.tokens), 100 * coverage)
    table = Tensor(table.astype(dtype), requires_grad=True, dtype=dtype, name="embedding.table")
    return EmbeddingParams(table, PAD_ID, coverage)


class Batch(NamedTuple):
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    @classmethod
    def of(cls, examples: Sequence[EncodedExample]):
        return cls(
            np.stack([e.ids for e in examples]),
            np.stack([e.mask for e in examples]),
            np.array([e.label for e in examples], dtype=np.int64),
        )

    def __len__(self):
        return self.ids.shape[0]


def batch_iter(examples: Sequence[EncodedExample], batch_size: int = 32, shuffle: bool = False,
               seed: int = 0, epoch: int = 0) -> Iterator[Batch]:
    """Yield batches; with ``shuffle`` the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = np.arange(len(examples))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(examples))
    for lo in range(0, len(order), batch_size):
        yield Batch.of([examples[i] for i in order[lo:lo + batch_size]])


def stratified_split(examples: Sequence, fraction: float = 0.1, seed: int = 0):
    """Split off ``fraction`` of each class, seeded. Returns ``(rest, held_out)``."""
    rng = np.random.default_rng(seed)
    by_label: Dict[int, List[int]] = {}
    for i, ex in enumerate(examples):
        by_label.setdefault(ex.label, []).append(i)
    held = set()
    for label in sorted(by_label):
        idx = np.array(by_label[label])
        k = int(round(fraction * len(idx)))
        held.update(rng.permutation(idx)[:k].tolist())
    rest = [ex for i, ex in enumerate(examples) if i not in held]
    out = [ex for i, ex in enumerate(examples) if i in held]
    return rest, out
