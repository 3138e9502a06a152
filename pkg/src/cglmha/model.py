"""
The sarcasm classifier: embedding -> convolution -> GRU -> bidirectional
LSTM -> multi-head self-attention -> masked mean pooling -> affine layer.

Any of the convolution, GRU, LSTM and attention stages can be switched off
for ablations; the neighbouring stages are then wired directly together.
"""
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import data as D
from . import layers as nn
from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError, ShapeError
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 100
    max_len: int = 20
    conv_filters: int = 128
    conv_width: int = 3
    gru_hidden: int = 128
    lstm_hidden: int = 128
    heads: int = 4
    num_classes: int = 2
    biases_enabled: bool = True
    seed: int = 0
    use_cnn: bool = True
    use_gru: bool = True
    use_lstm: bool = True
    use_attention: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    @property
    def model_dim(self):
        """Width of the sequence representation that attention and pooling see."""
        if self.use_lstm:
            return 2 * self.lstm_hidden
        if self.use_gru:
            return self.gru_hidden
        raise ConfigError("at least one of the GRU and LSTM stages must be enabled")

    def validate(self):
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must cover pad, unknown and at least one token")
        if not (self.use_gru or self.use_lstm):
            raise ConfigError("at least one of the GRU and LSTM stages must be enabled")
        if self.conv_width % 2 == 0:
            raise ConfigError(f"conv_width must be odd, got {self.conv_width}")
        if self.max_len < self.conv_width:
            raise ConfigError("max_len must be at least conv_width")
        if self.use_attention and (self.heads < 1 or self.model_dim % self.heads):
            raise ConfigError(f"model dim {self.model_dim} is not divisible by {self.heads} heads")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        for f in ("embed_dim", "max_len", "conv_filters", "gru_hidden", "lstm_hidden", "num_classes"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: nn.EmbeddingParams
    conv: Optional[nn.ConvParams]
    gru: Optional[nn.GruParams]
    lstm_fwd: Optional[nn.LstmParams]
    lstm_bwd: Optional[nn.LstmParams]
    mha: Optional[nn.MhaParams]
    cls_weight: Tensor
    cls_bias: Tensor

    def named(self) -> Dict[str, Tensor]:
        """All trainable tensors under stable, ordered names."""
        out = dict(self.embedding.named())
        if self.conv is not None:
            out.update(self.conv.named("conv"))
        if self.gru is not None:
            out.update(self.gru.named("gru"))
        if self.lstm_fwd is not None:
            out.update(self.lstm_fwd.named("lstm_fwd"))
            out.update(self.lstm_bwd.named("lstm_bwd"))
        if self.mha is not None:
            out.update(self.mha.named("mha"))
        out["classifier.weight"] = self.cls_weight
        out["classifier.bias"] = self.cls_bias
        return out

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.named().values()))

    def frozen_rows(self):
        return {"embedding.table": [self.embedding.pad_index]}


def build_model(config: ModelConfig, embedding: Optional[nn.EmbeddingParams] = None) -> ModelParams:
    """Allocate every parameter, seeded by ``config.seed``.

    A pre-built ``embedding`` (e.g. from :func:`cglmha.data.init_embeddings`)
    replaces the random table.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dt = np.dtype(config.dtype)
    bias = config.biases_enabled
    emb = nn.EmbeddingParams.init(rng, config.vocab_size, config.embed_dim, D.PAD_ID, dt)
    if embedding is not None:
        if embedding.table.shape != (config.vocab_size, config.embed_dim):
            raise ConfigError(
                f"embedding table {embedding.table.shape} does not match "
                f"({config.vocab_size}, {config.embed_dim})"
            )
        table = embedding.table.data.astype(dt)
        table[embedding.pad_index] = 0
        emb = nn.EmbeddingParams(
            Tensor(table, requires_grad=True, dtype=dt, name="embedding.table"),
            embedding.pad_index,
            embedding.coverage,
        )
    width = config.embed_dim
    conv = gru = lf = lb = mha = None
    if config.use_cnn:
        conv = nn.ConvParams.init(rng, width, config.conv_filters, config.conv_width, bias, dt)
        width = config.conv_filters
    if config.use_gru:
        gru = nn.GruParams.init(rng, width, config.gru_hidden, bias, dt)
        width = config.gru_hidden
    if config.use_lstm:
        lf = nn.LstmParams.init(rng, width, config.lstm_hidden, bias, dt)
        lb = nn.LstmParams.init(rng, width, config.lstm_hidden, bias, dt)
        width = 2 * config.lstm_hidden
    if config.use_attention:
        mha = nn.MhaParams.init(rng, width, config.heads, dt)
    w = nn.uniform_init(rng, (width, config.num_classes), width, dt)
    cls_w = Tensor(w, requires_grad=True, dtype=dt, name="classifier.weight")
    cls_b = Tensor(np.zeros(config.num_classes, dt), requires_grad=True, dtype=dt, name="classifier.bias")
    return ModelParams(config, emb, conv, gru, lf, lb, mha, cls_w, cls_b)


def _as_arrays(batch):
    if isinstance(batch, D.Batch):
        return batch.ids, batch.mask
    if isinstance(batch, tuple) and len(batch) >= 2 and isinstance(batch[0], np.ndarray):
        return np.asarray(batch[0]), np.asarray(batch[1], dtype=bool)
    b = D.Batch.of(list(batch))
    return b.ids, b.mask


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the sequence axis of (B, L, M) counting only real positions."""
    B, L, M = x.shape
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError("cannot pool a sequence with no real tokens")
    w = (mask / counts[:, None]).astype(x.dtype)
    return T.reduce_sum(x * T.constant_like(x, np.repeat(w[:, :, None], M, axis=2)), axis=1)


def encode_sequence(params: ModelParams, ids, mask, fused=True) -> Tensor:
    """Pooled (B, model_dim) representation of a batch."""
    cfg = params.config
    x = nn.embed(ids, params.embedding)
    if params.conv is not None:
        x = nn.conv1d_same(x, params.conv)
    if params.gru is not None:
        x = nn.gru_layer(x, params.gru, mask, fused=fused)
    if params.lstm_fwd is not None:
        x = nn.bilstm_layer(x, params.lstm_fwd, params.lstm_bwd, mask, fused=fused)
    if params.mha is not None:
        x = nn.multi_head_attention(x, params.mha, mask)
    assert x.shape[2] == cfg.model_dim
    return masked_mean(x, mask)


def forward(params: ModelParams, batch, fused=True) -> Tensor:
    """Logits of shape (B, num_classes).

    ``batch`` is a :class:`cglmha.data.Batch`, an ``(ids, mask)`` pair or a
    sequence of :class:`cglmha.data.EncodedExample`.
    """
    ids, mask = _as_arrays(batch)
    L = params.config.max_len
    if ids.ndim != 2 or ids.shape[1] != L or mask.shape != ids.shape:
        raise ShapeError(f"expected (batch, {L}) ids and mask, got {ids.shape} and {mask.shape}")
    pooled = encode_sequence(params, ids, mask, fused=fused)
    return T.add_bias(T.matmul(pooled, params.cls_weight), params.cls_bias)


def probabilities(logits: Tensor) -> np.ndarray:
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Prediction:
    text: str
    label: Optional[int]
    probabilities: Optional[List[float]]
    error: Optional[str] = None


def predict(params: ModelParams, texts: Sequence[str], vocab: D.Vocabulary, batch_size: int = 32) -> List[Prediction]:
    """Label each raw text; texts that normalize to nothing are reported, not classified."""
    L = params.config.max_len
    results: List[Optional[Prediction]] = [None] * len(texts)
    todo = []
    for i, text in enumerate(texts):
        tokens = D.preprocess(text)
        if not tokens:
            results[i] = Prediction(text, None, None, "unclassifiable: no tokens after normalization")
        else:
            todo.append((i, D.encode(tokens, vocab, L)))
    for lo in range(0, len(todo), batch_size):
        chunk = todo[lo:lo + batch_size]
        probs = probabilities(forward(params, [e for _, e in chunk]))
        for (i, _), p in zip(chunk, probs):
            results[i] = Prediction(texts[i], int(np.argmax(p)), p.tolist())
    return results


CHECKPOINT_FORMAT = "cglmha-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParams, vocab_hash: str, adam_state=None, extra=None):
    """Write a one-line JSON manifest followed by a little-endian float32 blob.

    The manifest lists every tensor's name, shape and byte offset into the
    blob; Adam moments (when given) are stored as extra tensors.
    """
    tensors = list(params.named().items())
    if adam_state is not None:
        for name in params.named():
            if name in adam_state.m:
                tensors.append((f"adam.m.{name}", adam_state.m[name]))
                tensors.append((f"adam.v.{name}", adam_state.v[name]))
    entries, chunks, offset = [], [], 0
    for name, t in tensors:
        arr = t.data if isinstance(t, Tensor) else t
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": "float32-le",
        "config": params.config.to_dict(),
        "vocab_hash": vocab_hash,
        "adam_t": adam_state.t if adam_state is not None else None,
        "tensors": entries,
        "blob_bytes": offset,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for c in chunks:
            fh.write(c)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        manifest = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: not a checkpoint (unreadable manifest)") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint")
    return manifest


def load_checkpoint(path, expected_vocab_hash: Optional[str] = None):
    """Rebuild model parameters (and Adam state if stored) from ``path``.

    Every stored shape is checked against both the manifest and the
    architecture implied by the stored config before any value is accepted.
    """
    from .optim import AdamState

    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    manifest = read_manifest(path)
    blob = raw[nl + 1:]
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob holds {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    if expected_vocab_hash is not None and manifest["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError(
            "vocabulary hash mismatch: the checkpoint was trained with a different vocabulary "
            f"({manifest['vocab_hash'][:12]}... vs {expected_vocab_hash[:12]}...)"
        )
    config = ModelConfig.from_dict(manifest["config"])
    params = build_model(config)
    named = params.named()
    dt = np.dtype(config.dtype)
    arrays = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        if e["nbytes"] != 4 * n or e["offset"] + e["nbytes"] > len(blob):
            raise CheckpointError(f"entry {e['name']!r}: size disagrees with its shape {shape}")
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(shape)
    for name, t in named.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{name}: stored shape {arrays[name].shape}, model expects {t.shape}")
    for name, t in named.items():
        t.data[...] = arrays[name].astype(dt)
    state = None
    if manifest.get("adam_t") is not None:
        state = AdamState(t=int(manifest["adam_t"]))
        for name in named:
            if f"adam.m.{name}" in arrays:
                state.m[name] = arrays[f"adam.m.{name}"].astype(dt)
                state.v[name] = arrays[f"adam.v.{name}"].astype(dt)
    return params, manifest, state
