"""Training, evaluation, ablation sweeps and gradient checks."""
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as D
from . import model as M
from . import tensor as T
from .errors import CheckpointError, ConfigError, NumericError
from .metrics import MetricsReport
from .optim import Adam, AdamHyper, EarlyStopState, cross_entropy, early_stop_update

log = logging.getLogger(__name__)

_MODEL_FIELDS = ("embed_dim", "max_len", "conv_filters", "conv_width", "gru_hidden", "lstm_hidden",
                 "heads", "biases_enabled", "dtype", "use_cnn", "use_gru", "use_lstm", "use_attention")
_ADAM_FIELDS = ("lr", "beta1", "beta2", "eps", "weight_decay")


@dataclass
class RunConfig:
    """Everything that determines a training run.

    Architecture and optimizer settings are kept flat so that a JSON config
    file maps one-to-one onto this class.
    """

    embed_dim: int = 100
    max_len: int = 20
    conv_filters: int = 128
    conv_width: int = 3
    gru_hidden: int = 128
    lstm_hidden: int = 128
    heads: int = 4
    biases_enabled: bool = True
    dtype: str = "float32"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 20
    patience: int = 5
    batch_size: int = 32
    val_fraction: float = 0.1
    early_stopping: bool = True
    seed: int = 0
    use_cnn: bool = True
    use_gru: bool = True
    use_lstm: bool = True
    use_attention: bool = True
    use_pretrained: bool = True
    data_train: Optional[str] = None
    data_test: Optional[str] = None
    embeddings: Optional[str] = None
    out_dir: Optional[str] = None
    check_counts: bool = True
    # Evaluate the whole training set after each epoch and stop once this accuracy is reached.
    target_train_accuracy: Optional[float] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.use_gru or self.use_lstm):
            raise ConfigError("at least one of use_gru and use_lstm must be true")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.patience < 1 or self.batch_size < 1:
            raise ConfigError("patience and batch_size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        self.adam_hyper()
        # vocab_size is a placeholder; this checks everything else about the architecture.
        self.model_config(3)

    def model_config(self, vocab_size: int) -> M.ModelConfig:
        kw = {k: getattr(self, k) for k in _MODEL_FIELDS}
        return M.ModelConfig(vocab_size=vocab_size, seed=self.seed, **kw)

    def adam_hyper(self) -> AdamHyper:
        return AdamHyper(**{k: getattr(self, k) for k in _ADAM_FIELDS})

    def replace(self, **changes) -> "RunConfig":
        d = asdict(self)
        d.update(changes)
        return RunConfig(**d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)


@dataclass
class EvalResult:
    loss: float
    report: MetricsReport
    predictions: np.ndarray


def evaluate_examples(params: M.ModelParams, examples: Sequence[D.EncodedExample], batch_size: int = 32) -> EvalResult:
    """Mean cross-entropy and metrics over labelled, already encoded examples."""
    total, preds, labels = 0.0, [], []
    with T.no_grad():
        for batch in D.batch_iter(examples, batch_size):
            logits = M.forward(params, batch)
            total += cross_entropy(logits, batch.labels).item() * len(batch)
            preds.append(np.argmax(logits.data, axis=1))
            labels.append(batch.labels)
    y_pred, y_true = np.concatenate(preds), np.concatenate(labels)
    return EvalResult(total / len(examples), MetricsReport.from_predictions(y_true, y_pred), y_pred)


@dataclass
class TrainResult:
    params: M.ModelParams
    vocab: D.Vocabulary
    log: List[dict]
    best_epoch: int
    stopped_early: bool
    checkpoint: Optional[Path] = None
    coverage: Optional[float] = None

    def final(self) -> dict:
        return self.log[-1]


def _snapshot(params: M.ModelParams):
    return {n: t.data.copy() for n, t in params.named().items()}


def _restore(params: M.ModelParams, snap):
    for n, t in params.named().items():
        t.data[...] = snap[n]


def format_log_line(rec: dict) -> str:
    def f(key, spec="8.4f"):
        v = rec.get(key)
        return format(v, spec) if isinstance(v, float) else format("-", ">" + spec.split(".")[0])

    line = f"epoch {rec['epoch']:>3}  train_loss {f('train_loss')}  train_acc {f('train_acc')}  " \
           f"val_loss {f('val_loss')}  val_acc {f('val_acc')}"
    if "train_eval_acc" in rec:
        line += f"  train_eval_acc {f('train_eval_acc')}"
    return line + ("  *" if rec.get("best") else "")


def fit(cfg: RunConfig, corpus: Sequence[D.RawExample], vectors: Optional[Dict[str, np.ndarray]] = None,
        out_dir=None) -> TrainResult:
    """Train on ``corpus`` (a validation split is held out internally).

    With ``out_dir`` the best-validation checkpoint, ``vocab.txt``,
    ``config.json`` and the epoch log (``log.jsonl`` and ``log.txt``) are
    written there. Returns the best-validation parameters.
    """
    cfg.validate()
    if cfg.use_pretrained and vectors is None:
        raise ConfigError("use_pretrained is set but no embedding vectors were supplied")
    if cfg.val_fraction > 0:
        train_raw, val_raw = D.stratified_split(corpus, cfg.val_fraction, cfg.seed)
    else:
        train_raw, val_raw = list(corpus), []
    vocab = D.build_vocab(train_raw)
    train_ex = D.encode_corpus(train_raw, vocab, cfg.max_len)
    val_ex = D.encode_corpus(val_raw, vocab, cfg.max_len)
    if not train_ex:
        raise ConfigError("no trainable examples after preprocessing")
    mcfg = cfg.model_config(len(vocab))
    emb = None
    if cfg.use_pretrained:
        emb = D.init_embeddings(vocab, vectors, cfg.seed, cfg.embed_dim, np.dtype(cfg.dtype))
    params = M.build_model(mcfg, emb)
    opt = Adam(params.named(), cfg.adam_hyper(), params.frozen_rows())
    log.info("training %d examples (%d validation), vocabulary %d, %d parameters",
             len(train_ex), len(val_ex), len(vocab), params.parameter_count())

    out = Path(out_dir) if out_dir is not None else None
    ckpt = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        vocab.save(out / "vocab.txt")
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        ckpt = out / "checkpoint.bin"

    stopper = EarlyStopState(patience=cfg.patience)
    records: List[dict] = []
    best_snap, best_epoch, stopped = None, 0, False
    best_loss = math.inf
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        for b, batch in enumerate(D.batch_iter(train_ex, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch)):
            opt.zero_grad()
            logits = M.forward(params, batch)
            loss = cross_entropy(logits, batch.labels)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite training loss {value} at epoch {epoch}, batch {b} "
                    f"(max |logit| {np.nanmax(np.abs(logits.data)):.3g}, lr {cfg.lr})"
                )
            T.backward(loss)
            opt.step()
            loss_sum += value * len(batch)
            correct += int((np.argmax(logits.data, axis=1) == batch.labels).sum())
            seen += len(batch)
        rec = {"epoch": epoch, "train_loss": loss_sum / seen, "train_acc": correct / seen}
        if cfg.target_train_accuracy is not None:
            rec["train_eval_acc"] = evaluate_examples(params, train_ex, cfg.batch_size).report.accuracy
        decision = "continue"
        if val_ex:
            ev = evaluate_examples(params, val_ex, cfg.batch_size)
            rec.update(val_loss=ev.loss, val_acc=ev.report.accuracy, val_macro_f1=ev.report.macro_f1)
            improved = ev.loss < best_loss
            decision = early_stop_update(stopper, ev.loss)
        else:
            improved = True
        if improved:
            best_loss = rec.get("val_loss", best_loss)
            best_snap, best_epoch = _snapshot(params), epoch
            if ckpt is not None:
                M.save_checkpoint(ckpt, params, vocab.sha256(), opt.state, extra={"epoch": epoch})
        rec["best"] = improved
        records.append(rec)
        log.info("%s  (%.1fs)", format_log_line(rec), time.perf_counter() - t0)
        if cfg.target_train_accuracy is not None and rec["train_eval_acc"] >= cfg.target_train_accuracy:
            break
        if cfg.early_stopping and decision == "stop":
            stopped = True
            log.info("early stop: no validation improvement for %d epochs", cfg.patience)
            break
    _restore(params, best_snap)
    if out is not None:
        with open(out / "log.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (out / "log.txt").write_text("\n".join(format_log_line(r) for r in records) + "\n")
    return TrainResult(params, vocab, records, best_epoch, stopped, ckpt, emb.coverage if emb else None)


def _load_vectors(cfg: RunConfig):
    if not cfg.use_pretrained:
        return None
    if not cfg.embeddings:
        raise ConfigError("use_pretrained needs an embeddings path (or pass --no-pretrained)")
    return D.load_embeddings(cfg.embeddings, cfg.embed_dim)


def train(cfg: RunConfig) -> TrainResult:
    """File-driven training: reads ``cfg.data_train`` (and embeddings), writes to ``cfg.out_dir``."""
    if not cfg.data_train:
        raise ConfigError("no training data given")
    corpus, _ = D.load_dataset(cfg.data_train, expected="train" if cfg.check_counts else None)
    return fit(cfg, corpus, _load_vectors(cfg), cfg.out_dir)


def evaluate_corpus(params: M.ModelParams, vocab: D.Vocabulary, corpus: Sequence[D.RawExample],
                    batch_size: int = 32) -> EvalResult:
    examples = D.encode_corpus(corpus, vocab, params.config.max_len)
    return evaluate_examples(params, examples, batch_size)


def evaluate(checkpoint, dataset, vocab_path=None, batch_size: int = 32, check_counts: bool = True) -> MetricsReport:
    """Metrics of a saved model on a dataset file.

    The vocabulary defaults to ``vocab.txt`` beside the checkpoint and must
    hash to the value recorded in the checkpoint.
    """
    checkpoint = Path(checkpoint)
    vocab_path = Path(vocab_path) if vocab_path else checkpoint.parent / "vocab.txt"
    if not vocab_path.exists():
        raise CheckpointError(f"vocabulary file {vocab_path} not found")
    vocab = D.Vocabulary.load(vocab_path)
    params, _, _ = M.load_checkpoint(checkpoint, expected_vocab_hash=vocab.sha256())
    corpus, _ = D.load_dataset(dataset, expected="test" if check_counts else None)
    return evaluate_corpus(params, vocab, corpus, batch_size).report


def ablation_rows(heads: int = 4) -> List[Tuple[str, dict]]:
    """The five cumulative configurations, from LSTM alone to the full model."""
    mha = f"MHA({heads})"
    base = dict(use_cnn=False, use_gru=False, use_lstm=True, use_attention=False, use_pretrained=False)
    rows = [("LSTM", dict(base))]
    rows.append(("LSTM+GRU", dict(base, use_gru=True)))
    rows.append((f"LSTM+GRU+{mha}", dict(rows[-1][1], use_attention=True)))
    rows.append((f"LSTM+GRU+{mha}+Pre", dict(rows[-1][1], use_pretrained=True)))
    rows.append((f"LSTM+GRU+CNN+{mha}+Pre", dict(rows[-1][1], use_cnn=True)))
    return rows


def baseline_rows() -> List[Tuple[str, dict]]:
    """Single-module baselines. CNN alone has no sequence encoder, so ``ablate`` reports it as skipped."""
    none = dict(use_cnn=False, use_gru=False, use_lstm=False, use_attention=False, use_pretrained=False)
    return [("CNN", dict(none, use_cnn=True)), ("GRU", dict(none, use_gru=True))]


@dataclass
class AblationRow:
    name: str
    flags: dict
    status: str
    reason: Optional[str] = None
    test: Optional[MetricsReport] = None
    best_epoch: Optional[int] = None

    def to_dict(self):
        d = asdict(self)
        d["test"] = self.test.to_dict() if self.test else None
        return d


def format_table(rows: Sequence[AblationRow]) -> str:
    width = max([len(r.name) for r in rows] + [13])
    lines = [f"{'configuration':<{width}}  {'accuracy':>8}  {'macro_f1':>8}  status"]
    for r in rows:
        if r.test is None:
            lines.append(f"{r.name:<{width}}  {'-':>8}  {'-':>8}  {r.status}: {r.reason}")
        else:
            lines.append(f"{r.name:<{width}}  {r.test.accuracy:>8.4f}  {r.test.macro_f1:>8.4f}  {r.status}")
    return "\n".join(lines)


def ablate(base: RunConfig, train_corpus, test_corpus, vectors=None, rows=None, out_dir=None) -> List[AblationRow]:
    """Train and test each row's flag set under ``base.seed``.

    A row that violates the run invariants (or needs vectors that were not
    supplied) is skipped with a warning and reported as such.
    """
    rows = ablation_rows(base.heads) if rows is None else rows
    out = Path(out_dir) if out_dir is not None else None
    results = []
    for name, flags in rows:
        try:
            cfg = base.replace(**flags)
            if cfg.use_pretrained and vectors is None:
                raise ConfigError("needs pre-trained vectors")
        except ConfigError as exc:
            warnings.warn(f"ablation row {name!r} skipped: {exc}", stacklevel=2)
            log.warning("ablation row %r skipped: %s", name, exc)
            results.append(AblationRow(name, dict(flags), "skipped", str(exc)))
            continue
        log.info("ablation row %s", name)
        row_dir = out / _slug(name) if out is not None else None
        res = fit(cfg, train_corpus, vectors, row_dir)
        ev = evaluate_corpus(res.params, res.vocab, test_corpus, cfg.batch_size)
        results.append(AblationRow(name, dict(flags), "ok", None, ev.report, res.best_epoch))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.jsonl", "w") as fh:
            for r in results:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        (out / "ablation.txt").write_text(format_table(results) + "\n")
    return results


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_").lower()


@dataclass
class GradcheckConfig:
    vocab_size: int = 12
    embed_dim: int = 8
    conv_filters: int = 8
    gru_hidden: int = 8
    lstm_hidden: int = 8
    heads: int = 2
    max_len: int = 5
    batch: int = 2
    biases_enabled: bool = False
    use_cnn: bool = True
    use_gru: bool = True
    use_lstm: bool = True
    use_attention: bool = True
    seed: int = 0
    step: float = 1e-4
    tolerance: float = 1e-4
    # Gradients are compared at a well-conditioned point: unit-scale embeddings and
    # weights scaled by `gain`. At the training init (embeddings within +-0.05)
    # the attention projections receive gradients near 1e-12, below the
    # finite-difference noise floor.
    embedding_scale: float = 1.0
    gain: float = 2.0
    fused: bool = True


@dataclass
class GradcheckReport:
    groups: List[Tuple[str, float]]
    tolerance: float
    seconds: float
    parameters: int

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for _, err in self.groups)

    @property
    def failures(self) -> List[str]:
        return [n for n, err in self.groups if not err < self.tolerance]

    @property
    def max_error(self) -> float:
        return max(err for _, err in self.groups)

    def summary(self) -> str:
        w = max(len(n) for n, _ in self.groups)
        lines = [f"{n:<{w}}  {err:.3e}  {'ok' if err < self.tolerance else 'FAIL'}" for n, err in self.groups]
        verdict = "PASS" if self.passed else "FAIL (" + ", ".join(self.failures) + ")"
        lines.append(f"gradcheck {verdict}: max relative error {self.max_error:.3e} "
                     f"(tolerance {self.tolerance:g}, {self.parameters} parameters, {self.seconds:.1f}s)")
        return "\n".join(lines)


def gradcheck_problem(gc: GradcheckConfig):
    """Model, batch and labels for a gradient check; the second example is padded."""
    cfg = M.ModelConfig(
        vocab_size=gc.vocab_size, embed_dim=gc.embed_dim, max_len=gc.max_len, conv_filters=gc.conv_filters,
        gru_hidden=gc.gru_hidden, lstm_hidden=gc.lstm_hidden, heads=gc.heads, biases_enabled=gc.biases_enabled,
        seed=gc.seed, use_cnn=gc.use_cnn, use_gru=gc.use_gru, use_lstm=gc.use_lstm,
        use_attention=gc.use_attention, dtype="float64",
    )
    params = M.build_model(cfg)
    rng = np.random.default_rng([gc.seed, 11])
    table = params.embedding.table.data
    table[...] = rng.uniform(-gc.embedding_scale, gc.embedding_scale, size=table.shape)
    table[params.embedding.pad_index] = 0
    for name, t in params.named().items():
        if name != "embedding.table":
            t.data *= gc.gain
    ids = rng.integers(2, gc.vocab_size, size=(gc.batch, gc.max_len))
    mask = np.ones_like(ids, dtype=bool)
    for b in range(1, gc.batch):
        mask[b, max(1, gc.max_len - 2 * b):] = False
    ids[~mask] = D.PAD_ID
    labels = np.arange(gc.batch) % cfg.num_classes
    return params, (ids, mask), labels


def gradcheck(gc: Optional[GradcheckConfig] = None) -> GradcheckReport:
    """Compare autodiff gradients with central differences for every parameter group.

    The error per group is ``max|g - g_fd| / max(max|g|, max|g_fd|, 1e-8)``.
    """
    gc = gc or GradcheckConfig()
    t0 = time.perf_counter()
    params, batch, labels = gradcheck_problem(gc)

    def objective():
        return cross_entropy(M.forward(params, batch, fused=gc.fused), labels)

    named = params.named()
    for t in named.values():
        t.grad = None
    T.backward(objective())
    groups = []
    for name, t in named.items():
        numeric = T.finite_diff_grad(lambda: objective().item(), t, gc.step)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        groups.append((name, T.relative_error(analytic, numeric)))
    return GradcheckReport(groups, gc.tolerance, time.perf_counter() - t0, params.parameter_count())
