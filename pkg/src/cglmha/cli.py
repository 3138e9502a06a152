"""Command-line entry point: ``cglmha {train,evaluate,predict,ablate,gradcheck}``."""
import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import data as D
from . import model as M
from . import trainer as tr
from .errors import CheckpointError, ConfigError, ContractError, DataError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("cglmha")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_options(p):
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-train")
    p.add_argument("--data-test")
    p.add_argument("--embeddings", help="pre-trained vectors, one 'token v1 ... vd' per line")
    p.add_argument("--out-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--no-cnn", action="store_true")
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--no-pretrained", action="store_true")


def build_parser():
    parser = _Parser(prog="cglmha", description="Sarcasm classifier: train, evaluate and inspect.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _run_options(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on a labelled file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-test", required=True)
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt beside the checkpoint)")
    p.add_argument("--json", action="store_true", help="print the report as JSON")

    p = sub.add_parser("predict", help="label headlines given as arguments or on stdin")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("texts", nargs="*")

    p = sub.add_parser("ablate", help="train and test the five cumulative configurations")
    _run_options(p)
    p.add_argument("--baselines", action="store_true", help="also run the CNN-only and GRU-only rows")

    p = sub.add_parser("gradcheck", help="compare autodiff with finite differences at small sizes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--no-cnn", action="store_true")
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--biases", action="store_true", help="include bias terms (off by default)")
    p.add_argument("--unfused", action="store_true", help="unroll recurrences into cell ops")
    return parser


def run_config(args) -> tr.RunConfig:
    cfg = tr.RunConfig.load(args.config) if args.config else tr.RunConfig()
    changes = {}
    for key in ("seed", "data_train", "data_test", "embeddings", "out_dir", "epochs", "heads"):
        value = getattr(args, key)
        if value is not None:
            changes[key] = value
    if args.no_cnn:
        changes["use_cnn"] = False
    if args.no_attention:
        changes["use_attention"] = False
    if args.no_pretrained:
        changes["use_pretrained"] = False
    return cfg.replace(**changes) if changes else cfg


def _vocab_for(checkpoint, vocab):
    path = Path(vocab) if vocab else Path(checkpoint).parent / "vocab.txt"
    if not path.exists():
        raise CheckpointError(f"vocabulary file {path} not found")
    return D.Vocabulary.load(path)


def cmd_train(args):
    cfg = run_config(args)
    if not cfg.out_dir:
        raise ConfigError("train needs --out-dir (or out_dir in the config)")
    res = tr.train(cfg)
    print(f"best epoch {res.best_epoch}; checkpoint {res.checkpoint}")
    if cfg.data_test:
        corpus, _ = D.load_dataset(cfg.data_test, expected="test" if cfg.check_counts else None)
        report = tr.evaluate_corpus(res.params, res.vocab, corpus, cfg.batch_size).report
        Path(cfg.out_dir, "test_metrics.json").write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")
        print("test " + report.summary())
    return EXIT_OK


def cmd_evaluate(args):
    report = tr.evaluate(args.checkpoint, args.data_test, args.vocab)
    print(json.dumps(report.to_dict(), sort_keys=True) if args.json else report.summary())
    return EXIT_OK


def cmd_predict(args):
    vocab = _vocab_for(args.checkpoint, args.vocab)
    params, _, _ = M.load_checkpoint(args.checkpoint, expected_vocab_hash=vocab.sha256())
    texts = args.texts or [line.rstrip("\n") for line in sys.stdin if line.strip()]
    for p in M.predict(params, texts, vocab):
        rec = {"text": p.text, "label": p.label, "probabilities": p.probabilities}
        if p.error:
            rec["error"] = p.error
        print(json.dumps(rec))
    return EXIT_OK


def cmd_ablate(args):
    cfg = run_config(args)
    if not (cfg.data_train and cfg.data_test):
        raise ConfigError("ablate needs both --data-train and --data-test")
    train_corpus, _ = D.load_dataset(cfg.data_train, expected="train" if cfg.check_counts else None)
    test_corpus, _ = D.load_dataset(cfg.data_test, expected="test" if cfg.check_counts else None)
    vectors = D.load_embeddings(cfg.embeddings, cfg.embed_dim) if cfg.embeddings else None
    rows = tr.ablation_rows(cfg.heads) + (tr.baseline_rows() if args.baselines else [])
    rows = tr.ablate(cfg, train_corpus, test_corpus, vectors, rows, out_dir=cfg.out_dir)
    print(tr.format_table(rows))
    return EXIT_OK


def cmd_gradcheck(args):
    gc = tr.GradcheckConfig(seed=args.seed, heads=args.heads, use_cnn=not args.no_cnn,
                            use_attention=not args.no_attention, biases_enabled=args.biases,
                            fused=not args.unfused)
    report = tr.gradcheck(gc)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    warnings.formatwarning = lambda message, category, *rest, **kw: f"{category.__name__}: {message}"
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (ConfigError, ContractError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
