"""``sqlgrade`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training failure,
4 I/O error. Diagnostics go to standard error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .data import DataError, generate_synthetic, kfold_split, load_csv, loo_split, write_csv
from .model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .report import dump_json, metrics_report, prediction_row, read_predictions, write_curves, write_predictions
from .tokenizer import LexError, encode, lex
from .training import TrainConfig, TrainingError, cross_validate, fit, fit_vocab

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("sqlgrade")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    return int(os.environ.get("SQLGRADE_SEED", "0"))


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _train_config(args) -> TrainConfig:
    if args.epochs < 1:
        raise UsageError("--epochs must be at least 1")
    if args.batch_size < 2:
        raise UsageError("--batch-size must be at least 2")
    return TrainConfig(mode=args.mode, epochs=args.epochs, batch_size=args.batch_size, class_weighting=args.class_weighting)


def _model_config(args) -> ModelConfig:
    return ModelConfig(vocab_size=2, attention_scaled=args.scaled_attention, fold_literals=not args.no_fold_literals)


# -- commands ------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.n < 8:
        raise UsageError("--n must be at least 8")
    records = generate_synthetic(args.n, args.seed)
    write_csv(records, args.out)
    counts = Counter(r.remark.value for r in records)
    for name, c in sorted(counts.items()):
        print(f"{name}\t{c}")
    return EXIT_OK


def cmd_vocab(args) -> int:
    records = load_csv(args.data)
    vocab = fit_vocab(records, fold_literals=not args.no_fold_literals, min_count=args.min_count)
    vocab.save(args.out)
    print(f"{len(vocab)} tokens")
    return EXIT_OK


def cmd_train(args) -> int:
    tcfg = _train_config(args)
    records = load_csv(args.data)
    net, config, vocab, history = fit(records, _model_config(args), tcfg, args.seed)
    save_checkpoint(net, config, vocab, args.out)
    if args.history:
        _write_text(args.history, history.to_jsonl())
    last = {}
    for r in history.records:
        last[r["objective"]] = r["loss"]
    for obj, loss in last.items():
        print(f"final loss {obj}: {loss:.6f}")
    print(f"checksum {history.final_checksum}")
    return EXIT_OK


def cmd_xval(args) -> int:
    tcfg = _train_config(args)
    records = load_csv(args.data)
    if args.scheme == "kfold":
        if args.k < 2:
            raise UsageError("--k must be at least 2")
        if args.k > len(records):
            raise UsageError(f"--k {args.k} exceeds the {len(records)} records")
        plan = kfold_split(len(records), args.k, args.seed)
    else:
        plan = loo_split(len(records))
    result = cross_validate(records, plan, _model_config(args), tcfg, args.seed, jobs=args.jobs)
    rows = [prediction_row(records[i].submission_id, p, fold) for i, (fold, p) in enumerate(result.out_of_fold())]
    doc = metrics_report(records, rows)
    _write_text(args.out, dump_json(doc))
    if args.preds:
        with open(args.preds, "w", newline="", encoding="utf-8") as fh:
            write_predictions(rows, fh)
    if args.curves:
        write_curves(doc, args.curves)
    s = doc.get("fold_auc_summary", {})
    if s.get("n"):
        print(f"fold AUC mean {s['mean']:.4f} std {s['std']:.4f} min {s['min']:.4f} max {s['max']:.4f}")
    if doc["roc"]:
        print(f"pooled AUC {doc['roc']['auc']:.4f}")
    if doc["balanced_accuracy"] is not None:
        print(f"balanced accuracy {doc['balanced_accuracy']:.4f}")
    return EXIT_OK


def _predict_inputs(args) -> list[tuple[str, str]]:
    if args.sql is not None:
        return [("sql-0", args.sql)]
    if args.stdin:
        text = sys.stdin.read()
        return [(f"stdin-{i}", line) for i, line in enumerate(l for l in text.splitlines() if l.strip())]
    with open(args.data, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"submission_id", "submitted_answer"} <= set(reader.fieldnames):
            raise DataError(f"{args.data}: needs submission_id and submitted_answer columns")
        return [(r["submission_id"], r["submitted_answer"]) for r in reader]


def cmd_predict(args) -> int:
    try:
        net, config, vocab = load_checkpoint(args.model)
    except (OSError, CheckpointError, ValueError) as exc:
        print(f"error: cannot load model: {exc}", file=sys.stderr)
        return EXIT_IO
    inputs = _predict_inputs(args)
    rows = []
    if inputs:
        ids = []
        for sid, sql in inputs:
            try:
                ids.append(encode(lex(sql, config.fold_literals), vocab, config.seq_len))
            except LexError as exc:
                raise DataError(f"cannot lex {sid}: {exc}\n  input: {sql!r}") from None
        preds = net.predict_batch(np.stack(ids))
        rows = [prediction_row(sid, p) for (sid, _), p in zip(inputs, preds)]
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            write_predictions(rows, fh)
    else:
        buf = io.StringIO()
        write_predictions(rows, buf)
        sys.stdout.write(buf.getvalue() if rows else "")
    return EXIT_OK


def cmd_metrics(args) -> int:
    records = load_csv(args.labels)
    rows = read_predictions(args.preds)
    doc = metrics_report(records, rows)
    _write_text(args.out, dump_json(doc))
    if args.curves:
        write_curves(doc, args.curves)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _add_model_flags(p) -> None:
    p.add_argument("--mode", choices=("joint", "iterative"), default="joint", help="joint 6-output BCE or per-head round robin")
    p.add_argument("--epochs", type=int, required=True, help="training epochs (>= 1)")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size (>= 2)")
    p.add_argument("--seed", type=int, default=_default_seed(), help="master seed (default: $SQLGRADE_SEED or 0)")
    p.add_argument("--class-weighting", action="store_true", help="inverse-frequency weights for C and R targets")
    p.add_argument("--scaled-attention", action="store_true", help="divide attention scores by sqrt(d)")
    p.add_argument("--no-fold-literals", action="store_true", help="keep literal text instead of <str>/<num>")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sqlgrade", description="Multi-task convolutional self-attention grader for SQL statements.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic labeled corpus")
    p.add_argument("--n", type=int, required=True, help="number of records (>= 8)")
    p.add_argument("--seed", type=int, default=_default_seed(), help="generator seed")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("vocab", help="build a vocabulary file from a dataset")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--out", required=True, help="output vocabulary JSON")
    p.add_argument("--min-count", type=int, default=1, help="minimum token frequency")
    p.add_argument("--no-fold-literals", action="store_true", help="keep literal text instead of <str>/<num>")
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset CSV")
    _add_model_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path (.grader.json)")
    p.add_argument("--history", help="per-epoch history (JSON lines)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("xval", help="k-fold or leave-one-out cross-validation")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--scheme", choices=("kfold", "loo"), default="kfold", help="fold scheme")
    p.add_argument("--k", type=int, default=10, help="folds for kfold")
    _add_model_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--preds", help="out-of-fold predictions CSV")
    p.add_argument("--curves", help="directory for per-curve CSVs")
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("predict", help="grade statements with a trained model")
    p.add_argument("--model", required=True, help="checkpoint path")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--sql", help="a single SQL statement")
    src.add_argument("--stdin", action="store_true", help="one statement per line on stdin")
    src.add_argument("--data", help="CSV with submission_id and submitted_answer columns")
    p.add_argument("--out", help="predictions CSV (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("metrics", help="recompute metrics from a predictions CSV")
    p.add_argument("--preds", required=True, help="predictions CSV")
    p.add_argument("--labels", required=True, help="labeled dataset CSV")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--curves", help="directory for per-curve CSVs")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sqlgrade {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
