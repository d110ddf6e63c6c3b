"""Command-line front end: training, evaluation, and analysis harnesses.

Subcommands
-----------
train       fit a model; write metrics and a checkpoint
eval        score a saved checkpoint on a dataset
compare     train single-step and multi-step arms from identical weights
sweep       train once per refinement-step count and tabulate accuracy
dump-steps  trace every step's prediction per example from a checkpoint
synth-gen   write a synthetic dataset file

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical divergence during training.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

from .data import (
    SYNTHETIC_SCHEMA,
    THREE_WAY_LABELS,
    TWO_WAY_LABELS,
    DataError,
    SyntheticTaskSpec,
    TsvSchema,
    Vocabulary,
    embedding_matrix,
    load_embeddings,
    read_snli_jsonl,
    read_token_cache,
    read_tsv_pairs,
    synthetic_generate,
    synthetic_raw_pairs,
    tokenize_pair,
    write_synthetic_tsv,
)
from .model import SanParameters
from .training import (
    CheckpointError,
    DivergenceError,
    RunConfig,
    compare_single_vs_multi,
    dump_step_predictions,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    sweep_steps,
    synthetic_model_config,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2; usage problems here are code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_data_flags(sub):
    sub.add_argument("--data", nargs="+", metavar="PATH",
                     help="dataset file(s): TRAIN [DEV] for training "
                          "commands, a single file otherwise")
    sub.add_argument("--format", choices=("snli", "cache", "synthetic", "tsv"),
                     default="cache",
                     help="file layout of --data (default: cache)")
    sub.add_argument("--tsv-cols", metavar="PREM,HYP,LABEL[,ID]",
                     help="column indices for --format tsv")
    sub.add_argument("--labels", choices=("three", "two"), default="three",
                     help="label set for file data (default: three)")
    sub.add_argument("--synthetic", action="store_true",
                     help="generate the closed-vocabulary task instead of "
                          "reading files")
    sub.add_argument("--synth-train", type=int, default=5000,
                     help="synthetic training pairs (default: 5000)")
    sub.add_argument("--synth-dev", type=int, default=1000,
                     help="synthetic dev pairs (default: 1000)")
    sub.add_argument("--synth-seed", type=int, default=7,
                     help="generator seed, separate from the run seed")


def _add_run_flags(sub):
    sub.add_argument("--config", metavar="PATH",
                     help="run-configuration json; flags override its fields")
    sub.add_argument("--steps", type=int, help="answer refinement steps")
    sub.add_argument("--seed", type=int, help="run seed")
    sub.add_argument("--epochs", type=int, help="training epochs")
    sub.add_argument("--batch-size", type=int, help="examples per batch")
    sub.add_argument("--lr", type=float, help="base learning rate")
    sub.add_argument("--single-step", action="store_true",
                     help="train the one-shot output layer instead")
    sub.add_argument("--embeddings", metavar="PATH",
                     help="pretrained word-vector text file")


def _label_set(args) -> tuple:
    return TWO_WAY_LABELS if args.labels == "two" else THREE_WAY_LABELS


def _read_file(path: str, args) -> list:
    """One dataset file -> TokenizedPair list."""
    labels = _label_set(args)
    try:
        if args.format == "cache":
            return read_token_cache(path)
        if args.format == "snli":
            raw, _ = read_snli_jsonl(path, labels=labels)
        elif args.format == "synthetic":
            raw, _ = read_tsv_pairs(path, SYNTHETIC_SCHEMA, labels=labels)
        else:
            if not args.tsv_cols:
                raise ValueError("--format tsv needs --tsv-cols")
            cols = [int(c) for c in args.tsv_cols.split(",")]
            schema = TsvSchema(premise_col=cols[0], hyp_col=cols[1],
                               label_col=cols[2],
                               id_col=cols[3] if len(cols) > 3 else None)
            raw, _ = read_tsv_pairs(path, schema, labels=labels)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    return [tokenize_pair(r) for r in raw]


def _load_train_dev(args) -> tuple:
    """-> (train TokenizedPairs, dev TokenizedPairs, label names)."""
    if args.synthetic:
        spec = SyntheticTaskSpec()
        n = args.synth_train + args.synth_dev
        rows = synthetic_generate(spec, n, seed=args.synth_seed)
        toks = [tokenize_pair(r) for r in synthetic_raw_pairs(rows)]
        return toks[:args.synth_train], toks[args.synth_train:], THREE_WAY_LABELS
    if not args.data or len(args.data) != 2:
        raise DataError("training needs --synthetic or --data TRAIN DEV")
    return (_read_file(args.data[0], args), _read_file(args.data[1], args),
            _label_set(args))


def _resolve_run(args) -> RunConfig:
    """Defaults <- --config file <- explicit flags, then validate."""
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                run = RunConfig.from_json(json.load(fh))
        except OSError as e:
            raise ValueError(f"cannot read config {args.config}: {e.strerror}")
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise ValueError(f"bad config {args.config}: {e}")
    elif args.synthetic:
        run = RunConfig(model=synthetic_model_config())
    else:
        run = RunConfig()
    if args.steps is not None:
        run.model = replace(run.model, steps=args.steps)
    for flag, field in (("seed", "seed"), ("epochs", "epochs"),
                        ("batch_size", "batch_size"), ("lr", "base_lr")):
        value = getattr(args, flag)
        if value is not None:
            setattr(run, field, value)
    if args.single_step:
        run.multi_step = False
    run.validate()
    return run


def _encode_all(vocab: Vocabulary, toks) -> list:
    return [(vocab.encode(t), t.label) for t in toks]


def _apply_embeddings(params, vocab, args, dim):
    table = _wrap_os_error(load_embeddings, args.embeddings, dim)
    params.word_emb.data[...] = embedding_matrix(vocab, table, dim)


def _wrap_os_error(fn, path, *rest):
    try:
        return fn(path, *rest)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None


def _emit(record_json: dict, fh=None):
    line = json.dumps(record_json, sort_keys=True)
    print(line)
    if fh is not None:
        fh.write(line + "\n")
        fh.flush()


def cmd_train(args) -> int:
    run = _resolve_run(args)
    train_toks, dev_toks, labels = _load_train_dev(args)
    vocab = Vocabulary.build(train_toks, labels=labels)
    if len(vocab.labels) != run.model.classes:
        run.model = replace(run.model, classes=len(vocab.labels))
        run.validate()
    train_set = _encode_all(vocab, train_toks)
    dev_set = _encode_all(vocab, dev_toks)
    params = SanParameters.create(run.model, vocab.word_count,
                                  vocab.char_count, run.seed)
    if args.embeddings:
        _apply_embeddings(params, vocab, args, run.model.word_dim)

    metrics_fh = None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "run.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(run.to_json(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        metrics_fh = open(os.path.join(args.out, "metrics.jsonl"), "w",
                          encoding="utf-8")
    try:
        outcome = train(run, params, train_set, dev_set,
                        log=lambda rec: _emit(rec.to_json(), metrics_fh))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    summary = {"best_epoch": outcome.best_epoch,
               "best_dev_accuracy": outcome.best_dev_accuracy}
    if args.out:
        ckpt_dir = os.path.join(args.out, "checkpoint")
        save_checkpoint(params, run, vocab, ckpt_dir)
        summary["checkpoint"] = ckpt_dir
    _emit(summary)
    return EXIT_OK


def _load_eval_data(args, vocab) -> list:
    """Encode a dataset against a checkpoint's vocabulary."""
    if args.synthetic:
        rows = synthetic_generate(SyntheticTaskSpec(), args.synth_dev,
                                  seed=args.synth_seed)
        toks = [tokenize_pair(r) for r in synthetic_raw_pairs(rows)]
    else:
        if not args.data or len(args.data) != 1:
            raise DataError("this command needs --synthetic or --data FILE")
        toks = _read_file(args.data[0], args)
    for t in toks:
        if not 0 <= t.label < len(vocab.labels):
            raise DataError(f"label {t.label} outside the checkpoint's "
                            f"label set {vocab.labels}")
    return _encode_all(vocab, toks)


def cmd_eval(args) -> int:
    params, run, vocab = load_checkpoint(args.checkpoint)
    dataset = _load_eval_data(args, vocab)
    rec = evaluate(params, run.model, dataset, multi_step=run.multi_step,
                   split="eval")
    _emit(rec.to_json())
    return EXIT_OK


def cmd_compare(args) -> int:
    run = _resolve_run(args)
    train_toks, dev_toks, labels = _load_train_dev(args)
    vocab = Vocabulary.build(train_toks, labels=labels)
    report = compare_single_vs_multi(
        run, vocab.word_count, vocab.char_count,
        _encode_all(vocab, train_toks), _encode_all(vocab, dev_toks),
        log=lambda rec: _emit(rec.to_json()))
    blob = report.to_json()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "compare.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(blob, fh, sort_keys=True, indent=2)
            fh.write("\n")
    _emit(blob)
    return EXIT_OK


def cmd_sweep(args) -> int:
    run = _resolve_run(args)
    train_toks, dev_toks, labels = _load_train_dev(args)
    vocab = Vocabulary.build(train_toks, labels=labels)
    step_values = tuple(range(args.min_steps, args.max_steps + 1))
    if not step_values:
        raise ValueError("empty step range")
    report = sweep_steps(run, vocab.word_count, vocab.char_count,
                         _encode_all(vocab, train_toks),
                         _encode_all(vocab, dev_toks),
                         step_values=step_values)
    blob = report.to_json()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "sweep.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(blob, fh, sort_keys=True, indent=2)
            fh.write("\n")
    _emit(blob)
    return EXIT_OK


def cmd_dump_steps(args) -> int:
    params, run, vocab = load_checkpoint(args.checkpoint)
    dataset = _load_eval_data(args, vocab)
    records = dump_step_predictions(params, run.model, dataset, vocab.labels)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        _emit({"written": args.out, "records": len(records)})
    else:
        for rec in records:
            _emit(rec)
    return EXIT_OK


def cmd_synth_gen(args) -> int:
    rows = synthetic_generate(SyntheticTaskSpec(), args.count,
                              seed=args.synth_seed)
    write_synthetic_tsv(args.out, rows)
    hist = {}
    for _, _, label in rows:
        hist[label] = hist.get(label, 0) + 1
    _emit({"written": args.out, "count": len(rows), "labels": hist})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sannli",
                     description="Multi-step entailment model: training, "
                                 "evaluation, and analysis harnesses.")
    subs = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = subs.add_parser("train",
                        help="fit a model and save a checkpoint")
    _add_data_flags(p)
    _add_run_flags(p)
    p.add_argument("--out", metavar="DIR",
                   help="write run.json, metrics.jsonl, and checkpoint/ here")
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("eval",
                        help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    _add_data_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = subs.add_parser("compare",
                        help="single-step vs multi-step from shared weights")
    _add_data_flags(p)
    _add_run_flags(p)
    p.add_argument("--out", metavar="DIR", help="also write compare.json here")
    p.set_defaults(fn=cmd_compare)

    p = subs.add_parser("sweep",
                        help="accuracy vs refinement-step count")
    _add_data_flags(p)
    _add_run_flags(p)
    p.add_argument("--min-steps", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=10)
    p.add_argument("--out", metavar="DIR", help="also write sweep.json here")
    p.set_defaults(fn=cmd_sweep)

    p = subs.add_parser("dump-steps",
                        help="per-step prediction traces from a checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    _add_data_flags(p)
    p.add_argument("--out", metavar="FILE", help="write json lines here")
    p.set_defaults(fn=cmd_dump_steps)

    p = subs.add_parser("synth-gen",
                        help="write a synthetic dataset file")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--synth-seed", type=int, default=7)
    p.add_argument("--out", required=True, metavar="FILE")
    p.set_defaults(fn=cmd_synth_gen)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except DivergenceError as e:
        print(f"sannli: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError) as e:
        print(f"sannli: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"sannli: bad configuration: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
