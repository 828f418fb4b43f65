"""Command-line pipeline: data generation, training, evaluation, inspection.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure. Results go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import autodiff as ad
from .autodiff import NumericalError, ShapeError
from .checkpoint import CheckpointError
from .dataset import (DatasetError, FAST_OVERRIDES, GenConfig, MICRO_OVERRIDES,
                      generate_dataset, load_manifest)
from .encoders import conv_features
from .gradcheck import check_names, run_checks
from .imageio import ImageFormatError, read_ppm
from .layout import (LayoutError, corpus_stats, layout_from_query,
                     parse_module_expr)
from .questions import QuestionParseError, parse_question
from .query import QueryParseError, parse_query
from .scenes import OracleError
from .training import (ModelError, TrainConfig, TrainExample, dump_attention,
                       evaluate_model, examples_from_manifest, load_model,
                       save_model, train_on_dataset)

__all__ = ["main"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="modnet",
                     description="Compositional QA with assembled module networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate a dataset directory")
    p.add_argument("--config", help="key=value generator config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fast", action="store_true",
                   help="small 61-question preset (16 images each)")
    p.add_argument("--micro", action="store_true",
                   help="tiny 10-question smoke preset")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.add_argument("--questions", type=int, help="override the question count")
    p.add_argument("--images-per-question", type=int)
    p.add_argument("--test-pairs", type=int)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default="nmn",
                   choices=["nmn", "nmn+lstm", "vis+lstm", "majority"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--exclude-size", type=int, default=None,
                   help="drop training questions of this layout size")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--patience", type=int, default=8,
                   help="early-stop epochs without validation improvement")
    p.add_argument("--metrics", help="metrics CSV path (default CKPT.metrics.csv)")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--report", help="write the full report CSV here")

    p = sub.add_parser("predict", help="answer one question about one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="PPM image file")
    p.add_argument("--question", required=True)

    p = sub.add_parser("attn", help="dump per-module attention heatmaps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--query", required=True, help="symbolic query, e.g. "
                   "'is(red, above(circle))'")
    p.add_argument("--out", required=True)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--op", choices=check_names(), help="check a single op")
    p.add_argument("--seed", type=int, default=1234)

    p = sub.add_parser("stats", help="layout structure statistics for a dataset")
    p.add_argument("--data", required=True)

    p = sub.add_parser("query", help="evaluate an explicit module expression")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--expr", required=True, help="module expression, e.g. "
                   "'measure[is](combine[and](find[red],find[blue]))'")
    return parser


def _cmd_gen_data(args) -> int:
    overrides: dict = {}
    if args.fast and args.micro:
        raise UsageError("--fast and --micro are mutually exclusive")
    if args.fast:
        overrides.update(FAST_OVERRIDES)
    if args.micro:
        overrides.update(MICRO_OVERRIDES)
    for key in ("seed", "questions", "images_per_question", "test_pairs"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
        config = GenConfig.from_text(text, overrides)
    else:
        config = GenConfig(**overrides)
    manifest = generate_dataset(config, args.out)
    train = sum(1 for r in manifest.records if r.split == "train")
    test = len(manifest.records) - train
    questions = len({r.question for r in manifest.records})
    print(f"wrote {len(manifest.records)} pairs ({train} train / {test} test) "
          f"over {questions} questions to {args.out}")
    return 0


def _cmd_train(args) -> int:
    manifest = load_manifest(args.data)
    config = TrainConfig(model=args.model, epochs=args.epochs,
                         batch_size=args.batch_size, seed=args.seed,
                         patience=args.patience,
                         exclude_size=args.exclude_size)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    result = train_on_dataset(args.data, manifest, config, log=log)
    save_model(result.context, args.out,
               extra_meta={"data_config_hash": manifest.config_hash,
                           "seed": str(args.seed)})
    metrics_path = args.metrics or f"{args.out}.metrics.csv"
    Path(metrics_path).write_text(result.metrics_csv(), encoding="utf-8")
    print(f"saved {args.out} (best val accuracy {result.best_val_accuracy:.4f} "
          f"at epoch {result.best_epoch}); metrics in {metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    context = load_model(args.ckpt)
    manifest = load_manifest(args.data)
    examples = examples_from_manifest(args.data, manifest, args.split)
    train_answers = [r.answer for r in manifest.split_records("train")]
    report = evaluate_model(context, examples, train_answers)
    print(f"{args.split} pairs: {report.n_pairs}")
    print(f"overall accuracy: {report.overall:.4f}")
    for size in sorted(report.by_size):
        good, total = report.by_size[size]
        print(f"size {size}: {good / total:.4f} ({total} pairs)")
    print(f"majority baseline ({report.majority_label}): "
          f"{report.majority_accuracy:.4f}")
    if args.report:
        Path(args.report).write_text(report.to_csv(), encoding="utf-8")
        print(f"report written to {args.report}")
    return 0


def _cmd_predict(args) -> int:
    context = load_model(args.ckpt)
    image = read_ppm(args.image)
    query = parse_question(args.question)
    example = TrainExample(image=image, question=args.question,
                           query=query.serialize(), answer="",
                           layout_size=0)
    dist = context.distribution(example)
    answer = context.labels[int(dist.data.argmax())]
    print(f"query: {query.serialize()}")
    print("answer: " + answer)
    for label, p in zip(context.labels, dist.data):
        print(f"  p({label}) = {float(p):.6f}")
    return 0


def _cmd_attn(args) -> int:
    context = load_model(args.ckpt)
    image = read_ppm(args.image)
    layout = context.layout_for(args.query)
    paths, dist = dump_attention(context, image, layout, args.out)
    print(f"layout: {layout.render()}")
    for path in paths:
        print(f"wrote {path}")
    answer = context.labels[int(dist.argmax())]
    print(f"answer: {answer}")
    return 0


def _cmd_grad_check(args) -> int:
    names = [args.op] if args.op else None
    results = run_checks(names, seed=args.seed)
    all_ok = True
    for name, err, ok in results:
        print(f"{name}: max relative error {err:.3e} "
              f"{'PASS' if ok else 'FAIL'}")
        all_ok = all_ok and ok
    if not all_ok:
        raise NumericalError("gradient checks failed")
    return 0


def _cmd_stats(args) -> int:
    manifest = load_manifest(args.data)
    queries = sorted({r.query for r in manifest.split_records("train")})
    layouts = [layout_from_query(parse_query(q), "shapes") for q in queries]
    print(corpus_stats(layouts).to_tsv(), end="")
    return 0


def _cmd_query(args) -> int:
    context = load_model(args.ckpt)
    if context.kind != "nmn":
        raise ModelError("module expressions need a plain nmn checkpoint")
    image = read_ppm(args.image)
    layout = parse_module_expr(args.expr)
    network = context.network_for(layout)
    features = conv_features(image, context.store, context.stack,
                             context.module_config)
    dist = ad.softmax(network(features))
    answer = context.labels[int(dist.data.argmax())]
    print(f"layout: {layout.render()}")
    print(f"answer: {answer}")
    for label, p in zip(context.labels, dist.data):
        print(f"  p({label}) = {float(p):.6f}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "attn": _cmd_attn,
    "grad-check": _cmd_grad_check,
    "stats": _cmd_stats,
    "query": _cmd_query,
}

_DATA_ERRORS = (DatasetError, ModelError, CheckpointError, ImageFormatError,
                QueryParseError, QuestionParseError, OracleError, LayoutError,
                ShapeError, FileNotFoundError, IsADirectoryError)


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
