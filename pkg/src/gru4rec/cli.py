"""Command line: preprocess, train, eval, baseline, validate.

Exit codes: 0 ok, 1 validation/config error, 2 input/output error,
3 integrity error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import subprocess
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import SessionCorpus, build_corpus
from .datasets import ADAPTERS, DEFAULT_TEST_DAYS, EventLog, MalformedRowError, preprocess, write_outputs
from .evaluation import DEFAULT_CUTOFFS, EvalConfig, evaluate, popularity_baseline
from .serialization import IntegrityError, file_sha256, load_model, read_params, save_model
from .training import ConfigError, NumericError, TrainConfig, fit

log = logging.getLogger("gru4rec")

DATA_ROOT_ENV = "GRU4REC_DATA_ROOT"

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INTEGRITY, EXIT_NUMERIC = 0, 1, 2, 3, 4

# hyperparameter flags, one per TrainConfig field
_HELP = {
    "loss": "training loss: cross-entropy or bpr-max",
    "final_act": "final activation: softmax, linear, relu, elu, elu-<alpha>, selu",
    "layers": "GRU layer sizes, comma separated",
    "batch_size": "number of session-parallel slots",
    "n_sample": "extra shared negatives per mini-batch",
    "sample_alpha": "sampling probability exponent on item support",
    "logq": "logQ correction strength (cross-entropy only)",
    "bpreg": "score regularization weight (bpr-max only)",
    "constrained_embedding": "tie the input embedding to the output weights",
    "embedding": "separate input embedding size; 0 feeds one-hot inputs",
    "dropout_p_embed": "dropout probability on the input embedding",
    "dropout_p_hidden": "dropout probability on GRU outputs",
    "learning_rate": "Adagrad learning rate",
    "momentum": "Nesterov momentum",
    "n_epochs": "training epochs",
    "seed": "random seed for initialization, sampling, dropout and order",
    "shuffle": "shuffle session order every epoch",
    "sample_cache_size": "number of pre-drawn negative samples",
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def resolve_input(path: str) -> Path:
    """Existing path as given, or relative to the data root directory."""
    p = Path(path)
    if p.exists():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute() and (Path(root) / p).exists():
        return Path(root) / p
    raise CliError(f"input file not found: {path}", EXIT_IO)


def write_manifest(path: Path, command: str, argv, config: dict, inputs, outputs, seed, started: float) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {str(p): file_sha256(p) for p in outputs},
        "started_unix": round(started, 3),
        "wall_seconds": round(time.time() - started, 3),
        "version": version_string(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args, argv) -> int:
    started = time.time()
    inputs = [resolve_input(p) for p in args.input]
    try:
        result = preprocess(
            inputs,
            args.dataset,
            args.test_days,
            args.gap_seconds,
            strict=not args.lenient,
        )
    except MalformedRowError as e:
        raise CliError(str(e), EXIT_IO) from e
    name = args.name or args.dataset
    paths = write_outputs(result, args.output_dir, name)
    write_manifest(
        Path(args.output_dir) / f"{name}_manifest.json",
        "preprocess",
        argv,
        {"dataset": args.dataset, "test_days": result.split.test_window_days, "gap_seconds": args.gap_seconds},
        inputs,
        list(paths.values()),
        None,
        started,
    )
    print(json.dumps(result.stats, indent=2, sort_keys=True))
    return EXIT_OK


def train_config_from_args(args) -> TrainConfig:
    """Defaults, overridden by ``--config``, overridden by explicit flags."""
    values = {}
    if args.config:
        values.update(read_params(resolve_input(args.config)))
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    config = TrainConfig.from_dict(values)
    config.validate()
    return config


def _epoch_log(history) -> str:
    lines = ["epoch\tloss\tevents\tseconds"]
    lines += [f"{h.epoch}\t{h.loss:.8f}\t{h.events}\t{h.seconds:.3f}" for h in history]
    return "\n".join(lines) + "\n"


def cmd_train(args, argv) -> int:
    started = time.time()
    train_path = resolve_input(args.train)
    config = train_config_from_args(args)
    corpus = build_corpus(EventLog.read_tsv(train_path))
    log.info("training on %d events, %d sessions, %d items", corpus.n_events, corpus.n_sessions, corpus.n_items)
    params, history = fit(corpus, config)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(params, config, corpus.item_ids, out)
    item_map = out.with_name(out.name + ".items.tsv")
    corpus.write_item_map(item_map)
    epochs = out.with_name(out.name + ".epochs.tsv")
    epochs.write_text(_epoch_log(history))
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "train",
        argv,
        config.to_dict(),
        [train_path],
        [out, item_map, epochs],
        config.seed,
        started,
    )
    print(_epoch_log(history), end="")
    return EXIT_OK


def _write_eval(result, output: str | None, config: dict, started: float, argv, inputs, command: str) -> None:
    print(result.to_tsv(), end="")
    if not output:
        return
    prefix = Path(output)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    tsv = prefix.with_name(prefix.name + ".tsv")
    js = prefix.with_name(prefix.name + ".json")
    tsv.write_text(result.to_tsv())
    js.write_text(result.to_json(config=config, version=version_string()))
    write_manifest(
        prefix.with_name(prefix.name + ".manifest.json"), command, argv, config, inputs, [tsv, js], None, started
    )


def cmd_eval(args, argv) -> int:
    started = time.time()
    model_path = resolve_input(args.model)
    test_path = resolve_input(args.test)
    try:
        params, train_config, item_ids = load_model(model_path)
    except IntegrityError as e:
        raise CliError(str(e), EXIT_INTEGRITY) from e
    if args.item_map:
        external = SessionCorpus.read_item_map(resolve_input(args.item_map))
        if not external.equals(item_ids):
            raise CliError(f"{args.item_map}: item map does not match the model vocabulary", EXIT_INTEGRITY)
    corpus = SessionCorpus(item_ids, np.ones(len(item_ids), dtype=np.int64), np.zeros(0, np.int64), np.zeros(1, np.int64))
    eval_config = EvalConfig(tuple(args.cutoffs), args.eval_batch_size)
    result = evaluate(params, EventLog.read_tsv(test_path), corpus, eval_config)
    config = {"cutoffs": list(eval_config.cutoffs), "model": str(model_path), "train_config": train_config.to_dict()}
    _write_eval(result, args.output, config, started, argv, [model_path, test_path], "eval")
    return EXIT_OK


def cmd_baseline(args, argv) -> int:
    started = time.time()
    train_path, test_path = resolve_input(args.train), resolve_input(args.test)
    corpus = build_corpus(EventLog.read_tsv(train_path))
    eval_config = EvalConfig(tuple(args.cutoffs), args.eval_batch_size)
    result = evaluate(popularity_baseline(corpus), EventLog.read_tsv(test_path), corpus, eval_config)
    config = {"cutoffs": list(eval_config.cutoffs), "baseline": "popularity"}
    _write_eval(result, args.output, config, started, argv, [train_path, test_path], "baseline")
    return EXIT_OK


def cmd_validate(args, argv) -> int:
    from .validation import emit_feature_matrix, feature_matrix_text, reports_tsv, run_all

    started = time.time()
    reports = run_all(args.seed)
    table = reports_tsv(reports)
    matrix = feature_matrix_text(emit_feature_matrix(reports))
    print(table, end="")
    print()
    print(matrix, end="")
    if args.output_dir:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "checks.tsv").write_text(table)
        (out / "features.txt").write_text(matrix)
        write_manifest(
            out / "validate_manifest.json",
            "validate",
            argv,
            {"seed": args.seed},
            [],
            [out / "checks.tsv", out / "features.txt"],
            args.seed,
            started,
        )
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# parser


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _layers(v: str) -> list[int]:
    try:
        return [int(x) for x in v.strip("[]").split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"layers: {e}") from e


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("hyperparameters (override --config)")
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        default = getattr(defaults, f.name)
        if f.name == "layers":
            kind = _layers
        elif isinstance(default, bool):
            kind = _bool
        else:
            kind = type(default)
        shown = ",".join(map(str, default)) if isinstance(default, list) else default
        g.add_argument(f"--{f.name}", type=kind, default=None, metavar=f.name.upper(),
                       help=f"{_HELP[f.name]} (default: {shown})")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cutoffs", type=int, nargs="+", default=list(DEFAULT_CUTOFFS), help="recall/MRR cutoffs")
    p.add_argument("--eval_batch_size", type=int, default=EvalConfig.batch_size, help="sessions evaluated in parallel")
    p.add_argument("--output", help="write <output>.tsv, <output>.json and a manifest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gru4rec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw dataset files to train/test TSVs and stats JSON")
    p.add_argument("--dataset", required=True, choices=ADAPTERS)
    p.add_argument("--input", required=True, nargs="+", help=f"raw files (relative paths also searched under ${DATA_ROOT_ENV})")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--test-days", type=int, default=None, help=f"test window in days (defaults: {DEFAULT_TEST_DAYS})")
    p.add_argument("--gap-seconds", type=float, default=3600)
    p.add_argument("--name", help="output file prefix (default: dataset name)")
    p.add_argument("--lenient", action="store_true", help="skip malformed rows with a warning instead of failing")

    p = sub.add_parser("train", help="train a model on a preprocessed train TSV")
    p.add_argument("--train", required=True, help="train TSV (SessionId, ItemId, Time)")
    p.add_argument("--output", required=True, help="model file to write")
    p.add_argument("--config", help="parameter file of key=value pairs")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="recall@N and MRR@N of a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--item-map", help="item map TSV that must match the model vocabulary")
    _add_eval_flags(p)

    p = sub.add_parser("baseline", help="recall@N and MRR@N of the popularity baseline")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    _add_eval_flags(p)

    p = sub.add_parser("validate", help="run the correctness checks and print the feature matrix")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--output-dir")
    return parser


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except IntegrityError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, MalformedRowError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
