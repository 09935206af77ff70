"""One executable for the whole pipeline.

Subcommands: synth, ingest, augment, train, evaluate, predict, gradcheck.
Each writes a run manifest (resolved configuration, seed, input content
hashes) before its artifacts, prints a human summary to stdout, and exits
with a distinct code per failure class:

    0 success            4 schema or input validation error
    1 unexpected error   5 missing or unreadable model
    2 usage              6 numeric failure (non-finite loss, gradcheck over
    3 missing input file   tolerance)

Config files are flat `key = value` lines with `#` comments; command-line
flags win over file values. Environment variables are never consulted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, evaluation, preprocess, records, synthgen, tlstm, training
from .autodiff import NumericError
from .records import SchemaError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4
EXIT_MODEL = 5
EXIT_NUMERIC = 6


class ModelError(Exception):
    pass


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Flat `key = value` config dialect; `#` starts a comment."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_number}: expected `key = value`")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(
    manifest_path: Path,
    subcommand: str,
    config: dict,
    inputs: list[Path],
    outputs: list[str],
    seed: int | None = None,
) -> None:
    manifest = {
        "tool": "myoprog",
        "version": __version__,
        "subcommand": subcommand,
        "seed": seed,
        "config": {k: v for k, v in sorted(config.items())},
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": outputs,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest_path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _require_file(path: str | Path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _load_model(path: str | Path):
    path = Path(path)
    if not path.is_file():
        raise ModelError(f"model file not found: {path}")
    try:
        params, kind, standardizer = tlstm.load_checkpoint(path)
    except ValueError as exc:
        raise ModelError(f"unreadable model: {exc}")
    if standardizer is None:
        raise ModelError(f"{path} carries no standardizer; train before predicting")
    return params, kind, standardizer


def _config_flags(args: argparse.Namespace) -> dict:
    skip = {"func", "command"}
    config = {}
    for key, value in vars(args).items():
        if key in skip:
            continue
        config[key] = str(value) if isinstance(value, Path) else value
    return config


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    kv = parse_kv_file(_require_file(args.spec)) if args.spec else {}
    if args.scale is not None:
        kv = {**kv, "composition": "reference", "scale": str(args.scale)}
    spec = synthgen.spec_from_kv(kv)
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    write_manifest(
        Path(str(out) + ".manifest.json"),
        "synth",
        _config_flags(args),
        [Path(args.spec)] if args.spec else [],
        [out.name],
        seed=spec.seed,
    )
    cohort = synthgen.generate(spec)
    records.write_records_csv(cohort, out)
    eyes = {(r.subject_id, r.eye) for r in cohort}
    print(
        f"synth: wrote {len(cohort)} records for {len(eyes)} eyes "
        f"({spec.n_subjects} subjects) to {out}"
    )
    return EXIT_OK


def cmd_ingest(args) -> int:
    source = _require_file(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(
        out_dir / "manifest.json",
        "ingest",
        _config_flags(args),
        [source],
        ["records.csv", "report.csv"],
    )
    parsed = records.parse_records(source)
    grouped = records.group_histories(parsed.records, parsed.row_numbers)
    kept = [r for history in grouped.histories for r in history.records]
    records.write_records_csv(kept, out_dir / "records.csv")
    report = (
        [("error", e) for e in parsed.errors]
        + [("warning", w) for w in parsed.warnings]
        + [("warning", w) for w in grouped.warnings]
        + [("skipped", s) for s in grouped.skipped]
    )
    records.write_report_csv(
        [records.ReportEntry(e.row, f"{kind}: {e.reason}") for kind, e in report],
        out_dir / "report.csv",
    )
    print(
        f"ingest: {len(parsed.records)} valid records, {len(parsed.errors)} row errors, "
        f"{len(parsed.warnings) + len(grouped.warnings)} warnings; "
        f"{len(grouped.histories)} eye histories kept, {len(grouped.skipped)} skipped"
    )
    return EXIT_OK


def cmd_augment(args) -> int:
    source = _require_file(args.histories)
    out = Path(args.out)
    write_manifest(
        Path(str(out) + ".manifest.json"),
        "augment",
        _config_flags(args),
        [source],
        [out.name],
        seed=args.seed,
    )
    parsed = records.parse_records(source)
    if parsed.errors:
        first = parsed.errors[0]
        raise SchemaError(
            f"{len(parsed.errors)} invalid rows in {source} "
            f"(first: row {first.row}: {first.reason})"
        )
    grouped = records.group_histories(parsed.records, parsed.row_numbers)
    samples = []
    for history in grouped.histories:
        samples.extend(preprocess.augment(history))
    dataset = preprocess.split(samples, ratio=args.ratio, seed=args.seed, mode=args.split)
    preprocess.dump_samples(out, samples, dataset)

    by_length: dict[int, int] = {}
    for sample in samples:
        by_length[sample.length] = by_length.get(sample.length, 0) + 1
    length_summary = " ".join(f"L{k}:{v}" for k, v in sorted(by_length.items()))
    n_train = len(dataset.train_samples())
    n_test = len(dataset.test_samples())
    print(
        f"augment: {len(samples)} samples from {len(grouped.histories)} histories "
        f"({length_summary}); split {args.split}: {n_train} train / {n_test} test / "
        f"{len(dataset.excluded)} excluded"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    source = _require_file(args.samples)
    kv = parse_kv_file(_require_file(args.config)) if args.config else {}
    config = training.TrainConfig.from_kv(kv)
    # flags win over the config file
    for attr in (
        "epochs",
        "batch_size",
        "learning_rate",
        "optimizer",
        "seed",
        "decay_kind",
        "hidden_dim",
        "clip_norm",
        "checkpoint_every",
    ):
        value = getattr(args, attr)
        if value is not None:
            setattr(config, attr, value)
    try:
        config.validate()
    except ValueError as exc:
        raise SchemaError(f"bad training config: {exc}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = [source] + ([Path(args.config)] if args.config else [])
    write_manifest(
        out_dir / "manifest.json",
        "train",
        {**_config_flags(args), "resolved": vars(config).copy()},
        inputs,
        ["model.txt", "standardizer.txt", "loss.csv"],
        seed=config.seed,
    )

    samples, sides = preprocess.load_samples(source)
    dataset = preprocess.dataset_from_sides(samples, sides)
    result = training.train(dataset, config, checkpoint_dir=out_dir)
    tlstm.save_checkpoint(
        out_dir / "model.txt", result.params, config.decay_kind, result.standardizer
    )
    result.standardizer.save(out_dir / "standardizer.txt")
    result.trace.to_csv(out_dir / "loss.csv")
    print(
        f"train: {config.epochs} epochs on {len(dataset.train_samples())} samples; "
        f"final mse {result.trace.mse[-1]:.6f}; model in {out_dir}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    source = _require_file(args.samples)
    params, kind, standardizer = _load_model(args.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(
        out_dir / "manifest.json",
        "evaluate",
        _config_flags(args),
        [source, Path(args.model)],
        ["metrics.csv", "metrics.md"],
    )
    samples, sides = preprocess.load_samples(source)
    dataset = preprocess.dataset_from_sides(samples, sides)
    metrics = evaluation.evaluate(dataset, params, standardizer, kind)
    (out_dir / "metrics.csv").write_text(
        evaluation.render_table(metrics, "csv"), encoding="utf-8"
    )
    (out_dir / "metrics.md").write_text(
        evaluation.render_table(metrics, "markdown"), encoding="utf-8"
    )
    o = metrics.overall
    print(
        f"evaluate: MAE {o.mean:.3f} ± {o.std:.3f} D over {o.count} test samples; "
        f"{metrics.acceptable_fraction:.1%} within "
        f"{evaluation.CLINICAL_THRESHOLD_D} D"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    params, kind, standardizer = _load_model(args.model)
    source = _require_file(args.history)
    parsed = records.parse_records(source)
    if parsed.errors:
        first = parsed.errors[0]
        raise SchemaError(f"row {first.row}: {first.reason}")
    grouped = records.group_histories(
        parsed.records, parsed.row_numbers, min_records=1
    )
    if not grouped.histories:
        raise SchemaError(f"{source} contains no usable history")
    for history in grouped.histories:
        features = np.stack([preprocess.encode(r) for r in history.records])
        intervals = [
            records.compute_interval(a.check_date, b.check_date)
            for a, b in zip(history.records, history.records[1:])
        ]
        se = tlstm.predict_horizon(
            features, intervals, args.horizon, params, standardizer, kind
        )
        label = records.DEGREE_LABELS[records.classify_myopia(se)]
        print(
            f"{history.subject_id},{history.eye},{args.horizon},{se:.4f},{label}"
        )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = tlstm.gradcheck_network(n_seeds=args.seeds, h=args.h)
    print(f"gradcheck: max relative error {worst:.3e} over {args.seeds} seeds")
    if worst >= args.tolerance:
        print(
            f"error code={EXIT_NUMERIC} kind=gradcheck "
            f"msg=max relative error {worst:.3e} >= tolerance {args.tolerance:.1e}",
            file=sys.stderr,
        )
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="myoprog",
        description="Spherical-equivalent progression pipeline: synthesize, "
        "ingest, augment, train, evaluate, predict.",
    )
    parser.add_argument("--version", action="version", version=f"myoprog {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic screening cohort CSV")
    p.add_argument("--spec", help="cohort spec file (key = value)")
    p.add_argument("--scale", type=float, help="use the reference mix at this scale")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate records and build eye histories")
    p.add_argument("--input", required=True, help="raw records CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("augment", help="expand histories into split samples")
    p.add_argument("--histories", required=True, help="validated records CSV")
    p.add_argument("--out", required=True, help="output samples JSONL")
    p.add_argument("--split", choices=preprocess.SPLIT_MODES, default="per_subject")
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="1 = bitwise-reproducible")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train the sequence model")
    p.add_argument("--samples", required=True, help="samples JSONL from augment")
    p.add_argument("--config", help="training config file (key = value)")
    p.add_argument("--out", required=True, help="model output directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--optimizer", choices=training.OPTIMIZERS, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--decay", dest="decay_kind", choices=tlstm.DECAY_KINDS, default=None)
    p.add_argument("--hidden", dest="hidden_dim", type=int, default=None)
    p.add_argument("--clip-norm", dest="clip_norm", type=float, default=None)
    p.add_argument(
        "--checkpoint-every", dest="checkpoint_every", type=int, default=None
    )
    p.add_argument("--threads", type=int, default=1, help="1 = bitwise-reproducible")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="stratified MAE on the test split")
    p.add_argument("--samples", required=True, help="samples JSONL from augment")
    p.add_argument("--model", required=True, help="model.txt checkpoint")
    p.add_argument("--out", required=True, help="metrics output directory")
    p.add_argument("--threads", type=int, default=1, help="1 = bitwise-reproducible")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict SE for each eye in a history CSV")
    p.add_argument("--model", required=True, help="model.txt checkpoint")
    p.add_argument("--history", required=True, help="records CSV (>= 1 visit per eye)")
    p.add_argument(
        "--horizon", type=int, required=True, help="prediction horizon in quarters"
    )
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the gradients")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    threads = getattr(args, "threads", 1)
    if threads is not None and threads < 1:
        print("error code=2 kind=usage msg=--threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error code={EXIT_MISSING_FILE} kind=missing_file msg={exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except SchemaError as exc:
        print(f"error code={EXIT_SCHEMA} kind=schema msg={exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ModelError as exc:
        print(f"error code={EXIT_MODEL} kind=model msg={exc}", file=sys.stderr)
        return EXIT_MODEL
    except (NumericError, training.TrainError) as exc:
        print(f"error code={EXIT_NUMERIC} kind=numeric msg={exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, synthgen.SpecError) as exc:
        print(f"error code={EXIT_SCHEMA} kind=invalid msg={exc}", file=sys.stderr)
        return EXIT_SCHEMA


def entrypoint() -> None:  # console_scripts hook
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
