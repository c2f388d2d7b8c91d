"""Command-line front end.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import training
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthTemplate, generate_augmented, generate_synthetic, load_dataset, load_subjects, save_dataset
from .errors import (
    ConfigurationError,
    DatasetError,
    InvalidInputError,
    RRNError,
    ShapeError,
)
from .landmarks import LandmarkName, canonical_order, ordered_pairs, pair_feature_tensor
from .model import DropoutConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

# errors caused by what the user passed in, as opposed to failures during a run
USAGE_ERRORS = (ConfigurationError, DatasetError, InvalidInputError, ShapeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.add_argument("--json", action="store_true", help="machine-readable errors and summaries")
    return p


def _model_flags(p: argparse.ArgumentParser, ru="dense", with_preset=True):
    if with_preset:
        p.add_argument("--preset", default="5-landmarks")
    p.add_argument("--ru", choices=["mlp", "dense"], default=ru)
    p.add_argument("--dropout", choices=["none", "regular", "variational", "targeted"], default="none")
    p.add_argument("--epochs", type=int, help="default: 20, or 100 for MLP units without fast dropout")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--augment", type=int, default=5000, help="augmented subjects per training fold")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--no-normalize", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="rrn", description="Relational reasoning network for 3-D landmark prediction")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic cohort")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--jitter", type=float, default=2.0, help="per-axis Gaussian jitter in px")

    p = sub.add_parser("augment", parents=[common], help="add interpolated subjects to a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--count", type=int, default=5000)
    p.add_argument("--noise", type=float, default=5.0)

    p = sub.add_parser("features", parents=[common], help="pairwise feature vectors of one subject")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--preset", default="5-landmarks")
    p.add_argument("--inputs", help="comma-separated input landmarks, overrides --preset")

    p = sub.add_parser("train", parents=[common], help="cross-validated training (--folds 1: one model)")
    p.add_argument("--data", type=Path, required=True)
    _model_flags(p)

    p = sub.add_parser("predict", parents=[common], help="predict target landmarks")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("evaluate", parents=[common], help="per-landmark errors of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("compare-dropout", parents=[common], help="epochs-to-threshold per dropout regime")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--threshold-factor", type=float, default=1.1)
    _model_flags(p, ru="mlp")

    p = sub.add_parser("run-preset", parents=[common], help="train, evaluate and write all artifacts")
    p.add_argument("name", nargs="?")
    p.add_argument("--data", type=Path, required=True)
    _model_flags(p)
    return parser


# ------------------------------------------------------------------- commands


def _require_out(args, kind="file") -> Path:
    if args.out is None:
        raise UsageError(f"{args.command} needs --out {kind.upper()}")
    return args.out


def _experiment(args, name: str) -> training.ExperimentConfig:
    if args.batch < 2:
        raise UsageError("--batch must be at least 2")
    if args.folds < 1:
        raise UsageError("--folds must be positive")
    if args.augment < 0:
        raise UsageError("--augment must be non-negative")
    return training.preset(
        name,
        ru_variant=args.ru,
        dropout=DropoutConfig(args.dropout),
        epochs=args.epochs,
        normalize=not args.no_normalize,
        batch_size=args.batch,
        folds=max(args.folds, 2),
        seed=args.seed,
        lr=args.lr,
        augment_count=args.augment,
    )


def cmd_gen_synth(args) -> dict:
    out = _require_out(args)
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    template = SynthTemplate(jitter_sigma=args.jitter)
    ds = generate_synthetic(template, args.count, np.random.default_rng(args.seed))
    save_dataset(ds, out)
    return {"subjects": len(ds), "out": str(out)}


def cmd_augment(args) -> dict:
    out = _require_out(args)
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    ds = load_dataset(args.data)
    if args.count and len(ds.originals()) < 2:
        raise ConfigurationError("augmentation needs at least 2 non-augmented subjects")
    result = generate_augmented(ds, args.count, np.random.default_rng(args.seed), noise_bound=args.noise)
    save_dataset(result, out)
    return {"subjects": len(result), "added": len(result) - len(ds), "out": str(out)}


def features_csv(lset, input_names) -> str:
    names = canonical_order(input_names)
    feats = pair_feature_tensor(lset.as_array()[None], names)[:, 0]
    pairs = ordered_pairs(names)
    rows = sorted(zip(pairs, feats), key=lambda r: (str(r[0][0]), str(r[0][1])))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject", "a", "b"] + [f"f{i}" for i in range(1, 20)])
    for (a, b), vec in rows:
        w.writerow([lset.subject_id, str(a), str(b)] + [f"{float(v):.9g}" for v in vec])
    return buf.getvalue()


def cmd_features(args) -> dict:
    if args.inputs:
        names = [LandmarkName.parse(n.strip()) for n in args.inputs.split(",") if n.strip()]
        if len(names) < 2 or LandmarkName.Me not in names:
            raise UsageError("--inputs needs at least 2 landmarks including Me")
    else:
        if args.preset not in training.PRESETS:
            raise ConfigurationError(f"unknown preset {args.preset!r}; valid presets: {', '.join(training.PRESETS)}")
        names = list(training.PRESETS[args.preset][0])
    ds = load_dataset(args.data)
    if args.subject not in ds.ids:
        raise DatasetError(f"unknown subject {args.subject!r}")
    text = features_csv(ds[args.subject], names)
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text)
    return {"rows": text.count("\n") - 1}


def cmd_train(args) -> dict:
    out = _require_out(args, "dir")
    config = _experiment(args, args.preset)
    ds = load_dataset(args.data)
    if args.folds == 1:
        result = training.train_full(config, ds)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.npz", result.model, result.optimizer, result.rng,
                        extra={"experiment": config.to_dict()})
        _write_log(out / "log.jsonl", result.history)
        return {"checkpoints": [str(out / "model.npz")]}
    outcomes = training.train(config, ds)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    paths = []
    for o in outcomes:
        path = out / "checkpoints" / f"fold{o.fold}.npz"
        save_checkpoint(path, o.fit.model, o.fit.optimizer, o.fit.rng,
                        extra={"fold": o.fold, "experiment": config.to_dict()})
        paths.append(str(path))
    _write_log(out / "log.jsonl", [h for o in outcomes for h in o.fit.history])
    return {"checkpoints": paths}


def _write_log(path: Path, history) -> None:
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")


def cmd_predict(args) -> dict:
    model, _, _ = load_checkpoint(args.checkpoint)
    subjects = load_subjects(args.data)
    problems = []
    for s in subjects:
        missing = s.missing(model.inputs)
        if missing:
            problems.append(f"{s.subject_id}: {', '.join(map(str, missing))}")
    if problems:
        raise DatasetError("subjects lack model input landmarks: " + "; ".join(problems))
    records = []
    if subjects:
        coords = np.zeros((len(subjects), 14, 3))
        for i, s in enumerate(subjects):
            for name, value in s.coords.items():
                coords[i, name.index] = value
        _, terminal = model.predict_coords(coords)
        for i, s in enumerate(subjects):
            spacing = np.asarray(s.spacing_mm)
            records.append({
                "id": s.subject_id,
                "predictions": {
                    str(t): {"px": terminal[i, k].tolist(), "mm": (terminal[i, k] * spacing).tolist()}
                    for k, t in enumerate(model.targets)
                },
            })
    text = json.dumps(records, indent=1) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text)
    return {"subjects": len(records)}


def cmd_evaluate(args) -> dict:
    out = _require_out(args, "dir")
    model, meta, _ = load_checkpoint(args.checkpoint)
    subjects = load_subjects(args.data)
    fold = meta.get("extra", {}).get("fold", 0)
    report = training.evaluate(model, subjects, fold=str(fold))
    name = meta.get("extra", {}).get("experiment", {}).get("name", "custom")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(training.metrics_csv(report, name))
    (out / "errors.csv").write_text(training.errors_csv(report, name))
    return {"skipped": report.skipped, "landmarks": report.landmarks()}


def cmd_compare_dropout(args) -> dict:
    out = _require_out(args, "dir")
    if args.threshold_factor <= 1.0:
        raise UsageError("--threshold-factor must exceed 1")
    config = _experiment(args, args.preset)
    ds = load_dataset(args.data)
    rows = training.compare_dropout(config, ds, args.threshold_factor)
    out.mkdir(parents=True, exist_ok=True)
    (out / "convergence.csv").write_text(training.convergence_csv(rows))
    return {"epochs_to_threshold": {r.regime: r.epochs_to_threshold for r in rows}}


def cmd_run_preset(args) -> dict:
    name = args.name or args.preset
    out = _require_out(args, "dir")
    if name not in training.PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; valid presets: {', '.join(training.PRESETS)}")
    config = _experiment(args, name)
    ds = load_dataset(args.data)
    report = training.run_experiment(config, ds, out)
    pooled = {r.landmark: r.mean_mm for r in report.rows if r.fold == "all"}
    return {"preset": name, "mean_mm": pooled}


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "augment": cmd_augment,
    "features": cmd_features,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "compare-dropout": cmd_compare_dropout,
    "run-preset": cmd_run_preset,
}


def _fail(code: int, exc: BaseException, as_json: bool) -> int:
    kind = "usage" if code == EXIT_USAGE else "runtime"
    if as_json:
        print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    else:
        print(f"rrn: error: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json" in argv
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc, as_json)
    try:
        summary = COMMANDS[args.command](args)
    except (UsageError, *USAGE_ERRORS) as exc:
        return _fail(EXIT_USAGE, exc, as_json)
    except (RRNError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc, as_json)
    if args.json:
        print(json.dumps(summary))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
