"""Training loop, experiment presets, evaluation and dropout comparison."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import Dataset, generate_augmented, load_dataset, make_folds
from .errors import ConfigurationError, TrainingError
from .landmarks import LandmarkName, LandmarkSet
from .model import DropoutConfig, RrnConfig, RrnModel, branch_loss
from .nn import EVAL, TRAIN, Adam

log = logging.getLogger(__name__)

L = LandmarkName

PRESETS: dict[str, tuple[tuple[LandmarkName, ...], tuple[LandmarkName, ...]]] = {
    "5-landmarks": (
        (L.Me, L.CdL, L.CdR, L.CorL, L.CorR),
        (L.Gn, L.Pg, L.B, L.Id, L.Ans, L.A, L.Pr, L.Pns, L.Na),
    ),
    "3-regular": (
        (L.Me, L.CdL, L.CdR),
        (L.Gn, L.Pg, L.B, L.Id, L.CorL, L.CorR, L.Ans, L.A, L.Pr, L.Pns, L.Na),
    ),
    "3-cross": (
        (L.Me, L.CdR, L.CorL),
        (L.Gn, L.Pg, L.B, L.Id, L.CdL, L.CorR, L.Ans, L.A, L.Pr, L.Pns, L.Na),
    ),
    "6-landmarks": (
        (L.Me, L.CdL, L.CdR, L.CorL, L.CorR, L.Na),
        (L.Gn, L.Pg, L.B, L.Id, L.Ans, L.A, L.Pr, L.Pns),
    ),
    "9-landmarks": (
        (L.Me, L.CdL, L.CdR, L.CorL, L.CorR, L.Gn, L.Pg, L.B, L.Id),
        (L.Ans, L.A, L.Pr, L.Pns, L.Na),
    ),
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    rrn: RrnConfig
    batch_size: int = 64
    epochs: int = 20
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    folds: int = 4
    val_fraction: float = 0.1
    augment_count: int = 5000
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch size must be at least 2 (BatchNorm needs batch statistics)")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rrn"] = self.rrn.to_dict()
        return d


def default_epochs(ru_variant: str, dropout_kind: str) -> int:
    """100 epochs for MLP units without fast dropout, 20 otherwise."""
    return 100 if ru_variant == "mlp" and dropout_kind in ("none", "regular") else 20


def preset(name: str, ru_variant="dense", dropout="none", epochs=None, relation_dim=64,
           hidden_dim=256, normalize=True, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    inputs, targets = PRESETS[name]
    drop = dropout if isinstance(dropout, DropoutConfig) else DropoutConfig(dropout)
    rrn = RrnConfig(inputs, targets, ru_variant, relation_dim, hidden_dim, drop, normalize=normalize)
    if epochs is None:
        epochs = default_epochs(ru_variant, drop.kind)
    return ExperimentConfig(name=name, rrn=rrn, epochs=epochs, **overrides)


# ------------------------------------------------------------------- training


@dataclass
class FitResult:
    model: RrnModel
    optimizer: Adam
    history: list[dict]
    steps: int
    rng: np.random.Generator


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i:i + size] for i in range(0, len(order), size)]
    # BatchNorm cannot normalise a single sample
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def eval_loss(model: RrnModel, coords: np.ndarray) -> float:
    if len(coords) == 0:
        return float("nan")
    out = model.forward_features(model.features(coords), EVAL)
    value, _ = branch_loss(out, model.normalized_targets(coords))
    return value


def fit(config: ExperimentConfig, train: Dataset, val: Dataset | None = None, seed: int | None = None,
        fold: int | None = None, on_epoch=None) -> FitResult:
    """Train one model. Normalisers are fit on ``train`` only."""
    seed = config.seed if seed is None else seed
    coords = train.coords()
    if len(coords) < 2:
        raise ConfigurationError(f"need at least 2 training subjects, got {len(coords)}")
    model = RrnModel(config.rrn, seed)
    model.fit_normalizers(coords)
    feats = model.features(coords)
    targets = model.normalized_targets(coords)
    val_coords = val.coords() if val is not None else np.zeros((0, 14, 3))
    opt = Adam(model.named_params(), config.lr, config.betas, config.eps)
    rng = np.random.default_rng([seed, 1])
    variational = config.rrn.dropout.kind == "variational"
    n_train = len(coords)
    history, steps = [], 0
    best, stale = math.inf, 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        total, seen = 0.0, 0
        for b, idx in enumerate(_batches(rng.permutation(n_train), config.batch_size)):
            opt.zero_grad()
            out = model.forward_features(feats[:, idx], TRAIN, rng)
            value, grad = branch_loss(out, targets[idx])
            kl = model.regularizer() / n_train if variational else 0.0
            if not math.isfinite(value + kl):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} (fold {fold})")
            model.backward(grad)
            if variational:
                model.regularizer_backward(1.0 / n_train)
            opt.step()
            steps += 1
            total += value * len(idx)
            seen += len(idx)
        record = {
            "epoch": epoch,
            "fold": fold,
            "train_loss": total / seen,
            "val_loss": eval_loss(model, val_coords) if len(val_coords) else None,
            "seconds": time.perf_counter() - t0,
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if config.early_stop_patience is not None and record["val_loss"] is not None:
            if record["val_loss"] < best:
                best, stale = record["val_loss"], 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    break
    return FitResult(model, opt, history, steps, rng)


def split_validation(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``fraction`` of the non-augmented subjects for validation."""
    originals = [s.subject_id for s in dataset.originals()]
    n_val = int(round(fraction * len(originals)))
    if n_val == 0:
        return dataset, dataset.subset([])
    order = np.random.default_rng([seed, 2]).permutation(len(originals))
    val_ids = {originals[i] for i in order[:n_val]}
    return dataset.subset(i for i in dataset.ids if i not in val_ids), dataset.subset(val_ids)


def prepare_training(config: ExperimentConfig, train_real: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Validation split first, then augmentation from the remaining subjects only."""
    train, val = split_validation(train_real, config.val_fraction, seed)
    if config.augment_count > 0 and len(train.originals()) >= 2:
        train = generate_augmented(train, config.augment_count, np.random.default_rng([seed, 3]))
    return train, val


# ----------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class LandmarkMetrics:
    fold: str
    landmark: str
    mean_mm: float
    std_mm: float
    rmse_mm: float
    n_subjects: int


@dataclass
class MetricsReport:
    rows: list[LandmarkMetrics]
    # (fold, subject id, landmark, error in mm)
    per_subject: list[tuple[str, str, str, float]]
    skipped: int = 0
    wall_clock: float = 0.0
    epochs_to_threshold: dict[str, int | None] = field(default_factory=dict)

    def row(self, landmark, fold="all") -> LandmarkMetrics:
        for r in self.rows:
            if r.landmark == str(landmark) and r.fold == str(fold):
                return r
        raise KeyError((landmark, fold))

    def landmarks(self, fold="all") -> list[str]:
        return [r.landmark for r in self.rows if r.fold == str(fold)]


def subject_errors(model: RrnModel, subjects: Iterable[LandmarkSet]) -> tuple[list[tuple[str, str, float]], int]:
    """Euclidean terminal-prediction errors in mm; incomplete subjects are skipped."""
    usable, skipped = [], 0
    for s in subjects:
        missing = s.missing(list(model.inputs) + model.targets)
        if missing:
            log.warning("skipping subject %s: missing %s", s.subject_id, ", ".join(map(str, missing)))
            skipped += 1
            continue
        usable.append(s)
    if not usable:
        return [], skipped
    coords = np.stack([_full_coords(s) for s in usable])
    _, terminal = model.predict_coords(coords)
    truth = coords[:, [t.index for t in model.targets], :]
    spacing = np.array([s.spacing_mm for s in usable])[:, None, :]
    err = np.linalg.norm((terminal - truth) * spacing, axis=-1)
    out = []
    for i, s in enumerate(usable):
        for k, t in enumerate(model.targets):
            out.append((s.subject_id, str(t), float(err[i, k])))
    return out, skipped


def _full_coords(s: LandmarkSet) -> np.ndarray:
    arr = np.zeros((14, 3))
    for name, value in s.coords.items():
        arr[name.index] = value
    return arr


def summarize(per_subject: Sequence[tuple[str, str, str, float]], landmark_order: Sequence[str]) -> list[LandmarkMetrics]:
    """Per-fold and pooled (fold ``all``) statistics; std is the population std."""
    folds = sorted({f for f, *_ in per_subject}, key=lambda f: (len(f), f))
    rows = []
    for fold in folds + ["all"]:
        for lm in landmark_order:
            errs = np.array([e for f, _, l, e in per_subject if l == lm and (fold == "all" or f == fold)])
            if len(errs) == 0:
                continue
            rows.append(LandmarkMetrics(fold, lm, float(errs.mean()), float(errs.std()),
                                        float(np.sqrt(np.mean(errs**2))), len(errs)))
    return rows


def evaluate(model: RrnModel, subjects: Iterable[LandmarkSet], fold="0") -> MetricsReport:
    t0 = time.perf_counter()
    errors, skipped = subject_errors(model, subjects)
    per_subject = [(str(fold), sid, lm, e) for sid, lm, e in errors]
    rows = summarize(per_subject, [str(t) for t in model.targets])
    return MetricsReport(rows, per_subject, skipped, time.perf_counter() - t0)


METRICS_COLUMNS = ["preset", "fold", "landmark", "mean_mm", "std_mm", "rmse_mm", "n_subjects"]
ERRORS_COLUMNS = ["preset", "fold", "subject", "landmark", "error_mm"]


def metrics_csv(report: MetricsReport, preset_name: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in report.rows:
        w.writerow([preset_name, r.fold, r.landmark, repr(r.mean_mm), repr(r.std_mm), repr(r.rmse_mm), r.n_subjects])
    return buf.getvalue()


def errors_csv(report: MetricsReport, preset_name: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ERRORS_COLUMNS)
    for fold, sid, lm, e in report.per_subject:
        w.writerow([preset_name, fold, sid, lm, repr(e)])
    return buf.getvalue()


# ------------------------------------------------------------ cross-validation


@dataclass
class FoldOutcome:
    fold: int
    fit: FitResult
    report: MetricsReport


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def train_fold(config: ExperimentConfig, dataset: Dataset, plan, fold: int) -> FoldOutcome:
    train_real, test = plan.split(dataset, fold)
    seed = fold_seed(config.seed, fold)
    train, val = prepare_training(config, train_real, seed)
    result = fit(config, train, val, seed=seed, fold=fold)
    report = evaluate(result.model, test, fold=str(fold))
    return FoldOutcome(fold, result, report)


def _train_fold_job(args):
    return train_fold(*args)


def train(config: ExperimentConfig, dataset: Dataset, workers: int | None = None) -> list[FoldOutcome]:
    """k-fold cross-validation; folds partition the non-augmented subjects."""
    plan = make_folds(dataset, config.folds, config.seed)
    for fold in range(config.folds):
        n_train = sum(1 for s in dataset.originals() if plan.fold_of(s.subject_id) != fold)
        if n_train < 2:
            raise ConfigurationError(f"fold {fold} leaves {n_train} training subjects")
    workers = workers or _thread_cap()
    jobs = [(config, dataset, plan, k) for k in range(config.folds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, config.folds)) as pool:
            outcomes = list(pool.map(_train_fold_job, jobs))
    else:
        outcomes = [_train_fold_job(job) for job in jobs]
    return sorted(outcomes, key=lambda o: o.fold)


def train_full(config: ExperimentConfig, dataset: Dataset) -> FitResult:
    """One model on every subject (minus the validation split); no test fold."""
    train_set, val = prepare_training(config, dataset, config.seed)
    return fit(config, train_set, val, seed=config.seed, fold=None)


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("RRN_THREADS", "1")))
    except ValueError:
        return 1


def pooled_report(outcomes: Sequence[FoldOutcome], target_names: Sequence[str]) -> MetricsReport:
    per_subject = [row for o in outcomes for row in o.report.per_subject]
    return MetricsReport(
        summarize(per_subject, list(target_names)),
        per_subject,
        sum(o.report.skipped for o in outcomes),
        sum(sum(h["seconds"] for h in o.fit.history) for o in outcomes),
    )


def run_preset(name: str, dataset_path, out_dir, workers: int | None = None, **overrides) -> MetricsReport:
    """Cross-validate one preset and write metrics.csv, errors.csv, log.jsonl and checkpoints."""
    config = preset(name, **overrides)
    dataset = load_dataset(dataset_path)
    return run_experiment(config, dataset, out_dir, workers)


def run_experiment(config: ExperimentConfig, dataset: Dataset, out_dir, workers: int | None = None) -> MetricsReport:
    out = Path(out_dir)
    outcomes = train(config, dataset, workers)
    report = pooled_report(outcomes, [str(t) for t in config.rrn.target_names])
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    for o in outcomes:
        save_checkpoint(out / "checkpoints" / f"fold{o.fold}.npz", o.fit.model, o.fit.optimizer, o.fit.rng,
                        extra={"fold": o.fold, "experiment": config.to_dict()})
    (out / "metrics.csv").write_text(metrics_csv(report, config.name))
    (out / "errors.csv").write_text(errors_csv(report, config.name))
    with open(out / "log.jsonl", "w") as fh:
        for o in outcomes:
            for record in o.fit.history:
                fh.write(json.dumps(record) + "\n")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1) + "\n")
    return report


# ---------------------------------------------------------- dropout comparison

REGIMES = ("regular", "variational", "targeted")


@dataclass(frozen=True)
class ConvergenceRow:
    regime: str
    epochs_to_threshold: int | None
    threshold: float
    best_val_loss: float
    final_train_loss: float
    final_val_loss: float
    val_mean_error_mm: float
    seconds: float


def epochs_to_threshold(val_losses: Sequence[float], threshold: float) -> int | None:
    for epoch, v in enumerate(val_losses, start=1):
        if v < threshold:
            return epoch
    return None


def compare_dropout(base: ExperimentConfig, dataset: Dataset, threshold_factor: float = 1.1,
                    regimes: Sequence[str] = REGIMES) -> list[ConvergenceRow]:
    """Train one model per dropout regime on identical data and seed.

    The threshold is ``threshold_factor`` times the best validation loss of
    the regime whose best is worst, so every regime crosses it.
    """
    train_set, val = prepare_training(base, dataset, base.seed)
    if len(val) == 0:
        raise ConfigurationError("dropout comparison needs a validation split (val_fraction > 0)")
    runs = {}
    for regime in regimes:
        drop = replace(base.rrn.dropout, kind=regime)
        config = replace(base, rrn=replace(base.rrn, dropout=drop))
        t0 = time.perf_counter()
        result = fit(config, train_set, val, seed=base.seed)
        runs[regime] = (result, time.perf_counter() - t0)
    threshold = threshold_factor * max(min(h["val_loss"] for h in r.history) for r, _ in runs.values())
    rows = []
    for regime, (result, seconds) in runs.items():
        vals = [h["val_loss"] for h in result.history]
        errors, _ = subject_errors(result.model, val)
        rows.append(ConvergenceRow(
            regime, epochs_to_threshold(vals, threshold), threshold, min(vals),
            result.history[-1]["train_loss"], vals[-1],
            float(np.mean([e for *_, e in errors])), seconds,
        ))
    return rows


def convergence_csv(rows: Sequence[ConvergenceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(ConvergenceRow.__dataclass_fields__)
    w.writerow(names)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in
                    (getattr(r, n) for n in names)])
    return buf.getvalue()
