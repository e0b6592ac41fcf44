"""Leave-one-subject-out evaluation over the combined corpus.

Folds are keyed by (dataset, subject). The overall accuracy pools every
per-sample prediction (trace of the confusion matrix over the total); the
unweighted mean of per-fold accuracies is reported alongside since folds
have unequal sizes. F-measures are macro-averaged over the three classes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .dataset import DatasetId, EmotionClass, SampleRecord
from .offapexnet import (
    DEFAULT_ARCH,
    NetArch,
    TrainConfig,
    TrainingDivergedError,
    predict,
    train,
)
from .tvl1flow import FlowInputPair, read_flo, resize_to_input

log = logging.getLogger(__name__)

FlowKey = tuple[str, str, str]
FlowStore = Mapping[FlowKey, FlowInputPair]
Predictor = Callable[[FlowInputPair], tuple[EmotionClass, np.ndarray]]
TrainFn = Callable[[list[tuple[FlowInputPair, EmotionClass]], TrainConfig], Predictor]

# Order in which datasets appear in folds and per-database tables.
DATASET_ORDER = (DatasetId.SMIC, DatasetId.CASME2, DatasetId.SAMM, DatasetId.SYNTHETIC)


class FoldLeakError(RuntimeError):
    """Raised when a held-out subject appears in a fold's training set."""


class MissingFlowError(KeyError):
    """Raised when a record has no stored flow input."""


def record_key(record: SampleRecord) -> FlowKey:
    return (record.dataset_id.value, record.subject_id, record.video_id)


def flow_store_from_dir(records: list[SampleRecord], flow_dir: str | Path) -> dict[FlowKey, FlowInputPair]:
    """Load `<video_id>.flo` per record and resize to the 28x28 network input."""
    flow_dir = Path(flow_dir)
    store: dict[FlowKey, FlowInputPair] = {}
    for record in records:
        path = flow_dir / f"{record.video_id}.flo"
        if not path.is_file():
            raise MissingFlowError(f"no flow file for {record.video_id}: {path}")
        store[record_key(record)] = resize_to_input(read_flo(path))
    return store


@dataclass(frozen=True)
class Fold:
    held_out_key: tuple[DatasetId, str]
    test_indices: tuple[int, ...]
    train_indices: tuple[int, ...]

    @property
    def is_degenerate(self) -> bool:
        return len(self.train_indices) == 0


def make_folds(records: list[SampleRecord]) -> list[Fold]:
    """One fold per distinct (dataset, subject), ordered by dataset then subject."""
    if not records:
        raise ValueError("cannot build folds from an empty record list")
    keys = sorted(
        {(r.dataset_id, r.subject_id) for r in records},
        key=lambda k: (DATASET_ORDER.index(k[0]), k[1]),
    )
    folds = []
    for key in keys:
        test = tuple(i for i, r in enumerate(records) if (r.dataset_id, r.subject_id) == key)
        training = tuple(i for i, r in enumerate(records) if (r.dataset_id, r.subject_id) != key)
        fold = Fold(held_out_key=key, test_indices=test, train_indices=training)
        if fold.is_degenerate:
            log.warning("fold %s has an empty training set", key)
        folds.append(fold)
    return folds


@dataclass(frozen=True)
class Prediction:
    dataset: str
    subject: str
    video: str
    true_label: EmotionClass
    predicted: EmotionClass
    probabilities: tuple[float, float, float]
    fold_index: int


@dataclass
class MetricSummary:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f_scores: np.ndarray
    macro_f: float


def confusion_from_predictions(predictions: list[Prediction]) -> np.ndarray:
    cm = np.zeros((3, 3), dtype=np.int64)
    for p in predictions:
        cm[int(p.true_label), int(p.predicted)] += 1
    return cm


def metrics(cm: np.ndarray) -> MetricSummary:
    """Accuracy, per-class precision/recall/F, and macro F from count matrix.

    Ratios with a zero denominator evaluate to 0, as does the F-score of a
    class whose precision and recall are both 0.
    """
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        denom = precision + recall
        f_scores = np.where(denom > 0, 2.0 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return MetricSummary(
        accuracy=float(np.trace(cm) / total),
        precision=precision,
        recall=recall,
        f_scores=f_scores,
        macro_f=float(f_scores.mean()),
    )


def normalize_rows(cm: np.ndarray) -> np.ndarray:
    """Row-stochastic rates; all-zero rows stay zero (callers flag them)."""
    cm = np.asarray(cm, dtype=np.float64)
    sums = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, sums, out=np.zeros_like(cm), where=sums > 0)


@dataclass
class EvalReport:
    predictions: list[Prediction]
    overall_cm: np.ndarray
    per_database_cm: dict[str, np.ndarray]
    accuracy: float
    fold_mean_accuracy: float
    summary: MetricSummary
    epochs: int
    seed: int
    n_folds: int
    failed_folds: list[dict] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failed_folds

    def to_json_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "seed": self.seed,
            "n_folds": self.n_folds,
            "accuracy": self.accuracy,
            "fold_mean_accuracy": self.fold_mean_accuracy,
            "macro_f": self.summary.macro_f,
            "precision": self.summary.precision.tolist(),
            "recall": self.summary.recall.tolist(),
            "f_scores": self.summary.f_scores.tolist(),
            "overall_cm": self.overall_cm.tolist(),
            "per_database_cm": {k: v.tolist() for k, v in self.per_database_cm.items()},
            "failed_folds": self.failed_folds,
            "predictions": [
                {
                    "dataset": p.dataset,
                    "subject": p.subject,
                    "video": p.video,
                    "true": int(p.true_label),
                    "predicted": int(p.predicted),
                    "probabilities": list(p.probabilities),
                    "fold": p.fold_index,
                }
                for p in self.predictions
            ],
        }

    def predictions_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["dataset", "subject", "video", "true", "predicted", "p_neg", "p_pos", "p_sur"])
        for p in self.predictions:
            writer.writerow(
                [
                    p.dataset,
                    p.subject,
                    p.video,
                    p.true_label.name.lower(),
                    p.predicted.name.lower(),
                    repr(p.probabilities[0]),
                    repr(p.probabilities[1]),
                    repr(p.probabilities[2]),
                ]
            )
        return buf.getvalue()

    def render_text(self) -> str:
        lines = [
            f"folds: {self.n_folds}   epochs: {self.epochs}   seed: {self.seed}",
            f"pooled accuracy: {self.accuracy * 100:.2f}%   "
            f"fold-mean accuracy: {self.fold_mean_accuracy * 100:.2f}%   "
            f"macro F: {self.summary.macro_f:.4f}",
            "",
        ]
        if self.failed_folds:
            lines.append(f"INCOMPLETE: {len(self.failed_folds)} fold(s) failed to train")
            lines.append("")
        lines.extend(_render_cm("overall", self.overall_cm))
        for name, cm in self.per_database_cm.items():
            lines.extend(_render_cm(name, cm))
        return "\n".join(lines) + "\n"


def _render_cm(title: str, cm: np.ndarray) -> list[str]:
    rates = normalize_rows(cm)
    names = [c.name.capitalize() for c in EmotionClass]
    lines = [f"confusion matrix ({title}, row-normalized):"]
    header = " " * 10 + "".join(f"{n:>10}" for n in names)
    lines.append(header)
    zero_rows = []
    for i, name in enumerate(names):
        row = "".join(f"{rates[i, j]:>10.2f}" for j in range(3))
        lines.append(f"{name:>10}{row}")
        if cm[i].sum() == 0:
            zero_rows.append(name)
    if zero_rows:
        lines.append(f"  note: no samples for {', '.join(zero_rows)}")
    lines.append("")
    return lines


def default_train_fn(arch: NetArch = DEFAULT_ARCH) -> TrainFn:
    """Build the standard trainer: fit the network, return its predictor."""

    def fit(samples: list[tuple[FlowInputPair, EmotionClass]], config: TrainConfig) -> Predictor:
        params, _ = train(samples, config, arch=arch)
        return lambda pair: predict(params, pair)

    return fit


def _check_no_leak(records: list[SampleRecord], fold: Fold) -> None:
    held = fold.held_out_key
    for i in fold.train_indices:
        if (records[i].dataset_id, records[i].subject_id) == held:
            raise FoldLeakError(f"subject {held} leaked into its own training set")
    for i in fold.test_indices:
        if (records[i].dataset_id, records[i].subject_id) != held:
            raise FoldLeakError(f"foreign sample {records[i].video_id} in test set of {held}")


def _gather_samples(
    records: list[SampleRecord], indices: tuple[int, ...], flow_store: FlowStore
) -> list[tuple[FlowInputPair, EmotionClass]]:
    samples = []
    for i in indices:
        key = record_key(records[i])
        if key not in flow_store:
            raise MissingFlowError(f"no flow input stored for {records[i].video_id}")
        samples.append((flow_store[key], records[i].label))
    return samples


def _run_one_fold(
    fold_index: int,
    fold: Fold,
    records: list[SampleRecord],
    flow_store: FlowStore,
    config: TrainConfig,
    train_fn: TrainFn,
) -> tuple[list[Prediction], dict | None]:
    fold_config = replace(config, seed=config.seed + fold_index)
    train_samples = _gather_samples(records, fold.train_indices, flow_store)
    try:
        predictor = train_fn(train_samples, fold_config)
    except TrainingDivergedError as exc:
        log.warning("fold %d (%s) diverged: %s", fold_index, fold.held_out_key, exc)
        failure = {
            "fold": fold_index,
            "held_out": [fold.held_out_key[0].value, fold.held_out_key[1]],
            "reason": str(exc),
        }
        return [], failure
    predictions = []
    for i in fold.test_indices:
        key = record_key(records[i])
        if key not in flow_store:
            raise MissingFlowError(f"no flow input stored for {records[i].video_id}")
        predicted, probs = predictor(flow_store[key])
        predictions.append(
            Prediction(
                dataset=records[i].dataset_id.value,
                subject=records[i].subject_id,
                video=records[i].video_id,
                true_label=records[i].label,
                predicted=predicted,
                probabilities=(float(probs[0]), float(probs[1]), float(probs[2])),
                fold_index=fold_index,
            )
        )
    return predictions, None


_POOL_CONTEXT: dict = {}


def _pool_init(records, flow_store, config, arch) -> None:
    _POOL_CONTEXT["args"] = (records, flow_store, config, default_train_fn(arch))


def _pool_run(job: tuple[int, Fold]) -> tuple[list[Prediction], dict | None]:
    records, flow_store, config, train_fn = _POOL_CONTEXT["args"]
    return _run_one_fold(job[0], job[1], records, flow_store, config, train_fn)


def run_losocv(
    records: list[SampleRecord],
    flow_store: FlowStore,
    train_config: TrainConfig,
    train_fn: TrainFn | None = None,
    arch: NetArch = DEFAULT_ARCH,
    jobs: int = 1,
) -> EvalReport:
    """Train and test once per held-out subject; pool all predictions.

    Fold k trains with seed train_config.seed + k, so every fold is
    independently reproducible and a parallel run (`jobs` > 1, default
    trainer only) produces the identical report.
    """
    folds = make_folds(records)
    for fold in folds:
        _check_no_leak(records, fold)

    fold_jobs = list(enumerate(folds))
    if jobs > 1 and train_fn is None:
        with ProcessPoolExecutor(
            max_workers=jobs,
            initializer=_pool_init,
            initargs=(records, dict(flow_store), train_config, arch),
        ) as pool:
            outcomes = list(pool.map(_pool_run, fold_jobs))
    else:
        fn = train_fn if train_fn is not None else default_train_fn(arch)
        outcomes = [
            _run_one_fold(i, fold, records, flow_store, train_config, fn)
            for i, fold in fold_jobs
        ]

    predictions: list[Prediction] = []
    failed: list[dict] = []
    fold_accuracies: list[float] = []
    for fold_preds, failure in outcomes:
        if failure is not None:
            failed.append(failure)
            continue
        predictions.extend(fold_preds)
        if fold_preds:
            correct = sum(1 for p in fold_preds if p.predicted == p.true_label)
            fold_accuracies.append(correct / len(fold_preds))

    return report_from_predictions(
        predictions,
        epochs=train_config.epochs,
        seed=train_config.seed,
        n_folds=len(folds),
        fold_accuracies=fold_accuracies,
        failed_folds=failed,
    )


def report_from_predictions(
    predictions: list[Prediction],
    epochs: int,
    seed: int,
    n_folds: int,
    fold_accuracies: list[float] | None = None,
    failed_folds: list[dict] | None = None,
) -> EvalReport:
    """Assemble (or regenerate, bit-identically) a report from predictions."""
    if not predictions:
        raise ValueError("no predictions to report")
    if fold_accuracies is None:
        by_fold: dict[int, list[Prediction]] = {}
        for p in predictions:
            by_fold.setdefault(p.fold_index, []).append(p)
        fold_accuracies = [
            sum(1 for p in preds if p.predicted == p.true_label) / len(preds)
            for _, preds in sorted(by_fold.items())
        ]
    overall = confusion_from_predictions(predictions)
    per_db = {}
    for dataset in DATASET_ORDER:
        subset = [p for p in predictions if p.dataset == dataset.value]
        if subset:
            per_db[dataset.value] = confusion_from_predictions(subset)
    summary = metrics(overall)
    return EvalReport(
        predictions=predictions,
        overall_cm=overall,
        per_database_cm=per_db,
        accuracy=summary.accuracy,
        fold_mean_accuracy=float(np.mean(fold_accuracies)) if fold_accuracies else 0.0,
        summary=summary,
        epochs=epochs,
        seed=seed,
        n_folds=n_folds,
        failed_folds=failed_folds or [],
    )


@dataclass
class SweepResult:
    rows: list[tuple[int, float, float]]  # (epochs, accuracy, macro F)
    best_index: int
    reports: list[EvalReport]

    def render_text(self) -> str:
        lines = [f"{'epoch':>8}{'accuracy (%)':>15}{'F-measure':>12}"]
        for i, (epochs, acc, macro_f) in enumerate(self.rows):
            marker = "  <- best" if i == self.best_index else ""
            lines.append(f"{epochs:>8}{acc * 100:>15.2f}{macro_f:>12.4f}{marker}")
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "rows": [
                {"epochs": e, "accuracy": a, "macro_f": f} for e, a, f in self.rows
            ],
            "best_index": self.best_index,
        }


def epoch_sweep(
    records: list[SampleRecord],
    flow_store: FlowStore,
    base_config: TrainConfig,
    epochs_list: list[int],
    train_fn: TrainFn | None = None,
    arch: NetArch = DEFAULT_ARCH,
    jobs: int = 1,
) -> SweepResult:
    """One full LOSO run per epoch setting; the best row is the accuracy argmax."""
    if not epochs_list:
        raise ValueError("epochs_list must be non-empty")
    rows = []
    reports = []
    for epochs in epochs_list:
        report = run_losocv(
            records,
            flow_store,
            replace(base_config, epochs=epochs),
            train_fn=train_fn,
            arch=arch,
            jobs=jobs,
        )
        rows.append((epochs, report.accuracy, report.summary.macro_f))
        reports.append(report)
    best = int(np.argmax([r[1] for r in rows]))
    return SweepResult(rows=rows, best_index=best, reports=reports)


def write_report(report: EvalReport, out_dir: str | Path, stem: str = "report") -> list[Path]:
    """Persist the JSON, text, and CSV renderings; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    text_path = out_dir / f"{stem}.txt"
    csv_path = out_dir / f"{stem}_predictions.csv"
    json_path.write_text(json.dumps(report.to_json_dict(), indent=2), encoding="utf-8")
    text_path.write_text(report.render_text(), encoding="utf-8")
    csv_path.write_text(report.predictions_csv(), encoding="utf-8")
    return [json_path, text_path, csv_path]
