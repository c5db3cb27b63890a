"""End-to-end orchestration: detect, featurize, split, grid-search, train, report.

A run writes a versioned artifacts directory:

    counts.csv        the intermediate count dataset (image_id, 7 counts, grade)
    model.svm         the trained multiclass model with embedded preprocessing
    report_train.json / report_train.txt
    report_test.json  / report_test.txt
    cv_table.csv      per-grid-point cross-validation accuracies
    run_config.json   snapshot of the configuration that produced it all

Everything downstream of the dataset is a deterministic function of the run
configuration and seeds, so identical configs reproduce identical artifact
bytes (timestamps can be disabled for byte-level comparisons).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset_io import Dataset, SplitSpec, load_dataset, stratified_split
from .detector import DetectorConfig, detector_config_from_doc, detector_config_to_doc
from .domain import ALL_GRADES, DrGrade, GradedRecord, LesionClass
from .errors import DomainError, DrScreenError, LoadError, RunError
from .features import (
    PreprocessConfig,
    apply_preprocess,
    extract_counts,
    fit_preprocess,
)
from .svm import (
    KernelKind,
    SvmModel,
    TrainConfig,
    predict_batch,
    resolve_gamma,
    save_model,
)
from . import svm as _svm

log = logging.getLogger(__name__)

# Headline scores of the original full-scale study (Kaggle fundus corpus,
# manual annotations, GPU-trained detector). Desk-scale runs cannot reproduce
# them; they are reported as reference annotations and never asserted.
REFERENCE_SCORES = {
    "classifier_train_accuracy": 0.91,
    "classifier_test_accuracy": 0.84,
    "classifier_f1": 0.81,
    "classifier_precision": 0.82,
    "detector_accuracy": 0.78,
    "detector_f1": 0.74,
    "detector_precision": 0.72,
}

COUNT_TABLE_HEADER = "image_id,ma,hem,he,se,irma,vb,prolif,grade"

REFERABLE_THRESHOLD = DrGrade.MODERATE  # grade >= MODERATE means refer


@dataclass(frozen=True)
class GridSpec:
    """Hyperparameter grid; gamma None means the scale heuristic."""

    C: tuple[float, ...] = (0.1, 1.0, 10.0, 100.0)
    gamma: tuple[float | None, ...] = (None, 0.01, 0.1, 1.0)
    kernel: tuple[KernelKind, ...] = (KernelKind.RBF,)

    def __post_init__(self):
        if not self.C or not self.gamma or not self.kernel:
            raise DomainError("grid lists must be non-empty")


@dataclass(frozen=True)
class RunConfig:
    manifest: Path
    out_dir: Path
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    cv_folds: int = 5
    seed: int = 42
    svm_tol: float = 1e-3
    svm_max_passes: int = 200
    weighted_counts: bool = False
    include_timestamps: bool = True

    def __post_init__(self):
        if self.cv_folds < 2:
            raise DomainError(f"cv_folds must be >= 2, got {self.cv_folds}")


# --- count table -------------------------------------------------------------


def write_count_table(
    path, image_ids: Sequence[str], X: np.ndarray, grades: Sequence[DrGrade]
) -> None:
    lines = [COUNT_TABLE_HEADER]
    for image_id, row, grade in zip(image_ids, X, grades):
        cells = [
            str(int(v)) if float(v) == int(v) else repr(float(v)) for v in row
        ]
        lines.append(",".join([image_id, *cells, str(int(grade))]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_count_table(path) -> tuple[list[str], np.ndarray, list[DrGrade]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot read count table {path}: {exc}") from None
    lines = text.splitlines()
    if not lines or lines[0] != COUNT_TABLE_HEADER:
        raise LoadError(f"{path}: expected header {COUNT_TABLE_HEADER!r}")
    ids: list[str] = []
    rows: list[list[float]] = []
    grades: list[DrGrade] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != 9:
            raise LoadError(f"{path}, line {lineno}: expected 9 columns")
        try:
            ids.append(cells[0])
            rows.append([float(v) for v in cells[1:8]])
            grades.append(DrGrade(int(cells[8])))
        except ValueError as exc:
            raise LoadError(f"{path}, line {lineno}: {exc}") from None
    return ids, np.array(rows, dtype=float), grades


# --- classification report ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClassificationReport:
    """5x5 confusion matrix (rows truth, cols predicted) and derived metrics."""

    confusion: np.ndarray
    accuracy: float
    per_class: dict[DrGrade, tuple[float, float, float]]
    macro_f1: float
    referable_accuracy: float  # binarized view: grade >= MODERATE means refer
    n_train: int
    n_test: int

    def to_dict(self) -> dict:
        return {
            "kind": "classification",
            "confusion": self.confusion.astype(int).tolist(),
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "referable_accuracy": self.referable_accuracy,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "per_class": {
                g.name.lower(): {"precision": p, "recall": r, "f1": f}
                for g, (p, r, f) in self.per_class.items()
            },
            "reference_scores": REFERENCE_SCORES,
        }

    def render_text(self) -> str:
        lines = ["classification evaluation", "  confusion (rows=truth, cols=pred):"]
        for g, row in zip(ALL_GRADES, self.confusion.astype(int)):
            lines.append(f"    {g.name.lower():<16} {' '.join(f'{v:5d}' for v in row)}")
        lines.append(
            f"  accuracy {self.accuracy:.4f}   macro-F1 {self.macro_f1:.4f}   "
            f"referable accuracy {self.referable_accuracy:.4f}"
        )
        for g, (p, r, f) in self.per_class.items():
            lines.append(
                f"  {g.name.lower():<16} P {p:.4f}  R {r:.4f}  F1 {f:.4f}"
            )
        lines.append(f"  n_train {self.n_train}   n_test {self.n_test}")
        lines.append(
            "  reference (full-scale study, not asserted): "
            + "  ".join(f"{k}={v:.2f}" for k, v in REFERENCE_SCORES.items())
        )
        return "\n".join(lines) + "\n"


def _prf(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def report_from_confusion(
    confusion: np.ndarray, n_train: int = 0, n_test: int | None = None
) -> ClassificationReport:
    confusion = np.asarray(confusion)
    total = int(confusion.sum())
    accuracy = float(np.trace(confusion) / total) if total else 0.0
    per_class: dict[DrGrade, tuple[float, float, float]] = {}
    for g in ALL_GRADES:
        i = int(g)
        tp = confusion[i, i]
        fp = confusion[:, i].sum() - tp
        fn = confusion[i, :].sum() - tp
        per_class[g] = _prf(float(tp), float(fp), float(fn))
    present = [g for g in ALL_GRADES if confusion[int(g), :].sum() > 0]
    macro_f1 = (
        float(np.mean([per_class[g][2] for g in present])) if present else 0.0
    )
    t = int(REFERABLE_THRESHOLD)
    referable_correct = confusion[:t, :t].sum() + confusion[t:, t:].sum()
    referable_accuracy = float(referable_correct / total) if total else 0.0
    return ClassificationReport(
        confusion=confusion,
        accuracy=accuracy,
        per_class=per_class,
        macro_f1=macro_f1,
        referable_accuracy=referable_accuracy,
        n_train=n_train,
        n_test=total if n_test is None else n_test,
    )


def evaluate(
    model: SvmModel,
    counts: np.ndarray,
    grades: Sequence[DrGrade],
    n_train: int = 0,
) -> ClassificationReport:
    """Score a model on raw count vectors (the model applies its preprocessing)."""
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    if len(counts) == 0 or len(grades) == 0:
        raise DomainError("cannot evaluate on an empty set")
    if len(counts) != len(grades):
        raise DomainError("counts and grades differ in length")
    predictions = predict_batch(model, apply_preprocess(counts, model.preprocess))
    confusion = np.zeros((5, 5), dtype=int)
    for truth, pred in zip(grades, predictions):
        confusion[int(truth), int(pred)] += 1
    return report_from_confusion(confusion, n_train=n_train, n_test=len(grades))


# --- grid search --------------------------------------------------------------


def stratified_kfold(
    grades: Sequence[DrGrade], folds: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Round-robin per-class fold assignment after a seeded shuffle."""
    y = np.array([int(g) for g in grades])
    counts = {v: int((y == v).sum()) for v in np.unique(y)}
    smallest = min(counts.values())
    if folds > smallest:
        raise DomainError(
            f"cv_folds={folds} exceeds the smallest class count ({smallest}); "
            f"use cv_folds <= {smallest}"
        )
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=int)
    for v in sorted(counts):
        idx = np.nonzero(y == v)[0]
        idx = idx[rng.permutation(len(idx))]
        fold_of[idx] = np.arange(len(idx)) % folds
    out = []
    for k in range(folds):
        test = np.nonzero(fold_of == k)[0]
        train = np.nonzero(fold_of != k)[0]
        out.append((train, test))
    return out


@dataclass(frozen=True)
class GridPoint:
    kernel: KernelKind
    C: float
    gamma: float | None  # None = scale heuristic

    def train_config(self, tol: float, max_passes: int, seed: int) -> TrainConfig:
        return TrainConfig(
            C=self.C,
            kernel=self.kernel,
            gamma=self.gamma,
            tol=tol,
            max_passes=max_passes,
            seed=seed,
        )


def _grid_points(grid: GridSpec, X: np.ndarray) -> list[tuple[GridPoint, float]]:
    """Enumerate grid points with numerically resolved gamma, in tie-break order
    (smaller C first, then smaller gamma)."""
    points: dict[tuple, tuple[GridPoint, float]] = {}
    for kernel in grid.kernel:
        for C in grid.C:
            gammas = grid.gamma if kernel is KernelKind.RBF else (None,)
            for gamma in gammas:
                resolved = (
                    resolve_gamma(gamma, X) if kernel is KernelKind.RBF else 0.0
                )
                key = (kernel, C, resolved)
                points.setdefault(key, (GridPoint(kernel, C, gamma), resolved))
    return sorted(points.values(), key=lambda pr: (pr[0].C, pr[1], pr[0].kernel.value))


def grid_search(
    X: np.ndarray,
    grades: Sequence[DrGrade],
    grid: GridSpec,
    cv_folds: int,
    seed: int,
    svm_tol: float = 1e-3,
    svm_max_passes: int = 200,
) -> tuple[GridPoint, list[dict]]:
    """Stratified k-fold CV accuracy per grid point.

    The winner is the highest mean accuracy; ties resolve to the smaller C,
    then the smaller resolved gamma (the enumeration order guarantees it).
    """
    X = np.asarray(X, dtype=float)
    folds = stratified_kfold(grades, cv_folds, seed)
    grades_arr = np.array([int(g) for g in grades])

    table: list[dict] = []
    best: GridPoint | None = None
    best_mean = -1.0
    for point, resolved in _grid_points(grid, X):
        cfg = point.train_config(svm_tol, svm_max_passes, seed)
        fold_acc: list[float] = []
        for train_idx, test_idx in folds:
            model = _svm.train_multiclass(
                X[train_idx], [DrGrade(v) for v in grades_arr[train_idx]], cfg
            )
            pred = predict_batch(model, X[test_idx])
            acc = float(
                np.mean([int(p) == t for p, t in zip(pred, grades_arr[test_idx])])
            )
            fold_acc.append(acc)
        mean_acc = float(np.mean(fold_acc))
        table.append(
            {
                "kernel": point.kernel.value,
                "C": point.C,
                "gamma": "scale" if point.gamma is None else point.gamma,
                "gamma_resolved": resolved,
                "fold_accuracy": fold_acc,
                "mean_accuracy": mean_acc,
            }
        )
        if mean_acc > best_mean:
            best, best_mean = point, mean_acc
    assert best is not None
    return best, table


def write_cv_table(path, table: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        n_folds = len(table[0]["fold_accuracy"]) if table else 0
        writer.writerow(
            ["kernel", "C", "gamma", "gamma_resolved"]
            + [f"fold_{i}" for i in range(n_folds)]
            + ["mean_accuracy"]
        )
        for row in table:
            writer.writerow(
                [row["kernel"], row["C"], row["gamma"], row["gamma_resolved"]]
                + row["fold_accuracy"]
                + [row["mean_accuracy"]]
            )


# --- run orchestration ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RunResult:
    model: SvmModel
    report_train: ClassificationReport
    report_test: ClassificationReport
    artifacts_dir: Path
    best_point: GridPoint


@dataclass(frozen=True, eq=False)
class TrainedFromCounts:
    model: SvmModel
    report_train: ClassificationReport
    report_test: ClassificationReport
    best_point: GridPoint
    cv_table: list[dict]
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def train_from_counts(
    image_ids: Sequence[str],
    X: np.ndarray,
    grades: Sequence[DrGrade],
    config: RunConfig,
    feature_classes: Sequence[LesionClass],
) -> TrainedFromCounts:
    """The deterministic core: split, fit preprocessing, search, train, score.

    Preprocessing parameters and the CV winner are functions of the training
    split only; test rows influence nothing but the final test report.
    """
    records = [GradedRecord(i, g) for i, g in zip(image_ids, grades)]
    index = {r.image_id: k for k, r in enumerate(records)}
    train_recs, test_recs = stratified_split(records, config.split)
    train_idx = np.array([index[r.image_id] for r in train_recs])
    test_idx = np.array([index[r.image_id] for r in test_recs])
    X = np.asarray(X, dtype=float)
    y_train = [grades[i] for i in train_idx]
    y_test = [grades[i] for i in test_idx]

    params = fit_preprocess(X[train_idx], np.array([int(g) for g in y_train]),
                            config.preprocess)
    Z_train = apply_preprocess(X[train_idx], params)

    best, cv_table = grid_search(
        Z_train,
        y_train,
        config.grid,
        config.cv_folds,
        config.seed,
        svm_tol=config.svm_tol,
        svm_max_passes=config.svm_max_passes,
    )
    model = _svm.train_multiclass(
        Z_train,
        y_train,
        best.train_config(config.svm_tol, config.svm_max_passes, config.seed),
        preprocess=params,
        feature_classes=feature_classes,
    )
    report_train = evaluate(model, X[train_idx], y_train, n_train=len(train_idx))
    report_test = evaluate(model, X[test_idx], y_test, n_train=len(train_idx))
    model = replace(
        model,
        train_summary={
            "accuracy_train": report_train.accuracy,
            "accuracy_test": report_test.accuracy,
            "macro_f1_test": report_test.macro_f1,
            "n_train": len(train_idx),
            "n_test": len(test_idx),
            "grid_winner": {
                "kernel": best.kernel.value,
                "C": best.C,
                "gamma": "scale" if best.gamma is None else best.gamma,
            },
        },
    )
    return TrainedFromCounts(
        model=model,
        report_train=report_train,
        report_test=report_test,
        best_point=best,
        cv_table=cv_table,
        train_ids=tuple(r.image_id for r in train_recs),
        test_ids=tuple(r.image_id for r in test_recs),
    )


def featurize_dataset(
    dataset: Dataset,
    detections_by_image: dict,
    weighted: bool = False,
) -> tuple[list[str], np.ndarray, list[DrGrade]]:
    """Per-image count vectors over the dataset's class subset, in record order."""
    ids, rows, grades = [], [], []
    for record in dataset.records:
        fv = extract_counts(
            detections_by_image.get(record.image_id, ()),
            class_subset=dataset.class_subset,
            image_id=record.image_id,
            weighted=weighted,
        )
        ids.append(record.image_id)
        rows.append(fv.values)
        grades.append(record.grade)
    return ids, np.stack(rows), grades


def run_training(config: RunConfig) -> RunResult:
    """Execute the whole pipeline; artifacts are kept even if a stage fails."""
    from .detector import detect_dataset  # local import avoids cycle at module load

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_config(config, out_dir / "run_config.json")

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DrScreenError as exc:
            raise RunError(name, str(exc)) from exc

    dataset = stage("load", load_dataset, config.manifest)
    detections = stage("detect", detect_dataset, dataset, config.detector)
    ids, X, grades = stage(
        "featurize", featurize_dataset, dataset, detections, config.weighted_counts
    )
    stage("featurize", write_count_table, out_dir / "counts.csv", ids, X, grades)
    trained = stage(
        "train", train_from_counts, ids, X, grades, config, dataset.class_subset
    )

    model = trained.model
    if config.include_timestamps:
        model = replace(
            model,
            created_at=datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        )
    stage("persist", save_model, model, out_dir / "model.svm")
    stage("persist", write_cv_table, out_dir / "cv_table.csv", trained.cv_table)
    for name, report in (
        ("report_train", trained.report_train),
        ("report_test", trained.report_test),
    ):
        stage(
            "persist",
            lambda n=name, r=report: (
                (out_dir / f"{n}.json").write_text(
                    json.dumps(r.to_dict(), indent=2) + "\n", encoding="utf-8"
                ),
                (out_dir / f"{n}.txt").write_text(r.render_text(), encoding="utf-8"),
            ),
        )
    log.info(
        "run complete: train acc %.4f, test acc %.4f (artifacts in %s)",
        trained.report_train.accuracy,
        trained.report_test.accuracy,
        out_dir,
    )
    return RunResult(
        model=model,
        report_train=trained.report_train,
        report_test=trained.report_test,
        artifacts_dir=out_dir,
        best_point=trained.best_point,
    )


# --- RunConfig (de)serialization ------------------------------------------------


def run_config_to_doc(config: RunConfig) -> dict:
    return {
        "manifest": str(config.manifest),
        "out_dir": str(config.out_dir),
        "detector": detector_config_to_doc(config.detector),
        "preprocess": {
            "select_k": config.preprocess.select_k,
            "scale": config.preprocess.scale,
            "pca_components": config.preprocess.pca_components,
            "pca_variance_target": config.preprocess.pca_variance_target,
        },
        "split": {
            "test_fraction": config.split.test_fraction,
            "seed": config.split.seed,
            "stratified": config.split.stratified,
        },
        "grid": {
            "C": list(config.grid.C),
            "gamma": ["scale" if g is None else g for g in config.grid.gamma],
            "kernel": [k.value for k in config.grid.kernel],
        },
        "cv_folds": config.cv_folds,
        "seed": config.seed,
        "svm_tol": config.svm_tol,
        "svm_max_passes": config.svm_max_passes,
        "weighted_counts": config.weighted_counts,
        "include_timestamps": config.include_timestamps,
    }


def run_config_from_doc(doc: dict, base_dir: Path | None = None) -> RunConfig:
    def path_of(v):
        p = Path(v)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return p

    try:
        pre = doc.get("preprocess", {})
        split = doc.get("split", {})
        grid = doc.get("grid", {})
        return RunConfig(
            manifest=path_of(doc["manifest"]),
            out_dir=path_of(doc["out_dir"]),
            detector=detector_config_from_doc(doc.get("detector", {})),
            preprocess=PreprocessConfig(
                select_k=pre.get("select_k"),
                scale=bool(pre.get("scale", True)),
                pca_components=pre.get("pca_components"),
                pca_variance_target=pre.get("pca_variance_target"),
            ),
            split=SplitSpec(
                test_fraction=float(split.get("test_fraction", 0.2)),
                seed=int(split.get("seed", 42)),
                stratified=bool(split.get("stratified", True)),
            ),
            grid=GridSpec(
                C=tuple(float(c) for c in grid.get("C", (0.1, 1.0, 10.0, 100.0))),
                gamma=tuple(
                    None if g in (None, "scale") else float(g)
                    for g in grid.get("gamma", ("scale", 0.01, 0.1, 1.0))
                ),
                kernel=tuple(
                    KernelKind(k) for k in grid.get("kernel", ("rbf",))
                ),
            ),
            cv_folds=int(doc.get("cv_folds", 5)),
            seed=int(doc.get("seed", 42)),
            svm_tol=float(doc.get("svm_tol", 1e-3)),
            svm_max_passes=int(doc.get("svm_max_passes", 200)),
            weighted_counts=bool(doc.get("weighted_counts", False)),
            include_timestamps=bool(doc.get("include_timestamps", True)),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise LoadError(f"bad run config: {exc}") from None


def _write_run_config(config: RunConfig, path: Path) -> None:
    path.write_text(
        json.dumps(run_config_to_doc(config), indent=2) + "\n", encoding="utf-8"
    )
