"""Per-class sample library, confusion matrix and precision/recall/accuracy."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .labels import DISPLAY_NAMES, EVAL_ORDER, Label

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES_PER_CLASS = 500


class ClassTooSmallError(ValueError):
    def __init__(self, label: Label, available: int, requested: int):
        super().__init__(f"class {label.name} has {available} usable pixels, {requested} requested")
        self.label = label
        self.available = available
        self.requested = requested


@dataclass(frozen=True, eq=False)
class SampleLibrary:
    """Selected pixels, grouped by class in evaluation order."""

    rows: np.ndarray
    cols: np.ndarray
    true_labels: np.ndarray
    elevations: np.ndarray
    n_per_class: int

    def __len__(self) -> int:
        return self.rows.size

    def predicted(self, labels: np.ndarray) -> np.ndarray:
        return np.asarray(labels)[self.rows, self.cols]


def available_per_class(truth: np.ndarray, valid: np.ndarray | None = None) -> dict[Label, int]:
    truth = np.asarray(truth)
    usable = np.ones(truth.shape, bool) if valid is None else np.asarray(valid, bool)
    return {c: int(((truth == c) & usable).sum()) for c in EVAL_ORDER}


def sample_library(truth, fused=None, n_per_class: int = DEFAULT_SAMPLES_PER_CLASS, seed: int = 0,
                   valid: np.ndarray | None = None) -> SampleLibrary:
    """Draw ``n_per_class`` pixels per class uniformly without replacement.

    ``truth`` holds ground-truth codes. Only pixels valid in ``fused`` (or in
    the explicit ``valid`` mask) are eligible; fused elevations ride along
    with the samples.
    """
    labels = truth.labels if hasattr(truth, "labels") else np.asarray(truth)
    if valid is None:
        valid = np.ones(labels.shape, bool) if fused is None else fused.valid
    valid = np.asarray(valid, bool)
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    rows, cols, true = [], [], []
    for c in EVAL_ORDER:
        pool = np.flatnonzero(((labels == c) & valid).ravel())
        if pool.size < n_per_class:
            raise ClassTooSmallError(c, int(pool.size), n_per_class)
        pick = np.sort(rng.choice(pool, size=n_per_class, replace=False))
        r, q = np.divmod(pick, labels.shape[1])
        rows.append(r)
        cols.append(q)
        true.append(np.full(n_per_class, int(c), dtype=np.int64))
    rows_a, cols_a = np.concatenate(rows), np.concatenate(cols)
    elev = np.full(rows_a.size, np.nan) if fused is None else np.asarray(fused.elevation)[rows_a, cols_a]
    return SampleLibrary(rows_a, cols_a, np.concatenate(true), elev, n_per_class)


# ---------------------------------------------------------------------------
# Confusion matrix and metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns predicted, both in :data:`EVAL_ORDER`."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.counts)
        if c.shape != (len(EVAL_ORDER), len(EVAL_ORDER)):
            raise ValueError(f"confusion matrix must be {len(EVAL_ORDER)}x{len(EVAL_ORDER)}")
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(c == np.round(c)):
                raise ValueError("confusion counts must be integers")
            c = c.astype(np.int64)
        if (c < 0).any():
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(true_labels, predicted_labels) -> ConfusionMatrix:
    t = np.asarray(true_labels).ravel()
    p = np.asarray(predicted_labels).ravel()
    if t.size != p.size:
        raise ValueError(f"label sequences differ in length ({t.size} vs {p.size})")
    index = np.full(256, -1, dtype=np.int64)
    for i, c in enumerate(EVAL_ORDER):
        index[int(c)] = i
    for arr, what in ((t, "true"), (p, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() > 255 or (index[arr.astype(np.int64)] < 0).any()):
            raise ValueError(f"{what} labels contain a code outside the five classes")
    n = len(EVAL_ORDER)
    flat = index[t.astype(np.int64)] * n + index[p.astype(np.int64)]
    return ConfusionMatrix(np.bincount(flat, minlength=n * n).reshape(n, n))


def round_half_up(value: float | None, digits: int = 1) -> float | None:
    if value is None:
        return None
    q = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ClassMetrics:
    """Percentages; ``None`` marks an undefined precision or recall."""

    precision: dict[str, float | None]
    recall: dict[str, float | None]
    accuracy: dict[str, float]
    overall_accuracy: float

    def rounded(self, digits: int = 1) -> "ClassMetrics":
        r = lambda d: {k: round_half_up(v, digits) for k, v in d.items()}
        return ClassMetrics(r(self.precision), r(self.recall), r(self.accuracy), round_half_up(self.overall_accuracy, digits))

    def to_dict(self) -> dict:
        return {
            "class_order": [c.name for c in EVAL_ORDER],
            "precision": self.precision,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "overall_accuracy": self.overall_accuracy,
        }


def metrics(cm: ConfusionMatrix) -> ClassMetrics:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    precision, recall, accuracy = {}, {}, {}
    for i, c in enumerate(EVAL_ORDER):
        tp = counts[i, i]
        col, row = counts[:, i].sum(), counts[i, :].sum()
        tn = total - col - row + tp
        if col > 0:
            precision[c.name] = float(100.0 * tp / col)
        else:
            precision[c.name] = None
            logger.warning("precision undefined for %s: no predictions", c.name)
        if row > 0:
            recall[c.name] = float(100.0 * tp / row)
        else:
            recall[c.name] = None
            logger.warning("recall undefined for %s: no true samples", c.name)
        accuracy[c.name] = float(100.0 * (tp + tn) / total)
    overall = math.fsum(accuracy.values()) / len(accuracy)
    return ClassMetrics(precision, recall, accuracy, overall)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_confusion_csv(path: str | Path, cm: ConfusionMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\predicted"] + [c.name for c in EVAL_ORDER])
        for c, row in zip(EVAL_ORDER, cm.counts):
            w.writerow([c.name] + [int(v) for v in row])


def read_confusion_csv(path: str | Path) -> ConfusionMatrix:
    """Read a 5x5 matrix; a header row and a leading label column are optional."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            cells = [x.strip() for x in rec if x.strip()]
            if not cells:
                continue
            try:
                rows.append([float(x) for x in cells])
            except ValueError:
                try:
                    rows.append([float(x) for x in cells[1:]])
                except ValueError:
                    continue  # header
    return ConfusionMatrix(np.array(rows))


def metrics_report(cm: ConfusionMatrix, m: ClassMetrics | None = None) -> dict:
    m = m or metrics(cm)
    out = m.rounded().to_dict()
    out["display_names"] = {c.name: DISPLAY_NAMES[c] for c in EVAL_ORDER}
    out["confusion"] = cm.counts.tolist()
    out["unrounded"] = m.to_dict()
    return out


def write_metrics_json(path: str | Path, cm: ConfusionMatrix, m: ClassMetrics | None = None) -> dict:
    report = metrics_report(cm, m)
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
    return report
