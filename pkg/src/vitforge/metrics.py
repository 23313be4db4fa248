"""Confusion matrices and the derived classification metrics.

Multiclass accuracy is trace/total. Per-class precision, recall, and F1
come from the one-vs-rest decomposition of the confusion matrix:
precision = TP/(TP+FP), recall = TP/(TP+FN), F1 = 2PR/(P+R). A metric whose
denominator is zero is reported as 0 and flagged rather than raising.

All functions are pure over immutable inputs and safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfusionMatrix",
    "ClassMetrics",
    "Report",
    "ComparisonTable",
    "MetricsError",
    "confusion",
    "accuracy",
    "precision_recall_f1",
    "f1_score",
    "report",
    "compare",
]


class MetricsError(ValueError):
    pass


class ConfusionMatrix:
    """K x K counts: entry [i][j] = samples of true class i predicted as j."""

    def __init__(self, counts, class_names):
        counts = np.asarray(counts, dtype=np.int64)
        class_names = list(class_names)
        k = len(class_names)
        if counts.shape != (k, k):
            raise MetricsError(
                f"counts shaped {counts.shape} do not match {k} class names"
            )
        if np.any(counts < 0):
            raise MetricsError("confusion counts must be nonnegative")
        self.counts = counts
        self.class_names = class_names

    @property
    def k(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ConfusionMatrix)
            and self.class_names == other.class_names
            and np.array_equal(self.counts, other.counts)
        )

    def __repr__(self) -> str:
        return f"ConfusionMatrix(k={self.k}, total={self.total})"

    def add(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.class_names != other.class_names:
            raise MetricsError("cannot merge matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    def to_csv_text(self) -> str:
        lines = ["true\\pred," + ",".join(self.class_names)]
        for name, row in zip(self.class_names, self.counts):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv_text(cls, text: str) -> "ConfusionMatrix":
        lines = [ln for ln in text.strip().splitlines() if ln]
        names = lines[0].split(",")[1:]
        rows = []
        for line in lines[1:]:
            cells = line.split(",")
            rows.append([int(v) for v in cells[1:]])
        return cls(np.array(rows, dtype=np.int64), names)


def confusion(true_labels, predicted_labels, class_names) -> ConfusionMatrix:
    """Count (true, predicted) pairs. ``class_names`` may be an int K."""
    if isinstance(class_names, int):
        class_names = [f"class{i}" for i in range(class_names)]
    k = len(class_names)
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise MetricsError(
            f"label arrays must be equal-length vectors, got {t.shape} and {p.shape}"
        )
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise MetricsError(f"{name} labels outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts, class_names)


def accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of correct predictions: trace over total."""
    if cm.total == 0:
        raise MetricsError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts)) / cm.total


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class ClassMetrics:
    """One-vs-rest counts and rates for a single class."""

    class_id: int
    class_name: str
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    undefined: tuple[str, ...] = ()  # metrics whose denominator was zero


def precision_recall_f1(cm: ConfusionMatrix, class_id: int) -> ClassMetrics:
    if not 0 <= class_id < cm.k:
        raise MetricsError(f"class id {class_id} outside [0, {cm.k})")
    counts = cm.counts
    tp = int(counts[class_id, class_id])
    fp = int(counts[:, class_id].sum()) - tp
    fn = int(counts[class_id, :].sum()) - tp
    tn = cm.total - tp - fp - fn
    undefined = []
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, undefined = 0.0, undefined + ["precision"]
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, undefined = 0.0, undefined + ["recall"]
    if precision + recall == 0:
        undefined = undefined + ["f1"]
    return ClassMetrics(
        class_id, cm.class_names[class_id], tp, fp, fn, tn,
        precision, recall, f1_score(precision, recall), tuple(undefined),
    )


@dataclass
class Report:
    """Accuracy plus per-class and macro-averaged rates for one model."""

    model_label: str
    accuracy: float
    per_class: list[ClassMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float

    @property
    def class_names(self) -> list[str]:
        return [m.class_name for m in self.per_class]

    def to_text(self) -> str:
        """Serialize losslessly (floats via repr, which round-trips)."""
        lines = [
            f"model: {self.model_label}",
            f"accuracy: {self.accuracy!r}",
            "class\ttp\tfp\tfn\ttn\tprecision\trecall\tf1\tundefined",
        ]
        for m in self.per_class:
            flags = ",".join(m.undefined) if m.undefined else "-"
            lines.append(
                f"{m.class_name}\t{m.tp}\t{m.fp}\t{m.fn}\t{m.tn}"
                f"\t{m.precision!r}\t{m.recall!r}\t{m.f1!r}\t{flags}"
            )
        lines.append(f"macro_precision: {self.macro_precision!r}")
        lines.append(f"macro_recall: {self.macro_recall!r}")
        lines.append(f"macro_f1: {self.macro_f1!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Report":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header: dict[str, str] = {}
        rows = []
        for line in lines:
            if "\t" in line:
                cells = line.split("\t")
                if cells[0] == "class":
                    continue
                flags = () if cells[8] == "-" else tuple(cells[8].split(","))
                rows.append(
                    ClassMetrics(
                        len(rows), cells[0], int(cells[1]), int(cells[2]),
                        int(cells[3]), int(cells[4]), float(cells[5]),
                        float(cells[6]), float(cells[7]), flags,
                    )
                )
            else:
                key, _, value = line.partition(":")
                header[key.strip()] = value.strip()
        try:
            return cls(
                header["model"],
                float(header["accuracy"]),
                rows,
                float(header["macro_precision"]),
                float(header["macro_recall"]),
                float(header["macro_f1"]),
            )
        except KeyError as exc:
            raise MetricsError(f"report text missing field {exc}") from None


def report(cm: ConfusionMatrix, model_label: str) -> Report:
    per_class = [precision_recall_f1(cm, i) for i in range(cm.k)]
    return Report(
        model_label,
        accuracy(cm),
        per_class,
        float(np.mean([m.precision for m in per_class])),
        float(np.mean([m.recall for m in per_class])),
        float(np.mean([m.f1 for m in per_class])),
    )


@dataclass
class ComparisonTable:
    """Side-by-side metric table: one row group per metric, one column per
    model, one row per class inside each group."""

    model_labels: list[str]
    class_names: list[str]
    rows: list[tuple[str, str, list[float]]] = field(default_factory=list)

    def to_text(self) -> str:
        headers = ["metric", "class"] + list(self.model_labels)
        table = [headers] + [
            [metric, cls] + [f"{v:.4f}" for v in values]
            for metric, cls, values in self.rows
        ]
        widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
        lines = [
            "  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
            for r in table
        ]
        return "\n".join(lines) + "\n"


def compare(reports: list[Report]) -> ComparisonTable:
    """Merge reports over identical class sets into one comparison table."""
    if not reports:
        raise MetricsError("compare needs at least one report")
    names = reports[0].class_names
    for r in reports[1:]:
        if r.class_names != names:
            raise MetricsError(
                f"class names differ: {names} vs {r.class_names} ({r.model_label})"
            )
    table = ComparisonTable([r.model_label for r in reports], names)
    table.rows.append(("accuracy", "-", [r.accuracy for r in reports]))
    for metric in ("precision", "recall", "f1"):
        for i, cls in enumerate(names):
            table.rows.append(
                (metric, cls, [getattr(r.per_class[i], metric) for r in reports])
            )
    return table
