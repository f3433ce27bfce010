"""Confusion matrix and the classification report built from it."""

import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pandas as pd

from modules.errors import FormatError, ParameterError, ShapeError
from modules.signals import StateLabel

logger = logging.getLogger(__name__)

N_CLASSES = len(StateLabel)
AVERAGE_ROWS = ("micro avg", "macro avg", "weighted avg", "samples avg")
_FOUR_PLACES = Decimal("0.0001")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions, in StateLabel order"""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != (N_CLASSES, N_CLASSES):
            raise ShapeError(f"Confusion matrix must be {N_CLASSES}x{N_CLASSES}, got {counts.shape}")
        if np.any(counts < 0) or not np.all(np.equal(np.mod(counts, 1), 0)):
            raise ParameterError("Confusion counts must be non-negative integers")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def trace(self):
        return int(np.trace(self.counts))

    @property
    def supports(self):
        return self.counts.sum(axis=1)

    def tp(self, cls):
        c = int(StateLabel.parse(cls))
        return int(self.counts[c, c])

    def fp(self, cls):
        c = int(StateLabel.parse(cls))
        return int(self.counts[:, c].sum() - self.counts[c, c])

    def fn(self, cls):
        c = int(StateLabel.parse(cls))
        return int(self.counts[c, :].sum() - self.counts[c, c])

    def tn(self, cls):
        return self.total - self.tp(cls) - self.fp(cls) - self.fn(cls)

    def to_frame(self):
        names = [state.text for state in StateLabel]
        frame = pd.DataFrame(self.counts, index=names, columns=names)
        frame.index.name = "truth"
        return frame


def confusion_matrix(truths, predictions):
    """Tally (truth, prediction) pairs"""
    truths = [StateLabel.parse(t) for t in truths]
    predictions = [StateLabel.parse(p) for p in predictions]
    if len(truths) != len(predictions):
        raise ShapeError(f"{len(truths)} truths but {len(predictions)} predictions")
    if not truths:
        raise ParameterError("Confusion matrix needs at least one prediction")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (np.array(truths, dtype=np.int64), np.array(predictions, dtype=np.int64)), 1)
    return ConfusionMatrix(counts)


def confusion_from_counts(matrix):
    return ConfusionMatrix(np.asarray(matrix))


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool = False


def _ratio(numerator, denominator):
    if denominator > 0:
        return numerator / denominator, False
    return 0.0, True


def _f1(precision, recall):
    if precision + recall > 0:
        return 2.0 * precision * recall / (precision + recall)
    return 0.0


def class_metrics(cm, cls):
    """Precision, recall and F1 treating ``cls`` as the positive class"""
    cls = StateLabel.parse(cls)
    tp, fp, fn = cm.tp(cls), cm.fp(cls), cm.fn(cls)
    precision, bad_precision = _ratio(tp, tp + fp)
    recall, bad_recall = _ratio(tp, tp + fn)
    return ClassMetrics(
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        support=tp + fn,
        degenerate=bad_precision or bad_recall,
    )


def averaged_metrics(cm):
    """micro, macro, weighted and samples average rows"""
    total = cm.total
    if total < 1:
        raise ParameterError("Averaged metrics need a non-empty confusion matrix")
    per_class = [class_metrics(cm, state) for state in StateLabel]
    supports = np.array([m.support for m in per_class], dtype=np.float64)

    def column(name):
        return np.array([getattr(m, name) for m in per_class])

    macro = ClassMetrics(
        precision=float(column("precision").mean()),
        recall=float(column("recall").mean()),
        f1=float(column("f1").mean()),
        support=total,
        degenerate=any(m.degenerate for m in per_class),
    )
    weighted = ClassMetrics(
        precision=float(np.dot(column("precision"), supports) / total),
        recall=float(np.dot(column("recall"), supports) / total),
        f1=float(np.dot(column("f1"), supports) / total),
        support=total,
    )
    # Pooled counts: every error is one FP and one FN, so P = R = F1 = trace/total
    pooled = cm.trace / total
    micro = ClassMetrics(precision=pooled, recall=pooled, f1=_f1(pooled, pooled), support=total)
    # Single-label data: per-sample averaging coincides with micro averaging
    samples = micro
    return micro, macro, weighted, samples


def overall_accuracy(cm, cls=None):
    """(TP+TN)/(TP+TN+FP+FN) for one class, or trace/total when no class is given"""
    if cm.total < 1:
        raise ParameterError("Accuracy needs a non-empty confusion matrix")
    if cls is None:
        return cm.trace / cm.total
    cls = StateLabel.parse(cls)
    return (cm.tp(cls) + cm.tn(cls)) / cm.total


@dataclass(frozen=True)
class ClassificationReport:
    classes: dict
    micro: ClassMetrics
    macro: ClassMetrics
    weighted: ClassMetrics
    samples: ClassMetrics
    overall_accuracy: float
    total: int

    def rows(self):
        """(name, metrics) in the order the report prints them"""
        rows = [(state.text, self.classes[state]) for state in StateLabel]
        rows += list(zip(AVERAGE_ROWS, (self.micro, self.macro, self.weighted, self.samples)))
        return rows


def build_report(cm):
    micro, macro, weighted, samples = averaged_metrics(cm)
    return ClassificationReport(
        classes={state: class_metrics(cm, state) for state in StateLabel},
        micro=micro,
        macro=macro,
        weighted=weighted,
        samples=samples,
        overall_accuracy=overall_accuracy(cm),
        total=cm.total,
    )


def round_half_up(value, places=_FOUR_PLACES):
    return Decimal(repr(float(value))).quantize(places, rounding=ROUND_HALF_UP)


def render_report(report):
    """Fixed-width text table: class rows, average rows, then overall accuracy"""
    width = max(len(name) for name, _ in report.rows()) + 2
    lines = [f"{'':>{width}}{'precision':>11}{'recall':>11}{'f1-score':>11}{'support':>10}", ""]
    for i, (name, metrics) in enumerate(report.rows()):
        if i == N_CLASSES:
            lines.append("")
        lines.append(
            f"{name:>{width}}"
            f"{round_half_up(metrics.precision)!s:>11}"
            f"{round_half_up(metrics.recall)!s:>11}"
            f"{round_half_up(metrics.f1)!s:>11}"
            f"{metrics.support:>10}"
        )
    lines.append("")
    lines.append(f"{'accuracy':>{width}}{round_half_up(report.overall_accuracy)!s:>33}{report.total:>10}")
    return "\n".join(lines) + "\n"


def parse_report(text):
    """Recover the rounded values from a rendered report.

    Returns {row name: (precision, recall, f1, support)} plus an
    'accuracy' entry holding (accuracy, total).
    """
    parsed = {}
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or "precision" not in lines[0]:
        raise FormatError("Report has no header line", row=1)
    for number, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        try:
            if tokens[0] == "accuracy":
                parsed["accuracy"] = (float(tokens[1]), int(tokens[2]))
                continue
            precision, recall, f1 = (float(t) for t in tokens[-4:-1])
            support = int(tokens[-1])
        except (IndexError, ValueError):
            raise FormatError(f"Unparseable report line: {line!r}", row=number) from None
        parsed[" ".join(tokens[:-4])] = (precision, recall, f1, support)
    return parsed


def report_to_dict(report):
    """Structured emission with the same fields as the rendered table, unrounded"""
    document = {
        name: {
            "precision": metrics.precision,
            "recall": metrics.recall,
            "f1-score": metrics.f1,
            "support": int(metrics.support),
            "degenerate": bool(metrics.degenerate),
        }
        for name, metrics in report.rows()
    }
    document["accuracy"] = report.overall_accuracy
    document["total"] = report.total
    return document


def read_predictions_csv(path):
    """Read a truth,prediction fixture into two label lists"""
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise FormatError(f"{path}: file is empty", row=1) from None
    except pd.errors.ParserError as e:
        raise FormatError(f"{path}: {e}") from None
    if list(df.columns) != ["truth", "prediction"]:
        raise FormatError(f"{path}: expected header truth,prediction", row=1)
    truths, predictions = [], []
    for i, (truth, prediction) in enumerate(df.itertuples(index=False), start=2):
        try:
            truths.append(StateLabel.parse(truth))
            predictions.append(StateLabel.parse(prediction))
        except ParameterError as e:
            raise FormatError(f"{path}: row {i}: {e}", row=i) from None
    return truths, predictions
