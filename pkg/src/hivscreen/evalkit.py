"""Confusion matrices, classification metrics, abstention accounting and
sliding-window mode inference for long token sequences."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .decide import AggregateDecision, Label

MAX_LEN = 512
STRIDE = 0.8


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary confusion matrix with Inclusion as the positive class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise MetricsError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_pairs(cls, predicted: Iterable[int], actual: Iterable[int]) -> ConfusionMatrix:
        counts = Counter(zip(predicted, actual))
        return cls(tp=counts[1, 1], fp=counts[1, 0], fn=counts[0, 1], tn=counts[0, 0])

    def rows(self) -> list[list[int]]:
        """True labels top-to-bottom (Exclusion, Inclusion), predictions left-to-right."""
        return [[self.tn, self.fp], [self.fn, self.tp]]


@dataclass(frozen=True)
class MetricsReport:
    confusion: ConfusionMatrix
    accuracy: float
    macro_f1: float
    sensitivity: float
    specificity: float
    abstained: int = 0

    @property
    def evaluated(self) -> int:
        return self.confusion.total

    @property
    def retained_fraction(self) -> float:
        return self.evaluated / (self.evaluated + self.abstained)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def _f1(tp: int, fp: int, fn: int) -> float:
    precision, recall = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def metrics(cm: ConfusionMatrix, abstained: int = 0) -> MetricsReport:
    """Accuracy, macro-F1 over both classes, sensitivity and specificity.

    Raises:
        MetricsError: if either true class is empty, since sensitivity or
            specificity would be undefined.
    """
    if cm.tp + cm.fn == 0:
        raise MetricsError("sensitivity undefined: no Inclusion cases")
    if cm.tn + cm.fp == 0:
        raise MetricsError("specificity undefined: no Exclusion cases")
    macro = (_f1(cm.tp, cm.fp, cm.fn) + _f1(cm.tn, cm.fn, cm.fp)) / 2
    return MetricsReport(
        confusion=cm,
        accuracy=(cm.tp + cm.tn) / cm.total,
        macro_f1=macro,
        sensitivity=cm.tp / (cm.tp + cm.fn),
        specificity=cm.tn / (cm.tn + cm.fp),
        abstained=abstained,
    )


def evaluate_strategy(decisions: Sequence[AggregateDecision], labels: Sequence[int]) -> MetricsReport:
    """Metrics over non-abstained decisions; abstentions are counted separately."""
    if len(decisions) != len(labels):
        raise MetricsError(f"{len(decisions)} decisions but {len(labels)} labels")
    kept = [(d.label.binary, y) for d, y in zip(decisions, labels) if d.label is not Label.ABSTAIN]
    if not kept:
        raise MetricsError("every decision abstained; nothing to evaluate")
    cm = ConfusionMatrix.from_pairs((p for p, _ in kept), (y for _, y in kept))
    return metrics(cm, abstained=len(decisions) - len(kept))


METRICS_COLUMNS = (
    "prompt", "strategy", "accuracy", "macro_f1", "sensitivity", "specificity",
    "evaluated", "abstained", "retained_fraction", "config_digest",
)


def metrics_row(prompt: str, strategy: str, report: MetricsReport, digest: str = "") -> dict[str, str]:
    """Metrics formatted for CSV: percentages rounded to two decimals, like the result tables."""
    pct = lambda v: f"{100 * v:.2f}"  # noqa: E731
    return {
        "prompt": prompt,
        "strategy": strategy,
        "accuracy": pct(report.accuracy),
        "macro_f1": pct(report.macro_f1),
        "sensitivity": pct(report.sensitivity),
        "specificity": pct(report.specificity),
        "evaluated": str(report.evaluated),
        "abstained": str(report.abstained),
        "retained_fraction": f"{report.retained_fraction:.4f}",
        "config_digest": digest,
    }


def write_metrics_csv(rows: Iterable[dict[str, str]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_confusion_csv(entries: Iterable[tuple[str, str, ConfusionMatrix]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["prompt", "strategy", "true_label", "pred_Exclusion", "pred_Inclusion"])
    for prompt, strategy, cm in entries:
        for name, row in zip(("Exclusion", "Inclusion"), cm.rows()):
            writer.writerow([prompt, strategy, name, *row])
    return buf.getvalue()


# --- sliding windows --------------------------------------------------------


@dataclass(frozen=True)
class WindowPlan:
    max_len: int
    advance: int
    windows: tuple[tuple[int, int], ...]  # (start, length)

    @property
    def starts(self) -> list[int]:
        return [s for s, _ in self.windows]

    @property
    def lengths(self) -> list[int]:
        return [n for _, n in self.windows]


def plan_windows(total_tokens: int, max_len: int = MAX_LEN, stride: float = STRIDE) -> WindowPlan:
    """Overlapping windows advancing by ``floor(stride * max_len)`` tokens.

    >>> plan_windows(1000).windows
    ((0, 512), (409, 512), (818, 182))
    """
    if total_tokens < 1:
        raise ValueError("total_tokens must be at least 1")
    if max_len < 1 or not 0 < stride <= 1:
        raise ValueError("max_len must be positive and stride in (0, 1]")
    advance = max(1, math.floor(stride * max_len))
    windows = []
    start = 0
    while True:
        end = min(start + max_len, total_tokens)
        windows.append((start, end - start))
        if end >= total_tokens:
            break
        start += advance
    return WindowPlan(max_len, advance, tuple(windows))


def mode_label(labels: Sequence[int]) -> int:
    """Majority of binary window labels; ties resolve to Inclusion (1)."""
    if not labels:
        raise ValueError("no window labels")
    ones = sum(1 for v in labels if v == 1)
    return 1 if 2 * ones >= len(labels) else 0


def window_mode_predict(
    token_ids: Sequence[int], classifier: Callable[[Sequence[int]], int],
    max_len: int = MAX_LEN, stride: float = STRIDE,
) -> int:
    """Classify every window of ``token_ids`` and return the modal label."""
    plan = plan_windows(len(token_ids), max_len, stride)
    return mode_label([classifier(token_ids[s:s + n]) for s, n in plan.windows])
