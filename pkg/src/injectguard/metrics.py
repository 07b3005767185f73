"""Confusion-matrix statistics and round-history CSV export.

Adversary is the positive class throughout.  Division by zero counts is
reported as 0.0 with the metric name recorded in the report's
``undefined`` set, so downstream CSV columns stay stable.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidInputError
from .fileio import atomic_write_text


@dataclass(frozen=True)
class ConfusionMatrix:
    """TP/TN/FP/FN counts; positive class = adversary."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise InvalidInputError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


@dataclass(frozen=True)
class MetricsReport:
    sensitivity: float
    specificity: float
    precision: float
    accuracy: float
    f1: float
    undefined: frozenset = frozenset()


def _ratio(num: int, den: int, name: str, undefined: set) -> float:
    if den == 0:
        undefined.add(name)
        return 0.0
    return num / den


def derive_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Standard detection metrics from the four counts."""
    if cm.total == 0:
        raise InvalidInputError("empty confusion matrix")
    undefined: set = set()
    sensitivity = _ratio(cm.tp, cm.tp + cm.fn, "sensitivity", undefined)
    specificity = _ratio(cm.tn, cm.tn + cm.fp, "specificity", undefined)
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", undefined)
    accuracy = (cm.tp + cm.tn) / cm.total
    if precision + sensitivity == 0.0:
        undefined.add("f1")
        f1 = 0.0
    else:
        f1 = 2.0 * precision * sensitivity / (precision + sensitivity)
    return MetricsReport(
        sensitivity=sensitivity,
        specificity=specificity,
        precision=precision,
        accuracy=accuracy,
        f1=f1,
        undefined=frozenset(undefined),
    )


@dataclass(frozen=True)
class RoundMetrics:
    """One (round, client) evaluation entry of a federated run.

    Round 0 rows are the standalone baselines (each client's model after
    local training only, before any aggregation).
    """

    round: int
    client_id: int
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float

    @classmethod
    def from_confusion(cls, round_no: int, client_id: int, cm: ConfusionMatrix) -> "RoundMetrics":
        rep = derive_metrics(cm)
        return cls(
            round=round_no,
            client_id=client_id,
            accuracy=rep.accuracy,
            sensitivity=rep.sensitivity,
            specificity=rep.specificity,
            precision=rep.precision,
            f1=rep.f1,
        )


_HEADER = "round,client_id,accuracy,sensitivity,specificity,precision,f1"


def export_history(history: list[RoundMetrics], path: str) -> int:
    """Write the history as CSV (round asc, client asc); returns row count.

    Floats are written with repr so a parse reconstructs them exactly,
    and re-exporting the same history is byte-identical.
    """
    if not history:
        raise InvalidInputError("empty history")
    rows = sorted(history, key=lambda r: (r.round, r.client_id))
    lines = [_HEADER]
    for r in rows:
        lines.append(
            f"{r.round},{r.client_id},{r.accuracy!r},{r.sensitivity!r},"
            f"{r.specificity!r},{r.precision!r},{r.f1!r}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")
    return len(rows)


def load_history(path: str) -> list[RoundMetrics]:
    """Parse a history CSV written by export_history."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != _HEADER:
        raise InvalidInputError(f"{path}: missing or wrong CSV header")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 7:
            raise InvalidInputError(f"{path}: malformed row {ln!r}")
        out.append(
            RoundMetrics(
                round=int(parts[0]),
                client_id=int(parts[1]),
                accuracy=float(parts[2]),
                sensitivity=float(parts[3]),
                specificity=float(parts[4]),
                precision=float(parts[5]),
                f1=float(parts[6]),
            )
        )
    return out
