"""Confusion-matrix rates, ROC-AUC and per-patient report assembly."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

METRIC_KEYS = ("accuracy", "sensitivity", "specificity", "fpr", "auc")


class SingleClass(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_labels(cls, truth, predicted) -> ConfusionMatrix:
        t = np.asarray(truth).astype(bool)
        p = np.asarray(predicted).astype(bool)
        if t.shape != p.shape:
            raise ValueError("truth and predictions differ in shape")
        return cls(
            tp=int(np.sum(t & p)),
            fp=int(np.sum(~t & p)),
            tn=int(np.sum(~t & ~p)),
            fn=int(np.sum(t & ~p)),
        )

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_counts(self) -> list[list[int]]:
        """Rows = true class (0, 1), columns = predicted class."""
        return [[self.tn, self.fp], [self.fn, self.tp]]


def rates(cm: ConfusionMatrix) -> dict[str, float | None]:
    """Accuracy, sensitivity, specificity and FPR; None where undefined."""
    pos, neg = cm.tp + cm.fn, cm.tn + cm.fp
    return {
        "accuracy": (cm.tp + cm.tn) / cm.total if cm.total else None,
        "sensitivity": cm.tp / pos if pos else None,
        "specificity": cm.tn / neg if neg else None,
        "fpr": cm.fp / neg if neg else None,
    }


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve over every distinct threshold.

    Equal to P(score_pos > score_neg) + 0.5 * P(tie).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    # integer trapezoids; divide once at the end
    area2 = np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1]))
    return float(area2) / (2.0 * n_pos * n_neg)


@dataclass
class MethodReport:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    fpr: float | None
    auc: float | None
    confusion: list[list[int]]
    mean_delay_s: float | None = None
    missed_seizures: int = 0


@dataclass
class EvalReport:
    """Pooled and per-patient metrics for each smoothing method."""

    methods: dict[str, MethodReport] = field(default_factory=dict)
    per_patient: dict[str, dict[str, MethodReport]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "methods": {k: asdict(v) for k, v in self.methods.items()},
            "per_patient": {
                p: {k: asdict(v) for k, v in m.items()} for p, m in self.per_patient.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        """One row per (patient, method); the pooled rows use patient '*'."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["patient", "method", *METRIC_KEYS, "mean_delay_s"])
        rows = [("*", self.methods)] + sorted(self.per_patient.items())
        for pid, methods in rows:
            for name, r in methods.items():
                w.writerow([pid, name, *(_fmt(getattr(r, k)) for k in METRIC_KEYS),
                            _fmt(r.mean_delay_s)])
        return buf.getvalue()

    def auc_boxplot_csv(self) -> str:
        """Per-patient AUC table, one column per method."""
        methods = sorted(self.methods)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["patient", *methods])
        for pid, m in sorted(self.per_patient.items()):
            w.writerow([pid, *(_fmt(m[k].auc) if k in m else "" for k in methods)])
        return buf.getvalue()

    def table(self) -> str:
        names = list(self.methods)
        lines = [f"{'metric':<16}" + "".join(f"{n:>10}" for n in names)]
        for key, label, pct in (("accuracy", "Accuracy [%]", True),
                                ("sensitivity", "Sensitivity [%]", True),
                                ("specificity", "Specificity [%]", True),
                                ("fpr", "FPR", False), ("auc", "AUC score", False)):
            cells = []
            for n in names:
                v = getattr(self.methods[n], key)
                cells.append("       n/a" if v is None else
                             (f"{100 * v:10.2f}" if pct else f"{v:10.4f}"))
            lines.append(f"{label:<16}" + "".join(cells))
        return "\n".join(lines)


def _fmt(v):
    return "" if v is None else f"{v:.6g}"


def method_report(truth, decisions, scores, delays=None) -> MethodReport:
    cm = ConfusionMatrix.from_labels(truth, decisions)
    r = rates(cm)
    try:
        auc = roc_auc(scores, truth)
    except SingleClass:
        auc = None
    found = [d for d in (delays or []) if d is not None]
    return MethodReport(
        **r,
        auc=auc,
        confusion=cm.as_counts(),
        mean_delay_s=float(np.mean(found)) if found else None,
        missed_seizures=sum(d is None for d in (delays or [])),
    )
