"""Confusion matrices, macro precision/recall/F1, and bootstrap CIs.

Conventions: a class with gold support but a zero denominator scores 0 on
the degenerate metric; classes with zero gold support are excluded from
the macro means. Abstentions (pred = -1) are legal in prediction pairs and
count against recall of the gold class without crediting any precision.
The bootstrap resamples whole (pred, gold) pairs with replacement and uses
the percentile interval; iteration ``i`` draws from seed + i so serial and
parallel runs agree exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyInput, LabelOutOfRange
from .rng import derive_rng

ABSTAIN = -1


@dataclass(frozen=True)
class Prediction:
    id: str
    pred: int      # 0..C-1, or ABSTAIN
    gold: int      # 0..C-1


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricReport:
    per_class: list[ClassMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    ci_half_width: dict[str, float] | None = None
    class_names: list[str] = field(default_factory=list)


def confusion(preds: Sequence[Prediction], C: int) -> np.ndarray:
    """C x C count matrix; entry (g, p) counts gold-g predicted-p."""
    if not preds:
        raise EmptyInput("no predictions")
    cm = np.zeros((C, C), dtype=np.int64)
    for p in preds:
        if not (0 <= p.gold < C) or not (0 <= p.pred < C):
            raise LabelOutOfRange(
                f"prediction {p.id!r}: ({p.gold}, {p.pred}) outside 0..{C - 1}")
        cm[p.gold, p.pred] += 1
    return cm


def confusion_with_abstain(preds: Sequence[Prediction], C: int) -> np.ndarray:
    """C x (C + 1) matrix whose trailing column counts abstentions."""
    if not preds:
        raise EmptyInput("no predictions")
    cm = np.zeros((C, C + 1), dtype=np.int64)
    for p in preds:
        if not (0 <= p.gold < C):
            raise LabelOutOfRange(f"gold label {p.gold} outside 0..{C - 1}")
        if p.pred == ABSTAIN:
            cm[p.gold, C] += 1
        elif 0 <= p.pred < C:
            cm[p.gold, p.pred] += 1
        else:
            raise LabelOutOfRange(f"predicted label {p.pred} outside 0..{C - 1}")
    return cm


def macro_prf(cm: np.ndarray,
              class_names: Sequence[str] | None = None) -> MetricReport:
    """Metrics from a confusion matrix (square, or with a trailing
    abstention column that contributes misses but no predictions)."""
    cm = np.asarray(cm, dtype=np.int64)
    C = cm.shape[0]
    if cm.shape[1] not in (C, C + 1):
        raise ValueError(f"confusion matrix shape {cm.shape} is not CxC or Cx(C+1)")
    if cm.sum() == 0:
        raise EmptyInput("confusion matrix is empty")

    per_class: list[ClassMetrics] = []
    macro_terms: list[tuple[float, float, float]] = []
    for c in range(C):
        tp = int(cm[c, c])
        support = int(cm[c].sum())
        predicted = int(cm[:C, c].sum())
        fp = predicted - tp
        fn = support - tp
        precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
        recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) \
            if (precision + recall) > 0 else 0.0
        per_class.append(ClassMetrics(precision, recall, f1, support))
        if support > 0:
            macro_terms.append((precision, recall, f1))

    if not macro_terms:
        raise EmptyInput("no class has gold support")
    macro = np.mean(np.asarray(macro_terms), axis=0)
    return MetricReport(per_class, float(macro[0]), float(macro[1]),
                        float(macro[2]),
                        class_names=list(class_names or []))


def macro_prf_from_pairs(preds: Sequence[Prediction], C: int,
                         class_names: Sequence[str] | None = None) -> MetricReport:
    return macro_prf(confusion_with_abstain(preds, C), class_names)


def bootstrap_ci(
    preds: Sequence[Prediction],
    C: int,
    iterations: int = 1000,
    confidence: float = 0.95,
    seed: int = 42,
) -> dict[str, float]:
    """Percentile-bootstrap CI half-widths for macro precision/recall/F1."""
    if len(preds) < 2:
        raise EmptyInput("bootstrap needs at least 2 predictions")
    n = len(preds)
    stats = np.zeros((iterations, 3))
    for it in range(iterations):
        rng = derive_rng(seed, it)
        idx = rng.integers(0, n, size=n)
        sample = [preds[i] for i in idx]
        report = macro_prf_from_pairs(sample, C)
        stats[it] = (report.macro_precision, report.macro_recall, report.macro_f1)

    tail = 100.0 * (1.0 - confidence) / 2.0
    lo = np.percentile(stats, tail, axis=0)
    hi = np.percentile(stats, 100.0 - tail, axis=0)
    half = (hi - lo) / 2.0
    return {"precision": float(half[0]), "recall": float(half[1]),
            "f1": float(half[2])}


def evaluate(preds: Sequence[Prediction], C: int,
             class_names: Sequence[str] | None = None,
             bootstrap_iterations: int = 0,
             confidence: float = 0.95,
             seed: int = 42) -> MetricReport:
    """Full report; optionally attaches bootstrap CI half-widths."""
    report = macro_prf_from_pairs(preds, C, class_names)
    if bootstrap_iterations > 0:
        report.ci_half_width = bootstrap_ci(
            preds, C, bootstrap_iterations, confidence, seed)
    return report


# ---------------------------------------------------------------------------
# report formatting and prediction files
# ---------------------------------------------------------------------------

def format_report(report: MetricReport) -> str:
    """Plain-text per-class table: class, P, R, F1, Support."""
    names = report.class_names or [str(i) for i in range(len(report.per_class))]
    width = max(len(n) for n in names + ["Class", "macro avg"])
    lines = [f"{'Class':<{width}}  {'P':>7}  {'R':>7}  {'F1':>7}  {'Support':>7}"]
    for name, m in zip(names, report.per_class):
        lines.append(f"{name:<{width}}  {m.precision:>7.4f}  {m.recall:>7.4f}  "
                     f"{m.f1:>7.4f}  {m.support:>7d}")
    total = sum(m.support for m in report.per_class)
    lines.append(f"{'macro avg':<{width}}  {report.macro_precision:>7.4f}  "
                 f"{report.macro_recall:>7.4f}  {report.macro_f1:>7.4f}  "
                 f"{total:>7d}")
    if report.ci_half_width:
        hw = report.ci_half_width
        lines.append(f"95% CI half-width: P +/-{hw['precision']:.4f}  "
                     f"R +/-{hw['recall']:.4f}  F1 +/-{hw['f1']:.4f}")
    return "\n".join(lines)


def report_to_dict(report: MetricReport) -> dict:
    return {
        "per_class": [
            {"name": (report.class_names[i] if report.class_names else str(i)),
             "precision": m.precision, "recall": m.recall,
             "f1": m.f1, "support": m.support}
            for i, m in enumerate(report.per_class)
        ],
        "macro_precision": report.macro_precision,
        "macro_recall": report.macro_recall,
        "macro_f1": report.macro_f1,
        "ci_half_width": report.ci_half_width,
    }


def read_predictions(path: str | Path) -> list[Prediction]:
    """JSON-lines {"id", "pred", "gold"}; "label" accepted for "pred"."""
    preds = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            pred = row["pred"] if "pred" in row else row["label"]
            preds.append(Prediction(str(row["id"]), int(pred), int(row["gold"])))
    return preds
