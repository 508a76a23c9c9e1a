"""Binary classification metrics with the fake class as positive.

Conventions, used package-wide:

* labels are class ids: 0 = fake, 1 = real;
* scores are probabilities of the fake class, in [0, 1];
* "predict fake" means score >= threshold (default 0.5).

The ROC sweep walks sorted unique scores, grouping ties into a single
step; the area accumulates in exact integer arithmetic, which makes the
trapezoidal AUROC identical to the Mann-Whitney statistic with half
credit for ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

LABEL_FAKE = 0
LABEL_REAL = 1
POSITIVE_CLASS_NAME = "fake"

REPORT_HEADER = "fakefinder-report v1"


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with fake as the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ContractError(f"confusion count {name} must be a non-negative int")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def false_negative_rate(self) -> float:
        """fn / (tp + fn): the share of fakes missed."""
        pos = self.tp + self.fn
        if pos == 0:
            raise ContractError("false_negative_rate undefined without positives")
        return self.fn / pos


def _check_scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.ndim != 1 or scores.shape != labels.shape:
        raise ContractError(
            f"scores/labels must be equal-length 1-D, got {scores.shape} vs {labels.shape}"
        )
    if scores.size == 0:
        raise ContractError("metrics need at least one sample")
    if np.any(scores < 0.0) or np.any(scores > 1.0) or not np.all(np.isfinite(scores)):
        raise ContractError("scores must lie in [0, 1]")
    if not np.isin(labels, (LABEL_FAKE, LABEL_REAL)).all():
        raise ContractError("labels must be 0 (fake) or 1 (real)")
    return scores, labels.astype(np.int64)


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    scores, labels = _check_scores_labels(scores, labels)
    pred_fake = scores >= threshold
    actual_fake = labels == LABEL_FAKE
    return ConfusionMatrix(
        tp=int(np.sum(pred_fake & actual_fake)),
        fp=int(np.sum(pred_fake & ~actual_fake)),
        tn=int(np.sum(~pred_fake & ~actual_fake)),
        fn=int(np.sum(~pred_fake & actual_fake)),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ContractError("accuracy undefined on an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def _f1(tp: int, fp: int, fn: int) -> float:
    # algebraically 2PR/(P+R); this form avoids intermediate rounding and
    # gives the required F1 = 0 when precision + recall = 0
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else (2 * tp) / denom


def macro_f1(cm: ConfusionMatrix) -> float:
    """Mean of the per-class F1 scores (fake-as-positive, real-as-positive)."""
    f1_fake = _f1(cm.tp, cm.fp, cm.fn)
    f1_real = _f1(cm.tn, cm.fn, cm.fp)
    return 0.5 * (f1_fake + f1_real)


def _roc_count_points(scores, labels):
    """Threshold sweep over descending unique scores.

    Returns integer (fp, tp) cumulative counts, tie groups collapsed,
    plus the class totals.
    """
    actual_fake = labels == LABEL_FAKE
    npos = int(actual_fake.sum())
    nneg = int(actual_fake.size - npos)
    if npos == 0 or nneg == 0:
        raise ContractError("AUROC needs at least one fake and one real sample")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = actual_fake[order]
    points = [(0, 0)]
    tp = fp = 0
    i = 0
    n = s.size
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        tp += int(pos[i:j].sum())
        fp += (j - i) - int(pos[i:j].sum())
        points.append((fp, tp))
        i = j
    return points, npos, nneg


def auroc(scores, labels) -> float:
    """Area under the ROC curve; ties earn half credit (Mann-Whitney)."""
    scores, labels = _check_scores_labels(scores, labels)
    points, npos, nneg = _roc_count_points(scores, labels)
    area2 = 0  # twice the area, in integer tp*fp units
    for (fp0, tp0), (fp1, tp1) in zip(points, points[1:]):
        area2 += (fp1 - fp0) * (tp1 + tp0)
    return area2 / (2 * npos * nneg)


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(fpr, tpr) sweep points, collinear runs collapsed, anchored at
    (0, 0) and (1, 1)."""
    scores, labels = _check_scores_labels(scores, labels)
    points, npos, nneg = _roc_count_points(scores, labels)
    if points[-1] != (nneg, npos):  # always true, but keep the anchor explicit
        points.append((nneg, npos))
    kept = [points[0]]
    for i in range(1, len(points) - 1):
        (fa, ta), (fb, tb), (fc, tc) = kept[-1], points[i], points[i + 1]
        cross = (fb - fa) * (tc - tb) - (fc - fb) * (tb - ta)
        if cross != 0:
            kept.append(points[i])
    kept.append(points[-1])
    return [(fp / nneg, tp / npos) for fp, tp in kept]


@dataclass
class MetricsReport:
    """Evaluation summary for one split."""

    loss: float
    accuracy: float
    f1_macro: float
    auroc: float
    confusion: ConfusionMatrix
    roc_points: list[tuple[float, float]] = field(default_factory=list)


def build_report(scores, labels, loss: float, threshold: float = 0.5) -> MetricsReport:
    cm = confusion(scores, labels, threshold)
    return MetricsReport(
        loss=float(loss),
        accuracy=accuracy(cm),
        f1_macro=macro_f1(cm),
        auroc=auroc(scores, labels),
        confusion=cm,
        roc_points=roc_curve(scores, labels),
    )


# ---------------------------------------------------------------------------
# serialization


def emit_report(report: MetricsReport, path, roc_csv_path=None) -> None:
    """Write the key-value report file; floats use repr so the file
    round-trips losslessly. Optionally also write an `fpr,tpr` CSV with
    12 significant digits for plotting."""
    lines = [
        REPORT_HEADER,
        f"positive_class: {POSITIVE_CLASS_NAME}",
        f"loss: {report.loss!r}",
        f"accuracy: {report.accuracy!r}",
        f"f1_macro: {report.f1_macro!r}",
        f"auroc: {report.auroc!r}",
        "confusion:",
        f"  tp: {report.confusion.tp}",
        f"  fp: {report.confusion.fp}",
        f"  tn: {report.confusion.tn}",
        f"  fn: {report.confusion.fn}",
        "roc:",
    ]
    lines += [f"  {fpr!r} {tpr!r}" for fpr, tpr in report.roc_points]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if roc_csv_path is not None:
        write_roc_csv(report, roc_csv_path)


def write_roc_csv(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fpr,tpr\n")
        for fpr, tpr in report.roc_points:
            fh.write(f"{fpr:.12g},{tpr:.12g}\n")


def read_report(path) -> MetricsReport:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != REPORT_HEADER:
        raise ContractError(f"{path}: not a report file")
    kv: dict[str, str] = {}
    counts: dict[str, int] = {}
    roc: list[tuple[float, float]] = []
    section = None
    for ln in lines[1:]:
        if not ln.strip():
            continue
        if ln == "confusion:":
            section = "confusion"
            continue
        if ln == "roc:":
            section = "roc"
            continue
        if ln.startswith("  ") and section == "confusion":
            k, v = ln.strip().split(": ")
            counts[k] = int(v)
        elif ln.startswith("  ") and section == "roc":
            a, b = ln.strip().split(" ")
            roc.append((float(a), float(b)))
        else:
            section = None
            k, v = ln.split(": ", 1)
            kv[k] = v
    return MetricsReport(
        loss=float(kv["loss"]),
        accuracy=float(kv["accuracy"]),
        f1_macro=float(kv["f1_macro"]),
        auroc=float(kv["auroc"]),
        confusion=ConfusionMatrix(**counts),
        roc_points=roc,
    )


# ---------------------------------------------------------------------------
# rendering


def _fmt(v: float) -> str:
    return f"{v:.5f}"


def render_stage_comparison(stage1: MetricsReport, stage2: MetricsReport) -> str:
    """Side-by-side test metrics for the two training stages."""
    rows = [
        ("Test Loss", stage1.loss, stage2.loss),
        ("Test Accuracy", stage1.accuracy, stage2.accuracy),
        ("Test F1 Macro", stage1.f1_macro, stage2.f1_macro),
        ("Test AUC-ROC", stage1.auroc, stage2.auroc),
    ]
    out = [f"{'Metric':<16} {'Stage-I':>10} {'Stage-II':>10}"]
    out += [f"{name:<16} {_fmt(a):>10} {_fmt(b):>10}" for name, a, b in rows]
    return "\n".join(out)


def render_ablation_table(rows) -> str:
    """Recipe comparison; rows are (name, total_epochs, affine_used, report)."""
    out = [
        f"{'Case':<6} {'Epochs':>7} {'Affine':>7} {'Accuracy%':>10} "
        f"{'F1 Macro':>9} {'AUC-ROC':>8}"
    ]
    for name, epochs, affine, rep in rows:
        out.append(
            f"{name:<6} {epochs:>7} {('yes' if affine else 'no'):>7} "
            f"{100.0 * rep.accuracy:>10.2f} {rep.f1_macro:>9.4f} {rep.auroc:>8.4f}"
        )
    return "\n".join(out)
