"""Metric oracles.

AUROC is checked against an independent pairwise Mann-Whitney count
(ties get half credit); accuracy and macro-F1 against slow hand
formulas written from the definitions.
"""

import numpy as np
import pytest

from fakefinder import metrics as M
from fakefinder.errors import ContractError


def pairwise_auroc(scores, labels):
    """Oracle: P(score_fake > score_real) + 0.5 * P(equal), by brute force."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    fake = scores[labels == M.LABEL_FAKE]
    real = scores[labels == M.LABEL_REAL]
    twice = 0
    for f in fake:
        for r in real:
            if f > r:
                twice += 2
            elif f == r:
                twice += 1
    return twice / (2 * len(fake) * len(real))


def oracle_prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def oracle_macro_f1(cm):
    return 0.5 * (oracle_prf(cm.tp, cm.fp, cm.fn) + oracle_prf(cm.tn, cm.fn, cm.fp))


# ---------------------------------------------------------------------------
# confusion and scalar metrics


def test_confusion_small_case():
    scores = [0.9, 0.1]
    labels = [M.LABEL_FAKE, M.LABEL_REAL]
    cm = M.confusion(scores, labels, threshold=0.5)
    assert (cm.tp, cm.fp, cm.tn, cm.fn) == (1, 0, 1, 0)


def test_confusion_threshold_is_geq():
    cm = M.confusion([0.5], [M.LABEL_FAKE], threshold=0.5)
    assert cm.tp == 1 and cm.fn == 0  # score exactly at threshold predicts fake


def test_confusion_brute_force_sweep():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(2, 60))
        scores = rng.random(n)
        labels = rng.integers(0, 2, n)
        t = float(rng.random())
        cm = M.confusion(scores, labels, t)
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l == M.LABEL_FAKE)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and l == M.LABEL_REAL)
        fn = sum(1 for s, l in zip(scores, labels) if s < t and l == M.LABEL_FAKE)
        tn = sum(1 for s, l in zip(scores, labels) if s < t and l == M.LABEL_REAL)
        assert (cm.tp, cm.fp, cm.tn, cm.fn) == (tp, fp, tn, fn)
        assert cm.total == n


def test_accuracy_simple():
    cm = M.ConfusionMatrix(tp=2, fp=1, tn=2, fn=1)
    assert M.accuracy(cm) == pytest.approx(4 / 6)


def test_macro_f1_known_value():
    cm = M.ConfusionMatrix(tp=2, fp=1, tn=2, fn=1)
    assert M.macro_f1(cm) == pytest.approx(0.6667, abs=1e-4)


def test_macro_f1_zero_precision_recall_class():
    # nothing predicted fake and nothing is fake: fake-class F1 contributes 0
    cm = M.ConfusionMatrix(tp=0, fp=0, tn=5, fn=0)
    assert M.macro_f1(cm) == pytest.approx(0.5)


def test_macro_f1_equals_accuracy_when_balanced_and_symmetric():
    rng = np.random.default_rng(5)
    for _ in range(200):
        tp = int(rng.integers(0, 500))
        e = int(rng.integers(0, 200))
        cm = M.ConfusionMatrix(tp=tp, fp=e, tn=tp, fn=e)
        if cm.total == 0:
            continue
        assert M.macro_f1(cm) == M.accuracy(cm)  # exact, not approx


def test_random_confusion_matrices_match_hand_oracles():
    rng = np.random.default_rng(17)
    for _ in range(100):
        tp, fp, tn, fn = (int(v) for v in rng.integers(0, 1000, 4))
        if tp + fp + tn + fn == 0:
            continue
        cm = M.ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)
        assert M.accuracy(cm) == pytest.approx((tp + tn) / (tp + fp + tn + fn), abs=1e-12)
        assert M.macro_f1(cm) == pytest.approx(oracle_macro_f1(cm), abs=1e-12)


def test_false_negative_rate_exact_fraction():
    # 19,041-sample split: 143 missed fakes among 9,520, no other errors
    cm = M.ConfusionMatrix(tp=9377, fp=0, tn=9521, fn=143)
    assert cm.total == 19041
    assert cm.false_negative_rate == 143 / 9520
    assert round(cm.false_negative_rate, 4) == 0.0150


# ---------------------------------------------------------------------------
# AUROC / ROC


def test_auroc_known_value():
    scores = [0.9, 0.6, 0.4, 0.1]
    labels = [M.LABEL_FAKE, M.LABEL_REAL, M.LABEL_FAKE, M.LABEL_REAL]
    assert M.auroc(scores, labels) == pytest.approx(0.75, abs=1e-12)


def test_auroc_all_ties_is_half():
    scores = [0.5, 0.5, 0.5, 0.5]
    labels = [0, 1, 0, 1]
    assert M.auroc(scores, labels) == pytest.approx(0.5, abs=1e-15)


def test_auroc_perfect_and_inverted():
    labels = [0, 0, 1, 1]
    assert M.auroc([0.9, 0.8, 0.2, 0.1], labels) == 1.0
    assert M.auroc([0.1, 0.2, 0.8, 0.9], labels) == 0.0


def test_auroc_label_flip_complements():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(4, 80))
        scores = rng.random(n)
        labels = rng.integers(0, 2, n)
        if len(set(labels)) < 2:
            continue
        a = M.auroc(scores, labels)
        b = M.auroc(scores, 1 - labels)
        assert a + b == pytest.approx(1.0, abs=1e-12)  # scores are tie-free a.s.


def test_auroc_invariant_under_monotone_transform():
    rng = np.random.default_rng(4)
    scores = rng.random(50)
    labels = rng.integers(0, 2, 50)
    labels[0], labels[1] = 0, 1
    squashed = scores**3  # strictly monotone, stays in [0, 1]
    assert M.auroc(scores, labels) == pytest.approx(M.auroc(squashed, labels), abs=1e-12)


def test_auroc_matches_pairwise_oracle_with_ties():
    rng = np.random.default_rng(23)
    for _ in range(100):
        n = int(rng.integers(2, 500))
        # coarse grid of scores forces plenty of exact ties
        scores = rng.integers(0, 7, n) / 6.0
        labels = rng.integers(0, 2, n)
        if len(set(labels.tolist())) < 2:
            continue
        assert M.auroc(scores, labels) == pytest.approx(
            pairwise_auroc(scores, labels), abs=1e-12
        )


def test_auroc_requires_both_classes():
    with pytest.raises(ContractError):
        M.auroc([0.5, 0.6], [0, 0])


def test_scores_outside_unit_interval_rejected():
    with pytest.raises(ContractError):
        M.auroc([1.5, 0.5], [0, 1])
    with pytest.raises(ContractError):
        M.confusion([-0.1], [0])


def test_roc_curve_perfect_separation_three_points():
    scores = [0.9, 0.8, 0.2, 0.1]
    labels = [0, 0, 1, 1]
    assert M.roc_curve(scores, labels) == [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]


def test_roc_curve_all_equal_scores_two_points():
    assert M.roc_curve([0.5, 0.5], [0, 1]) == [(0.0, 0.0), (1.0, 1.0)]


def test_roc_curve_monotone_and_consistent_with_auroc():
    rng = np.random.default_rng(9)
    for _ in range(30):
        n = int(rng.integers(4, 200))
        scores = rng.integers(0, 12, n) / 11.0
        labels = rng.integers(0, 2, n)
        if len(set(labels.tolist())) < 2:
            continue
        pts = M.roc_curve(scores, labels)
        assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
        fprs = [p[0] for p in pts]
        tprs = [p[1] for p in pts]
        assert all(a <= b for a, b in zip(fprs, fprs[1:]))
        assert all(a <= b for a, b in zip(tprs, tprs[1:]))
        area = sum(
            (f1 - f0) * (t1 + t0) / 2.0
            for (f0, t0), (f1, t1) in zip(pts, pts[1:])
        )
        assert area == pytest.approx(M.auroc(scores, labels), abs=1e-12)


# ---------------------------------------------------------------------------
# report round-trip


def test_report_roundtrip_lossless(tmp_path):
    rng = np.random.default_rng(31)
    scores = rng.random(40)
    labels = rng.integers(0, 2, 40)
    labels[:2] = (0, 1)
    rep = M.build_report(scores, labels, loss=0.123456789012345)
    path = tmp_path / "eval.report.txt"
    M.emit_report(rep, path, roc_csv_path=tmp_path / "eval.roc.csv")
    back = M.read_report(path)
    assert back.loss == rep.loss
    assert back.accuracy == rep.accuracy
    assert back.f1_macro == rep.f1_macro
    assert back.auroc == rep.auroc
    assert back.confusion == rep.confusion
    assert back.roc_points == rep.roc_points

    csv_lines = (tmp_path / "eval.roc.csv").read_text().splitlines()
    assert csv_lines[0] == "fpr,tpr"
    assert len(csv_lines) == 1 + len(rep.roc_points)
    f, t = csv_lines[1].split(",")
    assert float(f) == pytest.approx(rep.roc_points[0][0], abs=1e-11)
    assert float(t) == pytest.approx(rep.roc_points[0][1], abs=1e-11)


def test_render_tables_smoke():
    cm = M.ConfusionMatrix(tp=5, fp=1, tn=5, fn=1)
    rep = M.MetricsReport(
        loss=0.1, accuracy=10 / 12, f1_macro=10 / 12, auroc=0.97, confusion=cm
    )
    text = M.render_stage_comparison(rep, rep)
    assert "Stage-I" in text and "Stage-II" in text and "Test AUC-ROC" in text
    table = M.render_ablation_table(
        [("T1", 5, False, rep), ("T2", 6, False, rep), ("T3", 6, True, rep)]
    )
    assert table.count("\n") == 3
    assert "T3" in table and "yes" in table
