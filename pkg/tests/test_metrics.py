import numpy as np
import numpy.testing as npt
import pytest

from vitforge import metrics as MT
from vitforge.metrics import ConfusionMatrix, MetricsError

rng = np.random.default_rng(99)

CLASS_NAMES = ["normal", "ulcerative_colitis", "polyps", "esophagitis"]


def brute_force_counts(true, pred, k):
    counts = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(true, pred):
        for i in range(k):
            for j in range(k):
                if t == i and p == j:
                    counts[i, j] += 1
    return counts


def brute_force_class_metrics(true, pred, cls):
    tp = sum(1 for t, p in zip(true, pred) if t == cls and p == cls)
    fp = sum(1 for t, p in zip(true, pred) if t != cls and p == cls)
    fn = sum(1 for t, p in zip(true, pred) if t == cls and p != cls)
    tn = sum(1 for t, p in zip(true, pred) if t != cls and p != cls)
    return tp, fp, fn, tn


# ---------------------------------------------------------------------------
# confusion


def test_confusion_perfect_predictions_are_diagonal():
    labels = np.array([0, 1, 2, 3, 2, 1])
    cm = MT.confusion(labels, labels, 4)
    npt.assert_array_equal(cm.counts, np.diag([1, 2, 2, 1]))


def test_confusion_normal_row_from_narrated_counts():
    # 188 normal images: 187 correct, one predicted as ulcerative colitis
    true = np.zeros(188, dtype=np.int64)
    pred = np.zeros(188, dtype=np.int64)
    pred[0] = 1
    cm = MT.confusion(true, pred, CLASS_NAMES)
    npt.assert_array_equal(cm.counts[0], [187, 1, 0, 0])
    assert cm.counts[0].sum() == 188


def test_confusion_matches_brute_force_recount():
    true = rng.integers(0, 4, size=200)
    pred = rng.integers(0, 4, size=200)
    cm = MT.confusion(true, pred, 4)
    npt.assert_array_equal(cm.counts, brute_force_counts(true, pred, 4))


def test_confusion_is_order_invariant():
    true = rng.integers(0, 3, size=50)
    pred = rng.integers(0, 3, size=50)
    perm = rng.permutation(50)
    assert MT.confusion(true, pred, 3) == MT.confusion(true[perm], pred[perm], 3)


def test_confusion_rejects_mismatched_lengths():
    with pytest.raises(MetricsError):
        MT.confusion([0, 1], [0], 2)


def test_confusion_rejects_out_of_range():
    with pytest.raises(MetricsError):
        MT.confusion([0, 5], [0, 1], 4)


# ---------------------------------------------------------------------------
# accuracy


def test_accuracy_diagonal_is_one():
    assert MT.accuracy(ConfusionMatrix(np.diag([5, 9, 2]), ["a", "b", "c"])) == 1.0


def test_accuracy_matches_binary_definition():
    # start from 50/50 diagonal, flip 10 of class a off-diagonal; the
    # multiclass trace/total equals (TP+TN)/(TP+FP+TN+FN) evaluated directly
    cm = ConfusionMatrix(np.array([[40, 10], [0, 50]]), ["a", "b"])
    m = MT.precision_recall_f1(cm, 0)
    direct = (m.tp + m.tn) / (m.tp + m.fp + m.tn + m.fn)
    assert MT.accuracy(cm) == direct == 0.9


def test_accuracy_zero_diagonal():
    assert MT.accuracy(ConfusionMatrix(np.array([[0, 3], [4, 0]]), ["a", "b"])) == 0.0


def test_accuracy_rejects_empty_matrix():
    with pytest.raises(MetricsError):
        MT.accuracy(ConfusionMatrix(np.zeros((2, 2), dtype=int), ["a", "b"]))


# ---------------------------------------------------------------------------
# published metric triples


def test_f1_from_published_precision_recall_pairs():
    assert abs(MT.f1_score(0.71, 0.97) - 0.82) <= 0.005
    assert abs(MT.f1_score(1.00, 0.32) - 0.48) <= 0.005


def test_recall_from_narrated_test_counts():
    def recall_for(correct, total):
        true = np.zeros(total, dtype=np.int64)
        pred = np.concatenate([np.zeros(correct), np.ones(total - correct)]).astype(np.int64)
        cm = MT.confusion(true, pred, 2)
        return MT.precision_recall_f1(cm, 0).recall

    assert abs(recall_for(143, 155) - 0.9226) <= 1e-4
    assert abs(recall_for(187, 188) - 0.9947) <= 1e-4
    assert abs(recall_for(163, 164) - 0.9939) <= 1e-4


# ---------------------------------------------------------------------------
# one-vs-rest decomposition


def test_class_metrics_identities_exact():
    true = rng.integers(0, 4, size=300)
    pred = rng.integers(0, 4, size=300)
    cm = MT.confusion(true, pred, 4)
    trace = int(np.trace(cm.counts))
    tp_sum = 0
    for cls in range(4):
        m = MT.precision_recall_f1(cm, cls)
        assert m.tp + m.fp + m.fn + m.tn == cm.total
        assert m.tp + m.fn == int(cm.counts[cls].sum())  # row sum
        assert m.tp + m.fp == int(cm.counts[:, cls].sum())  # column sum
        tp_sum += m.tp
    assert tp_sum == trace
    assert MT.accuracy(cm) == trace / cm.total


def test_class_metrics_match_brute_force():
    true = rng.integers(0, 3, size=120)
    pred = rng.integers(0, 3, size=120)
    cm = MT.confusion(true, pred, 3)
    for cls in range(3):
        m = MT.precision_recall_f1(cm, cls)
        tp, fp, fn, tn = brute_force_class_metrics(true, pred, cls)
        assert (m.tp, m.fp, m.fn, m.tn) == (tp, fp, fn, tn)
        assert m.precision == (tp / (tp + fp) if tp + fp else 0.0)
        assert m.recall == (tp / (tp + fn) if tp + fn else 0.0)


def test_zero_division_convention_is_flagged():
    # class 1 never occurs and is never predicted
    cm = ConfusionMatrix(np.array([[5, 0], [0, 0]]), ["a", "b"])
    m = MT.precision_recall_f1(cm, 1)
    assert m.precision == 0.0 and m.recall == 0.0 and m.f1 == 0.0
    assert set(m.undefined) == {"precision", "recall", "f1"}


def test_f1_is_harmonic_mean_between_p_and_r():
    for _ in range(200):
        p, r = rng.random(), rng.random()
        f1 = MT.f1_score(p, r)
        assert min(p, r) - 1e-12 <= f1 <= max(p, r) + 1e-12
        if abs(p - r) > 1e-9:
            assert f1 < max(p, r)
    assert MT.f1_score(0.37, 0.37) == pytest.approx(0.37)


def test_metrics_invariant_under_class_permutation():
    true = rng.integers(0, 4, size=150)
    pred = rng.integers(0, 4, size=150)
    cm = MT.confusion(true, pred, CLASS_NAMES)
    perm = np.array([2, 0, 3, 1])
    inv = np.argsort(perm)
    permuted_cm = MT.confusion(inv[true], inv[pred], [CLASS_NAMES[i] for i in perm])
    assert MT.accuracy(cm) == MT.accuracy(permuted_cm)
    for cls in range(4):
        a = MT.precision_recall_f1(cm, cls)
        b = MT.precision_recall_f1(permuted_cm, int(inv[cls]))
        assert (a.tp, a.fp, a.fn, a.tn) == (b.tp, b.fp, b.fn, b.tn)
        assert a.class_name == b.class_name


# ---------------------------------------------------------------------------
# reports


def test_report_perfect_classifier():
    labels = rng.integers(0, 4, size=40)
    cm = MT.confusion(labels, labels, CLASS_NAMES)
    rep = MT.report(cm, "perfect")
    assert rep.accuracy == 1.0
    assert rep.macro_precision == rep.macro_recall == rep.macro_f1 == 1.0
    assert all(m.precision == m.recall == m.f1 == 1.0 for m in rep.per_class)


def test_report_text_roundtrip_is_exact():
    true = rng.integers(0, 4, size=97)
    pred = rng.integers(0, 4, size=97)
    rep = MT.report(MT.confusion(true, pred, CLASS_NAMES), "vit")
    parsed = MT.Report.from_text(rep.to_text())
    assert parsed == rep


def test_confusion_csv_roundtrip():
    true = rng.integers(0, 4, size=60)
    pred = rng.integers(0, 4, size=60)
    cm = MT.confusion(true, pred, CLASS_NAMES)
    assert ConfusionMatrix.from_csv_text(cm.to_csv_text()) == cm


def test_compare_renders_metric_row_groups():
    a = MT.report(MT.confusion([0, 1, 2, 3], [0, 1, 2, 3], CLASS_NAMES), "densenet201")
    b = MT.report(MT.confusion([0, 1, 2, 3], [0, 1, 2, 2], CLASS_NAMES), "vit")
    table = MT.compare([a, b])
    assert table.model_labels == ["densenet201", "vit"]
    metrics_in_order = [row[0] for row in table.rows]
    assert metrics_in_order == ["accuracy"] + ["precision"] * 4 + ["recall"] * 4 + ["f1"] * 4
    text = table.to_text()
    assert "densenet201" in text and "vit" in text
    assert text.splitlines()[0].startswith("metric")


def test_compare_rejects_mismatched_class_names():
    a = MT.report(MT.confusion([0, 1], [0, 1], ["x", "y"]), "a")
    b = MT.report(MT.confusion([0, 1], [0, 1], ["x", "z"]), "b")
    with pytest.raises(MetricsError):
        MT.compare([a, b])
