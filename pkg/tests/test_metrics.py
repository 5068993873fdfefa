"""Metrics against independently coded brute-force implementations."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osteograde.errors import DataError
from osteograde.metrics import (
    ConfusionMatrix,
    accuracy,
    confusion,
    mae,
    per_class_accuracy,
    predict_grade,
    qwk,
    read_confusion_csv,
    report_from_labels,
    write_confusion_csv,
)

RNG = np.random.default_rng(555)


# -- brute-force oracles (loops, no shared code with the implementation) --------


def oracle_confusion(true, pred, k=5):
    counts = [[0] * k for _ in range(k)]
    for t, p in zip(true, pred):
        counts[p][t] += 1
    return counts


def oracle_accuracy(true, pred):
    return sum(1 for t, p in zip(true, pred) if t == p) / len(true)


def oracle_mae(true, pred):
    return sum(abs(t - p) for t, p in zip(true, pred)) / len(true)


def oracle_qwk(true, pred, k=5):
    n = len(true)
    o = [[0.0] * k for _ in range(k)]
    for t, p in zip(true, pred):
        o[p][t] += 1
    pred_hist = [sum(o[p][t] for t in range(k)) for p in range(k)]
    true_hist = [sum(o[p][t] for p in range(k)) for t in range(k)]
    num = 0.0
    den = 0.0
    for p in range(k):
        for t in range(k):
            w = (p - t) ** 2 / (k - 1) ** 2
            e = pred_hist[p] * true_hist[t] / n
            num += w * o[p][t]
            den += w * e
    return 1.0 - num / den


def random_labels(n, rng=RNG):
    return rng.integers(0, 5, size=n).tolist(), rng.integers(0, 5, size=n).tolist()


# -- confusion ---------------------------------------------------------------


def test_confusion_single_entry():
    cm = confusion([0], [0])
    arr = cm.as_array()
    assert arr[0, 0] == 1 and arr.sum() == 1


def test_confusion_marginals_reproduce_class_counts():
    true, pred = random_labels(97)
    cm = confusion(true, pred).as_array()
    for g in range(5):
        assert cm[:, g].sum() == true.count(g)
        assert cm[g, :].sum() == pred.count(g)


def test_confusion_matches_oracle():
    true, pred = random_labels(300)
    assert confusion(true, pred).counts == tuple(map(tuple, oracle_confusion(true, pred)))


def test_confusion_rejects_bad_input():
    with pytest.raises(DataError):
        confusion([0, 1], [0])
    with pytest.raises(DataError):
        confusion([0, 9], [0, 0])
    with pytest.raises(DataError):
        confusion([], [])


def test_confusion_total_matches_test_split_size():
    # a 1656-sample evaluation accumulates exactly 1656 counts
    rng = np.random.default_rng(0)
    true = rng.integers(0, 5, size=1656)
    pred = rng.integers(0, 5, size=1656)
    assert confusion(true, pred).total == 1656


# -- accuracy ------------------------------------------------------------------


def test_accuracy_perfect_and_zero():
    true, _ = random_labels(40)
    assert accuracy(confusion(true, true)) == 1.0
    wrong = [(t + 1) % 5 for t in true]
    assert accuracy(confusion(true, wrong)) == 0.0


def test_accuracy_half():
    cm = ConfusionMatrix(((2, 0, 0, 0, 2), (0, 0, 0, 0, 0), (0,) * 5, (0,) * 5, (0,) * 5))
    assert accuracy(cm) == 0.5


def test_accuracy_empty_matrix_rejected():
    with pytest.raises(DataError):
        accuracy(ConfusionMatrix(tuple((0,) * 5 for _ in range(5))))


# -- mae -------------------------------------------------------------------------


def test_mae_cases():
    assert mae([1, 2, 3], [1, 2, 3]) == 0.0
    assert mae([0, 1, 2], [0, 2, 4]) == pytest.approx(1.0)
    assert mae([0] * 10, [4] * 10) == 4.0


# -- qwk -------------------------------------------------------------------------


def test_qwk_perfect_agreement():
    true, _ = random_labels(60)
    assert qwk(confusion(true, true)) == pytest.approx(1.0)


def test_qwk_antidiagonal_two_samples():
    cm = confusion([0, 4], [4, 0])
    assert qwk(cm) == pytest.approx(-1.0)


def test_qwk_matches_bruteforce_on_random_vectors():
    for trial in range(20):
        rng = np.random.default_rng(trial)
        true = rng.integers(0, 5, size=200).tolist()
        pred = rng.integers(0, 5, size=200).tolist()
        assert qwk(confusion(true, pred)) == pytest.approx(oracle_qwk(true, pred), abs=1e-9)


def test_qwk_undefined_when_both_raters_constant_same_grade():
    with pytest.raises(DataError):
        qwk(confusion([2, 2, 2], [2, 2, 2]))


def test_qwk_transpose_symmetric():
    true, pred = random_labels(150)
    cm = confusion(true, pred)
    transposed = ConfusionMatrix(tuple(map(tuple, cm.as_array().T)))
    assert qwk(cm) == pytest.approx(qwk(transposed), abs=1e-12)


def test_qwk_one_iff_diagonal():
    true, pred = random_labels(80)
    cm = confusion(true, pred)
    arr = cm.as_array()
    if np.any(arr - np.diag(np.diag(arr))):
        assert qwk(cm) < 1.0


def test_qwk_decreases_more_for_distant_errors():
    base = [g for g in range(5) for _ in range(20)]
    kappa_clean = qwk(confusion(base, base))
    # perturb one grade-2 sample to grade 3 vs grade 0 prediction
    near = list(base)
    near[40] = 3  # |p - t| = 1
    far = list(base)
    far[40] = 0  # |p - t| = 2 against true grade 2
    k_near = qwk(confusion(base, near))
    k_far = qwk(confusion(base, far))
    assert k_near < kappa_clean
    assert k_far < k_near


# -- report + csv ------------------------------------------------------------------


def test_predict_grade_tie_breaks_low():
    assert predict_grade([0.3, 0.3, 0.2, 0.1, 0.1]) == 0
    assert predict_grade([0.1, 0.5, 0.2, 0.1, 0.1]) == 1


def test_report_bundle_and_per_class():
    true = [0, 0, 1, 2, 3, 4, 4]
    pred = [0, 1, 1, 2, 2, 4, 4]
    report, cm = report_from_labels(true, pred)
    assert report.accuracy == pytest.approx(oracle_accuracy(true, pred))
    assert report.mae == pytest.approx(oracle_mae(true, pred))
    assert report.qwk == pytest.approx(oracle_qwk(true, pred))
    pca = per_class_accuracy(cm)
    assert pca[0] == pytest.approx(0.5)
    assert pca[4] == pytest.approx(1.0)


def test_confusion_csv_roundtrip(tmp_path):
    true, pred = random_labels(64)
    cm = confusion(true, pred)
    path = tmp_path / "cm.csv"
    write_confusion_csv(cm, path)
    assert read_confusion_csv(path).counts == cm.counts


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=2, max_size=60), st.randoms())
def test_metrics_invariant_to_sample_order(pairs, shuffler):
    true = [p[0] for p in pairs]
    pred = [p[1] for p in pairs]
    shuffled = list(pairs)
    shuffler.shuffle(shuffled)
    true2 = [p[0] for p in shuffled]
    pred2 = [p[1] for p in shuffled]
    assert accuracy(confusion(true, pred)) == accuracy(confusion(true2, pred2))
    assert mae(true, pred) == mae(true2, pred2)
    cm1, cm2 = confusion(true, pred), confusion(true2, pred2)
    assert cm1.counts == cm2.counts
