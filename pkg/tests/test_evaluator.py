import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sceneseg import evaluator as ev
from sceneseg.errors import ContractError, InputError


def test_confusion_counts():
    cm = ev.confusion(np.array([0, 0, 1, 1]), np.array([0, 0, 0, 1]), 2, 2)
    assert cm.counts.tolist() == [[2, 0], [1, 1]]


def test_confusion_bijective_relabel():
    ref = np.array([0, 1, 2, 2, 1, 0])
    cm = ev.confusion((ref + 1) % 3, ref, 3, 3)
    assert ((cm.counts > 0).sum(axis=1) == 1).all()


def test_confusion_all_ignored():
    cm = ev.confusion(np.zeros(5, int), np.full(5, ev.IGNORE), 2, 3)
    assert not cm.counts.any() and cm.ignored == 5 == cm.total


def test_confusion_size_mismatch():
    with pytest.raises(InputError):
        ev.confusion(np.zeros(3, int), np.zeros(4, int))


def test_majority_map():
    assert ev.majority_map(np.array([[90, 10], [5, 95]])) == {0: 0, 1: 1}
    assert ev.majority_map(np.array([[50, 50]])) == {0: 0}
    assert ev.majority_map(np.array([[0, 0, 3], [1, 0, 5], [0, 2, 9]])) == {0: 2, 1: 2, 2: 2}


def test_scores_formula():
    cc = np.array([[8, 2], [2, 0]])  # class 0: TP 8, FP 2, FN 2
    f1, iou = ev.scores(cc)
    assert f1[0] == 0.8
    assert iou[0] == 8 / 12
    assert round(iou[0], 4) == 0.6667


def test_scores_degenerate_class():
    f1, iou = ev.scores(np.array([[5, 3], [0, 0]]))
    assert f1[1] == 0 and iou[1] == 0


def test_perfect_prediction():
    ref = np.array([[0, 1], [2, 1]])
    rep = ev.evaluate([ref + 3], [ref], 6, ["a", "b", "c"])
    assert rep.macro_f1 == rep.macro_iou == 1.0
    assert rep.mapping == {0: ev.NULL_CLASS, 1: ev.NULL_CLASS, 2: ev.NULL_CLASS, 3: 0, 4: 1, 5: 2}


def test_single_cluster_on_two_classes():
    rep = ev.evaluate([np.zeros(4, int)], [np.array([0, 0, 0, 1])], 1, ["a", "b"])
    assert rep.f1[1] == 0
    assert rep.macro_f1 == pytest.approx((6 / 7 + 0) / 2)
    assert rep.to_json()["classes"] == ["a", "b"]


def test_mapping_gap_is_contract_error():
    cm = ev.confusion(np.array([0, 1]), np.array([0, 1]), 2, 2)
    with pytest.raises(ContractError):
        ev.class_confusion(cm, {0: 0})


def test_evaluate_pools_tiles():
    a = ev.evaluate([np.array([0, 0]), np.array([1, 1])], [np.array([0, 0]), np.array([1, 1])], 2, ["x", "y"])
    assert a.macro_f1 == 1.0 and len(a.per_tile) == 2
    assert set(a.to_json()) >= {"per_class", "macro_f1", "macro_iou", "mapping", "per_tile"}


def test_binarize():
    assert ev.binarize(np.array([1, 3, 1]), 1).tolist() == [1, 0, 1]
    assert ev.binarize(np.array([0, 0]), 1).tolist() == [0, 0]
    assert ev.binarize(np.array([0, 1, 2]), 1, {0: 1, 1: 3, 2: None}).tolist() == [1, 0, 0]


def _report(f1):
    return ev.MetricsReport(["a"], np.array([f1]), np.array([f1 / 2]), np.array([True]), f1, f1 / 2)


def test_average_runs():
    avg = ev.average_runs([_report(0.4), _report(0.5), _report(0.6)])
    assert avg.macro_f1 == pytest.approx(0.5)
    assert ev.average_runs([_report(0.3)]).macro_f1 == 0.3
    same = ev.average_runs([_report(0.7), _report(0.7)])
    assert same.macro_f1 == 0.7 and same.f1.tolist() == [0.7]
    with pytest.raises(InputError):
        ev.average_runs([])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_iou_never_exceeds_f1(M, seed):
    cc = np.random.default_rng(seed).integers(0, 50, (M, M))
    f1, iou = ev.scores(cc)
    assert np.all(iou <= f1 + 1e-15)
    assert np.all((0 <= iou) & (f1 <= 1))
