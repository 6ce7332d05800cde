import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drasmil import evaluation as ev
from drasmil.evaluation import PredictionTable
from drasmil.slide import Bag

from oracles import enumerate_epochs, pairwise_auc


def test_auc_basics():
    assert ev.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert ev.auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    scores, labels = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    assert ev.auc(scores, labels) == pairwise_auc(scores, labels) == 0.75
    with pytest.raises(ev.UndefinedMetricError):
        ev.auc([0.2, 0.3], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**31))
def test_auc_matches_pairwise(n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    scores = np.round(rng.random(n), int(rng.integers(1, 4)))
    assert ev.auc(scores, labels) == pairwise_auc(scores, labels)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_auc_monotone_invariant(seed):
    rng = np.random.default_rng(seed)
    s = rng.random(20)
    y = np.r_[0, 1, rng.integers(0, 2, 18)]
    assert ev.auc(s, y) == ev.auc(np.exp(3 * s) - 7, y) == ev.auc(s ** 3, y)


def test_threshold_fixtures():
    assert ev.threshold_metrics([0.9, 0.1, 0.8], [1, 0, 1]) == (1.0, 1.0, 1.0)
    assert ev.threshold_metrics([0.1] * 4, [0, 0, 0, 1]) == (0.75, 0.5, 0.0)
    # tp=2, tn=1, fp=1, fn=1
    acc, bal, f1 = ev.threshold_metrics([0.9, 0.7, 0.2, 0.6, 0.3], [1, 1, 1, 0, 0])
    assert acc == pytest.approx(3 / 5)
    assert bal == pytest.approx((2 / 3 + 1 / 2) / 2)
    assert f1 == pytest.approx(4 / 6)
    # exactly at the threshold counts as negative
    assert ev.confusion([0.5], [1]) == (0, 0, 0, 1)
    with pytest.raises(ValueError):
        ev.threshold_metrics([], [])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_balanced_accuracy_class_swap(seed):
    rng = np.random.default_rng(seed)
    s = rng.random(15)
    y = np.r_[0, 1, rng.integers(0, 2, 13)]
    a = ev.threshold_metrics(s, y)
    b = ev.threshold_metrics(1 - s, 1 - y)
    # s > 0.5 flips to 1 - s < 0.5; exact 0.5 does not occur with continuous scores
    assert a[1] == pytest.approx(b[1])
    assert all(0 <= v <= 1 for v in a)


def test_accuracy_equals_balanced_when_symmetric():
    s = [0.9, 0.9, 0.2, 0.1, 0.1, 0.8]
    y = [1, 1, 1, 0, 0, 0]
    acc, bal, _ = ev.threshold_metrics(s, y)
    assert acc == bal == pytest.approx(2 / 3)


# -- folds ----------------------------------------------------------------------

def _patients(n_neg, n_pos, slides=1):
    bags = []
    for i in range(n_neg + n_pos):
        for s in range(slides):
            bags.append(Bag(f"s{i}_{s}", f"p{i:03d}", int(i >= n_neg), [[0, 0]], [[0.0]]))
    return bags


def test_nine_patients():
    folds = ev.stratified_folds(_patients(3, 6), 3, seed=0)
    assert sorted(np.bincount(list(folds.values())).tolist()) == [3, 3, 3]
    pos = [folds[f"p{i:03d}"] for i in range(3, 9)]
    assert np.bincount(pos).tolist() == [2, 2, 2]


@pytest.mark.parametrize("seed", range(20))
def test_147_patient_cohort_folds(seed):
    bags = _patients(92, 55, slides=2)
    folds = ev.stratified_folds(bags, 3, seed)
    assert np.bincount(list(folds.values())).tolist() == [49, 49, 49]
    minority = np.bincount([folds[f"p{i:03d}"] for i in range(92, 147)])
    majority = np.bincount([folds[f"p{i:03d}"] for i in range(92)])
    assert set(minority.tolist()) <= {18, 19}
    assert set(majority.tolist()) <= {30, 31}


def test_patient_slides_never_split():
    bags = _patients(10, 12, slides=3)
    folds = ev.stratified_folds(bags, 3, 5)
    for k in range(3):
        train, val, test = ev.split_bags(bags, folds, k)
        ids = [{b.patient_id for b in part} for part in (train, val, test)]
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
        assert len(train) + len(val) + len(test) == len(bags)


def test_fold_roles_cover():
    tests = [ev.fold_roles(k)[0] for k in range(3)]
    vals = [ev.fold_roles(k)[1] for k in range(3)]
    assert sorted(tests) == sorted(vals) == [0, 1, 2]


def test_fold_errors():
    with pytest.raises(ValueError):
        ev.stratified_folds(_patients(2, 5), 3)
    bad = _patients(3, 3) + [Bag("x", "p000", 1, [[0, 0]], [[0.0]])]
    with pytest.raises(ValueError):
        ev.stratified_folds(bad, 3)


# -- bootstrap ------------------------------------------------------------------

def _table(probs, labels):
    n = len(labels)
    return PredictionTable([f"s{i}" for i in range(n)], [f"p{i}" for i in range(n)], labels, probs)


def test_identical_columns_zero_std():
    rng = np.random.default_rng(0)
    col = rng.random((30, 1))
    labels = np.r_[np.zeros(15, int), np.ones(15, int)]
    rep = ev.bootstrap(_table(np.repeat(col, 50, 1), labels), epochs=5000, seed=1)
    assert all(rep.std[m] == 0.0 for m in ev.METRICS)
    single = ev.metrics_report(col[:, 0], labels)
    assert rep.mean["auc"] == single.auc and rep.mean["f1"] == single.f1


def test_two_slide_exhaustive():
    probs = np.array([[0.3, 0.7], [0.4, 0.6]])
    labels = np.array([0, 1])
    enum = enumerate_epochs(probs, labels)
    rep = ev.bootstrap(_table(probs, labels), epochs=20_000, seed=0)
    for j, m in enumerate(ev.METRICS):
        assert enum[:, j].min() <= rep.mean[m] <= enum[:, j].max()
        assert abs(rep.mean[m] - enum[:, j].mean()) < 0.02


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_bootstrap_mean_within_enumerated_range(seed):
    rng = np.random.default_rng(seed)
    probs = rng.random((4, 3))
    labels = np.array([0, 1, 0, 1])
    enum = enumerate_epochs(probs, labels)
    per = ev.bootstrap_epochs(_table(probs, labels), epochs=300, seed=seed)
    for j in range(4):
        # every bootstrap epoch is one of the enumerated selections
        assert np.isin(np.round(per[:, j], 12), np.round(enum[:, j], 12)).all()


def test_bootstrap_determinism_and_chunking():
    rng = np.random.default_rng(3)
    t = _table(rng.random((10, 5)), np.r_[np.zeros(5, int), np.ones(5, int)])
    a = ev.bootstrap_epochs(t, 10_000, seed=4)
    b = ev.bootstrap_epochs(t, 10_000, seed=4)
    assert np.array_equal(a, b)
    # a prefix run shares the first chunk exactly
    assert np.array_equal(ev.bootstrap_epochs(t, 100, seed=4), a[:100])
    assert a.shape == (10_000, 4)


def test_bootstrap_std_stable_across_seeds():
    rng = np.random.default_rng(8)
    labels = np.r_[np.zeros(20, int), np.ones(20, int)]
    probs = np.clip(labels[:, None] * 0.3 + 0.35 + rng.normal(0, 0.2, (40, 50)), 0, 1)
    t = _table(probs, labels)
    stds = [ev.bootstrap(t, 100_000, seed=s).std["auc"] for s in range(3)]
    assert max(stds) / min(stds) - 1 < 0.05


# -- prediction table -------------------------------------------------------------

def test_prediction_table_csv(tmp_path):
    t = _table(np.array([[0.1, 0.2], [1.0, 0.0]]), [0, 1])
    t.write_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "slide_id,patient_id,label,repeat_0,repeat_1"
    back = PredictionTable.read_csv(tmp_path / "p.csv")
    assert np.array_equal(back.probs, t.probs) and back.slide_ids == t.slide_ids
    with pytest.raises(ValueError):
        _table(np.array([[1.2]]), [0])


def test_report_json(tmp_path):
    rep = ev.bootstrap(_table(np.array([[0.2, 0.3], [0.8, 0.6]]), [0, 1]), epochs=10)
    ev.write_json(rep.as_dict(), tmp_path / "b.json")
    text = (tmp_path / "b.json").read_text()
    assert text.endswith("\n") and '"epochs": 10' in text
    assert math.isclose(rep.mean["auc"], 1.0)
