import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drasmil import _pykernels, kernels

from oracles import propagate_bruteforce

BACKENDS = [kernels.available_backends()[name] for name in kernels.available_backends()]


def test_compiled_backend_is_built():
    # the extension is optional at runtime, but this checkout builds it
    assert "cython" in kernels.available_backends()
    assert kernels.BACKEND == "cython"


def _grid(w, h):
    rows, cols = np.divmod(np.arange(w * h), w)
    return np.stack([cols, rows], 1).astype(np.int64)


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.NAME)
def test_knn_center_of_3x3(impl):
    coords = _grid(3, 3)
    sampled = np.zeros(9, np.uint8)
    sampled[4] = 1
    w = np.zeros(9)
    impl.knn_propagate(coords, w, sampled, np.array([4]), np.array([1.0]), 4)
    assert w.reshape(3, 3).tolist() == [[0, 1, 0], [1, 0, 1], [0, 1, 0]]


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.NAME)
def test_knn_tie_break_by_index(impl):
    coords = _grid(3, 3)
    sampled = np.zeros(9, np.uint8)
    sampled[4] = 1
    w = np.zeros(9)
    # four edge neighbours tie at distance 1; the two lowest indices win
    impl.knn_propagate(coords, w, sampled, np.array([4]), np.array([0.5]), 2)
    assert np.flatnonzero(w).tolist() == [1, 3]


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.NAME)
def test_knn_rejects_bad_k(impl):
    with pytest.raises(ValueError):
        impl.knn_propagate(_grid(2, 2), np.zeros(4), np.zeros(4, np.uint8),
                           np.array([0]), np.array([1.0]), 0)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 40), st.integers(0, 2**31), st.booleans())
def test_knn_matches_bruteforce(w, h, k, seed, sparse):
    rng = np.random.default_rng(seed)
    coords = _grid(w, h)
    if sparse:
        keep = rng.random(len(coords)) < 0.6
        keep[0] = True
        coords = coords[keep]
    K = len(coords)
    sampled = (rng.random(K) < 0.3).astype(np.uint8)
    n_src = int(rng.integers(1, 4))
    sources = rng.integers(0, K, n_src)
    sampled[sources] = 1
    values = rng.random(n_src)
    start = rng.random(K) * 0.5
    start[sampled == 1] = 0
    expected = propagate_bruteforce(coords.tolist(), start, sampled, sources, values, k)
    for impl in BACKENDS:
        got = start.copy()
        impl.knn_propagate(coords, got, sampled, sources, values, k)
        got[sampled == 1] = 0
        assert np.array_equal(got, expected), impl.NAME


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=1, max_size=30), st.integers(0, 2**31), st.integers(0, 40))
def test_weighted_draw_backends_agree(weights, seed, n):
    u = np.random.default_rng(seed).random(n)
    results = []
    for impl in BACKENDS:
        w = np.array(weights)
        results.append(impl.weighted_draw(w, u))
    for r in results[1:]:
        assert np.array_equal(r, results[0])
    picks = results[0]
    assert len(set(picks.tolist())) == len(picks)
    assert len(picks) == min(n, int(np.count_nonzero(weights)))
    assert all(weights[j] > 0 for j in picks)


def test_weighted_draw_one_hot():
    for impl in BACKENDS:
        assert impl.weighted_draw(np.array([0.0, 0.0, 2.0, 0.0]), np.array([0.999])).tolist() == [2]


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(1, 5), st.integers(0, 2**31))
def test_bootstrap_backends_agree(S, R, seed):
    rng = np.random.default_rng(seed)
    probs = np.round(rng.random((S, R)), 1)  # coarse values force ties
    labels = np.zeros(S, np.int8)
    labels[rng.permutation(S)[: int(rng.integers(1, S))]] = 1
    choice = rng.integers(0, R, (20, S)).astype(np.int64)
    outs = [impl.bootstrap_epochs(probs, labels, choice, 0.5) for impl in BACKENDS]
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])


def test_pure_python_env_switch(monkeypatch):
    import importlib

    monkeypatch.setenv("DRASMIL_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
        assert mod.knn_propagate is _pykernels.knn_propagate
    finally:
        monkeypatch.delenv("DRASMIL_PURE_PYTHON")
        importlib.reload(kernels)
