import numpy as np
import pytest

from acfilter import _pykernels as py

cy = pytest.importorskip("acfilter._kernels")


def _csr(rng, n, n_rows, max_k):
    k = rng.integers(1, max_k + 1, size=n)
    ptr = np.concatenate([[0], np.cumsum(k)]).astype(np.int64)
    rows = rng.integers(0, n_rows, size=ptr[-1]).astype(np.int64)
    w = rng.choice([1.0, 0.5, 1 / 3], size=ptr[-1])
    return ptr, rows, w


def _problem(seed, n=400, rows=50, D=6):
    rng = np.random.default_rng(seed)
    V = rng.normal(0, 0.3, size=(rows, D))
    G = np.abs(rng.normal(0, 0.1, size=(rows, D)))
    u = _csr(rng, n, rows, 3)
    a = _csr(rng, n, rows, 2)
    order = rng.permutation(n).astype(np.int64)
    labels = rng.uniform(size=n)
    labels[::3] = np.round(labels[::3])
    return V, G, u, a, order, labels


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("update_vectors", [True, False])
def test_train_events_bit_identical(seed, update_vectors):
    V, G, u, a, order, labels = _problem(seed)
    outs = []
    for impl in (cy, py):
        V1, G1 = V.copy(), G.copy()
        state = np.array([0.2, 0.5])
        pred = np.zeros(len(order))
        loss = impl.train_events(V1, G1, state, *u, *a, order, labels, 0.1, 1e-8, 1e-4, update_vectors, pred)
        outs.append((V1, G1, state, pred, loss))
    for x, y in zip(*outs):
        assert np.array_equal(np.asarray(x), np.asarray(y))


def test_predict_events_bit_identical():
    V, _, u, a, order, _ = _problem(7)
    outs = []
    for impl in (cy, py):
        out = np.zeros(len(order))
        impl.predict_events(V, -0.7, *u, *a, out)
        outs.append(out)
    assert np.array_equal(*outs)


def test_event_gradient_bit_identical():
    V, _, _, _, _, _ = _problem(3)
    urows = np.array([1, 4, 9], dtype=np.int64)
    uw = np.array([1.0, 0.5, 0.5])
    arows = np.array([2, 3], dtype=np.int64)
    aw = np.array([1.0, 1.0])
    outs = []
    for impl in (cy, py):
        gu, ga = np.zeros((3, V.shape[1])), np.zeros((2, V.shape[1]))
        p, g = impl.event_gradient(V, 0.3, urows, uw, arows, aw, 0.4, 1e-3, gu, ga)
        outs.append((p, g, gu, ga))
    for x, y in zip(*outs):
        assert np.array_equal(np.asarray(x), np.asarray(y))


def test_xent_sum_bit_identical_including_clamps():
    p = np.array([0.0, 1.0, 1e-15, 0.3, 0.999999, 0.5])
    lab = np.array([1.0, 0.0, 0.0, 0.3, 1.0, 0.25])
    assert cy.xent_sum(p, lab) == py.xent_sum(p, lab)
    assert np.isfinite(cy.xent_sum(p, lab))


def test_backend_selection_env(monkeypatch):
    import importlib

    import acfilter.kernels as k

    monkeypatch.setenv("ACFILTER_PURE_PYTHON", "1")
    try:
        assert importlib.reload(k).BACKEND == "python"
    finally:
        monkeypatch.delenv("ACFILTER_PURE_PYTHON")
        importlib.reload(k)
    assert k.BACKEND == "cython"
