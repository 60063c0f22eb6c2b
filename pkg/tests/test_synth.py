import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsdistill import synth
from tsdistill.rng import stream
from tsdistill.synth import DagSpec, KernelSpec, MeanSpec


def _lag1(x):
    x = x - x.mean()
    return float((x[:-1] * x[1:]).sum() / (x * x).sum())


def test_smallest_dag_has_one_root_and_one_child():
    for i in range(200):
        dag = synth.sample_dag(stream(0, "dag2", i), 2)
        assert dag.n_nodes == 2
        assert len(dag.roots) == 1
        child = 1 - dag.roots[0]
        assert dag.parents[child] == dag.roots


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 15))
def test_dag_invariants(seed, max_nodes):
    dag = synth.sample_dag(np.random.default_rng(seed), max_nodes)
    assert 2 <= dag.n_nodes <= max_nodes
    order = dag.topological_order()
    position = {v: i for i, v in enumerate(order)}
    for v in range(dag.n_nodes):
        assert all(position[u] < position[v] for u in dag.parents[v])
        assert len(dag.weights[v]) == len(dag.parents[v])
        assert (dag.nonlinearity[v] is None) == (not dag.parents[v])
    assert set(dag.kernels) == set(dag.roots) == set(dag.means)
    assert dag.observed and set(dag.observed) <= set(range(dag.n_nodes))
    for k in dag.kernels.values():
        assert k.depth <= 3 and k.n_leaves <= 4


def test_node_count_uniform_and_edge_weights_centred():
    rng = np.random.default_rng(1)
    counts, weights = [], []
    for _ in range(1000):
        dag = synth.sample_dag(rng, 12)
        counts.append(dag.n_nodes)
        weights.extend(w for ws in dag.weights for w in ws)
    assert set(counts) == set(range(2, 13))
    w = np.asarray(weights)
    assert abs(w.mean()) < 3 * 1.0 / np.sqrt(len(w))


def test_white_noise_gp_is_uncorrelated():
    T = 256
    kernel = KernelSpec("white", {"variance": 1.0})
    rng = np.random.default_rng(2)
    r = [_lag1(synth.sample_gp(rng, kernel, MeanSpec((0.0,)), T)) for _ in range(100)]
    assert abs(np.mean(r)) < 4 / np.sqrt(T)


def test_long_lengthscale_rbf_is_smooth():
    kernel = KernelSpec("rbf", {"variance": 1.0, "lengthscale": 0.5})
    rng = np.random.default_rng(3)
    r = [_lag1(synth.sample_gp(rng, kernel, None, 128)) for _ in range(100)]
    assert np.mean(r) > 0.9


def test_zero_variance_kernel_returns_the_mean():
    kernel = KernelSpec("rbf", {"variance": 0.0, "lengthscale": 0.1})
    out = synth.sample_gp(np.random.default_rng(0), kernel, MeanSpec((0.0, 1.0)), 64)
    np.testing.assert_array_equal(out, synth.time_grid(64))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_random_kernels_are_symmetric_and_sampleable(seed):
    rng = np.random.default_rng(seed)
    kernel = synth.sample_kernel(rng)
    K = kernel(synth.time_grid(64), synth.time_grid(64))
    assert np.max(np.abs(K - K.T)) <= 1e-9
    try:
        x = synth.sample_gp(rng, kernel, synth.sample_mean(rng), 64)
    except synth.KernelRejected:
        return
    assert np.all(np.isfinite(x))


def _two_node(weight, bias, nonlin):
    return DagSpec(2, [[], [0]], [[], [weight]], np.array([0.0, bias]), [None, nonlin],
                   {0: KernelSpec("white", {"variance": 1.0})}, {0: MeanSpec()}, [1])


def test_propagate_pass_through_and_bias_only():
    parent = np.random.default_rng(0).standard_normal(32)
    out = synth.propagate(_two_node(1.0, 0.0, "identity"), {0: parent})
    np.testing.assert_array_equal(out[1], parent)
    out = synth.propagate(_two_node(0.0, 0.7, "tanh"), {0: parent})
    np.testing.assert_allclose(out[1], np.tanh(0.7))


def _recursive_value(dag, roots, v):
    if not dag.parents[v]:
        return roots[v]
    acc = dag.biases[v] + sum(w * _recursive_value(dag, roots, u) for u, w in zip(dag.parents[v], dag.weights[v]))
    f = {"identity": lambda x: x, "tanh": np.tanh, "sin": np.sin,
         "softplus": lambda x: np.log1p(np.exp(x)), "silu": lambda x: x / (1 + np.exp(-x))}
    return f[dag.nonlinearity[v]](acc)


def test_propagate_matches_recursive_evaluation():
    rng = np.random.default_rng(4)
    checked = 0
    while checked < 20:
        dag = synth.sample_dag(rng, 5)
        if dag.n_nodes != 5:
            continue
        roots = {v: rng.standard_normal(16) for v in dag.roots}
        out = synth.propagate(dag, roots)
        for v in range(5):
            np.testing.assert_allclose(out[v], _recursive_value(dag, roots, v), rtol=1e-12, atol=1e-12)
        checked += 1


def test_propagate_rejects_non_finite():
    dag = _two_node(1.0, 0.0, "identity")
    with pytest.raises(synth.SampleRejected):
        synth.propagate(dag, {0: np.array([1.0, np.inf])})


def test_corpus_standardised_and_bounded():
    corpus = synth.generate_corpus(5, 1000, 512, max_nodes=6)
    d = corpus.data.astype(np.float64)
    assert corpus.data.shape == (1000, 512) and corpus.data.dtype == np.float32
    assert np.all(np.isfinite(d)) and np.max(np.abs(d)) <= 50
    assert np.max(np.abs(d.mean(axis=1))) < 1e-5
    assert np.max(np.abs(d.std(axis=1) - 1)) < 1e-4


def test_corpus_single_sample_and_determinism():
    one = synth.generate_corpus(0, 1, 64)
    assert one.data.shape == (1, 64) and np.all(np.isfinite(one.data))
    a = synth.generate_corpus(11, 40, 64, max_nodes=6)
    b = synth.generate_corpus(11, 40, 64, max_nodes=6)
    np.testing.assert_array_equal(a.data, b.data)


def test_corpus_independent_of_worker_count():
    a = synth.generate_corpus(3, 30, 64, max_nodes=6, workers=1)
    b = synth.generate_corpus(3, 30, 64, max_nodes=6, workers=3)
    np.testing.assert_array_equal(a.data, b.data)


def test_corpus_rejects_bad_length():
    with pytest.raises(ValueError, match="multiple of 32"):
        synth.generate_corpus(0, 1, 100)


def test_utsd_layout_and_round_trip(tmp_path):
    corpus = synth.generate_corpus(0, 3, 64, max_nodes=4)
    path = tmp_path / "c.utsd"
    synth.write_utsd(path, corpus)
    blob = path.read_bytes()
    assert blob[:4] == b"UTSD"
    assert struct.unpack("<III", blob[4:16]) == (1, 3, 64)
    assert len(blob) == 16 + 4 * 3 * 64
    back = synth.read_utsd(path)
    np.testing.assert_array_equal(back.data, corpus.data)
    synth.write_utsd(tmp_path / "again.utsd", back)
    assert hashlib.sha256((tmp_path / "again.utsd").read_bytes()).digest() == hashlib.sha256(blob).digest()


def test_utsd_rejects_truncated_file(tmp_path):
    path = tmp_path / "bad.utsd"
    synth.write_utsd(path, synth.generate_corpus(0, 2, 32, max_nodes=3))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError, match="expected"):
        synth.read_utsd(path)
