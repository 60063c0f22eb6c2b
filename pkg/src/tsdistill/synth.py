"""Synthetic pretraining corpus drawn from random causal DAGs.

Root nodes are Gaussian-process draws with a randomly composed kernel and a
non-stationary polynomial mean; every other node applies a random
nonlinearity to a weighted sum of its parents.
"""

from __future__ import annotations

import concurrent.futures
import graphlib
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

log = logging.getLogger(__name__)

# Generator constants. None of these are pinned down by the method description;
# they are kept together so ablations only touch this block.
KERNEL_KINDS = ("rbf", "periodic", "linear", "rq", "white")
MAX_KERNEL_LEAVES = 4
LENGTHSCALE_RANGE = (0.02, 1.0)  # log-uniform, grid normalised to [0, 1]
PERIOD_RANGE = (0.02, 0.5)
VARIANCE_RANGE = (0.1, 1.0)
WHITE_VARIANCE_RANGE = (1e-3, 1e-1)
RQ_ALPHA_RANGE = (0.1, 5.0)
MEAN_DEGREE_MAX = 2
MEAN_COEF_STD = 0.5
TREND_PROB = 0.5
ROOT_PROB = 0.3  # chance that a node after the second is an extra root
MAX_PARENTS = 3
NONLINEARITIES = ("identity", "tanh", "sin", "softplus", "silu")
JITTER_START, JITTER_MAX = 1e-6, 1e-3
MAX_ABS_STANDARDISED = 50.0
MIN_STD = 1e-6

UTSD_MAGIC = b"UTSD"
UTSD_VERSION = 1


class KernelRejected(RuntimeError):
    pass


class SampleRejected(RuntimeError):
    pass


# -- kernels -------------------------------------------------------------------

@dataclass
class KernelSpec:
    """A leaf kernel (``op is None``) or a sum/product of two sub-kernels."""

    kind: str | None = None
    params: dict = field(default_factory=dict)
    op: str | None = None
    left: KernelSpec | None = None
    right: KernelSpec | None = None

    @property
    def depth(self):
        if self.op is None:
            return 0
        return 1 + max(self.left.depth, self.right.depth)

    @property
    def n_leaves(self):
        if self.op is None:
            return 1
        return self.left.n_leaves + self.right.n_leaves

    def __call__(self, t1, t2):
        if self.op == "+":
            return self.left(t1, t2) + self.right(t1, t2)
        if self.op == "*":
            return self.left(t1, t2) * self.right(t1, t2)
        return _leaf_cov(self.kind, self.params, t1, t2)


def _leaf_cov(kind, p, t1, t2):
    d = t1[:, None] - t2[None, :]
    var = p.get("variance", 1.0)
    if kind == "rbf":
        return var * np.exp(-0.5 * (d / p["lengthscale"]) ** 2)
    if kind == "periodic":
        s = np.sin(np.pi * np.abs(d) / p["period"])
        return var * np.exp(-2.0 * (s / p["lengthscale"]) ** 2)
    if kind == "linear":
        c = p["offset"]
        return var * (t1[:, None] - c) * (t2[None, :] - c)
    if kind == "rq":
        a = p["alpha"]
        return var * (1.0 + d ** 2 / (2.0 * a * p["lengthscale"] ** 2)) ** (-a)
    if kind == "white":
        return var * (d == 0).astype(np.float64)
    raise ValueError(f"unknown kernel kind {kind!r}")


def _loguniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_leaf(rng, kind=None):
    kind = kind or KERNEL_KINDS[rng.integers(len(KERNEL_KINDS))]
    if kind == "white":
        return KernelSpec(kind, {"variance": _loguniform(rng, *WHITE_VARIANCE_RANGE)})
    params = {"variance": _loguniform(rng, *VARIANCE_RANGE)}
    if kind in ("rbf", "periodic", "rq"):
        params["lengthscale"] = _loguniform(rng, *LENGTHSCALE_RANGE)
    if kind == "periodic":
        params["period"] = _loguniform(rng, *PERIOD_RANGE)
    if kind == "rq":
        params["alpha"] = _loguniform(rng, *RQ_ALPHA_RANGE)
    if kind == "linear":
        params["offset"] = float(rng.uniform(0.0, 1.0))
    return KernelSpec(kind, params)


def sample_kernel(rng):
    """Fold 1-4 random leaves together with random ``+``/``*`` (depth <= 3)."""
    n = int(rng.integers(1, MAX_KERNEL_LEAVES + 1))
    k = sample_leaf(rng)
    for _ in range(n - 1):
        op = "+" if rng.random() < 0.5 else "*"
        leaf = sample_leaf(rng)
        k = KernelSpec(op=op, left=k, right=leaf) if rng.random() < 0.5 else KernelSpec(op=op, left=leaf, right=k)
    return k


@dataclass
class MeanSpec:
    """Polynomial mean in the normalised time coordinate: sum(c_i * t**i)."""

    coeffs: tuple = (0.0,)

    def __call__(self, t):
        return np.polynomial.polynomial.polyval(t, np.asarray(self.coeffs, dtype=np.float64))


def sample_mean(rng):
    degree = int(rng.integers(0, MEAN_DEGREE_MAX + 1))
    coeffs = list(rng.normal(0.0, MEAN_COEF_STD, degree + 1))
    if rng.random() < TREND_PROB:
        coeffs += [0.0] * max(0, 2 - len(coeffs))
        coeffs[1] += float(rng.normal())
    return MeanSpec(tuple(float(c) for c in coeffs))


def time_grid(T):
    return np.linspace(0.0, 1.0, T)


def covariance(kernel, T):
    t = time_grid(T)
    K = kernel(t, t)
    asym = np.max(np.abs(K - K.T)) if K.size else 0.0
    if asym > 1e-9:
        raise KernelRejected(f"covariance not symmetric (max asymmetry {asym:.3g})")
    return K


def sample_gp(rng, kernel, mean_spec, T):
    """One draw ``mu + L z`` on the normalised grid, with escalating jitter."""
    if T < 2:
        raise ValueError(f"series length must be at least 2, got {T}")
    t = time_grid(T)
    mu = mean_spec(t) if mean_spec is not None else np.zeros(T)
    K = covariance(kernel, T)
    if not np.any(K):
        return mu
    jitter = JITTER_START
    while True:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(T))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise KernelRejected("Cholesky failed after jitter escalation") from None
    return mu + L @ rng.standard_normal(T)


# -- DAGs --------------------------------------------------------------------------

_NONLIN = {
    "identity": lambda x: x,
    "tanh": np.tanh,
    "sin": np.sin,
    "softplus": lambda x: np.logaddexp(0.0, x),
    "silu": lambda x: x / (1.0 + np.exp(-x)),
}


@dataclass
class DagSpec:
    n_nodes: int
    parents: list  # parents[v] -> list of node ids
    weights: list  # weights[v] -> list aligned with parents[v]
    biases: np.ndarray
    nonlinearity: list  # None for roots
    kernels: dict  # root id -> KernelSpec
    means: dict  # root id -> MeanSpec
    observed: list

    @property
    def roots(self):
        return [v for v in range(self.n_nodes) if not self.parents[v]]

    def topological_order(self):
        ts = graphlib.TopologicalSorter({v: self.parents[v] for v in range(self.n_nodes)})
        return list(ts.static_order())


def sample_dag(rng, max_nodes):
    if max_nodes < 2:
        raise ValueError(f"max_nodes must be at least 2, got {max_nodes}")
    n = int(rng.integers(2, max_nodes + 1))
    order = rng.permutation(n)
    parents = [[] for _ in range(n)]
    weights = [[] for _ in range(n)]
    nonlin = [None] * n
    for pos in range(1, n):
        v = int(order[pos])
        if pos > 1 and rng.random() < ROOT_PROB:
            continue
        k = int(rng.integers(1, min(MAX_PARENTS, pos) + 1))
        chosen = rng.choice(order[:pos], size=k, replace=False)
        parents[v] = [int(u) for u in chosen]
        weights[v] = [float(w) for w in rng.standard_normal(k)]
        nonlin[v] = NONLINEARITIES[rng.integers(len(NONLINEARITIES))]
    biases = rng.standard_normal(n)
    roots = [v for v in range(n) if not parents[v]]
    kernels = {v: sample_kernel(rng) for v in roots}
    means = {v: sample_mean(rng) for v in roots}
    n_obs = int(rng.integers(1, n + 1))
    observed = sorted(int(v) for v in rng.choice(n, size=n_obs, replace=False))
    return DagSpec(n, parents, weights, biases, nonlin, kernels, means, observed)


def propagate(dag, root_samples):
    """Evaluate every node from the root series; returns ``{node: series}``."""
    values = {}
    for v in dag.topological_order():
        if not dag.parents[v]:
            if v not in root_samples:
                raise ValueError(f"missing series for root {v}")
            values[v] = np.asarray(root_samples[v], dtype=np.float64)
            continue
        acc = dag.biases[v] + sum(w * values[u] for u, w in zip(dag.parents[v], dag.weights[v]))
        with np.errstate(over="ignore", invalid="ignore"):
            out = _NONLIN[dag.nonlinearity[v]](acc)
        if not np.all(np.isfinite(out)):
            raise SampleRejected(f"node {v} produced non-finite values")
        values[v] = out
    return values


def standardize(x):
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if not np.isfinite(sd) or sd < MIN_STD:
        raise SampleRejected("series is (numerically) constant")
    z = (x - x.mean()) / sd
    if np.max(np.abs(z)) > MAX_ABS_STANDARDISED:
        raise SampleRejected("standardised series exceeds the tail guard")
    return z


def sample_graph_series(rng, T, max_nodes, max_tries=100):
    """Draw one DAG and return the standardised series of its observed nodes."""
    for _ in range(max_tries):
        dag = sample_dag(rng, max_nodes)
        try:
            roots = {}
            for v in dag.roots:
                for _ in range(max_tries):
                    try:
                        roots[v] = sample_gp(rng, dag.kernels[v], dag.means[v], T)
                        break
                    except KernelRejected:
                        dag.kernels[v] = sample_kernel(rng)
                else:
                    raise SampleRejected("no usable kernel found")
            values = propagate(dag, roots)
            out = []
            for v in dag.observed:
                try:
                    out.append(standardize(values[v]))
                except SampleRejected:
                    continue
            if out:
                return out
        except SampleRejected as exc:
            log.debug("rejected DAG sample: %s", exc)
    raise RuntimeError("synthetic generator rejected every draw; check generator constants")


@dataclass
class Corpus:
    data: np.ndarray  # [n_samples, T] float32

    @property
    def n_samples(self):
        return self.data.shape[0]

    @property
    def length(self):
        return self.data.shape[1]

    def __len__(self):
        return self.n_samples


def _n_workers():
    try:
        return max(1, int(os.environ.get("TSDISTILL_THREADS", "1")))
    except ValueError:
        return 1


def generate_corpus(seed, n_samples, T, max_nodes=12, workers=None):
    """Fill a corpus with observed-node series from successive random DAGs.

    DAG number ``i`` always uses the stream ``(seed, "dag", i)``, so the output
    is identical for any worker count.
    """
    if T % 32 != 0 or T <= 0:
        raise ValueError(f"series length must be a positive multiple of 32, got {T}")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    workers = workers or _n_workers()
    rows = []
    next_dag = 0

    def job(i):
        return sample_graph_series(stream(seed, "dag", i), T, max_nodes)

    pool = concurrent.futures.ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while len(rows) < n_samples:
            ids = range(next_dag, next_dag + workers)
            next_dag += workers
            batches = pool.map(job, ids) if pool else map(job, ids)
            for series in batches:
                rows.extend(series)
    finally:
        if pool:
            pool.shutdown()
    data = np.stack(rows[:n_samples]).astype(np.float32)
    assert np.all(np.isfinite(data))
    return Corpus(data)


# -- UTSD file format ------------------------------------------------------------------

def write_utsd(path, corpus):
    data = np.ascontiguousarray(corpus.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(UTSD_MAGIC)
        fh.write(struct.pack("<III", UTSD_VERSION, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def read_utsd(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != UTSD_MAGIC:
        raise ValueError(f"{path}: not a UTSD file")
    version, n, T = struct.unpack("<III", blob[4:16])
    if version != UTSD_VERSION:
        raise ValueError(f"{path}: unsupported UTSD version {version}")
    expected = 16 + 4 * n * T
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(n, T).astype(np.float32)
    return Corpus(data)
