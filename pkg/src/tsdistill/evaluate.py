"""Downstream classification: embeddings, linear probing, fine-tuning, aggregation.

Multivariate series are encoded channel by channel with the univariate
backbone and the per-channel CLS vectors are concatenated in channel order.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata
from sklearn.model_selection import train_test_split

from . import autograd as ag
from .autograd import Tensor, resize_array
from .model import clone_params, forward_backbone
from .rng import stream, truncated_normal
from .trainer import OptimizerState, ParamGroup, _no_weight_decay, optimizer_step

log = logging.getLogger(__name__)

RESULT_FIELDS = ("dataset", "seed", "method", "regime", "accuracy")


class ProtocolError(ValueError):
    pass


class AggregationError(ValueError):
    pass


def _as_samples(data):
    """Accept a LabeledDataset, an [N, C, L] / [N, L] array, or a list of [C, L] arrays."""
    if hasattr(data, "series"):
        data = data.series
    if isinstance(data, np.ndarray):
        if data.ndim == 2:
            data = data[:, None, :]
        return list(data)
    return [np.atleast_2d(np.asarray(s)) for s in data]


def prepare_channels(data, series_len=512):
    """Resize every channel to ``series_len``: returns [N, C, series_len] float32."""
    samples = _as_samples(data)
    if not samples:
        raise ValueError("cannot embed an empty dataset")
    C = samples[0].shape[0]
    if any(s.shape[0] != C for s in samples):
        raise ValueError("all samples must share the channel count")
    return np.stack([resize_array(np.asarray(s, np.float64), series_len) for s in samples]).astype(np.float32)


def _encode_channels(x, params, cfg, training=False, rng=None):
    """[N, C, T] -> [N, C*d] graph tensor of concatenated CLS embeddings."""
    N, C, T = x.shape
    flat = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(C * N, T)
    cls, _ = forward_backbone(flat, params, cfg, training=training, rng=rng)
    return cls.reshape(C, N, -1).transpose(1, 0, 2).reshape(N, -1)


def embed(params, cfg, data, series_len=512, batch_size=128):
    """Frozen CLS features [N, d_model * C] in evaluation mode."""
    x = prepare_channels(data, series_len)
    out = []
    with ag.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(_encode_channels(x[i:i + batch_size], params, cfg).data)
    return np.concatenate(out)


# -- linear classifier training ---------------------------------------------------------

def _cross_entropy(logits, y):
    logp = ag.log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(y)), y] = 1.0
    return -(Tensor(onehot, dtype=logits.dtype) * logp).sum() * (1.0 / len(y))


def _encode_labels(train_y, *others):
    classes = np.unique(np.concatenate([np.asarray(train_y, dtype=object)] + [np.asarray(o, dtype=object) for o in others]).astype(str))
    lookup = {c: i for i, c in enumerate(classes)}
    return classes, [np.array([lookup[str(v)] for v in arr], dtype=np.int64) for arr in (train_y, *others)]


def _accuracy(logits, y):
    return float(np.mean(np.argmax(logits, axis=1) == y)) if len(y) else float("nan")


def _flat_groups(params):
    return {n: ParamGroup(0, 1.0, not _no_weight_decay(n), False) for n in params}


@dataclass
class ProbeResult:
    accuracy: float
    best_epoch: int
    train_loss: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)


def _select_epoch(test_acc, val_acc, selection):
    if selection == "test":
        best = int(np.argmax(test_acc))
    elif selection == "val":
        best = int(np.argmax(val_acc))
    elif selection == "last":
        best = len(test_acc) - 1
    else:
        raise ValueError(f"unknown epoch selection {selection!r}")
    return best


def stratified_split(y, fraction, seed):
    """Indices (train, held_out) with ``fraction`` held out, stratified when possible."""
    y = np.asarray(y)
    idx = np.arange(len(y))
    _, counts = np.unique(y, return_counts=True)
    n_hold = max(1, int(round(fraction * len(y))))
    stratify = y
    if counts.min() < 2 or n_hold < len(counts) or len(y) - n_hold < len(counts):
        log.warning("class with fewer than 2 samples or split too small; falling back to a random split")
        stratify = None
    tr, ho = train_test_split(idx, test_size=n_hold, random_state=seed, stratify=stratify)
    return np.sort(tr), np.sort(ho)


def linear_probe(train_x, train_y, test_x, test_y, seed=0, epochs=100, lr=1e-3, weight_decay=0.01,
                 batch_size=64, selection="test", val_fraction=0.2):
    """Train a softmax linear classifier on frozen features; returns a ``ProbeResult``.

    ``selection="test"`` reports the best per-epoch test accuracy,
    ``"val"`` picks the epoch on a stratified validation split of the
    training features, ``"last"`` reports the final epoch.
    """
    train_x = np.asarray(train_x, np.float32)
    test_x = np.asarray(test_x, np.float32)
    classes, (ytr, yte) = _encode_labels(train_y, test_y)
    if len(np.unique(ytr)) < 2:
        raise ProtocolError("training split contains a single class")
    xva = yva = None
    if selection == "val":
        tr, va = stratified_split(ytr, val_fraction, seed)
        xva, yva = train_x[va], ytr[va]
        train_x, ytr = train_x[tr], ytr[tr]

    rng = stream(seed, "probe", "init")
    params = {
        "classifier.weight": Tensor(truncated_normal(rng, (train_x.shape[1], len(classes)), 0.02), requires_grad=True),
        "classifier.bias": Tensor(np.zeros(len(classes), np.float32), requires_grad=True),
    }
    opt = OptimizerState.create(params, _flat_groups(params), clip_grad=None)
    result = ProbeResult(float("nan"), -1)
    for epoch in range(epochs):
        order = stream(seed, "probe", "epoch", epoch).permutation(len(ytr))
        losses = []
        for i in range(0, len(order), batch_size):
            b = order[i:i + batch_size]
            for p in params.values():
                p.grad = None
            loss = _cross_entropy(Tensor(train_x[b]) @ params["classifier.weight"] + params["classifier.bias"], ytr[b])
            loss.backward()
            losses.append(loss.item() * len(b))
            optimizer_step(params, {n: p.grad for n, p in params.items()}, opt, lr, weight_decay)
        result.train_loss.append(sum(losses) / len(ytr))
        w, bias = params["classifier.weight"].data, params["classifier.bias"].data
        result.test_accuracy.append(_accuracy(test_x @ w + bias, yte))
        if xva is not None:
            result.val_accuracy.append(_accuracy(xva @ w + bias, yva))
    result.best_epoch = _select_epoch(result.test_accuracy, result.val_accuracy, selection)
    result.accuracy = result.test_accuracy[result.best_epoch]
    return result


# -- fine-tuning ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    accuracy: float
    selected_lr: float
    val_scores: dict
    test_accuracy: list = field(default_factory=list)


def _train_end_to_end(backbone, cfg, x_tr, y_tr, n_classes, evals, seed, lr, epochs, weight_decay, batch_size):
    """Fine-tune a copy of ``backbone`` plus a linear head; returns per-epoch accuracy per eval set."""
    params = clone_params(backbone, requires_grad=True)
    width = cfg.d_model * x_tr.shape[1]
    rng = stream(seed, "finetune", "init")
    params["classifier.weight"] = Tensor(truncated_normal(rng, (width, n_classes), 0.02), requires_grad=True)
    params["classifier.bias"] = Tensor(np.zeros(n_classes, np.float32), requires_grad=True)
    opt = OptimizerState.create(params, _flat_groups(params), clip_grad=None)
    steps_per_epoch = math.ceil(len(y_tr) / batch_size)
    total = max(1, epochs * steps_per_epoch)
    history = {name: [] for name in evals}
    step = 0
    for epoch in range(epochs):
        order = stream(seed, "finetune", "epoch", epoch).permutation(len(y_tr))
        for i in range(0, len(order), batch_size):
            b = order[i:i + batch_size]
            for p in params.values():
                p.grad = None
            feats = _encode_channels(x_tr[b], params, cfg, training=True, rng=stream(seed, "finetune", "dropout", step))
            loss = _cross_entropy(feats @ params["classifier.weight"] + params["classifier.bias"], y_tr[b])
            loss.backward()
            step_lr = 0.5 * lr * (1.0 + math.cos(math.pi * step / total))
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
            optimizer_step(params, grads, opt, step_lr, weight_decay)
            step += 1
        with ag.no_grad():
            for name, (x, y) in evals.items():
                logits = (_encode_channels(x, params, cfg) @ params["classifier.weight"] + params["classifier.bias"]).data
                history[name].append(_accuracy(logits, y))
    return history


def finetune(params, cfg, train, test, seed=0, lrs=(1e-4, 2e-4, 1e-3), epochs=100, weight_decay=0.05,
             batch_size=32, val_fraction=0.2, series_len=512, selection="test"):
    """Grid-search the lr on a held-out split, then fine-tune on all training data.

    ``train``/``test`` are ``(series, labels)`` pairs. Ties on validation
    accuracy go to the smallest learning rate.
    """
    x_tr, x_te = prepare_channels(train[0], series_len), prepare_channels(test[0], series_len)
    classes, (y_tr, y_te) = _encode_labels(train[1], test[1])
    if len(np.unique(y_tr)) < 2:
        raise ProtocolError("training split contains a single class")
    backbone = {n: t for n, t in params.items() if n.startswith(("tokenizer.", "encoder."))}
    fit, val = stratified_split(y_tr, val_fraction, seed)
    scores = {}
    for lr in sorted(lrs):
        hist = _train_end_to_end(backbone, cfg, x_tr[fit], y_tr[fit], len(classes), {"val": (x_tr[val], y_tr[val])},
                                 seed, lr, epochs, weight_decay, batch_size)
        scores[lr] = max(hist["val"])
    best = max(scores.values())
    chosen = min(lr for lr, s in scores.items() if s == best)
    evals = {"test": (x_te, y_te)}
    if selection == "val":
        fit_x, fit_y = x_tr[fit], y_tr[fit]
        evals["val"] = (x_tr[val], y_tr[val])
    else:
        fit_x, fit_y = x_tr, y_tr
    hist = _train_end_to_end(backbone, cfg, fit_x, fit_y, len(classes), evals, seed, chosen, epochs,
                             weight_decay, batch_size)
    epoch = _select_epoch(hist["test"], hist.get("val", []), selection)
    return FinetuneResult(hist["test"][epoch], chosen, scores, hist["test"])


# -- aggregation ------------------------------------------------------------------------------

@dataclass
class EvalReport:
    methods: list
    datasets: list
    accuracy: dict  # dataset -> method -> mean accuracy
    std: dict  # dataset -> method -> std over seeds
    wins: dict
    average_rank: dict
    average_accuracy: dict

    def to_dict(self):
        return {
            "methods": self.methods, "datasets": self.datasets, "accuracy": self.accuracy, "std": self.std,
            "wins": self.wins, "average_rank": self.average_rank, "average_accuracy": self.average_accuracy,
        }


def aggregate(results, std=None):
    """``results[dataset][method] -> accuracy`` to wins / mean rank / mean accuracy.

    Ties share the best rank average and every tied best method gets a win.
    """
    datasets = sorted(results)
    if not datasets:
        raise AggregationError("no results to aggregate")
    methods = sorted({m for row in results.values() for m in row})
    for d in datasets:
        missing = [m for m in methods if m not in results[d]]
        if missing:
            raise AggregationError(f"dataset {d!r} has no result for {missing}")
    acc = np.array([[results[d][m] for m in methods] for d in datasets], dtype=np.float64)
    ranks = np.vstack([rankdata(-row, method="average") for row in acc])
    wins = (acc == acc.max(axis=1, keepdims=True)).sum(axis=0)
    return EvalReport(
        methods=methods,
        datasets=datasets,
        accuracy={d: dict(results[d]) for d in datasets},
        std=std or {},
        wins={m: int(w) for m, w in zip(methods, wins)},
        average_rank={m: float(r) for m, r in zip(methods, ranks.mean(axis=0))},
        average_accuracy={m: float(a) for m, a in zip(methods, acc.mean(axis=0))},
    )


def aggregate_rows(rows, regime=None):
    """Aggregate CSV-style rows (dicts with ``RESULT_FIELDS``), averaging over seeds."""
    cells = {}
    for r in rows:
        if regime is not None and r["regime"] != regime:
            continue
        cells.setdefault(r["dataset"], {}).setdefault(r["method"], []).append(float(r["accuracy"]))
    means = {d: {m: float(np.mean(v)) for m, v in row.items()} for d, row in cells.items()}
    stds = {d: {m: float(np.std(v)) for m, v in row.items()} for d, row in cells.items()}
    return aggregate(means, stds)


def write_results_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in RESULT_FIELDS})


def read_results_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(RESULT_FIELDS) - set(reader.fieldnames):
            raise AggregationError(f"{path}: expected columns {','.join(RESULT_FIELDS)}")
        return list(reader)
