"""Difficulty prediction and curriculum selection.

The predictor is an MLP classifier over flattened scenarios, trained with BCE
on evaluation collision labels. Its class-1 probabilities drive weighted
re-sampling of the library; the baseline strategies select without it (or use
it only for ordering and staging).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Adam, DenseNet, net_arrays, net_from_arrays, net_meta, read_container, \
    write_container

BASELINES = ("rand", "rand_fail", "fail", "pcl_bv", "pcl_label", "order")
LABEL_FLOOR = 1e-8


class DifficultyPredictor:
    """Two-way softmax MLP; the output layer starts at zero so every
    untrained prediction is exactly 0.5."""

    def __init__(self, in_dim: int, hidden: int = 256, layers: int = 3, dropout: float = 0.0,
                 balance: bool = False, lr: float = 1e-4, seed=0):
        self.in_dim, self.hidden, self.layers = int(in_dim), int(hidden), int(layers)
        self.dropout, self.balance, self.lr = float(dropout), bool(balance), float(lr)
        self.reinit(seed)

    def reinit(self, seed) -> None:
        self.net = DenseNet((self.in_dim, *(self.hidden,) * self.layers, 2), head="softmax",
                            dropout=self.dropout, rng=np.random.default_rng(seed), out_init="zero")
        self.opt = Adam(self.net, self.lr)

    def predict(self, x, chunk: int = 1024) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self.predict(x[None], chunk)[0:1]
        out = np.empty(len(x))
        for lo in range(0, len(x), chunk):
            out[lo:lo + chunk] = self.net.forward(x[lo:lo + chunk])[:, 1]
        return out

    def save(self, path) -> None:
        arrays = net_arrays(self.net, "net.")
        arrays.update(self.opt.arrays("opt."))
        meta = {"kind": "difficulty_predictor", "in_dim": self.in_dim, "hidden": self.hidden,
                "layers": self.layers, "dropout": self.dropout, "balance": self.balance,
                "lr": self.lr, "net": net_meta(self.net)}
        write_container(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "DifficultyPredictor":
        meta, arrays = read_container(path)
        if meta.get("kind") != "difficulty_predictor":
            raise ValueError(f"{path}: not a difficulty_predictor checkpoint")
        pred = cls.__new__(cls)
        pred.in_dim, pred.hidden, pred.layers = meta["in_dim"], meta["hidden"], meta["layers"]
        pred.dropout, pred.balance, pred.lr = meta["dropout"], meta["balance"], meta["lr"]
        pred.net = net_from_arrays(meta["net"], arrays, "net.")
        pred.opt = Adam(pred.net, pred.lr)
        pred.opt.restore(arrays, "opt.")
        return pred


def _balanced(idx, labels, rng):
    """Duplicate random minority-class members until both classes match."""
    y = labels[idx]
    pos, neg = idx[y == 1], idx[y == 0]
    if len(pos) == 0 or len(neg) == 0 or len(pos) == len(neg):
        return idx
    small, big = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    extra = rng.choice(small, size=len(big) - len(small), replace=True)
    return np.concatenate([idx, extra])


def train_predictor(pred: DifficultyPredictor, x, labels, epochs: int = 20, batch_size: int = 128,
                    rng=None) -> list[float]:
    """Mini-batch Adam on BCE; returns the per-epoch mean training loss."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if len(x) == 0 or len(x) != len(labels):
        raise ValueError("evaluation set must be non-empty and match the label count")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(np.int64)
    rng = np.random.default_rng(rng)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        total, count = 0.0, 0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            if pred.balance:
                idx = _balanced(idx, labels, rng)
            loss, grads = pred.net.loss_and_grad(x[idx], labels[idx], "bce", train=True, rng=rng)
            pred.opt.step(grads)
            total += loss * len(idx)
            count += len(idx)
        curve.append(total / count)
    return curve


def predict_all(pred: DifficultyPredictor, features) -> np.ndarray:
    """Class-1 probability for every featurized library scenario (dropout off)."""
    features = np.asarray(features)
    if len(features) == 0:
        raise ValueError("library is empty")
    return pred.predict(features)


@dataclass
class Curriculum:
    indices: np.ndarray
    ids: list[str]
    weights: np.ndarray      # per-library selection probability of one draw
    strategy: str
    iteration: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"strategy": self.strategy, "iteration": self.iteration, "ids": list(self.ids),
                "indices": [int(i) for i in self.indices],
                "weights": [float(w) for w in self.weights], **self.extra}

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_json()))
        os.replace(tmp, path)

    @classmethod
    def from_json(cls, d: dict) -> "Curriculum":
        extra = {k: v for k, v in d.items()
                 if k not in ("strategy", "iteration", "ids", "indices", "weights")}
        return cls(np.asarray(d["indices"], dtype=np.int64), list(d["ids"]),
                   np.asarray(d["weights"], dtype=np.float64), d["strategy"], int(d["iteration"]), extra)


def selection_probabilities(l_all, floor: float = LABEL_FLOOR) -> np.ndarray:
    w = np.maximum(np.asarray(l_all, dtype=np.float64), floor)
    return w / w.sum()


def weighted_sample(ids, n: int, l_all, rng, iteration: int = 0, floor: float = LABEL_FLOOR,
                    strategy: str = "clic") -> Curriculum:
    """``n`` independent draws with replacement, P(j) proportional to the floored label."""
    if n < 1:
        raise ValueError("n must be at least 1")
    p = selection_probabilities(l_all, floor)
    idx = rng.choice(len(p), size=n, replace=True, p=p)
    return Curriculum(idx, [ids[i] for i in idx], p, strategy, iteration)


def _uniform_over(pool, m):
    w = np.zeros(m)
    w[pool] = 1.0 / len(pool)
    return w


def pcl_bv_stage(iteration: int, total: int, n_stages: int = 4) -> int:
    """1-based stage for a 1-based iteration: equal phases over ``total``."""
    return min(n_stages, 1 + (iteration - 1) * n_stages // total)


def pcl_label_stage(iteration: int, total: int, n_stages: int = 5) -> int:
    return min(n_stages, 1 + (iteration - 1) * n_stages // total)


def baseline_select(strategy: str, ids, n: int, rng, *, iteration: int = 1, total: int = 1,
                    eval_idx=None, eval_labels=None, l_all=None, n_bv=None) -> Curriculum:
    m = len(ids)
    everyone = np.arange(m)

    def pick(pool, k):
        return pool[rng.integers(len(pool), size=k)]

    def fails():
        if eval_idx is None or eval_labels is None:
            raise ValueError(f"strategy {strategy!r} needs evaluation ids and labels")
        return np.unique(np.asarray(eval_idx)[np.asarray(eval_labels) == 1])

    extra = {}
    if strategy == "rand":
        idx, w = pick(everyone, n), _uniform_over(everyone, m)
    elif strategy == "rand_fail":
        f = fails()
        half = n // 2
        if len(f) == 0:
            f = everyone
        idx = np.concatenate([pick(everyone, n - half), pick(f, half)])
        w = ((n - half) * _uniform_over(everyone, m) + half * _uniform_over(f, m)) / n
    elif strategy == "fail":
        f = fails()
        pool = f if len(f) else everyone
        extra["fallback_rand"] = len(f) == 0
        idx, w = pick(pool, n), _uniform_over(pool, m)
    elif strategy == "pcl_bv":
        if n_bv is None:
            raise ValueError("pcl_bv needs per-scenario BV counts")
        n_bv = np.asarray(n_bv)
        stage = pcl_bv_stage(iteration, total)
        pool = everyone[n_bv <= max(stage, int(n_bv.min()))]
        extra["stage"] = stage
        idx, w = pick(pool, n), _uniform_over(pool, m)
    elif strategy == "pcl_label":
        if l_all is None:
            raise ValueError("pcl_label needs predicted labels")
        l_all = np.asarray(l_all)
        stage = pcl_label_stage(iteration, total)
        pool = everyone[l_all < 0.2 * stage]
        if len(pool) == 0:
            pool = everyone[l_all == l_all.min()]
        extra["stage"] = stage
        idx, w = pick(pool, n), _uniform_over(pool, m)
    elif strategy == "order":
        if l_all is None:
            raise ValueError("order needs predicted labels")
        if n > m:
            raise ValueError("order needs n <= library size")
        ranked = np.argsort(np.asarray(l_all), kind="stable")
        parts = np.array_split(ranked, n)
        idx = np.array([p[rng.integers(len(p))] for p in parts], dtype=np.int64)
        w = np.zeros(m)
        for p in parts:
            w[p] = 1.0 / (n * len(p))
    else:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {BASELINES}")
    idx = np.asarray(idx, dtype=np.int64)
    return Curriculum(idx, [ids[i] for i in idx], w, strategy, iteration, extra)


def label_histograms(l_all, bins: int = 10):
    edges = np.linspace(0.0, 1.0, bins + 1)
    which = np.clip(np.searchsorted(edges, l_all, side="right") - 1, 0, bins - 1)
    return edges, which

