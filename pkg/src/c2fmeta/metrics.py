"""Evaluation helpers: weighted kNN probe, episode accuracy with 95% CI, ARI."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyInput, EmptyTrainSet, LengthMismatch

Z95 = 1.96


def weighted_knn_predict(train_emb, train_labels, probe, k: int = 200,
                         weight: str = "cosine", tau: float = 0.1) -> int:
    """Predict the label of ``probe`` by a similarity-weighted vote of its k nearest neighbours.

    Neighbours are ranked by cosine similarity (embeddings are assumed unit
    norm), ties in rank broken by lower training index. With
    ``weight="cosine"`` each neighbour votes with its raw similarity, so
    negative similarities vote against; ``weight="exp"`` uses
    ``exp(s / tau)``. Ties in the total vote go to the lowest label.
    """
    train_emb = np.atleast_2d(np.asarray(train_emb, dtype=np.float64))
    train_labels = np.asarray(train_labels)
    if train_labels.size == 0:
        raise EmptyTrainSet("kNN needs at least one training embedding")
    if k < 1:
        raise ValueError("k must be at least 1")
    sims = train_emb @ np.asarray(probe, dtype=np.float64)
    return int(_vote(sims, train_labels, k, weight, tau))


def _vote(sims, labels, k, weight, tau):
    nn = np.argsort(-sims, kind="stable")[:min(k, sims.size)]
    w = sims[nn] if weight == "cosine" else np.exp(sims[nn] / tau)
    classes, inv = np.unique(labels[nn], return_inverse=True)
    totals = np.zeros(classes.size)
    for c, wi in zip(inv, w):
        totals[c] += wi
    return classes[int(np.argmax(totals))]


def knn_accuracy(train_emb, train_labels, test_emb, test_labels, k: int = 200,
                 weight: str = "cosine", tau: float = 0.1) -> float:
    train_labels = np.asarray(train_labels)
    if train_labels.size == 0:
        raise EmptyTrainSet("kNN needs at least one training embedding")
    S = np.asarray(test_emb) @ np.asarray(train_emb).T
    preds = np.array([_vote(row, train_labels, k, weight, tau) for row in S])
    return float(np.mean(preds == np.asarray(test_labels)))


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95: float
    episodes: int
    n_way: int | None = None
    k_shot: int | None = None
    q_query: int | None = None
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def __str__(self) -> str:
        return f"{100 * self.mean_accuracy:.2f} ± {100 * self.ci95:.2f}"


def accuracy_ci(accuracies, **echo) -> EvalReport:
    """Mean accuracy and the normal-approximation 95% half-width ``1.96 s / sqrt(n)``."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size == 0:
        raise EmptyInput("no episode accuracies")
    if np.all(a == a[0]):
        # summation rounding would otherwise leave a spurious nonzero spread
        return EvalReport(float(a[0]), 0.0, int(a.size), **echo)
    mean = float(a.mean())
    sd = float(a.std(ddof=1))
    return EvalReport(mean, Z95 * sd / math.sqrt(a.size), int(a.size), **echo)


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def adjusted_rand_index(labels_a, labels_b) -> float:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"label arrays of shapes {a.shape} and {b.shape}")
    if a.size < 2:
        raise LengthMismatch("ARI needs at least two items")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    index = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / _comb2(a.size)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial (all-in-one or all singletons) and identical in kind
        return 1.0
    return float((index - expected) / (max_index - expected))
