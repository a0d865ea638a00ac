"""N-way K-shot episode sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .errors import InsufficientClasses, InsufficientSamples
from .numerics import make_rng

log = logging.getLogger(__name__)


@dataclass
class Episode:
    N: int
    K: int
    Q: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray
    class_map: np.ndarray  # class_map[label] = source class id


def eligible_classes(classes: Mapping[int, np.ndarray], K: int, Q: int) -> list[int]:
    return sorted(int(c) for c, idx in classes.items() if len(idx) >= K + Q)


def _check(classes, eligible, N, K, Q):
    if len(classes) < N:
        raise InsufficientClasses(f"{N}-way episodes need {N} classes, only {len(classes)} available")
    if len(eligible) < N:
        raise InsufficientSamples(
            f"only {len(eligible)} classes have at least K+Q={K + Q} samples, {N} needed")


def sample_episode(X: np.ndarray, classes: Mapping[int, np.ndarray], N: int, K: int, Q: int,
                   rng: np.random.Generator, _eligible: list[int] | None = None) -> Episode:
    """Draw one episode from ``classes`` (class id -> row indices into ``X``).

    Classes with fewer than ``K + Q`` samples are skipped. The N chosen classes
    receive episode labels from a random permutation of ``0..N-1``.
    """
    if min(N, K, Q) < 1:
        raise ValueError("N, K and Q must be positive")
    eligible = _eligible
    if eligible is None:
        eligible = eligible_classes(classes, K, Q)
        _check(classes, eligible, N, K, Q)
        if len(eligible) < len(classes):
            log.warning("%d classes smaller than K+Q=%d excluded", len(classes) - len(eligible), K + Q)
    chosen = rng.choice(np.asarray(eligible), size=N, replace=False)
    picks = [rng.choice(np.asarray(classes[int(c)]), size=K + Q, replace=False) for c in chosen]
    labels = rng.permutation(N)

    order = np.argsort(labels)
    sup = np.concatenate([picks[i][:K] for i in order])
    qry = np.concatenate([picks[i][K:] for i in order])
    return Episode(
        N=N, K=K, Q=Q,
        support_x=X[sup], support_y=np.repeat(np.arange(N), K),
        query_x=X[qry], query_y=np.repeat(np.arange(N), Q),
        support_idx=sup, query_idx=qry,
        class_map=chosen[order],
    )


def episode_stream(source, N: int, K: int, Q: int, count: int, seed: int) -> Iterator[Episode]:
    """``count`` episodes from one seeded generator.

    ``source`` is any dataset with ``X`` and ``class_indices()`` (pseudo,
    fine, or coarse datasets).
    """
    classes = source.class_indices()
    eligible = eligible_classes(classes, K, Q)
    _check(classes, eligible, N, K, Q)
    if len(eligible) < len(classes):
        log.warning("%d classes smaller than K+Q=%d excluded", len(classes) - len(eligible), K + Q)
    rng = make_rng(seed)
    return (sample_episode(source.X, classes, N, K, Q, rng, _eligible=eligible) for _ in range(count))
