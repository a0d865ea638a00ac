"""Coarse-to-fine pseudo-labelling.

Within every coarse class, a random remaining sample seeds a new pseudo-fine
class and absorbs the ``N_s - 1`` remaining samples most similar to it (cosine
similarity from a Gram matrix computed once per class). Leftovers smaller
than ``N_s`` are dropped.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data import read_rows, write_rows
from .errors import EmbeddingDimMismatch, EmptyDataset, FormatError, InvalidNs
from .numerics import gram, l2_normalize, l2_normalize_rows, make_rng


@dataclass(eq=False)
class PseudoDataset:
    X: np.ndarray
    coarse: np.ndarray
    pseudo: np.ndarray
    source_index: np.ndarray
    num_pseudo_classes: int
    N_s: int
    dropped_count: int
    seed: int | None = None
    embedding_id: str | None = None

    def __len__(self) -> int:
        return self.X.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PseudoDataset):
            return NotImplemented
        return (
            np.array_equal(self.X, other.X)
            and np.array_equal(self.coarse, other.coarse)
            and np.array_equal(self.pseudo, other.pseudo)
            and np.array_equal(self.source_index, other.source_index)
            and (self.num_pseudo_classes, self.N_s, self.dropped_count, self.seed, self.embedding_id)
            == (other.num_pseudo_classes, other.N_s, other.dropped_count, other.seed, other.embedding_id)
        )

    def class_indices(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.pseudo == c) for c in range(self.num_pseudo_classes)}


def pixels_embed(x) -> np.ndarray:
    """Raw features, l2-normalised (rows, if given a matrix)."""
    x = np.asarray(x, dtype=np.float64)
    return l2_normalize(x) if x.ndim == 1 else l2_normalize_rows(x)


def identity_embed(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _group_class(S: np.ndarray, N_s: int, rng: np.random.Generator) -> list[np.ndarray]:
    M = S.shape[0]
    alive = np.ones(M, dtype=bool)
    groups = []
    while alive.sum() >= N_s:
        remaining = np.flatnonzero(alive)
        seed = remaining[rng.integers(remaining.size)]
        cands = remaining[remaining != seed]
        # stable sort on ascending index: equal similarities go to the lower index
        top = cands[np.argsort(-S[seed, cands], kind="stable")[:N_s - 1]]
        members = np.concatenate([[seed], top])
        alive[members] = False
        groups.append(members)
    return groups


def pseudo_label(dataset, embed: Callable, N_s: int, seed: int = 0,
                 embedding_id: str | None = None) -> PseudoDataset:
    """Group each coarse class of ``dataset`` into pseudo-fine classes of exactly ``N_s`` samples.

    ``embed`` maps an ``(M, D_in)`` feature matrix to ``(M, D)`` unit-norm
    rows. Each coarse class ``c`` draws its seeds from its own generator seeded
    with ``seed ^ c``, so classes can be processed in any order. Pseudo-class
    ids are assigned in creation order, coarse class by coarse class.
    """
    if N_s < 1:
        raise InvalidNs(f"N_s must be at least 1, got {N_s}")
    X, coarse = dataset.X, dataset.coarse
    if len(coarse) == 0:
        raise EmptyDataset("nothing to pseudo-label")

    dim = None
    members_all, coarse_all, pseudo_all = [], [], []
    dropped = 0
    next_id = 0
    for c in range(dataset.num_coarse_classes):
        idx = np.flatnonzero(coarse == c)
        if idx.size == 0:
            continue
        F = np.asarray(embed(X[idx]), dtype=np.float64)
        if F.ndim != 2 or F.shape[0] != idx.size or (dim is not None and F.shape[1] != dim):
            raise EmbeddingDimMismatch(f"embedding of coarse class {c} has shape {F.shape}")
        dim = F.shape[1]
        groups = _group_class(gram(F), N_s, make_rng(seed ^ c))
        for g in groups:
            members_all.append(idx[g])
            coarse_all.append(np.full(N_s, c))
            pseudo_all.append(np.full(N_s, next_id))
            next_id += 1
        dropped += idx.size - N_s * len(groups)

    src = np.concatenate(members_all) if members_all else np.array([], dtype=np.int64)
    return PseudoDataset(
        X=X[src],
        coarse=np.concatenate(coarse_all).astype(np.int64) if coarse_all else src.copy(),
        pseudo=np.concatenate(pseudo_all).astype(np.int64) if pseudo_all else src.copy(),
        source_index=src.astype(np.int64),
        num_pseudo_classes=next_id,
        N_s=N_s,
        dropped_count=dropped,
        seed=seed,
        embedding_id=embedding_id,
    )


def save_pseudo(pd: PseudoDataset, path) -> None:
    manifest = {
        "input_dim": int(pd.X.shape[1]),
        "num_samples": len(pd),
        "num_pseudo_classes": pd.num_pseudo_classes,
        "N_s": pd.N_s,
        "dropped_count": pd.dropped_count,
        "embedding_checkpoint": pd.embedding_id,
        "seed": pd.seed,
        "source_index": pd.source_index.tolist(),
    }
    write_rows(path, "coarse_label", "pseudo_fine_label", pd.coarse, pd.pseudo, pd.X, manifest)


def load_pseudo(path) -> PseudoDataset:
    manifest, coarse, pseudo, X = read_rows(Path(path), "coarse_label", "pseudo_fine_label")
    try:
        src = np.asarray(manifest["source_index"], dtype=np.int64)
        n_cls = int(manifest["num_pseudo_classes"])
        N_s = int(manifest["N_s"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"pseudo-dataset manifest incomplete: {exc}") from exc
    if src.shape[0] != X.shape[0]:
        raise FormatError("source_index length does not match the number of rows")
    if pseudo.size and (pseudo.min() < 0 or pseudo.max() >= n_cls):
        raise FormatError("pseudo label out of range")
    return PseudoDataset(X, coarse, pseudo, src, n_cls, N_s, int(manifest["dropped_count"]),
                         manifest.get("seed"), manifest.get("embedding_checkpoint"))
