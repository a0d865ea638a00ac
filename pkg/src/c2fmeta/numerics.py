"""Small dense-math kernels shared by the rest of the package.

Vectors are 1-D float64 arrays. Collections of embeddings are stored one per
row, so an ``(M, D)`` array holds ``M`` embeddings of length ``D``.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionMismatch, EmptyInput, NonFiniteFunction, ZeroNorm

EPS = 1e-12
FD_STEP = 1e-5


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the bit stream for a given seed is stable across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(seed: int, offset: int) -> int:
    return (int(seed) + int(offset)) & 0xFFFFFFFFFFFFFFFF


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.dot(v, v))
    if not norm > EPS:
        raise ZeroNorm(f"cannot normalize vector with norm {norm:g}")
    return v / norm


def l2_normalize_rows(F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", F, F))
    if F.shape[0] and not np.all(norms > EPS):
        raise ZeroNorm(f"row {int(np.argmin(norms))} has norm {norms.min():g}")
    return F / norms[:, None]


def softmax(scores, axis: int = -1) -> np.ndarray:
    """Numerically safe softmax (max-subtracted) along ``axis``."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0 or s.shape[axis] == 0:
        raise EmptyInput("softmax of an empty score vector")
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(scores, axis: int = -1) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0 or s.shape[axis] == 0:
        raise EmptyInput("log_softmax of an empty score vector")
    z = s - s.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def gram(F) -> np.ndarray:
    """Similarity matrix ``S = F F^T`` for row-stored unit embeddings."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D embedding matrix, got shape {F.shape}")
    S = F @ F.T
    # symmetrize so S[i, j] == S[j, i] bit-for-bit
    return 0.5 * (S + S.T)


def check_gradient(
    f: Callable[[np.ndarray], float],
    grad_f: Callable[[np.ndarray], np.ndarray],
    point,
    h: float = FD_STEP,
) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``."""
    x = np.array(point, dtype=np.float64)
    g = np.asarray(grad_f(x.copy()), dtype=np.float64).reshape(x.shape)
    worst = 0.0
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x.copy())
        x[idx] = old - h
        fm = f(x.copy())
        x[idx] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteFunction(f"function is not finite near coordinate {idx}")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(g[idx] - numeric) / max(1.0, abs(g[idx]))
        worst = max(worst, err)
    return worst
