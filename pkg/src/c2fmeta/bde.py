"""Bi-level discriminative embedding.

A three-layer tanh perceptron maps raw features to unit-norm embeddings. It is
trained with two objectives evaluated inside each mini-batch:

* visual discrimination: an augmented sample must be matched to its own
  original among all originals in the batch, and no original may be matched
  to another instance (temperature ``tau``);
* semantic discrimination: both the original and the augmented embedding are
  classified into coarse classes by a bias-free linear head ``W``.

The joint objective is ``m * L_visual + n * L_semantic``. Losses are sums over
the batch; the optimizer steps on the batch mean.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    DimensionMismatch,
    DivergenceDetected,
    EmptyDataset,
    FormatError,
    InvalidLabel,
    NonPositiveTemperature,
    ZeroNorm,
)
from .numerics import EPS, log_softmax, make_rng, softmax

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
ENCODER_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3")


# --- encoder ---------------------------------------------------------------

def init_encoder(d_in: int, hidden: int, dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    sizes = [(d_in, hidden), (hidden, hidden), (hidden, dim)]
    params = {}
    for i, (fan_in, fan_out) in enumerate(sizes, start=1):
        params[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return params


class _Cache(NamedTuple):
    X: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    norm: np.ndarray
    F: np.ndarray


def encoder_forward(enc: dict[str, np.ndarray], X: np.ndarray) -> tuple[np.ndarray, _Cache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != enc["W1"].shape[0]:
        raise DimensionMismatch(f"encoder expects inputs of length {enc['W1'].shape[0]}, got shape {X.shape}")
    a1 = np.tanh(X @ enc["W1"] + enc["b1"])
    a2 = np.tanh(a1 @ enc["W2"] + enc["b2"])
    h = a2 @ enc["W3"] + enc["b3"]
    norm = np.sqrt(np.einsum("ij,ij->i", h, h))
    if X.shape[0] and not np.all(norm > EPS):
        raise ZeroNorm("encoder produced a zero pre-normalization activation")
    F = h / norm[:, None]
    return F, _Cache(X, a1, a2, norm, F)


def encoder_backward(enc: dict[str, np.ndarray], cache: _Cache, dF: np.ndarray) -> dict[str, np.ndarray]:
    F = cache.F
    dh = (dF - F * np.einsum("ij,ij->i", F, dF)[:, None]) / cache.norm[:, None]
    grads = {"W3": cache.a2.T @ dh, "b3": dh.sum(axis=0)}
    dz2 = (dh @ enc["W3"].T) * (1.0 - cache.a2**2)
    grads["W2"] = cache.a1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ enc["W2"].T) * (1.0 - cache.a1**2)
    grads["W1"] = cache.X.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads


def encode_batch(enc: dict[str, np.ndarray], X) -> np.ndarray:
    return encoder_forward(enc, np.atleast_2d(X))[0]


# --- parameters and configs -------------------------------------------------

@dataclass
class BdeParams:
    encoder: dict[str, np.ndarray]
    W: np.ndarray
    tau: float = 0.1
    m: float = 1.0
    n: float = 10.0

    def __post_init__(self):
        if not self.tau > 0:
            raise NonPositiveTemperature(f"tau must be positive, got {self.tau}")

    def tensors(self) -> dict[str, np.ndarray]:
        """Parameter arrays in checkpoint layout order (views, not copies)."""
        return {**{k: self.encoder[k] for k in ENCODER_KEYS}, "W": self.W}

    def copy(self) -> "BdeParams":
        return BdeParams({k: v.copy() for k, v in self.encoder.items()}, self.W.copy(), self.tau, self.m, self.n)

    @property
    def input_dim(self) -> int:
        return self.encoder["W1"].shape[0]

    @property
    def dim(self) -> int:
        return self.encoder["W3"].shape[1]


def init_params(d_in: int, num_classes: int, rng: np.random.Generator, hidden: int = 64, dim: int = 32,
                tau: float = 0.1, m: float = 1.0, n: float = 10.0) -> BdeParams:
    enc = init_encoder(d_in, hidden, dim, rng)
    W = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, num_classes))
    return BdeParams(enc, W, tau, m, n)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    base_lr: float = 0.3
    lr_milestones: tuple[int, ...] = (120, 160)
    lr_factors: tuple[float, ...] = (0.1, 0.01)
    # "factors": lr = base_lr * factor after each milestone.
    # "compound": factors multiply successively.
    lr_mode: str = "factors"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    hidden: int = 64
    dim: int = 32
    tau: float = 0.1
    m: float = 1.0
    n: float = 10.0
    # fraction of each coarse class held out for kNN model selection (0 = off)
    select_fraction: float = 0.0
    select_k: int = 200

    def __post_init__(self):
        self.lr_milestones = tuple(int(v) for v in self.lr_milestones)
        self.lr_factors = tuple(float(v) for v in self.lr_factors)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if len(self.lr_milestones) != len(self.lr_factors):
            raise ValueError("lr_milestones and lr_factors must have equal length")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ValueError("lr_milestones must be strictly increasing")
        if any(b >= a for a, b in zip(self.lr_factors, self.lr_factors[1:])):
            raise ValueError("lr_factors must be strictly decreasing")
        if self.lr_milestones and self.lr_milestones[-1] >= self.epochs:
            raise ValueError("lr milestones must be smaller than epochs")
        if self.lr_mode not in ("factors", "compound"):
            raise ValueError(f"unknown lr_mode {self.lr_mode!r}")
        if not 0.0 <= self.select_fraction < 1.0:
            raise ValueError("select_fraction must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        lr = self.base_lr
        for milestone, factor in zip(self.lr_milestones, self.lr_factors):
            if epoch >= milestone:
                lr = self.base_lr * factor if self.lr_mode == "factors" else lr * factor
        return lr


@dataclass
class AugmentConfig:
    noise_sigma: float = 0.1
    dropout_prob: float = 0.1
    scale_jitter: float = 0.05

    def __post_init__(self):
        if self.noise_sigma < 0 or self.scale_jitter < 0 or not 0 <= self.dropout_prob < 1:
            raise ValueError(f"invalid augmentation config {self}")


def augment_batch(X: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    noise = rng.normal(0.0, cfg.noise_sigma, size=X.shape)
    keep = rng.random(X.shape) >= cfg.dropout_prob
    scale = rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter, size=(X.shape[0], 1))
    return scale * np.where(keep, X + noise, 0.0)


def augment(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return augment_batch(np.asarray(x, dtype=np.float64)[None, :], cfg, rng)[0]


def encode(params: BdeParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("encode takes a single vector; use encode_batch for matrices")
    return encode_batch(params.encoder, x[None, :])[0]


# --- losses ----------------------------------------------------------------

def instance_match_probs(F, f_probe, tau: float) -> np.ndarray:
    """Probability of ``f_probe`` being recognised as each instance (row) of ``F``."""
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be positive, got {tau}")
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    f_probe = np.asarray(f_probe, dtype=np.float64)
    if F.shape[1] != f_probe.shape[0]:
        raise DimensionMismatch(f"instance dim {F.shape[1]} vs probe dim {f_probe.shape[0]}")
    return softmax(F @ f_probe / tau)


class VisualLoss(NamedTuple):
    value: float
    dF: np.ndarray
    dF_hat: np.ndarray
    clamped: int


def loss_visual(F, F_hat, tau: float) -> VisualLoss:
    """Instance-wise discrimination loss over a batch of m originals/augmentations.

    ``-sum_i log P(i | x_hat_i) - sum_i sum_{j != i} log(1 - P(i | x_j))``.
    """
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be positive, got {tau}")
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(F_hat, dtype=np.float64)
    if F.shape != G.shape or F.ndim != 2:
        raise DimensionMismatch(f"F {F.shape} and F_hat {G.shape} must have equal 2-D shapes")
    m = F.shape[0]
    eye = np.eye(m, dtype=bool)

    # rows: augmented probe i, columns: candidate instance k
    logp_a = log_softmax(G @ F.T / tau, axis=1)
    P_a = np.exp(logp_a)
    value = -np.trace(logp_a)
    dZa = P_a - eye

    # rows: original probe j, columns: candidate instance i; P_b[j, i] = P(i | x_j)
    P_b = softmax(F @ F.T / tau, axis=1)
    one_minus = 1.0 - P_b
    low = (one_minus <= PROB_CLAMP) & ~eye
    clamped = int(low.sum())
    one_minus = np.maximum(one_minus, PROB_CLAMP)
    value -= np.log(one_minus[~eye]).sum()
    U = np.where(eye | low, 0.0, 1.0 / one_minus)
    dZb = P_b * (U - np.einsum("jk,jk->j", U, P_b)[:, None])

    dF = (dZa.T @ G + (dZb + dZb.T) @ F) / tau
    dG = dZa @ F / tau
    return VisualLoss(float(value), dF, dG, clamped)


def class_probs(W, f) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if W.shape[0] != f.shape[-1]:
        raise DimensionMismatch(f"classifier rows {W.shape[0]} vs embedding dim {f.shape[-1]}")
    return softmax(f @ W, axis=-1)


class SemanticLoss(NamedTuple):
    value: float
    dW: np.ndarray
    dF: np.ndarray
    dF_hat: np.ndarray


def _as_onehot(labels, C: int, m: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 1:
        if y.shape[0] != m:
            raise DimensionMismatch(f"{y.shape[0]} labels for {m} samples")
        if y.size and (y.min() < 0 or y.max() >= C):
            raise InvalidLabel(f"labels must lie in [0, {C})")
        return np.eye(C)[y.astype(np.int64)]
    if y.shape != (m, C):
        raise DimensionMismatch(f"one-hot labels must have shape {(m, C)}, got {y.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise InvalidLabel("label rows must be one-hot")
    return y.astype(np.float64)


def loss_semantic(W, F, F_hat, labels) -> SemanticLoss:
    """Coarse classification loss of originals and augmentations.

    ``labels`` is either one-hot rows or an integer vector.
    """
    W = np.asarray(W, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(F_hat, dtype=np.float64)
    if F.shape != G.shape or F.ndim != 2 or W.shape[0] != F.shape[1]:
        raise DimensionMismatch(f"W {W.shape}, F {F.shape}, F_hat {G.shape} are inconsistent")
    Y = _as_onehot(labels, W.shape[1], F.shape[0])
    lp = log_softmax(F @ W, axis=1)
    lq = log_softmax(G @ W, axis=1)
    value = -float(np.sum(Y * lp) + np.sum(Y * lq))
    dA = np.exp(lp) - Y
    dB = np.exp(lq) - Y
    return SemanticLoss(value, F.T @ dA + G.T @ dB, dA @ W.T, dB @ W.T)


class JointLoss(NamedTuple):
    value: float
    grads: dict[str, np.ndarray]
    visual: float
    semantic: float
    clamped: int


def loss_joint(params: BdeParams, X, labels, rng: np.random.Generator | None = None,
               aug: AugmentConfig | None = None, X_hat=None) -> JointLoss:
    """``m * L_visual + n * L_semantic`` and its gradient w.r.t. every parameter.

    Originals and augmentations go through the same encoder weights. Pass
    ``X_hat`` to fix the augmented batch (gradient checks); otherwise it is
    drawn from ``rng`` with ``aug``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise EmptyDataset("empty batch")
    if X_hat is None:
        X_hat = augment_batch(X, aug or AugmentConfig(), rng)
    b = X.shape[0]
    F, cache = encoder_forward(params.encoder, np.vstack([X, X_hat]))
    Fo, Fa = F[:b], F[b:]

    dF = np.zeros_like(F)
    dW = np.zeros_like(params.W)
    vis = sem = 0.0
    clamped = 0
    if params.m != 0:
        lv = loss_visual(Fo, Fa, params.tau)
        vis, clamped = lv.value, lv.clamped
        dF[:b] += params.m * lv.dF
        dF[b:] += params.m * lv.dF_hat
    if params.n != 0:
        ls = loss_semantic(params.W, Fo, Fa, labels)
        sem = ls.value
        dW += params.n * ls.dW
        dF[:b] += params.n * ls.dF
        dF[b:] += params.n * ls.dF_hat
    grads = encoder_backward(params.encoder, cache, dF)
    grads["W"] = dW
    return JointLoss(params.m * vis + params.n * sem, grads, vis, sem, clamped)


# --- optimisation ----------------------------------------------------------

class SGD:
    """SGD with heavy-ball momentum and L2 weight decay on weight matrices.

    ``v <- momentum * v + (g + wd * w)``; ``w <- w - lr * v``. Biases
    (names starting with ``b``) are not decayed.
    """

    def __init__(self, tensors: dict[str, np.ndarray], momentum: float = 0.9, weight_decay: float = 0.0):
        self.tensors = tensors
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for k, w in self.tensors.items():
            g = grads[k]
            if self.weight_decay and not k.startswith("b"):
                g = g + self.weight_decay * w
            v = self.velocity[k]
            v *= self.momentum
            v += g
            w -= lr * v


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    visual: list[float] = field(default_factory=list)
    semantic: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    clamped: int = 0
    selection: list[float] = field(default_factory=list)
    selected_epoch: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _holdout_split(coarse: np.ndarray, fraction: float, rng: np.random.Generator):
    train, held = [], []
    for c in np.unique(coarse):
        idx = np.flatnonzero(coarse == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        k = min(max(k, 1), idx.size - 1) if idx.size > 1 else 0
        held.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def train_bde(dataset, cfg: TrainConfig | None = None, aug: AugmentConfig | None = None,
              init: BdeParams | None = None) -> tuple[BdeParams, TrainHistory]:
    """Train the embedding on coarse labels; returns final params and the per-epoch trace.

    ``dataset`` only needs ``X``, ``coarse`` and ``num_coarse_classes``.
    With ``cfg.select_fraction > 0`` a per-class holdout is scored each epoch
    by a weighted kNN coarse-label probe and the best epoch's params are returned.
    """
    from .metrics import knn_accuracy

    cfg = cfg or TrainConfig()
    aug = aug or AugmentConfig()
    X, y = dataset.X, dataset.coarse
    if len(y) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    rng = make_rng(cfg.seed)
    params = init.copy() if init is not None else init_params(
        X.shape[1], dataset.num_coarse_classes, rng, cfg.hidden, cfg.dim, cfg.tau, cfg.m, cfg.n)

    train_idx = np.arange(len(y))
    held_idx = np.array([], dtype=np.int64)
    if cfg.select_fraction > 0:
        train_idx, held_idx = _holdout_split(y, cfg.select_fraction, rng)

    opt = SGD(params.tensors(), cfg.momentum, cfg.weight_decay)
    hist = TrainHistory()
    best = (-np.inf, None)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = train_idx[rng.permutation(train_idx.size)]
        tot = vis = sem = 0.0
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            out = loss_joint(params, X[batch], y[batch], rng, aug)
            if not np.isfinite(out.value):
                raise DivergenceDetected(
                    f"loss became {out.value} at epoch {epoch}, batch starting {start} (lr={lr:g})")
            b = batch.size
            opt.step({k: g / b for k, g in out.grads.items()}, lr)
            tot += out.value
            vis += out.visual
            sem += out.semantic
            hist.clamped += out.clamped
        hist.loss.append(tot / order.size)
        hist.visual.append(vis / order.size)
        hist.semantic.append(sem / order.size)
        hist.lr.append(lr)
        if held_idx.size:
            acc = knn_accuracy(encode_batch(params.encoder, X[train_idx]), y[train_idx],
                               encode_batch(params.encoder, X[held_idx]), y[held_idx], cfg.select_k)
            hist.selection.append(acc)
            if acc > best[0]:
                best = (acc, params.copy())
                hist.selected_epoch = epoch
        log.debug("epoch %d lr %.4g loss %.5f", epoch, lr, hist.loss[-1])
    if hist.clamped:
        log.warning("log(1 - P) clamped %d times during training", hist.clamped)
    if best[1] is not None:
        params = best[1]
    return params, hist


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64, manifest layout order)."""
    path = Path(path)
    layout = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    manifest = {**meta, "layout": layout, "dtype": "<f8"}
    flat = np.concatenate([np.ravel(v) for v in tensors.values()]).astype("<f8")
    path.with_suffix(".bin").write_bytes(flat.tobytes())
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    raw = path.with_suffix(".bin").read_bytes()
    flat = np.frombuffer(raw, dtype="<f8")
    tensors, pos = {}, 0
    for item in manifest["layout"]:
        shape = tuple(item["shape"])
        size = int(np.prod(shape)) if shape else 1
        if pos + size > flat.size:
            raise FormatError("checkpoint binary is shorter than its layout")
        tensors[item["name"]] = flat[pos:pos + size].reshape(shape).astype(np.float64)
        pos += size
    if pos != flat.size:
        raise FormatError("checkpoint binary is longer than its layout")
    return tensors, manifest


def save_bde(path, params: BdeParams, meta: dict | None = None) -> None:
    meta = {**(meta or {}), "kind": "bde", "tau": params.tau, "m": params.m, "n": params.n,
            "input_dim": params.input_dim, "dim": params.dim, "hidden": params.encoder["W1"].shape[1],
            "num_coarse_classes": params.W.shape[1]}
    save_checkpoint(path, params.tensors(), meta)


def load_bde(path) -> BdeParams:
    tensors, meta = load_checkpoint(path)
    enc = {k: tensors[k] for k in ENCODER_KEYS}
    return BdeParams(enc, tensors["W"], meta["tau"], meta["m"], meta["n"])
