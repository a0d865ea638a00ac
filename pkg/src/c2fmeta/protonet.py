"""Prototypical-network meta-learner trained on (pseudo-)labelled episodes."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .bde import SGD, encode_batch, encoder_backward, encoder_forward, init_encoder
from .episodes import Episode, episode_stream
from .errors import DimensionMismatch, DivergenceDetected, EmptyClass
from .metrics import EvalReport, accuracy_ci
from .numerics import log_softmax, make_rng, softmax

log = logging.getLogger(__name__)


def prototypes(support_emb, support_y, N: int) -> np.ndarray:
    """Per-class mean of support embeddings, one prototype per row (not re-normalised)."""
    E = np.atleast_2d(np.asarray(support_emb, dtype=np.float64))
    y = np.asarray(support_y)
    counts = np.bincount(y, minlength=N)[:N]
    if np.any(counts == 0):
        raise EmptyClass(f"episode labels {np.flatnonzero(counts == 0).tolist()} have no support")
    P = np.zeros((N, E.shape[1]))
    np.add.at(P, y, E)
    return P / counts[:, None]


def _sq_dists(Qe: np.ndarray, P: np.ndarray) -> np.ndarray:
    if Qe.shape[-1] != P.shape[-1]:
        raise DimensionMismatch(f"query dim {Qe.shape[-1]} vs prototype dim {P.shape[-1]}")
    diff = Qe[:, None, :] - P[None, :, :]
    return np.einsum("qnd,qnd->qn", diff, diff)


def classify_query(f, P, scale: float = 1.0) -> np.ndarray:
    """Softmax over ``-scale * ||f - P_n||^2``."""
    f = np.asarray(f, dtype=np.float64)
    return softmax(-scale * _sq_dists(np.atleast_2d(f), np.atleast_2d(P)), axis=-1).reshape(
        f.shape[:-1] + (np.atleast_2d(P).shape[0],))


def embedding_loss(support_emb, support_y, query_emb, query_y, N: int, scale: float = 1.0):
    """Mean query cross-entropy; returns (loss, d support_emb, d query_emb)."""
    S = np.asarray(support_emb, dtype=np.float64)
    Qe = np.asarray(query_emb, dtype=np.float64)
    sy = np.asarray(support_y)
    qy = np.asarray(query_y)
    P = prototypes(S, sy, N)
    logp = log_softmax(-scale * _sq_dists(Qe, P), axis=1)
    nq = Qe.shape[0]
    loss = -float(logp[np.arange(nq), qy].mean())

    dlog = np.exp(logp)
    dlog[np.arange(nq), qy] -= 1.0
    dlog /= nq
    row = dlog.sum(axis=1)
    col = dlog.sum(axis=0)
    dQ = -2.0 * scale * (Qe * row[:, None] - dlog @ P)
    dP = -2.0 * scale * (P * col[:, None] - dlog.T @ Qe)
    counts = np.bincount(sy, minlength=N)
    dS = dP[sy] / counts[sy][:, None]
    return loss, dS, dQ


def episode_loss(enc: dict[str, np.ndarray], episode: Episode, scale: float = 1.0):
    """Cross-entropy of an episode and its gradient w.r.t. every encoder tensor."""
    ns = episode.support_x.shape[0]
    F, cache = encoder_forward(enc, np.vstack([episode.support_x, episode.query_x]))
    loss, dS, dQ = embedding_loss(F[:ns], episode.support_y, F[ns:], episode.query_y, episode.N, scale)
    grads = encoder_backward(enc, cache, np.vstack([dS, dQ]))
    return loss, grads


@dataclass
class MetaTrainConfig:
    episodes_per_epoch: int = 100
    epochs: int = 20
    N: int = 5
    K: int = 1
    Q: int = 15
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    hidden: int = 64
    dim: int = 32
    scale: float = 1.0
    warm_start: str | None = None

    def __post_init__(self):
        if min(self.episodes_per_epoch, self.epochs, self.N, self.K, self.Q) < 1:
            raise ValueError("episode and epoch counts must be positive")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")


@dataclass
class MetaHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def meta_train(source, cfg: MetaTrainConfig | None = None,
               init: dict[str, np.ndarray] | None = None) -> tuple[dict[str, np.ndarray], MetaHistory]:
    """Episodic SGD on ``source`` (anything with ``X`` and ``class_indices()``).

    ``init`` warm-starts from existing encoder weights; otherwise the encoder
    is freshly initialised from ``cfg.seed``.
    """
    cfg = cfg or MetaTrainConfig()
    rng = make_rng(cfg.seed)
    if init is not None:
        enc = {k: v.copy() for k, v in init.items()}
    else:
        enc = init_encoder(source.X.shape[1], cfg.hidden, cfg.dim, rng)
    stream = episode_stream(source, cfg.N, cfg.K, cfg.Q, cfg.epochs * cfg.episodes_per_epoch,
                            int(rng.integers(2**63)))
    opt = SGD(enc, cfg.momentum, cfg.weight_decay)
    hist = MetaHistory()
    for epoch in range(cfg.epochs):
        tot = acc = 0.0
        for _ in range(cfg.episodes_per_epoch):
            ep = next(stream)
            ns = ep.support_x.shape[0]
            F, cache = encoder_forward(enc, np.vstack([ep.support_x, ep.query_x]))
            loss, dS, dQ = embedding_loss(F[:ns], ep.support_y, F[ns:], ep.query_y, ep.N, cfg.scale)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"episode loss became {loss} in epoch {epoch}")
            P = prototypes(F[:ns], ep.support_y, ep.N)
            acc += float(np.mean(np.argmin(_sq_dists(F[ns:], P), axis=1) == ep.query_y))
            tot += loss
            opt.step(encoder_backward(enc, cache, np.vstack([dS, dQ])), cfg.lr)
        hist.loss.append(tot / cfg.episodes_per_epoch)
        hist.accuracy.append(acc / cfg.episodes_per_epoch)
        log.debug("meta epoch %d loss %.4f acc %.4f", epoch, hist.loss[-1], hist.accuracy[-1])
    return enc, hist


def meta_eval(embed: dict[str, np.ndarray] | Callable, dataset, N: int = 5, K: int = 1, Q: int = 15,
              count: int = 1000, seed: int = 0) -> EvalReport:
    """Mean query accuracy of nearest-prototype classification over ``count`` episodes.

    ``embed`` is an encoder parameter dict or any callable mapping a feature
    matrix to embeddings. Ties in distance resolve to the lowest episode label.
    """
    fn = embed if callable(embed) else (lambda X: encode_batch(embed, X))
    E = np.asarray(fn(dataset.X), dtype=np.float64)
    accs = np.empty(count)
    for i, ep in enumerate(episode_stream(dataset, N, K, Q, count, seed)):
        P = prototypes(E[ep.support_idx], ep.support_y, N)
        pred = np.argmin(_sq_dists(E[ep.query_idx], P), axis=1)
        accs[i] = np.mean(pred == ep.query_y)
    return accuracy_ci(accs, n_way=N, k_shot=K, q_query=Q, seed=seed)
