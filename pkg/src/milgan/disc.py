"""Per-modality convolutional sequence critic with a logistic head.

A channel matrix ``(T, k)`` goes through width-2 and width-3 filter banks,
max-over-time pooling, an affine layer and a sigmoid, so the score is a
probability in (0, 1).  The no-log adversarial loss is applied to that
squashed output.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import DimensionError, LengthError, NumericalFault
from .numerics import (ParamStore, conv1d_maxpool, conv1d_maxpool_backward, sgd_step,
                       sigmoid)
from .seqdata import MODALITIES


class DiscParams(ParamStore):
    def __init__(self, dim: int, n_maps: int = 16, widths=(2, 3), params=None):
        super().__init__(params)
        self.dim = dim
        self.n_maps = n_maps
        self.widths = tuple(widths)

    @classmethod
    def init(cls, dim: int, n_maps: int = 16, widths=(2, 3), seed: int = 0,
             scale: float = 0.1):
        rng = np.random.default_rng(seed)
        p = cls(dim, n_maps, widths)
        for m in MODALITIES:
            for w in p.widths:
                p.add(f"{m}.F{w}", rng.uniform(-scale, scale, size=(w, dim, n_maps)))
                p.add(f"{m}.c{w}", np.zeros(n_maps))
            p.add(f"{m}.w", rng.uniform(-scale, scale, size=n_maps * len(p.widths)))
            p.add(f"{m}.b", np.zeros(()))
        return p

    @property
    def min_length(self) -> int:
        return max(self.widths)


def _forward(params: DiscParams, X: np.ndarray, modality: str):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != params.dim:
        raise DimensionError(f"expected (B, T, {params.dim}) channels, got {X.shape}")
    if X.shape[1] < params.min_length:
        raise LengthError(f"sequence length {X.shape[1]} shorter than widest filter "
                          f"{params.min_length}")
    filters = [params[f"{modality}.F{w}"] for w in params.widths]
    biases = [params[f"{modality}.c{w}"] for w in params.widths]
    feats, conv_cache = conv1d_maxpool(X, filters, biases)
    logits = feats @ params[f"{modality}.w"] + params[f"{modality}.b"]
    return sigmoid(logits), (feats, conv_cache)


def _backward(params: DiscParams, cache, dscore: np.ndarray, scores: np.ndarray,
              modality: str) -> dict[str, np.ndarray]:
    feats, conv_cache = cache
    dlogit = dscore * scores * (1.0 - scores)
    grads = {f"{modality}.w": feats.T @ dlogit, f"{modality}.b": np.asarray(dlogit.sum())}
    dfeats = np.outer(dlogit, params[f"{modality}.w"])
    _, dfs, dbs = conv1d_maxpool_backward(conv_cache, dfeats)
    for w, dF, dc in zip(params.widths, dfs, dbs):
        grads[f"{modality}.F{w}"] = dF
        grads[f"{modality}.c{w}"] = dc
    return grads


def score_batch(params: DiscParams, X: np.ndarray, modality: str) -> np.ndarray:
    return _forward(params, X, modality)[0]


def score(params: DiscParams, channel_seq: np.ndarray, modality: str) -> float:
    """Probability in (0, 1) that a single ``(T, k)`` channel is a real demonstration."""
    return float(score_batch(params, np.asarray(channel_seq)[None], modality)[0])


def accumulate_score_grad(params: DiscParams, X: np.ndarray, coeff: np.ndarray,
                          modality: str) -> np.ndarray:
    """Add the gradient of ``sum(coeff * score)`` into ``params.grads``; returns scores."""
    scores, cache = _forward(params, X, modality)
    for name, g in _backward(params, cache, np.asarray(coeff, dtype=np.float64), scores,
                             modality).items():
        params.accumulate(name, g)
    return scores


def _pair(real: Mapping[str, np.ndarray], fake: Mapping[str, np.ndarray]):
    if set(real) != set(fake):
        raise ValueError("real and fake batches must cover the same modalities")
    for m in real:
        if len(real[m]) == 0 or len(fake[m]) == 0:
            raise ValueError(f"empty {m} batch")
        if real[m].shape[1:] != fake[m].shape[1:]:
            raise DimensionError(f"{m}: real {real[m].shape} vs fake {fake[m].shape}")
    return [m for m in MODALITIES if m in real]


def _bce(params, real, fake, modality, accumulate):
    X = np.concatenate([real, fake])
    y = np.concatenate([np.ones(len(real)), np.zeros(len(fake))])
    scores, cache = _forward(params, X, modality)
    eps = 1e-12
    loss = -np.mean(y * np.log(scores + eps) + (1 - y) * np.log(1 - scores + eps))
    if accumulate:
        # d/dD of the mean BCE; the sigmoid factor is applied in _backward
        dscore = -(y / (scores + eps) - (1 - y) / (1 - scores + eps)) / len(X)
        for name, g in _backward(params, cache, dscore, scores, modality).items():
            params.accumulate(name, g)
    return float(loss)


def xent_loss(params: DiscParams, real, fake) -> float:
    return sum(_bce(params, real[m], fake[m], m, False) for m in _pair(real, fake))


def pretrain_xent(params: DiscParams, real: Mapping[str, np.ndarray],
                  fake: Mapping[str, np.ndarray], epochs: int, rate: float, seed: int,
                  batch_size: int | None = None):
    """Binary cross-entropy training, real=1 / fake=0, one critic per modality key.

    Returns ``(params, per-epoch loss on the full batches)``.
    """
    mods = _pair(real, fake)
    params = params.copy()
    rng = np.random.default_rng(seed)
    losses = []
    for epoch in range(epochs):
        for m in mods:
            n_r, n_f = len(real[m]), len(fake[m])
            if batch_size is None:
                batches = [(np.arange(n_r), np.arange(n_f))]
            else:
                pr, pf = rng.permutation(n_r), rng.permutation(n_f)
                batches = [(pr[lo:lo + batch_size], pf[lo:lo + batch_size])
                           for lo in range(0, max(n_r, n_f), batch_size)]
            for ir, jf in batches:
                if len(ir) == 0 or len(jf) == 0:
                    continue
                params.zero_grads()
                _bce(params, real[m][ir], fake[m][jf], m, True)
                sgd_step(params, rate)
        loss = xent_loss(params, real, fake)
        if not np.isfinite(loss):
            raise NumericalFault(f"non-finite discriminator loss at epoch {epoch}")
        losses.append(loss)
    return params, losses


def adversarial_objective(params: DiscParams, real: Mapping[str, np.ndarray],
                  fake: Mapping[str, np.ndarray]) -> float:
    """``-mean(D(real)) - mean(1 - D(fake))`` summed over the given modalities."""
    total = 0.0
    for m in _pair(real, fake):
        total += -score_batch(params, real[m], m).mean() - (1 - score_batch(params, fake[m], m)).mean()
    return float(total)


def train_step_adversarial(params: DiscParams, real: Mapping[str, np.ndarray],
                   fake: Mapping[str, np.ndarray], rate: float):
    """One descent step on the no-log adversarial objective.

    Returns ``(new params, objective before the step)``.
    """
    mods = _pair(real, fake)
    params = params.copy()
    params.zero_grads()
    total = 0.0
    for m in mods:
        n_r, n_f = len(real[m]), len(fake[m])
        coeff = np.concatenate([np.full(n_r, -1.0 / n_r), np.full(n_f, 1.0 / n_f)])
        scores = accumulate_score_grad(params, np.concatenate([real[m], fake[m]]), coeff, m)
        total += -scores[:n_r].mean() - (1.0 - scores[n_r:]).mean()
    if not np.isfinite(total):
        raise NumericalFault("non-finite discriminator objective")
    sgd_step(params, rate, names=[n for n in params.names() if n.split(".")[0] in mods])
    return params, float(total)
