"""Recurrent generator policy over entity storylines.

One gated recurrent cell per modality (txt, img, mm) reads the vectors of the
entities chosen so far; the next entity is scored by a dot product between a
projection of the hidden state and each candidate's vector in that modality.
Visited entities are masked out, so a storyline never repeats an entity.

All heavy lifting happens on index arrays of shape ``(B, T)`` into a
:class:`CandidateSet`; the single-storyline functions are thin wrappers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (ExhaustedVocabularyError, InvalidTrajectoryError,
                     NumericalFault, UnprojectedEntityError)
from .numerics import ParamStore, masked_log_softmax, sgd_step, sigmoid, softmax
from .seqdata import MODALITIES, EntityNode, EventCorpus, Storyline


class GeneratorParams(ParamStore):
    """Per-modality cell weights ``W (4h, k+h)``, ``b (4h)`` and output ``P (k, h)``."""

    def __init__(self, dim: int, hidden: int, params=None):
        super().__init__(params)
        self.dim = dim
        self.hidden = hidden

    @classmethod
    def init(cls, dim: int, hidden: int = 64, seed: int = 0, scale: float = 0.1):
        rng = np.random.default_rng(seed)
        p = cls(dim, hidden)
        for m in MODALITIES:
            p.add(f"{m}.W", rng.uniform(-scale, scale, size=(4 * hidden, dim + hidden)))
            p.add(f"{m}.b", np.zeros(4 * hidden))
            p.add(f"{m}.P", rng.uniform(-scale, scale, size=(dim, hidden)))
        return p

    def block(self, modality: str):
        return self[f"{modality}.W"], self[f"{modality}.b"], self[f"{modality}.P"]


class CandidateSet:
    """An event vocabulary with its txt / img / mm vectors stacked row-wise."""

    def __init__(self, nodes: Sequence[EntityNode], event_id: str = ""):
        self.event_id = event_id
        self.nodes = list(nodes)
        self.names = [n.name for n in self.nodes]
        if len(set(self.names)) != len(self.names):
            raise ValueError("candidate names must be unique")
        self.index = {name: i for i, name in enumerate(self.names)}
        missing = [n.name for n in self.nodes if n.image_vec is None]
        if missing:
            raise UnprojectedEntityError(f"entities without image_vec: {missing[:5]}")
        txt = np.stack([n.text_vec for n in self.nodes]).astype(np.float64)
        img = np.stack([n.image_vec for n in self.nodes]).astype(np.float64)
        self.vecs = {"txt": txt, "img": img, "mm": img - txt}

    @classmethod
    def from_corpus(cls, corpus: EventCorpus) -> "CandidateSet":
        return cls(list(corpus.entities.values()), corpus.event_id)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def dim(self) -> int:
        return self.vecs["txt"].shape[1]

    def indices(self, storylines: Sequence[Storyline]) -> np.ndarray:
        return np.array([[self.index[n] for n in sl.names] for sl in storylines], dtype=np.intp)

    def storyline(self, row: Sequence[int]) -> Storyline:
        return Storyline(self.event_id, tuple(self.nodes[i] for i in row))

    def channels(self, idx: np.ndarray, modality: str, normalize: bool = True) -> np.ndarray:
        """``(B, T, k)`` channel matrices for index rows, optionally shifted by row 0."""
        X = self.vecs[modality][idx]
        if normalize:
            if modality == "mm":
                txt = self.vecs["txt"][idx]
                img = self.vecs["img"][idx]
                txt = txt - txt[:, :1]
                img = img - img[:, :1]
                return img - txt
            X = X - X[:, :1]
        return X


def _weights(lambdas) -> np.ndarray:
    w = np.asarray(lambdas, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0) or not np.any(w > 0):
        raise ValueError(f"modality weights must be 3 non-negative values, not all zero: {lambdas}")
    return w


# -- cell -------------------------------------------------------------------

def _cell_forward(W, b, x, h, c):
    H = h.shape[1]
    xh = np.concatenate([x, h], axis=1)
    z = xh @ W.T + b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    o = sigmoid(z[:, 2 * H:3 * H])
    g = np.tanh(z[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (xh, c, i, f, o, g, tc)


def _cell_backward(W, cache, dh, dc):
    xh, c_prev, i, f, o, g, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dz = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                         do * o * (1.0 - o), dg * (1.0 - g * g)], axis=1)
    dxh = dz @ W
    k = xh.shape[1] - dh.shape[1]
    return dz.T @ xh, dz.sum(axis=0), dxh[:, :k], dxh[:, k:], dc * f


def _scale(params: GeneratorParams, temperature: float = 1.0) -> float:
    return 1.0 / (np.sqrt(params.hidden) * temperature)


def _scores(P, h, X, scale):
    return (h @ P.T) @ X.T * scale


# -- teacher-forced log-probabilities ---------------------------------------

def _forward_logp(params: GeneratorParams, cands: CandidateSet, targets: np.ndarray,
                  modality: str, inputs: np.ndarray | None = None):
    """Log pi(targets[:, t+1] | prefix) for t = 0..T-2 under ``modality``'s policy.

    ``inputs[:, t]`` is the entity fed to the cell at position t (defaults to
    the targets themselves); masking always follows the target prefix.
    """
    W, b, P = params.block(modality)
    X = cands.vecs[modality]
    B, T = targets.shape
    if inputs is None:
        inputs = targets[:, :-1]
    H = params.hidden
    scale = _scale(params)
    rows = np.arange(B)
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    visited = np.zeros((B, len(cands)), dtype=bool)
    logps = np.empty((B, T - 1))
    caches = []
    for t in range(T - 1):
        visited[rows, targets[:, t]] = True
        y = targets[:, t + 1]
        if visited[rows, y].any():
            raise InvalidTrajectoryError("trajectory revisits an entity (zero-probability step)")
        h, c, cell_cache = _cell_forward(W, b, X[inputs[:, t]], h, c)
        scores = _scores(P, h, X, scale)
        mask = ~visited
        lp = masked_log_softmax(scores, mask)
        logps[:, t] = lp[rows, y]
        probs = softmax(scores, mask)
        caches.append((cell_cache, h, probs, y))
    if not np.all(np.isfinite(logps)):
        raise NumericalFault(f"non-finite log-probabilities in {modality} policy")
    return logps, caches


def _backward_logp(params: GeneratorParams, cands: CandidateSet, caches, coeff: np.ndarray,
                   modality: str) -> dict[str, np.ndarray]:
    """Gradient of ``sum(coeff * logps)`` with respect to ``modality``'s block."""
    W, b, P = params.block(modality)
    X = cands.vecs[modality]
    scale = _scale(params)
    dW = np.zeros_like(W)
    db = np.zeros_like(b)
    dP = np.zeros_like(P)
    B = coeff.shape[0]
    rows = np.arange(B)
    dh_next = np.zeros((B, params.hidden))
    dc_next = np.zeros((B, params.hidden))
    for t in range(len(caches) - 1, -1, -1):
        cell_cache, h, probs, y = caches[t]
        dscores = -probs
        dscores[rows, y] += 1.0
        dscores *= coeff[:, t:t + 1] * scale
        dq = dscores @ X
        dP += dq.T @ h
        dh = dq @ P + dh_next
        gW, gb, _, dh_next, dc_next = _cell_backward(W, cell_cache, dh, dc_next)
        dW += gW
        db += gb
    return {f"{modality}.W": dW, f"{modality}.b": db, f"{modality}.P": dP}


def sequence_logprobs(params: GeneratorParams, cands: CandidateSet, idx: np.ndarray,
                      modality: str) -> np.ndarray:
    """Per-step log-probabilities ``(B, T-1)`` for index rows."""
    return _forward_logp(params, cands, idx, modality)[0]


def accumulate_logprob_grad(params: GeneratorParams, cands: CandidateSet, idx: np.ndarray,
                            coeff: np.ndarray, modality: str) -> np.ndarray:
    """Add the gradient of ``sum(coeff * log pi)`` into ``params.grads``; returns log pi."""
    logps, caches = _forward_logp(params, cands, idx, modality)
    for name, g in _backward_logp(params, cands, caches, coeff, modality).items():
        params.accumulate(name, g)
    return logps


# -- batched sampling -------------------------------------------------------

def _draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf <= u[:, None]).sum(axis=1)
    over = idx >= probs.shape[1]
    if over.any():
        last = probs.shape[1] - 1 - np.argmax(probs[over, ::-1] > 0, axis=1)
        idx[over] = last
    return idx


def sample_batch(params: GeneratorParams, cands: CandidateSet, prefix: np.ndarray, T: int,
                 rng: np.random.Generator | None, lambdas=(1.0, 1.0, 1.0),
                 temperature: float = 1.0) -> np.ndarray:
    """Complete each prefix row to length T; returns ``(B, T)`` indices.

    The next entity is drawn from the lambda-weighted mixture of the
    per-modality distributions.  ``temperature == 0`` takes the argmax of the
    temperature-1 mixture instead (ties to the lowest index).
    """
    prefix = np.atleast_2d(np.asarray(prefix, dtype=np.intp))
    B, L = prefix.shape
    n = len(cands)
    if T > n:
        raise ExhaustedVocabularyError(f"storyline length {T} exceeds vocabulary size {n}")
    if L > T:
        raise ValueError("prefix longer than T")
    w = _weights(lambdas)
    active = [(m, wm) for m, wm in zip(MODALITIES, w) if wm > 0]
    tau = 1.0 if temperature == 0 else temperature
    out = np.zeros((B, T), dtype=np.intp)
    out[:, :L] = prefix
    rows = np.arange(B)
    visited = np.zeros((B, n), dtype=bool)
    states = {m: (np.zeros((B, params.hidden)), np.zeros((B, params.hidden))) for m, _ in active}
    for t in range(T - 1):
        visited[rows, out[:, t]] = True
        hidden = {}
        for m, _ in active:
            W, b, P = params.block(m)
            h, c, _ = _cell_forward(W, b, cands.vecs[m][out[:, t]], *states[m])
            states[m] = (h, c)
            hidden[m] = h
        if t + 1 < L:
            if visited[rows, out[:, t + 1]].any():
                raise InvalidTrajectoryError("prefix repeats an entity")
            continue
        mix = np.zeros((B, n))
        for m, wm in active:
            P = params[f"{m}.P"]
            scores = _scores(P, hidden[m], cands.vecs[m], _scale(params, tau))
            mix += wm * softmax(scores, ~visited)
        mix /= sum(wm for _, wm in active)
        mix[visited] = 0.0
        if temperature == 0:
            out[:, t + 1] = np.argmax(mix, axis=1)
        else:
            out[:, t + 1] = _draw(mix, rng)
    return out


# -- single-storyline API ---------------------------------------------------

@dataclass
class PolicyState:
    h: dict[str, np.ndarray]
    c: dict[str, np.ndarray]
    visited: tuple[str, ...] = ()
    t: int = -1

    @classmethod
    def initial(cls, hidden: int) -> "PolicyState":
        return cls({m: np.zeros(hidden) for m in MODALITIES},
                   {m: np.zeros(hidden) for m in MODALITIES})


def step(params: GeneratorParams, state: PolicyState, vectors: dict[str, np.ndarray],
         name: str | None = None) -> PolicyState:
    """Feed one node's per-modality vectors through every cell."""
    h, c = {}, {}
    for m in MODALITIES:
        W, b, _ = params.block(m)
        x = np.asarray(vectors[m], dtype=np.float64)
        if x.shape != (params.dim,):
            raise ValueError(f"{m} vector has shape {x.shape}, expected ({params.dim},)")
        hn, cn, _ = _cell_forward(W, b, x[None], state.h[m][None], state.c[m][None])
        if not (np.all(np.isfinite(hn)) and np.all(np.isfinite(cn))):
            raise NumericalFault(f"non-finite activation in {m} cell")
        h[m], c[m] = hn[0], cn[0]
    visited = state.visited + ((name,) if name is not None else ())
    return PolicyState(h, c, visited, state.t + 1)


def node_vectors(cands: CandidateSet, name: str) -> dict[str, np.ndarray]:
    i = cands.index[name]
    return {m: cands.vecs[m][i] for m in MODALITIES}


def action_dist(params: GeneratorParams, state: PolicyState, cands: CandidateSet,
                modality: str, temperature: float = 1.0) -> np.ndarray:
    """Distribution over all candidates; visited ones get exactly zero."""
    mask = np.ones(len(cands), dtype=bool)
    for name in state.visited:
        mask[cands.index[name]] = False
    if not mask.any():
        raise ExhaustedVocabularyError("every candidate has been visited")
    scores = _scores(params[f"{modality}.P"], state.h[modality][None], cands.vecs[modality],
                     _scale(params, 1.0 if temperature == 0 else temperature))[0]
    p = softmax(scores, mask)
    if temperature == 0:
        onehot = np.zeros_like(p)
        onehot[np.argmax(p)] = 1.0
        return onehot
    return p


def _name(x) -> str:
    return x.name if isinstance(x, EntityNode) else x


def sample_storyline(params: GeneratorParams, start, cands: CandidateSet, T: int, seed: int,
                     lambdas=(1.0, 1.0, 1.0), temperature: float = 1.0) -> Storyline:
    rng = np.random.default_rng(seed)
    prefix = np.array([[cands.index[_name(start)]]])
    return cands.storyline(sample_batch(params, cands, prefix, T, rng, lambdas, temperature)[0])


def rollout_complete(params: GeneratorParams, partial: Storyline, cands: CandidateSet, T: int,
                     n: int, seed: int, lambdas=(1.0, 1.0, 1.0)) -> list[Storyline]:
    """``n`` independent stochastic completions of ``partial`` to length T."""
    if len(partial) >= T:
        raise ValueError(f"partial storyline of length {len(partial)} leaves nothing to roll out")
    rng = np.random.default_rng(seed)
    prefix = np.tile(cands.indices([partial]), (n, 1))
    return [cands.storyline(r) for r in sample_batch(params, cands, prefix, T, rng, lambdas)]


def logprob_grads(params: GeneratorParams, sl: Storyline, cands: CandidateSet, modality: str):
    """Per-step ``log pi(s_t | s_<t)`` and the gradient of each step's log-probability."""
    idx = cands.indices([sl])
    logps, caches = _forward_logp(params, cands, idx, modality)
    grads = []
    for t in range(idx.shape[1] - 1):
        coeff = np.zeros((1, idx.shape[1] - 1))
        coeff[0, t] = 1.0
        grads.append(_backward_logp(params, cands, caches, coeff, modality))
    return logps[0], grads


# -- pretraining ------------------------------------------------------------

def _mixed_inputs(params: GeneratorParams, cands: CandidateSet, targets: np.ndarray,
                  modality: str, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Cell inputs where each position after the start is, with probability
    ``eps``, the model's own sample for that position instead of the target."""
    W, b, P = params.block(modality)
    X = cands.vecs[modality]
    B, T = targets.shape
    rows = np.arange(B)
    inputs = targets[:, :-1].copy()
    h = np.zeros((B, params.hidden))
    c = np.zeros((B, params.hidden))
    visited = np.zeros((B, len(cands)), dtype=bool)
    for t in range(T - 2):
        visited[rows, targets[:, t]] = True
        h, c, _ = _cell_forward(W, b, X[inputs[:, t]], h, c)
        probs = softmax(_scores(P, h, X, _scale(params)), ~visited)
        sampled = _draw(probs, rng)
        flip = rng.random(B) < eps
        inputs[:, t + 1] = np.where(flip, sampled, targets[:, t + 1])
    return inputs


def _nll(params: GeneratorParams, cands: CandidateSet, idx: np.ndarray) -> float:
    return float(sum(-sequence_logprobs(params, cands, idx, m).mean() for m in MODALITIES))


def _pretrain(params, demos, cands, epochs, rate, seed, batch_size, schedule):
    params = params.copy()
    idx = cands.indices(demos)
    if len(idx) == 0:
        raise ValueError("empty demonstration corpus")
    rng = np.random.default_rng(seed)
    ss_rng = np.random.default_rng([seed, 1])
    B = len(idx) if batch_size is None else min(batch_size, len(idx))
    losses = []
    for epoch in range(epochs):
        eps = 0.0 if schedule is None else float(schedule(epoch))
        order = rng.permutation(len(idx))
        for lo in range(0, len(idx), B):
            batch = idx[order[lo:lo + B]]
            params.zero_grads()
            n_steps = batch.shape[1] - 1
            coeff = np.full((len(batch), n_steps), -1.0 / (len(batch) * n_steps))
            for m in MODALITIES:
                inputs = None
                if schedule is not None:
                    inputs = _mixed_inputs(params, cands, batch, m, eps, ss_rng)
                logps, caches = _forward_logp(params, cands, batch, m, inputs)
                for name, g in _backward_logp(params, cands, caches, coeff, m).items():
                    params.accumulate(name, g)
            sgd_step(params, rate)
        loss = _nll(params, cands, idx)
        if not np.isfinite(loss):
            raise NumericalFault(f"non-finite pretraining loss at epoch {epoch}")
        losses.append(loss)
    return params, losses


def mle_pretrain(params: GeneratorParams, demos: Sequence[Storyline], cands: CandidateSet,
                 epochs: int, rate: float, seed: int, batch_size: int | None = None):
    """Teacher-forced next-entity cross-entropy, every modality trained on its
    own channel.  Returns ``(params, per-epoch corpus NLL)``; input is not mutated."""
    return _pretrain(params, demos, cands, epochs, rate, seed, batch_size, None)


def linear_schedule(start: float, end: float, epochs: int) -> Callable[[int], float]:
    def eps(epoch: int) -> float:
        if epochs <= 1:
            return end
        return start + (end - start) * epoch / (epochs - 1)
    return eps


def scheduled_sampling_pretrain(params: GeneratorParams, demos: Sequence[Storyline],
                                cands: CandidateSet, epochs: int, rate: float,
                                schedule: Callable[[int], float], seed: int,
                                batch_size: int | None = None):
    """Like :func:`mle_pretrain` but feeds the model's own samples with
    probability ``schedule(epoch)``."""
    return _pretrain(params, demos, cands, epochs, rate, seed, batch_size, schedule)
