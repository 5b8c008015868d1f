"""Image-conditioned factored word model.

Next-word scores are ``U^T diag(sigma @ image) V @ C`` where ``C`` is a
learned-weight average of the most recent context word vectors.  The image
enters only through the diagonal, so ``(V C) * (sigma @ image)`` is the
fused factor and ``U`` is the output word table.  After training, an image is
placed in word space by ``V^T (sigma @ image) / j``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericalFault, SchemaError
from .numerics import ParamStore, sgd_step, softmax, softmax_backward

FORMAT = "milgan-mm-v1"


class MMParams(ParamStore):
    """Trainables ``U (j, v)``, ``sigma (j, d)``, ``V (j, k)`` and context logits;
    ``word_embed (v, k)`` is fixed."""

    def __init__(self, word_embed: np.ndarray, params=None):
        super().__init__(params)
        self.word_embed = np.asarray(word_embed, dtype=np.float64)

    @classmethod
    def init(cls, word_embed: np.ndarray, image_dim: int, rank: int = 32, window: int = 3,
             seed: int = 0, scale: float = 0.1) -> "MMParams":
        word_embed = np.asarray(word_embed, dtype=np.float64)
        v, k = word_embed.shape
        if min(v, k, image_dim, rank, window) <= 0:
            raise DimensionError("all model dimensions must be positive")
        rng = np.random.default_rng(seed)
        p = cls(word_embed)
        p.add("U", rng.uniform(-scale, scale, size=(rank, v)))
        p.add("sigma", rng.uniform(-scale, scale, size=(rank, image_dim)))
        p.add("V", rng.uniform(-scale, scale, size=(rank, k)))
        p.add("ctx_logits", np.zeros(window))
        return p

    @property
    def rank(self) -> int:
        return self["U"].shape[0]

    @property
    def vocab(self) -> int:
        return self["U"].shape[1]

    @property
    def image_dim(self) -> int:
        return self["sigma"].shape[1]

    @property
    def window(self) -> int:
        return self["ctx_logits"].shape[0]

    @property
    def ctx_weights(self) -> np.ndarray:
        """Mixing weights over context positions, most recent first."""
        return softmax(self["ctx_logits"])


@dataclass(frozen=True)
class MMCorpusItem:
    description: tuple[int, ...]
    image_feat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "description", tuple(int(w) for w in self.description))
        if len(self.description) < 2:
            raise SchemaError("description needs at least two words")


def _image(p: MMParams, image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (p.image_dim,):
        raise DimensionError(f"image has shape {image.shape}, expected ({p.image_dim},)")
    return image


def cond_word_matrix(p: MMParams, image) -> np.ndarray:
    """``U^T diag(sigma @ image) V``, a ``(v, k)`` image-specific word map."""
    s = p["sigma"] @ _image(p, image)
    return p["U"].T @ (s[:, None] * p["V"])


def context_vector(p: MMParams, context: Sequence[int]) -> np.ndarray:
    return _context(p, context)[0]


def _context(p: MMParams, context: Sequence[int]):
    if len(context) == 0:
        raise ValueError("context must be non-empty")
    recent = list(context)[::-1][:p.window]
    w = softmax(p["ctx_logits"][:len(recent)])
    E = p.word_embed[recent]
    return w @ E, (recent, w, E)


def _forward(p: MMParams, context, image):
    C, ctx_cache = _context(p, context)
    u = p["V"] @ C
    s = p["sigma"] @ image
    psi = u * s
    logits = p["U"].T @ psi
    return softmax(logits), (C, ctx_cache, u, s, psi)


def predict_next(p: MMParams, context: Sequence[int], image) -> np.ndarray:
    return _forward(p, context, _image(p, image))[0]


def _pair_loss(p: MMParams, context, target: int, image, accumulate: bool) -> float:
    probs, (C, (recent, w, E), u, s, psi) = _forward(p, context, image)
    loss = -np.log(probs[target]) if probs[target] > 0 else np.inf
    if accumulate:
        dlogits = probs.copy()
        dlogits[target] -= 1.0
        p.accumulate("U", np.outer(psi, dlogits))
        dpsi = p["U"] @ dlogits
        du = dpsi * s
        ds = dpsi * u
        p.accumulate("V", np.outer(du, C))
        p.accumulate("sigma", np.outer(ds, image))
        dC = p["V"].T @ du
        dlog = np.zeros(p.window)
        dlog[:len(recent)] = softmax_backward(w, E @ dC)
        p.accumulate("ctx_logits", dlog)
    return float(loss)


def _pairs(items: Sequence[MMCorpusItem]):
    for item in items:
        for n in range(1, len(item.description)):
            yield item.description[:n], item.description[n], item.image_feat


def corpus_nll(p: MMParams, items: Sequence[MMCorpusItem], zero_image: bool = False) -> float:
    """Mean next-word negative log-likelihood over every (prefix, next word) pair."""
    losses = []
    for ctx, y, img in _pairs(items):
        img = np.zeros(p.image_dim) if zero_image else _image(p, img)
        losses.append(_pair_loss(p, ctx, y, img, False))
    return float(np.mean(losses))


def item_loss_and_grad(p: MMParams, items: Sequence[MMCorpusItem]) -> float:
    """Summed NLL over all pairs of ``items``; gradients are added to ``p.grads``."""
    return sum(_pair_loss(p, ctx, y, _image(p, img), True) for ctx, y, img in _pairs(items))


def train_mm(items: Sequence[MMCorpusItem], p: MMParams, epochs: int, rate: float,
             seed: int):
    """Per-item SGD on next-word NLL in a seeded shuffled order.

    Returns ``(params, per-epoch corpus NLL)``; the input is not mutated.
    """
    p = p.copy()
    for item in items:
        if max(item.description) >= p.vocab:
            raise SchemaError(f"word id {max(item.description)} outside vocabulary {p.vocab}")
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        for i in rng.permutation(len(items)):
            p.zero_grads()
            item_loss_and_grad(p, [items[i]])
            try:
                sgd_step(p, rate)
            except NumericalFault as exc:
                raise NumericalFault(f"epoch {epoch}: {exc}") from exc
        nll = corpus_nll(p, items)
        if not np.isfinite(nll):
            raise NumericalFault(f"non-finite NLL at epoch {epoch}")
        history.append(nll)
    return p, history


def embed_image(p: MMParams, image) -> np.ndarray:
    """Word-space point ``V^T (sigma @ image) / j`` for an image."""
    return p["V"].T @ (p["sigma"] @ _image(p, image)) / p.rank


def save_mm(p: MMParams, path: str | Path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, __format__=np.array(FORMAT), word_embed=p.word_embed,
                 **{f"param.{k}": v for k, v in p.params.items()})


def load_mm(path: str | Path) -> MMParams:
    with np.load(path, allow_pickle=False) as z:
        if "__format__" not in z or str(z["__format__"]) != FORMAT:
            raise SchemaError(f"{path}: not a {FORMAT} file")
        params = {k[len("param."):]: z[k] for k in z.files if k.startswith("param.")}
        return MMParams(z["word_embed"], params)


def synth_mm_corpus(n_items: int, vocab: int = 7, dim: int = 8, image_dim: int = 6,
                    seed: int = 0, noise: float = 0.1):
    """Two image classes; the words after the shared first word are determined
    by the class.  Returns ``(items, classes, word_embed)``."""
    if vocab < 5:
        raise ValueError("vocab must be at least 5")
    rng = np.random.default_rng(seed)
    prototypes = rng.choice([-1.0, 1.0], size=(2, image_dim))
    word_embed = rng.normal(size=(vocab, dim)) / np.sqrt(dim)
    items, classes = [], []
    for _ in range(n_items):
        c = int(rng.integers(0, 2))
        image = prototypes[c] + noise * rng.normal(size=image_dim)
        words = [0, 1 + c, 3 + c]
        if vocab >= 7:
            words.append(5 + c)
        items.append(MMCorpusItem(tuple(words), image))
        classes.append(c)
    return items, np.array(classes), word_embed
