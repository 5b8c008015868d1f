"""Storyline data model, JSONL ingestion, augmentation and a synthetic corpus."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (DanglingReferenceError, InfeasibleError, SchemaError,
                     UnprojectedEntityError)

logger = logging.getLogger(__name__)

MODALITIES = ("txt", "img", "mm")


@dataclass(frozen=True, eq=False)
class EntityNode:
    name: str
    text_vec: np.ndarray
    image_feat: np.ndarray | None = None
    image_vec: np.ndarray | None = None

    def __post_init__(self):
        if not self.name:
            raise SchemaError("entity name must be non-empty")

    def with_image_vec(self, vec) -> "EntityNode":
        return replace(self, image_vec=np.asarray(vec, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Storyline:
    event_id: str
    nodes: tuple[EntityNode, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        names = self.names
        if len(names) < 1:
            raise SchemaError("storyline must have at least one node")
        if len(set(names)) != len(names):
            raise SchemaError(f"storyline repeats an entity: {names}")

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True, eq=False)
class ModalSequence:
    txt: np.ndarray
    img: np.ndarray
    mm: np.ndarray

    def channel(self, modality: str) -> np.ndarray:
        return getattr(self, modality)


@dataclass(eq=False)
class EventCorpus:
    event_id: str
    entities: dict[str, EntityNode]
    storylines: list[Storyline] = field(default_factory=list)
    role: str = "train"
    missing_images: int = 0

    @property
    def dim(self) -> int:
        return len(next(iter(self.entities.values())).text_vec)

    def names(self) -> list[str]:
        return list(self.entities)


def check_disjoint(a: EventCorpus, b: EventCorpus) -> None:
    shared = set(a.entities) & set(b.entities)
    if shared:
        raise SchemaError(f"corpora {a.event_id!r} and {b.event_id!r} share entities: "
                          f"{sorted(shared)[:5]}")


# -- ingestion --------------------------------------------------------------

def _vec(record, key, lineno, expected=None):
    try:
        arr = np.asarray(record[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {lineno}: {key} is not a real vector") from exc
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise SchemaError(f"line {lineno}: {key} must be a finite 1-D vector")
    if expected is not None and arr.shape[0] != expected:
        raise SchemaError(f"line {lineno}: {key} has dimension {arr.shape[0]}, "
                          f"expected {expected}")
    return arr


def load_dataset(path: str | Path, role: str = "train") -> list[EventCorpus]:
    """Read a line-delimited JSON dataset of entity and storyline records.

    Entities lacking ``image_feat`` get their text vector as image vector
    (so their mm row is zero); the count is kept in ``missing_images``.
    """
    events: dict[str, EventCorpus] = {}
    k = d = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            kind = rec.get("kind")
            event = rec.get("event")
            if not isinstance(event, str):
                raise SchemaError(f"line {lineno}: missing event id")
            corpus = events.setdefault(event, EventCorpus(event, {}, role=role))
            if kind == "entity":
                name = rec.get("name")
                if not isinstance(name, str) or not name:
                    raise SchemaError(f"line {lineno}: entity needs a non-empty name")
                if name in corpus.entities:
                    raise SchemaError(f"line {lineno}: duplicate entity {name!r}")
                text_vec = _vec(rec, "text_vec", lineno, k)
                k = text_vec.shape[0]
                image_feat = image_vec = None
                if rec.get("image_feat") is not None:
                    image_feat = _vec(rec, "image_feat", lineno, d)
                    d = image_feat.shape[0]
                if rec.get("image_vec") is not None:
                    image_vec = _vec(rec, "image_vec", lineno, k)
                if image_feat is None and image_vec is None:
                    image_vec = text_vec.copy()
                    corpus.missing_images += 1
                corpus.entities[name] = EntityNode(name, text_vec, image_feat, image_vec)
            elif kind == "storyline":
                names = rec.get("nodes")
                if not isinstance(names, list) or len(names) < 2:
                    raise SchemaError(f"line {lineno}: storyline needs at least 2 nodes")
                nodes = []
                for n in names:
                    if n not in corpus.entities:
                        raise DanglingReferenceError(
                            f"line {lineno}: storyline references undeclared entity {n!r}")
                    nodes.append(corpus.entities[n])
                try:
                    corpus.storylines.append(Storyline(event, tuple(nodes)))
                except SchemaError as exc:
                    raise SchemaError(f"line {lineno}: {exc}") from exc
            else:
                raise SchemaError(f"line {lineno}: unknown record kind {kind!r}")
    for corpus in events.values():
        if corpus.missing_images:
            logger.warning("event %s: %d entities without image features; text vector "
                           "substituted", corpus.event_id, corpus.missing_images)
    return list(events.values())


def _floats(v) -> list[float]:
    return [float(x) for x in v]


def dump_dataset(corpora: Iterable[EventCorpus], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for corpus in corpora:
            for node in corpus.entities.values():
                rec = {"kind": "entity", "event": corpus.event_id, "name": node.name,
                       "text_vec": _floats(node.text_vec)}
                if node.image_feat is not None:
                    rec["image_feat"] = _floats(node.image_feat)
                if node.image_vec is not None:
                    rec["image_vec"] = _floats(node.image_vec)
                fh.write(json.dumps(rec) + "\n")
            for sl in corpus.storylines:
                fh.write(json.dumps({"kind": "storyline", "event": corpus.event_id,
                                     "nodes": sl.names}) + "\n")


# -- sequence transforms ----------------------------------------------------

def normalize_sequence(s: ModalSequence) -> ModalSequence:
    """Subtract each channel's first row from all of its rows.

    The mm channel is rebuilt as ``img - txt`` of the shifted channels, which
    equals shifting mm by its own first row but keeps the difference exact.
    """
    txt = s.txt - s.txt[0]
    img = s.img - s.img[0]
    return ModalSequence(txt, img, img - txt)


def slice_windows(s: Storyline, window: int) -> list[Storyline]:
    if window < 2:
        raise ValueError("window must be at least 2")
    return [Storyline(s.event_id, s.nodes[i:i + window])
            for i in range(max(0, len(s) - window + 1))]


def to_modal_sequence(s: Storyline, normalize: bool = True) -> ModalSequence:
    missing = [n.name for n in s.nodes if n.image_vec is None]
    if missing:
        raise UnprojectedEntityError(f"entities without image_vec: {missing}")
    txt = np.stack([n.text_vec for n in s.nodes]).astype(np.float64)
    img = np.stack([n.image_vec for n in s.nodes]).astype(np.float64)
    seq = ModalSequence(txt, img, img - txt)
    return normalize_sequence(seq) if normalize else seq


# -- synthetic planted-policy corpus ----------------------------------------

@dataclass
class PlantedPolicy:
    """Ground-truth successor function for every synthetic vocabulary."""
    successor: dict[str, str]

    def next(self, name: str) -> str:
        return self.successor[name]

    def chain(self, start: str, length: int) -> list[str]:
        out = [start]
        while len(out) < length:
            out.append(self.successor[out[-1]])
        return out

    def match_rate(self, storylines: Sequence[Storyline]) -> float:
        """Fraction of transitions that follow the planted successor."""
        hits = total = 0
        for sl in storylines:
            names = sl.names
            for a, b in zip(names, names[1:]):
                hits += self.successor.get(a) == b
                total += 1
        return hits / total if total else 0.0


def _block_rotation(k: int, angles: Sequence[float]) -> np.ndarray:
    A = np.eye(k)
    for b, theta in enumerate(angles):
        i = 2 * b
        c, s = np.cos(theta), np.sin(theta)
        A[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    return A


def _cycle_frequencies(n: int, n_planes: int) -> list[int]:
    coprime = [q for q in range(1, n // 2 + 1) if np.gcd(q, n) == 1] or [1]
    return [coprime[b % len(coprime)] for b in range(n_planes)]


def synth_corpus(n_entities: int = 20, k: int = 8, d: int = 12, T: int = 4,
                 n_storylines: int = 200, seed: int = 0, noise: float = 0.03
                 ) -> tuple[EventCorpus, EventCorpus, PlantedPolicy]:
    """Seeded train/test corpora that share one planted successor rule.

    Entities of each vocabulary lie on one orbit of a fixed block rotation
    ``A`` (period ``n_entities``), so the successor of ``x`` is the entity
    nearest to ``A @ x``.  Image vectors are a second fixed rotation of the
    text vectors; raw image features are a random linear lift to ``d`` dims.
    Train and test orbits start from different points and share no names.
    """
    if n_entities < T:
        raise InfeasibleError(f"need at least T={T} entities, got {n_entities}")
    if k < 2:
        raise InfeasibleError("embedding dimension must be at least 2")
    rng = np.random.default_rng(seed)
    n_planes = k // 2
    freqs = _cycle_frequencies(n_entities, n_planes)
    A = _block_rotation(k, [2 * np.pi * q / n_entities for q in freqs])
    R = _block_rotation(k, [np.pi / 2] * n_planes)
    G = rng.normal(size=(d, k)) / np.sqrt(k)
    successor: dict[str, str] = {}

    def build(event: str, prefix: str, role: str) -> EventCorpus:
        phases = rng.uniform(0, 2 * np.pi, size=n_planes)
        x0 = np.zeros(k)
        x0[0:2 * n_planes:2] = np.cos(phases)
        x0[1:2 * n_planes:2] = np.sin(phases)
        if k % 2:
            x0[-1] = 1.0
        x0 /= np.linalg.norm(x0)
        entities = {}
        x = x0
        names = [f"{prefix}{i:03d}" for i in range(n_entities)]
        for i, name in enumerate(names):
            tv = x + noise * rng.normal(size=k)
            tv /= np.linalg.norm(tv)
            iv = R @ tv + noise * rng.normal(size=k)
            iv /= np.linalg.norm(iv)
            feat = G @ iv + noise * rng.normal(size=d)
            entities[name] = EntityNode(name, tv, feat, iv)
            successor[name] = names[(i + 1) % n_entities]
            x = A @ x
        corpus = EventCorpus(event, entities, role=role)
        if role == "train":
            starts = rng.integers(0, n_entities, size=n_storylines)
        else:
            starts = np.arange(n_entities)
        for s in starts:
            chain = [names[(s + t) % n_entities] for t in range(T)]
            corpus.storylines.append(Storyline(event, tuple(entities[c] for c in chain)))
        return corpus

    train = build("synth-train", "tr", "train")
    test = build("synth-test", "te", "test")
    return train, test, PlantedPolicy(successor)


def windows_of(corpus: EventCorpus, window: int) -> list[Storyline]:
    out = []
    for sl in corpus.storylines:
        out.extend(slice_windows(sl, window))
    return out
