"""Accumulated Frobenius-cosine similarity between sets of sequence matrices."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError
from .seqdata import ModalSequence


def _unit_rows(X: np.ndarray) -> np.ndarray:
    flat = X.reshape(len(X), -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    out = np.zeros_like(flat)
    nz = norms > 0
    out[nz] = flat[nz] / norms[nz, None]
    return out


def cosine_matrix(reference: np.ndarray, generated: np.ndarray) -> np.ndarray:
    """Pairwise Frobenius cosines; any zero-norm matrix contributes 0."""
    reference = np.asarray(reference, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if reference.shape[1:] != generated.shape[1:]:
        raise DimensionError(f"shape mismatch: reference {reference.shape[1:]} vs "
                             f"generated {generated.shape[1:]}")
    return _unit_rows(reference) @ _unit_rows(generated).T


def sum_sim_arrays(reference: np.ndarray, generated: np.ndarray) -> float:
    return float(cosine_matrix(reference, generated).sum())


def stack_channel(seqs: Sequence[ModalSequence], channel: str) -> np.ndarray:
    mats = [s.channel(channel) for s in seqs]
    if len({m.shape for m in mats}) > 1:
        raise DimensionError(f"{channel} matrices differ in shape")
    return np.stack(mats)


def sum_sim(reference: Sequence[ModalSequence], generated: Sequence[ModalSequence],
            channel: str = "txt") -> float:
    """Sum over all (reference, generated) pairs of <A, B>_F / (|A|_F |B|_F)."""
    if not reference or not generated:
        return 0.0
    return sum_sim_arrays(stack_channel(reference, channel), stack_channel(generated, channel))
