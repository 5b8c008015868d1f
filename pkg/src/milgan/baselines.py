"""Comparison generators: uniform random, MLE-only, scheduled sampling, and
REINFORCE with a similarity reward."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ExhaustedVocabularyError
from .gan import TrainConfig, _onehot, demonstrations, pretrain_generator
from .metrics import cosine_matrix
from .numerics import sgd_step
from .policy import (CandidateSet, GeneratorParams, accumulate_logprob_grad, linear_schedule,
                     sample_batch, scheduled_sampling_pretrain)
from .seqdata import MODALITIES, EventCorpus, Storyline


def baseline_random(cands: CandidateSet, starts: Sequence[str], T: int, seed: int
                    ) -> list[Storyline]:
    """Uniform sampling without repeats from each start."""
    if T > len(cands):
        raise ExhaustedVocabularyError(f"T={T} exceeds vocabulary size {len(cands)}")
    rng = np.random.default_rng(seed)
    out = []
    for s in starts:
        names = [s]
        pool = [n for n in cands.names if n != s]
        for _ in range(T - 1):
            names.append(pool.pop(int(rng.integers(0, len(pool)))))
        out.append(cands.storyline([cands.index[n] for n in names]))
    return out


def similarity_reward(cands: CandidateSet, idx: np.ndarray, real: np.ndarray,
                      modality: str) -> np.ndarray:
    """Best Frobenius cosine of each generated row to any demonstration."""
    return cosine_matrix(cands.channels(idx, modality), cands.channels(real, modality)).max(axis=1)


def baseline_pg_similarity(corpus: EventCorpus, cfg: TrainConfig,
                           init: GeneratorParams | None = None) -> GeneratorParams:
    """REINFORCE from the pretrained generator with a terminal similarity reward.

    Same update shape as the adversarial generator step, but the reward is the
    maximum cosine to a training sequence and no discriminator is involved.
    """
    demos = demonstrations(corpus, cfg)
    cands = CandidateSet.from_corpus(corpus)
    real = cands.indices(demos)
    gen = (init if init is not None else pretrain_generator(corpus, cfg)).copy()
    rng = np.random.default_rng([cfg.seed, 5])
    names = [n for n in gen.names() if cfg.lambdas[MODALITIES.index(n.split(".")[0])] > 0]
    for _ in range(cfg.rounds):
        gen.zero_grads()
        starts = real[rng.integers(0, len(real), cfg.batch_size), 0]
        for m, lam in zip(MODALITIES, cfg.lambdas):
            if lam == 0:
                continue
            S = sample_batch(gen, cands, starts[:, None], cfg.T, rng, _onehot(m))
            R = similarity_reward(cands, S, real, m)
            coeff = np.repeat(R[:, None], cfg.T - 1, axis=1) * lam / cfg.T / len(S)
            accumulate_logprob_grad(gen, cands, S, coeff, m)
        sgd_step(gen, cfg.alpha, ascent=True, names=names)
    return gen


def baseline_ss(corpus: EventCorpus, cfg: TrainConfig) -> GeneratorParams:
    """Scheduled-sampling pretraining with a linear ``ss_start -> ss_end`` schedule."""
    demos = demonstrations(corpus, cfg)
    cands = CandidateSet.from_corpus(corpus)
    gen = GeneratorParams.init(cands.dim, cfg.hidden, seed=cfg.seed)
    schedule = linear_schedule(cfg.ss_start, cfg.ss_end, cfg.gen_pretrain_epochs)
    gen, _ = scheduled_sampling_pretrain(gen, demos, cands, cfg.gen_pretrain_epochs,
                                         cfg.gen_rate, schedule, cfg.seed, cfg.batch_size)
    return gen
