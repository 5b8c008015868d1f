"""Alternating adversarial imitation training.

The generator ascends ``sum_i lambda_i E_i[D_i(SL)]`` with the likelihood-ratio
estimator, each modality's policy sampled on its own; Q values come from the
matching discriminator (exact for complete sequences, Monte-Carlo rollouts for
prefixes).  Discriminators descend the no-log adversarial objective.  An
exhaustive enumeration oracle is provided for small vocabularies.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import disc as D
from .errors import LengthError, MilganError, SchemaError, TransferError
from .metrics import sum_sim_arrays
from .numerics import sgd_step
from .policy import (CandidateSet, GeneratorParams, PolicyState, accumulate_logprob_grad,
                     action_dist, mle_pretrain, node_vectors, sample_batch, step)
from .seqdata import MODALITIES, EventCorpus, Storyline, windows_of

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    alpha: float = 0.05
    n_rollouts: int = 16
    g_steps: int = 1
    d_steps: int = 1
    rounds: int = 50
    gen_pretrain_epochs: int = 150
    disc_pretrain_epochs: int = 50
    T: int = 4
    seed: int = 0
    hidden: int = 32
    gen_rate: float = 0.5
    disc_rate: float = 0.05
    disc_pretrain_rate: float = 0.1
    disc_maps: int = 16
    batch_size: int = 32
    window: int = 0
    temperature: float = 1.0
    patience: int = 5
    plateau_tol: float = 1e-3
    eval_channel: str = "txt"
    restore_best: bool = False
    ss_start: float = 0.0
    ss_end: float = 0.5

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if len(self.lambdas) != 3 or min(self.lambdas) < 0 or max(self.lambdas) <= 0:
            raise SchemaError(f"lambdas must be 3 non-negative values, not all zero: "
                              f"{self.lambdas}")
        if self.n_rollouts < 1:
            raise SchemaError("n_rollouts must be at least 1")
        if self.T < 2:
            raise SchemaError("T must be at least 2")
        if self.eval_channel not in MODALITIES:
            raise SchemaError(f"eval_channel must be one of {MODALITIES}")

    @property
    def window_length(self) -> int:
        return self.window or self.T

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise SchemaError(f"unknown config key {key!r}")
            default = fields[key].default
            try:
                if key == "lambdas":
                    kwargs[key] = tuple(float(x) for x in str(raw).split(","))
                elif isinstance(default, bool):
                    if str(raw).lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(raw)
                    kwargs[key] = str(raw).lower() in ("true", "1", "yes")
                elif isinstance(default, int):
                    kwargs[key] = int(raw)
                elif isinstance(default, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw)
            except ValueError as exc:
                raise SchemaError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        values = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise SchemaError(f"config line {lineno}: expected key = value")
                key, value = (s.strip() for s in line.split("=", 1))
                values[key] = value
        return cls.from_mapping(values)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "lambdas":
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _onehot(modality: str) -> tuple[float, float, float]:
    return tuple(1.0 if m == modality else 0.0 for m in MODALITIES)


# -- Q estimation -----------------------------------------------------------

def q_values(gen: GeneratorParams, disc: D.DiscParams, cands: CandidateSet, idx: np.ndarray,
             modality: str, n_rollouts: int, rng: np.random.Generator) -> np.ndarray:
    """Q for every decision of every row: ``(B, T-1)``; column t-1 scores choosing s_t.

    The last column is the discriminator score of the full row; earlier ones
    average the score over ``n_rollouts`` completions from modality's policy.
    """
    B, T = idx.shape
    Q = np.empty((B, T - 1))
    Q[:, T - 2] = D.score_batch(disc, cands.channels(idx, modality), modality)
    for t in range(1, T - 1):
        prefix = np.repeat(idx[:, :t + 1], n_rollouts, axis=0)
        comp = sample_batch(gen, cands, prefix, T, rng, _onehot(modality))
        s = D.score_batch(disc, cands.channels(comp, modality), modality)
        Q[:, t - 1] = s.reshape(B, n_rollouts).mean(axis=1)
    return Q


def estimate_q(gen: GeneratorParams, disc: D.DiscParams, cands: CandidateSet,
               partial: Storyline, chosen: str, T: int, n_rollouts: int, seed: int,
               modality: str, temperature: float = 1.0) -> float:
    """Q(partial, chosen) for one modality."""
    names = partial.names + [chosen]
    if len(names) > T:
        raise ValueError(f"prefix of length {len(names)} exceeds T={T}")
    prefix = np.array([[cands.index[n] for n in names]])
    if len(names) == T:
        return D.score(disc, cands.channels(prefix, modality)[0], modality)
    rng = np.random.default_rng(seed)
    comp = sample_batch(gen, cands, np.repeat(prefix, n_rollouts, axis=0), T, rng,
                        _onehot(modality), temperature)
    uniq, counts = np.unique(comp, axis=0, return_counts=True)
    if len(uniq) == 1:
        return D.score(disc, cands.channels(uniq, modality)[0], modality)
    scores = D.score_batch(disc, cands.channels(uniq, modality), modality)
    return float((scores * counts).sum() / n_rollouts)


# -- generator --------------------------------------------------------------

def policy_gradient(gen: GeneratorParams, disc: D.DiscParams, cands: CandidateSet,
                    starts: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """Sampled estimate of ``sum_i (lambda_i / T) sum_t E[grad log pi_i * Q_i]``.

    Leaves the estimate in ``gen.grads`` (after zeroing) and returns the mean
    Q per modality.  Modalities with zero weight are skipped entirely.
    """
    gen.zero_grads()
    starts = np.asarray(starts, dtype=np.intp)
    B = len(starts)
    mean_q = {}
    for m, lam in zip(MODALITIES, cfg.lambdas):
        if lam == 0:
            continue
        S = sample_batch(gen, cands, starts[:, None], cfg.T, rng, _onehot(m))
        Q = q_values(gen, disc, cands, S, m, cfg.n_rollouts, rng)
        accumulate_logprob_grad(gen, cands, S, lam / cfg.T * Q / B, m)
        mean_q[m] = float(Q.mean())
    return mean_q


def generator_update(gen: GeneratorParams, disc: D.DiscParams, cands: CandidateSet,
                     cfg: TrainConfig, rng: np.random.Generator,
                     starts: np.ndarray | None = None):
    """``g_steps`` ascent steps; returns ``(new params, diagnostics)``."""
    gen = gen.copy()
    names = [n for n in gen.names() if cfg.lambdas[MODALITIES.index(n.split(".")[0])] > 0]
    diags = []
    for _ in range(cfg.g_steps):
        batch = starts if starts is not None else rng.integers(0, len(cands), cfg.batch_size)
        mean_q = policy_gradient(gen, disc, cands, batch, cfg, rng)
        sgd_step(gen, cfg.alpha, ascent=True, names=names)
        diags.append(mean_q)
    return gen, {"mean_q": diags[-1] if diags else {}}


# -- discriminator ----------------------------------------------------------

def sample_fakes(gen: GeneratorParams, cands: CandidateSet, starts: np.ndarray, T: int,
                 rng: np.random.Generator, modalities=MODALITIES) -> dict[str, np.ndarray]:
    """Index rows sampled from each modality's own policy."""
    starts = np.asarray(starts, dtype=np.intp)
    return {m: sample_batch(gen, cands, starts[:, None], T, rng, _onehot(m)) for m in modalities}


def discriminator_update(gen: GeneratorParams, disc: D.DiscParams, cands: CandidateSet,
                         real: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """``d_steps`` no-log adversarial steps against an equal-size fake batch.

    Returns ``(new disc params, objective before the last step)``.
    """
    mods = [m for m, lam in zip(MODALITIES, cfg.lambdas) if lam > 0]
    objective = float("nan")
    for _ in range(cfg.d_steps):
        fakes = sample_fakes(gen, cands, real[:, 0], real.shape[1], rng, mods)
        real_ch = {m: cands.channels(real, m) for m in mods}
        fake_ch = {m: cands.channels(fakes[m], m) for m in mods}
        disc, objective = D.train_step_adversarial(disc, real_ch, fake_ch, cfg.disc_rate)
    return disc, objective


# -- full training ----------------------------------------------------------

def generate_indices(gen: GeneratorParams, cands: CandidateSet, starts: np.ndarray, T: int,
                     lambdas, temperature: float, rng: np.random.Generator | None):
    return sample_batch(gen, cands, np.asarray(starts, dtype=np.intp)[:, None], T, rng,
                        lambdas, temperature)


def training_sum_sim(gen: GeneratorParams, cands: CandidateSet, real: np.ndarray,
                     cfg: TrainConfig) -> float:
    """Similarity of argmax generations (one per demonstration start) to the demonstrations."""
    gen_idx = generate_indices(gen, cands, real[:, 0], real.shape[1], cfg.lambdas, 0.0, None)
    ch = cfg.eval_channel
    return sum_sim_arrays(cands.channels(real, ch), cands.channels(gen_idx, ch))


@dataclass
class TrainResult:
    gen: GeneratorParams
    disc: D.DiscParams
    log: list[dict] = field(default_factory=list)
    pretrained_gen: GeneratorParams | None = None
    pretrained_disc: D.DiscParams | None = None


def demonstrations(corpus: EventCorpus, cfg: TrainConfig) -> list[Storyline]:
    demos = [w for w in windows_of(corpus, cfg.window_length) if len(w) == cfg.T]
    if not demos:
        raise LengthError(f"no demonstration of length T={cfg.T} after windowing "
                          f"(window={cfg.window_length})")
    return demos


def pretrain_generator(corpus: EventCorpus, cfg: TrainConfig) -> GeneratorParams:
    demos = demonstrations(corpus, cfg)
    cands = CandidateSet.from_corpus(corpus)
    gen = GeneratorParams.init(cands.dim, cfg.hidden, seed=cfg.seed)
    gen, _ = mle_pretrain(gen, demos, cands, cfg.gen_pretrain_epochs, cfg.gen_rate, cfg.seed,
                          cfg.batch_size)
    return gen


def pretrain_discriminator(corpus: EventCorpus, gen: GeneratorParams, cfg: TrainConfig
                           ) -> D.DiscParams:
    """Cross-entropy pretraining on demonstrations vs samples from ``gen``."""
    cands = CandidateSet.from_corpus(corpus)
    real = cands.indices(demonstrations(corpus, cfg))
    rng = np.random.default_rng([cfg.seed, 2])
    fakes = sample_fakes(gen, cands, real[:, 0], cfg.T, rng)
    disc = D.DiscParams.init(cands.dim, cfg.disc_maps, seed=cfg.seed + 1)
    disc, _ = D.pretrain_xent(disc, {m: cands.channels(real, m) for m in MODALITIES},
                              {m: cands.channels(fakes[m], m) for m in MODALITIES},
                              cfg.disc_pretrain_epochs, cfg.disc_pretrain_rate, cfg.seed,
                              cfg.batch_size)
    return disc


def pretrain(corpus: EventCorpus, cfg: TrainConfig):
    """Generator MLE pretraining then discriminator cross-entropy pretraining."""
    gen = pretrain_generator(corpus, cfg)
    return gen, pretrain_discriminator(corpus, gen, cfg)


def train(corpus: EventCorpus, cfg: TrainConfig, init=None,
          on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Pretrain (unless ``init=(gen, disc)`` is given) and run adversarial rounds.

    Stops after ``cfg.rounds`` or once the training similarity has not improved
    by ``plateau_tol`` (relative) for ``patience`` rounds.
    """
    demos = demonstrations(corpus, cfg)
    cands = CandidateSet.from_corpus(corpus)
    real = cands.indices(demos)
    phase = "pretrain"
    try:
        gen, disc = init if init is not None else pretrain(corpus, cfg)
        result = TrainResult(gen, disc, pretrained_gen=gen, pretrained_disc=disc)
        rng = np.random.default_rng([cfg.seed, 3])
        mods = [m for m, lam in zip(MODALITIES, cfg.lambdas) if lam > 0]
        fakes = sample_fakes(gen, cands, real[:, 0], cfg.T, rng, mods)
        d_obj = D.adversarial_objective(disc, {m: cands.channels(real, m) for m in mods},
                                {m: cands.channels(fakes[m], m) for m in mods})
        sim = training_sum_sim(gen, cands, real, cfg)
        best = (sim, gen, disc)
        history = [sim]

        def emit(record):
            result.log.append(record)
            if on_log is not None:
                on_log(record)

        emit({"round": 0, "phase": "pretrain", "mean_q": {}, "d_objective": d_obj,
              "sum_sim": sim})
        for r in range(1, cfg.rounds + 1):
            phase = f"round {r} generator"
            starts = real[rng.integers(0, len(real), cfg.batch_size), 0]
            gen, diag = generator_update(gen, disc, cands, cfg, rng, starts)
            phase = f"round {r} discriminator"
            batch = real[rng.integers(0, len(real), cfg.batch_size)]
            disc, d_obj = discriminator_update(gen, disc, cands, batch, cfg, rng)
            sim = training_sum_sim(gen, cands, real, cfg)
            emit({"round": r, "phase": "gan", "mean_q": diag["mean_q"], "d_objective": d_obj,
                  "sum_sim": sim})
            if sim > best[0]:
                best = (sim, gen, disc)
            history.append(sim)
            if len(history) > cfg.patience:
                ref = max(history[:-cfg.patience])
                recent = max(history[-cfg.patience:])
                if recent - ref < cfg.plateau_tol * abs(ref):
                    logger.info("plateau after round %d", r)
                    break
        if cfg.restore_best:
            _, gen, disc = best
        result.gen, result.disc = gen, disc
        return result
    except MilganError as exc:
        raise type(exc)(f"{phase}: {exc}") from exc


def apply_policy(gen: GeneratorParams, unseen: EventCorpus, cfg: TrainConfig,
                 starts: Sequence[str] | None = None, n: int | None = None,
                 seed: int | None = None) -> list[Storyline]:
    """Generate T-node storylines on a (possibly disjoint) vocabulary."""
    cands = CandidateSet.from_corpus(unseen)
    if cands.dim != gen.dim:
        raise TransferError(f"vocabulary dimension {cands.dim} != generator dimension {gen.dim}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    if starts is None:
        n = len(cands) if n is None else n
        start_idx = rng.choice(len(cands), size=n, replace=n > len(cands))
    else:
        missing = [s for s in starts if s not in cands.index]
        if missing:
            raise TransferError(f"start entities not in vocabulary: {missing}")
        start_idx = np.array([cands.index[s] for s in starts], dtype=np.intp)
    idx = generate_indices(gen, cands, start_idx, cfg.T, cfg.lambdas, cfg.temperature, rng)
    return [cands.storyline(r) for r in idx]


# -- exhaustive enumeration oracle ------------------------------------------

def enumerate_completions(gen: GeneratorParams, cands: CandidateSet, prefix: Sequence[str],
                          T: int, modality: str):
    """All completions of ``prefix`` to length T with their probabilities under
    ``modality``'s policy, walked one node at a time through :func:`step`."""
    state = PolicyState.initial(gen.hidden)
    for name in prefix:
        state = step(gen, state, node_vectors(cands, name), name)
    out = []

    def walk(state, names, prob):
        if len(names) == T:
            out.append((list(names), prob))
            return
        p = action_dist(gen, state, cands, modality)
        for j, pj in enumerate(p):
            if pj == 0.0:
                continue
            nxt = cands.names[j]
            walk(step(gen, state, node_vectors(cands, nxt), nxt), names + [nxt], prob * pj)

    walk(state, list(prefix), 1.0)
    return out


def exact_q(gen, disc, cands, prefix: Sequence[str], T: int, modality: str) -> float:
    total = 0.0
    for names, prob in enumerate_completions(gen, cands, prefix, T, modality):
        idx = np.array([[cands.index[n] for n in names]])
        total += prob * D.score(disc, cands.channels(idx, modality)[0], modality)
    return total


def _modality_objective(gen, disc, cands, T: int, modality: str, starts) -> float:
    return float(np.mean([exact_q(gen, disc, cands, [s], T, modality) for s in starts]))


def exact_objective(gen, disc, cands, T: int, lambdas, starts: Sequence[str] | None = None
                    ) -> float:
    """``sum_i lambda_i * mean_start E_i[D_i(SL)]`` by full enumeration."""
    starts = cands.names if starts is None else list(starts)
    return float(sum(lam * _modality_objective(gen, disc, cands, T, m, starts)
                     for m, lam in zip(MODALITIES, lambdas) if lam != 0))


def exact_gradient(gen, disc, cands, T: int, lambdas, starts=None, step_size: float = 1e-5
                   ) -> dict[str, np.ndarray]:
    """Central-difference gradient of :func:`exact_objective`.

    A parameter block only enters its own modality's term, so only that term
    is recomputed per perturbation.
    """
    starts = cands.names if starts is None else list(starts)
    grads = {}
    for name, p in gen.params.items():
        m = name.split(".")[0]
        lam = lambdas[MODALITIES.index(m)]
        flat = p.reshape(-1)
        g = np.zeros_like(flat)
        if lam != 0:
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step_size
                fp = _modality_objective(gen, disc, cands, T, m, starts)
                flat[i] = orig - step_size
                fm = _modality_objective(gen, disc, cands, T, m, starts)
                flat[i] = orig
                g[i] = lam * (fp - fm) / (2 * step_size)
        grads[name] = g.reshape(p.shape)
    return grads
