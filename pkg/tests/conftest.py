import time

import numpy as np
import pytest

from milgan.policy import CandidateSet, GeneratorParams
from milgan.seqdata import EntityNode


def random_nodes(n, k, seed, prefix="e"):
    rng = np.random.default_rng(seed)
    return [EntityNode(f"{prefix}{i}", rng.normal(size=k), rng.normal(size=3), rng.normal(size=k))
            for i in range(n)]


def random_cands(n=5, k=3, seed=0):
    return CandidateSet(random_nodes(n, k, seed), "ev")


def central_diff(f, x, step=1e-6):
    """Independent central-difference gradient of scalar ``f`` at array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def max_rel_err(a, n, floor=1e-8):
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


@pytest.fixture
def cands():
    return random_cands()


@pytest.fixture
def gen(cands):
    return GeneratorParams.init(cands.dim, hidden=4, seed=1, scale=0.5)


@pytest.fixture(scope="session")
def planted():
    from milgan.seqdata import synth_corpus
    return synth_corpus(n_entities=20, T=4, n_storylines=200, seed=0)


@pytest.fixture(scope="session")
def planted_timed(planted):
    """Full training on the default planted corpus and its wall time in seconds."""
    from milgan.gan import TrainConfig, train
    t0 = time.perf_counter()
    result = train(planted[0], TrainConfig(seed=0))
    return result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def planted_run(planted_timed):
    return planted_timed[0]


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def seed_runs():
    """Per seed 0..9 on the default planted corpus: one shared pretraining, then
    full-weight training, text-only training and the similarity-reward PG baseline."""
    from milgan import gan
    from milgan.baselines import baseline_pg_similarity
    from milgan.seqdata import synth_corpus

    runs = []
    for seed in range(10):
        train, test, planted = synth_corpus(seed=seed)
        cfg = gan.TrainConfig(seed=seed)
        init = gan.pretrain(train, cfg)
        runs.append({
            "train": train, "test": test, "planted": planted, "cfg": cfg, "init": init,
            "full": gan.train(train, cfg, init=init),
            "text": gan.train(train, cfg.replace(lambdas=(1.0, 0.0, 0.0)), init=init),
            "pg": baseline_pg_similarity(train, cfg, init=init[0]),
        })
    return runs
