import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from milgan import disc as D
from milgan.baselines import (baseline_pg_similarity, baseline_random, baseline_ss,
                              similarity_reward)
from milgan.checkpoint import load_model, save_model
from milgan.cli import run_cli
from milgan.errors import DimensionError, ExhaustedVocabularyError, SchemaError
from milgan.gan import TrainConfig, apply_policy, pretrain_generator
from milgan.metrics import cosine_matrix, sum_sim
from milgan.policy import GeneratorParams
from milgan.seqdata import ModalSequence

from conftest import random_cands


def _ms(txt):
    txt = np.asarray(txt, dtype=float)
    return ModalSequence(txt, txt, np.zeros_like(txt))


# -- sum_sim ----------------------------------------------------------------

def test_self_similarity_one():
    A = _ms(np.arange(12.0).reshape(3, 4) + 1)
    assert sum_sim([A], [A]) == pytest.approx(1.0, abs=1e-15)


def test_identical_pairs_square():
    A = _ms([[1.0, 2.0], [3.0, -1.0]])
    assert sum_sim([A] * 4, [A] * 4) == pytest.approx(16.0, abs=1e-12)


def test_anticorrelated():
    A = np.array([[1.0, 2.0], [3.0, -1.0]])
    assert sum_sim([_ms(A)], [_ms(-A)]) == pytest.approx(-1.0, abs=1e-15)


def test_zero_norm_contributes_zero():
    assert sum_sim([_ms(np.zeros((2, 2)))], [_ms(np.ones((2, 2)))]) == 0.0


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        sum_sim([_ms(np.ones((2, 2)))], [_ms(np.ones((3, 2)))])


def _naive(ref, gen):
    mpmath.mp.dps = 40
    total = mpmath.mpf(0)
    for A in ref:
        for B in gen:
            a = [mpmath.mpf(float(x)) for x in A.ravel()]
            b = [mpmath.mpf(float(x)) for x in B.ravel()]
            na = mpmath.sqrt(sum(x * x for x in a))
            nb = mpmath.sqrt(sum(x * x for x in b))
            if na == 0 or nb == 0:
                continue
            total += sum(x * y for x, y in zip(a, b)) / (na * nb)
    return float(total)


@pytest.mark.parametrize("seed", range(5))
def test_sum_sim_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    ref = [rng.normal(size=(3, 4)) for _ in range(4)]
    gen = [rng.normal(size=(3, 4)) for _ in range(5)]
    got = sum_sim([_ms(a) for a in ref], [_ms(b) for b in gen])
    assert abs(got - _naive(ref, gen)) < 1e-9


mats = hnp.arrays(np.float64, (3, 2, 2), elements=st.floats(-100, 100))


@settings(max_examples=100, deadline=None)
@given(mats, mats, st.floats(0.01, 100))
def test_sum_sim_symmetry_and_scale(ref, gen, scale):
    R = [_ms(a) for a in ref]
    G = [_ms(b) for b in gen]
    s = sum_sim(R, G)
    assert s == pytest.approx(sum_sim(G, R), abs=1e-9)
    G2 = [_ms(gen[0] * scale)] + G[1:]
    assert sum_sim(R, G2) == pytest.approx(s, abs=1e-9)


def test_self_set_bounds():
    rng = np.random.default_rng(0)
    X = [_ms(rng.normal(size=(3, 2))) for _ in range(6)]
    C = cosine_matrix(np.stack([x.txt for x in X]), np.stack([x.txt for x in X]))
    assert np.trace(C) == pytest.approx(6.0, abs=1e-12)
    assert -36 <= C.sum() <= 36


# -- baselines --------------------------------------------------------------

def test_random_baseline_length_one():
    c = random_cands()
    (sl,) = baseline_random(c, ["e2"], 1, seed=0)
    assert sl.names == ["e2"]


def test_random_baseline_no_repeats():
    c = random_cands(n=6)
    out = baseline_random(c, [c.names[i % 6] for i in range(1000)], 6, seed=0)
    assert all(len(set(s.names)) == 6 for s in out)


def test_random_baseline_exhausted():
    with pytest.raises(ExhaustedVocabularyError):
        baseline_random(random_cands(n=3), ["e0"], 4, seed=0)


def test_similarity_reward_replica_is_one():
    c = random_cands(n=6)
    real = np.array([[0, 1, 2], [3, 4, 5]])
    np.testing.assert_allclose(similarity_reward(c, real, real, "txt"), [1.0, 1.0], atol=1e-15)


@pytest.fixture(scope="module")
def small_planted():
    from milgan.seqdata import synth_corpus
    train, test, planted = synth_corpus(n_entities=10, n_storylines=60, seed=2)
    return train, test, planted, TrainConfig(gen_pretrain_epochs=40, rounds=5, seed=2)


def test_pg_alpha_zero_keeps_pretrained(small_planted):
    train, _, _, cfg = small_planted
    init = pretrain_generator(train, cfg)
    out = baseline_pg_similarity(train, cfg.replace(alpha=0.0), init=init)
    for n in init.names():
        np.testing.assert_array_equal(out[n], init[n])


def test_pg_moves_parameters(small_planted):
    train, _, _, cfg = small_planted
    init = pretrain_generator(train, cfg)
    out = baseline_pg_similarity(train, cfg.replace(alpha=1.0), init=init)
    assert any(not np.array_equal(out[n], init[n]) for n in init.names())


def test_ss_baseline_runs(small_planted):
    train, _, _, cfg = small_planted
    gen = baseline_ss(train, cfg)
    assert gen.dim == train.dim


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    gen = GeneratorParams.init(3, hidden=4, seed=0)
    disc = D.DiscParams.init(3, n_maps=2, seed=1)
    save_model(tmp_path / "m.npz", gen, disc, "rounds = 3\n")
    g2, d2, text = load_model(tmp_path / "m.npz")
    assert text == "rounds = 3\n" and (g2.dim, g2.hidden) == (3, 4)
    for a, b in ((gen, g2), (disc, d2)):
        assert a.names() == b.names()
        for n in a.names():
            np.testing.assert_array_equal(a[n], b[n])
    save_model(tmp_path / "g.npz", gen)
    assert load_model(tmp_path / "g.npz")[1] is None


def test_checkpoint_rejects_foreign(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(1))
    with pytest.raises(SchemaError):
        load_model(tmp_path / "x.npz")


# -- CLI --------------------------------------------------------------------

def test_cli_usage_errors(capsys):
    assert run_cli([]) == 2
    assert run_cli(["frobnicate"]) == 2
    assert run_cli(["synth", "--out", "x", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_runtime_error(tmp_path, capsys):
    assert run_cli(["pretrain", "--data", str(tmp_path / "missing.jsonl"),
                    "--out", str(tmp_path / "m.npz")]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_bad_config(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("rounds = many\n")
    assert run_cli(["synth", "--config", str(cfg), "--out", str(tmp_path / "s.jsonl")]) == 1


@pytest.fixture(scope="module")
def cli_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.cfg").write_text("gen_pretrain_epochs = 30\ndisc_pretrain_epochs = 5\n"
                             "rounds = 2\nn_rollouts = 4\n")
    assert run_cli(["synth", "--config", str(d / "c.cfg"), "--n-entities", "8",
                    "--n-storylines", "30", "--out", str(d / "train.jsonl"),
                    "--test-out", str(d / "test.jsonl"),
                    "--planted-out", str(d / "planted.json")]) == 0
    assert run_cli(["pretrain", "--config", str(d / "c.cfg"), "--data", str(d / "train.jsonl"),
                    "--out", str(d / "pre.npz")]) == 0
    return d


def test_cli_generate_deterministic(cli_dir):
    d = cli_dir
    outs = []
    for name in ("a", "b"):
        assert run_cli(["generate", "--model", str(d / "pre.npz"), "--data",
                        str(d / "test.jsonl"), "--start", "te001", "--start", "te004",
                        "--length", "3", "--seed", "5", "--out", str(d / f"{name}.jsonl")]) == 0
        outs.append((d / f"{name}.jsonl").read_bytes())
    assert outs[0] == outs[1]
    recs = [json.loads(line) for line in outs[0].decode().splitlines()]
    assert [r["start"] for r in recs] == ["te001", "te004"]
    assert all(len(r["nodes"]) == 3 and r["seed"] == 5 for r in recs)


def test_cli_eval_identical_single_sequence(cli_dir, capsys):
    d = cli_dir
    line = json.dumps({"start": "tr000", "nodes": ["tr000", "tr003", "tr001", "tr005"],
                       "seed": 0}) + "\n"
    (d / "one.jsonl").write_text(line)
    assert run_cli(["eval", "--ref", str(d / "one.jsonl"), "--gen", str(d / "one.jsonl"),
                    "--data", str(d / "train.jsonl"), "--channel", "img",
                    "--out", str(d / "r.json")]) == 0
    report = json.loads((d / "r.json").read_text())
    assert report["sum_sim"] == pytest.approx(1.0, abs=1e-12)
    assert report["sum_sim"] == pytest.approx(sum(map(sum, report["contributions"])), abs=1e-9)
    assert report["audit"] == {"repeat_violations": 0, "nonzero_first_rows": 0}


def test_cli_eval_unknown_entity(cli_dir):
    d = cli_dir
    (d / "bad.jsonl").write_text(json.dumps({"nodes": ["zz1", "zz2"]}) + "\n")
    assert run_cli(["eval", "--ref", str(d / "bad.jsonl"), "--gen", str(d / "bad.jsonl"),
                    "--data", str(d / "train.jsonl")]) == 1


@pytest.mark.parametrize("kind", ["random", "lstm", "ss", "pg"])
def test_cli_baselines(cli_dir, kind):
    d = cli_dir
    out = d / f"base_{kind}.jsonl"
    assert run_cli(["baseline", kind, "--config", str(d / "c.cfg"), "--data",
                    str(d / "train.jsonl"), "--apply", str(d / "test.jsonl"), "--n", "6",
                    "--out", str(out)]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 6 and all(r["nodes"][0].startswith("te") for r in recs)


def test_cli_train_with_init_and_log(cli_dir):
    d = cli_dir
    assert run_cli(["train", "--config", str(d / "c.cfg"), "--data", str(d / "train.jsonl"),
                    "--init", str(d / "pre.npz"), "--out", str(d / "model.npz"),
                    "--log", str(d / "log.jsonl")]) == 0
    log = [json.loads(line) for line in (d / "log.jsonl").read_text().splitlines()]
    assert [r["round"] for r in log][0] == 0 and len(log) <= 3
    gen, disc, text = load_model(d / "model.npz")
    assert disc is not None and "rounds = 2" in text


def _planted_match(gen, corpus, planted, cfg):
    out = apply_policy(gen, corpus, cfg.replace(temperature=0.0), n=100, seed=cfg.seed)
    return planted.match_rate(out)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="pretraining alone already recovers the planted "
                   "successor, so neither method can lead the other by 10 points; see README")
def test_pg_baseline_trails_adversarial_training(seed_runs):
    wins = 0
    for run in seed_runs:
        full = _planted_match(run["full"].gen, run["train"], run["planted"], run["cfg"])
        pg = _planted_match(run["pg"], run["train"], run["planted"], run["cfg"])
        wins += full - pg >= 0.10
    assert wins >= 8


@pytest.mark.slow
def test_pg_baseline_and_adversarial_training_both_recover(seed_runs):
    """Companion measurement: both reach the planted policy on every seed."""
    for run in seed_runs:
        for gen in (run["full"].gen, run["pg"]):
            assert _planted_match(gen, run["train"], run["planted"], run["cfg"]) >= 0.9
            assert _planted_match(gen, run["test"], run["planted"], run["cfg"]) >= 0.75
