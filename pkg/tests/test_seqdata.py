import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from milgan.errors import (DanglingReferenceError, InfeasibleError, SchemaError,
                           UnprojectedEntityError)
from milgan.seqdata import (EntityNode, ModalSequence, Storyline, check_disjoint, dump_dataset,
                            load_dataset, normalize_sequence, slice_windows, synth_corpus,
                            to_modal_sequence)


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def _entity(event, name, k=2, d=3, val=0.0):
    return {"kind": "entity", "event": event, "name": name, "text_vec": [val] * k,
            "image_feat": [val] * d}


def _two_event_fixture(tmp_path):
    recs = []
    for ev, n in (("a", 4), ("b", 5)):
        names = [f"{ev}{i}" for i in range(n)]
        recs += [_entity(ev, nm, val=i) for i, nm in enumerate(names)]
        recs += [{"kind": "storyline", "event": ev, "nodes": names[i:i + 3]} for i in range(2)]
        recs += [{"kind": "storyline", "event": ev, "nodes": names[:2]}]
    return _write(tmp_path / "two.jsonl", recs)


def test_load_two_events(tmp_path):
    corpora = load_dataset(_two_event_fixture(tmp_path))
    assert [c.event_id for c in corpora] == ["a", "b"]
    assert [len(c.entities) for c in corpora] == [4, 5]
    assert [len(c.storylines) for c in corpora] == [3, 3]
    assert corpora[0].storylines[0].names == ["a0", "a1", "a2"]


def test_load_four_role_storyline(tmp_path):
    roles = ["cause", "perpetrator", "victim", "aftermath"]
    recs = [_entity("homicide", r) for r in roles]
    recs.append({"kind": "storyline", "event": "homicide", "nodes": roles})
    (corpus,) = load_dataset(_write(tmp_path / "h.jsonl", recs))
    (sl,) = corpus.storylines
    assert len(sl) == 4 and sl.names == roles


def test_dangling_reference_reports_line(tmp_path):
    recs = [_entity("a", "x"), {"kind": "storyline", "event": "a", "nodes": ["x", "ghost"]}]
    with pytest.raises(DanglingReferenceError, match="line 2"):
        load_dataset(_write(tmp_path / "d.jsonl", recs))


def test_dimension_mismatch_is_schema_error(tmp_path):
    recs = [_entity("a", "x", k=2), _entity("a", "y", k=3)]
    with pytest.raises(SchemaError, match="line 2"):
        load_dataset(_write(tmp_path / "m.jsonl", recs))


def test_feature_dimension_mismatch(tmp_path):
    recs = [_entity("a", "x", d=3), _entity("a", "y", d=4)]
    with pytest.raises(SchemaError):
        load_dataset(_write(tmp_path / "m.jsonl", recs))


@pytest.mark.parametrize("bad", [
    "not json",
    json.dumps({"kind": "entity", "event": "a", "name": "", "text_vec": [1.0]}),
    json.dumps({"kind": "thing", "event": "a"}),
    json.dumps({"kind": "storyline", "event": "a", "nodes": ["x"]}),
])
def test_malformed_records(tmp_path, bad):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(_entity("a", "x")) + "\n" + bad + "\n")
    with pytest.raises(SchemaError):
        load_dataset(p)


def test_repeated_entity_in_storyline_rejected(tmp_path):
    recs = [_entity("a", "x"), _entity("a", "y"),
            {"kind": "storyline", "event": "a", "nodes": ["x", "y", "x"]}]
    with pytest.raises(SchemaError):
        load_dataset(_write(tmp_path / "r.jsonl", recs))


def test_missing_image_substitutes_text(tmp_path):
    recs = [_entity("a", "x"), {"kind": "entity", "event": "a", "name": "y",
                                "text_vec": [1.0, 2.0]}]
    (c,) = load_dataset(_write(tmp_path / "i.jsonl", recs))
    assert c.missing_images == 1
    np.testing.assert_array_equal(c.entities["y"].image_vec, [1.0, 2.0])
    seq = to_modal_sequence(Storyline("a", (c.entities["y"],)), normalize=False)
    assert np.all(seq.mm == 0.0)


def test_dump_load_round_trip(tmp_path):
    train, _, _ = synth_corpus(n_entities=6, k=4, d=5, n_storylines=5, seed=3)
    dump_dataset([train], tmp_path / "a.jsonl")
    (back,) = load_dataset(tmp_path / "a.jsonl")
    for name, node in train.entities.items():
        np.testing.assert_array_equal(back.entities[name].text_vec, node.text_vec)
        np.testing.assert_array_equal(back.entities[name].image_vec, node.image_vec)
        np.testing.assert_array_equal(back.entities[name].image_feat, node.image_feat)
    assert [s.names for s in back.storylines] == [s.names for s in train.storylines]


# -- normalization ----------------------------------------------------------

def _seq(txt, img=None):
    txt = np.asarray(txt, dtype=float)
    img = txt.copy() if img is None else np.asarray(img, dtype=float)
    return ModalSequence(txt, img, img - txt)


def test_normalize_constant_rows():
    v = [0.3, -1.2]
    assert np.all(normalize_sequence(_seq([v, v, v])).txt == 0.0)


def test_normalize_two_rows():
    a, b = np.array([1.0, 2.0]), np.array([4.0, -1.0])
    out = normalize_sequence(_seq([a, b]))
    np.testing.assert_array_equal(out.txt, [[0, 0], b - a])


matrices = st.integers(1, 5).flatmap(lambda T: st.tuples(
    hnp.arrays(np.float64, (T, 3), elements=st.floats(-1e3, 1e3)),
    hnp.arrays(np.float64, (T, 3), elements=st.floats(-1e3, 1e3))))


@settings(max_examples=100, deadline=None)
@given(matrices)
def test_normalize_properties(pair):
    txt, img = pair
    s = _seq(txt, img)
    once = normalize_sequence(s)
    twice = normalize_sequence(once)
    for m in ("txt", "img", "mm"):
        np.testing.assert_array_equal(once.channel(m), twice.channel(m))
        assert np.all(once.channel(m)[0] == 0.0)
    np.testing.assert_array_equal(once.mm, once.img - once.txt)
    # row differences are preserved up to rounding of the shift
    T = len(txt)
    for t in range(T):
        for u in range(T):
            np.testing.assert_allclose(once.txt[t] - once.txt[u], txt[t] - txt[u],
                                       rtol=1e-9, atol=1e-9)


# -- windows ----------------------------------------------------------------

def _storyline(T):
    return Storyline("e", tuple(EntityNode(f"n{i}", np.zeros(2)) for i in range(T)))


@pytest.mark.parametrize("T,L,expected", [
    (4, 4, [[0, 1, 2, 3]]),
    (5, 3, [[0, 1, 2], [1, 2, 3], [2, 3, 4]]),
    (2, 4, []),
])
def test_slice_windows(T, L, expected):
    out = slice_windows(_storyline(T), L)
    assert [[int(n[1:]) for n in w.names] for w in out] == expected
    assert all(w.event_id == "e" for w in out)


@given(st.integers(1, 12), st.integers(2, 12))
def test_slice_windows_count_and_order(T, L):
    out = slice_windows(_storyline(T), L)
    assert len(out) == max(0, T - L + 1)
    if out:
        starts = [w.names[0] for w in out] + out[-1].names[1:]
        assert starts == _storyline(T).names


def test_slice_windows_rejects_short_window():
    with pytest.raises(ValueError):
        slice_windows(_storyline(3), 1)


# -- modal sequences --------------------------------------------------------

def test_modal_sequence_equal_modalities_zero_mm():
    nodes = tuple(EntityNode(f"n{i}", np.arange(3.0) + i, None, np.arange(3.0) + i)
                  for i in range(3))
    seq = to_modal_sequence(Storyline("e", nodes), normalize=False)
    assert np.all(seq.mm == 0.0)


def test_modal_sequence_normalized_first_rows_zero():
    rng = np.random.default_rng(0)
    nodes = tuple(EntityNode(f"n{i}", rng.normal(size=3), None, rng.normal(size=3))
                  for i in range(2))
    seq = to_modal_sequence(Storyline("e", nodes))
    for m in ("txt", "img", "mm"):
        assert np.all(seq.channel(m)[0] == 0.0)


def test_modal_sequence_round_trip():
    rng = np.random.default_rng(1)
    nodes = tuple(EntityNode(f"n{i}", rng.normal(size=3), None, rng.normal(size=3))
                  for i in range(4))
    seq = to_modal_sequence(Storyline("e", nodes), normalize=False)
    np.testing.assert_array_equal(seq.txt, [n.text_vec for n in nodes])
    np.testing.assert_array_equal(seq.img, [n.image_vec for n in nodes])
    np.testing.assert_array_equal(seq.mm, seq.img - seq.txt)


def test_modal_sequence_requires_projection():
    nodes = (EntityNode("a", np.zeros(2)), EntityNode("b", np.zeros(2)))
    with pytest.raises(UnprojectedEntityError):
        to_modal_sequence(Storyline("e", nodes))


# -- synthetic corpus -------------------------------------------------------

def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        tr, te, _ = synth_corpus(seed=5)
        dump_dataset([tr, te], tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_synth_seed_changes_data():
    a, _, _ = synth_corpus(seed=1)
    b, _, _ = synth_corpus(seed=2)
    assert not np.array_equal(a.entities["tr000"].text_vec, b.entities["tr000"].text_vec)


def test_synth_storylines_follow_planted_policy():
    train, test, planted = synth_corpus(n_entities=20, T=4, n_storylines=200, seed=0)
    assert len(train.storylines) == 200
    for corpus in (train, test):
        for sl in corpus.storylines:
            assert len(sl) == 4 and len(set(sl.names)) == 4
            assert planted.chain(sl.names[0], 4) == sl.names
    assert planted.match_rate(train.storylines) == 1.0
    check_disjoint(train, test)
    assert not set(train.entities) & set(test.entities)


def test_synth_structure_transfers():
    """Successors are the nearest neighbours of the same linear map in both vocabularies."""
    train, test, planted = synth_corpus(seed=0)
    X = np.stack([n.text_vec for n in train.entities.values()])
    Y = np.stack([train.entities[planted.next(n)].text_vec for n in train.entities])
    A, *_ = np.linalg.lstsq(X, Y, rcond=None)
    names = test.names()
    Xt = np.stack([test.entities[n].text_vec for n in names])
    pred = Xt @ A
    hits = [names[int(np.argmax(Xt @ p))] == planted.next(n) for n, p in zip(names, pred)]
    assert np.mean(hits) >= 0.9


def test_synth_infeasible():
    with pytest.raises(InfeasibleError):
        synth_corpus(n_entities=3, T=4)


def test_check_disjoint_detects_overlap(tmp_path):
    train, _, _ = synth_corpus(n_entities=5, n_storylines=2)
    with pytest.raises(SchemaError):
        check_disjoint(train, train)
