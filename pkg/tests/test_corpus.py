import hashlib

import pytest
from hypothesis import given
from hypothesis import strategies as st

from moeprune import corpus as C


def _lang(transform, v_c=8, offset=100):
    return C.LanguageSpec(1, offset, tuple(range(v_c)), transform)


def test_pivot_is_identity():
    langs = C.gen_languages(2, 8, 5)
    assert langs[0].permutation == tuple(range(8)) and langs[0].transform == "identity"


def test_languages_deterministic():
    assert C.gen_languages(8, 64, 9) == C.gen_languages(8, 64, 9)
    assert C.gen_languages(8, 64, 9) != C.gen_languages(8, 64, 10)


def test_default_blocks_are_disjoint_and_cover_8x64():
    langs = C.gen_languages(8, 64, 0)
    ids = [t for lang in langs for t in lang.block]
    assert len(ids) == len(set(ids)) == 8 * 64
    assert min(ids) == C.N_SPECIAL + 8 and max(ids) == C.vocab_size(8, 64) - 1
    tags = {lang.tag for lang in langs}
    assert not tags & set(ids) and not tags & {C.PAD, C.BOS, C.EOS, C.SEP}


def test_render_examples():
    pivot = C.gen_languages(2, 8, 0)[0]
    assert C.render([3, 1, 2], pivot) == [pivot.offset + 3, pivot.offset + 1, pivot.offset + 2]
    a, b, c = 4, 6, 1
    assert C.render([a, b, c], _lang("reverse")) == C.render([c, b, a], _lang("identity"))
    assert C.render([a, b, c], _lang("rotate-left-1")) == C.render([b, c, a], _lang("identity"))


@given(st.lists(st.integers(0, 7), min_size=1, max_size=12), st.integers(0, 50))
def test_round_trip(passage, seed):
    for lang in C.gen_languages(4, 8, seed):
        assert C.unrender(C.render(passage, lang), lang) == passage


def test_episode_framing():
    langs = C.gen_languages(3, 8, 1)
    p = [1, 2, 3, 4]
    e = C.make_episode(p, langs[1], langs[2])
    n = len(p)
    assert list(e.tokens[2 : 2 + n]) == C.render(p, langs[1])
    assert e.tokens[0] == C.BOS and e.tokens[1] == langs[1].tag and e.tokens[2 + n] == C.SEP
    assert e.tokens[3 + n] == langs[2].tag and e.tokens[-1] == C.EOS
    assert sum(e.loss_mask) == len(C.render(p, langs[2])) + 1
    assert all(m for m in e.loss_mask[-(n + 1):]) and not any(e.loss_mask[: n + 4])
    assert e.target == tuple(C.render(p, langs[2])) + (C.EOS,)
    with pytest.raises(ValueError):
        C.make_episode(p, langs[0], langs[0])


def test_corpus_determinism_and_splits():
    a = C.gen_corpus(4, 16, (200, 30, 30), seed=2)
    b = C.gen_corpus(4, 16, (200, 30, 30), seed=2)
    assert a.train == b.train and a.dev == b.dev and a.devtest == b.devtest
    sets = [set(a.train), set(a.dev), set(a.devtest)]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert all(a.l_min <= len(p) <= a.l_max for s in (a.train, a.dev, a.devtest) for p in s)


def test_dev_is_parallel():
    c = C.gen_corpus(4, 16, (50, 10, 10), seed=4)
    for i, p in enumerate(c.dev):
        renders = [C.unrender(C.render(p, lang), lang) for lang in c.languages]
        assert all(r == list(p) for r in renders)


def test_default_episode_length_bound():
    c = C.gen_corpus()
    assert max(len(e.tokens) for e in c.episodes("devtest", C.default_directions())) <= 2 * c.l_max + 5
    assert c.vocab_size == 524


def test_serialization_round_trip(tmp_path):
    c = C.gen_corpus(3, 8, (20, 5, 5), seed=7)
    m1, b1 = C.save_corpus(c, tmp_path / "a.json")
    back = C.load_corpus(m1)
    assert back.train == c.train and back.languages == c.languages
    m2, b2 = C.save_corpus(back, tmp_path / "b.json")
    assert hashlib.sha256(b1.read_bytes()).digest() == hashlib.sha256(b2.read_bytes()).digest()
    assert m1.read_text().replace("a.bin", "b.bin") == m2.read_text()
    b1.write_bytes(b1.read_bytes()[:-4])
    with pytest.raises(ValueError):
        C.load_corpus(m1)


def test_bad_arguments():
    with pytest.raises(ValueError):
        C.gen_languages(1, 8, 0)
    with pytest.raises(ValueError):
        C.gen_languages(2, 4, 0)
    with pytest.raises(ValueError):
        C.gen_corpus(sizes=(0, 1, 1))
