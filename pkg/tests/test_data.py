import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlmp.data import (CLS, IGNORE_INDEX, MASK, NUM_SPECIAL, PAD, CorpusError, ParseError, build_vocab, encode,
                       apply_mlm_mask, generate_parallel, generate_synthetic_corpus, load_parallel_tsv,
                       make_language_specs, mask_batch, read_corpus, write_corpus, write_parallel_tsv)


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_vocab_threshold_and_order(tmp_path):
    p = _write(tmp_path, "x.txt", "a a b\nc c c a\n")
    v = build_vocab([p], min_freq=2)
    assert "a" in v and "c" in v and "b" not in v
    # frequency descending: a=3, c=3 tie broken lexicographically
    assert v.itos[NUM_SPECIAL:] == ["a", "c"]
    assert build_vocab([p], 2) == v


def test_vocab_empty_corpus(tmp_path):
    with pytest.raises(CorpusError):
        build_vocab([_write(tmp_path, "e.txt", "\n\n")])


def test_synthetic_vocab_inventory(tmp_path):
    specs = make_language_specs(["xa", "xb", "xc"], num_concepts=6, seed=0)
    corpus = generate_synthetic_corpus(specs, 400, np.random.default_rng(0))
    v = build_vocab(write_corpus(corpus, tmp_path))
    expected = {f"s{c}" for c in range(6)} | {f"{l}_{c}" for l in ("xa", "xb", "xc") for c in range(6)}
    assert set(v.itos[NUM_SPECIAL:]) == expected


def test_encode_cases(tmp_path):
    v = build_vocab([_write(tmp_path, "x.txt", "a b c\n")])
    assert encode("", v, 8) == [CLS]
    ids = encode("a b", v, 8)
    assert len(ids) == 3 and ids[0] == CLS
    assert len(encode("a b c a b c", v, 4)) == 4
    assert encode("zzz", v, 4)[1] == 1  # UNK


def test_mask_rate_zero_leaves_input_alone():
    ids = [CLS] + list(range(5, 30))
    out, labels = apply_mlm_mask(ids, np.random.default_rng(0), 40, mask_rate=0.0)
    np.testing.assert_array_equal(out, ids)
    assert (labels == IGNORE_INDEX).all()


def test_mask_statistics():
    rng = np.random.default_rng(1234)
    ids = np.concatenate([[CLS], rng.integers(NUM_SPECIAL, 500, size=100_000)])
    out, labels = apply_mlm_mask(ids, rng, 500)
    sel = labels != IGNORE_INDEX
    assert abs(sel[1:].mean() - 0.15) < 0.01
    n = sel.sum()
    masked = (out[sel] == MASK).sum() / n
    same = (out[sel] == ids[sel]).sum() / n
    # a random replacement can coincide with the original token (p ~ 1/495)
    assert abs(masked - 0.8) < 0.02
    assert abs(same - 0.1) < 0.02
    assert abs(1 - masked - same - 0.1) < 0.02


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=40), st.integers(0, 2**31 - 1))
def test_specials_never_masked(body, seed):
    ids = [CLS] + body
    out, labels = apply_mlm_mask(ids, np.random.default_rng(seed), 31, mask_rate=0.5)
    ids = np.array(ids)
    special = ids < NUM_SPECIAL
    assert (labels[special] == IGNORE_INDEX).all()
    np.testing.assert_array_equal(out[special], ids[special])
    changed = out != ids
    assert not (changed & (labels == IGNORE_INDEX)).any()


def test_masking_is_seeded():
    rows = [[CLS] + list(range(5, 20)), [CLS, 7, 8]]
    a = mask_batch(rows, np.random.default_rng(3), 25)
    b = mask_batch(rows, np.random.default_rng(3), 25)
    np.testing.assert_array_equal(a.input_ids, b.input_ids)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert (a.input_ids[1, 3:] == PAD).all() and not a.pad_mask[1, 3:].any()


def _shared_fraction(corpus):
    toks = [t for sents in corpus.values() for s in sents for t in s.split()]
    return np.mean([t.startswith("s") for t in toks])


def test_mixing_ratio_extremes():
    rng = np.random.default_rng(0)
    all_shared = generate_synthetic_corpus(make_language_specs(["p", "q"], mixing_ratio=1.0), 200, rng)
    assert _shared_fraction(all_shared) == 1.0
    none = generate_synthetic_corpus(make_language_specs(["p", "q"], mixing_ratio=0.0), 200, rng)
    vocab_p = {t for s in none["p"] for t in s.split()}
    vocab_q = {t for s in none["q"] for t in s.split()}
    assert not vocab_p & vocab_q


def test_mixing_ratio_half():
    corpus = generate_synthetic_corpus(make_language_specs(["p", "q"], mixing_ratio=0.5), 1000,
                                       np.random.default_rng(5))
    assert abs(_shared_fraction(corpus) - 0.5) < 0.03


def test_generation_deterministic():
    specs = make_language_specs(["p", "q"], seed=9)
    a = generate_synthetic_corpus(specs, 50, np.random.default_rng(1))
    b = generate_synthetic_corpus(make_language_specs(["p", "q"], seed=9), 50, np.random.default_rng(1))
    assert a == b


def test_parallel_pairs_share_concepts():
    src, tgt = make_language_specs(["p", "q"], seed=2)
    for a, b in generate_parallel(src, tgt, 50, np.random.default_rng(0)):
        ca = [t.split("_")[-1].lstrip("s") for t in a.split()]
        cb = [t.split("_")[-1].lstrip("s") for t in b.split()]
        assert ca == cb


def test_parallel_tsv(tmp_path):
    p = _write(tmp_path, "ok.tsv", "a b\tc d\ne\tf\n")
    pairs = load_parallel_tsv(p)
    assert [(x.pair_id, x.src, x.tgt) for x in pairs] == [(1, "a b", "c d"), (2, "e", "f")]
    bad = _write(tmp_path, "bad.tsv", "a\tb\nno tab here\n")
    with pytest.raises(ParseError) as err:
        load_parallel_tsv(bad)
    assert "2" in str(err.value)


def test_parallel_round_trip(tmp_path):
    src, tgt = make_language_specs(["p", "q"], seed=4)
    pairs = generate_parallel(src, tgt, 30, np.random.default_rng(4))
    write_parallel_tsv(pairs, tmp_path / "pq.tsv")
    assert [(x.src, x.tgt) for x in load_parallel_tsv(tmp_path / "pq.tsv")] == pairs


def test_corpus_files_round_trip(tmp_path):
    corpus = {"aa": ["x y", "z"], "bb": ["w"]}
    assert read_corpus(write_corpus(corpus, tmp_path)) == corpus
