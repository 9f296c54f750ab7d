"""Vocabulary, encoding layout, few-shot sampling, JSONL ingestion."""

import json

import numpy as np
import pytest

from cmlm.data import (
    BOS_ID,
    PAD_ID,
    SEP_ID,
    UNK_ID,
    DataError,
    LabeledExample,
    Vocabulary,
    build_vocab,
    decode,
    encode,
    load_jsonl,
    load_vocab,
    sample_few_shot,
    save_vocab,
)


def test_build_vocab_frequency_and_tie_break():
    vocab = build_vocab(["a b", "a c"], max_size=8)
    assert vocab.size == 8
    assert vocab.token_of(5) == "a"  # frequency 2 beats b/c
    assert vocab.token_of(6) == "b"  # lexicographic tie-break
    assert vocab.token_of(7) == "c"


def test_build_vocab_exact_fill():
    assert build_vocab(["x"], max_size=6).size == 6


def test_build_vocab_empty_corpus_rejected():
    with pytest.raises(DataError, match="empty"):
        build_vocab([], max_size=10)


def test_build_vocab_max_size_must_exceed_specials():
    with pytest.raises(DataError):
        build_vocab(["a"], max_size=5)


def test_build_vocab_caps_at_max_size():
    corpus = [" ".join(f"w{i}" for i in range(50))]
    assert build_vocab(corpus, max_size=20).size == 20


def test_specials_distinct_and_first():
    vocab = build_vocab(["a"], max_size=10)
    ids = [vocab.token_to_id[t] for t in ("[BOS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]")]
    assert ids == [0, 1, 2, 3, 4]


def test_vocab_round_trip_identity():
    vocab = build_vocab(["the cat sat on the mat"], max_size=30)
    for tok, idx in vocab.token_to_id.items():
        assert vocab.token_of(idx) == tok
        assert vocab.id_of(tok) == idx


def test_encode_single_segment_layout():
    vocab = build_vocab(["a b"], max_size=10)
    seq = encode(LabeledExample("a b"), vocab, max_len=5)
    a, b = vocab.id_of("a"), vocab.id_of("b")
    assert seq.ids.tolist() == [BOS_ID, a, b, PAD_ID, PAD_ID]
    assert seq.maskable.tolist() == [False, True, True, False, False]


def test_encode_two_segments():
    vocab = build_vocab(["a b"], max_size=10)
    seq = encode(LabeledExample("a", "b"), vocab, max_len=6)
    assert seq.ids[0] == BOS_ID
    assert seq.ids[2] == SEP_ID
    assert (seq.ids == SEP_ID).sum() == 1
    assert not seq.maskable[2]


def test_encode_oov_maps_to_unk():
    vocab = build_vocab(["a"], max_size=6)
    seq = encode(LabeledExample("a zzz"), vocab, max_len=5)
    assert seq.ids[2] == UNK_ID
    assert seq.maskable[2]


def test_encode_truncates_longer_segment_first():
    vocab = build_vocab(["t0 t1 t2 t3 t4 u0 u1"], max_size=20)
    seq = encode(LabeledExample("t0 t1 t2 t3 t4", "u0 u1"), vocab, max_len=6)
    toks = decode(seq.ids, vocab)
    # budget 4 after BOS and SEP: segment a shrinks from 5 to 2, b keeps 2
    assert toks == ["t0", "t1", "u0", "u1"]


def test_encode_min_len_guard():
    vocab = build_vocab(["a"], max_size=6)
    with pytest.raises(DataError):
        encode(LabeledExample("a"), vocab, max_len=2)


def test_encode_single_segment_truncates_tail():
    vocab = build_vocab(["a b c d e"], max_size=12)
    seq = encode(LabeledExample("a b c d e"), vocab, max_len=4)
    assert decode(seq.ids, vocab) == ["a", "b", "c"]
    assert len(seq) == 4


def test_encode_decode_round_trip():
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(30)]
    corpus = [" ".join(words[int(j)] for j in rng.integers(0, 30, size=8)) for _ in range(20)]
    vocab = build_vocab(corpus, max_size=50)
    for text in corpus:
        seq = encode(LabeledExample(text), vocab, max_len=12)
        assert decode(seq.ids, vocab) == text.split()


def test_pad_is_contiguous_suffix():
    vocab = build_vocab(["a b c"], max_size=10)
    seq = encode(LabeledExample("a b"), vocab, max_len=8)
    pad = seq.pad_mask
    first = int(np.argmax(pad))
    assert pad[first:].all() and not pad[:first].any()
    assert seq.n_real == 3


def _pool(n, prefix="x"):
    return [LabeledExample(f"{prefix}{i}", None, i % 2) for i in range(n)]


def test_sample_few_shot_shapes_and_sharing():
    rng = np.random.default_rng(1)
    split = sample_few_shot(_pool(50), _pool(40, "e"), size=20, num_subsets=5, rng=rng, dev_size=25)
    assert len(split.subsets) == 5
    assert all(len(s) == 20 for s in split.subsets)
    assert len(split.dev) == 25
    assert len(split.test) == 15


def test_sample_few_shot_with_replacement_allows_duplicates():
    rng = np.random.default_rng(2)
    split = sample_few_shot(_pool(20), _pool(10, "e"), size=20, num_subsets=1, rng=rng, dev_size=5)
    texts = [ex.text_a for ex in split.subsets[0]]
    assert len(set(texts)) < len(texts)


def test_sample_few_shot_distinct_count_concentration():
    # expected distinct of 1000 draws from 1000 is ~632; binomial concentration
    rng = np.random.default_rng(3)
    split = sample_few_shot(_pool(1000), _pool(600, "e"), size=1000, num_subsets=1, rng=rng)
    distinct = len({ex.text_a for ex in split.subsets[0]})
    assert 580 <= distinct <= 680


def test_sample_few_shot_small_dev_pool_leaves_empty_test():
    rng = np.random.default_rng(4)
    with pytest.raises(DataError, match="test"):
        sample_few_shot(_pool(10), _pool(300, "e"), size=5, num_subsets=2, rng=rng, dev_size=500)


def test_sample_few_shot_dev_gets_all_when_pool_small():
    rng = np.random.default_rng(5)
    split = sample_few_shot(_pool(10), _pool(300, "e"), size=5, num_subsets=1, rng=rng, dev_size=250)
    assert len(split.dev) == 250
    assert len(split.test) == 50


def test_sample_few_shot_zero_size_rejected():
    with pytest.raises(DataError):
        sample_few_shot(_pool(10), _pool(10, "e"), size=0, num_subsets=1, rng=np.random.default_rng(0))


def test_sample_few_shot_pool_too_small_rejected():
    with pytest.raises(DataError):
        sample_few_shot(_pool(3), _pool(10, "e"), size=5, num_subsets=1, rng=np.random.default_rng(0))


def test_sample_few_shot_deterministic():
    def run():
        split = sample_few_shot(_pool(50), _pool(30, "e"), 10, 3, np.random.default_rng(42), dev_size=20)
        return ([[ex.text_a for ex in s] for s in split.subsets],
                [ex.text_a for ex in split.dev], [ex.text_a for ex in split.test])

    assert run() == run()


def test_sample_few_shot_dev_test_partition_eval_pool():
    rng = np.random.default_rng(6)
    eval_pool = _pool(30, "e")
    split = sample_few_shot(_pool(10), eval_pool, 5, 1, rng, dev_size=12)
    dev_texts = {ex.text_a for ex in split.dev}
    test_texts = {ex.text_a for ex in split.test}
    assert not dev_texts & test_texts
    assert dev_texts | test_texts == {ex.text_a for ex in eval_pool}


def test_load_jsonl_first_seen_label_order(tmp_path):
    path = tmp_path / "d.jsonl"
    rows = [
        {"text_a": "x", "label": "pos"},
        {"text_a": "y", "label": "neg"},
        {"text_a": "z", "label": "pos"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows))
    examples, names = load_jsonl(str(path))
    assert names == ["pos", "neg"]
    assert [ex.label for ex in examples] == [0, 1, 0]


def test_load_jsonl_continues_existing_label_vocab(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"text_a": "x", "label": "neg"}))
    examples, names = load_jsonl(str(path), label_names=["pos", "neg"])
    assert names == ["pos", "neg"]
    assert examples[0].label == 1


def test_load_jsonl_missing_label_rejected_unless_allowed(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"text_a": "x"}))
    with pytest.raises(DataError, match="label"):
        load_jsonl(str(path))
    examples, _ = load_jsonl(str(path), allow_unlabeled=True)
    assert examples[0].label is None


def test_load_jsonl_text_b_and_int_labels(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"text_a": "x", "text_b": "y", "label": 1}))
    examples, names = load_jsonl(str(path))
    assert examples[0].text_b == "y"
    assert names == ["1"]


def test_load_jsonl_invalid_json_reports_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"text_a": "x", "label": 0}\nnot json\n')
    with pytest.raises(DataError, match=":2"):
        load_jsonl(str(path))


def test_vocab_file_round_trip(tmp_path):
    vocab = build_vocab(["a b c a"], max_size=10)
    path = tmp_path / "v.txt"
    save_vocab(vocab, str(path))
    lines = path.read_text().splitlines()
    assert lines[:5] == ["[BOS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"]
    reloaded = load_vocab(str(path))
    assert reloaded.id_to_token == vocab.id_to_token


def test_vocabulary_requires_specials():
    with pytest.raises(DataError):
        Vocabulary(["a", "b", "c", "d", "e"])


def test_token_sequence_invariants_enforced():
    from cmlm.data import BOS_ID, PAD_ID, SEP_ID, TokenSequence

    with pytest.raises(DataError, match="BOS"):
        TokenSequence(np.array([5, 6]), np.array([True, True]))
    with pytest.raises(DataError, match="suffix"):
        TokenSequence(np.array([BOS_ID, PAD_ID, 5]), np.array([False, False, True]))
    with pytest.raises(DataError, match="SEP"):
        TokenSequence(np.array([BOS_ID, SEP_ID, 5, SEP_ID]), np.array([False, False, True, False]))
    with pytest.raises(DataError, match="maskable"):
        TokenSequence(np.array([BOS_ID, 5, PAD_ID]), np.array([False, True, True]))
