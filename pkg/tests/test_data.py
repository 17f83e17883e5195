import json
from collections import Counter

import numpy as np
import pytest

from siaseq import data
from siaseq.data import (
    BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID,
    Example, GeneratorSpec, Vocabulary,
    build_vocab, clean_text, generate_corpus, load_jsonl, make_batches,
    save_jsonl, template_pool,
)
from siaseq.errors import ConfigError, DataError


# -- clean_text ---------------------------------------------------------------

def test_clean_text_removes_urls():
    assert clean_text("see http://x.com now") == "see now"


def test_clean_text_removes_long_digit_runs():
    assert clean_text("call 12345678") == "call "


def test_clean_text_identity_on_clean_input():
    s = "plain words, nothing odd here."
    assert clean_text(s) == s


def test_clean_text_normalizes_punctuation():
    assert clean_text("“quoted” — dash") == '"quoted" - dash'


# -- vocabulary ---------------------------------------------------------------

def test_build_vocab_enumeration():
    v = build_vocab(["aab"], min_freq=1)
    assert v.id_to_token == data.RESERVED_TOKENS + ["a", "b"]


def test_build_vocab_threshold_maps_rare_to_unk():
    v = build_vocab(["aab"], min_freq=2)
    assert "b" not in v.token_to_id
    assert v.encode("ab") == [v.token_to_id["a"], UNK_ID]


def test_build_vocab_matches_brute_force_counter():
    corpus = [" ".join(ex.edited for ex in generate_corpus(GeneratorSpec(seed=3, n_examples=50)))]
    v = build_vocab(corpus, min_freq=3)
    counts = Counter(ch for text in corpus for ch in text)
    expected = sorted((t for t, c in counts.items() if c >= 3), key=lambda t: (-counts[t], t))
    assert v.id_to_token[5:] == expected


def test_build_vocab_empty_corpus_rejected():
    with pytest.raises(DataError):
        build_vocab([], min_freq=1)


def test_encode_decode_round_trip():
    v = build_vocab(["the quick brown fox"], min_freq=1)
    for s in ["the fox", "quick quick", " "]:
        assert v.decode(v.encode(s)) == s


def test_encode_decode_empty():
    v = build_vocab(["ab"], min_freq=1)
    assert v.encode("") == []
    assert v.decode([]) == ""


def test_encode_oov_yields_unk():
    v = build_vocab(["ab"], min_freq=1)
    ids = v.encode("az")
    assert UNK_ID in ids


def test_decode_out_of_range_id_rejected():
    v = build_vocab(["ab"], min_freq=1)
    with pytest.raises(DataError):
        v.decode([len(v)])


def test_decode_renders_sep_and_drops_other_reserved():
    v = build_vocab(["ab"], min_freq=1)
    ids = [BOS_ID] + v.encode("a") + [SEP_ID] + v.encode("b") + [EOS_ID, PAD_ID]
    assert v.decode(ids) == "a|b"


def test_vocab_save_load_round_trip(tmp_path):
    v = build_vocab(["hello world"], min_freq=1)
    p = tmp_path / "vocab.json"
    v.save(p)
    w = Vocabulary.load(p)
    assert w.id_to_token == v.id_to_token


# -- generator ----------------------------------------------------------------

def test_generator_all_generic_at_fraction_one():
    spec = GeneratorSpec(seed=1, n_examples=100, generic_fraction=1.0)
    pool = set(template_pool(spec))
    for ex in generate_corpus(spec):
        assert ex.edited in pool


def test_generator_all_specific_at_fraction_zero():
    spec = GeneratorSpec(seed=1, n_examples=100, generic_fraction=0.0)
    for ex in generate_corpus(spec):
        body_words = set(ex.body.split())
        edited_words = ex.edited.split()
        salient = [w for w in edited_words if w in body_words]
        assert len(salient) >= 2


def test_generator_is_byte_identical_for_same_spec():
    spec = GeneratorSpec(seed=5, n_examples=40)
    a = json.dumps([ex.to_dict() for ex in generate_corpus(spec)])
    b = json.dumps([ex.to_dict() for ex in generate_corpus(spec)])
    assert a == b


def test_generator_label_balance_within_three_percent():
    spec = GeneratorSpec(seed=11, n_examples=2000, generic_fraction=0.4)
    pool = set(template_pool(spec))
    frac = sum(ex.edited in pool for ex in generate_corpus(spec)) / spec.n_examples
    assert abs(frac - 0.4) <= 0.03


def test_generator_rejects_bad_fraction():
    with pytest.raises(ConfigError):
        GeneratorSpec(generic_fraction=1.5).validate()


def test_generator_bodies_contain_two_salient_words():
    spec = GeneratorSpec(seed=2, n_examples=30, generic_fraction=0.0)
    for ex in generate_corpus(spec):
        body_words = set(ex.body.split())
        salient = {w for w in ex.edited.split() if w in body_words}
        assert len(salient) >= 2


# -- JSONL ---------------------------------------------------------------------

def test_jsonl_round_trip(tmp_path):
    examples = generate_corpus(GeneratorSpec(seed=4, n_examples=50))
    p = tmp_path / "c.jsonl"
    save_jsonl(examples, p)
    loaded = load_jsonl(p)
    assert loaded == examples


def test_jsonl_bad_line_names_line_number(tmp_path):
    p = tmp_path / "c.jsonl"
    good = json.dumps(Example(body="b", original="o", edited="e").to_dict())
    lines = [good] * 6 + ["{not json"] + [good]
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(DataError) as err:
        load_jsonl(p)
    assert "line 7" in str(err.value)


def test_jsonl_empty_file(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text("", encoding="utf-8")
    assert load_jsonl(p) == []


def test_jsonl_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_jsonl(tmp_path / "absent.jsonl")


def test_jsonl_missing_key_names_line(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"body": "b", "edited": "e"}\n', encoding="utf-8")
    with pytest.raises(DataError) as err:
        load_jsonl(p)
    assert "line 1" in str(err.value)


# -- batching -------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_corpus():
    examples = generate_corpus(GeneratorSpec(seed=6, n_examples=40))
    texts = [ex.body for ex in examples] + [ex.original for ex in examples] \
        + [ex.edited for ex in examples]
    return examples, build_vocab(texts, min_freq=1)


def test_edit_batches_have_exactly_one_sep(small_corpus):
    examples, vocab = small_corpus
    for batch in make_batches(examples, vocab, "edit", batch_size=8, seed=1):
        assert ((batch.encoder_ids == SEP_ID).sum(axis=1) == 1).all()


def test_target_mask_counts_non_pad_targets(small_corpus):
    examples, vocab = small_corpus
    for batch in make_batches(examples, vocab, "edit", batch_size=8, seed=1):
        assert batch.target_mask.sum() == (batch.decoder_target_ids != PAD_ID).sum()
        assert np.array_equal(batch.target_mask, batch.decoder_target_ids != PAD_ID)


def test_batches_deterministic_for_seed(small_corpus):
    examples, vocab = small_corpus
    a = make_batches(examples, vocab, "edit", batch_size=8, seed=3)
    b = make_batches(examples, vocab, "edit", batch_size=8, seed=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.encoder_ids, y.encoder_ids)
        assert np.array_equal(x.decoder_in_ids, y.decoder_in_ids)
        assert np.array_equal(x.decoder_target_ids, y.decoder_target_ids)
    c = make_batches(examples, vocab, "edit", batch_size=8, seed=4)
    assert any(not np.array_equal(x.decoder_target_ids, y.decoder_target_ids)
               for x, y in zip(a, c))


def test_pretrain_batches_have_empty_encoder(small_corpus):
    examples, vocab = small_corpus
    for batch in make_batches(examples, vocab, "pretrain", batch_size=8, seed=1,
                              max_tgt_len=64):
        assert batch.encoder_ids.shape[1] == 0
        assert (batch.decoder_in_ids[:, 0] == BOS_ID).all()


def test_adapt_batches_encode_body(small_corpus):
    examples, vocab = small_corpus
    order_free = {ex.body for ex in examples}
    for batch in make_batches(examples, vocab, "adapt", batch_size=4, seed=1):
        for row in batch.encoder_ids:
            text = vocab.decode([i for i in row if i != PAD_ID])
            assert any(body.startswith(text) for body in order_free)


def test_batch_layout_consistency_on_random_corpora():
    # masks, paddings and EOS placement stay mutually consistent
    for seed in range(200):
        spec = GeneratorSpec(seed=seed, n_examples=6,
                             generic_fraction=(seed % 5) / 4.0)
        examples = generate_corpus(spec)
        vocab = build_vocab([ex.body + ex.original + ex.edited for ex in examples],
                            min_freq=1)
        task = ("pretrain", "adapt", "edit")[seed % 3]
        for batch in make_batches(examples, vocab, task, batch_size=4,
                                  max_src_len=48, max_tgt_len=16, seed=seed):
            pad_free = batch.decoder_target_ids[batch.target_mask]
            assert (pad_free != PAD_ID).all()
            eos_counts = (batch.decoder_target_ids == EOS_ID).sum(axis=1)
            assert (eos_counts == 1).all()
            # targets and shifted decoder input agree
            b, t = batch.decoder_target_ids.shape
            assert batch.decoder_in_ids.shape == (b, t)
            for i in range(b):
                n = int(batch.target_mask[i].sum())
                assert batch.decoder_target_ids[i, n - 1] == EOS_ID
                assert np.array_equal(batch.decoder_in_ids[i, 1:n],
                                      batch.decoder_target_ids[i, :n - 1])


def test_truncation_respects_limits(small_corpus):
    examples, vocab = small_corpus
    for batch in make_batches(examples, vocab, "edit", batch_size=8,
                              max_src_len=10, max_tgt_len=5, seed=0):
        assert batch.encoder_ids.shape[1] <= 10
        assert batch.decoder_target_ids.shape[1] <= 5


def test_make_batches_rejects_bad_task(small_corpus):
    examples, vocab = small_corpus
    with pytest.raises(ConfigError):
        make_batches(examples, vocab, "translate", batch_size=8)
