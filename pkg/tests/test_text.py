import numpy as np
import pytest

from mobidiary.captions import ACTION_LABELS, render_caption
from mobidiary.text import (
    EOS,
    PAD,
    SOS,
    UNK,
    TextEncoderConfig,
    Vocabulary,
    build_vocab,
    check_token_sequence,
    detokenize,
    encode_caption,
    init_text_encoder,
    normalize,
    text_encode,
    tokenize,
)


def test_specials_fixed():
    assert (PAD, SOS, EOS, UNK) == (0, 1, 2, 3)


def test_tie_broken_alphabetically():
    v = build_vocab(["the user walks", "the user sits"], K=3)
    assert v.content_words == ["the", "user", "sits"]
    assert v.word_to_id["the"] == 4


def test_large_k_keeps_every_word_without_padding():
    v = build_vocab(["b a", "a c"], K=50)
    assert v.content_words == ["a", "b", "c"]
    assert len(v) == 7


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        build_vocab([])


def test_normalization():
    assert normalize("The user WALKS, then sits.") == ["the", "user", "walks", "then", "sits"]


def test_vocab_save_load_round_trip(tmp_path):
    v = build_vocab([render_caption(["walk", "sit", "drink"]), render_caption(["run"])])
    v.save(tmp_path / "v.txt")
    first = (tmp_path / "v.txt").read_bytes()
    assert Vocabulary.load(tmp_path / "v.txt").word_to_id == v.word_to_id
    build_vocab([render_caption(["walk", "sit", "drink"]), render_caption(["run"])]).save(tmp_path / "w.txt")
    assert (tmp_path / "w.txt").read_bytes() == first


def test_vocab_rejects_bad_words():
    with pytest.raises(ValueError):
        Vocabulary(["a", "a"])
    with pytest.raises(ValueError):
        Vocabulary(["Walks"])


def test_tokenize_and_unknown_words():
    v = build_vocab(["the user walks"])
    assert tokenize("The user walks.", v) == [v.word_to_id[w] for w in ("the", "user", "walks")]
    assert tokenize("zanzibar", v) == [UNK]


def test_detokenize_drops_specials():
    v = build_vocab(["the user walks"])
    ids = [SOS, v.word_to_id["the"], v.word_to_id["user"], EOS]
    assert detokenize(ids, v) == "the user"
    with pytest.raises(IndexError):
        detokenize([len(v)], v)


def test_caption_corpus_round_trip():
    rng = np.random.default_rng(0)
    caps = [render_caption(list(rng.choice(ACTION_LABELS, size=rng.integers(1, 7)))) for _ in range(50)]
    v = build_vocab(caps)
    for c in caps:
        assert detokenize(tokenize(c, v), v) == " ".join(normalize(c))


def test_token_sequence_invariants():
    check_token_sequence([SOS, 5, EOS], 10)
    with pytest.raises(ValueError):
        check_token_sequence([SOS, EOS, EOS], 10)
    with pytest.raises(ValueError):
        check_token_sequence([4, SOS], 10)
    with pytest.raises(ValueError):
        check_token_sequence([11], 10)


def test_encode_caption_frames_with_sos_eos():
    v = build_vocab(["the user runs"])
    assert encode_caption("The user runs.", v) == [SOS, v.word_to_id["the"], v.word_to_id["user"], v.word_to_id["runs"], EOS]


def _encoder(n_layers, seed=0, max_len=20):
    cfg = TextEncoderConfig(vocab_size=30, d_model=16, n_heads=2, n_layers=n_layers, ffn_width=32, max_text_len=max_len)
    params = {}
    init_text_encoder(params, cfg, np.random.default_rng(seed), np.float64)
    return cfg, params


@pytest.mark.parametrize("n_layers", [1, 2, 4])
def test_causality(n_layers, rng):
    cfg, params = _encoder(n_layers)
    ids = rng.integers(0, 30, size=9)
    base = text_encode(ids, params, cfg).data
    for j in range(1, 9):
        changed = ids.copy()
        changed[j] = (changed[j] + 7) % 30
        out = text_encode(changed, params, cfg).data
        assert np.array_equal(out[:j], base[:j])
        assert not np.array_equal(out[j], base[j])


def test_shape_and_single_token():
    cfg, params = _encoder(2)
    assert text_encode([SOS, 5, 6, 7], params, cfg).shape == (4, 16)
    one = text_encode([SOS], params, cfg).data
    assert one.shape == (1, 16) and np.isfinite(one).all()


def test_overlong_input_rejected():
    cfg, params = _encoder(1, max_len=5)
    with pytest.raises(ValueError):
        text_encode([SOS] + [4] * 5, params, cfg)
