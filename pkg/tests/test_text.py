import numpy as np
import pytest

from decoydiff import text
from decoydiff.tensor import no_grad


@pytest.fixture(scope="module")
def enc_weights():
    return text.init_encoder_weights(np.random.default_rng(21))


def test_vocab_layout():
    assert text.VOCAB[0] == "<bos>" and text.VOCAB[1] == "<eos>"
    assert text.BOS_ID == 0 and text.EOS_ID == 1
    assert len(text.VOCAB) <= 32
    for w in ("circle", "red", "a", "masterpiece"):
        assert w in text.WORD_TO_ID


def test_tokenize_empty():
    ts = text.tokenize("")
    assert ts.ids == [0] + [1] * 7
    assert ts.prompt_len == 0


def test_tokenize_layout():
    ts = text.tokenize("a red circle")
    assert ts.ids[0] == text.BOS_ID
    assert ts.ids[1:4] == [text.WORD_TO_ID[w] for w in ("a", "red", "circle")]
    assert ts.ids[4:] == [text.EOS_ID] * 4
    assert ts.prompt_len == 3


def test_tokenize_truncation():
    words = ["a", "red", "circle", "on", "green", "background", "the", "blue", "square"]
    ts = text.tokenize(words)
    assert ts.prompt_len == 6
    assert ts.ids[1:7] == [text.WORD_TO_ID[w] for w in words[:6]]
    assert ts.ids[7] == text.EOS_ID
    assert len(ts.ids) == 8


def test_tokenize_unknown_word_named():
    with pytest.raises(ValueError, match="zebra"):
        text.tokenize("a red zebra")


def test_encode_bos_row_prompt_independent(enc_weights):
    with no_grad():
        e1 = text.encode(text.tokenize("a red circle"), enc_weights)
        e2 = text.encode(text.tokenize("a blue square"), enc_weights)
    assert np.array_equal(e1.e.data[0], e2.e.data[0])


def test_encode_shape_and_determinism(enc_weights):
    with no_grad():
        a = text.encode(text.tokenize("the green cross"), enc_weights)
        b = text.encode(text.tokenize("the green cross"), enc_weights)
    assert a.e.data.shape == (8, 32)
    assert np.array_equal(a.e.data, b.e.data)


def test_encode_first_eos_sensitive_to_token_change(enc_weights):
    # perturb-one-token probe: first EOS row must move
    base = "a red circle"
    with no_grad():
        e0 = text.encode(text.tokenize(base), enc_weights)
        e1 = text.encode(text.tokenize("a blue circle"), enc_weights)
    row = 1 + 3
    assert np.linalg.norm(e0.e.data[row] - e1.e.data[row]) > 0


def test_encode_first_eos_sensitive_to_every_substitution(enc_weights):
    base = ["the", "red", "circle"]
    subs = {0: "a", 1: "blue", 2: "square"}
    with no_grad():
        e0 = text.encode(text.tokenize(base), enc_weights)
        for pos, word in subs.items():
            mod = list(base)
            mod[pos] = word
            e1 = text.encode(text.tokenize(mod), enc_weights)
            assert np.linalg.norm(e0.e.data[4] - e1.e.data[4]) > 0


def test_encode_causality_prefix_rows_unchanged(enc_weights):
    # changing token j leaves rows 0..j-1 bit-identical
    with no_grad():
        e0 = text.encode(text.tokenize("a red circle"), enc_weights)
        e1 = text.encode(text.tokenize("a red square"), enc_weights)
    assert np.array_equal(e0.e.data[:3], e1.e.data[:3])
    with no_grad():
        e2 = text.encode(text.tokenize("a blue circle"), enc_weights)
    assert np.array_equal(e0.e.data[:2], e2.e.data[:2])


def test_encode_weight_shape_mismatch_rejected(enc_weights):
    from decoydiff.tensor import Tensor
    bad = dict(enc_weights)
    bad["enc.pos_emb"] = Tensor(np.zeros((4, 32), dtype=np.float32))
    with pytest.raises(ValueError, match="pos_emb"):
        text.encode(text.tokenize("a red circle"), bad)


def test_make_token_mask_bos():
    e = _dummy_embedding(prompt_len=3)
    m = text.make_token_mask(e, text.BOS)
    assert m.vec.tolist() == [1, 0, 0, 0, 0, 0, 0, 0]


def test_make_token_mask_first_eos():
    e = _dummy_embedding(prompt_len=3)
    m = text.make_token_mask(e, text.FIRST_EOS)
    assert np.argmax(m.vec) == 4 and m.vec.sum() == 1


def test_make_token_mask_first_eos_empty_prompt():
    e = _dummy_embedding(prompt_len=0)
    m = text.make_token_mask(e, text.FIRST_EOS)
    assert np.argmax(m.vec) == 1 and m.vec.sum() == 1


def test_base_prompts():
    bp = text.base_prompts()
    assert bp["quality_tag"].prompt_len == 3
    assert bp["null"].prompt_len == 0
    for ts in bp.values():
        assert ts.ids[0] == text.BOS_ID
        assert all(i == text.EOS_ID for i in ts.ids[1 + ts.prompt_len:])
        assert len(ts.ids) == text.SEQ_LEN


def test_bos_invariance_across_100_prompts(enc_weights):
    rng = np.random.default_rng(9)
    words = text.SHAPE_WORDS + text.COLOR_WORDS + text.FILLER_WORDS + text.QUALITY_WORDS
    with no_grad():
        ref = text.encode(text.tokenize(""), enc_weights).e.data[0]
        for _ in range(100):
            k = int(rng.integers(0, 7))
            prompt = [words[i] for i in rng.integers(0, len(words), size=k)]
            e = text.encode(text.tokenize(prompt), enc_weights)
            assert np.max(np.abs(e.e.data[0] - ref)) < 1e-6


def _dummy_embedding(prompt_len):
    from decoydiff.tensor import Tensor
    return text.PromptEmbedding(e=Tensor(np.zeros((8, 32), dtype=np.float32)),
                                prompt_len=prompt_len)
