"""Prompt tokenization and the toy causal text encoder.

Sequences are fixed length N: one BOS, the prompt words, then EOS padding.
The encoder is a 2-block causal transformer, so the BOS output row never
depends on the prompt while the first EOS row aggregates all of it. Token
masks select a single position (BOS or first EOS) for the decoy bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, concat, layer_norm, matmul, mul_scalar, gelu, softmax

SHAPE_WORDS = ["circle", "square", "triangle", "cross"]
COLOR_WORDS = ["red", "green", "blue", "yellow"]
FILLER_WORDS = ["a", "the", "on", "background"]
QUALITY_WORDS = ["masterpiece", "best", "quality"]

VOCAB = ["<bos>", "<eos>"] + SHAPE_WORDS + COLOR_WORDS + FILLER_WORDS + QUALITY_WORDS
BOS_ID = 0
EOS_ID = 1
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

SEQ_LEN = 8          # N
EMBED_DIM = 32       # K
N_HEADS = 2
N_BLOCKS = 2

QUALITY_TAG_PROMPT = "masterpiece best quality"
NULL_PROMPT = ""

BOS = "BOS"
FIRST_EOS = "FIRST_EOS"


@dataclass
class TokenSequence:
    ids: list
    prompt_len: int


@dataclass
class PromptEmbedding:
    e: Tensor            # (N, K)
    prompt_len: int
    n: int = SEQ_LEN
    k: int = EMBED_DIM


@dataclass
class TokenMask:
    vec: np.ndarray      # (N,) one-hot float32
    target: str


def tokenize(prompt, n: int = SEQ_LEN) -> TokenSequence:
    """Map a prompt (string or word list) to the fixed BOS/words/EOS layout."""
    words = prompt.split() if isinstance(prompt, str) else list(prompt)
    for w in words:
        if w not in WORD_TO_ID:
            raise ValueError(f"unknown word: {w!r}")
    if len(words) > n - 2:
        words = words[: n - 2]
    ids = [BOS_ID] + [WORD_TO_ID[w] for w in words]
    ids += [EOS_ID] * (n - len(ids))
    return TokenSequence(ids=ids, prompt_len=len(words))


def base_prompts() -> dict:
    """The attack's base prompts: the quality tag and the null prompt."""
    return {"quality_tag": tokenize(QUALITY_TAG_PROMPT), "null": tokenize(NULL_PROMPT)}


def init_encoder_weights(rng: np.random.Generator, k: int = EMBED_DIM,
                         n: int = SEQ_LEN, vocab_size: int | None = None) -> dict:
    vocab_size = vocab_size or len(VOCAB)
    w = {}

    def p(name, *shape, zero=False):
        data = np.zeros(shape, dtype=np.float32) if zero else \
            rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        w[name] = Tensor(data, requires_grad=True)

    p("enc.tok_emb", vocab_size, k)
    p("enc.pos_emb", n, k)
    for b in range(N_BLOCKS):
        s = f"enc.block{b}"
        w[f"{s}.ln1.g"] = Tensor(np.ones(k, dtype=np.float32), requires_grad=True)
        p(f"{s}.ln1.b", k, zero=True)
        p(f"{s}.wq", k, k)
        p(f"{s}.wk", k, k)
        p(f"{s}.wv", k, k)
        p(f"{s}.wo", k, k)
        p(f"{s}.bo", k, zero=True)
        w[f"{s}.ln2.g"] = Tensor(np.ones(k, dtype=np.float32), requires_grad=True)
        p(f"{s}.ln2.b", k, zero=True)
        p(f"{s}.fc1", k, 4 * k)
        p(f"{s}.fc1b", 4 * k, zero=True)
        p(f"{s}.fc2", 4 * k, k)
        p(f"{s}.fc2b", k, zero=True)
    return w


def _causal_bias(n: int) -> Tensor:
    bias = np.triu(np.full((n, n), -1e9, dtype=np.float32), k=1)
    return Tensor(bias)


def encode(tokens: TokenSequence, weights: dict) -> PromptEmbedding:
    """Run the causal encoder; row i of the result sees only ids[0..i]."""
    n = len(tokens.ids)
    tok_emb = weights["enc.tok_emb"]
    k = tok_emb.shape[1]
    if weights["enc.pos_emb"].shape != (n, k):
        raise ValueError(f"pos_emb shape {weights['enc.pos_emb'].shape} != ({n}, {k})")
    rows = [tok_emb[i:i + 1] for i in tokens.ids]
    h = add(concat(rows, axis=0), weights["enc.pos_emb"])
    causal = _causal_bias(n)
    hd = k // N_HEADS
    for b in range(N_BLOCKS):
        s = f"enc.block{b}"
        x = layer_norm(h, weights[f"{s}.ln1.g"], weights[f"{s}.ln1.b"])
        q = matmul(x, weights[f"{s}.wq"]).reshape(n, N_HEADS, hd).permute(1, 0, 2)
        kk = matmul(x, weights[f"{s}.wk"]).reshape(n, N_HEADS, hd).permute(1, 0, 2)
        v = matmul(x, weights[f"{s}.wv"]).reshape(n, N_HEADS, hd).permute(1, 0, 2)
        scores = mul_scalar(matmul(q, kk.permute(0, 2, 1)), 1.0 / np.sqrt(hd))
        attn = softmax(scores, bias=causal)
        ctx = matmul(attn, v).permute(1, 0, 2).reshape(n, k)
        h = add(h, add(matmul(ctx, weights[f"{s}.wo"]), weights[f"{s}.bo"]))
        x = layer_norm(h, weights[f"{s}.ln2.g"], weights[f"{s}.ln2.b"])
        hmid = gelu(add(matmul(x, weights[f"{s}.fc1"]), weights[f"{s}.fc1b"]))
        h = add(h, add(matmul(hmid, weights[f"{s}.fc2"]), weights[f"{s}.fc2b"]))
    return PromptEmbedding(e=h, prompt_len=tokens.prompt_len, n=n, k=k)


def make_token_mask(e: PromptEmbedding, target: str) -> TokenMask:
    """One-hot mask over the N token positions (BOS or the first EOS)."""
    vec = np.zeros(e.n, dtype=np.float32)
    if target == BOS:
        vec[0] = 1.0
    elif target == FIRST_EOS:
        vec[1 + e.prompt_len] = 1.0
    else:
        raise ValueError(f"unknown mask target: {target!r}")
    return TokenMask(vec=vec, target=target)
