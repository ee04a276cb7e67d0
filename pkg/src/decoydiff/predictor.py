"""Noise predictor: a symmetric multi-resolution token transformer.

Stages run at token resolutions [64, 16, 4, 16, 64] with skip connections
pairing the down and up paths. Each stage applies self-attention,
cross-attention against the prompt embedding, and an MLP, all pre-norm
residual. Cross-attention optionally takes a one-hot token mask whose
large additive bias pins every query onto the masked token; traces of
(A, CA) per layer feed the attack loss and attribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (Tensor, add, concat, gelu, layer_norm, matmul, mul_scalar,
                     pool_tokens, softmax, upsample_tokens)
from .text import PromptEmbedding, TokenMask

STAGE_RESOLUTIONS = [64, 16, 4, 16, 64]
MODEL_DIM = 32           # per-token channel width
LATENT_CHANNELS = 8
CONTEXT_CHANNELS = 17    # 8 latent + 1 mask + 8 masked latent
DECOY_BIAS = 1e4


@dataclass(frozen=True)
class AttentionLayerId:
    index: int
    resolution: int


@dataclass
class TraceEntry:
    layer: AttentionLayerId
    attn: Tensor     # (queries, N) row-stochastic
    ca: Tensor       # (queries, channels)
    phi_in: Tensor   # stage features entering cross-attention


@dataclass
class AttentionTrace:
    entries: list = field(default_factory=list)
    masked: bool = False
    eps_hat: Tensor | None = None
    prompt_len: int | None = None


def init_predictor_weights(rng: np.random.Generator, dim: int = MODEL_DIM,
                           k_text: int = 32) -> dict:
    w = {}

    def p(name, *shape, zero=False, ones=False):
        if zero:
            data = np.zeros(shape, dtype=np.float32)
        elif ones:
            data = np.ones(shape, dtype=np.float32)
        else:
            data = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        w[name] = Tensor(data, requires_grad=True)

    p("pred.in_proj.w", CONTEXT_CHANNELS, dim)
    p("pred.in_proj.b", dim, zero=True)
    for i in range(len(STAGE_RESOLUTIONS)):
        s = f"pred.stage{i}"
        for ln in ("ln_sa", "ln_ca", "ln_mlp"):
            p(f"{s}.{ln}.g", dim, ones=True)
            p(f"{s}.{ln}.b", dim, zero=True)
        for nm in ("sa.wq", "sa.wk", "sa.wv", "sa.wo"):
            p(f"{s}.{nm}", dim, dim)
        p(f"{s}.sa.bo", dim, zero=True)
        p(f"{s}.ca.wq", dim, dim)
        p(f"{s}.ca.wk", k_text, dim)
        p(f"{s}.ca.wv", k_text, dim)
        p(f"{s}.ca.wo", dim, dim)
        p(f"{s}.ca.bo", dim, zero=True)
        p(f"{s}.mlp.fc1", dim, 4 * dim)
        p(f"{s}.mlp.fc1b", 4 * dim, zero=True)
        p(f"{s}.mlp.fc2", 4 * dim, dim)
        p(f"{s}.mlp.fc2b", dim, zero=True)
    for j in (3, 4):  # up stages receive skip concat
        p(f"pred.skip{j}.w", 2 * dim, dim)
        p(f"pred.skip{j}.b", dim, zero=True)
    p("pred.ln_out.g", dim, ones=True)
    p("pred.ln_out.b", dim, zero=True)
    p("pred.out_proj.w", dim, LATENT_CHANNELS, zero=True)
    p("pred.out_proj.b", LATENT_CHANNELS, zero=True)
    return w


def list_cross_attention_layers(weights: dict) -> list:
    del weights  # architecture is fixed; kept for interface symmetry
    return [AttentionLayerId(i, r) for i, r in enumerate(STAGE_RESOLUTIONS)]


def time_embedding(t: int, dim: int = MODEL_DIM) -> Tensor:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return Tensor(np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32))


def cross_attention(phi: Tensor, e: PromptEmbedding, w: dict, prefix: str,
                    mask: TokenMask | None = None, c: float = DECOY_BIAS):
    """Single-head cross-attention of stage features against the prompt.

    Returns (A, CA): the row-stochastic attention map and its value
    contraction, before the output projection.
    """
    if mask is not None and mask.vec.shape != (e.n,):
        raise ValueError(f"token mask length {mask.vec.shape[0]} != N={e.n}")
    q = matmul(phi, w[f"{prefix}.ca.wq"])
    k = matmul(e.e, w[f"{prefix}.ca.wk"])
    v = matmul(e.e, w[f"{prefix}.ca.wv"])
    scores = mul_scalar(matmul(q, k.transpose()), 1.0 / np.sqrt(q.shape[-1]))
    bias = Tensor(mask.vec * np.float32(c)) if mask is not None else None
    attn = softmax(scores, bias=bias)
    ca = matmul(attn, v)
    return attn, ca


def _self_attention(x: Tensor, w: dict, prefix: str) -> Tensor:
    q = matmul(x, w[f"{prefix}.sa.wq"])
    k = matmul(x, w[f"{prefix}.sa.wk"])
    v = matmul(x, w[f"{prefix}.sa.wv"])
    attn = softmax(mul_scalar(matmul(q, k.transpose()), 1.0 / np.sqrt(q.shape[-1])))
    return add(matmul(matmul(attn, v), w[f"{prefix}.sa.wo"]), w[f"{prefix}.sa.bo"])


def _stage(h: Tensor, i: int, e: PromptEmbedding, w: dict,
           mask: TokenMask | None, c: float, trace: AttentionTrace | None) -> Tensor:
    s = f"pred.stage{i}"
    h = add(h, _self_attention(layer_norm(h, w[f"{s}.ln_sa.g"], w[f"{s}.ln_sa.b"]), w, s))
    phi = layer_norm(h, w[f"{s}.ln_ca.g"], w[f"{s}.ln_ca.b"])
    attn, ca = cross_attention(phi, e, w, s, mask=mask, c=c)
    if trace is not None:
        trace.entries.append(TraceEntry(
            layer=AttentionLayerId(i, STAGE_RESOLUTIONS[i]), attn=attn, ca=ca, phi_in=phi))
    h = add(h, add(matmul(ca, w[f"{s}.ca.wo"]), w[f"{s}.ca.bo"]))
    x = layer_norm(h, w[f"{s}.ln_mlp.g"], w[f"{s}.ln_mlp.b"])
    x = gelu(add(matmul(x, w[f"{s}.mlp.fc1"]), w[f"{s}.mlp.fc1b"]))
    return add(h, add(matmul(x, w[f"{s}.mlp.fc2"]), w[f"{s}.mlp.fc2b"]))


def predict_noise(ctx, t: int, e: PromptEmbedding, weights: dict,
                  mask: TokenMask | None = None, trace: bool = False,
                  c: float = DECOY_BIAS):
    """Predict the noise residual for one inpainting context.

    ctx is an InpaintContext (17 channels); returns an (8, 8, 8) latent
    tensor plus an AttentionTrace when requested. Tracing is
    observation-only and never changes the computation.
    """
    feats = ctx.features()
    if feats.shape[-1] != CONTEXT_CHANNELS:
        raise ValueError(f"context must have {CONTEXT_CHANNELS} channels, got {feats.shape[-1]}")
    tr = AttentionTrace(masked=mask is not None, prompt_len=e.prompt_len) if trace else None
    h = add(add(matmul(feats, weights["pred.in_proj.w"]), weights["pred.in_proj.b"]),
            time_embedding(t, weights["pred.in_proj.w"].shape[1]))

    h0 = _stage(h, 0, e, weights, mask, c, tr)            # 64 tokens
    h1 = _stage(pool_tokens(h0), 1, e, weights, mask, c, tr)   # 16
    h2 = _stage(pool_tokens(h1), 2, e, weights, mask, c, tr)   # 4 (bottleneck)
    u1 = concat([upsample_tokens(h2), h1], axis=1)
    u1 = add(matmul(u1, weights["pred.skip3.w"]), weights["pred.skip3.b"])
    h3 = _stage(u1, 3, e, weights, mask, c, tr)           # 16
    u0 = concat([upsample_tokens(h3), h0], axis=1)
    u0 = add(matmul(u0, weights["pred.skip4.w"]), weights["pred.skip4.b"])
    h4 = _stage(u0, 4, e, weights, mask, c, tr)           # 64

    out = layer_norm(h4, weights["pred.ln_out.g"], weights["pred.ln_out.b"])
    eps = add(matmul(out, weights["pred.out_proj.w"]), weights["pred.out_proj.b"])
    eps = eps.reshape(8, 8, LATENT_CHANNELS)
    if tr is not None:
        tr.eps_hat = eps
        return eps, tr
    return eps, None


def dual_forward(ctx, t: int, e: PromptEmbedding, weights: dict,
                 decoy_mask: TokenMask, c: float = DECOY_BIAS):
    """Run the masked and unmasked branches on identical inputs.

    Both branches stay differentiable w.r.t. the context; they share the
    same input tensors, so one backward sweep covers both.
    """
    _, trace_masked = predict_noise(ctx, t, e, weights, mask=decoy_mask, trace=True, c=c)
    _, trace_unmasked = predict_noise(ctx, t, e, weights, mask=None, trace=True, c=c)
    return trace_masked, trace_unmasked
