"""Measurement side: token attribution, attention masses, PSNR, morphology.

Attribution averages the conditional-branch attention maps over sampler
steps and selected layers, upsampled (nearest) onto the 8x8 latent grid;
per-position token masses always sum to 1. CONTENT/BOS/EOS masses inside
the inpaint region are the suppression proxy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CONTENT = "CONTENT"
BOS = "BOS"
EOS = "EOS"

ERODE = "ERODE"
DILATE = "DILATE"

QUANTIZE = "QUANTIZE"
BOXBLUR = "BOXBLUR"


@dataclass
class AttentionAttribution:
    heat: np.ndarray      # (N, 8, 8): per-token mass per latent position
    prompt_len: int


@dataclass
class MetricsReport:
    content_mass_inpaint: float
    bos_mass_inpaint: float
    eos_mass_inpaint: float
    psnr_vs_oracle: float
    mse_vs_oracle: float
    config: dict


def _upsample_nearest(a: np.ndarray, side: int) -> np.ndarray:
    rep = side // a.shape[0]
    return np.repeat(np.repeat(a, rep, axis=0), rep, axis=1)


def attribute(traces, layer_selection) -> AttentionAttribution:
    """Average traced attention over steps and selected layers onto 8x8."""
    if not traces:
        raise ValueError("no traces to attribute")
    selection = set(layer_selection)
    acc = None
    count = 0
    prompt_len = None
    for tr in traces:
        for ent in tr.entries:
            if ent.layer.resolution not in selection:
                continue
            a = ent.attn.data  # (q, N)
            q, n = a.shape
            side = int(math.isqrt(q))
            maps = np.stack([_upsample_nearest(a[:, j].reshape(side, side), 8)
                             for j in range(n)])
            acc = maps if acc is None else acc + maps
            count += 1
    if count == 0:
        raise ValueError(f"no traced layers match selection {sorted(selection)}")
    heat = acc / count
    heat = heat / heat.sum(axis=0, keepdims=True)
    if prompt_len is None:
        prompt_len = getattr(traces[0], "prompt_len", None)
    return AttentionAttribution(heat=heat.astype(np.float32), prompt_len=prompt_len)


def attention_mass(attr: AttentionAttribution, m_prime: np.ndarray,
                   token_class: str, prompt_len: int | None = None) -> float:
    """Mean summed class mass over inpaint-region latent positions."""
    p = attr.prompt_len if prompt_len is None else prompt_len
    if p is None:
        raise ValueError("prompt_len required to classify tokens")
    n = attr.heat.shape[0]
    if token_class == BOS:
        idx = [0]
    elif token_class == CONTENT:
        idx = list(range(1, 1 + p))
    elif token_class == EOS:
        idx = list(range(1 + p, n))
    else:
        raise ValueError(f"unknown token class: {token_class!r}")
    region = m_prime < 0.5
    if not region.any():
        raise ValueError("mask selects no inpaint positions")
    if not idx:
        return 0.0
    class_mass = attr.heat[idx].sum(axis=0)
    return float(class_mass[region].mean())


def mse_images(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images; identical inputs give +inf."""
    m = mse_images(a, b)
    if m == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / m))


def color_dominance(image: np.ndarray, region: np.ndarray, color_word: str) -> float:
    """Mean of the color's channels minus mean of the other channels,
    averaged over the region (region: boolean or 0/1 pixel mask)."""
    from .dataset import COLOR_RGB
    rgb = np.array(COLOR_RGB[color_word])
    sel = region.astype(bool)
    if not sel.any():
        raise ValueError("empty region")
    pix = image[sel]
    on = rgb > 0.5
    return float(pix[:, on].mean() - pix[:, ~on].mean())


def morph(mask: np.ndarray, mode: str, kernel: int = 5, iterations: int = 1) -> np.ndarray:
    """Binary morphology on the KEEP=1 field with a square element.

    Erosion pads with 1 and dilation with 0, so the duality
    dilate(m) == 1 - erode(1 - m) holds exactly.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    if mode not in (ERODE, DILATE):
        raise ValueError(f"mode must be ERODE or DILATE, got {mode!r}")
    m = (mask >= 0.5).astype(np.float32)
    r = kernel // 2
    for _ in range(iterations):
        padval = 1.0 if mode == ERODE else 0.0
        p = np.pad(m, r, constant_values=padval)
        stacks = [p[i:i + m.shape[0], j:j + m.shape[1]]
                  for i in range(kernel) for j in range(kernel)]
        m = np.min(stacks, axis=0) if mode == ERODE else np.max(stacks, axis=0)
    return m.astype(np.float32)


def robustness_transform(x: np.ndarray, kind: str, levels: int | None = None,
                         radius: int | None = None) -> np.ndarray:
    """Purification proxies: uniform quantization or box blur."""
    if kind == QUANTIZE:
        if levels is None or levels < 2:
            raise ValueError("QUANTIZE needs levels >= 2")
        q = levels - 1
        return (np.round(x * q) / q).astype(np.float32)
    if kind == BOXBLUR:
        if radius is None or radius < 1:
            raise ValueError("BOXBLUR needs radius >= 1")
        k = 2 * radius + 1
        p = np.pad(x, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
        acc = np.zeros_like(x, dtype=np.float64)
        for i in range(k):
            for j in range(k):
                acc += p[i:i + x.shape[0], j:j + x.shape[1]]
        return (acc / (k * k)).astype(np.float32)
    raise ValueError(f"unknown transform kind: {kind!r}")
