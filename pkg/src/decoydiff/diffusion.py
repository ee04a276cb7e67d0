"""Noise schedule, latent codec, inpainting context, training, sampling.

Images are 16x16x3 in [0, 1]; the fixed linear codec maps each 2x2x3
patch to an 8-dim latent token, giving an 8x8x8 latent grid. The predictor
consumes concat(z_t, downsampled keep-mask, masked latent) = 17 channels.
Sampling is deterministic DDIM (eta=0) with classifier-free guidance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import text
from .predictor import STAGE_RESOLUTIONS, predict_noise
from .tensor import Tensor, Adam, add, backward, clamp01, concat, mse, mul, no_grad

IMAGE_SIZE = 16
LATENT_GRID = 8
LATENT_CHANNELS = 8
PATCH = 2


class TrainingDiverged(RuntimeError):
    pass


class NoiseSchedule:
    """Linear-beta schedule. The canonical 1e-4..0.02 DDPM ramp is defined
    at 1000 steps; betas scale by 1000/T so alpha_bar(T) stays < 0.01 at
    any step count (pure-noise endpoint)."""

    def __init__(self, t_steps: int = 100, beta_start: float = 1e-4,
                 beta_end: float = 0.02, ref_steps: int = 1000):
        scale = ref_steps / t_steps
        self.t_steps = t_steps
        self.beta_start, self.beta_end, self.ref_steps = beta_start, beta_end, ref_steps
        self.betas = np.linspace(beta_start * scale, beta_end * scale,
                                 t_steps, dtype=np.float64).astype(np.float32)
        if not (np.all(self.betas > 0) and np.all(self.betas < 1)):
            raise ValueError(f"betas out of (0, 1) for T={t_steps}")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas).astype(np.float32)
        if self.alpha_bars[-1] >= 0.01:
            raise ValueError(f"alpha_bar(T)={self.alpha_bars[-1]:.4f} >= 0.01; "
                             "z_T would not be pure noise")

    def alpha_bar(self, t: int) -> float:
        if not 1 <= t <= self.t_steps:
            raise ValueError(f"timestep {t} out of [1, {self.t_steps}]")
        return float(self.alpha_bars[t - 1])


class LatentCodec:
    """Fixed linear patch codec: seeded Gaussian, orthonormalized columns,
    so encode(decode(encode(x))) == encode(x)."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(PATCH * PATCH * 3, LATENT_CHANNELS))
        q, r = np.linalg.qr(raw)
        q = q * np.sign(np.diag(r))  # fix QR sign ambiguity
        self.w = q.astype(np.float32)  # (12, 8), orthonormal columns

    def encode(self, x: Tensor) -> Tensor:
        """Differentiable encode of a (16, 16, 3) image to (8, 8, 8) latents."""
        g = LATENT_GRID
        patches = x.reshape(g, PATCH, g, PATCH, 3).permute(0, 2, 1, 3, 4)
        flat = patches.reshape(g * g, PATCH * PATCH * 3)
        return (flat @ Tensor(self.w)).reshape(g, g, LATENT_CHANNELS)

    def encode_np(self, x: np.ndarray) -> np.ndarray:
        g = LATENT_GRID
        flat = x.reshape(g, PATCH, g, PATCH, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)
        return (flat.astype(np.float32) @ self.w).reshape(g, g, LATENT_CHANNELS)

    def decode_np(self, z: np.ndarray) -> np.ndarray:
        g = LATENT_GRID
        flat = z.reshape(g * g, LATENT_CHANNELS) @ self.w.T
        patches = flat.reshape(g, g, PATCH, PATCH, 3).transpose(0, 2, 1, 3, 4)
        return patches.reshape(IMAGE_SIZE, IMAGE_SIZE, 3)


@dataclass
class InpaintContext:
    z_t: Tensor                 # (8, 8, 8)
    m_prime: np.ndarray         # (8, 8) binary keep-mask
    z0_masked: Tensor           # (8, 8, 8); the only delta-dependent input
    mask_pyramid: dict          # resolution -> flat keep weights in [0, 1]
    _feats: Tensor | None = field(default=None, repr=False)

    def features(self) -> Tensor:
        if self._feats is None:
            g = LATENT_GRID
            zt = self.z_t.reshape(g * g, LATENT_CHANNELS)
            mp = Tensor(self.m_prime.reshape(g * g, 1))
            zm = self.z0_masked.reshape(g * g, LATENT_CHANNELS)
            self._feats = concat([zt, mp, zm], axis=1)
        return self._feats


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    """2x2 average-pool then threshold at 0.5 (ties keep)."""
    g = LATENT_GRID
    pooled = mask.reshape(g, PATCH, g, PATCH).mean(axis=(1, 3))
    return (pooled >= 0.5).astype(np.float32)


def build_mask_pyramid(m_prime: np.ndarray) -> dict:
    """Average-pool the latent keep-mask to each attention resolution."""
    pyramid = {}
    cur = m_prime.astype(np.float32)
    for res in sorted(set(STAGE_RESOLUTIONS), reverse=True):
        side = int(math.isqrt(res))
        while cur.shape[0] > side:
            h = cur.shape[0] // 2
            cur = cur.reshape(h, 2, h, 2).mean(axis=(1, 3))
        pyramid[res] = cur.reshape(-1).copy()
    return pyramid


def make_inpaint_context(x: np.ndarray, mask: np.ndarray, delta, z_t,
                         codec: LatentCodec) -> InpaintContext:
    """Assemble the 17-channel predictor input.

    Gradients w.r.t. delta flow only through the masked latent; z_t is
    taken as given. x+delta is clipped to [0, 1] before masking.
    """
    if x.shape != (IMAGE_SIZE, IMAGE_SIZE, 3) or mask.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"bad shapes: image {x.shape}, mask {mask.shape}")
    mask3 = np.repeat(mask[:, :, None], 3, axis=2).astype(np.float32)
    if delta is None:
        masked = Tensor(x * mask3)
    else:
        delta_t = delta if isinstance(delta, Tensor) else Tensor(delta)
        masked = mul(clamp01(add(Tensor(x.astype(np.float32)), delta_t)), Tensor(mask3))
    z0_masked = codec.encode(masked)
    z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    m_prime = downsample_mask(mask)
    return InpaintContext(z_t=z_t, m_prime=m_prime, z0_masked=z0_masked,
                          mask_pyramid=build_mask_pyramid(m_prime))


def q_sample(z0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward noising: sqrt(ab)*z0 + sqrt(1-ab)*eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    ab = schedule.alpha_bar(t)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


@dataclass
class SamplerConfig:
    inference_steps: int = 25
    cfg_scale: float = 7.5
    strength: float = 1.0
    seed: int = 0

    def validate(self, t_steps: int):
        if not 1 <= self.inference_steps <= t_steps:
            raise ValueError(f"inference_steps {self.inference_steps} out of [1, {t_steps}]")
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale {self.cfg_scale} must be >= 0")
        if not 0.0 < self.strength <= 1.0:
            raise ValueError(f"strength {self.strength} out of (0, 1]")


def cfg_mix(cond: np.ndarray, uncond: np.ndarray, w: float) -> np.ndarray:
    """Guided noise estimate (1+w)*cond - w*uncond; affine in w."""
    return ((1.0 + w) * cond - w * uncond).astype(np.float32)


def timestep_grid(t_steps: int, inference_steps: int) -> list:
    """Descending evenly spaced timesteps ending near t=1."""
    return [round(t_steps * (inference_steps - i) / inference_steps)
            for i in range(inference_steps)]


def sample_inpaint(x: np.ndarray, mask: np.ndarray, prompt: str, cfg: SamplerConfig,
                   ckpt, trace: bool = False):
    """Deterministic DDIM inpainting with classifier-free guidance.

    Returns (image, traces): the composited output x*M + generated*(1-M)
    and, when requested, the conditional branch's attention trace per step.
    """
    schedule = ckpt.schedule
    cfg.validate(schedule.t_steps)
    rng = np.random.default_rng(cfg.seed)
    with no_grad():
        e_cond = text.encode(text.tokenize(prompt), ckpt.weights)
        e_null = text.encode(text.tokenize(""), ckpt.weights)
        grid = timestep_grid(schedule.t_steps, cfg.inference_steps)
        k = math.ceil(cfg.strength * cfg.inference_steps)
        start = cfg.inference_steps - k
        shape = (LATENT_GRID, LATENT_GRID, LATENT_CHANNELS)
        if cfg.strength >= 1.0:
            z = rng.normal(size=shape).astype(np.float32)
        else:
            eps0 = rng.normal(size=shape).astype(np.float32)
            z = q_sample(ckpt.codec.encode_np(x), grid[start], eps0, schedule)
        traces = [] if trace else None
        for i in range(start, cfg.inference_steps):
            t = grid[i]
            ctx = make_inpaint_context(x, mask, None, Tensor(z), ckpt.codec)
            eps_c, tr = predict_noise(ctx, t, e_cond, ckpt.weights, trace=trace)
            if trace:
                traces.append(tr)
            if cfg.cfg_scale == 0.0:
                eps_hat = eps_c.data
            else:
                eps_u, _ = predict_noise(ctx, t, e_null, ckpt.weights)
                eps_hat = cfg_mix(eps_c.data, eps_u.data, cfg.cfg_scale)
            ab_t = schedule.alpha_bar(t)
            ab_prev = schedule.alpha_bar(grid[i + 1]) if i + 1 < cfg.inference_steps else 1.0
            z0_hat = (z - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
            z = (np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat).astype(np.float32)
    generated = np.clip(ckpt.codec.decode_np(z), 0.0, 1.0)
    mask3 = mask[:, :, None]
    out = (x * mask3 + generated * (1.0 - mask3)).astype(np.float32)
    return out, traces


@dataclass
class TrainConfig:
    steps: int = 12000
    lr: float = 2e-3
    seed: int = 0
    null_prompt_frac: float = 0.10
    ema_decay: float = 0.99
    divergence_factor: float = 10.0
    divergence_window: int = 500


def train(dataset, config: TrainConfig, schedule: NoiseSchedule, codec: LatentCodec,
          weights: dict | None = None):
    """Train encoder and predictor jointly on the noise-prediction loss.

    Per step: one example, t ~ U[1, T], eps ~ N(0, I); the prompt is the
    null prompt 10% of the time (CFG needs a real unconditional branch),
    otherwise the mask or full caption with equal odds. Returns
    (weights, curve) with curve rows (step, loss, ema).
    """
    rng = np.random.default_rng(config.seed)
    if weights is None:
        weights = text.init_encoder_weights(rng)
        from .predictor import init_predictor_weights
        weights.update(init_predictor_weights(rng))
    opt = Adam(weights, lr=config.lr)
    curve = []
    ema = None
    diverged_run = 0
    for step in range(config.steps):
        ex = dataset[rng.integers(len(dataset))]
        t = int(rng.integers(1, schedule.t_steps + 1))
        eps = rng.normal(size=(LATENT_GRID, LATENT_GRID, LATENT_CHANNELS)).astype(np.float32)
        u = rng.random()
        if u < config.null_prompt_frac:
            prompt = ""
        elif u < config.null_prompt_frac + (1 - config.null_prompt_frac) / 2:
            prompt = ex.prompt_mask
        else:
            prompt = ex.prompt_full
        z0 = codec.encode_np(ex.image)
        z_t = q_sample(z0, t, eps, schedule)
        ctx = make_inpaint_context(ex.image, ex.mask, None, Tensor(z_t), codec)
        e = text.encode(text.tokenize(prompt), weights)
        eps_hat, _ = predict_noise(ctx, t, e, weights)
        loss = mse(eps_hat, Tensor(eps))
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.zero_grad()
        backward(loss, params=weights.values())
        opt.step()
        ema = loss_val if ema is None else config.ema_decay * ema + (1 - config.ema_decay) * loss_val
        curve.append((step, loss_val, ema))
        if curve and loss_val > config.divergence_factor * curve[0][1]:
            diverged_run += 1
            if diverged_run >= config.divergence_window:
                raise TrainingDiverged(
                    f"loss {loss_val:.4f} > {config.divergence_factor}x initial "
                    f"{curve[0][1]:.4f} for {diverged_run} consecutive steps (step {step})")
        else:
            diverged_run = 0
    return weights, curve
