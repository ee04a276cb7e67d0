"""Protective perturbation engine: decoy loss over cross-attention + PGD.

The objective drives the unmasked cross-attention output toward what it
would be if a large bias forced every query onto a semantically empty
token (BOS by default). Signed gradient steps on the pixel perturbation
stay inside the L-inf budget and the valid image range.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import text
from .diffusion import (LATENT_CHANNELS, LATENT_GRID, make_inpaint_context,
                        q_sample, timestep_grid)
from .predictor import dual_forward, predict_noise
from .tensor import (Tensor, add, backward, mse, mul, mul_scalar, no_grad,
                     sqrt, sub, sum_)

INPAINT = "INPAINT"
KEEP = "KEEP"

PROBE_SIZE = 16
PROBE_EVERY = 50


@dataclass
class AttackConfig:
    epsilon: float = 12.0 / 255.0
    step_size: float = 2.0 / 255.0
    iterations: int = 400
    grad_samples: int = 1
    layer_selection: tuple = (16, 4)
    decoy_target: str = text.BOS
    base_prompt: str = "QUALITY_TAG"   # QUALITY_TAG | NULL | custom words
    region_selector: str = INPAINT
    stop_grad_target: bool = False
    bias_c: float = 1e4
    seed: int = 0
    objective: str = "l_ca"            # l_ca | noise-pred (baseline)
    noise_pred_steps: int = 4

    def validate(self, available_resolutions):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.epsilon > 0 and self.step_size > self.epsilon:
            raise ValueError(f"step_size {self.step_size} > epsilon {self.epsilon}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.grad_samples < 1:
            raise ValueError("grad_samples must be >= 1")
        extra = set(self.layer_selection) - set(available_resolutions)
        if extra:
            raise ValueError(f"layer_selection has unavailable resolutions: {sorted(extra)}")
        if self.region_selector not in (INPAINT, KEEP):
            raise ValueError(f"bad region_selector: {self.region_selector!r}")
        if self.objective not in ("l_ca", "noise-pred"):
            raise ValueError(f"bad objective: {self.objective!r}")

    def base_prompt_text(self) -> str:
        if self.base_prompt == "QUALITY_TAG":
            return text.QUALITY_TAG_PROMPT
        if self.base_prompt == "NULL":
            return text.NULL_PROMPT
        return self.base_prompt


@dataclass
class AdversarialNoise:
    delta: np.ndarray            # (16, 16, 3)
    loss_history: list
    probe_history: list          # (iteration, probe L_CA) pairs
    config: AttackConfig
    seed: int
    iteration_seconds: float = 0.0


def l_ca(trace_masked, trace_unmasked, mask_pyramid: dict, layer_selection,
         region_selector: str = INPAINT, stop_grad_target: bool = False) -> Tensor:
    """Mean over selected layers of the region-weighted L2 gap between the
    masked and unmasked cross-attention outputs."""
    selected = [(m, u) for m, u in zip(trace_masked.entries, trace_unmasked.entries)
                if m.layer.resolution in set(layer_selection)]
    if not selected:
        raise ValueError("empty layer selection")
    total = None
    for ent_m, ent_u in selected:
        res = ent_m.layer.resolution
        keep_w = mask_pyramid[res]
        w = (1.0 - keep_w) if region_selector == INPAINT else keep_w
        ca_m = Tensor(ent_m.ca.data.copy()) if stop_grad_target else ent_m.ca
        diff = sub(ca_m, ent_u.ca)
        w_full = Tensor(np.broadcast_to(w[:, None].astype(np.float32), diff.shape).copy())
        weighted = mul(diff, w_full)
        layer_loss = sqrt(sum_(mul(weighted, weighted)))
        total = layer_loss if total is None else add(total, layer_loss)
    return mul_scalar(total, 1.0 / len(selected))


def project(delta: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into the L-inf ball, then keep x+delta inside [0, 1].

    Iterated to a float32 fixpoint so the result is exactly idempotent.
    """
    eps32 = np.float32(epsilon)
    d = np.asarray(delta, dtype=np.float32)
    for _ in range(8):
        prev = d
        d = np.clip(d, -eps32, eps32)
        d = (np.clip(x + d, 0.0, 1.0) - x).astype(np.float32)
        if np.array_equal(d, prev):
            break
    return d


def _check_budget(delta: np.ndarray, x: np.ndarray, epsilon: float):
    # float32 slack only; the projection itself is exact up to rounding
    tol = 1e-6
    if np.max(np.abs(delta)) > epsilon + tol:
        raise AssertionError("delta escaped the L-inf ball")
    s = x + delta
    if s.min() < -tol or s.max() > 1.0 + tol:
        raise AssertionError("x + delta escaped [0, 1]")


def _probe_loss(x, mask, delta, probes, e_base, decoy_mask, cfg, ckpt) -> float:
    with no_grad():
        vals = []
        for t, eps in probes:
            z_t = q_sample(ckpt.codec.encode_np(x), t, eps, ckpt.schedule)
            ctx = make_inpaint_context(x, mask, delta, Tensor(z_t), ckpt.codec)
            tm, tu = dual_forward(ctx, t, e_base, ckpt.weights, decoy_mask, c=cfg.bias_c)
            vals.append(l_ca(tm, tu, ctx.mask_pyramid, cfg.layer_selection,
                             cfg.region_selector).item())
    return float(np.mean(vals))


def _frozen_embedding(cfg: AttackConfig, ckpt):
    with no_grad():
        e = text.encode(text.tokenize(cfg.base_prompt_text()), ckpt.weights)
    const = text.PromptEmbedding(e=Tensor(e.e.data.copy()), prompt_len=e.prompt_len,
                                 n=e.n, k=e.k)
    return const, text.make_token_mask(const, cfg.decoy_target)


def _lca_iteration_grad(x, mask, delta_np, rng, e_base, decoy_mask, cfg, ckpt):
    z0_clean = ckpt.codec.encode_np(x)
    grad_acc = np.zeros_like(delta_np)
    losses = []
    for _ in range(cfg.grad_samples):
        t = int(rng.integers(1, ckpt.schedule.t_steps + 1))
        eps = rng.normal(size=z0_clean.shape).astype(np.float32)
        z_t = q_sample(z0_clean, t, eps, ckpt.schedule)
        delta_t = Tensor(delta_np, requires_grad=True)
        ctx = make_inpaint_context(x, mask, delta_t, Tensor(z_t), ckpt.codec)
        tm, tu = dual_forward(ctx, t, e_base, ckpt.weights, decoy_mask, c=cfg.bias_c)
        loss = l_ca(tm, tu, ctx.mask_pyramid, cfg.layer_selection,
                    cfg.region_selector, cfg.stop_grad_target)
        backward(loss, params=[delta_t])
        grad_acc += delta_t.grad
        losses.append(loss.item())
    return grad_acc / cfg.grad_samples, float(np.mean(losses)), -1.0


def _noise_pred_iteration_grad(x, mask, delta_np, rng, e_base, decoy_mask, cfg, ckpt):
    """Baseline objective: backprop through a short denoising loop and push
    the predictions away from their clean-image targets (gradient ascent)."""
    del decoy_mask
    steps = cfg.noise_pred_steps
    grid = timestep_grid(ckpt.schedule.t_steps, steps)
    z_init = rng.normal(size=(LATENT_GRID, LATENT_GRID, LATENT_CHANNELS)).astype(np.float32)
    # clean-trajectory targets, no gradients
    with no_grad():
        targets = []
        z = z_init.copy()
        for i, t in enumerate(grid):
            ctx0 = make_inpaint_context(x, mask, None, Tensor(z), ckpt.codec)
            eps_hat, _ = predict_noise(ctx0, t, e_base, ckpt.weights)
            targets.append(eps_hat.data.copy())
            z = _ddim_step(z, eps_hat.data, ckpt.schedule, grid, i)
    delta_t = Tensor(delta_np, requires_grad=True)
    z_t = Tensor(z_init.copy())
    loss = None
    for i, t in enumerate(grid):
        ctx = make_inpaint_context(x, mask, delta_t, z_t, ckpt.codec)
        eps_hat, _ = predict_noise(ctx, t, e_base, ckpt.weights)
        term = mse(eps_hat, Tensor(targets[i]))
        loss = term if loss is None else add(loss, term)
        if i + 1 < len(grid):
            z_t = _ddim_step_t(z_t, eps_hat, ckpt.schedule, grid, i)
    loss = mul_scalar(loss, 1.0 / steps)
    backward(loss, params=[delta_t])
    # ascent on the deviation: negate so the caller's descent step maximizes it
    return -delta_t.grad, loss.item(), -1.0


def _ddim_step(z, eps_hat, schedule, grid, i):
    ab_t = schedule.alpha_bar(grid[i])
    ab_prev = schedule.alpha_bar(grid[i + 1]) if i + 1 < len(grid) else 1.0
    z0_hat = (z - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return (np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat).astype(np.float32)


def _ddim_step_t(z: Tensor, eps_hat: Tensor, schedule, grid, i) -> Tensor:
    ab_t = schedule.alpha_bar(grid[i])
    ab_prev = schedule.alpha_bar(grid[i + 1]) if i + 1 < len(grid) else 1.0
    c_z = math.sqrt(ab_prev / ab_t)
    c_e = math.sqrt(1.0 - ab_prev) - math.sqrt(ab_prev / ab_t) * math.sqrt(1.0 - ab_t)
    return add(mul_scalar(z, c_z), mul_scalar(eps_hat, c_e))


def protect(x: np.ndarray, mask: np.ndarray, cfg: AttackConfig, ckpt) -> AdversarialNoise:
    """Craft the protective perturbation with signed projected gradient steps.

    Deterministic per (seed, config, checkpoint). The budget invariant is
    asserted after every iteration; probe L_CA (a frozen held-out set of
    (t, eps) pairs) is logged at iteration 0, every 50th, and at the end.
    """
    cfg.validate([lid.resolution for lid in _layers(ckpt)])
    if not ckpt.trained:
        raise ValueError("protect requires a trained checkpoint")
    rng = np.random.default_rng(cfg.seed)
    probe_rng = np.random.default_rng((cfg.seed, 0x9E3779B9))
    probes = [(int(probe_rng.integers(1, ckpt.schedule.t_steps + 1)),
               probe_rng.normal(size=(LATENT_GRID, LATENT_GRID,
                                      LATENT_CHANNELS)).astype(np.float32))
              for _ in range(PROBE_SIZE)]
    e_base, decoy_mask = _frozen_embedding(cfg, ckpt)
    x = x.astype(np.float32)
    delta = np.zeros_like(x)
    probe_history = [(0, _probe_loss(x, mask, None, probes, e_base, decoy_mask, cfg, ckpt))]
    iteration_fn = _lca_iteration_grad if cfg.objective == "l_ca" else _noise_pred_iteration_grad
    history = []
    t_start = time.perf_counter()
    for it in range(cfg.iterations):
        grad, loss_val, _ = iteration_fn(x, mask, delta, rng, e_base, decoy_mask, cfg, ckpt)
        if not np.isfinite(loss_val):
            raise RuntimeError(f"non-finite attack loss at iteration {it}")
        history.append(loss_val)
        delta = project(delta - cfg.step_size * np.sign(grad), x, cfg.epsilon)
        _check_budget(delta, x, cfg.epsilon)
        if (it + 1) % PROBE_EVERY == 0 and it + 1 < cfg.iterations:
            probe_history.append((it + 1, _probe_loss(x, mask, Tensor(delta), probes,
                                                      e_base, decoy_mask, cfg, ckpt)))
    elapsed = time.perf_counter() - t_start
    probe_history.append((cfg.iterations, _probe_loss(x, mask, Tensor(delta), probes,
                                                      e_base, decoy_mask, cfg, ckpt)))
    return AdversarialNoise(delta=delta, loss_history=history,
                            probe_history=probe_history, config=cfg, seed=cfg.seed,
                            iteration_seconds=elapsed / cfg.iterations)


def _layers(ckpt):
    from .predictor import list_cross_attention_layers
    return list_cross_attention_layers(ckpt.weights)
