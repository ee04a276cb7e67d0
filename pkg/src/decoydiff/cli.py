"""Command-line harness: train, protect, inpaint, attribute, evaluate,
sweep, render-delta. Every run writes its artifacts plus a manifest with
the full config, checkpoint hash, wall time, and peak memory."""

from __future__ import annotations

import argparse
import json
import resource
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset, metrics, text
from .attack import AttackConfig, AdversarialNoise, protect
from .checkpoint import Checkpoint
from .diffusion import (LatentCodec, NoiseSchedule, SamplerConfig, TrainConfig,
                        downsample_mask, sample_inpaint, train)
from .formats import read_mask, read_ppm, read_tnsr, write_pgm, write_ppm, write_tnsr
from .predictor import STAGE_RESOLUTIONS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "train": {
        "seed": 0, "steps": 12000, "lr": 2e-3, "t_steps": 100,
        "dataset_seed": 1000, "n_train": 512, "codec_seed": 7,
        "export_corpus": False,
    },
    "protect": {
        "checkpoint": "", "image": "", "mask": "",
        "epsilon": 12.0 / 255.0, "step_size": 2.0 / 255.0, "iterations": 400,
        "grad_samples": 1, "layer_selection": [16, 4], "decoy_target": "BOS",
        "base_prompt": "QUALITY_TAG", "region_selector": "INPAINT",
        "stop_grad_target": False, "bias_c": 1e4, "seed": 0,
        "objective": "l_ca", "noise_pred_steps": 4,
    },
    "inpaint": {
        "checkpoint": "", "image": "", "mask": "", "prompt": "",
        "cfg_scale": 7.5, "inference_steps": 25, "strength": 1.0, "seed": 0,
        "trace": True, "attrib_layers": list(sorted(set(STAGE_RESOLUTIONS))),
    },
    "attribute": {
        "checkpoint": "", "image": "", "mask": "", "prompt": "",
        "cfg_scale": 7.5, "inference_steps": 25, "strength": 1.0, "seed": 0,
        "attrib_layers": list(sorted(set(STAGE_RESOLUTIONS))),
    },
    "evaluate": {"run_oracle": "", "run_protected": ""},
    "sweep": {
        "checkpoint": "", "axis": "cfg_scale", "values": [5.0, 7.5, 10.0, 12.5, 15.0],
        "dataset_seed": 2000, "n_images": 8, "seeds": [0],
        "protect": {}, "inpaint": {},
    },
    "render-delta": {"protected": "", "original": ""},
}

SWEEP_AXES = {
    "cfg_scale": "sampler", "inference_steps": "sampler", "strength": "sampler",
    "mask_morph": "sampler", "robustness": "sampler",
    "epsilon": "attack", "layer_selection": "attack",
}


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(command: str, config_path: str | None, overrides) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))  # deep copy
    if config_path:
        try:
            user = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {config_path}: {e}")
        for k, v in user.items():
            _set_path(cfg, k, v)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(cfg, key, _parse_value(raw))
    return cfg


def _set_path(cfg: dict, key: str, value):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


class RunDir:
    def __init__(self, out_root: str, command: str, seed, run_name: str | None):
        stamp = run_name or f"{time.strftime('%Y%m%d-%H%M%S')}_{command}_s{seed}"
        self.path = Path(out_root) / stamp
        self.path.mkdir(parents=True, exist_ok=True)
        self.outputs = []
        self.counts = {}
        self.t0 = time.perf_counter()

    def record(self, name) -> Path:
        p = self.path / name
        self.outputs.append(str(p))
        return p

    def bump(self, key: str):
        self.counts[key] = self.counts.get(key, 0) + 1

    def finish(self, command: str, config: dict, checkpoint_hash: str = "",
               extra: dict | None = None):
        manifest = {
            "command": command,
            "config": config,
            "checkpoint_hash": checkpoint_hash,
            "outputs": sorted(self.outputs),
            "call_counts": self.counts,
            "wall_time_s": round(time.perf_counter() - self.t0, 6),
            "peak_rss_mb": round(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0, 3),
        }
        if extra:
            manifest.update(extra)
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return manifest


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _load_ckpt(cfg) -> Checkpoint:
    if not cfg.get("checkpoint"):
        raise ConfigError("config key 'checkpoint' is required")
    try:
        return Checkpoint.load(cfg["checkpoint"])
    except FileNotFoundError as e:
        raise ConfigError(str(e))


def _load_image_mask(cfg):
    if not cfg.get("image") or not cfg.get("mask"):
        raise ConfigError("config keys 'image' and 'mask' are required")
    return read_ppm(cfg["image"]), read_mask(cfg["mask"])


# -- commands ---------------------------------------------------------------

def cmd_train(cfg, run: RunDir):
    schedule = NoiseSchedule(cfg["t_steps"])
    codec = LatentCodec(cfg["codec_seed"])
    examples = dataset.generate(cfg["dataset_seed"], cfg["n_train"])
    if cfg["export_corpus"]:
        dataset.export_corpus(examples, run.record("corpus"))
    tc = TrainConfig(steps=cfg["steps"], lr=cfg["lr"], seed=cfg["seed"])
    t0 = time.perf_counter()
    weights, curve = train(examples, tc, schedule, codec)
    train_seconds = time.perf_counter() - t0
    ckpt = Checkpoint(weights, schedule, codec, meta={
        "trained": cfg["steps"] > 0,
        "seed": cfg["seed"],
        "config": cfg,
        "train_seconds": round(train_seconds, 3),
        "final_ema": curve[-1][2] if curve else None,
        "steps": cfg["steps"],
    })
    ckpt_dir = run.record("checkpoint")
    ckpt.save(ckpt_dir)
    write_csv(run.record("loss_curve.csv"), ["step", "loss", "ema"], curve)
    return run.finish("train", cfg, ckpt.content_hash(),
                      extra={"corpus_seed_range": [cfg["dataset_seed"], cfg["dataset_seed"]]})


def _attack_config(cfg) -> AttackConfig:
    return AttackConfig(
        epsilon=cfg["epsilon"], step_size=cfg["step_size"], iterations=cfg["iterations"],
        grad_samples=cfg["grad_samples"], layer_selection=tuple(cfg["layer_selection"]),
        decoy_target=cfg["decoy_target"], base_prompt=cfg["base_prompt"],
        region_selector=cfg["region_selector"], stop_grad_target=cfg["stop_grad_target"],
        bias_c=cfg["bias_c"], seed=cfg["seed"], objective=cfg["objective"],
        noise_pred_steps=cfg["noise_pred_steps"])


def cmd_protect(cfg, run: RunDir):
    ckpt = _load_ckpt(cfg)
    x, mask = _load_image_mask(cfg)
    acfg = _attack_config(cfg)
    try:
        acfg.validate(STAGE_RESOLUTIONS)
    except ValueError as e:
        raise ConfigError(str(e))
    noise = protect(x, mask, acfg, ckpt)
    run.bump("protect_calls")
    write_ppm(run.record("protected.ppm"), np.clip(x + noise.delta, 0, 1))
    write_tnsr(run.record("delta.tnsr"), noise.delta)
    write_csv(run.record("loss_history.csv"), ["iteration", "loss"],
              list(enumerate(noise.loss_history)))
    write_csv(run.record("probe_history.csv"), ["iteration", "probe_l_ca"],
              noise.probe_history)
    run.record("config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    return run.finish("protect", cfg, ckpt.content_hash(), extra={
        "probe_initial": noise.probe_history[0][1],
        "probe_final": noise.probe_history[-1][1],
        "seconds_per_iteration": round(noise.iteration_seconds, 6),
    })


def _run_inpaint(cfg, ckpt, x, mask):
    scfg = SamplerConfig(inference_steps=cfg["inference_steps"],
                         cfg_scale=cfg["cfg_scale"], strength=cfg["strength"],
                         seed=cfg["seed"])
    return sample_inpaint(x, mask, cfg["prompt"], scfg, ckpt, trace=cfg.get("trace", True))


def _write_attribution(run, attr, m_prime, prefix=""):
    n = attr.heat.shape[0]
    rows = []
    for tok in range(n):
        hm = attr.heat[tok]
        write_pgm(run.record(f"{prefix}heat_token{tok}.pgm"),
                  np.rint(hm / max(hm.max(), 1e-9) * 255).astype(np.int64))
        for r in range(8):
            for c in range(8):
                rows.append((tok, r, c, float(hm[r, c])))
    write_csv(run.record(f"{prefix}attribution.csv"), ["token", "row", "col", "mass"], rows)
    masses = [(cls, metrics.attention_mass(attr, m_prime, cls))
              for cls in (metrics.CONTENT, metrics.BOS, metrics.EOS)]
    write_csv(run.record(f"{prefix}masses.csv"), ["token_class", "mass_inpaint"], masses)
    return dict(masses)


def cmd_inpaint(cfg, run: RunDir):
    ckpt = _load_ckpt(cfg)
    x, mask = _load_image_mask(cfg)
    try:
        out, traces = _run_inpaint(cfg, ckpt, x, mask)
    except ValueError as e:
        raise ConfigError(str(e))
    run.bump("inpaint_calls")
    write_ppm(run.record("output.ppm"), out)
    extra = {}
    if traces:
        attr = metrics.attribute(traces, cfg["attrib_layers"])
        extra["masses"] = _write_attribution(run, attr, downsample_mask(mask))
    return run.finish("inpaint", cfg, ckpt.content_hash(), extra=extra)


def cmd_attribute(cfg, run: RunDir):
    cfg = dict(cfg)
    cfg["trace"] = True
    ckpt = _load_ckpt(cfg)
    x, mask = _load_image_mask(cfg)
    try:
        out, traces = _run_inpaint(cfg, ckpt, x, mask)
    except ValueError as e:
        raise ConfigError(str(e))
    write_ppm(run.record("output.ppm"), out)
    attr = metrics.attribute(traces, cfg["attrib_layers"])
    masses = _write_attribution(run, attr, downsample_mask(mask))
    return run.finish("attribute", cfg, ckpt.content_hash(), extra={"masses": masses})


def _read_masses(run_dir) -> dict:
    path = Path(run_dir) / "masses.csv"
    if not path.exists():
        raise ConfigError(f"missing masses.csv under {run_dir} (run inpaint with trace)")
    rows = path.read_text().strip().split("\n")[1:]
    return {r.split(",")[0]: float(r.split(",")[1]) for r in rows}


def cmd_evaluate(cfg, run: RunDir):
    for key in ("run_oracle", "run_protected"):
        if not cfg.get(key):
            raise ConfigError(f"config key '{key}' is required")
    img_o = read_ppm(Path(cfg["run_oracle"]) / "output.ppm")
    img_p = read_ppm(Path(cfg["run_protected"]) / "output.ppm")
    m_o = _read_masses(cfg["run_oracle"])
    m_p = _read_masses(cfg["run_protected"])
    report = metrics.MetricsReport(
        content_mass_inpaint=m_p[metrics.CONTENT],
        bos_mass_inpaint=m_p[metrics.BOS],
        eos_mass_inpaint=m_p[metrics.EOS],
        psnr_vs_oracle=metrics.psnr(img_p, img_o),
        mse_vs_oracle=metrics.mse_images(img_p, img_o),
        config=cfg)
    write_csv(run.record("metrics.csv"),
              ["content_mass", "bos_mass", "eos_mass", "psnr", "mse",
               "content_delta", "bos_delta", "eos_delta"],
              [(report.content_mass_inpaint, report.bos_mass_inpaint,
                report.eos_mass_inpaint, report.psnr_vs_oracle, report.mse_vs_oracle,
                m_p[metrics.CONTENT] - m_o[metrics.CONTENT],
                m_p[metrics.BOS] - m_o[metrics.BOS],
                m_p[metrics.EOS] - m_o[metrics.EOS])])
    return run.finish("evaluate", cfg)


def _content_mass_of(traces, layers, m_prime) -> float:
    attr = metrics.attribute(traces, layers)
    return metrics.attention_mass(attr, m_prime, metrics.CONTENT)


def cmd_sweep(cfg, run: RunDir):
    axis = cfg["axis"]
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    values = cfg["values"]
    _validate_axis_values(axis, values)
    ckpt = _load_ckpt(cfg)
    examples = dataset.generate(cfg["dataset_seed"], cfg["n_images"])
    pdefaults = {**DEFAULTS["protect"], **cfg.get("protect", {})}
    idefaults = {**DEFAULTS["inpaint"], **cfg.get("inpaint", {})}
    attrib_layers = idefaults["attrib_layers"]
    rows = []
    kind = SWEEP_AXES[axis]
    protections = {}

    def protected_delta(ex, pconf):
        key = (ex.index, json.dumps(pconf, sort_keys=True))
        if key not in protections:
            acfg = _attack_config(pconf)
            protections[key] = protect(ex.image, ex.mask, acfg, ckpt).delta
            run.bump("protect_calls")
        return protections[key]

    for value in values:
        for ex in examples:
            pconf = dict(pdefaults)
            iconf = dict(idefaults)
            iconf["prompt"] = ex.prompt_mask
            inf_mask = ex.mask
            post = None
            if axis == "epsilon":
                pconf["epsilon"] = value
                pconf["step_size"] = min(pconf["step_size"], value) if value > 0 else pconf["step_size"]
            elif axis == "layer_selection":
                pconf["layer_selection"] = list(value)
            elif axis == "mask_morph":
                mode = metrics.DILATE if value == "shrink" else metrics.ERODE
                inf_mask = metrics.morph(ex.mask, mode, kernel=5, iterations=2)
            elif axis == "robustness":
                post = value
            else:
                iconf[axis] = value
            delta = protected_delta(ex, pconf)
            x_prot = np.clip(ex.image + delta, 0, 1).astype(np.float32)
            if post == "quantize":
                x_prot = metrics.robustness_transform(x_prot, metrics.QUANTIZE, levels=32)
            elif post == "boxblur":
                x_prot = metrics.robustness_transform(x_prot, metrics.BOXBLUR, radius=1)
            elif post is not None:
                raise ConfigError(f"unknown robustness value {post!r}")
            if inf_mask is not ex.mask and not (downsample_mask(inf_mask) < 0.5).any():
                continue  # degenerate morphed mask: no latent inpaint region
            for seed in cfg["seeds"]:
                scfg = SamplerConfig(inference_steps=iconf["inference_steps"],
                                     cfg_scale=iconf["cfg_scale"],
                                     strength=iconf["strength"], seed=seed)
                t0 = time.perf_counter()
                out_o, tr_o = sample_inpaint(ex.image, inf_mask, iconf["prompt"], scfg,
                                             ckpt, trace=True)
                out_p, tr_p = sample_inpaint(x_prot, inf_mask, iconf["prompt"], scfg,
                                             ckpt, trace=True)
                run.bump("inpaint_calls")
                runtime = time.perf_counter() - t0
                mp = downsample_mask(inf_mask)
                rows.append((str(value), ex.index, seed,
                             _content_mass_of(tr_o, attrib_layers, mp),
                             _content_mass_of(tr_p, attrib_layers, mp),
                             metrics.psnr(out_p, out_o), runtime))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    write_csv(run.record("sweep.csv"),
              ["value", "image", "seed", "content_mass_oracle", "content_mass_protected",
               "psnr", "runtime_s"], rows)
    return run.finish("sweep", cfg, ckpt.content_hash(),
                      extra={"corpus_seed_range": [cfg["dataset_seed"], cfg["dataset_seed"]]})


def _validate_axis_values(axis, values):
    if not isinstance(values, list) or not values:
        raise ConfigError("sweep values must be a non-empty list")
    if axis == "mask_morph":
        bad = [v for v in values if v not in ("shrink", "expand")]
    elif axis == "robustness":
        bad = [v for v in values if v not in ("quantize", "boxblur")]
    elif axis == "layer_selection":
        bad = [v for v in values if not isinstance(v, list)
               or set(v) - set(STAGE_RESOLUTIONS)]
    elif axis == "epsilon":
        bad = [v for v in values if not isinstance(v, (int, float)) or v < 0]
    elif axis == "inference_steps":
        bad = [v for v in values if not isinstance(v, int) or v < 1]
    elif axis == "strength":
        bad = [v for v in values if not isinstance(v, (int, float)) or not 0 < v <= 1]
    else:
        bad = [v for v in values if not isinstance(v, (int, float)) or v < 0]
    if bad:
        raise ConfigError(f"invalid values for axis {axis}: {bad}")


def cmd_render_delta(cfg, run: RunDir):
    for key in ("protected", "original"):
        if not cfg.get(key):
            raise ConfigError(f"config key '{key}' is required")
    a = read_ppm(cfg["protected"])
    b = read_ppm(cfg["original"])
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    delta = a - b
    peak = float(np.max(np.abs(delta)))
    scale = 0.5 / peak if peak > 0 else 0.0
    write_ppm(run.record("delta_amplified.ppm"), 0.5 + delta * scale)
    write_tnsr(run.record("delta.tnsr"), delta)
    print(f"max_abs_delta={peak:.7f}")
    return run.finish("render-delta", cfg, extra={"max_abs_delta": peak})


COMMANDS = {
    "train": cmd_train,
    "protect": cmd_protect,
    "inpaint": cmd_inpaint,
    "attribute": cmd_attribute,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "render-delta": cmd_render_delta,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="decoydiff",
                                     description="inpainting sandbox and protection engine")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dot paths allowed)")
    parser.add_argument("--out", default="runs", help="output root directory")
    parser.add_argument("--run-name", default=None, help="fixed run directory name")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.command, args.config, args.set)
        run = RunDir(args.out, args.command, cfg.get("seed", 0), args.run_name)
        COMMANDS[args.command](cfg, run)
        return EXIT_OK
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - single-line runtime diagnostics
        print(f"error: runtime: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
