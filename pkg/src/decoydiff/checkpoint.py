"""Checkpoint directory: JSON manifest plus one TNSR file per tensor."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import text
from .diffusion import LatentCodec, NoiseSchedule
from .formats import read_tnsr, write_tnsr
from .tensor import Tensor

MANIFEST_NAME = "manifest.json"


class Checkpoint:
    def __init__(self, weights: dict, schedule: NoiseSchedule, codec: LatentCodec,
                 vocab=None, meta: dict | None = None):
        self.weights = weights
        self.schedule = schedule
        self.codec = codec
        self.vocab = list(vocab) if vocab is not None else list(text.VOCAB)
        self.meta = dict(meta or {})

    @property
    def trained(self) -> bool:
        return bool(self.meta.get("trained", False))

    def save(self, path) -> None:
        path = Path(path)
        (path / "tensors").mkdir(parents=True, exist_ok=True)
        manifest = {
            "version": 1,
            "vocabulary": self.vocab,
            "schedule": {
                "t_steps": self.schedule.t_steps,
                "beta_start": self.schedule.beta_start,
                "beta_end": self.schedule.beta_end,
                "ref_steps": self.schedule.ref_steps,
            },
            "codec_seed": self.codec.seed,
            "meta": self.meta,
            "tensors": {k: list(v.shape) for k, v in sorted(self.weights.items())},
        }
        (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
        for name, tensor in self.weights.items():
            write_tnsr(path / "tensors" / f"{name}.tnsr", tensor.data)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        manifest_path = path / MANIFEST_NAME
        if not manifest_path.exists():
            raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        sched = manifest["schedule"]
        # betas were stored post-scaling; reconstruct via the raw endpoints
        schedule = NoiseSchedule.__new__(NoiseSchedule)
        import numpy as np
        schedule.t_steps = sched["t_steps"]
        schedule.betas = np.linspace(sched["beta_start"], sched["beta_end"],
                                     sched["t_steps"], dtype=np.float64).astype(np.float32)
        schedule.alphas = 1.0 - schedule.betas
        schedule.alpha_bars = np.cumprod(schedule.alphas).astype(np.float32)
        weights = {}
        for name, shape in manifest["tensors"].items():
            arr = read_tnsr(path / "tensors" / f"{name}.tnsr")
            if list(arr.shape) != shape:
                raise ValueError(f"tensor {name}: manifest shape {shape} != file {list(arr.shape)}")
            weights[name] = Tensor(arr, requires_grad=True)
        return cls(weights=weights, schedule=schedule,
                   codec=LatentCodec(manifest["codec_seed"]),
                   vocab=manifest["vocabulary"], meta=manifest.get("meta", {}))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        manifest_like = {
            "schedule": [self.schedule.t_steps, float(self.schedule.betas[0]),
                         float(self.schedule.betas[-1])],
            "codec_seed": self.codec.seed,
            "vocabulary": self.vocab,
        }
        h.update(json.dumps(manifest_like, sort_keys=True).encode())
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(self.weights[name].data.tobytes())
        return h.hexdigest()
