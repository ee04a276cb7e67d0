"""Procedural captioned inpainting corpus: colored shapes on colored grounds.

Each example is a 16x16 image with one shape, a keep-mask whose zero
region is exactly the shape's bounding box, and two captions (full scene
and masked region). Generation is deterministic per seed; train/test
splits deduplicate byte-equal examples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import write_pgm, write_ppm
from .text import COLOR_WORDS, SHAPE_WORDS

GRID = 16
MIN_SIZE = 4
MAX_SIZE = 10

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}


@dataclass
class ShapeScene:
    background: str
    kind: str
    color: str
    row: int
    col: int
    height: int
    width: int


@dataclass
class CaptionedExample:
    image: np.ndarray       # (16, 16, 3) float32 in [0, 1]
    mask: np.ndarray        # (16, 16) float32, 1=keep, 0=inpaint (the bbox)
    prompt_full: str
    prompt_mask: str
    scene: ShapeScene
    seed: int
    index: int


def _shape_pixels(kind: str, h: int, w: int) -> np.ndarray:
    """Binary (h, w) footprint of the shape inside its bounding box."""
    hit = np.zeros((h, w), dtype=bool)
    if kind == "square":
        hit[:] = True
    elif kind == "circle":
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        r = min(h, w) / 2.0
        yy, xx = np.mgrid[0:h, 0:w]
        hit = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif kind == "triangle":
        cx = (w - 1) / 2.0
        for k in range(h):
            half = (k / max(h - 1, 1)) * (w / 2.0)
            for j in range(w):
                if abs(j - cx) <= half:
                    hit[k, j] = True
    elif kind == "cross":
        bar = max(1, round(min(h, w) / 3))
        r0 = (h - bar) // 2
        c0 = (w - bar) // 2
        hit[r0:r0 + bar, :] = True
        hit[:, c0:c0 + bar] = True
    else:
        raise ValueError(f"unknown shape kind: {kind!r}")
    return hit


def render(scene: ShapeScene) -> np.ndarray:
    if scene.row < 0 or scene.col < 0 or scene.row + scene.height > GRID \
            or scene.col + scene.width > GRID:
        raise ValueError(f"shape box out of bounds: {scene}")
    img = np.empty((GRID, GRID, 3), dtype=np.float32)
    img[:] = COLOR_RGB[scene.background]
    hit = _shape_pixels(scene.kind, scene.height, scene.width)
    box = img[scene.row:scene.row + scene.height, scene.col:scene.col + scene.width]
    box[hit] = COLOR_RGB[scene.color]
    return img


def scene_mask(scene: ShapeScene) -> np.ndarray:
    mask = np.ones((GRID, GRID), dtype=np.float32)
    mask[scene.row:scene.row + scene.height, scene.col:scene.col + scene.width] = 0.0
    return mask


def generate(seed: int, n: int) -> list:
    """Deterministically generate n captioned examples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        kind = SHAPE_WORDS[rng.integers(len(SHAPE_WORDS))]
        bg = COLOR_WORDS[rng.integers(len(COLOR_WORDS))]
        others = [c for c in COLOR_WORDS if c != bg]
        color = others[rng.integers(len(others))]
        h = int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
        w = h if kind == "circle" else int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
        row = int(rng.integers(0, GRID - h + 1))
        col = int(rng.integers(0, GRID - w + 1))
        scene = ShapeScene(background=bg, kind=kind, color=color,
                           row=row, col=col, height=h, width=w)
        out.append(CaptionedExample(
            image=render(scene), mask=scene_mask(scene),
            prompt_full=f"a {color} {kind} on {bg} background",
            prompt_mask=f"a {color} {kind}",
            scene=scene, seed=seed, index=i))
    return out


def _example_key(ex: CaptionedExample) -> bytes:
    return ex.image.tobytes() + ex.mask.tobytes()


def make_splits(train_seed: int, n_train: int, test_seed: int, n_test: int):
    """Disjoint train/test pools: test drops any example byte-equal to train."""
    train = generate(train_seed, n_train)
    seen = {_example_key(ex) for ex in train}
    test, i = [], 0
    pool = generate(test_seed, n_test * 2 + 16)
    while len(test) < n_test and i < len(pool):
        if _example_key(pool[i]) not in seen:
            test.append(pool[i])
        i += 1
    if len(test) < n_test:
        raise RuntimeError("could not build a disjoint test split")
    return train, test


def export_corpus(examples, out_dir) -> Path:
    """Write PPM/PGM pairs plus a JSON index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for ex in examples:
        stem = f"ex_{ex.seed}_{ex.index:04d}"
        write_ppm(out_dir / f"{stem}.ppm", ex.image)
        write_pgm(out_dir / f"{stem}.pgm", ex.mask)
        index.append({"file": stem, "prompt_full": ex.prompt_full,
                      "prompt_mask": ex.prompt_mask, "seed": ex.seed,
                      "index": ex.index})
    (out_dir / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return out_dir
