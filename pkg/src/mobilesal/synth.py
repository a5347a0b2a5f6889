"""Synthetic RGB-D saliency scenes for desk-scale training and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Sample

SUPERSAMPLE = 4
DEPTH_NOISE = 0.01


def _coverage(shape_kind: str, cy: float, cx: float, ry: float, rx: float, size: int) -> np.ndarray:
    """Fraction of each pixel covered by the shape (``SUPERSAMPLE``² samples per pixel)."""
    s = SUPERSAMPLE
    coords = (np.arange(size * s) + 0.5) / s
    yy, xx = coords[:, None], coords[None, :]
    if shape_kind == "ellipse":
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:
        inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def _background(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = rng.uniform(0.25, 0.55, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=(3, 2))
    freq = rng.uniform(4, 10, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = 0.06 * np.sin(2 * np.pi * freq[0] * xx + phase[0]) * np.sin(2 * np.pi * freq[1] * yy + phase[1])
    rgb = np.stack([base[c] + tilt[c, 0] * yy + tilt[c, 1] * xx + texture for c in range(3)])
    rgb += rng.normal(0, 0.02, size=rgb.shape)
    d0, dy, dx = rng.uniform(0.1, 0.25), rng.uniform(0.0, 0.15), rng.uniform(-0.05, 0.05)
    depth = d0 + dy * yy + dx * (xx - 0.5)
    return rgb, depth


@dataclass
class SceneObject:
    kind: str
    depth: float
    mask: np.ndarray    # visible solid pixels (later objects occlude earlier ones)


def synth_scene(rng: np.random.Generator, size: int, sid: str = "") -> tuple[Sample, list[SceneObject]]:
    """One scene plus the layout of its salient objects."""
    rgb, depth = _background(rng, size)
    gt = np.zeros((size, size), dtype=bool)
    objects: list[SceneObject] = []
    for _ in range(int(rng.integers(1, 4))):
        kind = "ellipse" if rng.random() < 0.5 else "rect"
        ry, rx = rng.uniform(0.12, 0.28, size=2) * size
        cy = rng.uniform(ry, size - ry)
        cx = rng.uniform(rx, size - rx)
        cov = _coverage(kind, cy, cx, ry, rx, size)
        color = rng.uniform(0.0, 1.0, size=3)
        color[int(rng.integers(3))] = rng.choice([0.05, 0.95])   # keep it saturated
        rgb = rgb * (1 - cov) + color[:, None, None] * cov
        solid = cov >= 0.5
        d = float(rng.uniform(0.6, 0.95))
        depth = np.where(solid, d, depth)
        gt |= solid
        for o in objects:
            o.mask &= ~solid
        objects.append(SceneObject(kind, d, solid.copy()))
    depth = depth + rng.uniform(-DEPTH_NOISE, DEPTH_NOISE, size=depth.shape)
    sample = Sample(np.clip(rgb, 0, 1).astype(np.float32),
                    np.clip(depth, 0, 1)[None].astype(np.float32),
                    gt[None].astype(np.float32), sid)
    return sample, objects


def synth_sample(rng: np.random.Generator, size: int, sid: str = "") -> Sample:
    return synth_scene(rng, size, sid)[0]


def synth_dataset(n: int, size: int, rng: np.random.Generator | int = 0) -> list[Sample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 32 or size % 32:
        raise ValueError(f"size {size} must be a positive multiple of 32")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return [synth_sample(rng, size, f"synth_{k:04d}") for k in range(n)]
