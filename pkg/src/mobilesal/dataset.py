"""Samples, image loading/saving and dataset directory scanning."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import read_pixels, write_pixels
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)

RGB_DIR, DEPTH_DIR, GT_DIR = "RGB", "depth", "GT"
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


@dataclass
class Sample:
    rgb: np.ndarray     # (3, h, w) in [0, 1]
    depth: np.ndarray   # (1, h, w) in [0, 1]
    gt: np.ndarray      # (1, h, w) in {0, 1}
    id: str = ""

    def __post_init__(self):
        hw = self.rgb.shape[1:]
        if self.depth.shape[1:] != hw or self.gt.shape[1:] != hw:
            raise DimensionError(f"sample {self.id!r}: modalities disagree on size", axis="h")

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]


def pixels_to_unit(px: np.ndarray, maxval: int, kind: str) -> np.ndarray:
    x = px.astype(np.float64) / maxval
    if x.shape[2] in (2, 4):     # drop alpha
        x = x[:, :, :-1]
    if kind == "rgb":
        if x.shape[2] == 1:
            x = np.repeat(x, 3, axis=2)
    elif kind == "gray":
        if x.shape[2] == 3:
            x = x @ np.array([0.299, 0.587, 0.114])
            x = x[:, :, None]
    else:
        raise ValueError(f"unknown image kind {kind!r}")
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def load_image(path: str | os.PathLike, kind: str = "rgb") -> Tensor:
    """Decode a PNG/PGM/PPM file to a ``(1, c, h, w)`` tensor scaled to [0, 1]."""
    px, maxval = read_pixels(path)
    return Tensor(pixels_to_unit(px, maxval, kind)[None], dtype=np.float32)


def quantize(p: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 8-bit with round-half-up."""
    return np.clip(np.floor(np.asarray(p, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_saliency(p, path: str | os.PathLike) -> None:
    arr = p.data if isinstance(p, Tensor) else np.asarray(p)
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DimensionError(f"save_saliency needs a single-channel map, got {arr.shape}", axis="channel")
    write_pixels(path, quantize(arr))


def load_mask(path: str | os.PathLike) -> np.ndarray:
    g = load_image(path, "gray").data[0]
    return (g >= 0.5).astype(np.float32)


def load_sample(root: Path, sid: str, files: dict[str, Path] | None = None) -> Sample:
    files = files or _resolve(root, sid)
    rgb = load_image(files[RGB_DIR], "rgb").data[0]
    depth = load_image(files[DEPTH_DIR], "gray").data[0]
    gt = load_mask(files[GT_DIR])
    return Sample(rgb, depth, gt, sid)


def _resolve(root: Path, sid: str) -> dict[str, Path]:
    out = {}
    for sub in (RGB_DIR, DEPTH_DIR, GT_DIR):
        for suf in IMAGE_SUFFIXES:
            cand = Path(root) / sub / f"{sid}{suf}"
            if cand.is_file():
                out[sub] = cand
                break
        else:
            raise FileNotFoundError(f"sample {sid!r} has no file in {sub}/")
    return out


@dataclass
class DatasetManifest:
    root: Path
    ids: list[str]
    subdirs: tuple[str, str, str] = (RGB_DIR, DEPTH_DIR, GT_DIR)
    split: str = "train"
    files: dict[str, dict[str, Path]] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.ids)

    def load(self, sid: str) -> Sample:
        return load_sample(self.root, sid, self.files.get(sid))

    def load_all(self) -> list[Sample]:
        return [self.load(sid) for sid in self.ids]


class DatasetError(ValueError):
    pass


def _stems(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    found: dict[str, Path] = {}
    for entry in sorted(directory.iterdir()):
        if entry.is_file() and entry.suffix.lower() in IMAGE_SUFFIXES and not entry.name.startswith("."):
            found.setdefault(entry.stem, entry)
    return found


def scan_dataset(root: str | os.PathLike, split: str = "train") -> DatasetManifest:
    """Ids present in all of ``RGB/``, ``depth/`` and ``GT/``, sorted lexicographically."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    per_dir = {sub: _stems(root / sub) for sub in (RGB_DIR, DEPTH_DIR, GT_DIR)}
    common = sorted(set.intersection(*(set(d) for d in per_dir.values())))
    counts = ", ".join(f"{sub}={len(d)}" for sub, d in per_dir.items())
    if not common:
        raise DatasetError(f"no sample ids shared by all subdirectories of {root} ({counts})")
    if any(len(d) != len(common) for d in per_dir.values()):
        log.warning("dataset %s: using %d shared ids (%s)", root, len(common), counts)
    files = {sid: {sub: per_dir[sub][sid] for sub in per_dir} for sid in common}
    return DatasetManifest(root, common, split=split, files=files)


def write_sample(root: str | os.PathLike, sample: Sample) -> list[Path]:
    """Store a sample in the standard layout (8-bit RGB/GT PNG, 16-bit depth PNG)."""
    root = Path(root)
    paths = []
    rgb = quantize(sample.rgb.transpose(1, 2, 0))
    depth = np.clip(np.floor(sample.depth[0] * 65535.0 + 0.5), 0, 65535).astype(np.uint16)
    gt = (sample.gt[0] > 0.5).astype(np.uint8) * 255
    for sub, px in ((RGB_DIR, rgb), (DEPTH_DIR, depth), (GT_DIR, gt)):
        (root / sub).mkdir(parents=True, exist_ok=True)
        path = root / sub / f"{sample.id}.png"
        write_pixels(path, px)
        paths.append(path)
    return paths
