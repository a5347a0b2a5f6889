"""Optimizer, learning-rate schedule, augmentation and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .dataset import Sample
from .losses import LossConfig, total_loss
from .metrics import evaluate, MetricsReport
from .network import MobileSal, forward_full
from .ops import nearest_resize, resize_array
from .params import ParamStore, is_bn_param
from .tensor import Graph, GraphStateError, NumericError, Tensor, backward, no_grad

log = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 60
    batch: int = 10
    poly_power: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    scales: tuple[int, ...] = (256, 288, 320)
    lam: float = 0.3
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 10

    def __post_init__(self):
        for name in ("lr", "epochs", "batch", "poly_power", "adam_beta1", "adam_beta2", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.lam < 0:
            raise ValueError("weight_decay and lambda must be >= 0")
        if not self.scales or any(s % 32 or s <= 0 for s in self.scales):
            raise ValueError(f"training scales {self.scales} must be positive multiples of 32")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d


# desk-scale overfit preset: 8 synthetic 64x64 scenes, width 0.25
TOY_TRAIN = TrainConfig(lr=5e-3, epochs=300, batch=8, weight_decay=0.0, scales=(64,), lam=0.3,
                        seed=7, augment=False, checkpoint_every=100)
TOY_SAMPLES, TOY_SIZE, TOY_WIDTH = 8, 64, 0.25


def poly_lr(cur_epoch: int, config: TrainConfig = TrainConfig()) -> float:
    """``lr * (1 - cur_epoch / epochs) ** power``, evaluated once per epoch."""
    if not 0 <= cur_epoch < config.epochs:
        raise ValueError(f"epoch {cur_epoch} outside [0, {config.epochs})")
    return config.lr * (1.0 - cur_epoch / config.epochs) ** config.poly_power


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(store: ParamStore, state: AdamState, lr: float, config: TrainConfig = TrainConfig()) -> None:
    """One Adam update of every trainable tensor; gradients are cleared afterwards.

    Weight decay is decoupled (``θ -= lr*wd*θ`` before the moment update) and
    skipped for BN scale/shift.
    """
    named = store.named_parameters()
    missing = [n for n, t in named if t.grad is None]
    if missing:
        raise GraphStateError(f"no gradient for {missing[0]!r}; run backward before adam_step")
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, t in named:
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        if config.weight_decay and not is_bn_param(name):
            t.data -= (lr * config.weight_decay) * t.data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        t.data -= (lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)).astype(t.dtype, copy=False)
        t.grad = None


# ---------------------------------------------------------------------------
# data pipeline


def flip(sample: Sample) -> Sample:
    return Sample(sample.rgb[:, :, ::-1].copy(), sample.depth[:, :, ::-1].copy(),
                  sample.gt[:, :, ::-1].copy(), sample.id)


def crop_resize(sample: Sample, top: int, left: int, ch: int, cw: int) -> Sample:
    h, w = sample.size
    sl = (slice(None), slice(top, top + ch), slice(left, left + cw))
    rgb = resize_array(sample.rgb[sl], h, w)
    depth = resize_array(sample.depth[sl], h, w)
    gt = nearest_resize(sample.gt[sl], h, w)
    return Sample(rgb.astype(np.float32), depth.astype(np.float32), gt.astype(np.float32), sample.id)


def augment(sample: Sample, rng: np.random.Generator, force_flip: bool | None = None,
            crop_ratio: float | None = None) -> Sample:
    """Random horizontal flip (p=0.5) and one aspect-preserving crop of area
    ratio U[0.7, 1], resized back to the original size."""
    do_flip = rng.random() < 0.5 if force_flip is None else force_flip
    out = flip(sample) if do_flip else sample
    ratio = rng.uniform(0.7, 1.0) if crop_ratio is None else crop_ratio
    h, w = sample.size
    side = math.sqrt(ratio)
    ch, cw = max(1, int(round(h * side))), max(1, int(round(w * side)))
    if (ch, cw) == (h, w):
        return out
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return crop_resize(out, top, left, ch, cw)


def normalize_rgb(rgb: np.ndarray) -> np.ndarray:
    return ((rgb - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]).astype(np.float32)


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    lo, hi = float(depth.min()), float(depth.max())
    if hi - lo <= 0:
        return np.zeros_like(depth, dtype=np.float32)
    return ((depth - lo) / (hi - lo)).astype(np.float32)


def to_batch(samples: Sequence[Sample], size: tuple[int, int] | None = None):
    """Stack samples into ``(rgb, depth, gt)`` tensors, resizing to ``size`` if given."""
    rgbs, depths, gts = [], [], []
    for s in samples:
        rgb, depth, gt = s.rgb, s.depth, s.gt
        if size is not None and s.size != size:
            rgb = resize_array(rgb, *size)
            depth = resize_array(depth, *size)
            gt = nearest_resize(gt, *size)
        rgbs.append(normalize_rgb(rgb))
        depths.append(normalize_depth(depth))
        gts.append(gt.astype(np.float32))
    return (Tensor(np.stack(rgbs), dtype=np.float32), Tensor(np.stack(depths), dtype=np.float32),
            Tensor(np.stack(gts), dtype=np.float32))


def multi_scale_batch(samples: Sequence[Sample], rng: np.random.Generator, config: TrainConfig = TrainConfig()):
    """Draw one training scale per batch and resize every modality to it."""
    if not samples:
        raise ValueError("empty batch")
    scale = int(config.scales[int(rng.integers(len(config.scales)))])
    rgb, depth, gt = to_batch(samples, (scale, scale))
    return rgb, depth, gt, scale


def pad_to_multiple(arr: np.ndarray, multiple: int = 32) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflection-pad the last two axes up to a multiple; returns the original size too."""
    h, w = arr.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return arr, (h, w)
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(arr, pad, mode=mode), (h, w)


def predict(net: MobileSal, sample: Sample) -> np.ndarray:
    """Eval-mode P1 at the sample's own resolution (padded to /32, cropped back)."""
    rgb = normalize_rgb(sample.rgb)
    depth = normalize_depth(sample.depth)
    rgb_p, (h, w) = pad_to_multiple(rgb)
    depth_p, _ = pad_to_multiple(depth)
    with no_grad():
        out = forward_full(Tensor(rgb_p[None], dtype=np.float32), Tensor(depth_p[None], dtype=np.float32),
                           net, "eval")
    return out.p1.data[0, 0, :h, :w]


def evaluate_network(net: MobileSal, samples: Sequence[Sample], dataset: str = "train") -> MetricsReport:
    preds = [predict(net, s) for s in samples]
    return evaluate(preds, [s.gt[0] for s in samples], dataset)


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_sal: float
    loss_idr: float | None
    side_losses: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("side_losses")
        return json.dumps(d)


@dataclass
class TrainResult:
    history: list[EpochRecord]
    checkpoint: Path | None
    state: AdamState


def train_loop(dataset: Sequence[Sample], net: MobileSal, config: TrainConfig = TrainConfig(),
               out_dir: str | Path | None = None,
               on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Poly-scheduled Adam over ``epochs`` passes of forward -> total loss -> backward.

    With ``out_dir`` set, writes ``history.jsonl`` and checkpoints there.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    loss_cfg = LossConfig(lam=config.lam)
    store = net.store
    params = store.parameters()
    state = AdamState()
    history: list[EpochRecord] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        hist_path = out / "history.jsonl"
        hist_path.write_text("")
    ckpt = None
    batch_index = 0
    for epoch in range(config.epochs):
        lr = poly_lr(epoch, config)
        order = rng.permutation(len(dataset))
        tot, sal, idr, nb = 0.0, 0.0, 0.0, 0
        sides = np.zeros(5)
        for start in range(0, len(order), config.batch):
            picked = [dataset[i] for i in order[start:start + config.batch]]
            if config.augment:
                picked = [augment(s, rng) for s in picked]
            rgb, depth, gt, _ = multi_scale_batch(picked, rng, config)
            store.zero_grad()
            with Graph() as g:
                outs = forward_full(rgb, depth, net, "train")
                br = total_loss(outs.saliency, gt, outs.depth, depth, loss_cfg)
            value = br.total.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {batch_index}")
            backward(g, br.total, params)
            adam_step(store, state, lr, config)
            tot += value
            sal += br.loss_sal
            idr += br.idr or 0.0
            sides += br.saliency
            nb += 1
            batch_index += 1
        rec = EpochRecord(epoch, lr, tot / nb, sal / nb, idr / nb, (sides / nb).tolist())
        history.append(rec)
        log.info("epoch %d lr %.3g loss %.5f (sal %.5f idr %.5f)", epoch, lr, rec.loss_total,
                 rec.loss_sal, rec.loss_idr)
        if out is not None:
            with hist_path.open("a") as fh:
                fh.write(rec.to_json() + "\n")
            last = epoch + 1 == config.epochs
            if last or (config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0):
                name = "final.msal" if last else f"epoch_{epoch + 1:04d}.msal"
                ckpt = save_checkpoint(store, net.config, out / name,
                                       meta={"epoch": epoch + 1, "train": config.to_dict()})
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(history, ckpt, state)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
