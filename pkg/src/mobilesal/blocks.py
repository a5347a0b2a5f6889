"""Reusable blocks: inverted residual, channel attention, cross-modality fusion,
compact pyramid refinement and the depth-restoration head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .ops import ConvSpec
from .params import (BNParams, ConvParams, FCParams, ParamStore, make_bn, make_conv, make_fc)
from .tensor import AXES, DimensionError, Tensor


def conv_bn(x: Tensor, conv: ConvParams, bn: BNParams, mode: str, act: bool = True) -> Tensor:
    y = bn(conv(x), mode)
    return ops.relu(y) if act else y


# ---------------------------------------------------------------------------
# inverted residual block


@dataclass
class IrbParams:
    in_channels: int
    out_channels: int
    expansion: int
    stride: int
    expand: ConvParams | None
    expand_bn: BNParams | None
    depthwise: ConvParams
    depthwise_bn: BNParams
    squeeze: ConvParams
    squeeze_bn: BNParams

    @property
    def hidden(self) -> int:
        return self.expansion * self.in_channels

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


def make_irb(store: ParamStore, name: str, c_in: int, c_out: int, expansion: int, stride: int,
             rng: np.random.Generator) -> IrbParams:
    hidden = expansion * c_in
    expand = expand_bn = None
    # expansion 1 has no expand conv (the first MobileNetV2 bottleneck)
    if expansion != 1:
        expand = make_conv(store, f"{name}.expand", ConvSpec(c_in, hidden, 1), rng)
        expand_bn = make_bn(store, f"{name}.expand_bn", hidden)
    dw = make_conv(store, f"{name}.dw", ConvSpec(hidden, hidden, 3, stride, groups=hidden), rng)
    dw_bn = make_bn(store, f"{name}.dw_bn", hidden)
    sq = make_conv(store, f"{name}.squeeze", ConvSpec(hidden, c_out, 1), rng)
    sq_bn = make_bn(store, f"{name}.squeeze_bn", c_out)
    return IrbParams(c_in, c_out, expansion, stride, expand, expand_bn, dw, dw_bn, sq, sq_bn)


def irb_forward(x: Tensor, p: IrbParams, mode: str = "train") -> Tensor:
    if x.shape[1] != p.in_channels:
        raise DimensionError(f"IRB expects {p.in_channels} channels, got {x.shape[1]}", axis="channel")
    h = x
    if p.expand is not None:
        h = conv_bn(h, p.expand, p.expand_bn, mode)
    h = conv_bn(h, p.depthwise, p.depthwise_bn, mode)
    h = conv_bn(h, p.squeeze, p.squeeze_bn, mode, act=False)
    if p.residual:
        h = ops.elementwise_binary(h, x, "add")
    return h


# ---------------------------------------------------------------------------
# channel attention


@dataclass
class AttentionParams:
    fc1: FCParams
    fc2: FCParams


def make_attention(store: ParamStore, name: str, channels: int, rng: np.random.Generator) -> AttentionParams:
    return AttentionParams(make_fc(store, f"{name}.fc1", channels, channels, rng),
                           make_fc(store, f"{name}.fc2", channels, channels, rng))


def channel_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Per-channel gate in (0, 1): ``sigmoid(FC2(relu(FC1(GAP(x)))))``, shape ``(n,c,1,1)``."""
    return ops.sigmoid(p.fc2(ops.relu(p.fc1(ops.global_avg_pool(x)))))


# ---------------------------------------------------------------------------
# cross-modality fusion


@dataclass
class CmfParams:
    transit: IrbParams
    attention: AttentionParams
    fuse: IrbParams


def make_cmf(store: ParamStore, name: str, channels: int, expansion: int,
             rng: np.random.Generator) -> CmfParams:
    return CmfParams(make_irb(store, f"{name}.transit", channels, channels, expansion, 1, rng),
                     make_attention(store, f"{name}.att", channels, rng),
                     make_irb(store, f"{name}.fuse", channels, channels, expansion, 1, rng))


def cmf_fuse(c5: Tensor, d5: Tensor, p: CmfParams, mode: str = "train") -> Tensor:
    """Gate RGB features with depth at the coarsest scale.

    ``T = IRB(c5*d5)``, ``v = attention(c5)``, output ``IRB(v*T*d5)``.
    """
    if c5.shape != d5.shape:
        axis = next(a for a, s1, s2 in zip(AXES, c5.shape, d5.shape) if s1 != s2)
        raise DimensionError(f"RGB {c5.shape} and depth {d5.shape} features differ", axis=axis)
    t = irb_forward(ops.elementwise_binary(c5, d5, "mul"), p.transit, mode)
    v = channel_attention(c5, p.attention)
    gated = ops.elementwise_binary(ops.elementwise_binary(t, v, "mul"), d5, "mul")
    return irb_forward(gated, p.fuse, mode)


# ---------------------------------------------------------------------------
# compact pyramid refinement


@dataclass
class CprParams:
    in_channels: int
    expansion: int
    dilations: tuple[int, ...]
    expand: ConvParams
    expand_bn: BNParams
    branches: list[ConvParams]
    sum_bn: BNParams
    squeeze: ConvParams
    squeeze_bn: BNParams
    final: ConvParams
    final_bn: BNParams
    attention: AttentionParams


def make_cpr(store: ParamStore, name: str, channels: int, expansion: int,
             dilations: Sequence[int], rng: np.random.Generator) -> CprParams:
    hidden = expansion * channels
    expand = make_conv(store, f"{name}.expand", ConvSpec(channels, hidden, 1), rng)
    expand_bn = make_bn(store, f"{name}.expand_bn", hidden)
    branches = [make_conv(store, f"{name}.dw{k}", ConvSpec(hidden, hidden, 3, 1, d, groups=hidden), rng)
                for k, d in enumerate(dilations)]
    sum_bn = make_bn(store, f"{name}.sum_bn", hidden)
    squeeze = make_conv(store, f"{name}.squeeze", ConvSpec(hidden, channels, 1), rng)
    squeeze_bn = make_bn(store, f"{name}.squeeze_bn", channels)
    final = make_conv(store, f"{name}.final", ConvSpec(channels, channels, 1), rng)
    final_bn = make_bn(store, f"{name}.final_bn", channels)
    att = make_attention(store, f"{name}.att", channels, rng)
    return CprParams(channels, expansion, tuple(dilations), expand, expand_bn, branches, sum_bn,
                     squeeze, squeeze_bn, final, final_bn, att)


def cpr_refine(x: Tensor, p: CprParams, mode: str = "train") -> Tensor:
    if x.shape[1] != p.in_channels:
        raise DimensionError(f"CPR expects {p.in_channels} channels, got {x.shape[1]}", axis="channel")
    x1 = conv_bn(x, p.expand, p.expand_bn, mode)
    acc = p.branches[0](x1)
    for branch in p.branches[1:]:
        acc = ops.elementwise_binary(acc, branch(x1), "add")
    x2 = ops.relu(p.sum_bn(acc, mode))
    x3 = ops.elementwise_binary(conv_bn(x2, p.squeeze, p.squeeze_bn, mode, act=False), x, "add")
    v = channel_attention(x, p.attention)
    return ops.elementwise_binary(conv_bn(x3, p.final, p.final_bn, mode), v, "mul")


# ---------------------------------------------------------------------------
# implicit depth restoration head

IDR_CHANNELS = 256


@dataclass
class IdrParams:
    squeezes: list[ConvParams]
    merge: ConvParams
    merge_bn: BNParams
    irbs: list[IrbParams]
    out: ConvParams


def make_idr(store: ParamStore, name: str, in_channels: Sequence[int], width: int, expansion: int,
             rng: np.random.Generator, n_irb: int = 4) -> IdrParams:
    squeezes = [make_conv(store, f"{name}.squeeze{k}", ConvSpec(c, width, 1, has_bias=True), rng)
                for k, c in enumerate(in_channels)]
    merge = make_conv(store, f"{name}.merge", ConvSpec(width * len(in_channels), width, 1), rng)
    merge_bn = make_bn(store, f"{name}.merge_bn", width)
    irbs = [make_irb(store, f"{name}.irb{k}", width, width, expansion, 1, rng) for k in range(n_irb)]
    out = make_conv(store, f"{name}.out", ConvSpec(width, 1, 1, has_bias=True), rng)
    return IdrParams(squeezes, merge, merge_bn, irbs, out)


def idr_head(features: Sequence[Tensor], p: IdrParams, target_hw: tuple[int, int],
             mode: str = "train", fuse_index: int = 2) -> Tensor:
    """Restore a full-resolution depth map from the five pyramid levels.

    All levels are squeezed, resized to the stride-8 level (``features[2]``),
    concatenated and fused; the result is a sigmoid map of size ``target_hw``.
    """
    if len(features) != len(p.squeezes):
        raise DimensionError(f"IDR needs {len(p.squeezes)} feature maps, got {len(features)}", axis="level")
    _check_pyramid(features)
    fh, fw = features[fuse_index].shape[2:]
    squeezed = [ops.bilinear_resize(sq(f), fh, fw) for sq, f in zip(p.squeezes, features)]
    h = conv_bn(ops.concat_channels(squeezed), p.merge, p.merge_bn, mode)
    for irb in p.irbs:
        h = irb_forward(h, irb, mode)
    return ops.bilinear_resize(ops.sigmoid(p.out(h)), *target_hw)


def _check_pyramid(features: Sequence[Tensor]) -> None:
    n = features[0].shape[0]
    for k in range(1, len(features)):
        prev, cur = features[k - 1].shape, features[k].shape
        if cur[0] != n:
            raise DimensionError("pyramid levels disagree on batch size", axis="n")
        expect = (-(-prev[2] // 2), -(-prev[3] // 2))
        if cur[2:] != expect:
            raise DimensionError(f"level {k} is {cur[2:]}, expected {expect} (stride doubling)", axis="h")
