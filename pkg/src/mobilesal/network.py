"""Full two-stream network: RGB and depth encoders, coarse-level fusion,
pyramid decoder with side outputs, and the training-only depth head."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .blocks import (IDR_CHANNELS, CmfParams, CprParams, IdrParams, IrbParams, cmf_fuse, conv_bn,
                     cpr_refine, idr_head, irb_forward, make_cmf, make_cpr, make_idr, make_irb)
from .ops import ConvSpec
from .params import BNParams, ConvParams, ParamStore, make_bn, make_conv
from .tensor import DimensionError, Tensor

# (expansion, channels, repeats, first stride) of the MobileNetV2 body up to 320 channels
MOBILENETV2_BODY = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                    (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
# bottleneck group index closing each pyramid level C1..C5
RGB_CUTS = (0, 1, 2, 4, 6)
RGB_STEM = 32
RGB_CHANNELS = (16, 24, 32, 96, 320)
DEPTH_CHANNELS = (16, 32, 64, 96, 320)
STRIDES = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class MobileSalConfig:
    input_size: tuple[int, int] = (320, 320)
    width_mult: float = 1.0
    m_depth: int = 4
    m_cpr: int = 4
    m_idr: int = 6
    m_cmf: int = 4
    cpr_dilations: tuple[int, ...] = (1, 2, 3)
    include_idr_at_inference: bool = False

    def __post_init__(self):
        h, w = self.input_size
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise DimensionError(f"input size {self.input_size} must be divisible by 32", axis="h" if h % 32 else "w")
        if self.width_mult <= 0:
            raise ValueError("width_mult must be positive")

    def ch(self, c: int) -> int:
        return max(1, int(round(c * self.width_mult)))

    def architecture(self) -> dict:
        """Fields that determine parameter names and shapes."""
        d = asdict(self)
        d.pop("input_size")
        d.pop("include_idr_at_inference")
        d["cpr_dilations"] = list(self.cpr_dilations)
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["cpr_dilations"] = list(self.cpr_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MobileSalConfig":
        d = dict(d)
        d["input_size"] = tuple(d.get("input_size", (320, 320)))
        d["cpr_dilations"] = tuple(d.get("cpr_dilations", (1, 2, 3)))
        return cls(**d)


@dataclass
class NetworkOutputs:
    saliency: list[Tensor]          # P1..P5
    depth: Tensor | None = None     # restored depth, train mode only

    @property
    def p1(self) -> Tensor:
        return self.saliency[0]


@dataclass
class RgbStream:
    stem: ConvParams
    stem_bn: BNParams
    stages: list[list[IrbParams]]   # one list per pyramid level


@dataclass
class DecoderStage:
    cpr: CprParams
    top: ConvParams | None = None
    top_bn: BNParams | None = None
    lateral: ConvParams | None = None
    lateral_bn: BNParams | None = None
    side: ConvParams | None = None


@dataclass
class MobileSal:
    config: MobileSalConfig
    store: ParamStore
    rgb: RgbStream
    depth: list[list[IrbParams]]
    cmf: CmfParams
    decoder: list[DecoderStage]     # index 0 = stage 1 (finest)
    idr: IdrParams
    meta: dict = field(default_factory=dict)

    def rgb_channels(self) -> list[int]:
        return [self.config.ch(c) for c in RGB_CHANNELS]

    def depth_channels(self) -> list[int]:
        return [self.config.ch(c) for c in DEPTH_CHANNELS]


def decoder_widths(config: MobileSalConfig) -> list[int]:
    """Channel width of decoder stages 1..5 from the halve-and-concatenate rule."""
    c = [config.ch(x) for x in RGB_CHANNELS]
    widths = [0] * 5
    widths[4] = c[4]
    for i in range(3, -1, -1):
        widths[i] = max(1, widths[i + 1] // 2) + max(1, c[i] // 2)
    return widths


def build_mobilesal(config: MobileSalConfig | None = None, seed: int = 0) -> MobileSal:
    config = config or MobileSalConfig()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    ch = config.ch

    # RGB stream
    stem_c = ch(RGB_STEM)
    stem = make_conv(store, "rgb.stem", ConvSpec(3, stem_c, 3, 2), rng)
    stem_bn = make_bn(store, "rgb.stem_bn", stem_c)
    levels: list[list[IrbParams]] = [[] for _ in range(5)]
    c_in, level = stem_c, 0
    for g, (t, c, n, s) in enumerate(MOBILENETV2_BODY):
        c_out = ch(c)
        for k in range(n):
            levels[level].append(make_irb(store, f"rgb.b{g}.{k}", c_in, c_out, t, s if k == 0 else 1, rng))
            c_in = c_out
        if g == RGB_CUTS[level]:
            level += 1
    rgb = RgbStream(stem, stem_bn, levels)

    # depth stream: two IRBs per stage, first one strided
    depth: list[list[IrbParams]] = []
    c_in = 1
    for i, c in enumerate(DEPTH_CHANNELS):
        c_out = ch(c)
        depth.append([make_irb(store, f"depth.s{i + 1}.0", c_in, c_out, config.m_depth, 2, rng),
                      make_irb(store, f"depth.s{i + 1}.1", c_out, c_out, config.m_depth, 1, rng)])
        c_in = c_out

    c5 = ch(RGB_CHANNELS[4])
    if ch(DEPTH_CHANNELS[4]) != c5:
        raise DimensionError("depth and RGB top levels must share channel count", axis="channel")
    cmf = make_cmf(store, "cmf", c5, config.m_cmf, rng)

    # decoder, built finest-first so index == stage - 1
    widths = decoder_widths(config)
    rgb_c = [ch(c) for c in RGB_CHANNELS]
    stages: list[DecoderStage] = []
    for i in range(5):
        name = f"decoder.s{i + 1}"
        st = DecoderStage(cpr=make_cpr(store, f"{name}.cpr", widths[i], config.m_cpr, config.cpr_dilations, rng))
        if i < 4:
            top_c, lat_c = widths[i + 1], rgb_c[i]
            st.top = make_conv(store, f"{name}.top", ConvSpec(top_c, max(1, top_c // 2), 1), rng)
            st.top_bn = make_bn(store, f"{name}.top_bn", max(1, top_c // 2))
            st.lateral = make_conv(store, f"{name}.lateral", ConvSpec(lat_c, max(1, lat_c // 2), 1), rng)
            st.lateral_bn = make_bn(store, f"{name}.lateral_bn", max(1, lat_c // 2))
        st.side = make_conv(store, f"{name}.side", ConvSpec(widths[i], 1, 1, has_bias=True), rng)
        stages.append(st)

    idr_in = rgb_c[:4] + [c5]
    idr = make_idr(store, "idr", idr_in, ch(IDR_CHANNELS), config.m_idr, rng)
    return MobileSal(config, store, rgb, depth, cmf, stages, idr)


# ---------------------------------------------------------------------------
# forward passes


def _check_input(x: Tensor, channels: int, what: str) -> None:
    if x.data.ndim != 4 or x.shape[1] != channels:
        raise DimensionError(f"{what} input must be (n,{channels},H,W), got {x.shape}", axis="channel")
    h, w = x.shape[2:]
    if h % 32 or w % 32:
        raise DimensionError(f"{what} input {h}x{w} is not divisible by 32", axis="h" if h % 32 else "w")


def rgb_stream_forward(rgb: Tensor, net: MobileSal, mode: str = "train") -> list[Tensor]:
    _check_input(rgb, 3, "RGB")
    x = conv_bn(rgb, net.rgb.stem, net.rgb.stem_bn, mode)
    pyramid = []
    for stage in net.rgb.stages:
        for irb in stage:
            x = irb_forward(x, irb, mode)
        pyramid.append(x)
    return pyramid


def depth_stream_forward(depth: Tensor, net: MobileSal, mode: str = "train") -> list[Tensor]:
    _check_input(depth, 1, "depth")
    x, pyramid = depth, []
    for stage in net.depth:
        for irb in stage:
            x = irb_forward(x, irb, mode)
        pyramid.append(x)
    return pyramid


def decoder_forward(features: Sequence[Tensor], c5d: Tensor, net: MobileSal,
                    mode: str = "train") -> list[Tensor]:
    """Top-down refinement; returns decoder maps for stages 1..5 (finest first)."""
    if len(features) != 4:
        raise DimensionError(f"decoder needs C1..C4, got {len(features)} maps", axis="level")
    out: list[Tensor | None] = [None] * 5
    out[4] = cpr_refine(c5d, net.decoder[4].cpr, mode)
    for i in range(3, -1, -1):
        st = net.decoder[i]
        ci = features[i]
        up = ops.bilinear_resize(out[i + 1], *ci.shape[2:])
        a = conv_bn(up, st.top, st.top_bn, mode)
        b = conv_bn(ci, st.lateral, st.lateral_bn, mode)
        out[i] = cpr_refine(ops.concat_channels([a, b]), st.cpr, mode)
    return out


def forward_full(rgb: Tensor, depth: Tensor, net: MobileSal, mode: str = "train") -> NetworkOutputs:
    if rgb.shape[0] != depth.shape[0] or rgb.shape[2:] != depth.shape[2:]:
        axis = "n" if rgb.shape[0] != depth.shape[0] else "h"
        raise DimensionError(f"RGB {rgb.shape} and depth {depth.shape} disagree", axis=axis)
    h, w = rgb.shape[2:]
    c = rgb_stream_forward(rgb, net, mode)
    d = depth_stream_forward(depth, net, mode)
    c5d = cmf_fuse(c[4], d[4], net.cmf, mode)
    dec = decoder_forward(c[:4], c5d, net, mode)
    sal = [ops.bilinear_resize(ops.sigmoid(st.side(f)), h, w) for st, f in zip(net.decoder, dec)]
    restored = None
    if mode == "train" or net.config.include_idr_at_inference:
        restored = idr_head(c[:4] + [c5d], net.idr, (h, w), mode)
    return NetworkOutputs(sal, restored)


# ---------------------------------------------------------------------------
# accounting

SCOPES = {
    "all": ("rgb.", "depth.", "cmf.", "decoder."),
    "train": ("rgb.", "depth.", "cmf.", "decoder.", "idr."),
    "rgb": ("rgb.",),
    "depth": ("depth.",),
    "cmf": ("cmf.",),
    "decoder": ("decoder.",),
    "idr": ("idr.",),
}


def count_params(store: ParamStore, scope: str = "all") -> int:
    """Learnable element count. ``all`` is the deployed model (no IDR); ``train`` adds IDR."""
    if scope not in SCOPES:
        raise KeyError(f"unknown scope {scope!r}; choose from {sorted(SCOPES)}")
    prefixes = SCOPES[scope]
    return int(sum(t.size for n, t in store.named_parameters() if n.startswith(prefixes)))


class _Tally:
    def __init__(self):
        self.macs = 0
        self.elementwise = 0

    @property
    def total(self) -> int:
        return self.macs + self.elementwise

    def conv(self, n, spec: ConvSpec, h, w, bn=False, act=False):
        oh, ow = spec.out_hw(h, w)
        self.macs += n * spec.out_channels * (spec.in_channels // spec.groups) * spec.kernel ** 2 * oh * ow
        size = n * spec.out_channels * oh * ow
        self.elementwise += size * (int(bn) + int(act))
        return oh, ow

    def ew(self, count):
        self.elementwise += count

    def resize(self, n, c, h, w, oh, ow):
        if (h, w) != (oh, ow):
            self.elementwise += n * c * oh * ow


def _irb_cost(t: _Tally, n, p: IrbParams, h, w):
    if p.expand is not None:
        t.conv(n, p.expand.spec, h, w, bn=True, act=True)
    oh, ow = t.conv(n, p.depthwise.spec, h, w, bn=True, act=True)
    t.conv(n, p.squeeze.spec, oh, ow, bn=True)
    if p.residual:
        t.ew(n * p.out_channels * oh * ow)
    return oh, ow


def _attention_cost(t: _Tally, n, c, h, w):
    t.ew(n * c * h * w)                  # GAP
    t.macs += 2 * n * c * c              # FC1, FC2
    t.ew(2 * n * c)                      # relu, sigmoid


def _cpr_cost(t: _Tally, n, p: CprParams, h, w):
    c = p.in_channels
    hidden = p.expansion * c
    t.conv(n, p.expand.spec, h, w, bn=True, act=True)
    for k, br in enumerate(p.branches):
        t.conv(n, br.spec, h, w)
        if k:
            t.ew(n * hidden * h * w)
    t.ew(2 * n * hidden * h * w)         # BN + relu on the branch sum
    t.conv(n, p.squeeze.spec, h, w, bn=True)
    t.ew(n * c * h * w)                  # residual
    _attention_cost(t, n, c, h, w)
    t.conv(n, p.final.spec, h, w, bn=True, act=True)
    t.ew(n * c * h * w)                  # recalibration


def cmf_cost(net: MobileSal, n: int, h: int, w: int) -> int:
    """MACs + elementwise ops of the fusion module on an ``h x w`` map."""
    t = _Tally()
    _cmf_cost(t, net, n, h, w)
    return t.total


def _cmf_cost(t: _Tally, net: MobileSal, n, h, w):
    c = net.cmf.transit.in_channels
    t.ew(n * c * h * w)
    _irb_cost(t, n, net.cmf.transit, h, w)
    _attention_cost(t, n, c, h, w)
    t.ew(2 * n * c * h * w)
    _irb_cost(t, n, net.cmf.fuse, h, w)


def count_flops(net: MobileSal, scope: str = "eval", input_size: tuple[int, int] | None = None,
                batch: int = 1) -> dict[str, int]:
    """Analytic cost of one forward pass.

    Convolutions cost ``n*out*(in/groups)*k^2*oh*ow`` MACs, FC layers
    ``in*out``; BN, activations, elementwise products/sums, pooling and
    resizes count one op per element touched. ``scope`` is ``eval``
    (deployed graph) or ``train`` (adds the IDR branch). Returns
    ``{"macs", "elementwise", "total"}``.
    """
    if scope not in ("eval", "train"):
        raise KeyError(f"unknown flop scope {scope!r}")
    h, w = input_size or net.config.input_size
    n = batch
    t = _Tally()
    # RGB
    sh, sw = t.conv(n, net.rgb.stem.spec, h, w, bn=True, act=True)
    sizes = []
    for stage in net.rgb.stages:
        for irb in stage:
            sh, sw = _irb_cost(t, n, irb, sh, sw)
        sizes.append((sh, sw))
    # depth
    dh, dw = h, w
    for stage in net.depth:
        for irb in stage:
            dh, dw = _irb_cost(t, n, irb, dh, dw)
    _cmf_cost(t, net, n, *sizes[4])
    widths = [st.cpr.in_channels for st in net.decoder]
    _cpr_cost(t, n, net.decoder[4].cpr, *sizes[4])
    for i in range(3, -1, -1):
        st = net.decoder[i]
        (ph, pw), (ch_, cw) = sizes[i + 1], sizes[i]
        t.resize(n, widths[i + 1], ph, pw, ch_, cw)
        t.conv(n, st.top.spec, ch_, cw, bn=True, act=True)
        t.conv(n, st.lateral.spec, ch_, cw, bn=True, act=True)
        _cpr_cost(t, n, st.cpr, ch_, cw)
    for i, st in enumerate(net.decoder):
        t.conv(n, st.side.spec, *sizes[i])
        t.ew(n * sizes[i][0] * sizes[i][1])       # sigmoid
        t.resize(n, 1, *sizes[i], h, w)
    if scope == "train" or net.config.include_idr_at_inference:
        _idr_cost(t, net, n, sizes, (h, w))
    return {"macs": t.macs, "elementwise": t.elementwise, "total": t.total}


def _idr_cost(t: _Tally, net: MobileSal, n, sizes, target):
    fh, fw = sizes[2]
    width = net.idr.merge.spec.out_channels
    for sq, (lh, lw) in zip(net.idr.squeezes, sizes):
        t.conv(n, sq.spec, lh, lw)
        t.resize(n, width, lh, lw, fh, fw)
    t.conv(n, net.idr.merge.spec, fh, fw, bn=True, act=True)
    for irb in net.idr.irbs:
        _irb_cost(t, n, irb, fh, fw)
    t.conv(n, net.idr.out.spec, fh, fw)
    t.ew(n * fh * fw)
    t.resize(n, 1, fh, fw, *target)
