"""Finite-difference suites for every parameterized block, run in float64."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import blocks, losses, ops
from .gradcheck import GradCheckReport, grad_check
from .ops import ConvSpec
from .params import ParamStore
from .tensor import Tensor, mul, precision, sum_

BLOCKS = ("ops", "irb", "cmf", "cpr", "idr", "losses")


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    # random projection keeps every output coordinate's gradient O(1)
    return sum_(mul(out, Tensor(proj, dtype=out.dtype)))


def _inputs(rng, *shapes) -> list[Tensor]:
    return [Tensor(rng.uniform(-1, 1, size=s), requires_grad=True, name=f"input{k}", dtype=np.float64)
            for k, s in enumerate(shapes)]


def _jitter_bn(store: ParamStore, rng) -> None:
    # non-trivial gamma/beta so their gradients are exercised
    for name, t in store.items():
        if name.endswith(".gamma"):
            t.data[...] = rng.uniform(0.5, 1.5, size=t.shape)
        elif name.endswith(".beta"):
            t.data[...] = rng.uniform(-0.5, 0.5, size=t.shape)
        elif name.endswith(".bias"):
            t.data[...] = rng.uniform(-0.2, 0.2, size=t.shape)


def check_block(build: Callable, run: Callable, input_shapes, seed: int, tolerance: float,
                dtype=np.float64, epsilon: float = 1e-5, max_coords: int = 12) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    with precision(dtype):
        store = ParamStore()
        p = build(store, rng)
        _jitter_bn(store, rng)
        xs = [Tensor(rng.uniform(-1, 1, size=s), requires_grad=True, name=f"input{k}")
              for k, s in enumerate(input_shapes)]
        out_shape = run(xs, p).shape
        proj = rng.normal(size=out_shape)
        return grad_check(lambda: _projected(run(xs, p), proj), xs + store.parameters(), epsilon,
                          tolerance, max_coords=max_coords, seed=seed,
                          require_float64=np.dtype(dtype) == np.float64)


def irb_suite(tolerance=1e-4, dtype=np.float64) -> dict[str, GradCheckReport]:
    out = {}
    for stride, c_out in ((1, 4), (2, 6)):
        out[f"irb_s{stride}"] = check_block(
            lambda s, r: blocks.make_irb(s, "irb", 4, c_out, 4, stride, r),
            lambda xs, p: blocks.irb_forward(xs[0], p, "train"),
            [(2, 4, 6, 6)], seed=10 + stride, tolerance=tolerance, dtype=dtype)
    return out


def cmf_suite(tolerance=1e-4, dtype=np.float64) -> dict[str, GradCheckReport]:
    return {"cmf": check_block(
        lambda s, r: blocks.make_cmf(s, "cmf", 6, 4, r),
        lambda xs, p: blocks.cmf_fuse(xs[0], xs[1], p, "train"),
        [(2, 6, 3, 3), (2, 6, 3, 3)], seed=20, tolerance=tolerance, dtype=dtype)}


def cpr_suite(tolerance=1e-4, dtype=np.float64) -> dict[str, GradCheckReport]:
    return {"cpr": check_block(
        lambda s, r: blocks.make_cpr(s, "cpr", 8, 4, (1, 2, 3), r),
        lambda xs, p: blocks.cpr_refine(xs[0], p, "train"),
        [(1, 8, 6, 6)], seed=30, tolerance=tolerance, dtype=dtype)}


def idr_suite(tolerance=1e-4, dtype=np.float64) -> dict[str, GradCheckReport]:
    chans = (2, 3, 4, 5, 6)
    shapes = [(2, c, 16 >> k, 16 >> k) for k, c in enumerate(chans)]
    return {"idr": check_block(
        lambda s, r: blocks.make_idr(s, "idr", chans, 4, 6, r),
        lambda xs, p: blocks.idr_head(xs, p, (32, 32), "train"),
        shapes, seed=40, tolerance=tolerance, dtype=dtype, max_coords=8)}


def loss_suite(tolerance=1e-4, dtype=np.float64) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(50)
    out = {}
    shape = (2, 1, 12, 12)
    with precision(dtype):
        g = Tensor((rng.random(shape) > 0.5).astype(float))
        d = Tensor(rng.uniform(0, 1, shape))
        cases = {
            "bce": lambda p: losses.bce_loss(p, g),
            "dice": lambda p: losses.dice_loss(p, g),
            "ssim": lambda p: losses.idr_loss(p, d),
        }
        for name, fn in cases.items():
            p = Tensor(rng.uniform(0.05, 0.95, shape), requires_grad=True, name="P")
            out[name] = grad_check(lambda fn=fn, p=p: fn(p), [p], tolerance=tolerance, max_coords=40,
                                   seed=51, require_float64=np.dtype(dtype) == np.float64)
    return out


def ops_suite(tolerance=1e-4, dtype=np.float64) -> dict[str, GradCheckReport]:
    """Every tensor-core operator on its own."""
    rng = np.random.default_rng(60)
    out = {}

    def run(name, fn, params, out_shape):
        proj = rng.normal(size=out_shape)
        out[name] = grad_check(lambda: _projected(fn(), proj), params, tolerance=tolerance, max_coords=20,
                               seed=61, require_float64=np.dtype(dtype) == np.float64)

    with precision(dtype):
        x = Tensor(rng.uniform(-1, 1, (2, 3, 5, 5)), requires_grad=True, name="x")
        for label, spec in (("conv1x1", ConvSpec(3, 4, 1, has_bias=True)),
                            ("conv3x3_s2", ConvSpec(3, 4, 3, 2, has_bias=True)),
                            ("dwconv_d2", ConvSpec(3, 3, 3, 1, 2, groups=3)),
                            ("dwconv_s2", ConvSpec(3, 3, 3, 2, 1, groups=3))):
            w = Tensor(rng.normal(size=spec.weight_shape), requires_grad=True, name=f"{label}.w")
            b = Tensor(rng.normal(size=spec.out_channels), requires_grad=True, name=f"{label}.b") \
                if spec.has_bias else None
            oh, ow = spec.out_hw(5, 5)
            run(label, lambda w=w, b=b, spec=spec: ops.conv2d(x, w, b, spec),
                [x, w] + ([b] if b is not None else []), (2, spec.out_channels, oh, ow))
        gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True, name="gamma")
        beta = Tensor(rng.uniform(-0.5, 0.5, 3), requires_grad=True, name="beta")
        rm, rv = Tensor(rng.normal(size=3)), Tensor(rng.uniform(0.5, 2, 3))
        for mode in ("train", "eval"):
            run(f"batch_norm_{mode}", lambda mode=mode: ops.batch_norm(x, gamma, beta, rm, rv, mode),
                [x, gamma, beta], x.shape)
        run("relu", lambda: ops.relu(x), [x], x.shape)
        run("sigmoid", lambda: ops.sigmoid(x), [x], x.shape)
        y = Tensor(rng.uniform(-1, 1, x.shape), requires_grad=True, name="y")
        v = Tensor(rng.uniform(-1, 1, (2, 3, 1, 1)), requires_grad=True, name="v")
        run("mul", lambda: ops.elementwise_binary(x, y, "mul"), [x, y], x.shape)
        run("mul_broadcast", lambda: ops.elementwise_binary(x, v, "mul"), [x, v], x.shape)
        run("add", lambda: ops.elementwise_binary(x, y, "add"), [x, y], x.shape)
        run("concat", lambda: ops.concat_channels([x, y]), [x, y], (2, 6, 5, 5))
        run("bilinear_up", lambda: ops.bilinear_resize(x, 9, 12), [x], (2, 3, 9, 12))
        run("bilinear_down", lambda: ops.bilinear_resize(x, 3, 2), [x], (2, 3, 3, 2))
        run("gap", lambda: ops.global_avg_pool(x), [x], (2, 3, 1, 1))
        fw = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="fc.w")
        fb = Tensor(rng.normal(size=4), requires_grad=True, name="fc.b")
        run("fully_connected", lambda: ops.fully_connected(v, fw, fb), [v, fw, fb], (2, 4, 1, 1))
    return out


SUITES = {"ops": ops_suite, "irb": irb_suite, "cmf": cmf_suite, "cpr": cpr_suite,
          "idr": idr_suite, "losses": loss_suite}


def run_suites(block: str = "all", tolerance: float = 1e-4, dtype=np.float64) -> dict[str, GradCheckReport]:
    names = BLOCKS if block == "all" else (block,)
    results: dict[str, GradCheckReport] = {}
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown block {name!r}; choose from all, {', '.join(BLOCKS)}")
        results.update(SUITES[name](tolerance=tolerance, dtype=dtype))
    return results
