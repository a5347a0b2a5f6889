"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ops import relu_patterns
from .tensor import Graph, NumericError, Tensor, backward, no_grad

DENOM_FLOOR = 1e-6
KINK_RETRIES = 8


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: str = ""
    per_param: dict[str, float] = field(default_factory=dict)
    skipped: int = 0
    unchecked: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = DENOM_FLOOR) -> float:
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
               tolerance: float = 1e-4, max_coords: int | None = 16, seed: int = 0,
               require_float64: bool = True, skip_kinks: bool = False) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` against ``(f(θ+ε) − f(θ−ε)) / 2ε``.

    ``f`` rebuilds the graph on every call and returns a scalar Tensor. Up to
    ``max_coords`` randomly chosen coordinates per parameter are probed
    (all of them when ``None``). Relative error is
    ``|a − n| / max(|a|, |n|, 1e-6 · max(1, G))`` with ``G`` the largest
    analytic gradient magnitude, so coordinates whose true gradient is
    zero (a bias feeding a batch-statistics BN) are judged against the
    gradient scale of ``f`` instead of against round-off.

    With ``skip_kinks`` a coordinate is skipped (and counted in
    ``skipped``) when some ReLU input changes sign between ``θ+ε`` and
    ``θ−ε``; the difference quotient is meaningless across a kink. A
    parameter left without any valid coordinate is listed in ``unchecked``.
    """
    if require_float64 and any(p.dtype != np.float64 for p in params):
        raise TypeError("grad_check needs float64 parameters; build them under precision('float64')")
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Graph() as g:
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is not finite")
    if g.nodes:
        backward(g, loss, params)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    scale = max([1.0] + [float(np.max(np.abs(ga))) for ga in analytic if ga.size])
    floor = DENOM_FLOOR * scale

    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    per_param: dict[str, float] = {}
    unchecked: list[str] = []
    for k, (p, ga) in enumerate(zip(params, analytic)):
        name = p.name or f"param{k}"
        flat = p.data.reshape(-1)
        want = flat.size if max_coords is None else min(max_coords, flat.size)
        if skip_kinks:
            # kinked coordinates are replaced by fresh draws, within a budget
            order = rng.permutation(flat.size)[:KINK_RETRIES * want]
        else:
            order = np.sort(rng.choice(flat.size, size=want, replace=False))
        pworst, done = 0.0, 0
        for idx in order:
            if done == want:
                break
            orig = flat[idx]
            with no_grad(), relu_patterns() as pat_p:
                flat[idx] = orig + epsilon
                fp = f().item()
            with no_grad(), relu_patterns() as pat_m:
                flat[idx] = orig - epsilon
                fm = f().item()
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing {name}[{idx}]")
            if skip_kinks and any(not np.array_equal(a, b) for a, b in zip(pat_p, pat_m)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * epsilon)
            err = relative_error(float(ga.reshape(-1)[idx]), num, floor)
            checked += 1
            done += 1
            pworst = max(pworst, err)
            if err > worst:
                worst, worst_name = err, f"{name}[{idx}]"
        if done == 0:
            unchecked.append(name)
        per_param[name] = pworst
    for p in params:
        p.grad = None
    return GradCheckReport(worst, tolerance, checked, worst_name, per_param, skipped, unchecked)


def directional_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-6,
                      tolerance: float = 1e-4, seed: int = 0, require_float64: bool = True) -> GradCheckReport:
    """One random unit direction ``d`` per parameter tensor: ``∇f·d`` against
    ``(f(θ+εd) − f(θ−εd)) / 2ε``.

    Covers every tensor with two evaluations each, which makes whole-network
    checks affordable. The denominator floor follows :func:`grad_check`,
    scaled by the largest directional derivative.
    """
    if require_float64 and any(p.dtype != np.float64 for p in params):
        raise TypeError("directional_check needs float64 parameters")
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Graph() as g:
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is not finite")
    if g.nodes:
        backward(g, loss, params)
    rows = []
    for k, p in enumerate(params):
        d = rng.normal(size=p.shape)
        d /= max(np.linalg.norm(d), 1e-300)
        ga = p.grad if p.grad is not None else np.zeros_like(p.data)
        analytic = float((ga * d).sum())
        orig = p.data.copy()
        with no_grad():
            p.data[...] = orig + epsilon * d
            fp = f().item()
            p.data[...] = orig - epsilon * d
            fm = f().item()
        p.data[...] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite loss while perturbing {p.name or k}")
        rows.append((p.name or f"param{k}", analytic, (fp - fm) / (2 * epsilon)))
    for p in params:
        p.grad = None
    floor = DENOM_FLOOR * max([1.0] + [abs(a) for _, a, _ in rows])
    per_param = {name: relative_error(a, n, floor) for name, a, n in rows}
    worst_name = max(per_param, key=per_param.get) if per_param else ""
    return GradCheckReport(per_param.get(worst_name, 0.0), tolerance, len(rows), worst_name, per_param)
