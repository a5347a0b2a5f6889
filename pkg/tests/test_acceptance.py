"""End-to-end acceptance suite; each test prints one PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest

import test_tensor_core as oracles
from conftest import run_cli
from mobilesal import (MobileSalConfig, Tensor, TrainConfig, bce_loss, build_mobilesal, count_flops, dice_loss,
                       forward_full, load_network, no_grad, poly_lr, precision, ssim, synth_dataset)
from mobilesal.cli import stats_summary
from mobilesal.metrics import PrecisionRecallCurve, f_beta_max
from mobilesal.network import cmf_cost, depth_stream_forward, rgb_stream_forward
from mobilesal.params import ParamStore
from mobilesal.training import AdamState, adam_step, evaluate_network, to_batch

TOY = MobileSalConfig(input_size=(64, 64), width_mult=0.25)


@pytest.fixture
def verdict(capsys):
    def emit(tag: str, ok: bool, detail: str, known: bool = False) -> None:
        status = "PASS" if ok else "FAIL (known, strict xfail)" if known else "FAIL"
        with capsys.disabled():
            print(f"\n{tag}: {status}  {detail}")
        assert ok, f"{tag}: {detail}"
    return emit


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def test_ac01_parameter_count(verdict):
    t0 = time.perf_counter()
    proc = run_cli("stats", "--width-mult", "1.0")
    seconds = time.perf_counter() - t0
    s = json.loads(proc.stdout.strip().splitlines()[-1])
    printed = "with IDR" in proc.stdout and "no IDR" in proc.stdout
    ok = 5.5e6 <= s["params_inference"] <= 7.5e6 and printed and seconds < 5
    verdict("AC1 parameter count", ok,
            f"inference {s['params_inference'] / 1e6:.3f}M, train {s['params_train'] / 1e6:.3f}M, {seconds:.2f}s")


class _Spy:
    def __init__(self, conv):
        self.conv, self.spec, self.shapes = conv, conv.spec, []

    def __call__(self, x):
        self.shapes.append(x.shape)
        return self.conv(x)


def test_ac02_shape_contract(verdict):
    net = build_mobilesal(MobileSalConfig(), seed=0)
    rng = np.random.default_rng(0)
    rgb, dep = Tensor(rng.uniform(0, 1, (1, 3, 320, 320))), Tensor(rng.uniform(0, 1, (1, 1, 320, 320)))
    spy = _Spy(net.idr.merge)
    net.idr.merge = spy
    with no_grad():
        c = rgb_stream_forward(rgb, net, "eval")
        d = depth_stream_forward(dep, net, "eval")
        out = forward_full(rgb, dep, net, "train")
    strides = [320 // t.shape[2] for t in c]
    ok = (strides == [2, 4, 8, 16, 32] and [320 // t.shape[2] for t in d] == strides
          and c[4].shape[2:] == d[4].shape[2:] == (10, 10)
          and [s[2:] for s in spy.shapes] == [(40, 40)]
          and len(out.saliency) == 5
          and all(p.shape[2:] == (320, 320) for p in out.saliency + [out.depth]))
    verdict("AC2 shape contract", ok, f"strides {strides}, fusion {c[4].shape[2:]}, IDR merge {spy.shapes}")


def test_ac03_idr_free_at_inference(verdict, toy_runs):
    net = load_network(toy_runs[0].out / "final.msal")
    rgb, depth, _ = to_batch(synth_dataset(2, 64, 99))
    trained = forward_full(rgb, depth, net, "eval").p1.data.tobytes()
    rng = np.random.default_rng(0)
    for t in net.store.parameters("idr."):
        t.data[...] = rng.normal(size=t.shape)
    randomized = forward_full(rgb, depth, net, "eval").p1.data.tobytes()
    net.idr = None
    removed = forward_full(rgb, depth, net, "eval").p1.data.tobytes()
    verdict("AC3 IDR omitted at test time", trained == randomized == removed,
            "eval P1 bitwise equal for trained, randomized and removed IDR weights")


def test_ac04_gradient_correctness(verdict):
    t0 = time.perf_counter()
    proc = run_cli("gradcheck", "--block", "all", check=False)
    seconds = time.perf_counter() - t0
    summary = json.loads(proc.stdout.strip().splitlines()[-1])
    worst = max(summary["worst"].values())
    want = {"irb_s1", "irb_s2", "cmf", "cpr", "idr", "bce", "dice", "ssim"}
    ok = proc.returncode == 0 and summary["passed"] and want <= set(summary["worst"]) and seconds < 120
    verdict("AC4 gradient correctness", ok,
            f"{len(summary['worst'])} suites, worst rel err {worst:.2e}, {seconds:.1f}s")


def test_ac05_operator_oracles(verdict):
    checks = [oracles.test_conv2d_matches_naive_loops, oracles.test_activations_match_naive,
              oracles.test_elementwise_binary_matches_naive, oracles.test_concat_matches_naive,
              oracles.test_bilinear_resize_matches_naive, oracles.test_global_avg_pool_matches_naive,
              oracles.test_fully_connected_matches_naive]
    for fn in checks:
        fn()
    for mode in ("train", "eval"):
        oracles.test_batch_norm_matches_naive(mode)
    ok = oracles.ORACLE_CASES >= 100 and oracles.ATOL <= 1e-6
    verdict("AC5 operator oracles", ok,
            f"{len(checks) + 1} operators x {oracles.ORACLE_CASES} random cases, atol {oracles.ATOL:g}")


def test_ac06_closed_forms(verdict):
    g = (np.random.default_rng(0).random((1, 1, 8, 8)) > 0.5).astype(float)
    x = np.random.default_rng(1).uniform(0, 1, (1, 1, 16, 16))
    with precision("float64"):
        b = float(bce_loss(t64(np.full(g.shape, 0.5)), t64(g)).item())
        dc = float(dice_loss(t64(g), t64(g)).item())
        sx = float(ssim(t64(x), t64(x)).item())
        sc = float(ssim(t64(np.full((1, 1, 16, 16), 0.2)), t64(np.full((1, 1, 16, 16), 0.8))).item())
    ones = np.ones(255)
    f = f_beta_max(PrecisionRecallCurve(np.arange(255) / 255, 0.5 * ones, ones))
    ok = (abs(b - math.log(2)) < 1e-6 and abs(dc) < 1e-6 and abs(sx - 1) < 1e-6
          and abs(sc - 0.47073) < 1e-4 and abs(f - 0.5652) < 1e-4)
    verdict("AC6 closed forms", ok, f"bce {b:.7f}, dice {dc:.1e}, ssim(x,x) {sx:.7f}, ssim(0.2,0.8) {sc:.6f}, "
                                    f"F {f:.5f}")


def test_ac07_overfit_sanity(verdict, toy_runs):
    run = toy_runs[0]
    hist = run.history
    report = evaluate_network(load_network(run.out / "final.msal"), synth_dataset(8, 64, 7))
    idr_ratio = hist[0]["loss_idr"] / hist[-1]["loss_idr"]
    ok = (len(hist) == 300 and report.f_beta_max > 0.95 and report.mae < 0.05 and idr_ratio >= 2
          and run.seconds < 600)
    verdict("AC7 overfit sanity", ok, f"F {report.f_beta_max:.4f}, MAE {report.mae:.4f}, "
                                      f"IDR loss {hist[0]['loss_idr']:.3f} -> {hist[-1]['loss_idr']:.3f} "
                                      f"({idr_ratio:.2f}x), {run.seconds:.0f}s")


def test_ac08_schedule_fidelity(verdict):
    store = ParamStore()
    store.add("w.weight", np.random.default_rng(0).normal(size=(4, 4)))
    before = store["w.weight"].data.tobytes()
    state = AdamState()
    for _ in range(100):
        store.zero_grad()
        adam_step(store, state, 1e-3, TrainConfig(weight_decay=0.0))
    fixed = store["w.weight"].data.tobytes() == before
    exact = 1e-4 * 0.5 ** 0.9
    ok = poly_lr(0) == 1e-4 and abs(poly_lr(30) - exact) < 1e-15 and fixed
    verdict("AC8 schedule fidelity", ok, f"poly_lr(0) {poly_lr(0):g}, poly_lr(30) {poly_lr(30):.6e} "
                                         f"(formula {exact:.6e}), Adam fixed point {fixed}")


@pytest.mark.xfail(strict=True, reason="1e-4 * 0.5**0.9 = 5.35887e-5 sits 1.33e-9 from the rounded 5.359e-5, "
                                       "outside a 1e-9 band")
def test_ac08_schedule_literal_rounded_value(verdict):
    got = poly_lr(30)
    verdict("AC8 literal 5.359e-5 +/- 1e-9", abs(got - 5.359e-5) < 1e-9, f"poly_lr(30) {got:.6e}", known=True)


def test_ac09_determinism(verdict, toy_runs):
    a, b = toy_runs
    files = ["final.msal", "epoch_0100.msal", "epoch_0200.msal", "history.jsonl"]
    same = {f: (a.out / f).read_bytes() == (b.out / f).read_bytes() for f in files}
    verdict("AC9 determinism", all(same.values()), ", ".join(f"{f} {'identical' if v else 'DIFFERS'}"
                                                           for f, v in same.items()))


def test_ac10_efficiency_ordering(verdict):
    net = build_mobilesal(MobileSalConfig(), seed=0)
    coarse, fine = cmf_cost(net, 1, 10, 10), cmf_cost(net, 1, 80, 80)
    ev, tr = count_flops(net, "eval")["macs"], count_flops(net, "train")["macs"]
    ok = coarse / fine < 0.02 and tr > ev
    verdict("AC10 efficiency ordering", ok, f"CMF 10x10/80x80 {coarse / fine:.4f}, train {tr / 1e9:.3f}G "
                                            f"> eval {ev / 1e9:.3f}G MACs")


@pytest.mark.xfail(strict=True, reason="at one input size stride 32 vs stride 8 is a 16x area ratio, so the "
                                       "fusion cost ratio is about 1/16, above 2%")
def test_ac10_same_input_stride8_clause(verdict):
    s = stats_summary(1.0, (320, 320))
    ratio = s["cmf_ops_stride32"] / s["cmf_ops_stride8"]
    verdict("AC10 stride 32 vs stride 8 at 320x320", ratio < 0.02, f"ratio {ratio:.4f}", known=True)
