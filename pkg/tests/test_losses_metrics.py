import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

import naive
from mobilesal import LossConfig, bce_loss, dice_loss, idr_loss, ssim, total_loss
from mobilesal.metrics import (N_THRESHOLDS, THRESHOLDS, MetricsReport, PrecisionRecallCurve, evaluate,
                               f_beta_max, f_measure_curve, mae, psnr, ssim_metric)
from mobilesal.tensor import DimensionError, Tensor, precision


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def val(t):
    return float(t.item())


def _maps(seed, shape=(2, 1, 12, 12)):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.01, 0.99, shape), (rng.random(shape) > 0.5).astype(float)


# ---------------------------------------------------------------------------
# configuration


def test_loss_config_defaults_and_validation():
    c = LossConfig()
    assert (c.lam, c.dice_smooth, c.bce_clamp) == (0.3, 1.0, 1e-7)
    assert (c.ssim_window, c.ssim_sigma, c.ssim_k1, c.ssim_k2, c.dynamic_range) == (11, 1.5, 0.01, 0.03, 1.0)
    with pytest.raises(ValueError):
        LossConfig(lam=-0.1)
    with pytest.raises(ValueError):
        LossConfig(bce_clamp=0.5)


# ---------------------------------------------------------------------------
# BCE


def test_bce_closed_forms():
    with precision("float64"):
        g = (np.random.default_rng(0).random((1, 1, 6, 6)) > 0.5).astype(float)
        assert val(bce_loss(t64(g), t64(g))) <= -math.log(1 - 1e-7) + 1e-12
        assert abs(val(bce_loss(t64(np.full(g.shape, 0.5)), t64(g))) - math.log(2)) < 1e-6


def test_bce_matches_loop_oracle():
    for seed in range(5):
        p, g = _maps(seed)
        p[0, 0, 0, :3] = [0.0, 1.0, 1e-9]          # exercise the clamp
        with precision("float64"):
            got = val(bce_loss(t64(p), t64(g)))
        assert abs(got - naive.bce(p, g)) < 1e-9


def test_bce_shape_mismatch():
    with pytest.raises(DimensionError):
        bce_loss(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5))))


# ---------------------------------------------------------------------------
# Dice


def test_dice_examples():
    with precision("float64"):
        g = np.zeros((1, 1, 20, 20))
        g[0, 0, :5, :5] = 1
        assert abs(val(dice_loss(t64(g), t64(g)))) < 1e-6
        p = np.zeros((1, 1, 20, 20))
        p[0, 0, 10:, 10:] = 1                       # 100 pixels
        q = np.zeros((1, 1, 20, 20))
        q[0, 0, :10, :10] = 1                       # 100 pixels, disjoint
        assert abs(val(dice_loss(t64(p), t64(q))) - (1 - 1 / 201)) < 1e-9
        z = np.zeros((1, 1, 8, 8))
        assert val(dice_loss(t64(z), t64(z))) == 0.0


def test_dice_matches_loop_oracle():
    for seed in range(5):
        p, g = _maps(seed, (3, 1, 7, 9))
        with precision("float64"):
            got = val(dice_loss(t64(p), t64(g)))
        assert abs(got - naive.dice(p, g)) < 1e-9


# ---------------------------------------------------------------------------
# SSIM


def test_ssim_closed_forms():
    with precision("float64"):
        x = np.random.default_rng(1).uniform(0, 1, (1, 1, 16, 16))
        assert abs(val(ssim(t64(x), t64(x))) - 1) < 1e-6
        a, b = np.full((1, 1, 16, 16), 0.2), np.full((1, 1, 16, 16), 0.8)
        want = (2 * 0.2 * 0.8 + 1e-4) / (0.2 ** 2 + 0.8 ** 2 + 1e-4)
        assert abs(want - 0.47073) < 1e-4
        assert abs(val(ssim(t64(a), t64(b))) - want) < 1e-9
        assert abs(val(idr_loss(t64(a), t64(b))) - 0.52927) < 1e-4
        assert abs(val(idr_loss(t64(x), t64(x)))) < 1e-6


@pytest.mark.parametrize("h,w", [(16, 16), (11, 11), (24, 13), (32, 20)])
def test_ssim_matches_skimage(h, w):
    rng = np.random.default_rng(h * w)
    x, y = rng.uniform(0, 1, (h, w)), rng.uniform(0, 1, (h, w))
    y = 0.6 * x + 0.4 * y
    want = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False)
    assert abs(ssim_metric(x, y) - want) < 1e-6


@pytest.mark.parametrize("h,w", [(5, 5), (4, 9), (7, 3), (12, 12)])
def test_ssim_matches_window_sums_including_cropped(h, w):
    rng = np.random.default_rng(h + 10 * w)
    x, y = rng.uniform(0, 1, (h, w)), rng.uniform(0, 1, (h, w))
    assert abs(ssim_metric(x, y) - naive.ssim_map_mean(x, y)) < 1e-9


def test_ssim_is_symmetric_and_batch_averaged():
    rng = np.random.default_rng(2)
    x, y = rng.uniform(0, 1, (3, 1, 14, 14)), rng.uniform(0, 1, (3, 1, 14, 14))
    with precision("float64"):
        a, b = val(ssim(t64(x), t64(y))), val(ssim(t64(y), t64(x)))
    assert abs(a - b) < 1e-12
    per = [naive.ssim_map_mean(x[i, 0], y[i, 0]) for i in range(3)]
    assert abs(a - sum(per) / 3) < 1e-9


def test_ssim_rejects_multichannel():
    with pytest.raises(DimensionError):
        ssim(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((1, 2, 8, 8))))


# ---------------------------------------------------------------------------
# total loss


def test_total_loss_matches_term_oracle():
    rng = np.random.default_rng(3)
    g = (rng.random((2, 1, 16, 16)) > 0.5).astype(float)
    preds = [rng.uniform(0.01, 0.99, g.shape) for _ in range(5)]
    dr, dg = rng.uniform(0, 1, g.shape), rng.uniform(0, 1, g.shape)
    with precision("float64"):
        out = total_loss([t64(p) for p in preds], t64(g), t64(dr), t64(dg))
    sal = [naive.bce(p, g) + naive.dice(p, g) for p in preds]
    ssim_ref = np.mean([naive.ssim_map_mean(dr[i, 0], dg[i, 0]) for i in range(2)])
    want = sum(sal) + 0.3 * (1 - ssim_ref)
    assert abs(val(out.total) - want) < 1e-9
    np.testing.assert_allclose(out.saliency, sal, rtol=0, atol=1e-9)
    assert abs(out.idr - (1 - ssim_ref)) < 1e-9
    assert abs(out.loss_sal - sum(sal)) < 1e-9


def test_total_loss_lambda_zero_is_saliency_sum():
    rng = np.random.default_rng(4)
    g = (rng.random((1, 1, 12, 12)) > 0.5).astype(float)
    preds = [t64(rng.uniform(0.01, 0.99, g.shape)) for _ in range(5)]
    dr, dg = t64(rng.uniform(0, 1, g.shape)), t64(rng.uniform(0, 1, g.shape))
    with precision("float64"):
        out = total_loss(preds, t64(g), dr, dg, LossConfig(lam=0.0))
        bare = total_loss(preds, t64(g), None, None, LossConfig(lam=0.0))
    assert val(out.total) == pytest.approx(sum(out.saliency), abs=1e-12)
    assert val(bare.total) == val(out.total)
    assert out.idr is not None and bare.idr is None


def test_total_loss_needs_depth_when_lambda_positive():
    g = Tensor(np.zeros((1, 1, 8, 8)))
    with pytest.raises(ValueError):
        total_loss([g] * 5, g, None, None)


def test_total_loss_perfect_prediction():
    rng = np.random.default_rng(5)
    g = (rng.random((2, 1, 16, 16)) > 0.5).astype(float)
    d = rng.uniform(0, 1, g.shape)
    with precision("float64"):
        out = total_loss([t64(g)] * 5, t64(g), t64(d), t64(d))
    assert val(out.total) <= 1e-5


# ---------------------------------------------------------------------------
# loss properties


unit_maps = arrays(np.float64, (1, 1, 6, 6), elements=st.floats(0, 1))
masks = arrays(np.float64, (1, 1, 6, 6), elements=st.sampled_from([0.0, 1.0]))


@settings(max_examples=60, deadline=None)
@given(p=unit_maps, g=masks, d=unit_maps)
def test_losses_are_bounded(p, g, d):
    with precision("float64"):
        assert val(bce_loss(t64(p), t64(g))) >= 0
        assert 0 <= val(dice_loss(t64(p), t64(g))) <= 1
        li = val(idr_loss(t64(p), t64(d)))
    assert -1e-12 <= li <= 2


def test_bce_is_not_symmetric():
    q = np.linspace(0, 1, 16).reshape(1, 1, 4, 4)
    h = (q > 0.7).astype(float)
    with precision("float64"):
        assert abs(val(bce_loss(t64(q), t64(h))) - val(bce_loss(t64(h), t64(q)))) > 1e-2


def test_dice_formula_is_symmetric():
    # 1 - (2*sum(PG) + eps) / (sum(P) + sum(G) + eps) is unchanged by swapping P and G
    rng = np.random.default_rng(11)
    q, h = rng.uniform(0, 1, (2, 1, 5, 5)), (rng.random((2, 1, 5, 5)) > 0.5).astype(float)
    with precision("float64"):
        assert abs(val(dice_loss(t64(q), t64(h))) - val(dice_loss(t64(h), t64(q)))) < 1e-12


# ---------------------------------------------------------------------------
# F-measure


def test_thresholds():
    assert len(THRESHOLDS) == N_THRESHOLDS == 255
    assert THRESHOLDS[0] == 1 / 256 and THRESHOLDS[-1] == 255 / 256
    assert np.all(np.diff(THRESHOLDS) > 0)


def test_curve_perfect_prediction():
    g = (np.random.default_rng(6).random((8, 8)) > 0.5).astype(float)
    c = f_measure_curve([g], [g])
    np.testing.assert_array_equal(c.precision, 1.0)
    np.testing.assert_array_equal(c.recall, 1.0)
    assert f_beta_max(c) == 1.0


def test_curve_all_ones_prediction():
    g = np.zeros((4, 4))
    g[:2] = 1
    c = f_measure_curve([np.ones((4, 4))], [g])
    np.testing.assert_array_equal(c.precision, 0.5)
    np.testing.assert_array_equal(c.recall, 1.0)
    assert abs(f_beta_max(c) - 0.65 / 1.15) < 1e-12
    assert abs(f_beta_max(c) - 0.5652) < 1e-4


def test_curve_two_by_two_example():
    p = np.array([[0.9, 0.6], [0.4, 0.1]])
    g = np.array([[1, 1], [0, 0]])
    c = f_measure_curve([p], [g])
    i5 = np.searchsorted(THRESHOLDS, 0.5)
    i3 = np.searchsorted(THRESHOLDS, 0.3)
    assert THRESHOLDS[i5] >= 0.5 and THRESHOLDS[i5 - 1] < 0.5
    assert c.precision[i5] == 1 and c.recall[i5] == 1
    assert abs(c.precision[i3] - 2 / 3) < 1e-12 and c.recall[i3] == 1
    for k, t in enumerate(THRESHOLDS):
        pr, rc = naive.precision_recall(p, g, t)
        assert (c.precision[k], c.recall[k]) == pytest.approx((pr, rc), abs=1e-12)


def test_curve_matches_counting_oracle_on_datasets():
    rng = np.random.default_rng(7)
    preds = [rng.uniform(0, 1, (6, 7)) for _ in range(4)]
    gts = [(rng.random((6, 7)) > 0.6).astype(float) for _ in range(4)]
    gts[2][:] = 0                                   # empty mask: recall 1 by convention
    preds[3][:] = 0.0                               # empty binarization: precision 0
    c = f_measure_curve(preds, gts)
    for k in range(0, 255, 17):
        pr = [naive.precision_recall(p, g, THRESHOLDS[k]) for p, g in zip(preds, gts)]
        assert c.precision[k] == pytest.approx(np.mean([a for a, _ in pr]), abs=1e-12)
        assert c.recall[k] == pytest.approx(np.mean([b for _, b in pr]), abs=1e-12)


def test_curve_needs_images():
    with pytest.raises(ValueError):
        f_measure_curve([], [])


def test_f_beta_max_beta_convention():
    c = PrecisionRecallCurve(THRESHOLDS, np.full(255, 0.5), np.ones(255))
    assert f_beta_max(c) == pytest.approx(0.65 / 1.15)
    # beta itself = 0.3, i.e. beta^2 = 0.09
    assert f_beta_max(c, 0.3, beta_is_squared=False) == pytest.approx(1.09 * 0.5 / (0.09 * 0.5 + 1))
    zero = PrecisionRecallCurve(THRESHOLDS, np.zeros(255), np.zeros(255))
    assert f_beta_max(zero) == 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**20), power=st.floats(0.2, 5.0))
def test_f_beta_max_invariant_under_order_preserving_rescale(seed, power):
    rng = np.random.default_rng(seed)
    # u -> u**power is strictly increasing and keeps each value inside its threshold bin,
    # so no binarization changes
    bins = rng.integers(0, 256, (2, 5, 5))
    u = rng.uniform(0.001, 0.999, bins.shape)
    preds, moved = (bins + u) / 256, (bins + u ** power) / 256
    gts = (rng.random((2, 5, 5)) > 0.5).astype(float)
    a = f_beta_max(f_measure_curve(list(preds), list(gts)))
    b = f_beta_max(f_measure_curve(list(moved), list(gts)))
    assert a == b


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**20), n=st.integers(1, 4))
def test_metric_ranges(seed, n):
    rng = np.random.default_rng(seed)
    preds = [rng.uniform(0, 1, (5, 6)) for _ in range(n)]
    gts = [(rng.random((5, 6)) > rng.random()).astype(float) for _ in range(n)]
    f = f_beta_max(f_measure_curve(preds, gts))
    m = mae(preds, gts)
    assert 0 <= f <= 1 and 0 <= m <= 1
    assert m == pytest.approx(mae(gts, preds), abs=1e-15)


# ---------------------------------------------------------------------------
# MAE, PSNR, report


def test_mae_examples():
    g = np.zeros((3, 3))
    assert mae(g, g) == 0.0
    assert mae(np.ones((3, 3)), g) == 1.0
    assert mae(np.array([0.25, 0.75]), np.array([0.0, 1.0])) == 0.25
    # per image, then averaged
    assert mae([np.zeros(2), np.ones(8)], [np.ones(2), np.ones(8)]) == 0.5
    with pytest.raises(ValueError):
        mae([np.zeros(2)], [np.zeros(3)])


def test_psnr_examples():
    x = np.random.default_rng(8).uniform(0, 1, (8, 8))
    assert psnr(x, x) == 99.0
    assert psnr(np.full((4, 4), 0.6), np.full((4, 4), 0.5)) == pytest.approx(20.0, abs=1e-9)


def test_ssim_metric_is_symmetric():
    rng = np.random.default_rng(9)
    x, y = rng.uniform(0, 1, (13, 13)), rng.uniform(0, 1, (13, 13))
    assert ssim_metric(x, y) == pytest.approx(ssim_metric(y, x), abs=1e-14)


def test_report_schema():
    rng = np.random.default_rng(10)
    preds = [rng.uniform(0, 1, (8, 8)) for _ in range(3)]
    gts = [(p > 0.5).astype(float) for p in preds]
    pairs = [(p, p) for p in preds]
    r = evaluate(preds, gts, "toy", depth_pairs=pairs)
    assert isinstance(r, MetricsReport)
    d = r.to_dict()
    assert set(d) == {"dataset", "num_images", "f_beta_max", "mae", "psnr", "ssim", "curve"}
    assert d["num_images"] == 3 and d["psnr"] == 99.0 and d["ssim"] == pytest.approx(1.0)
    assert len(d["curve"]) == 255 and set(d["curve"][0]) == {"t", "precision", "recall"}
    plain = evaluate(preds, gts).to_dict()
    assert "psnr" not in plain and "ssim" not in plain
