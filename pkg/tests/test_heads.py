import math

import numpy as np
import pytest

from mono3d import tensor as T
from mono3d.errors import DegenerateGeometryError, UsageError
from mono3d.heads import (
    CLASS_PRIORS,
    NUM_ANGLE_BINS,
    Detection2D,
    Heads2D,
    Heads3D,
    Heads3DOutput,
    decode_angle,
    decode_box3d,
    decode_heatmap_peaks,
    encode_angle,
    gup_depth,
    roi_crop,
    suppress_non_peaks,
    wrap_angle,
)
from mono3d.kitti import CameraCalib
from mono3d.tensor import Tensor


def _zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


# ---------------------------------------------------------------------------
# 2D heads
# ---------------------------------------------------------------------------


def test_heads2d_zero_weights():
    heads = Heads2D(8, 3, np.random.default_rng(0))
    _zero_params(heads)
    out = heads(Tensor(np.random.default_rng(1).normal(size=(1, 8, 4, 6))))
    assert np.allclose(out.heatmap.data, 0.5)
    assert np.array_equal(out.offset2d.data, np.zeros((1, 2, 4, 6)))
    assert np.array_equal(out.size2d.data, np.zeros((1, 2, 4, 6)))


def test_heads2d_focal_bias_init():
    heads = Heads2D(8, 3, np.random.default_rng(2))
    out = heads(Tensor(np.zeros((1, 8, 4, 4))))
    # zero input isolates the init bias: sigmoid(-2.19) ~ 0.1
    assert np.allclose(out.heatmap.data, 1.0 / (1.0 + math.exp(2.19)))
    assert abs(out.heatmap.data[0, 0, 0, 0] - 0.1) < 2e-3


def test_heads2d_range_and_shapes():
    heads = Heads2D(8, 3, np.random.default_rng(3))
    out = heads(Tensor(np.random.default_rng(4).normal(size=(2, 8, 5, 7))))
    assert out.heatmap.shape == (2, 3, 5, 7)
    assert out.offset2d.shape == (2, 2, 5, 7)
    assert out.size2d.shape == (2, 2, 5, 7)
    assert np.all(out.heatmap.data > 0) and np.all(out.heatmap.data < 1)


@pytest.mark.parametrize("head_name", ["heat", "offset", "size"])
def test_heads2d_grad_check(head_name):
    heads = Heads2D(4, 3, np.random.default_rng(5))
    x = Tensor(np.random.default_rng(6).normal(size=(1, 4, 4, 4)), requires_grad=True)
    probe = {"heat": 3, "offset": 2, "size": 2}[head_name]
    r = Tensor(np.random.default_rng(7).normal(size=(1, probe, 4, 4)))

    def f(t):
        out = heads(t)
        field = {"heat": out.heatmap, "offset": out.offset2d, "size": out.size2d}[head_name]
        return T.sum_(field * r)

    assert T.grad_check(f, x, max_entries=24, rng=np.random.default_rng(8)) < 1e-4


# ---------------------------------------------------------------------------
# peak decoding
# ---------------------------------------------------------------------------


def _dense(c=1, h=6, w=8, fill=0.0):
    return np.full((c, h, w), fill), np.zeros((2, h, w)), np.zeros((2, h, w))


def test_decode_single_spike():
    hm, off, size = _dense()
    hm[0, 2, 5] = 1.0
    size[0, 2, 5] = 20.0
    size[1, 2, 5] = 12.0
    dets = decode_heatmap_peaks(hm, off, size, k=10, threshold=0.1)
    assert len(dets) == 1
    d = dets[0]
    assert d.class_id == 0 and d.score == 1.0
    # cell (row 2, col 5), zero offset -> input pixel (u, v) = (4*5, 4*2)
    assert d.center == (20.0, 8.0)
    assert d.size == (20.0, 12.0)


def test_decode_offset_applied():
    hm, off, size = _dense()
    hm[0, 2, 5] = 0.8
    off[0, 2, 5] = 0.25
    off[1, 2, 5] = 0.5
    dets = decode_heatmap_peaks(hm, off, size, k=5, threshold=0.1)
    assert dets[0].center == ((5 + 0.25) * 4, (2 + 0.5) * 4)


def test_decode_adjacent_suppression():
    hm, off, size = _dense()
    hm[0, 3, 3] = 0.9
    hm[0, 3, 4] = 0.8
    dets = decode_heatmap_peaks(hm, off, size, k=10, threshold=0.1)
    assert len(dets) == 1
    assert dets[0].score == 0.9


def test_decode_equal_ties_kept():
    hm, off, size = _dense()
    hm[0, 3, 3] = 0.9
    hm[0, 3, 4] = 0.9
    dets = decode_heatmap_peaks(hm, off, size, k=10, threshold=0.1)
    assert len(dets) == 2
    assert {(d.center) for d in dets} == {(12.0, 12.0), (16.0, 12.0)}


def test_decode_uniform_below_threshold_empty():
    hm, off, size = _dense(fill=0.3)
    assert decode_heatmap_peaks(hm, off, size, k=10, threshold=0.5) == []


def test_decode_topk_and_order():
    hm, off, size = _dense(h=10, w=10)
    rng = np.random.default_rng(9)
    rows = np.arange(0, 10, 3)
    cols = np.arange(0, 10, 3)
    scores = rng.uniform(0.2, 1.0, (len(rows), len(cols)))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            hm[0, r, c] = scores[i, j]
    dets = decode_heatmap_peaks(hm, off, size, k=5, threshold=0.0)
    assert len(dets) == 5
    got = [d.score for d in dets]
    assert got == sorted(got, reverse=True)
    assert np.allclose(got, np.sort(scores.reshape(-1))[::-1][:5])


def test_decode_multiclass_channel_mapping():
    hm, off, size = _dense(c=3)
    hm[2, 1, 1] = 0.7
    dets = decode_heatmap_peaks(hm, off, size, k=3, threshold=0.2)
    assert len(dets) == 1 and dets[0].class_id == 2


def test_decode_validation():
    hm, off, size = _dense()
    with pytest.raises(UsageError):
        decode_heatmap_peaks(hm, off, size, k=0)
    with pytest.raises(UsageError):
        decode_heatmap_peaks(hm, off, size, k=3, threshold=1.0)


def test_suppression_keeps_plateau_cells():
    hm = np.zeros((1, 4, 4))
    hm[0, 1, 1] = hm[0, 1, 2] = 0.6
    kept = suppress_non_peaks(hm)
    assert kept[0, 1, 1] == 0.6 and kept[0, 1, 2] == 0.6


# ---------------------------------------------------------------------------
# RoI crop
# ---------------------------------------------------------------------------


def test_roi_whole_map_identity():
    rng = np.random.default_rng(10)
    fmap = rng.normal(size=(1, 3, 7, 7))
    # box spanning the full 7x7 map in input pixels (28x28 box centered at 14)
    box = Detection2D(0, 1.0, (14.0, 14.0), (28.0, 28.0))
    out = roi_crop(Tensor(fmap), box, out_size=(7, 7))
    assert np.max(np.abs(out.data - fmap[0])) < 1e-12


def test_roi_constant_map():
    fmap = np.full((1, 2, 6, 6), 3.25)
    box = Detection2D(0, 1.0, (9.0, 13.0), (6.0, 9.0))
    out = roi_crop(Tensor(fmap), box, out_size=(5, 5))
    assert np.allclose(out.data, 3.25, atol=1e-12)


def test_roi_half_pixel_ramp_shift():
    # ramp f[y][x] = x in feature coords; shifting the box by half a feature
    # pixel (2 input px) must shift every sample by exactly 0.5
    fmap = np.tile(np.arange(16.0), (1, 1, 16, 1))
    base = Detection2D(0, 1.0, (24.0, 32.0), (16.0, 16.0))
    shifted = Detection2D(0, 1.0, (26.0, 32.0), (16.0, 16.0))
    a = roi_crop(Tensor(fmap), base, out_size=(4, 4)).data
    b = roi_crop(Tensor(fmap), shifted, out_size=(4, 4)).data
    assert np.max(np.abs((b - a) - 0.5)) < 1e-12


def test_roi_zero_area_rejected():
    fmap = Tensor(np.zeros((1, 2, 6, 6)))
    with pytest.raises(DegenerateGeometryError):
        roi_crop(fmap, Detection2D(0, 1.0, (-40.0, 12.0), (8.0, 8.0)))
    with pytest.raises(DegenerateGeometryError):
        roi_crop(fmap, Detection2D(0, 1.0, (12.0, 12.0), (0.0, 8.0)))


def test_roi_grad_check():
    feat = Tensor(np.random.default_rng(11).normal(size=(1, 2, 8, 8)), requires_grad=True)
    probe = Tensor(np.random.default_rng(12).normal(size=(2, 7, 7)))
    box = Detection2D(0, 1.0, (13.0, 17.0), (14.0, 10.0))

    def f(t):
        return T.sum_(roi_crop(t, box) * probe)

    assert T.grad_check(f, feat, max_entries=30, rng=np.random.default_rng(13)) < 1e-4


# ---------------------------------------------------------------------------
# 3D heads
# ---------------------------------------------------------------------------


def test_heads3d_shapes():
    heads = Heads3D(8, 3, np.random.default_rng(14))
    out = heads(Tensor(np.random.default_rng(15).normal(size=(5, 8, 7, 7))))
    assert out.offset3d.shape == (5, 2)
    assert out.angle_logits.shape == (5, NUM_ANGLE_BINS)
    assert out.angle_residuals.shape == (5, NUM_ANGLE_BINS)
    assert out.size_residuals.shape == (5, 3, 3)
    assert out.h_log_sigma.shape == (5,)
    assert out.bias_mu.shape == (5,)


def test_heads3d_single_roi_promoted():
    heads = Heads3D(8, 3, np.random.default_rng(16))
    out = heads(Tensor(np.random.default_rng(17).normal(size=(8, 7, 7))))
    assert out.offset3d.shape == (1, 2)


def test_heads3d_zero_weights_give_priors_and_uniform_bins():
    heads = Heads3D(8, 3, np.random.default_rng(18))
    _zero_params(heads)
    out = heads(Tensor(np.random.default_rng(19).normal(size=(2, 8, 7, 7))))
    assert np.array_equal(out.size_residuals.data, np.zeros((2, 3, 3)))
    assert np.array_equal(out.angle_logits.data, np.zeros((2, NUM_ANGLE_BINS)))
    probs = T.softmax_lastdim(out.angle_logits).data
    assert np.allclose(probs, 1.0 / NUM_ANGLE_BINS)


def test_heads3d_grad_check():
    heads = Heads3D(4, 3, np.random.default_rng(20))
    roi = Tensor(np.random.default_rng(21).normal(size=(2, 4, 7, 7)), requires_grad=True)
    rngp = np.random.default_rng(22)
    probes = [Tensor(rngp.normal(size=s)) for s in [(2, 2), (2, 12), (2, 12), (2, 3, 3), (2,), (2,), (2,)]]

    def f(t):
        o = heads(t)
        fields = [o.offset3d, o.angle_logits, o.angle_residuals, o.size_residuals,
                  o.h_log_sigma, o.bias_mu, o.bias_log_sigma]
        total = T.sum_(fields[0] * probes[0])
        for fld, p in zip(fields[1:], probes[1:]):
            total = total + T.sum_(fld * p)
        return total

    assert T.grad_check(f, roi, max_entries=24, rng=np.random.default_rng(23)) < 1e-4


# ---------------------------------------------------------------------------
# GUP depth
# ---------------------------------------------------------------------------


def test_gup_depth_arithmetic():
    mu, sigma = gup_depth(1.4, 0.0, 70.0, 700.0, 0.0, 0.0)
    assert mu == 14.0
    assert sigma == 0.0


def test_gup_depth_sigma_propagation():
    mu, sigma = gup_depth(1.4, 0.1, 70.0, 700.0, 0.0, 1.0)
    assert abs(sigma - math.sqrt(2.0)) < 1e-15


def test_gup_depth_machine_precision_formula():
    rng = np.random.default_rng(24)
    for _ in range(200):
        h3 = rng.uniform(0.5, 3.0)
        s3 = rng.uniform(0.0, 0.5)
        h2 = rng.uniform(2.0, 300.0)
        f = rng.uniform(100.0, 1500.0)
        bm = rng.uniform(-2.0, 2.0)
        bs = rng.uniform(0.0, 2.0)
        mu, sigma = gup_depth(h3, s3, h2, f, bm, bs)
        assert mu == f / h2 * h3 + bm or abs(mu - (f * h3 / h2 + bm)) < 1e-12
        assert abs(sigma - math.hypot(f * s3 / h2, bs)) < 1e-12


def test_gup_depth_monotonicity():
    rng = np.random.default_rng(25)
    for _ in range(100):
        h3 = rng.uniform(0.5, 3.0)
        h2 = rng.uniform(5.0, 300.0)
        f = rng.uniform(100.0, 1500.0)
        base, _ = gup_depth(h3, 0.0, h2, f, 0.0, 0.0)
        up, _ = gup_depth(h3 + 0.1, 0.0, h2, f, 0.0, 0.0)
        wider, _ = gup_depth(h3, 0.0, h2 + 5.0, f, 0.0, 0.0)
        assert up > base
        assert wider < base


def test_gup_depth_tensor_path_differentiable():
    h3 = Tensor(np.array([1.5]), requires_grad=True)

    def f(t):
        mu, sigma = gup_depth(t, t * 0.1, 50.0, 700.0, Tensor(np.array([0.3])), 0.5)
        return T.sum_(mu + sigma)

    assert T.grad_check(f, h3) < 1e-4


def test_gup_depth_degenerate_h2d():
    with pytest.raises(DegenerateGeometryError):
        gup_depth(1.5, 0.1, 0.0, 700.0, 0.0, 0.0)
    with pytest.raises(DegenerateGeometryError):
        gup_depth(1.5, 0.1, -3.0, 700.0, 0.0, 0.0)
    with pytest.raises(UsageError):
        gup_depth(1.5, 0.1, 70.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# angles
# ---------------------------------------------------------------------------


def test_wrap_angle_interval():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert abs(wrap_angle(1.5 * math.pi) + 0.5 * math.pi) < 1e-12
    rng = np.random.default_rng(26)
    for a in rng.uniform(-20, 20, 500):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert abs(math.sin(w - a)) < 1e-9


def test_angle_encode_decode_round_trip():
    rng = np.random.default_rng(27)
    for a in rng.uniform(-math.pi, math.pi, 1000):
        b, res = encode_angle(a)
        assert 0 <= b < NUM_ANGLE_BINS
        assert abs(res) <= math.pi / NUM_ANGLE_BINS + 1e-12
        assert abs(decode_angle(b, res) - wrap_angle(a)) < 1e-12


def test_angle_bin_boundary():
    b, res = encode_angle(math.pi)
    assert b == NUM_ANGLE_BINS - 1
    assert abs(decode_angle(b, res) - math.pi) < 1e-12


# ---------------------------------------------------------------------------
# 3D decode
# ---------------------------------------------------------------------------


def _out3d_from_values(offset=(0.0, 0.0), bin_idx=0, residual=0.0, size_res=None,
                       h_log_sigma=0.0, bias_mu=0.0, bias_log_sigma=-30.0):
    logits = np.full((1, NUM_ANGLE_BINS), -5.0)
    logits[0, bin_idx] = 5.0
    residuals = np.zeros((1, NUM_ANGLE_BINS))
    residuals[0, bin_idx] = residual
    return Heads3DOutput(
        offset3d=Tensor(np.array([offset])),
        angle_logits=Tensor(logits),
        angle_residuals=Tensor(residuals),
        size_residuals=Tensor(np.zeros((1, 3, 3)) if size_res is None else size_res),
        h_log_sigma=Tensor(np.array([h_log_sigma])),
        bias_mu=Tensor(np.array([bias_mu])),
        bias_log_sigma=Tensor(np.array([bias_log_sigma])),
    )


def _calib():
    return CameraCalib(np.array([[700.0, 0, 620, 0], [0, 700.0, 190, 0], [0, 0, 1, 0]]))


def test_decode_box3d_pinhole_identity():
    calib = _calib()
    prior_h = CLASS_PRIORS[0, 0]
    h2d = 70.0
    det = Detection2D(0, 0.9, (calib.c_u, calib.c_v), (100.0, h2d))
    out = _out3d_from_values(h_log_sigma=-30.0)
    d = decode_box3d(det, out, calib)
    x, y, z = d.location
    assert abs(x) < 1e-12
    expected_z = 700.0 * prior_h / h2d
    assert abs(z - expected_z) < 1e-12
    # principal ray: y = h/2 above.. the ray passes through box center
    assert abs(y - prior_h / 2.0) < 1e-12
    assert d.dimensions == tuple(CLASS_PRIORS[0])


def test_decode_box3d_yaw_zero_case():
    calib = _calib()
    det = Detection2D(0, 0.9, (calib.c_u, calib.c_v), (100.0, 70.0))
    bin_idx, res = encode_angle(0.0)
    d = decode_box3d(det, _out3d_from_values(bin_idx=bin_idx, residual=res), calib)
    assert abs(d.yaw - 0.0) < 1e-12


def test_decode_box3d_score_uncertainty_discount():
    calib = _calib()
    det = Detection2D(0, 0.8, (calib.c_u, calib.c_v), (100.0, 70.0))
    d = decode_box3d(det, _out3d_from_values(h_log_sigma=-30.0, bias_log_sigma=-30.0), calib)
    assert abs(d.score - 0.8) < 1e-6
    d2 = decode_box3d(det, _out3d_from_values(h_log_sigma=-30.0, bias_log_sigma=0.0), calib)
    assert abs(d2.score - 0.8 * math.exp(-1.0)) < 1e-9


def test_decode_box3d_drops_degenerate_h2d():
    calib = _calib()
    det = Detection2D(0, 0.8, (100.0, 100.0), (40.0, 0.5))
    drops = {}
    assert decode_box3d(det, _out3d_from_values(), calib, drop_count=drops) is None
    assert drops["h2d_degenerate"] == 1


def test_decode_box3d_yaw_in_range():
    calib = _calib()
    rng = np.random.default_rng(28)
    for _ in range(50):
        u = rng.uniform(0, 1240)
        det = Detection2D(0, 0.5, (u, 200.0), (80.0, 60.0))
        bin_idx = int(rng.integers(0, NUM_ANGLE_BINS))
        res = rng.uniform(-0.25, 0.25)
        d = decode_box3d(det, _out3d_from_values(bin_idx=bin_idx, residual=res), calib)
        assert -math.pi < d.yaw <= math.pi
        assert d.location[2] > 0
