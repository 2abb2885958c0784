"""Detection heads on the stride-4 neck map.

2D side: three dense heads (per-class center heatmap, sub-cell center
offset, box size), peak decoding with 3x3 suppression. 3D side: RoI-
cropped features feed a shared conv trunk and small linear heads for the
projected-center offset, multi-bin heading, per-class size residuals
with height uncertainty, and a depth bias. Depth itself is not regressed
directly: it is projected from the estimated 3D height through the
camera geometry, with uncertainty propagated from the height and bias.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateGeometryError, DimensionError, UsageError
from .nn import Conv2d, Linear, Module
from .tensor import Tensor

CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")
# mean (h, w, l) per class in meters; standard KITTI training-split means
CLASS_PRIORS = np.array(
    [
        [1.52, 1.63, 3.88],
        [1.76, 0.66, 0.84],
        [1.73, 0.58, 1.77],
    ]
)
NUM_ANGLE_BINS = 12
OUTPUT_STRIDE = 4
ROI_SIZE = 7
HEATMAP_BIAS_INIT = -2.19  # sigmoid(-2.19) ~ 0.1, the usual focal-loss prior
MIN_H2D_PIXELS = 1.0


def wrap_angle(a):
    """Wrap to the half-open interval (-pi, pi]."""
    return a - 2.0 * math.pi * math.ceil((a - math.pi) / (2.0 * math.pi))


def angle_bin_centers():
    return -math.pi + (np.arange(NUM_ANGLE_BINS) + 0.5) * (2.0 * math.pi / NUM_ANGLE_BINS)


def encode_angle(alpha):
    """Observation angle -> (bin index, residual); exact round trip."""
    a = wrap_angle(alpha)
    width = 2.0 * math.pi / NUM_ANGLE_BINS
    b = min(int((a + math.pi) // width), NUM_ANGLE_BINS - 1)
    center = -math.pi + (b + 0.5) * width
    return b, a - center


def decode_angle(bin_idx, residual):
    width = 2.0 * math.pi / NUM_ANGLE_BINS
    return wrap_angle(-math.pi + (bin_idx + 0.5) * width + residual)


@dataclass
class Heads2DOutput:
    heatmap: Tensor  # [N, C_cls, h, w], post-sigmoid
    offset2d: Tensor  # [N, 2, h, w], output-map pixels
    size2d: Tensor  # [N, 2, h, w], input-image pixels (w, h)


@dataclass
class Detection2D:
    class_id: int
    score: float
    center: tuple  # (u, v) input-image pixels
    size: tuple  # (w_2d, h_2d) input-image pixels


@dataclass
class Heads3DOutput:
    offset3d: Tensor  # [M, 2] pixels
    angle_logits: Tensor  # [M, B]
    angle_residuals: Tensor  # [M, B] radians
    size_residuals: Tensor  # [M, C_cls, 3] meters, added to CLASS_PRIORS
    h_log_sigma: Tensor  # [M] log-sigma for the decoded 3D height
    bias_mu: Tensor  # [M] depth bias, meters
    bias_log_sigma: Tensor  # [M]


@dataclass
class Detection3D:
    class_id: int
    score: float
    location: tuple  # (x, y, z) camera-frame meters, y at bottom-center
    dimensions: tuple  # (h, w, l) meters
    yaw: float  # r_y, radians in (-pi, pi]
    depth_sigma: float  # meters


class DenseHead(Module):
    """3x3 conv + ReLU + 1x1 conv."""

    def __init__(self, in_ch, mid_ch, out_ch, rng, bias_init=0.0):
        self.conv1 = Conv2d(in_ch, mid_ch, 3, rng, padding=1)
        self.conv2 = Conv2d(mid_ch, out_ch, 1, rng)
        self.conv2.bias.data[:] = bias_init

    def __call__(self, x):
        return self.conv2(T.relu(self.conv1(x)))


class Heads2D(Module):
    def __init__(self, in_ch, num_classes, rng, mid_ch=64):
        self.heat = DenseHead(in_ch, mid_ch, num_classes, rng, bias_init=HEATMAP_BIAS_INIT)
        self.offset = DenseHead(in_ch, mid_ch, 2, rng)
        self.size = DenseHead(in_ch, mid_ch, 2, rng)

    def __call__(self, feat):
        return Heads2DOutput(
            heatmap=T.sigmoid(self.heat(feat)),
            offset2d=self.offset(feat),
            size2d=self.size(feat),
        )


def suppress_non_peaks(heatmap):
    """Zero cells that are not 3x3-neighborhood maxima (ties kept)."""
    hm = heatmap.data if isinstance(heatmap, Tensor) else heatmap
    pad = np.pad(hm, [(0, 0)] * (hm.ndim - 2) + [(1, 1), (1, 1)], constant_values=-np.inf)
    windows = np.stack(
        [
            pad[..., di : di + hm.shape[-2], dj : dj + hm.shape[-1]]
            for di in range(3)
            for dj in range(3)
        ]
    )
    keep = hm >= windows.max(axis=0)
    return np.where(keep, hm, 0.0)


def decode_heatmap_peaks(heatmap, offset2d, size2d, k=50, threshold=0.0):
    """Peaks of a single-image heatmap [C, h, w] -> Detection2D list.

    Survivors of 3x3 suppression above threshold, top-k by score with ties
    broken by flat (class, row, col) index; centers are (cell + offset)
    scaled by the output stride, with (u, v) = (x, y) pixel ordering.
    """
    if k < 1:
        raise UsageError("k must be >= 1")
    if not (0.0 <= threshold < 1.0):
        raise UsageError("threshold must lie in [0, 1)")
    hm = heatmap.data if isinstance(heatmap, Tensor) else np.asarray(heatmap)
    off = offset2d.data if isinstance(offset2d, Tensor) else np.asarray(offset2d)
    size = size2d.data if isinstance(size2d, Tensor) else np.asarray(size2d)
    if hm.ndim != 3:
        raise DimensionError(f"expected [C, h, w] heatmap, got shape {hm.shape}")

    peaks = suppress_non_peaks(hm)
    flat = peaks.reshape(-1)
    order = np.argsort(-flat, kind="stable")[:k]
    dets = []
    for idx in order:
        score = float(flat[idx])
        if score <= threshold or score <= 0.0:
            break
        cls, rem = divmod(int(idx), hm.shape[1] * hm.shape[2])
        row, col = divmod(rem, hm.shape[2])
        u = (col + float(off[0, row, col])) * OUTPUT_STRIDE
        v = (row + float(off[1, row, col])) * OUTPUT_STRIDE
        w2d = float(size[0, row, col])
        h2d = float(size[1, row, col])
        dets.append(Detection2D(class_id=cls, score=score, center=(u, v), size=(w2d, h2d)))
    return dets


def roi_crop(feat, box2d, out_size=(ROI_SIZE, ROI_SIZE), image_index=0):
    """RoI-aligned bilinear crop of a 2D box from the stride-4 map.

    The box (input pixels) maps to feature coords at 1/stride; r x r
    half-pixel sample centers span it: x = x1 + (j + 0.5) * bw / r - 0.5
    in array index space, clamped at borders. Differentiable w.r.t. feat.
    """
    if feat.ndim != 4:
        raise DimensionError(f"expected [N, C, h, w] features, got {feat.shape}")
    h, w = feat.shape[2], feat.shape[3]
    ry, rx = out_size
    u, v = box2d.center
    bw, bh = box2d.size
    x1 = max((u - bw / 2.0) / OUTPUT_STRIDE, 0.0)
    x2 = min((u + bw / 2.0) / OUTPUT_STRIDE, float(w))
    y1 = max((v - bh / 2.0) / OUTPUT_STRIDE, 0.0)
    y2 = min((v + bh / 2.0) / OUTPUT_STRIDE, float(h))
    if x2 - x1 <= 0.0 or y2 - y1 <= 0.0:
        raise DegenerateGeometryError(
            f"box {box2d.center}+-{box2d.size} has no area inside the {h}x{w} map"
        )
    ys = y1 + (np.arange(ry) + 0.5) * (y2 - y1) / ry - 0.5
    xs = x1 + (np.arange(rx) + 0.5) * (x2 - x1) / rx - 0.5
    return T.sample_bilinear_grid(feat, ys, xs)[image_index]


class Heads3D(Module):
    """Shared conv trunk over [M, C, r, r] RoIs, then pooled linear heads."""

    def __init__(self, in_ch, num_classes, rng, mid_ch=64):
        self.trunk = Conv2d(in_ch, mid_ch, 3, rng, padding=1)
        self.num_classes = num_classes
        self.fc_offset = Linear(mid_ch, 2, rng)
        self.fc_angle = Linear(mid_ch, 2 * NUM_ANGLE_BINS, rng)
        self.fc_size = Linear(mid_ch, 3 * num_classes + 1, rng)
        self.fc_bias = Linear(mid_ch, 2, rng)

    def __call__(self, rois):
        if rois.ndim == 3:
            rois = T.reshape(rois, (1,) + rois.shape)
        if rois.ndim != 4:
            raise DimensionError(f"expected [M, C, r, r] RoIs, got {rois.shape}")
        m = rois.shape[0]
        x = T.relu(self.trunk(rois))
        pooled = T.mean(T.reshape(x, (m, x.shape[1], -1)), axis=-1)
        ang = self.fc_angle(pooled)
        size = self.fc_size(pooled)
        bias = self.fc_bias(pooled)
        return Heads3DOutput(
            offset3d=self.fc_offset(pooled),
            angle_logits=ang[:, :NUM_ANGLE_BINS],
            angle_residuals=ang[:, NUM_ANGLE_BINS:],
            size_residuals=T.reshape(size[:, : 3 * self.num_classes], (m, self.num_classes, 3)),
            h_log_sigma=size[:, 3 * self.num_classes],
            bias_mu=bias[:, 0],
            bias_log_sigma=bias[:, 1],
        )


def gup_depth(h3d_mu, h3d_sigma, h2d, f, bias_mu, bias_sigma):
    """Project depth from heights: mu = f*h3d/h2d + bias, with propagated
    sigma = sqrt((f*h3d_sigma/h2d)^2 + bias_sigma^2).

    Accepts floats or Tensors for the height/bias terms (h2d and f are
    plain geometry, never differentiated here; both may be arrays to
    project a batch of objects at once).
    """
    h2d = np.asarray(h2d, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if np.any(h2d <= 0.0):
        raise DegenerateGeometryError(f"2D height {h2d} px is not positive")
    if np.any(f <= 0.0):
        raise UsageError(f"focal length {f} must be positive")
    scale = f / h2d
    if isinstance(h3d_mu, Tensor) or isinstance(bias_mu, Tensor):
        depth_mu = h3d_mu * scale + bias_mu
        depth_sigma = T.sqrt((h3d_sigma * scale) ** 2.0 + bias_sigma**2.0)
        return depth_mu, depth_sigma
    depth_mu = np.asarray(h3d_mu, dtype=np.float64) * scale + bias_mu
    depth_sigma = np.sqrt((np.asarray(h3d_sigma, dtype=np.float64) * scale) ** 2 + np.asarray(bias_sigma, dtype=np.float64) ** 2)
    if depth_mu.ndim == 0:
        return float(depth_mu), float(depth_sigma)
    return depth_mu, depth_sigma


def decode_box3d(det2d, out3d, calib, roi_index=0, drop_count=None):
    """One Detection2D + 3D head outputs + calib -> Detection3D.

    Degenerate 2D heights (<= 1 px) return None and bump drop_count
    ["h2d_degenerate"] when a counter dict is supplied.
    """
    i = roi_index
    h2d = det2d.size[1]
    if h2d <= MIN_H2D_PIXELS:
        if drop_count is not None:
            drop_count["h2d_degenerate"] = drop_count.get("h2d_degenerate", 0) + 1
        return None
    off = out3d.offset3d.data[i]
    u = det2d.center[0] + float(off[0])
    v = det2d.center[1] + float(off[1])

    cls = det2d.class_id
    dims = CLASS_PRIORS[cls] + out3d.size_residuals.data[i, cls]
    h3d, w3d, l3d = (float(x) for x in dims)
    h_sigma = float(np.exp(out3d.h_log_sigma.data[i]))
    bias_mu = float(out3d.bias_mu.data[i])
    bias_sigma = float(np.exp(out3d.bias_log_sigma.data[i]))
    z, depth_sigma = gup_depth(h3d, h_sigma, h2d, calib.f_v, bias_mu, bias_sigma)
    if z <= 0.0:
        if drop_count is not None:
            drop_count["nonpositive_depth"] = drop_count.get("nonpositive_depth", 0) + 1
        return None

    x = (u - calib.c_u) * z / calib.f_u
    y = (v - calib.c_v) * z / calib.f_v + h3d / 2.0

    logits = out3d.angle_logits.data[i]
    b = int(np.argmax(logits))
    alpha = decode_angle(b, float(out3d.angle_residuals.data[i, b]))
    yaw = wrap_angle(alpha + math.atan2(x, z))
    score = det2d.score * math.exp(-depth_sigma)
    return Detection3D(
        class_id=cls,
        score=score,
        location=(x, y, z),
        dimensions=(h3d, w3d, l3d),
        yaw=yaw,
        depth_sigma=depth_sigma,
    )
