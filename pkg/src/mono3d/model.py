"""Full monocular 3D detector and its checkpoint format.

Assembles the attention-pyramid backbone, the top-down aggregation neck,
and the dense 2D / RoI 3D heads into one module; provides the nine named
training loss terms over a batch, single-image inference to Detection3D
lists, and a flat little-endian float32 checkpoint with a JSON sidecar
manifest mapping parameter names to (offset, shape).
"""

import json

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, backbone_config
from .errors import DegenerateGeometryError, DimensionError, UsageError
from .heads import (
    CLASS_NAMES,
    CLASS_PRIORS,
    MIN_H2D_PIXELS,
    Detection2D,
    Heads2D,
    Heads3D,
    decode_box3d,
    decode_heatmap_peaks,
    gup_depth,
    roi_crop,
)
from .losses import LOSS_TERMS, angle_loss, depth_loss, focal_loss, l1_masked, laplacian_nll
from .neck import Neck, NeckConfig
from .nn import Module
from .tensor import Tensor

CHECKPOINT_DTYPE = "<f4"
CHECKPOINT_FORMAT = "mono3d-flat-f32"


def _zero_scalar():
    return Tensor(np.zeros(()))


class Detector(Module):
    """Monocular image -> 3D boxes through one shared stride-4 feature map."""

    def __init__(self, variant="desk", use_attention=True, seed=0, num_classes=len(CLASS_NAMES)):
        if isinstance(variant, BackboneConfig):
            cfg = variant
        else:
            cfg = backbone_config(variant, use_attention)
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.variant = cfg.name
        self.use_attention = cfg.use_attention
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        neck_cfg = NeckConfig()
        self.backbone = Backbone(cfg, rng)
        self.neck = Neck([s.dim for s in cfg.stages], neck_cfg, rng)
        self.heads2d = Heads2D(neck_cfg.slice_channels, self.num_classes, rng)
        self.heads3d = Heads3D(neck_cfg.slice_channels, self.num_classes, rng)

    def features(self, images):
        """[N, 3, H, W] (or [3, H, W]) -> stride-4 feature map [N, 64, h, w]."""
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=np.float64))
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected [N, 3, H, W] images, got {images.shape}")
        return self.neck(self.backbone(images))

    def infer(self, image, calib, k=50, score_threshold=0.0):
        """One image -> (Detection3D list, drop-count dict), no gradients."""
        with T.no_grad():
            feat = self.features(image)
            if feat.shape[0] != 1:
                raise UsageError(f"infer takes a single image, got batch of {feat.shape[0]}")
            out2d = self.heads2d(feat)
            dets2d = decode_heatmap_peaks(
                out2d.heatmap.data[0],
                out2d.offset2d.data[0],
                out2d.size2d.data[0],
                k=k,
                threshold=score_threshold,
            )
            drops = {}
            dets3d = []
            for det in dets2d:
                if det.size[1] <= MIN_H2D_PIXELS:
                    drops["h2d_degenerate"] = drops.get("h2d_degenerate", 0) + 1
                    continue
                try:
                    roi = roi_crop(feat, det)
                except DegenerateGeometryError:
                    drops["roi_degenerate"] = drops.get("roi_degenerate", 0) + 1
                    continue
                out3d = self.heads3d(roi)
                det3d = decode_box3d(det, out3d, calib, roi_index=0, drop_count=drops)
                if det3d is not None:
                    dets3d.append(det3d)
        return dets3d, drops

    def loss_terms(self, images, targets, calibs):
        """Batch + per-image TargetMaps + calibs -> the nine scalar loss Tensors.

        The 2D terms are dense over the stacked maps; the 3D terms run the
        RoI head on ground-truth boxes, with depth projected through the
        camera from the predicted height and the ground-truth 2D height.
        """
        feat = self.features(images)
        b = feat.shape[0]
        if len(targets) != b:
            raise UsageError(f"{b} images but {len(targets)} target sets")
        if not isinstance(calibs, (list, tuple)):
            calibs = [calibs] * b
        if len(calibs) != b:
            raise UsageError(f"{b} images but {len(calibs)} calibs")

        out2d = self.heads2d(feat)
        heat_gt = np.stack([t.heatmap for t in targets])
        mask = np.stack([t.mask for t in targets])[:, None, :, :]
        off_gt = np.stack([t.offset2d_map for t in targets])
        size_gt = np.stack([t.size2d_map for t in targets])
        terms = {
            "heatmap": focal_loss(out2d.heatmap, heat_gt),
            "offset2d": l1_masked(out2d.offset2d, off_gt, mask),
            "size2d": l1_masked(out2d.size2d, size_gt, mask),
        }

        rois, cls_ids, off3_gt, size3_gt = [], [], [], []
        bin_gt, res_gt, depth_gt, h2d, f_v = [], [], [], [], []
        for i, t in enumerate(targets):
            for m in range(t.n_objects):
                det = Detection2D(
                    class_id=int(t.class_ids[m]),
                    score=1.0,
                    center=(float(t.center2d[m, 0]), float(t.center2d[m, 1])),
                    size=(float(t.size2d[m, 0]), float(t.size2d[m, 1])),
                )
                rois.append(roi_crop(feat, det, image_index=i))
                cls_ids.append(det.class_id)
                off3_gt.append(t.offset3d[m])
                size3_gt.append(t.size3d[m])
                bin_gt.append(int(t.angle_bin[m]))
                res_gt.append(float(t.angle_res[m]))
                depth_gt.append(float(t.depth[m]))
                h2d.append(det.size[1])
                f_v.append(calibs[i].f_v)

        if not rois:
            for term in ("offset3d", "w3d", "l3d", "h3d", "angle", "depth"):
                terms[term] = _zero_scalar()
            return {term: terms[term] for term in LOSS_TERMS}

        out3d = self.heads3d(T.stack(rois))
        m_total = len(cls_ids)
        cls = np.asarray(cls_ids)
        onehot = np.zeros((m_total, self.num_classes, 1))
        onehot[np.arange(m_total), cls, 0] = 1.0
        dims = T.sum_(out3d.size_residuals * onehot, axis=1) + CLASS_PRIORS[cls]
        size3 = np.stack(size3_gt)
        ones_vec = np.ones(m_total)
        terms["offset3d"] = l1_masked(out3d.offset3d, np.stack(off3_gt), np.ones((m_total, 1)))
        terms["w3d"] = l1_masked(dims[:, 1], size3[:, 1], ones_vec)
        terms["l3d"] = l1_masked(dims[:, 2], size3[:, 2], ones_vec)
        h_sigma = T.exp(out3d.h_log_sigma)
        terms["h3d"] = laplacian_nll(dims[:, 0], h_sigma, size3[:, 0])
        terms["angle"] = angle_loss(out3d.angle_logits, out3d.angle_residuals, bin_gt, res_gt)
        depth_mu, depth_sigma = gup_depth(
            dims[:, 0],
            h_sigma,
            np.asarray(h2d),
            np.asarray(f_v),
            out3d.bias_mu,
            T.exp(out3d.bias_log_sigma),
        )
        terms["depth"] = depth_loss(depth_mu, depth_sigma, np.asarray(depth_gt))
        return {term: terms[term] for term in LOSS_TERMS}


def manifest_path(path):
    return str(path) + ".json"


def save_checkpoint(path, detector):
    """Write parameters as flat little-endian float32 plus a JSON manifest.

    The manifest maps each parameter name to its element offset and shape;
    offsets index float32 elements, not bytes. save -> load -> save is
    bit-identical for both files.
    """
    entries = {}
    chunks = []
    offset = 0
    for name, p in detector.named_parameters():
        entries[name] = {"offset": offset, "shape": list(p.shape)}
        chunks.append(np.ascontiguousarray(p.data, dtype=CHECKPOINT_DTYPE).tobytes())
        offset += int(p.data.size)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": CHECKPOINT_DTYPE,
        "variant": detector.variant,
        "use_attention": detector.use_attention,
        "num_classes": detector.num_classes,
        "total_elements": offset,
        "params": entries,
    }
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    with open(manifest_path(path), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, detector):
    """Load a checkpoint written by save_checkpoint into a matching detector.

    Variant, attention setting, class count, parameter names, and shapes
    must all match; mismatch errors name both the checkpoint's and the
    model's side.
    """
    with open(manifest_path(path), "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise UsageError(f"unrecognized checkpoint format {manifest.get('format')!r}")
    ck_variant = manifest["variant"]
    ck_attention = manifest["use_attention"]
    ck_classes = manifest["num_classes"]
    if ck_variant != detector.variant or ck_attention != detector.use_attention:
        raise UsageError(
            f"checkpoint holds variant {ck_variant!r} (attention={ck_attention}), "
            f"model is variant {detector.variant!r} (attention={detector.use_attention})"
        )
    if ck_classes != detector.num_classes:
        raise UsageError(
            f"checkpoint holds {ck_classes} classes, model has {detector.num_classes}"
        )

    params = dict(detector.named_parameters())
    entries = manifest["params"]
    missing = sorted(set(params) - set(entries))
    unexpected = sorted(set(entries) - set(params))
    if missing or unexpected:
        raise UsageError(
            f"checkpoint parameter names do not match the model: "
            f"missing {missing}, unexpected {unexpected}"
        )
    data = np.fromfile(path, dtype=CHECKPOINT_DTYPE)
    if data.size != manifest["total_elements"]:
        raise UsageError(
            f"checkpoint holds {data.size} float32 values, manifest expects "
            f"{manifest['total_elements']}"
        )
    for name, entry in entries.items():
        p = params[name]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise UsageError(
                f"checkpoint parameter {name!r} has shape {shape}, model has {p.shape}"
            )
        lo = entry["offset"]
        hi = lo + int(np.prod(shape, dtype=np.int64))
        if hi > data.size:
            raise UsageError(f"checkpoint parameter {name!r} runs past the end of the file")
        p.data[...] = data[lo:hi].reshape(shape).astype(np.float64)
    return manifest
