"""Average-precision evaluation over KITTI-style labels.

AP|R40: predictions are greedily matched per image in global descending
score order (ties keep input order), each ground-truth box claimable
once; precision is sampled at the 40 recall levels {i/40} through the
precision envelope and averaged. Ground truth outside the evaluated
difficulty bucket is ignored rather than missed: a prediction that only
overlaps an ignored box consumes it and drops out of the count.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .geometry import Box3D, iou_3d, iou_bev
from .heads import CLASS_NAMES
from .kitti import ParseError, parse_calib_file, parse_label_file

DIFFICULTIES = ("Easy", "Moderate", "Hard")
_LEVEL = {"Easy": 0, "Moderate": 1, "Hard": 2, "Ignored": 3}
RECALL_POINTS = tuple(i / 40.0 for i in range(1, 41))
METRICS = ("3D", "BEV")
OFFICIAL_IOU = (("Car", 0.7), ("Pedestrian", 0.5), ("Cyclist", 0.5))
RELAXED_IOU = (("Car", 0.5), ("Pedestrian", 0.3), ("Cyclist", 0.3))

# (min bbox height px, max occlusion level, max truncation fraction)
_DIFFICULTY_RULES = (
    ("Easy", 40.0, 0, 0.15),
    ("Moderate", 25.0, 1, 0.30),
    ("Hard", 25.0, 2, 0.50),
)


def assign_difficulty(rec):
    """Easiest KITTI difficulty bucket the record qualifies for."""
    height = rec.bbox[3] - rec.bbox[1]
    for name, min_h, max_occ, max_trunc in _DIFFICULTY_RULES:
        if height >= min_h and rec.occluded <= max_occ and rec.truncated <= max_trunc:
            return name
    return "Ignored"


@dataclass(frozen=True)
class EvalConfig:
    threshold_sets: tuple = (("official", OFFICIAL_IOU), ("relaxed", RELAXED_IOU))
    metrics: tuple = METRICS

    def __post_init__(self):
        for set_name, pairs in self.threshold_sets:
            for cls, thr in pairs:
                if not (0.0 < thr <= 1.0):
                    raise UsageError(
                        f"iou threshold for {cls} in set {set_name} must be in (0, 1]"
                    )
        for metric in self.metrics:
            if metric not in METRICS:
                raise UsageError(f"unknown metric {metric!r}")


def _box_of(rec):
    return Box3D(location=rec.location, dimensions=rec.dimensions, yaw=rec.rotation_y)


def _greedy_curve(predictions, ground_truth, cls, difficulty, metric, iou_threshold):
    """One matching pass -> (PR points, counted GT, matched GT, class preds)."""
    target = _LEVEL[difficulty]
    iou_fn = iou_3d if metric == "3D" else iou_bev
    images = sorted(set(predictions) | set(ground_truth))

    flat = []
    for img in images:
        for idx, rec in enumerate(predictions.get(img, [])):
            if rec.type != cls:
                continue
            if rec.score is None:
                raise UsageError(f"prediction without score in image {img}")
            flat.append((img, idx, rec))
    flat.sort(key=lambda item: -item[2].score)  # stable: ties keep input order

    counted = {}
    ignored = {}
    npos = 0
    for img in images:
        for j, rec in enumerate(ground_truth.get(img, [])):
            if rec.type != cls:
                continue
            bucket = counted if _LEVEL[assign_difficulty(rec)] <= target else ignored
            bucket.setdefault(img, []).append((j, _box_of(rec)))
            if bucket is counted:
                npos += 1
    if npos == 0:
        return [], 0, 0, len(flat)

    taken = set()
    points = []
    tp = fp = 0
    for img, _, rec in flat:
        pbox = _box_of(rec)
        best_iou, best_key = -1.0, None
        for j, gbox in counted.get(img, []):
            if (img, j) in taken:
                continue
            v = iou_fn(pbox, gbox)
            if v > best_iou:
                best_iou, best_key = v, (img, j)
        if best_key is not None and best_iou >= iou_threshold:
            taken.add(best_key)
            tp += 1
            points.append((tp / npos, tp / (tp + fp)))
            continue
        ign_iou, ign_key = -1.0, None
        for j, gbox in ignored.get(img, []):
            if (img, j) in taken:
                continue
            v = iou_fn(pbox, gbox)
            if v > ign_iou:
                ign_iou, ign_key = v, (img, j)
        if ign_key is not None and ign_iou >= iou_threshold:
            taken.add(ign_key)
            continue
        fp += 1
        points.append((tp / npos, tp / (tp + fp)))
    return points, npos, tp, len(flat)


def _mean_envelope(points):
    """Mean over the 40 recall levels of max precision at recall >= level."""
    recalls = np.array([r for r, _ in points])
    precisions = [p for _, p in points]
    suffix_max = [0.0] * (len(points) + 1)
    for i in range(len(points) - 1, -1, -1):
        suffix_max[i] = max(precisions[i], suffix_max[i + 1])
    total = 0.0
    for r in RECALL_POINTS:
        idx = int(np.searchsorted(recalls, r, side="left"))
        total += suffix_max[idx]
    return total / 40.0 * 100.0


def ap_r40(predictions, ground_truth, cls, difficulty, metric="3D", iou_threshold=0.7):
    """AP percent, or None when the class/difficulty cell has no ground truth.

    `predictions` and `ground_truth` map image id -> list of records
    (predictions must carry scores).
    """
    if cls not in CLASS_NAMES:
        raise UsageError(f"unknown class {cls!r}")
    if difficulty not in DIFFICULTIES:
        raise UsageError(f"unknown difficulty {difficulty!r}")
    if metric not in METRICS:
        raise UsageError(f"unknown metric {metric!r}")
    if not (0.0 < iou_threshold <= 1.0):
        raise UsageError("iou_threshold must be in (0, 1]")
    points, npos, _, _ = _greedy_curve(
        predictions, ground_truth, cls, difficulty, metric, iou_threshold
    )
    if npos == 0:
        return None
    return _mean_envelope(points)


@dataclass(frozen=True)
class ApCell:
    ap: float  # None when undefined (no counted ground truth)
    n_gt: int
    n_pred: int
    matched: int

    @property
    def missed(self):
        return self.n_gt - self.matched


@dataclass
class EvalReport:
    cells: dict  # (threshold_set, metric, class, difficulty) -> ApCell
    errors: list
    n_images: int

    def to_text(self):
        lines = [f"AP|R40 over {self.n_images} images ({len(self.errors)} file errors)"]
        header = f"{'thresholds':<11} {'metric':<6} {'class':<11} {'difficulty':<10} {'AP':>7} {'matched':>7} {'missed':>6} {'n_pred':>6}"
        lines.append(header)
        lines.append("-" * len(header))
        for key in sorted(self.cells):
            set_name, metric, cls, diff = key
            cell = self.cells[key]
            ap = "n/a" if cell.ap is None else f"{cell.ap:.2f}"
            lines.append(
                f"{set_name:<11} {metric:<6} {cls:<11} {diff:<10} {ap:>7} "
                f"{cell.matched:>7} {cell.missed:>6} {cell.n_pred:>6}"
            )
        for err in self.errors:
            lines.append(f"error: {err}")
        return "\n".join(lines) + "\n"

    def to_records(self):
        records = []
        for key in sorted(self.cells):
            set_name, metric, cls, diff = key
            cell = self.cells[key]
            records.append(
                {
                    "thresholds": set_name,
                    "metric": metric,
                    "class": cls,
                    "difficulty": diff,
                    "ap": cell.ap,
                    "n_gt": cell.n_gt,
                    "n_pred": cell.n_pred,
                    "matched": cell.matched,
                    "missed": cell.missed,
                }
            )
        return records

    def to_kv_lines(self):
        lines = []
        for rec in self.to_records():
            ap = "n/a" if rec["ap"] is None else f"{rec['ap']:.6f}"
            lines.append(
                f"thresholds={rec['thresholds']} metric={rec['metric']} "
                f"class={rec['class']} difficulty={rec['difficulty']} ap={ap} "
                f"n_gt={rec['n_gt']} n_pred={rec['n_pred']} "
                f"matched={rec['matched']} missed={rec['missed']}"
            )
        return lines


def _image_ids(gt_dir):
    try:
        names = sorted(os.listdir(gt_dir))
    except OSError as exc:
        raise UsageError(f"cannot list ground-truth dir {gt_dir}: {exc}") from exc
    ids = [os.path.splitext(n)[0] for n in names if n.endswith(".txt")]
    if not ids:
        raise UsageError(f"no .txt label files in {gt_dir}")
    return ids


def _read_text(path):
    with open(path, "r", encoding="ascii") as fh:
        return fh.read()


def evaluate_split(pred_dir, gt_dir, calib_dir=None, cfg=None):
    """Evaluate a prediction directory against a ground-truth directory.

    Missing or unparseable prediction files are itemized in the report
    errors and score as zero predictions for that image; unreadable
    ground-truth files drop the image entirely. Calibration files, when a
    directory is given, are parsed for validation only.
    """
    cfg = cfg or EvalConfig()
    errors = []
    ground_truth = {}
    predictions = {}
    for image_id in _image_ids(gt_dir):
        gt_path = os.path.join(gt_dir, image_id + ".txt")
        try:
            ground_truth[image_id] = parse_label_file(_read_text(gt_path))
        except (ParseError, OSError) as exc:
            errors.append(f"{gt_path}: {exc}")
            continue
        pred_path = os.path.join(pred_dir, image_id + ".txt")
        if not os.path.exists(pred_path):
            errors.append(f"{pred_path}: missing prediction file")
            predictions[image_id] = []
        else:
            try:
                parsed = parse_label_file(_read_text(pred_path))
                if any(rec.score is None for rec in parsed):
                    raise ParseError("prediction line without a score field")
                predictions[image_id] = parsed
            except (ParseError, OSError) as exc:
                errors.append(f"{pred_path}: {exc}")
                predictions[image_id] = []
        if calib_dir is not None:
            calib_path = os.path.join(calib_dir, image_id + ".txt")
            try:
                parse_calib_file(_read_text(calib_path))
            except (ParseError, OSError) as exc:
                errors.append(f"{calib_path}: {exc}")

    cells = {}
    for set_name, pairs in cfg.threshold_sets:
        thresholds = dict(pairs)
        for metric in cfg.metrics:
            for cls in CLASS_NAMES:
                for difficulty in DIFFICULTIES:
                    points, npos, matched, n_pred = _greedy_curve(
                        predictions, ground_truth, cls, difficulty, metric, thresholds[cls]
                    )
                    ap = _mean_envelope(points) if npos > 0 else None
                    cells[(set_name, metric, cls, difficulty)] = ApCell(
                        ap=ap, n_gt=npos, n_pred=n_pred, matched=matched
                    )
    return EvalReport(cells=cells, errors=errors, n_images=len(ground_truth))
