"""Mask IoU, greedy detection matching and COCO-style average precision."""
import json
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_binary_mask
from .geometry import RoiBox

# rounded so each threshold is the double nearest its decimal value (0.6, not
# 0.6000000000000001); an IoU of exactly 3/5 then passes the 0.60 threshold
IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_THRESHOLDS = np.round(np.linspace(0.0, 1.0, 101), 2)
MAX_DETS = 100
METRICS = ("AP", "AP50", "AP75", "AP_S", "AP_L")


@dataclass
class Detection:
    """A final per-instance output.

    ``mask`` is binary at box resolution: its shape equals the rounded box
    height and width. Ranking uses ``box_score * mask_score``.
    """

    box: RoiBox
    category: int
    box_score: float
    mask: np.ndarray
    mask_score: float = 1.0
    image_id: int = 0
    det_id: int = 0

    def __post_init__(self):
        self.box = self.box.rounded()
        self.mask = check_binary_mask(self.mask, "detection mask")
        expected = (int(self.box.height), int(self.box.width))
        if self.mask.shape != expected:
            raise ValueError(f"mask shape {self.mask.shape} != box size {expected}")

    @property
    def score(self):
        return self.box_score * self.mask_score

    def paste(self, image_shape):
        """Binary mask in the image frame; parts outside the image are cut."""
        H, W = image_shape
        out = np.zeros((H, W), dtype=bool)
        x0, y0, x1, y1 = (int(v) for v in self.box.as_array())
        cx0, cy0, cx1, cy1 = max(x0, 0), max(y0, 0), min(x1, W), min(y1, H)
        if cx1 > cx0 and cy1 > cy0:
            out[cy0:cy1, cx0:cx1] = self.mask[cy0 - y0 : cy1 - y0, cx0 - x0 : cx1 - x0]
        return out

    def to_dict(self):
        return {
            "image_id": self.image_id,
            "det_id": self.det_id,
            "category": self.category,
            "box": [float(v) for v in self.box.as_array()],
            "box_score": self.box_score,
            "mask_score": self.mask_score,
            "mask_rows": ["".join("1" if v else "0" for v in row) for row in self.mask],
        }

    @classmethod
    def from_dict(cls, d):
        mask = np.array([[c == "1" for c in row] for row in d["mask_rows"]], dtype=bool)
        mask = mask.reshape(len(d["mask_rows"]), -1)
        return cls(
            box=RoiBox(*d["box"]),
            category=d["category"],
            box_score=d["box_score"],
            mask=mask,
            mask_score=d["mask_score"],
            image_id=d["image_id"],
            det_id=d["det_id"],
        )


@dataclass
class GroundTruth:
    image_id: int
    category: int
    box: RoiBox
    mask: np.ndarray = None

    @property
    def area(self):
        if self.mask is not None:
            return float(np.count_nonzero(self.mask))
        return self.box.area


@dataclass
class EvalResult:
    """COCO-style summary in percent. Size strata without any ground truth are ``None``."""

    AP: float
    AP50: float
    AP75: float
    AP_S: float = None
    AP_L: float = None
    precision: np.ndarray = field(default=None, repr=False)

    def as_dict(self):
        return {k: getattr(self, k) for k in METRICS}


def mask_iou(a, b):
    """Intersection over union of two binary masks; two empty masks give 1."""
    a = check_binary_mask(a, "a")
    b = check_binary_mask(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def box_iou(a, b):
    """Pairwise IoU between box arrays of shape (N, 4) and (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _ranked(dets):
    return sorted(dets, key=lambda d: (-d.score, d.det_id))


def _iou_matrix(dets, gts, iou_type, image_shape):
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    if iou_type == "bbox":
        return box_iou([d.box.as_array() for d in dets], [g.box.as_array() for g in gts])
    if iou_type != "segm":
        raise ValueError(f"unknown iou_type {iou_type!r}")
    dm = np.stack([d.paste(image_shape).ravel() for d in dets]).astype(np.float64)
    gm = np.stack([g.mask.ravel() for g in gts]).astype(np.float64)
    inter = dm @ gm.T
    union = dm.sum(1)[:, None] + gm.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 1.0)


def _greedy_match(ious, threshold, gt_ignore=None):
    """Match ranked detections (rows) to ground truths (columns).

    Each detection takes the highest-IoU unmatched ground truth with
    IoU >= ``threshold``; non-ignored ground truths are preferred over
    ignored ones. Returns the matched column per row (-1 if none).
    """
    n_det, n_gt = ious.shape
    if gt_ignore is None:
        gt_ignore = np.zeros(n_gt, dtype=bool)
    taken = np.zeros(n_gt, dtype=bool)
    match = np.full(n_det, -1)
    for i in range(n_det):
        for allowed in (~gt_ignore, gt_ignore):
            cand = np.flatnonzero(allowed & ~taken & (ious[i] >= threshold))
            if cand.size:
                j = cand[np.argmax(ious[i, cand])]
                match[i] = j
                taken[j] = True
                break
    return match


def match_and_score(dets, gts, iou_threshold, iou_type="segm", image_shape=None):
    """True-positive flag per detection, in the given (descending score) order.

    Matching is greedy within each image and category; a detection whose
    category differs from every ground truth is a false positive.
    """
    tp = np.zeros(len(dets), dtype=bool)
    groups = {}
    for i, d in enumerate(dets):
        groups.setdefault((d.image_id, d.category), []).append(i)
    for (img, cat), idx in groups.items():
        g = [x for x in gts if x.image_id == img and x.category == cat]
        if not g:
            continue
        shape = image_shape or (g[0].mask.shape if g[0].mask is not None else None)
        ious = _iou_matrix([dets[i] for i in idx], g, iou_type, shape)
        match = _greedy_match(ious, iou_threshold)
        tp[np.asarray(idx)] = match >= 0
    return tp


def _area_ranges(image_area):
    return {
        "all": (0.0, np.inf),
        "small": (0.0, image_area / 64.0),
        "large": (image_area / 9.0, np.inf),
    }


def _in_range(area, rng, label):
    lo, hi = rng
    if label == "small":
        return area < hi
    if label == "large":
        return area > lo
    return True


def interpolated_ap(tp, ignore, n_positive):
    """101-point interpolated AP for ranked detections; ``None`` when there are no positives."""
    if n_positive == 0:
        return None
    keep = ~ignore
    tp = tp[keep].astype(np.float64)
    if tp.size == 0:
        return 0.0, np.zeros_like(RECALL_THRESHOLDS)
    tps = np.cumsum(tp)
    fps = np.cumsum(1.0 - tp)
    recall = tps / n_positive
    precision = tps / (tps + fps)
    # precision envelope: running max from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    pos = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    q = np.where(pos < len(envelope), envelope[np.minimum(pos, len(envelope) - 1)], 0.0)
    return float(np.mean(q)), q


def coco_ap(dets, gts, iou_type="segm", image_shape=None, max_dets=MAX_DETS):
    """COCO-style AP summary over IoU thresholds 0.50:0.05:0.95.

    ``image_shape`` defaults to the shape of the ground-truth masks. Small
    and large strata use ``image_area / 64`` and ``image_area / 9``.
    """
    if not gts:
        raise ValueError("coco_ap needs at least one ground truth")
    if image_shape is None:
        if gts[0].mask is None:
            raise ValueError("image_shape is required when ground truths carry no masks")
        image_shape = gts[0].mask.shape
    image_area = float(image_shape[0] * image_shape[1])
    ranges = _area_ranges(image_area)
    categories = sorted({g.category for g in gts})
    images = sorted({g.image_id for g in gts} | {d.image_id for d in dets})

    # per (image, category): ranked detections, IoUs, areas
    cells = {}
    for img in images:
        for cat in categories:
            d = _ranked([x for x in dets if x.image_id == img and x.category == cat])[:max_dets]
            g = [x for x in gts if x.image_id == img and x.category == cat]
            if not d and not g:
                continue
            ious = _iou_matrix(d, g, iou_type, image_shape)
            if iou_type == "segm":
                d_area = np.array([float(np.count_nonzero(x.mask)) for x in d])
            else:
                d_area = np.array([x.box.area for x in d])
            cells[img, cat] = (d, g, ious, d_area, np.array([x.area for x in g]))

    results = {}
    precision_all = np.full((len(IOU_THRESHOLDS), len(RECALL_THRESHOLDS), len(categories)), -1.0)
    for label, rng in ranges.items():
        ap = np.full((len(IOU_THRESHOLDS), len(categories)), np.nan)
        for t, thr in enumerate(IOU_THRESHOLDS):
            for k, cat in enumerate(categories):
                scores, ids, tps, ign = [], [], [], []
                n_pos = 0
                for (img, c), (d, g, ious, d_area, g_area) in cells.items():
                    if c != cat:
                        continue
                    g_ign = np.array([not _in_range(a, rng, label) for a in g_area], dtype=bool)
                    n_pos += int(np.count_nonzero(~g_ign))
                    match = _greedy_match(ious, thr, g_ign)
                    for i, det in enumerate(d):
                        matched = match[i] >= 0
                        if matched:
                            ignored = bool(g_ign[match[i]])
                        else:
                            ignored = not _in_range(d_area[i], rng, label)
                        scores.append(det.score)
                        ids.append(det.det_id)
                        tps.append(matched)
                        ign.append(ignored)
                order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
                out = interpolated_ap(
                    np.array([tps[i] for i in order], dtype=bool),
                    np.array([ign[i] for i in order], dtype=bool),
                    n_pos,
                )
                if out is None:
                    continue
                ap[t, k] = out[0]
                if label == "all":
                    precision_all[t, :, k] = out[1]
        results[label] = ap

    def summarize(ap):
        vals = ap[~np.isnan(ap)]
        return None if vals.size == 0 else 100.0 * float(np.mean(vals))

    all_ap = results["all"]
    return EvalResult(
        AP=summarize(all_ap),
        AP50=summarize(all_ap[:1]),
        AP75=summarize(all_ap[5:6]),
        AP_S=summarize(results["small"]),
        AP_L=summarize(results["large"]),
        precision=precision_all,
    )


def format_table(rows, title="Mask Evaluation"):
    """Plain-text table with the columns AP, AP50, AP75, AP_S, AP_L.

    ``rows`` maps a method name to an :class:`EvalResult`.
    """
    width = max([len(title)] + [len(n) for n in rows])
    header = f"{title:<{width}} | " + " | ".join(f"{m:>5}" for m in METRICS)
    lines = [header, "-" * len(header)]
    for name, res in rows.items():
        vals = []
        for m in METRICS:
            v = getattr(res, m)
            vals.append(f"{'-':>5}" if v is None else f"{v:5.1f}")
        lines.append(f"{name:<{width}} | " + " | ".join(vals))
    return "\n".join(lines)


def write_report(path, results):
    """Write ``{name: {iou_type: metrics}}`` style results as JSON."""
    def convert(obj):
        if isinstance(obj, EvalResult):
            return obj.as_dict()
        if isinstance(obj, dict):
            return {k: convert(v) for k, v in obj.items()}
        return obj

    with open(path, "w") as fh:
        json.dump(convert(results), fh, indent=2, sort_keys=True)
