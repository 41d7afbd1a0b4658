"""COCO-style average precision for boxes and masks.

Matching follows the COCO procedure: per image and category, detections are
visited in descending score order and each takes the highest-IoU ground truth
still free at the current IoU threshold. Precision is read at 101 recall
points from the monotone precision envelope.

Ties in score are broken by a canonical key (image id, box coordinates,
mask bytes), never by input order, so shuffling predictions cannot change
the result.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import box_iou_matrix

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
COCO_REFERENCE_AREA = 640.0 * 480.0
MAX_DETS = 100


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask extents differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mask_iou_matrix(dts, gts):
    if len(dts) == 0 or len(gts) == 0:
        return np.zeros((len(dts), len(gts)))
    d = np.stack([m.reshape(-1) for m in dts]).astype(np.float64)
    g = np.stack([m.reshape(-1) for m in gts]).astype(np.float64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 1.0)


def area_ranges(image_area):
    """S/M/L bounds scaled from COCO's 32^2 / 96^2 by image area."""
    s = image_area / COCO_REFERENCE_AREA
    return {
        "all": (0.0, np.inf),
        "small": (0.0, 32.0**2 * s),
        "medium": (32.0**2 * s, 96.0**2 * s),
        "large": (96.0**2 * s, np.inf),
    }


@dataclass
class GroundTruth:
    image_id: int
    category_id: int
    box: tuple  # x0, y0, x1, y1
    mask: np.ndarray | None = None
    area: float | None = None

    def __post_init__(self):
        if self.area is None:
            self.area = float(self.mask.sum()) if self.mask is not None else _box_area(self.box)


@dataclass
class Prediction:
    image_id: int
    category_id: int
    score: float
    box: tuple
    mask: np.ndarray | None = None
    area: float | None = None

    def __post_init__(self):
        if self.area is None:
            self.area = float(self.mask.sum()) if self.mask is not None else _box_area(self.box)


def _box_area(b):
    return max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)


def _canonical_key(p):
    mask_key = p.mask.tobytes() if p.mask is not None else b""
    return (-p.score, p.image_id, tuple(float(v) for v in p.box), mask_key)


def _ious(dts, gts, kind):
    if kind == "box":
        return box_iou_matrix([d.box for d in dts], [g.box for g in gts])
    return mask_iou_matrix([d.mask for d in dts], [g.mask for g in gts])


def _match_image(dts, gts, kind, area_rng):
    """Match flags for one (image, category) at every IoU threshold.

    Returns (dt_matched [T, D], dt_ignored [T, D], n_gt_not_ignored).
    """
    lo, hi = area_rng
    gt_ig = np.array([not (lo <= g.area < hi) for g in gts], dtype=bool)
    gt_order = np.argsort(gt_ig, kind="stable")
    gts = [gts[i] for i in gt_order]
    gt_ig = gt_ig[gt_order]
    ious = _ious(dts, gts, kind) if dts and gts else np.zeros((len(dts), len(gts)))
    t_count = len(IOU_THRESHOLDS)
    dtm = np.zeros((t_count, len(dts)), dtype=bool)
    dt_ig = np.zeros((t_count, len(dts)), dtype=bool)
    for ti, thr in enumerate(IOU_THRESHOLDS):
        gtm = np.zeros(len(gts), dtype=bool)
        for di in range(len(dts)):
            best = min(thr, 1 - 1e-10)
            m = -1
            for gi in range(len(gts)):
                if gtm[gi]:
                    continue
                if m > -1 and not gt_ig[m] and gt_ig[gi]:
                    break
                if ious[di, gi] < best:
                    continue
                best = ious[di, gi]
                m = gi
            if m == -1:
                continue
            dt_ig[ti, di] = gt_ig[m]
            dtm[ti, di] = True
            gtm[m] = True
    out_of_range = np.array([not (lo <= d.area < hi) for d in dts], dtype=bool)
    dt_ig |= ~dtm & out_of_range[None, :]
    return dtm, dt_ig, int((~gt_ig).sum())


def _precision_at_recalls(tp, fp, n_gt):
    tp_sum = np.cumsum(tp).astype(np.float64)
    fp_sum = np.cumsum(fp).astype(np.float64)
    q = np.zeros(len(RECALL_POINTS))
    if tp_sum.size == 0:
        return q
    rc = tp_sum / n_gt
    pr = tp_sum / np.maximum(tp_sum + fp_sum, np.finfo(np.float64).eps)
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    inds = np.searchsorted(rc, RECALL_POINTS, side="left")
    valid = inds < len(pr)
    q[valid] = pr[inds[valid]]
    return q


def average_precision(gts, preds, kind="mask", area_rng=(0.0, np.inf), max_dets=MAX_DETS):
    """Precision table [T, R] averaged over categories, or ``None`` if no ground truth is in range."""
    if kind not in ("box", "mask"):
        raise ValueError("kind must be 'box' or 'mask'")
    cats = sorted({g.category_id for g in gts} | {p.category_id for p in preds})
    image_ids = sorted({g.image_id for g in gts} | {p.image_id for p in preds})
    by_key_gt: dict = {}
    for g in gts:
        by_key_gt.setdefault((g.image_id, g.category_id), []).append(g)
    by_key_dt: dict = {}
    for p in preds:
        by_key_dt.setdefault((p.image_id, p.category_id), []).append(p)

    tables = []
    for c in cats:
        scores, matched, ignored, keys = [], [], [], []
        n_gt = 0
        for img in image_ids:
            g = by_key_gt.get((img, c), [])
            d = sorted(by_key_dt.get((img, c), []), key=_canonical_key)[:max_dets]
            dtm, dt_ig, npig = _match_image(d, g, kind, area_rng)
            n_gt += npig
            for k, p in enumerate(d):
                scores.append(p.score)
                keys.append((img, k))
                matched.append(dtm[:, k])
                ignored.append(dt_ig[:, k])
        if n_gt == 0:
            continue
        if not scores:
            tables.append(np.zeros((len(IOU_THRESHOLDS), len(RECALL_POINTS))))
            continue
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], keys[i]))
        dtm = np.stack([matched[i] for i in order], axis=1)
        dt_ig = np.stack([ignored[i] for i in order], axis=1)
        tps = dtm & ~dt_ig
        fps = ~dtm & ~dt_ig
        table = np.stack([_precision_at_recalls(tps[t], fps[t], n_gt) for t in range(len(IOU_THRESHOLDS))])
        tables.append(table)
    if not tables:
        return None
    return np.mean(tables, axis=0)


def summarize(gts, preds, kind, image_area):
    """AP, AP50, AP75 and AP_S/M/L in [0, 1]; ranges without ground truth report 0."""
    out = {}
    ranges = area_ranges(image_area)
    full = average_precision(gts, preds, kind, ranges["all"])
    if full is None:
        raise ValueError("no ground truth to evaluate against")
    out["AP"] = float(full.mean())
    out["AP50"] = float(full[0].mean())
    out["AP75"] = float(full[5].mean())
    for name, key in (("small", "APs"), ("medium", "APm"), ("large", "APl")):
        t = average_precision(gts, preds, kind, ranges[name])
        out[key] = 0.0 if t is None else float(t.mean())
    return out


@dataclass
class EvalResult:
    mask: dict = field(default_factory=dict)
    box: dict = field(default_factory=dict)
    n_images: int = 0

    def to_dict(self):
        return {"mask": self.mask, "box": self.box, "n_images": self.n_images}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def table(self):
        cols = ("AP", "AP50", "AP75", "APs", "APm", "APl")
        lines = ["task  " + "".join(f"{c:>8}" for c in cols)]
        for task in ("mask", "box"):
            row = getattr(self, task)
            lines.append(f"{task:<6}" + "".join(f"{100.0 * row.get(c, 0.0):8.1f}" for c in cols))
        return "\n".join(lines)


def evaluate_predictions(gts, preds, image_area, n_images):
    return EvalResult(
        mask=summarize(gts, preds, "mask", image_area),
        box=summarize(gts, preds, "box", image_area),
        n_images=n_images,
    )
