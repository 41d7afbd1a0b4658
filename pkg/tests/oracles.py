"""Slow, obviously-correct reference implementations used only by the tests.

Nothing here imports from motionbox; numpy only supplies the protocol's
threshold grids. Every routine is written from the definitions with plain
loops so that a shared bug cannot hide.
"""

import math

import numpy as np

# exactly as COCO builds them, so ulp-level boundary cases agree
IOU_THRESHOLDS = [float(t) for t in np.linspace(0.5, 0.95, 10)]
RECALL_POINTS = [float(r) for r in np.linspace(0.0, 1.0, 101)]

# ---------------------------------------------------------------------------
# pairs


def brute_pairs(box, extents, k, d):
    """Set of unordered pixel pairs {p, q}, p in box, q in p's dilated k x k window."""
    r0, c0, r1, c1 = box
    h, w = extents
    half = k // 2
    out = set()
    for i in range(r0, r1):
        for j in range(c0, c1):
            for a in range(-half, half + 1):
                for b in range(-half, half + 1):
                    if a == 0 and b == 0:
                        continue
                    y, x = i + a * d, j + b * d
                    if 0 <= y < h and 0 <= x < w:
                        out.add(frozenset([(i, j), (y, x)]))
    return out


# ---------------------------------------------------------------------------
# pairwise loss


def similarity(u, v, theta):
    s = 0.0
    for a, b in zip(u, v):
        s += (a - b) ** 2
    return math.exp(-math.sqrt(s) / theta)


def brute_pairwise_loss(m, pairs, color, flow, theta_c, theta_f, tau_c, tau_f):
    """Mean over all pairs of y * -log(P), P the same-label probability.

    ``m`` is a list of lists; ``color`` and ``flow`` are nested lists of vectors.
    """
    n = 0
    acc = 0.0
    for i, j, k, l in pairs:
        n += 1
        sc = similarity(color[i][j], color[k][l], theta_c)
        sf = similarity(flow[i][j], flow[k][l], theta_f)
        if sc >= tau_c and sf >= tau_f:
            a, b = m[i][j], m[k][l]
            p = a * b + (1 - a) * (1 - b)
            p = min(max(p, 1e-8), 1.0)
            acc -= math.log(p)
    return acc / n


# ---------------------------------------------------------------------------
# projection loss


def brute_projection_loss(m, box, eps=1e-8):
    h, w = len(m), len(m[0])
    r0, c0, r1, c1 = box
    col_max = [max(m[i][j] for i in range(h)) for j in range(w)]
    row_max = [max(m[i][j] for j in range(w)) for i in range(h)]
    col_ind = [1.0 if c0 <= j < c1 else 0.0 for j in range(w)]
    row_ind = [1.0 if r0 <= i < r1 else 0.0 for i in range(h)]

    def dice(p, t):
        inter = sum(a * b for a, b in zip(p, t))
        return 2 * inter / (sum(a * a for a in p) + sum(b * b for b in t) + eps)

    return (1 - dice(col_max, col_ind)) + (1 - dice(row_max, row_ind))


# ---------------------------------------------------------------------------
# COCO average precision


def _iou_box(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _iou_mask(a, b):
    inter = union = 0
    for ra, rb in zip(a, b):
        for x, y in zip(ra, rb):
            inter += 1 if (x and y) else 0
            union += 1 if (x or y) else 0
    return 1.0 if union == 0 else inter / union


def brute_coco_ap(gts, dets, kind, area_rng=(0.0, float("inf")), max_dets=100):
    """COCO AP per IoU threshold, single category, written from the protocol.

    ``gts``: list of dicts (image, box, mask, area); ``dets``: same plus score.
    Returns a list of 10 precision-averaged values (one per IoU threshold)
    or None when no ground truth falls in ``area_rng``.
    """
    lo, hi = area_rng
    iou = _iou_box if kind == "box" else _iou_mask
    key = "box" if kind == "box" else "mask"
    images = sorted({g["image"] for g in gts} | {d["image"] for d in dets})

    n_gt = sum(1 for g in gts if lo <= g["area"] < hi)
    if n_gt == 0:
        return None
    results = []
    for thr in IOU_THRESHOLDS:
        scored = []  # (score, tp, ignore)
        for img in images:
            g_img = [g for g in gts if g["image"] == img]
            # non-ignored ground truth first, original order otherwise
            g_img = [g for g in g_img if lo <= g["area"] < hi] + [g for g in g_img if not (lo <= g["area"] < hi)]
            d_img = [d for d in dets if d["image"] == img]
            d_img.sort(key=lambda d: -d["score"])
            d_img = d_img[:max_dets]
            taken = [False] * len(g_img)
            for d in d_img:
                best = min(thr, 1 - 1e-10)
                m = None
                for gi, g in enumerate(g_img):
                    if taken[gi]:
                        continue
                    g_ign = not (lo <= g["area"] < hi)
                    if m is not None and not _ign(g_img[m], lo, hi) and g_ign:
                        break
                    v = iou(d[key], g[key])
                    if v < best:
                        continue
                    best = v
                    m = gi
                if m is not None:
                    taken[m] = True
                    scored.append((d["score"], True, _ign(g_img[m], lo, hi)))
                else:
                    scored.append((d["score"], False, not (lo <= d["area"] < hi)))
        scored.sort(key=lambda s: -s[0])
        kept = [s for s in scored if not s[2]]
        tp = fp = 0
        recalls, precisions = [], []
        for _, is_tp, _ in kept:
            if is_tp:
                tp += 1
            else:
                fp += 1
            recalls.append(tp / n_gt)
            precisions.append(tp / (tp + fp))
        total = 0.0
        for target in RECALL_POINTS:
            best_p = 0.0
            for rc, pr in zip(recalls, precisions):
                if rc >= target and pr > best_p:
                    best_p = pr
            total += best_p
        results.append(total / 101)
    return results


def _ign(g, lo, hi):
    return not (lo <= g["area"] < hi)
