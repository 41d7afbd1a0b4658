"""Training objectives for the mask and detection heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_EPS = 1e-8
DICE_EPS = 1e-8


def pair_probability(m_ij, m_kl):
    """Probability that two pixels share a label given their foreground scores."""
    return m_ij * m_kl + (1.0 - m_ij) * (1.0 - m_kl)


def _flat_index(pairs, width):
    pairs = np.asarray(pairs, dtype=np.int64)
    return pairs[:, 0] * width + pairs[:, 1], pairs[:, 2] * width + pairs[:, 3]


def pairwise_loss(m, pair_set):
    """Mean negative log same-label probability over positive pairs.

    ``m`` is a 1xHxW score map. Pairs labeled 0 add nothing, but the mean is
    taken over every pair in the set.
    """
    n = len(pair_set)
    if n == 0:
        raise ValueError("pairwise_loss needs a nonempty PairSet")
    _, h, w = m.shape
    pos = np.flatnonzero(pair_set.y)
    if pos.size == 0:
        return Tensor(np.zeros(1))
    first, second = _flat_index(pair_set.pairs[pos], w)
    flat = ad.reshape(m, (h * w,))
    a = ad.gather(flat, first)
    b = ad.gather(flat, second)
    p = ad.add(ad.mul(a, b), ad.mul(ad.affine(a, -1.0, 1.0), ad.affine(b, -1.0, 1.0)))
    logp = ad.log(ad.clamp(p, PROB_EPS, 1.0))
    return ad.affine(ad.total(logp), -1.0 / n)


def box_indicators(box_cells, extents):
    r0, c0, r1, c1 = box_cells
    h, w = extents
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"degenerate box {box_cells}")
    if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
        raise ValueError(f"box {box_cells} outside {h}x{w} map")
    rows = np.zeros(h)
    rows[r0:r1] = 1.0
    cols = np.zeros(w)
    cols[c0:c1] = 1.0
    return rows, cols


def _dice(p, target):
    inter = ad.total(ad.mul(p, Tensor(target)))
    denom = ad.affine(ad.total(ad.mul(p, p)), 1.0, float(np.dot(target, target)) + DICE_EPS)
    return ad.div(ad.affine(inter, 2.0), denom)


def projection_loss(m, box_cells):
    """Dice between the score map's axis max-projections and the box extents."""
    _, h, w = m.shape
    rows, cols = box_indicators(box_cells, (h, w))
    m2 = ad.reshape(m, (h, w))
    dice_x = _dice(ad.max_axis(m2, 0), cols)
    dice_y = _dice(ad.max_axis(m2, 1), rows)
    return ad.affine(ad.add(dice_x, dice_y), -1.0, 2.0)


def detection_loss(obj_logits, ltrb, obj_target, ltrb_target, positive):
    """Objectness BCE plus smooth-L1 box regression at positive locations.

    Both terms are normalized by the number of positive locations (at least 1);
    the regression term is additionally averaged over the four sides.
    """
    positive = np.asarray(positive, dtype=bool)
    npos = int(positive.sum())
    norm = float(max(npos, 1))
    obj = ad.affine(ad.total(ad.bce_with_logits(obj_logits, obj_target.reshape(obj_logits.shape))), 1.0 / norm)
    if npos == 0:
        return obj, obj, Tensor(np.zeros(1))
    idx = np.flatnonzero(positive.reshape(-1))
    pred = ad.gather(ad.reshape(ltrb, (4, -1)), (slice(None), idx))
    target = np.asarray(ltrb_target).reshape(4, -1)[:, idx]
    reg = ad.affine(ad.total(ad.smooth_l1(pred, target)), 1.0 / (4.0 * npos))
    return ad.add(obj, reg), obj, reg


@dataclass(frozen=True)
class LossSchedule:
    lambda_proj: float = 1.0
    lambda_pair: float = 1.0
    warmup_steps: int = 0

    def pairwise_weight(self, step):
        if step < 0:
            raise ValueError("step must be >= 0")
        if self.warmup_steps <= 0:
            return 1.0
        return min(step / self.warmup_steps, 1.0)


def total_loss(detection, projection, pairwise, step, schedule):
    w = schedule.pairwise_weight(step)
    out = ad.add(detection, ad.affine(projection, schedule.lambda_proj))
    return ad.add(out, ad.affine(pairwise, w * schedule.lambda_pair))


@dataclass
class LossReport:
    step: int
    pairwise: float
    projection: float
    detection: float
    total: float
    n_pairs: int

    def to_json_line(self):
        return json.dumps(asdict(self), sort_keys=True)
