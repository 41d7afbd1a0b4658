"""Local pixel pairs around a box and their pseudo label-identities.

A pair is labeled positive (same label) when both its Lab color similarity
and its flow similarity clear their thresholds. Similarities take the form
``exp(-||x_p - x_q|| / theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels


class PixelPair(NamedTuple):
    i: int
    j: int
    k: int
    l: int  # noqa: E741


@dataclass(frozen=True)
class SupervisionParams:
    theta_color: float = 2.0
    theta_flow: float = 0.5
    tau_color: float = 0.3
    tau_flow: float = 0.6
    kernel_size: int = 3
    # 2 links only every other cell of a stride-4 grid; at 48-64 px that lets a
    # checkerboard satisfy both mask losses, so adjacent cells are paired instead
    dilation: int = 1
    flow_similarity_space: str = "rgb"

    def __post_init__(self):
        if self.theta_color <= 0 or self.theta_flow <= 0:
            raise ValueError("theta_color and theta_flow must be positive")
        # tau = 0 is allowed: it disables a test, which is how the color-only baseline is expressed
        for name in ("tau_color", "tau_flow"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be an odd integer >= 3")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.flow_similarity_space not in ("rgb", "uv"):
            raise ValueError("flow_similarity_space must be 'rgb' or 'uv'")


@dataclass
class PairSet:
    pairs: np.ndarray  # (N, 4) int64 rows (i, j, k, l), canonical order
    y: np.ndarray  # (N,) uint8
    s_color: np.ndarray
    s_flow: np.ndarray

    def __len__(self):
        return self.pairs.shape[0]

    def __post_init__(self):
        n = self.pairs.shape[0]
        if not (self.y.shape == self.s_color.shape == self.s_flow.shape == (n,)):
            raise ValueError("PairSet arrays must have equal length")


def enumerate_pairs(box_cells, extents, kernel_size=3, dilation=1):
    """Deduplicated local pairs with at least one endpoint inside the box.

    ``box_cells`` is a half-open (r0, c0, r1, c1) cell range and ``extents``
    the (height, width) of the grid. Returns an (N, 4) int64 array.
    """
    r0, c0, r1, c1 = (int(v) for v in box_cells)
    h, w = (int(v) for v in extents)
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"empty box {box_cells}")
    if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
        raise ValueError(f"box {box_cells} lies outside a {h}x{w} grid")
    if kernel_size < 3 or kernel_size % 2 == 0 or dilation < 1:
        raise ValueError("kernel_size must be odd >= 3 and dilation >= 1")
    return kernels.enumerate_box_pairs(r0, c0, r1, c1, h, w, kernel_size, dilation)


def clip_cells(box_cells, extents):
    r0, c0, r1, c1 = box_cells
    h, w = extents
    return max(r0, 0), max(c0, 0), min(r1, h), min(c1, w)


def _channels_first(feat):
    return np.ascontiguousarray(np.moveaxis(np.asarray(feat, dtype=np.float64), -1, 0))


def similarities(feat, pairs, theta):
    """``exp(-||feat[p] - feat[q]|| / theta)`` per pair; ``feat`` is HxWxC."""
    if len(pairs) == 0:
        return np.zeros(0)
    return np.exp(-kernels.pair_distances(_channels_first(feat), np.asarray(pairs, dtype=np.int64)) / theta)


def _one(feat, pair, theta):
    i, j, k, l = pair  # noqa: E741
    d = np.asarray(feat[i, j], dtype=np.float64) - np.asarray(feat[k, l], dtype=np.float64)
    return float(np.exp(-np.sqrt(np.dot(d, d)) / theta))


def color_similarity(lab, pair, theta_color):
    return _one(lab, pair, theta_color)


def flow_similarity(flow_rgb, pair, theta_flow):
    return _one(flow_rgb, pair, theta_flow)


def pseudo_labels(s_color, s_flow, params):
    s_color = np.asarray(s_color, dtype=np.float64)
    s_flow = np.asarray(s_flow, dtype=np.float64)
    if s_color.shape != s_flow.shape:
        raise ValueError(f"length mismatch: {s_color.shape} vs {s_flow.shape}")
    return ((s_color >= params.tau_color) & (s_flow >= params.tau_flow)).astype(np.uint8)


def resample_nearest(image, out_h, out_w):
    """Pick the source pixel under each output cell's center."""
    h, w = image.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return image[rows][:, cols]


def build_pair_set(box_cells, lab, flow_feat, params):
    """Pairs for one box on a grid where ``lab`` and ``flow_feat`` are HxWxC."""
    extents = lab.shape[:2]
    pairs = enumerate_pairs(clip_cells(box_cells, extents), extents, params.kernel_size, params.dilation)
    s_color = similarities(lab, pairs, params.theta_color)
    s_flow = similarities(flow_feat, pairs, params.theta_flow)
    return PairSet(pairs, pseudo_labels(s_color, s_flow, params), s_color, s_flow)
