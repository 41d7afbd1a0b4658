"""Diagnostic images for one sample: inputs, stream activations, masks and pair labels."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image, ImageDraw

from .imaging import flow_to_rgb, srgb_to_lab, write_png
from .model import prepare_flow, prepare_image, upsample_bilinear
from .pairwise import build_pair_set, resample_nearest
from .training import flow_features

OUTPUTS = ("frame", "flow", "heat_img", "heat_flow", "masks", "pairs")

# dark blue -> teal -> yellow; enough to read a heatmap without a plotting library
_RAMP = np.array([[0.05, 0.03, 0.25], [0.15, 0.35, 0.60], [0.15, 0.65, 0.55], [0.60, 0.85, 0.25], [0.99, 0.91, 0.15]])
_PALETTE = np.array([[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]])
PAIR_SCALE = 4


def normalize01(x):
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def colorize(heat):
    """Map values in [0, 1] to uint8 RGB."""
    t = np.clip(heat, 0.0, 1.0) * (len(_RAMP) - 1)
    i = np.minimum(t.astype(int), len(_RAMP) - 2)
    f = (t - i)[..., None]
    rgb = _RAMP[i] * (1 - f) + _RAMP[i + 1] * f
    return np.round(rgb * 255).astype(np.uint8)


def activation_heatmaps(feats, image_hw):
    """Channel-mean maps of both mask-branch streams, upsampled and scaled to [0, 1]."""
    out = []
    for t in (feats.mask_img, feats.mask_flow):
        if t is None:
            out.append(np.zeros(image_hw))
            continue
        out.append(normalize01(upsample_bilinear(t.data.mean(axis=0), image_hw)))
    return out


def contrast_ratio(heat, fg):
    """Foreground/background mean ratio, folded so that 1 means no contrast."""
    eps = 1e-6
    r = (heat[fg].mean() + eps) / (heat[~fg].mean() + eps)
    return float(max(r, 1.0 / r))


def mask_overlay(frame, masks, alpha=0.5):
    out = frame.astype(np.float64)
    for k, m in enumerate(masks):
        c = _PALETTE[k % len(_PALETTE)]
        out[m] = (1 - alpha) * out[m] + alpha * c
    return np.round(out).astype(np.uint8)


def pair_map(frame, record, run):
    """Frame upscaled with every positive pair drawn as a segment between cell centers."""
    stride = run.model.stride
    h, w = record.hw
    gh, gw = -(-h // stride), -(-w // stride)
    flow_rgb = flow_features(record, run.train.flow_input)
    lab = resample_nearest(srgb_to_lab(record.frame), gh, gw)
    flow_grid = resample_nearest(flow_rgb, gh, gw)
    img = Image.fromarray(frame).resize((w * PAIR_SCALE, h * PAIR_SCALE), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    f = stride * PAIR_SCALE
    for k, inst in enumerate(record.instances):
        c = inst.box.to_grid(stride)
        c = (max(c[0], 0), max(c[1], 0), min(c[2], gh), min(c[3], gw))
        ps = build_pair_set(c, lab, flow_grid, run.supervision)
        color = tuple(int(v) for v in _PALETTE[k % len(_PALETTE)])
        b = inst.box
        draw.rectangle([b.x0 * PAIR_SCALE, b.y0 * PAIR_SCALE, b.x1 * PAIR_SCALE - 1, b.y1 * PAIR_SCALE - 1], outline=color)
        for (i, j, kk, ll), y in zip(ps.pairs, ps.y):
            if y:
                draw.line([((j + 0.5) * f, (i + 0.5) * f), ((ll + 0.5) * f, (kk + 0.5) * f)], fill=color)
    return np.asarray(img)


def render(model, run, record, out_dir, max_magnitude=None):
    """Write the six diagnostic PNGs for ``record``; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    hw = record.hw
    flow_in = flow_features(record, run.train.flow_input)
    dets, feats = model.predict(prepare_image(record.frame), prepare_flow(flow_in))
    heat_img, heat_flow = activation_heatmaps(feats, hw)
    images = {
        "frame": record.frame,
        "flow": np.round(flow_to_rgb(record.flow, max_magnitude) * 255).astype(np.uint8),
        "heat_img": colorize(heat_img),
        "heat_flow": colorize(heat_flow),
        "masks": mask_overlay(record.frame, [d.mask for d in dets]),
    }
    if record.instances:
        images["pairs"] = pair_map(record.frame, record, run)
    paths = []
    for name in OUTPUTS:
        if name in images:
            p = os.path.join(out_dir, f"{record.image_id:05d}_{name}.png")
            write_png(p, images[name])
            paths.append(p)
    return paths
