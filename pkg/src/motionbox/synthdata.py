"""Moving-shapes scenes with exact optical flow.

Every sample is a pure function of ``(seed, index)``. Shapes translate rigidly
by integer velocities, so the ground-truth flow is exact and warping frame t
by it reproduces frame t+1 wherever nothing is disoccluded.

Camouflage scenes fill every shape with a color a small CIE76 distance from
the background base color and give both the same texture statistics.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .boxes import Box
from .imaging import delta_e, srgb_to_lab, write_flo, write_png

SHAPES = ("rectangle", "ellipse", "triangle")
CATEGORY_ID = 1
MAX_PLACEMENT_ATTEMPTS = 100


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    min_instances: int = 1
    max_instances: int = 3
    shapes: tuple = SHAPES
    min_size: int = 14
    max_size: int = 26
    min_speed: float = 2.0
    max_speed: float = 4.0
    background: str = "noise"
    noise_sigma: float = 8.0 / 255.0
    texture_blur: float = 2.0
    camouflage: bool = False
    camouflage_delta_e: tuple = (0.5, 2.0)
    occlusion: bool = False
    camera_pan: tuple = (0, 0)
    seed: int = 0

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise SceneError("image extents must be >= 32")
        if not 1 <= self.min_instances <= self.max_instances:
            raise SceneError("need 1 <= min_instances <= max_instances")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise SceneError(f"shapes must be a nonempty subset of {SHAPES}")
        if not 2 <= self.min_size <= self.max_size:
            raise SceneError("need 2 <= min_size <= max_size")
        if not 0 <= self.min_speed <= self.max_speed:
            raise SceneError("need 0 <= min_speed <= max_speed")
        if 2 * self.max_speed >= self.max_size:
            # keeps a moving shape at least half inside its own starting footprint
            raise SceneError("max_speed must stay below half of max_size")
        if self.max_size + self.max_speed > min(self.height, self.width):
            raise SceneError("shapes too large for the frame")
        if self.background not in ("flat", "noise"):
            raise SceneError("background must be 'flat' or 'noise'")
        lo, hi = self.camouflage_delta_e
        if not 0 <= lo <= hi < 5:
            raise SceneError("camouflage_delta_e must satisfy 0 <= lo <= hi < 5")


@dataclass
class Instance:
    mask: np.ndarray  # HxW bool, visible pixels in frame t
    box: Box
    class_id: int
    shape: str
    velocity: tuple  # (u, v) pixels per frame


@dataclass
class SceneSample:
    index: int
    frame_t: np.ndarray  # HxWx3 uint8
    frame_t1: np.ndarray
    flow: np.ndarray  # HxWx2 float32
    instances: list = field(default_factory=list)
    camouflage: bool = False
    labels_t: np.ndarray | None = None  # HxW instance index, -1 background
    labels_t1: np.ndarray | None = None


@dataclass
class _Shape:
    kind: str
    mask: np.ndarray  # local h x w
    texture: np.ndarray  # local h x w x 3, floats in [0, 1]
    x: int
    y: int
    u: int
    v: int


def _shape_mask(kind, h, w, rng):
    if kind == "rectangle":
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "ellipse":
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        return ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
    # triangle: full base on one side, apex centered on the opposite side
    side = int(rng.integers(4))
    if side in (0, 1):
        t = (yy + 0.5) / h if side == 0 else (h - yy - 0.5) / h
        m = np.abs(xx + 0.5 - w / 2.0) <= t * w / 2.0
    else:
        t = (xx + 0.5) / w if side == 2 else (w - xx - 0.5) / w
        m = np.abs(yy + 0.5 - h / 2.0) <= t * h / 2.0
    return m


def _texture(rng, shape, cfg):
    if cfg.background == "flat" or cfg.noise_sigma == 0:
        return np.zeros(shape)
    noise = rng.normal(0.0, cfg.noise_sigma, size=shape)
    if cfg.texture_blur > 0:
        noise = gaussian_filter(noise, sigma=(cfg.texture_blur, cfg.texture_blur, 0), mode="wrap")
    return noise


def _color_at_delta_e(rng, base, target):
    """sRGB color (floats) whose CIE76 distance from ``base`` is ``target``."""
    base_lab = srgb_to_lab(np.round(base * 255.0))
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        lo, hi = 0.0, 0.5
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            c = np.clip(base + mid * d, 0.0, 1.0)
            if delta_e(srgb_to_lab(c * 255.0), base_lab) < target:
                lo = mid
            else:
                hi = mid
        c = np.clip(base + lo * d, 0.0, 1.0)
        if abs(delta_e(srgb_to_lab(c * 255.0), base_lab) - target) < 0.05:
            return c
    raise SceneError(f"could not find a fill color at delta E {target}")


def _distinct_color(rng, base):
    base_lab = srgb_to_lab(np.round(base * 255.0))
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        c = rng.uniform(0.1, 0.9, size=3)
        if delta_e(srgb_to_lab(c * 255.0), base_lab) > 25.0:
            return c
    raise SceneError("could not find a fill color distinct from the background")


def _velocity(rng, cfg):
    if cfg.max_speed == 0:
        return 0, 0
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        speed = rng.uniform(cfg.min_speed, cfg.max_speed)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        u, v = int(round(speed * np.cos(ang))), int(round(speed * np.sin(ang)))
        if (u, v) != (0, 0) and (u, v) != tuple(cfg.camera_pan):
            return u, v
    raise SceneError("could not sample a nonzero velocity")


def _footprint(s, dx=0, dy=0):
    return s.y + dy, s.x + dx, s.y + dy + s.mask.shape[0], s.x + dx + s.mask.shape[1]


def _overlaps(a, b):
    for fa in (_footprint(a), _footprint(a, a.u, a.v)):
        for fb in (_footprint(b), _footprint(b, b.u, b.v)):
            if fa[0] < fb[2] and fb[0] < fa[2] and fa[1] < fb[3] and fb[1] < fa[3]:
                return True
    return False


def _render(bg, shapes, frame):
    """Composite shapes over ``bg`` in z-order; returns image and label map (-1 = background)."""
    img = bg.copy()
    labels = np.full(bg.shape[:2], -1, dtype=np.int64)
    for k, s in enumerate(shapes):
        y0, x0, y1, x1 = _footprint(s, s.u * frame, s.v * frame)
        region = img[y0:y1, x0:x1]
        region[s.mask] = s.texture[s.mask]
        labels[y0:y1, x0:x1][s.mask] = k
    return img, labels


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_sample(config, index):
    """Deterministic scene for ``(config.seed, index)``."""
    cfg = config
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.height, cfg.width
    pu, pv = (int(p) for p in cfg.camera_pan)
    pad = max(abs(pu), abs(pv))

    base = rng.uniform(0.25, 0.75, size=3)
    canvas = base + _texture(rng, (h + 2 * pad, w + 2 * pad, 3), cfg)
    bg_t = canvas[pad : pad + h, pad : pad + w]
    bg_t1 = canvas[pad - pv : pad - pv + h, pad - pu : pad - pu + w]

    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    shapes: list[_Shape] = []
    for _ in range(n):
        kind = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        if cfg.camouflage:
            lo, hi = cfg.camouflage_delta_e
            fill = _color_at_delta_e(rng, base, rng.uniform(lo, hi))
        else:
            fill = _distinct_color(rng, base)
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            sh = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            sw = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            u, v = _velocity(rng, cfg)
            x_lo, x_hi = max(0, -u), w - sw - max(0, u)
            y_lo, y_hi = max(0, -v), h - sh - max(0, v)
            if x_hi < x_lo or y_hi < y_lo:
                continue
            x = int(rng.integers(x_lo, x_hi + 1))
            y = int(rng.integers(y_lo, y_hi + 1))
            mask = _shape_mask(kind, sh, sw, rng)
            tex = fill + _texture(rng, (sh, sw, 3), cfg)
            cand = _Shape(kind, mask, tex, x, y, u, v)
            if not cfg.occlusion and any(_overlaps(cand, other) for other in shapes):
                continue
            shapes.append(cand)
            break
        else:
            raise SceneError(f"could not place instance after {MAX_PLACEMENT_ATTEMPTS} attempts (index {index})")

    img_t, lab_t = _render(bg_t, shapes, 0)
    img_t1, lab_t1 = _render(bg_t1, shapes, 1)

    flow = np.empty((h, w, 2), dtype=np.float32)
    flow[..., 0] = pu
    flow[..., 1] = pv
    instances = []
    labels_t = np.full((h, w), -1, dtype=np.int64)
    labels_t1 = np.full((h, w), -1, dtype=np.int64)
    for k, s in enumerate(shapes):
        vis = lab_t == k
        flow[vis] = (s.u, s.v)
        if not vis.any():
            # fully hidden at t: its pixels at t+1 have no source, mark them apart from everything
            labels_t1[lab_t1 == k] = -2 - k
            continue
        labels_t[vis] = len(instances)
        labels_t1[lab_t1 == k] = len(instances)
        instances.append(Instance(vis, Box.from_mask(vis), CATEGORY_ID, s.kind, (s.u, s.v)))
    return SceneSample(
        index, _quantize(img_t), _quantize(img_t1), flow, instances, cfg.camouflage, labels_t, labels_t1
    )


def warp_residual(sample):
    """Mean |frame_t1(p + flow(p)) - frame_t(p)| in [0, 1] units.

    Only pixels whose content is visible at both ends of the flow vector
    (same label in both frames) count.
    """
    h, w = sample.flow.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    ty = yy + np.rint(sample.flow[..., 1]).astype(np.int64)
    tx = xx + np.rint(sample.flow[..., 0]).astype(np.int64)
    inside = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    ys, xs, tys, txs = yy[inside], xx[inside], ty[inside], tx[inside]
    valid = sample.labels_t[ys, xs] == sample.labels_t1[tys, txs]
    if not valid.any():
        return 0.0
    a = sample.frame_t[ys[valid], xs[valid]].astype(np.float64)
    b = sample.frame_t1[tys[valid], txs[valid]].astype(np.float64)
    return float(np.abs(a - b).mean() / 255.0)


# ---------------------------------------------------------------------------
# dataset directories


def _fmt(i):
    return f"{i:05d}"


def camouflage_contrast(sample, ring=3):
    """Per-instance CIE76 distance between mean fill color and mean nearby background."""
    from scipy.ndimage import binary_dilation

    lab = srgb_to_lab(sample.frame_t)
    fg_any = np.zeros(sample.frame_t.shape[:2], dtype=bool)
    for inst in sample.instances:
        fg_any |= inst.mask
    out = []
    for inst in sample.instances:
        near = binary_dilation(inst.mask, iterations=ring) & ~fg_any
        if not near.any():
            continue
        out.append(float(delta_e(lab[inst.mask].mean(axis=0), lab[near].mean(axis=0))))
    return out


def generate_split(config, n, out_dir, start_index=0):
    """Write ``n`` samples and a COCO-like ``annotations.json`` under ``out_dir``."""
    for sub in ("frames", "flow", "masks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for i in range(start_index, start_index + n):
        s = generate_sample(config, i)
        tag = _fmt(i)
        write_png(os.path.join(out_dir, "frames", f"{tag}_t.png"), s.frame_t)
        write_png(os.path.join(out_dir, "frames", f"{tag}_t1.png"), s.frame_t1)
        write_flo(os.path.join(out_dir, "flow", f"{tag}.flo"), s.flow)
        images.append(
            {
                "id": i,
                "file_name": f"frames/{tag}_t.png",
                "next_file_name": f"frames/{tag}_t1.png",
                "flow_file": f"flow/{tag}.flo",
                "height": config.height,
                "width": config.width,
                "camouflage": bool(s.camouflage),
            }
        )
        for k, inst in enumerate(s.instances):
            mask_file = f"masks/{tag}_{k}.png"
            write_png(os.path.join(out_dir, mask_file), inst.mask.astype(np.uint8) * 255)
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": i,
                    "category_id": inst.class_id,
                    "bbox": [float(v) for v in inst.box.to_xywh()],
                    "area": int(inst.mask.sum()),
                    "iscrowd": 0,
                    "mask_file": mask_file,
                    "shape": inst.shape,
                    "velocity": [int(inst.velocity[0]), int(inst.velocity[1])],
                }
            )
            ann_id += 1
    cfg = asdict(config)
    doc = {
        "info": {"generator": "motionbox.synthdata", "scene_config": cfg},
        "images": images,
        "annotations": annotations,
        "categories": [{"id": CATEGORY_ID, "name": "object", "supercategory": "shape"}],
    }
    with open(os.path.join(out_dir, "annotations.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out_dir
