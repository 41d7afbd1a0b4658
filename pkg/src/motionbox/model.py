"""Two-stream encoder, mask branches, detection head and dynamic mask head.

The appearance and motion streams run through one backbone (one set of
parameters, gradients from both streams accumulate into it). Each stream gets
its own mask branch. The detection head reads the fused stride-4 map and, per
location, emits an objectness logit, LTRB box distances and a controller
vector that parameterizes a tiny per-instance mask head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import Box, nms

DETECTION_FUSIONS = ("sum", "max")
MASK_FUSIONS = ("sum", "max", "concat")


@dataclass(frozen=True)
class FusionSpec:
    detection_fusion: str = "sum"
    mask_fusion: str = "concat"

    def __post_init__(self):
        if self.detection_fusion not in DETECTION_FUSIONS:
            raise ValueError(f"detection_fusion must be one of {DETECTION_FUSIONS}")
        if self.mask_fusion not in MASK_FUSIONS:
            raise ValueError(f"mask_fusion must be one of {MASK_FUSIONS}")


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (16, 32, 64)
    mask_branch_width: int = 32
    mask_branch_layers: int = 4
    c_mask: int = 8
    head_width: int = 32
    dyn_channels: int = 8
    fusion: FusionSpec = field(default_factory=FusionSpec)
    motion_for_detection: bool = True
    motion_for_segmentation: bool = True
    score_threshold: float = 0.3
    nms_iou: float = 0.6
    center_radius: float = 1.5
    prior_prob: float = 0.01

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError("need at least two stages with positive widths")
        if self.c_mask <= 0 or self.mask_branch_width <= 0 or self.head_width <= 0:
            raise ValueError("channel counts must be positive")

    @property
    def stride(self):
        return 2 ** (len(self.widths) - 1)

    @property
    def mask_in_channels(self):
        if self.motion_for_segmentation and self.fusion.mask_fusion == "concat":
            return 2 * self.c_mask
        return self.c_mask


def dynamic_param_count(in_channels, hidden=8):
    """Weights and biases of the 1x1 head (in+2 -> hidden -> hidden -> 1)."""
    c = in_channels + 2
    return c * hidden + hidden + hidden * hidden + hidden + hidden + 1


def fuse(a, b, mode):
    if mode == "sum":
        return ad.channel_sum(a, b)
    if mode == "max":
        return ad.channel_max(a, b)
    if mode == "concat":
        return ad.concat_channels(a, b)
    raise ValueError(f"unknown fusion {mode!r}")


def relative_coords(h, w, stride, row, col, scale):
    """2xHxW map of (x - cx, y - cy) / scale in image pixels."""
    ys = (np.arange(h) + 0.5) * stride
    xs = (np.arange(w) + 0.5) * stride
    cy = (row + 0.5) * stride
    cx = (col + 0.5) * stride
    out = np.empty((2, h, w))
    out[0] = (xs[None, :] - cx) / scale
    out[1] = (ys[:, None] - cy) / scale
    return out


def dynamic_mask_head(f_mask, controller, center, stride, scale, hidden=8):
    """Decode ``controller`` into three 1x1 convs and apply them to ``f_mask``.

    Returns a 1xHxW sigmoid score map.
    """
    cin, h, w = f_mask.shape
    c = cin + 2
    expected = dynamic_param_count(cin, hidden)
    if controller.shape != (expected,):
        raise ValueError(f"controller has {controller.shape[0]} values, head needs {expected}")
    x = ad.concat_channels(f_mask, Tensor(relative_coords(h, w, stride, center[0], center[1], scale)))
    layers = ((c, hidden), (hidden, hidden), (hidden, 1))
    pos = 0
    chunks = []
    for cin_l, cout in layers:
        wn = cin_l * cout
        chunks.append((pos, pos + wn, pos + wn + cout, cin_l, cout))
        pos += wn + cout
    for n, (w0, w1, b1, cin_l, cout) in enumerate(chunks):
        weight = ad.reshape(ad.gather(controller, slice(w0, w1)), (cout, cin_l, 1, 1))
        bias = ad.gather(controller, slice(w1, b1))
        x = ad.conv2d(x, weight, bias)
        if n < len(chunks) - 1:
            x = ad.relu(x)
    return ad.sigmoid(x)


@dataclass
class Features:
    det: list  # fused detection map per backbone level
    mask_img: Tensor
    mask_flow: Tensor | None
    mask: Tensor

    @property
    def f_det(self):
        return self.det[-1]


@dataclass
class HeadOutput:
    obj_logits: Tensor  # 1xhxw
    ltrb: Tensor  # 4xhxw, in units of the stride
    controllers: Tensor  # Pxhxw


@dataclass
class Detection:
    box: Box
    score: float
    location: tuple
    controller: np.ndarray
    mask: np.ndarray | None = None  # HxW bool at image resolution
    score_map: np.ndarray | None = None  # hxw probabilities


def _kaiming(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class MotionSegModel:
    def __init__(self, config=None, seed=0):
        self.config = config or ModelConfig()
        self.params: dict[str, Tensor] = {}
        self._init(np.random.default_rng(seed))

    # -- parameters -------------------------------------------------------

    def _conv(self, rng, name, cin, cout, k=3):
        self.params[f"{name}.weight"] = Tensor(_kaiming(rng, (cout, cin, k, k)), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def _init(self, rng):
        cfg = self.config
        cin = 3
        for s, w in enumerate(cfg.widths):
            self._conv(rng, f"backbone.s{s}.c0", cin, w)
            self._conv(rng, f"backbone.s{s}.c1", w, w)
            cin = w
        top = cfg.widths[-1]
        for stream in ("img", "flow"):
            c = top
            for i in range(cfg.mask_branch_layers):
                self._conv(rng, f"mask_branch.{stream}.l{i}", c, cfg.mask_branch_width)
                c = cfg.mask_branch_width
            self._conv(rng, f"mask_branch.{stream}.out", c, cfg.c_mask)
        self._conv(rng, "head.tower", top, cfg.head_width)
        n_ctrl = dynamic_param_count(cfg.mask_in_channels, cfg.dyn_channels)
        self.n_controller = n_ctrl
        n_out = 1 + 4 + n_ctrl
        wt = rng.normal(0.0, 0.01, size=(n_out, cfg.head_width, 1, 1))
        bias = np.zeros(n_out)
        bias[0] = -math.log((1.0 - cfg.prior_prob) / cfg.prior_prob)
        # controller bias starts as one well-scaled dynamic head shared by all locations
        bias[5:] = self._dynamic_prior(rng, cfg.mask_in_channels, cfg.dyn_channels)
        self.params["head.out.weight"] = Tensor(wt, requires_grad=True)
        self.params["head.out.bias"] = Tensor(bias, requires_grad=True)

    @staticmethod
    def _dynamic_prior(rng, cin, hidden):
        c = cin + 2
        parts = []
        for a, b in ((c, hidden), (hidden, hidden), (hidden, 1)):
            parts.append(rng.normal(0.0, math.sqrt(2.0 / a), size=a * b))
            parts.append(np.zeros(b))
        return np.concatenate(parts)

    def parameters(self):
        return list(self.params.values())

    def backbone_parameters(self, stream="img"):
        """Backbone tensors used by ``stream``; both streams get the same objects."""
        if stream not in ("img", "flow"):
            raise ValueError(stream)
        return {k: v for k, v in self.params.items() if k.startswith("backbone.")}

    def count_parameters(self, prefix=""):
        return sum(t.data.size for k, t in self.params.items() if k.startswith(prefix))

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)

    # -- forward ------------------------------------------------------------

    def _c(self, name, x, stride=1, act=True):
        y = ad.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride, padding=1)
        return ad.relu(y) if act else y

    def backbone(self, x):
        levels = []
        for s in range(len(self.config.widths)):
            x = self._c(f"backbone.s{s}.c0", x, stride=1 if s == 0 else 2)
            x = self._c(f"backbone.s{s}.c1", x)
            levels.append(x)
        return levels

    def mask_branch(self, f3, stream):
        x = f3
        for i in range(self.config.mask_branch_layers):
            x = self._c(f"mask_branch.{stream}.l{i}", x)
        return self._c(f"mask_branch.{stream}.out", x, act=False)

    def encode(self, image, flow_rgb):
        """Run both streams. ``image`` and ``flow_rgb`` are 3xHxW tensors."""
        if image.shape != flow_rgb.shape:
            raise ValueError(f"image {image.shape} and flow {flow_rgb.shape} extents differ")
        cfg = self.config
        img_levels = self.backbone(image)
        need_flow = cfg.motion_for_detection or cfg.motion_for_segmentation
        flow_levels = self.backbone(flow_rgb) if need_flow else None
        if cfg.motion_for_detection:
            det = [fuse(a, b, cfg.fusion.detection_fusion) for a, b in zip(img_levels, flow_levels)]
        else:
            det = img_levels
        mask_img = self.mask_branch(img_levels[-1], "img")
        if cfg.motion_for_segmentation:
            mask_flow = self.mask_branch(flow_levels[-1], "flow")
            mask = fuse(mask_img, mask_flow, cfg.fusion.mask_fusion)
        else:
            mask_flow = None
            mask = mask_img
        return Features(det, mask_img, mask_flow, mask)

    def head(self, f_det):
        t = self._c("head.tower", f_det)
        out = ad.conv2d(t, self.params["head.out.weight"], self.params["head.out.bias"])
        return HeadOutput(
            ad.slice_channels(out, 0, 1),
            ad.slice_channels(out, 1, 5),
            ad.slice_channels(out, 5, 5 + self.n_controller),
        )

    def coord_scale(self, image_hw):
        return 0.5 * math.hypot(*image_hw)

    def mask_for(self, f_mask, controllers, row, col, image_hw):
        ctrl = ad.gather(controllers, (slice(None), row, col))
        return dynamic_mask_head(
            f_mask, ctrl, (row, col), self.config.stride, self.coord_scale(image_hw), self.config.dyn_channels
        )

    # -- inference ----------------------------------------------------------

    def detect(self, head_out, image_hw):
        """Threshold objectness, decode boxes and apply greedy NMS."""
        cfg = self.config
        s = cfg.stride
        prob = 1.0 / (1.0 + np.exp(-head_out.obj_logits.data[0]))
        rows, cols = np.nonzero(prob >= cfg.score_threshold)
        if rows.size == 0:
            return []
        ltrb = np.maximum(head_out.ltrb.data[:, rows, cols], 0.0) * s
        cx = (cols + 0.5) * s
        cy = (rows + 0.5) * s
        h, w = image_hw
        boxes = np.stack(
            [
                np.clip(cx - ltrb[0], 0, w),
                np.clip(cy - ltrb[1], 0, h),
                np.clip(cx + ltrb[2], 0, w),
                np.clip(cy + ltrb[3], 0, h),
            ],
            axis=1,
        )
        scores = prob[rows, cols]
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        idx = np.flatnonzero(valid)
        keep = idx[nms(boxes[idx], scores[idx], cfg.nms_iou)] if idx.size else []
        ctrl = head_out.controllers.data
        return [
            Detection(
                Box(*map(float, boxes[i])),
                float(scores[i]),
                (int(rows[i]), int(cols[i])),
                ctrl[:, rows[i], cols[i]].copy(),
            )
            for i in keep
        ]

    def predict(self, image, flow_rgb):
        """Detections with masks for one frame; inputs are prepared 3xHxW tensors."""
        feats = self.encode(image, flow_rgb)
        out = self.head(feats.f_det)
        hw = image.shape[1:]
        dets = self.detect(out, hw)
        for d in dets:
            m = self.mask_for(feats.mask, out.controllers, d.location[0], d.location[1], hw)
            d.score_map = m.data[0]
            d.mask = upsample_bilinear(d.score_map, hw) >= 0.5
        return dets, feats


def upsample_bilinear(x, out_hw):
    """Half-pixel-centered bilinear resize of a 2-D map."""
    h, w = x.shape
    oh, ow = out_hw

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, oh)
    c0, c1, fc = axis(w, ow)
    top = x[r0][:, c0] * (1 - fc) + x[r0][:, c1] * fc
    bot = x[r1][:, c0] * (1 - fc) + x[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def prepare_image(image_u8):
    """HxWx3 uint8 -> 3xHxW tensor centered on zero."""
    return Tensor(np.moveaxis(np.asarray(image_u8, dtype=np.float64) / 255.0 - 0.5, -1, 0))


def prepare_flow(flow_rgb):
    """HxWx3 color-wheel floats in [0, 1] -> 3xHxW tensor centered on zero."""
    return Tensor(np.moveaxis(np.asarray(flow_rgb, dtype=np.float64) - 0.5, -1, 0))
