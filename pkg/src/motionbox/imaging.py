"""Color spaces, flow encoding and image/flow file I/O.

Images are HxWx3 ``uint8`` arrays in sRGB; flow fields are HxWx2 float arrays
holding (u, v) = (dx, dy) in pixels from frame t to frame t+1.
"""

import struct

import numpy as np
from PIL import Image

FLO_TAG = b"PIEH"

# sRGB (D65) -> XYZ; rows sum to the D65 white point.
_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
D65_WHITE = _SRGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0


def srgb_to_linear(rgb):
    """Undo the sRGB transfer curve; input in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)


def _lab_f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3.0 * _DELTA**2) + 4.0 / 29.0)


def srgb_to_lab(image):
    """CIE L*a*b* (D65) of an 8-bit sRGB image, returned as HxWx3 float64.

    Accepts any array whose last axis holds R, G, B.
    """
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    xyz = srgb_to_linear(rgb) @ _SRGB_TO_XYZ.T
    f = _lab_f(xyz / D65_WHITE)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def delta_e(lab1, lab2):
    """CIE76 color difference."""
    d = np.asarray(lab1, dtype=np.float64) - np.asarray(lab2, dtype=np.float64)
    return np.sqrt((d * d).sum(axis=-1))


def _hsv_to_rgb(h, s, v):
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    frac = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * frac)
    t = v * (1.0 - s * (1.0 - frac))
    r = np.choose(sector, [v, q, p, p, t, v])
    g = np.choose(sector, [t, v, v, q, p, p])
    b = np.choose(sector, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def flow_magnitude_scale(flow, percentile=99.0, floor=1e-6):
    mag = np.hypot(flow[..., 0], flow[..., 1])
    return max(float(np.percentile(mag, percentile)), floor)


def flow_to_rgb(flow, max_magnitude=None):
    """Color-wheel encoding of a flow field as HxWx3 floats in [0, 1].

    Hue follows the direction ``atan2(v, u)``, saturation the magnitude
    relative to ``max_magnitude`` (clamped at 1), value is fixed at 1 so
    zero motion is white. Without ``max_magnitude`` the 99th percentile of
    the field's magnitudes is used.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if max_magnitude is None:
        max_magnitude = flow_magnitude_scale(flow)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    hue = np.arctan2(v, u) / (2.0 * np.pi)
    sat = np.minimum(mag / max_magnitude, 1.0)
    return _hsv_to_rgb(hue, sat, np.ones_like(sat))


def neutral_flow_rgb(height, width):
    return np.ones((height, width, 3))


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flo(path, flow):
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be HxWx2, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_TAG)
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(flow).tobytes())


def read_flo(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != FLO_TAG:
        raise ValueError(f"{path}: bad .flo magic {buf[:4]!r}")
    if len(buf) < 12:
        raise ValueError(f"{path}: truncated .flo header")
    w, h = struct.unpack_from("<ii", buf, 4)
    if w <= 0 or h <= 0:
        raise ValueError(f"{path}: invalid extents {w}x{h}")
    need = 12 + 8 * w * h
    if len(buf) < need:
        raise ValueError(f"{path}: truncated .flo payload ({len(buf)} < {need} bytes)")
    return np.frombuffer(buf, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2).copy()


# ---------------------------------------------------------------------------
# PNG


def write_png(path, image):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ValueError("write_png expects uint8 pixels")
    if arr.ndim == 2:
        img = Image.fromarray(arr, mode="L")
    elif arr.ndim == 3 and arr.shape[2] == 3:
        img = Image.fromarray(arr, mode="RGB")
    else:
        raise ValueError(f"unsupported image shape {arr.shape}")
    # fixed encoder settings keep regenerated files byte-identical
    img.save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path):
    """Read a PNG as HxWx3 uint8; grayscale is replicated into three channels."""
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise ValueError(f"{path}: not a PNG ({img.format})")
            if img.mode in ("I", "I;16", "I;16B", "F"):
                raise ValueError(f"{path}: unsupported bit depth (mode {img.mode})")
            img.load()
            if img.mode == "RGBA":
                return np.asarray(img)[..., :3].copy()
            return np.asarray(img.convert("RGB")).copy()
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: malformed PNG ({exc})") from exc


def read_mask_png(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 127
