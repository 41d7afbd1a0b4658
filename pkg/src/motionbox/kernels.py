"""Hot inner loops, each with a numba body and a numpy twin.

The public names (``im2col``, ``col2im``, ``enumerate_box_pairs``,
``pair_distances``) dispatch to the numba versions unless ``MSW_DISABLE_JIT``
is set. Both variants accumulate in the same order, so they agree bit for bit.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# im2col / col2im


def im2col_numpy(xp, k, stride, ho, wo):
    c = xp.shape[0]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, ho * wo)


@njit
def im2col_numba(xp, k, stride, ho, wo):
    c = xp.shape[0]
    cols = np.empty((c * k * k, ho * wo), dtype=xp.dtype)
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for oy in range(ho):
                    iy = oy * stride + ki
                    base = oy * wo
                    if stride == 1:
                        for ox in range(wo):
                            cols[row, base + ox] = xp[ci, iy, kj + ox]
                    else:
                        for ox in range(wo):
                            cols[row, base + ox] = xp[ci, iy, ox * stride + kj]
    return cols


def col2im_numpy(cols, c, hp, wp, k, stride, ho, wo):
    out = np.zeros((c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            out[:, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride] += cols6[:, ki, kj]
    return out


@njit
def col2im_numba(cols, c, hp, wp, k, stride, ho, wo):
    out = np.zeros((c, hp, wp), dtype=cols.dtype)
    # (ki, kj) outermost so every output cell sums in the same order as the numpy twin
    for ki in range(k):
        for kj in range(k):
            for ci in range(c):
                row = (ci * k + ki) * k + kj
                for oy in range(ho):
                    iy = oy * stride + ki
                    base = oy * wo
                    if stride == 1:
                        for ox in range(wo):
                            out[ci, iy, kj + ox] += cols[row, base + ox]
                    else:
                        for ox in range(wo):
                            out[ci, iy, ox * stride + kj] += cols[row, base + ox]
    return out


# ---------------------------------------------------------------------------
# local pixel pairs


def _offsets(kernel_size, dilation):
    r = kernel_size // 2
    offs = [(di * dilation, dj * dilation) for di in range(-r, r + 1) for dj in range(-r, r + 1) if (di, dj) != (0, 0)]
    return np.array(offs, dtype=np.int64).reshape(-1, 2)


def enumerate_box_pairs_numpy(r0, c0, r1, c1, height, width, kernel_size, dilation):
    offs = _offsets(kernel_size, dilation)
    rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    pr = rr.reshape(-1, 1)
    pc = cc.reshape(-1, 1)
    qr = pr + offs[:, 0]
    qc = pc + offs[:, 1]
    inside_img = (qr >= 0) & (qr < height) & (qc >= 0) & (qc < width)
    q_in_box = (qr >= r0) & (qr < r1) & (qc >= c0) & (qc < c1)
    p_first = (pr < qr) | ((pr == qr) & (pc < qc))
    keep = inside_img & (~q_in_box | p_first)
    pr_b = np.broadcast_to(pr, qr.shape)[keep]
    pc_b = np.broadcast_to(pc, qc.shape)[keep]
    qr_k = qr[keep]
    qc_k = qc[keep]
    first = (pr_b < qr_k) | ((pr_b == qr_k) & (pc_b < qc_k))
    out = np.empty((pr_b.size, 4), dtype=np.int64)
    out[:, 0] = np.where(first, pr_b, qr_k)
    out[:, 1] = np.where(first, pc_b, qc_k)
    out[:, 2] = np.where(first, qr_k, pr_b)
    out[:, 3] = np.where(first, qc_k, pc_b)
    return out


@njit
def _enumerate_box_pairs_numba(r0, c0, r1, c1, height, width, offs):
    n_off = offs.shape[0]
    out = np.empty(((r1 - r0) * (c1 - c0) * n_off, 4), dtype=np.int64)
    n = 0
    for pr in range(r0, r1):
        for pc in range(c0, c1):
            for o in range(n_off):
                qr = pr + offs[o, 0]
                qc = pc + offs[o, 1]
                if qr < 0 or qr >= height or qc < 0 or qc >= width:
                    continue
                p_first = pr < qr or (pr == qr and pc < qc)
                q_in_box = r0 <= qr < r1 and c0 <= qc < c1
                if q_in_box and not p_first:
                    continue
                if p_first:
                    out[n, 0] = pr
                    out[n, 1] = pc
                    out[n, 2] = qr
                    out[n, 3] = qc
                else:
                    out[n, 0] = qr
                    out[n, 1] = qc
                    out[n, 2] = pr
                    out[n, 3] = pc
                n += 1
    return out[:n].copy()


def enumerate_box_pairs_numba(r0, c0, r1, c1, height, width, kernel_size, dilation):
    return _enumerate_box_pairs_numba(r0, c0, r1, c1, height, width, _offsets(kernel_size, dilation))


def pair_distances_numpy(feat, pairs):
    diff = feat[:, pairs[:, 0], pairs[:, 1]] - feat[:, pairs[:, 2], pairs[:, 3]]
    acc = np.zeros(pairs.shape[0], dtype=np.float64)
    for ch in range(feat.shape[0]):
        acc += diff[ch] * diff[ch]
    return np.sqrt(acc)


@njit
def pair_distances_numba(feat, pairs):
    n = pairs.shape[0]
    out = np.empty(n, dtype=np.float64)
    for e in range(n):
        acc = 0.0
        for ch in range(feat.shape[0]):
            d = feat[ch, pairs[e, 0], pairs[e, 1]] - feat[ch, pairs[e, 2], pairs[e, 3]]
            acc += d * d
        out[e] = np.sqrt(acc)
    return out


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    enumerate_box_pairs = enumerate_box_pairs_numba
    pair_distances = pair_distances_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    enumerate_box_pairs = enumerate_box_pairs_numpy
    pair_distances = pair_distances_numpy
