"""Pure-numpy implementations of the hot numeric kernels.

This is the fallback path used when numba is unavailable or when
SPIKEDEPTH_BACKEND=numpy is set. Both backends implement the same
function contract (see backend.py) and must agree bit-for-bit on
integer/spike outputs and to float rounding on dense math.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


# ---------------------------------------------------------------- conv2d

def _im2col(x, kh, kw, stride, pad):
    cin, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(
        cin * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d_fwd(x, w, stride, pad):
    cout, cin, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    y = w.reshape(cout, cin * kh * kw) @ cols
    return y.reshape(cout, ho, wo)


def conv2d_bwd_w(gy, x, kh, kw, stride, pad):
    cout = gy.shape[0]
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    gw = gy.reshape(cout, ho * wo) @ cols.T
    return gw.reshape(cout, x.shape[0], kh, kw)


def conv2d_bwd_x(gy, w, stride, pad, h, wd):
    cout, cin, kh, kw = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    gcols = w.reshape(cout, -1).T @ gy.reshape(cout, ho * wo)
    gcols = gcols.reshape(cin, kh, kw, ho, wo)
    gxp = np.zeros((cin, h + 2 * pad, wd + 2 * pad), dtype=gy.dtype)
    for a in range(kh):
        for b in range(kw):
            gxp[:, a:a + stride * (ho - 1) + 1:stride,
                b:b + stride * (wo - 1) + 1:stride] += gcols[:, a, b]
    if pad:
        return np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + wd])
    return gxp


# ------------------------------------------------------ average pooling

def avgpool_fwd(x2, kernel, stride):
    win = sliding_window_view(x2, kernel, axis=1)[:, ::stride]
    return win.mean(axis=2)


def avgpool_bwd(gy2, d, kernel, stride):
    m, dout = gy2.shape
    gx = np.zeros((m, d), dtype=gy2.dtype)
    share = gy2 / kernel
    for k in range(kernel):
        gx[:, k:k + stride * (dout - 1) + 1:stride] += share
    return gx


# -------------------------------------------------- correlation volume

def corr_fwd(fl, fr):
    a = np.ascontiguousarray(fl.transpose(1, 2, 0))   # [H,W,C]
    b = np.ascontiguousarray(fr.transpose(1, 0, 2))   # [H,C,W]
    return np.matmul(a, b)


def corr_bwd(g, fl, fr):
    # gfl[c,i,j] = sum_k g[i,j,k] fr[c,i,k]
    gfl = np.matmul(g, np.ascontiguousarray(fr.transpose(1, 2, 0)))
    # gfr[c,i,k] = sum_j g[i,j,k] fl[c,i,j]
    gfr = np.matmul(np.ascontiguousarray(g.transpose(0, 2, 1)),
                    np.ascontiguousarray(fl.transpose(1, 2, 0)))
    return (np.ascontiguousarray(gfl.transpose(2, 0, 1)),
            np.ascontiguousarray(gfr.transpose(2, 0, 1)))


# ------------------------------------------------------ pyramid lookup

def _lookup_pos(vol, disp, scale, radius):
    h, w, wl = vol.shape
    jj = np.arange(w, dtype=disp.dtype)[None, :]
    center = (jj - disp) / scale
    return center, wl


def lookup_fwd(vol, disp, scale, radius):
    h, w, wl = vol.shape
    center, _ = _lookup_pos(vol, disp, scale, radius)
    ii = np.arange(h)[:, None]
    jj = np.arange(w)[None, :]
    out = np.empty((2 * radius + 1, h, w), dtype=vol.dtype)
    for t, dlt in enumerate(range(-radius, radius + 1)):
        pos = np.clip(center + dlt, 0.0, float(wl - 1))
        if wl == 1:
            out[t] = vol[ii, jj, 0]
            continue
        k0 = np.minimum(np.floor(pos).astype(np.int64), wl - 2)
        f = pos - k0
        v0 = vol[ii, jj, k0]
        v1 = vol[ii, jj, k0 + 1]
        out[t] = v0 * (1.0 - f) + v1 * f
    return out


def lookup_bwd(g, vol, disp, scale, radius):
    h, w, wl = vol.shape
    center, _ = _lookup_pos(vol, disp, scale, radius)
    ii = np.broadcast_to(np.arange(h)[:, None], (h, w))
    jj = np.broadcast_to(np.arange(w)[None, :], (h, w))
    gvol = np.zeros_like(vol)
    gdisp = np.zeros_like(disp)
    for t, dlt in enumerate(range(-radius, radius + 1)):
        raw = center + dlt
        inside = (raw > 0.0) & (raw < wl - 1)
        pos = np.clip(raw, 0.0, float(wl - 1))
        if wl == 1:
            np.add.at(gvol, (ii, jj, np.zeros_like(ii)), g[t])
            continue
        k0 = np.minimum(np.floor(pos).astype(np.int64), wl - 2)
        f = pos - k0
        np.add.at(gvol, (ii, jj, k0), g[t] * (1.0 - f))
        np.add.at(gvol, (ii, jj, k0 + 1), g[t] * f)
        v0 = vol[ii, jj, k0]
        v1 = vol[ii, jj, k0 + 1]
        # d pos / d disp = -1/scale, zero where clamped to the edge
        gdisp += np.where(inside, g[t] * (v1 - v0) * (-1.0 / scale), 0.0)
    return gvol, gdisp


# -------------------------------------------- bilinear 2x upsampling

def _up2_matrix(n, dtype):
    """[2n, n] interpolation matrix, half-pixel centers, edge clamp."""
    p = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        s = (i + 0.5) / 2.0 - 0.5
        y0 = int(np.floor(s))
        f = s - y0
        p[i, min(max(y0, 0), n - 1)] += 1.0 - f
        p[i, min(max(y0 + 1, 0), n - 1)] += f
    return p


def up2_fwd(x):
    c, h, w = x.shape
    py = _up2_matrix(h, x.dtype)
    px = _up2_matrix(w, x.dtype)
    return np.einsum("iy,cyx,jx->cij", py, x, px, optimize=True)


def up2_bwd(gy, h, w):
    py = _up2_matrix(h, gy.dtype)
    px = _up2_matrix(w, gy.dtype)
    return np.einsum("iy,cij,jx->cyx", py, gy, px, optimize=True)


# ------------------------------------------- convex 4x upsampling

_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def _neighbor_indices(h, w):
    iy = np.arange(h)[:, None]
    ix = np.arange(w)[None, :]
    idx = []
    for dy, dx in _OFFSETS:
        yy = np.clip(iy + dy, 0, h - 1)
        xx = np.clip(ix + dx, 0, w - 1)
        idx.append((np.broadcast_to(yy, (h, w)), np.broadcast_to(xx, (h, w))))
    return idx


def convex_fwd(d, wts):
    h, w = d.shape
    idx = _neighbor_indices(h, w)
    coarse = np.zeros((16, h, w), dtype=d.dtype)
    for n, (yy, xx) in enumerate(idx):
        coarse += wts[n] * (4.0 * d[yy, xx])[None]
    return coarse.reshape(4, 4, h, w).transpose(2, 0, 3, 1).reshape(4 * h, 4 * w)


def convex_bwd(g, d, wts):
    h, w = d.shape
    gc = g.reshape(h, 4, w, 4).transpose(1, 3, 0, 2).reshape(16, h, w)
    idx = _neighbor_indices(h, w)
    gd = np.zeros_like(d)
    gw = np.empty_like(wts)
    for n, (yy, xx) in enumerate(idx):
        gw[n] = gc * (4.0 * d[yy, xx])[None]
        contrib = (gc * wts[n]).sum(axis=0) * 4.0
        np.add.at(gd, (yy, xx), contrib)
    return gd, gw


# --------------------------------------------------- spike encoding

def encode_fwd(frames, threshold, noise):
    t = frames.shape[0]
    v = np.zeros(frames.shape[1:], dtype=np.float64)
    spikes = np.zeros(frames.shape, dtype=np.uint8)
    for step in range(t):
        if noise is None:
            inc = frames[step]
        else:
            inc = np.maximum(frames[step] + noise[step], 0.0)
        v += inc
        fired = v >= threshold
        if fired.any():
            spikes[step][fired] = 1
            while True:
                over = v >= threshold
                if not over.any():
                    break
                v[over] -= threshold
    return spikes, v


def tfi_fwd(spikes, center_step, max_window):
    t, h, w = spikes.shape
    lo = max(1, center_step - max_window)          # 1-indexed
    hi = min(t, center_step + max_window)
    seg_b = spikes[lo - 1:center_step]             # candidates at/before
    seg_a = spikes[center_step:hi]                 # strictly after
    out = np.zeros((h, w), dtype=np.float64)
    if seg_b.shape[0] == 0 or seg_a.shape[0] == 0:
        return out
    has_b = seg_b.any(axis=0)
    has_a = seg_a.any(axis=0)
    ib = seg_b.shape[0] - 1 - np.argmax(seg_b[::-1], axis=0)
    ia = np.argmax(seg_a, axis=0)
    before = lo + ib
    after = center_step + 1 + ia
    both = has_b & has_a
    interval = (after - before).astype(np.float64)
    np.divide(1.0, interval, out=out, where=both)
    out[~both] = 0.0
    return out
