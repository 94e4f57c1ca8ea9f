"""Numba-accelerated implementations of the hot numeric kernels.

Same function contract as _kernels_numpy. Loops are written so every
output element is produced by exactly one iteration (no racy reductions),
which keeps results deterministic run-to-run.
"""

import math

import numpy as np
from numba import njit, prange

NAME = "numba"


# ---------------------------------------------------------------- conv2d

@njit(cache=True)
def _im2col_nb(x, kh, kw, stride, pad, ho, wo):
    cin = x.shape[0]
    h = x.shape[1]
    w = x.shape[2]
    cols = np.zeros((cin * kh * kw, ho * wo), dtype=x.dtype)
    for ci in range(cin):
        for a in range(kh):
            for b in range(kw):
                row = (ci * kh + a) * kw + b
                for i in range(ho):
                    ys = i * stride + a - pad
                    if ys < 0 or ys >= h:
                        continue
                    for j in range(wo):
                        xs = j * stride + b - pad
                        if 0 <= xs < w:
                            cols[row, i * wo + j] = x[ci, ys, xs]
    return cols


@njit(cache=True)
def _conv2d_fwd_nb(x, w, stride, pad):
    cout = w.shape[0]
    cin = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    ho = (x.shape[1] + 2 * pad - kh) // stride + 1
    wo = (x.shape[2] + 2 * pad - kw) // stride + 1
    cols = _im2col_nb(x, kh, kw, stride, pad, ho, wo)
    w2 = np.ascontiguousarray(w.reshape(cout, cin * kh * kw))
    y = np.dot(w2, cols)
    return y.reshape(cout, ho, wo)


def conv2d_fwd(x, w, stride, pad):
    return _conv2d_fwd_nb(x, w, stride, pad)


@njit(cache=True)
def _conv2d_bwd_w_nb(gy, x, kh, kw, stride, pad):
    cout = gy.shape[0]
    ho = gy.shape[1]
    wo = gy.shape[2]
    cols = _im2col_nb(x, kh, kw, stride, pad, ho, wo)
    gy2 = np.ascontiguousarray(gy.reshape(cout, ho * wo))
    gw = np.dot(gy2, cols.T)
    return gw.reshape(cout, x.shape[0], kh, kw)


def conv2d_bwd_w(gy, x, kh, kw, stride, pad):
    return _conv2d_bwd_w_nb(gy, x, kh, kw, stride, pad)


@njit(cache=True, parallel=True)
def _col2im_nb(gcols, cin, kh, kw, stride, pad, h, wd, ho, wo):
    gx = np.zeros((cin, h, wd), dtype=gcols.dtype)
    for ci in prange(cin):
        for a in range(kh):
            for b in range(kw):
                row = (ci * kh + a) * kw + b
                for i in range(ho):
                    ys = i * stride + a - pad
                    if ys < 0 or ys >= h:
                        continue
                    for j in range(wo):
                        xs = j * stride + b - pad
                        if 0 <= xs < wd:
                            gx[ci, ys, xs] += gcols[row, i * wo + j]
    return gx


@njit(cache=True)
def _conv2d_bwd_x_nb(gy, w, stride, pad, h, wd):
    cout = w.shape[0]
    cin = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    ho = gy.shape[1]
    wo = gy.shape[2]
    w2 = np.ascontiguousarray(w.reshape(cout, cin * kh * kw))
    gy2 = np.ascontiguousarray(gy.reshape(cout, ho * wo))
    gcols = np.dot(w2.T, gy2)
    return _col2im_nb(gcols, cin, kh, kw, stride, pad, h, wd, ho, wo)


def conv2d_bwd_x(gy, w, stride, pad, h, wd):
    return _conv2d_bwd_x_nb(gy, w, stride, pad, h, wd)


# ------------------------------------------------------ average pooling

@njit(cache=True)
def _avgpool_fwd_nb(x2, kernel, stride):
    m, d = x2.shape
    dout = (d - kernel) // stride + 1
    y = np.empty((m, dout), dtype=x2.dtype)
    for r in range(m):
        for o in range(dout):
            s = 0.0
            for k in range(kernel):
                s += x2[r, o * stride + k]
            y[r, o] = s / kernel
    return y


def avgpool_fwd(x2, kernel, stride):
    return _avgpool_fwd_nb(x2, kernel, stride)


@njit(cache=True)
def _avgpool_bwd_nb(gy2, d, kernel, stride):
    m, dout = gy2.shape
    gx = np.zeros((m, d), dtype=gy2.dtype)
    for r in range(m):
        for o in range(dout):
            share = gy2[r, o] / kernel
            for k in range(kernel):
                gx[r, o * stride + k] += share
    return gx


def avgpool_bwd(gy2, d, kernel, stride):
    return _avgpool_bwd_nb(gy2, d, kernel, stride)


# -------------------------------------------------- correlation volume

@njit(cache=True, parallel=True)
def _corr_fwd_nb(fl, fr):
    c, h, w = fl.shape
    vol = np.empty((h, w, w), dtype=fl.dtype)
    for i in prange(h):
        a = np.ascontiguousarray(fl[:, i, :].T)   # [W, C]
        b = np.ascontiguousarray(fr[:, i, :])     # [C, W]
        vol[i] = np.dot(a, b)
    return vol


def corr_fwd(fl, fr):
    return _corr_fwd_nb(fl, fr)


@njit(cache=True, parallel=True)
def _corr_bwd_nb(g, fl, fr):
    c, h, w = fl.shape
    gfl = np.empty_like(fl)
    gfr = np.empty_like(fr)
    for i in prange(h):
        gi = np.ascontiguousarray(g[i])           # [W(j), W(k)]
        fri = np.ascontiguousarray(fr[:, i, :])   # [C, W(k)]
        fli = np.ascontiguousarray(fl[:, i, :])   # [C, W(j)]
        gfl[:, i, :] = np.dot(fri, gi.T)
        gfr[:, i, :] = np.dot(fli, gi)
    return gfl, gfr


def corr_bwd(g, fl, fr):
    return _corr_bwd_nb(g, fl, fr)


# ------------------------------------------------------ pyramid lookup

@njit(cache=True)
def _lookup_fwd_nb(vol, disp, scale, radius):
    h, w, wl = vol.shape
    nt = 2 * radius + 1
    out = np.empty((nt, h, w), dtype=vol.dtype)
    for i in range(h):
        for j in range(w):
            center = (j - disp[i, j]) / scale
            for t in range(nt):
                pos = center + (t - radius)
                if pos <= 0.0:
                    out[t, i, j] = vol[i, j, 0]
                elif pos >= wl - 1:
                    out[t, i, j] = vol[i, j, wl - 1]
                else:
                    k0 = int(math.floor(pos))
                    f = pos - k0
                    out[t, i, j] = vol[i, j, k0] * (1.0 - f) + vol[i, j, k0 + 1] * f
    return out


def lookup_fwd(vol, disp, scale, radius):
    return _lookup_fwd_nb(vol, disp, scale, radius)


@njit(cache=True)
def _lookup_bwd_nb(g, vol, disp, scale, radius):
    h, w, wl = vol.shape
    nt = 2 * radius + 1
    gvol = np.zeros_like(vol)
    gdisp = np.zeros_like(disp)
    for i in range(h):
        for j in range(w):
            center = (j - disp[i, j]) / scale
            acc = 0.0
            for t in range(nt):
                pos = center + (t - radius)
                if pos <= 0.0:
                    gvol[i, j, 0] += g[t, i, j]
                elif pos >= wl - 1:
                    gvol[i, j, wl - 1] += g[t, i, j]
                else:
                    k0 = int(math.floor(pos))
                    f = pos - k0
                    gvol[i, j, k0] += g[t, i, j] * (1.0 - f)
                    gvol[i, j, k0 + 1] += g[t, i, j] * f
                    acc += g[t, i, j] * (vol[i, j, k0 + 1] - vol[i, j, k0]) * (-1.0 / scale)
            gdisp[i, j] = acc
    return gvol, gdisp


def lookup_bwd(g, vol, disp, scale, radius):
    return _lookup_bwd_nb(g, vol, disp, scale, radius)


# -------------------------------------------- bilinear 2x upsampling

@njit(cache=True, parallel=True)
def _up2_fwd_nb(x):
    c, h, w = x.shape
    out = np.empty((c, 2 * h, 2 * w), dtype=x.dtype)
    for ci in prange(c):
        for i in range(2 * h):
            sy = (i + 0.5) / 2.0 - 0.5
            y0 = int(math.floor(sy))
            fy = sy - y0
            y0c = min(max(y0, 0), h - 1)
            y1c = min(max(y0 + 1, 0), h - 1)
            for j in range(2 * w):
                sx = (j + 0.5) / 2.0 - 0.5
                x0 = int(math.floor(sx))
                fx = sx - x0
                x0c = min(max(x0, 0), w - 1)
                x1c = min(max(x0 + 1, 0), w - 1)
                out[ci, i, j] = ((1 - fy) * (1 - fx) * x[ci, y0c, x0c]
                                 + (1 - fy) * fx * x[ci, y0c, x1c]
                                 + fy * (1 - fx) * x[ci, y1c, x0c]
                                 + fy * fx * x[ci, y1c, x1c])
    return out


def up2_fwd(x):
    return _up2_fwd_nb(x)


@njit(cache=True, parallel=True)
def _up2_bwd_nb(gy, h, w):
    c = gy.shape[0]
    gx = np.zeros((c, h, w), dtype=gy.dtype)
    for ci in prange(c):
        for i in range(2 * h):
            sy = (i + 0.5) / 2.0 - 0.5
            y0 = int(math.floor(sy))
            fy = sy - y0
            y0c = min(max(y0, 0), h - 1)
            y1c = min(max(y0 + 1, 0), h - 1)
            for j in range(2 * w):
                sx = (j + 0.5) / 2.0 - 0.5
                x0 = int(math.floor(sx))
                fx = sx - x0
                x0c = min(max(x0, 0), w - 1)
                x1c = min(max(x0 + 1, 0), w - 1)
                g = gy[ci, i, j]
                gx[ci, y0c, x0c] += (1 - fy) * (1 - fx) * g
                gx[ci, y0c, x1c] += (1 - fy) * fx * g
                gx[ci, y1c, x0c] += fy * (1 - fx) * g
                gx[ci, y1c, x1c] += fy * fx * g
    return gx


def up2_bwd(gy, h, w):
    return _up2_bwd_nb(gy, h, w)


# ------------------------------------------- convex 4x upsampling

@njit(cache=True)
def _convex_fwd_nb(d, wts):
    h, w = d.shape
    out = np.zeros((4 * h, 4 * w), dtype=d.dtype)
    for i in range(h):
        for j in range(w):
            for p in range(16):
                acc = 0.0
                n = 0
                for dy in range(-1, 2):
                    yy = min(max(i + dy, 0), h - 1)
                    for dx in range(-1, 2):
                        xx = min(max(j + dx, 0), w - 1)
                        acc += wts[n, p, i, j] * 4.0 * d[yy, xx]
                        n += 1
                out[4 * i + p // 4, 4 * j + p % 4] = acc
    return out


def convex_fwd(d, wts):
    return _convex_fwd_nb(d, wts)


@njit(cache=True)
def _convex_bwd_nb(g, d, wts):
    h, w = d.shape
    gd = np.zeros_like(d)
    gw = np.empty_like(wts)
    for i in range(h):
        for j in range(w):
            for p in range(16):
                gc = g[4 * i + p // 4, 4 * j + p % 4]
                n = 0
                for dy in range(-1, 2):
                    yy = min(max(i + dy, 0), h - 1)
                    for dx in range(-1, 2):
                        xx = min(max(j + dx, 0), w - 1)
                        gw[n, p, i, j] = gc * 4.0 * d[yy, xx]
                        gd[yy, xx] += gc * wts[n, p, i, j] * 4.0
                        n += 1
    return gd, gw


def convex_bwd(g, d, wts):
    return _convex_bwd_nb(g, d, wts)


# --------------------------------------------------- spike encoding

@njit(cache=True, parallel=True)
def _encode_nb(frames, threshold, noise, has_noise):
    t, h, w = frames.shape
    spikes = np.zeros((t, h, w), dtype=np.uint8)
    resid = np.zeros((h, w), dtype=np.float64)
    for i in prange(h):
        for j in range(w):
            v = 0.0
            for step in range(t):
                inc = frames[step, i, j]
                if has_noise:
                    inc = inc + noise[step, i, j]
                    if inc < 0.0:
                        inc = 0.0
                v += inc
                if v >= threshold:
                    spikes[step, i, j] = 1
                    while v >= threshold:
                        v -= threshold
            resid[i, j] = v
    return spikes, resid


_DUMMY = np.zeros((1, 1, 1), dtype=np.float64)


def encode_fwd(frames, threshold, noise):
    if noise is None:
        return _encode_nb(frames, threshold, _DUMMY, False)
    return _encode_nb(frames, threshold, noise, True)


@njit(cache=True, parallel=True)
def _tfi_nb(spikes, center_step, max_window):
    t, h, w = spikes.shape
    out = np.zeros((h, w), dtype=np.float64)
    lo = max(1, center_step - max_window)
    hi = min(t, center_step + max_window)
    for i in prange(h):
        for j in range(w):
            before = -1
            for s in range(center_step, lo - 1, -1):
                if spikes[s - 1, i, j] != 0:
                    before = s
                    break
            if before < 0:
                continue
            after = -1
            for s in range(center_step + 1, hi + 1):
                if spikes[s - 1, i, j] != 0:
                    after = s
                    break
            if after > 0:
                out[i, j] = 1.0 / (after - before)
    return out


def tfi_fwd(spikes, center_step, max_window):
    return _tfi_nb(spikes, center_step, max_window)
