"""Hot numeric kernels: convolution, separable blur, triangle z-buffering,
bilinear texture paste and texel-gradient scatter.

Every kernel exists twice: a numba @njit version and a pure-numpy version.
The active backend is chosen at import time from the ADVREAL_NUMBA environment
variable ("0"/"false" forces numpy, default is numba when importable) and can
be switched at runtime with `use_backend` (used by the equivalence tests and
by benchmarks/bench_kernels.py).

All kernels are deterministic: parallel loops only ever write disjoint output
elements, and every accumulation happens in a fixed sequential order.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_env = os.environ.get("ADVREAL_NUMBA", "1").strip().lower()
_WANT_NUMBA = _env not in ("0", "false", "no", "off")

HAS_NUMBA = False
if _WANT_NUMBA:
    try:
        from numba import njit, prange

        HAS_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        HAS_NUMBA = False

_BACKEND = "numba" if HAS_NUMBA else "numpy"


def active_backend() -> str:
    return _BACKEND


@contextmanager
def use_backend(name: str):
    """Temporarily force the 'numba' or 'numpy' kernel implementations."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    previous = _BACKEND
    _BACKEND = name
    try:
        yield
    finally:
        _BACKEND = previous


# ---------------------------------------------------------------------------
# 2D convolution (channels-first, zero padding, square stride)
# ---------------------------------------------------------------------------


def _conv2d_forward_np(xp, w, b, stride):
    oc, ic, kh, kw = w.shape
    oh = (xp.shape[1] - kh) // stride + 1
    ow = (xp.shape[2] - kw) // stride + 1
    out = np.empty((oc, oh, ow), dtype=np.float64)
    out[:] = b[:, None, None]
    for ky in range(kh):
        for kx in range(kw):
            xs = xp[:, ky : ky + stride * (oh - 1) + 1 : stride,
                    kx : kx + stride * (ow - 1) + 1 : stride]
            out += np.tensordot(w[:, :, ky, kx], xs, axes=([1], [0]))
    return out


def _conv2d_backward_input_np(gout, w, stride, hp, wp):
    oc, ic, kh, kw = w.shape
    oh, ow = gout.shape[1], gout.shape[2]
    gxp = np.zeros((ic, hp, wp), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            contrib = np.tensordot(w[:, :, ky, kx], gout, axes=([0], [0]))
            gxp[:, ky : ky + stride * (oh - 1) + 1 : stride,
                kx : kx + stride * (ow - 1) + 1 : stride] += contrib
    return gxp


def _conv2d_backward_weights_np(gout, xp, kh, kw, stride):
    oc = gout.shape[0]
    ic = xp.shape[0]
    oh, ow = gout.shape[1], gout.shape[2]
    gw = np.empty((oc, ic, kh, kw), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            xs = xp[:, ky : ky + stride * (oh - 1) + 1 : stride,
                    kx : kx + stride * (ow - 1) + 1 : stride]
            gw[:, :, ky, kx] = np.tensordot(gout, xs, axes=([1, 2], [1, 2]))
    gb = gout.sum(axis=(1, 2))
    return gw, gb


if HAS_NUMBA:

    @njit(cache=True, parallel=True)
    def _conv2d_forward_nb(xp, w, b, stride):
        oc, ic, kh, kw = w.shape
        oh = (xp.shape[1] - kh) // stride + 1
        ow = (xp.shape[2] - kw) // stride + 1
        out = np.empty((oc, oh, ow), dtype=np.float64)
        for o in prange(oc):
            for oy in range(oh):
                for ox in range(ow):
                    acc = b[o]
                    for i in range(ic):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += w[o, i, ky, kx] * xp[i, oy * stride + ky, ox * stride + kx]
                    out[o, oy, ox] = acc
        return out

    @njit(cache=True, parallel=True)
    def _conv2d_backward_input_nb(gout, w, stride, hp, wp):
        oc, ic, kh, kw = w.shape
        oh, ow = gout.shape[1], gout.shape[2]
        gxp = np.zeros((ic, hp, wp), dtype=np.float64)
        for i in prange(ic):
            for o in range(oc):
                for oy in range(oh):
                    for ox in range(ow):
                        g = gout[o, oy, ox]
                        for ky in range(kh):
                            for kx in range(kw):
                                gxp[i, oy * stride + ky, ox * stride + kx] += w[o, i, ky, kx] * g
        return gxp

    @njit(cache=True, parallel=True)
    def _conv2d_backward_weights_nb(gout, xp, kh, kw, stride):
        oc = gout.shape[0]
        ic = xp.shape[0]
        oh, ow = gout.shape[1], gout.shape[2]
        gw = np.zeros((oc, ic, kh, kw), dtype=np.float64)
        gb = np.zeros(oc, dtype=np.float64)
        for o in prange(oc):
            acc_b = 0.0
            for oy in range(oh):
                for ox in range(ow):
                    g = gout[o, oy, ox]
                    acc_b += g
                    for i in range(ic):
                        for ky in range(kh):
                            for kx in range(kw):
                                gw[o, i, ky, kx] += g * xp[i, oy * stride + ky, ox * stride + kx]
            gb[o] = acc_b
        return gw, gb


def _pad_chw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x, w, b, stride=1, pad=0):
    """x (IC,H,W), w (OC,IC,KH,KW), b (OC,) -> (OC,OH,OW)."""
    xp = np.ascontiguousarray(_pad_chw(np.asarray(x, dtype=np.float64), pad))
    w = np.ascontiguousarray(w, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if _BACKEND == "numba":
        return _conv2d_forward_nb(xp, w, b, stride)
    return _conv2d_forward_np(xp, w, b, stride)


def conv2d_backward_input(gout, w, x_shape, stride=1, pad=0):
    """Gradient w.r.t. the (unpadded) convolution input."""
    ic, h, wd = x_shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if _BACKEND == "numba":
        gxp = _conv2d_backward_input_nb(gout, w, stride, hp, wp)
    else:
        gxp = _conv2d_backward_input_np(gout, w, stride, hp, wp)
    if pad == 0:
        return gxp
    return gxp[:, pad:-pad, pad:-pad]


def conv2d_backward_weights(gout, x, kh, kw, stride=1, pad=0):
    """Gradients w.r.t. weights and bias."""
    xp = np.ascontiguousarray(_pad_chw(np.asarray(x, dtype=np.float64), pad))
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    if _BACKEND == "numba":
        return _conv2d_backward_weights_nb(gout, xp, kh, kw, stride)
    return _conv2d_backward_weights_np(gout, xp, kh, kw, stride)


# ---------------------------------------------------------------------------
# Separable valid-mode correlation (SSIM windowing)
# ---------------------------------------------------------------------------


def _blur_valid_np(x, k):
    t = k.size
    tmp = sliding_window_view(x, t, axis=0) @ k
    return sliding_window_view(tmp, t, axis=1) @ k


if HAS_NUMBA:

    @njit(cache=True)
    def _blur_valid_nb(x, k):
        h, w = x.shape
        t = k.size
        oh = h - t + 1
        ow = w - t + 1
        tmp = np.empty((oh, w), dtype=np.float64)
        for y in range(oh):
            for xx in range(w):
                acc = 0.0
                for i in range(t):
                    acc += x[y + i, xx] * k[i]
                tmp[y, xx] = acc
        out = np.empty((oh, ow), dtype=np.float64)
        for y in range(oh):
            for xx in range(ow):
                acc = 0.0
                for i in range(t):
                    acc += tmp[y, xx + i] * k[i]
                out[y, xx] = acc
        return out


def blur_valid(x, k):
    """Valid-mode separable correlation of a 2D array with a 1D kernel."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    if x.shape[0] < k.size or x.shape[1] < k.size:
        raise ValueError("array smaller than kernel window")
    if _BACKEND == "numba":
        return _blur_valid_nb(x, k)
    return _blur_valid_np(x, k)


def blur_valid_adjoint(g, k):
    """Adjoint of `blur_valid`: maps gradients on the valid output back to the
    input plane (full correlation with the flipped kernel)."""
    t = k.size
    gp = np.pad(np.asarray(g, dtype=np.float64), ((t - 1, t - 1), (t - 1, t - 1)))
    return blur_valid(gp, np.ascontiguousarray(k[::-1], dtype=np.float64))


# ---------------------------------------------------------------------------
# Triangle z-buffer rasterization
# ---------------------------------------------------------------------------


def _raster_zbuffer_np(v2d, depth, faces, h, w):
    face_id = np.full((h, w), -1, dtype=np.int32)
    bary = np.zeros((h, w, 3), dtype=np.float64)
    zbuf = np.full((h, w), np.inf, dtype=np.float64)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f]
        x0, y0 = v2d[i0]
        x1, y1 = v2d[i1]
        x2, y2 = v2d[i2]
        den = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(den) < 1e-12:
            continue
        xmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2) + 0.5)), w - 1)
        ymin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2) + 0.5)), h - 1)
        if xmin > xmax or ymin > ymax:
            continue
        ys, xs = np.mgrid[ymin : ymax + 1, xmin : xmax + 1]
        px = xs + 0.5
        py = ys + 0.5
        l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / den
        l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / den
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
        if not inside.any():
            continue
        z = l0 * depth[i0] + l1 * depth[i1] + l2 * depth[i2]
        closer = inside & (z < zbuf[ymin : ymax + 1, xmin : xmax + 1])
        sub = (slice(ymin, ymax + 1), slice(xmin, xmax + 1))
        zbuf[sub][closer] = z[closer]
        face_id[sub][closer] = f
        bary[sub + (0,)][closer] = l0[closer]
        bary[sub + (1,)][closer] = l1[closer]
        bary[sub + (2,)][closer] = l2[closer]
    return face_id, bary


if HAS_NUMBA:

    @njit(cache=True)
    def _raster_zbuffer_nb(v2d, depth, faces, h, w):
        face_id = np.full((h, w), -1, dtype=np.int32)
        bary = np.zeros((h, w, 3), dtype=np.float64)
        zbuf = np.full((h, w), np.inf, dtype=np.float64)
        for f in range(faces.shape[0]):
            i0 = faces[f, 0]
            i1 = faces[f, 1]
            i2 = faces[f, 2]
            x0 = v2d[i0, 0]
            y0 = v2d[i0, 1]
            x1 = v2d[i1, 0]
            y1 = v2d[i1, 1]
            x2 = v2d[i2, 0]
            y2 = v2d[i2, 1]
            den = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
            if abs(den) < 1e-12:
                continue
            xlo = min(x0, min(x1, x2)) - 0.5
            xhi = max(x0, max(x1, x2)) + 0.5
            ylo = min(y0, min(y1, y2)) - 0.5
            yhi = max(y0, max(y1, y2)) + 0.5
            xmin = max(int(np.floor(xlo)), 0)
            xmax = min(int(np.ceil(xhi)), w - 1)
            ymin = max(int(np.floor(ylo)), 0)
            ymax = min(int(np.ceil(yhi)), h - 1)
            for yy in range(ymin, ymax + 1):
                py = yy + 0.5
                for xx in range(xmin, xmax + 1):
                    px = xx + 0.5
                    l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / den
                    if l0 < 0.0:
                        continue
                    l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / den
                    if l1 < 0.0:
                        continue
                    l2 = 1.0 - l0 - l1
                    if l2 < 0.0:
                        continue
                    z = l0 * depth[i0] + l1 * depth[i1] + l2 * depth[i2]
                    if z < zbuf[yy, xx]:
                        zbuf[yy, xx] = z
                        face_id[yy, xx] = f
                        bary[yy, xx, 0] = l0
                        bary[yy, xx, 1] = l1
                        bary[yy, xx, 2] = l2
        return face_id, bary


def raster_zbuffer(v2d, depth, faces, h, w):
    """Rasterize triangles; returns per-pixel winning face index (-1 = none)
    and barycentric coordinates of the pixel center in that face."""
    v2d = np.ascontiguousarray(v2d, dtype=np.float64)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    if _BACKEND == "numba":
        return _raster_zbuffer_nb(v2d, depth, faces, h, w)
    return _raster_zbuffer_np(v2d, depth, faces, h, w)


# ---------------------------------------------------------------------------
# Bilinear affine paste (2D patch application) with sampling records
# ---------------------------------------------------------------------------


def _paste_affine_np(img, tex, aff, off, y0, y1, x0, x1):
    th, tw = tex.shape[0], tex.shape[1]
    ys, xs = np.mgrid[y0:y1, x0:x1]
    pyc = ys + 0.5
    pxc = xs + 0.5
    ty = aff[0, 0] * pyc + aff[0, 1] * pxc + off[0]
    tx = aff[1, 0] * pyc + aff[1, 1] * pxc + off[1]
    inside = (ty >= 0.0) & (ty <= th - 1.0) & (tx >= 0.0) & (tx <= tw - 1.0)
    if not inside.any():
        empty_i = np.empty((0,), dtype=np.int64)
        return (np.empty((0,), np.int64), np.empty((0,), np.int64),
                np.empty((0, 4), np.int64), np.empty((0, 4), np.float64)), 0
    ty = ty[inside]
    tx = tx[inside]
    ry = ys[inside]
    rx = xs[inside]
    fy = np.floor(ty)
    fx = np.floor(tx)
    iy = np.minimum(fy.astype(np.int64), th - 2)
    ix = np.minimum(fx.astype(np.int64), tw - 2)
    dy = ty - iy
    dx = tx - ix
    w00 = (1 - dy) * (1 - dx)
    w01 = (1 - dy) * dx
    w10 = dy * (1 - dx)
    w11 = dy * dx
    idx = np.stack(
        [iy * tw + ix, iy * tw + ix + 1, (iy + 1) * tw + ix, (iy + 1) * tw + ix + 1],
        axis=1,
    )
    wts = np.stack([w00, w01, w10, w11], axis=1)
    tex_flat = tex.reshape(-1, 3)
    img[ry, rx] = np.einsum("nk,nkc->nc", wts, tex_flat[idx])
    return (ry, rx, idx, wts), ry.size


if HAS_NUMBA:

    @njit(cache=True)
    def _paste_affine_nb(img, tex, aff, off, y0, y1, x0, x1,
                         rec_y, rec_x, rec_idx, rec_w):
        th, tw = tex.shape[0], tex.shape[1]
        n = 0
        for yy in range(y0, y1):
            pyc = yy + 0.5
            for xx in range(x0, x1):
                pxc = xx + 0.5
                ty = aff[0, 0] * pyc + aff[0, 1] * pxc + off[0]
                tx = aff[1, 0] * pyc + aff[1, 1] * pxc + off[1]
                if ty < 0.0 or ty > th - 1.0 or tx < 0.0 or tx > tw - 1.0:
                    continue
                iy = int(np.floor(ty))
                ix = int(np.floor(tx))
                if iy > th - 2:
                    iy = th - 2
                if ix > tw - 2:
                    ix = tw - 2
                dy = ty - iy
                dx = tx - ix
                w00 = (1.0 - dy) * (1.0 - dx)
                w01 = (1.0 - dy) * dx
                w10 = dy * (1.0 - dx)
                w11 = dy * dx
                for c in range(3):
                    img[yy, xx, c] = (
                        w00 * tex[iy, ix, c]
                        + w01 * tex[iy, ix + 1, c]
                        + w10 * tex[iy + 1, ix, c]
                        + w11 * tex[iy + 1, ix + 1, c]
                    )
                rec_y[n] = yy
                rec_x[n] = xx
                rec_idx[n, 0] = iy * tw + ix
                rec_idx[n, 1] = iy * tw + ix + 1
                rec_idx[n, 2] = (iy + 1) * tw + ix
                rec_idx[n, 3] = (iy + 1) * tw + ix + 1
                rec_w[n, 0] = w00
                rec_w[n, 1] = w01
                rec_w[n, 2] = w10
                rec_w[n, 3] = w11
                n += 1
        return n


def paste_affine(img, tex, aff, off, y0, y1, x0, x1):
    """Overwrite img pixels in [y0,y1)x[x0,x1) with bilinear samples of tex.

    The affine map sends a pixel center (y+0.5, x+0.5) to continuous texel
    coordinates; pixels mapping outside the texel grid are left untouched.
    Returns (rec_y, rec_x, rec_idx, rec_w) arrays of the sampled pixels for
    gradient accumulation.
    """
    img_f = np.ascontiguousarray(img, dtype=np.float64)
    tex = np.ascontiguousarray(tex, dtype=np.float64)
    aff = np.ascontiguousarray(aff, dtype=np.float64)
    off = np.ascontiguousarray(off, dtype=np.float64)
    if _BACKEND == "numba":
        cap = max((y1 - y0) * (x1 - x0), 1)
        rec_y = np.empty(cap, dtype=np.int64)
        rec_x = np.empty(cap, dtype=np.int64)
        rec_idx = np.empty((cap, 4), dtype=np.int64)
        rec_w = np.empty((cap, 4), dtype=np.float64)
        n = _paste_affine_nb(img_f, tex, aff, off, y0, y1, x0, x1,
                             rec_y, rec_x, rec_idx, rec_w)
        recs = (rec_y[:n].copy(), rec_x[:n].copy(), rec_idx[:n].copy(), rec_w[:n].copy())
    else:
        recs, n = _paste_affine_np(img_f, tex, aff, off, y0, y1, x0, x1)
    return img_f, recs


# ---------------------------------------------------------------------------
# Texel gradient scatter
# ---------------------------------------------------------------------------


def _scatter_texel_grads_np(g_img, rec_y, rec_x, rec_idx, rec_w, rec_scale, g_tex_flat):
    if rec_y.size == 0:
        return
    gpix = g_img[rec_y, rec_x] * rec_scale[:, None]
    contrib = rec_w[:, :, None] * gpix[:, None, :]
    np.add.at(g_tex_flat, rec_idx.ravel(), contrib.reshape(-1, 3))


if HAS_NUMBA:

    @njit(cache=True)
    def _scatter_texel_grads_nb(g_img, rec_y, rec_x, rec_idx, rec_w, rec_scale, g_tex_flat):
        for n in range(rec_y.shape[0]):
            yy = rec_y[n]
            xx = rec_x[n]
            s = rec_scale[n]
            for c in range(3):
                g = g_img[yy, xx, c] * s
                for k in range(4):
                    g_tex_flat[rec_idx[n, k], c] += rec_w[n, k] * g


def scatter_texel_grads(g_img, rec_y, rec_x, rec_idx, rec_w, rec_scale, g_tex_flat):
    """Accumulate image-plane gradients back onto the flattened texture.

    rec_scale carries any per-pixel chain factor (shading, relight slope).
    """
    g_img = np.ascontiguousarray(g_img, dtype=np.float64)
    rec_scale = np.ascontiguousarray(rec_scale, dtype=np.float64)
    if _BACKEND == "numba":
        _scatter_texel_grads_nb(
            g_img,
            np.ascontiguousarray(rec_y, dtype=np.int64),
            np.ascontiguousarray(rec_x, dtype=np.int64),
            np.ascontiguousarray(rec_idx, dtype=np.int64),
            np.ascontiguousarray(rec_w, dtype=np.float64),
            rec_scale,
            g_tex_flat,
        )
    else:
        _scatter_texel_grads_np(g_img, rec_y, rec_x, rec_idx, rec_w, rec_scale, g_tex_flat)


def warmup():
    """Trigger JIT compilation of every numba kernel on tiny inputs."""
    if _BACKEND != "numba":
        return
    x = np.zeros((2, 8, 8))
    w = np.zeros((3, 2, 3, 3))
    b = np.zeros(3)
    out = conv2d_forward(x, w, b, stride=1, pad=1)
    conv2d_backward_input(out, w, x.shape, stride=1, pad=1)
    conv2d_backward_weights(out, x, 3, 3, stride=1, pad=1)
    blur_valid(np.zeros((12, 12)), np.full(3, 1.0 / 3.0))
    raster_zbuffer(np.zeros((3, 2)), np.zeros(3), np.array([[0, 1, 2]]), 4, 4)
    img, recs = paste_affine(np.zeros((4, 4, 3)), np.zeros((2, 2, 3)),
                             np.eye(2), np.zeros(2), 0, 4, 0, 4)
    scatter_texel_grads(np.zeros((4, 4, 3)), recs[0], recs[1], recs[2], recs[3],
                        np.ones(recs[0].size), np.zeros((4, 3)))
