"""Batched same-size cross-correlation kernels.

Two interchangeable backends: numba-compiled loops and a pure numpy path
built on shifted slices and sliding windows. Set ``BIMONN_PURE_NUMPY=1`` to force
the numpy path (also used automatically when numba is missing).

All arrays are float64. Images are ``(B, H, W)``, kernels ``(kh, kw)`` with
odd sides; out-of-bounds pixels read as zero.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, kh, kw):
    return np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))


def correlate_numpy(x, k):
    # shifted-slice accumulation in (a, c) order: same per-pixel summation
    # order as a naive nested loop, so results are bit-identical to it
    kh, kw = k.shape
    B, H, W = x.shape
    xp = _pad(x, kh, kw)
    out = np.zeros((B, H, W))
    for a in range(kh):
        for c in range(kw):
            out += xp[:, a:a + H, c:c + W] * k[a, c]
    return out


def weight_grad_numpy(g, x, kshape):
    kh, kw = kshape
    win = sliding_window_view(_pad(x, kh, kw), (kh, kw), axis=(1, 2))
    return np.einsum("bhwij,bhw->ij", win, g, optimize=True)


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def correlate_numba(x, k):
        B, H, W = x.shape
        kh, kw = k.shape
        rh, rw = kh // 2, kw // 2
        out = np.zeros((B, H, W))
        for b in range(B):
            for a in range(kh):
                i0 = max(0, rh - a)
                i1 = min(H, H + rh - a)
                for c in range(kw):
                    kv = k[a, c]
                    j0 = max(0, rw - c)
                    j1 = min(W, W + rw - c)
                    for i in range(i0, i1):
                        ii = i + a - rh
                        for j in range(j0, j1):
                            out[b, i, j] += x[b, ii, j + c - rw] * kv
        return out

    @numba.njit(cache=True, fastmath=True)
    def _weight_grad_numba(g, x, kh, kw):
        B, H, W = x.shape
        rh, rw = kh // 2, kw // 2
        gk = np.zeros((kh, kw))
        for a in range(kh):
            i0 = max(0, rh - a)
            i1 = min(H, H + rh - a)
            for c in range(kw):
                j0 = max(0, rw - c)
                j1 = min(W, W + rw - c)
                s = 0.0
                for b in range(B):
                    for i in range(i0, i1):
                        ii = i + a - rh
                        for j in range(j0, j1):
                            s += g[b, i, j] * x[b, ii, j + c - rw]
                gk[a, c] = s
        return gk

    def weight_grad_numba(g, x, kshape):
        return _weight_grad_numba(g, x, kshape[0], kshape[1])


BACKENDS = {"numpy": (correlate_numpy, weight_grad_numpy)}
if HAVE_NUMBA:
    BACKENDS["numba"] = (correlate_numba, weight_grad_numba)

if HAVE_NUMBA and os.environ.get("BIMONN_PURE_NUMPY", "") not in ("1", "true", "yes"):
    BACKEND = "numba"
else:
    BACKEND = "numpy"

_active = BACKENDS[BACKEND]


def set_backend(name):
    """Switch the kernel backend at runtime ("numba" or "numpy")."""
    global BACKEND, _active
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}")
    BACKEND = name
    _active = BACKENDS[name]


def correlate(x, k):
    return _active[0](np.ascontiguousarray(x, dtype=np.float64),
                      np.ascontiguousarray(k, dtype=np.float64))


def weight_grad(g, x, kshape):
    return _active[1](np.ascontiguousarray(g, dtype=np.float64),
                      np.ascontiguousarray(x, dtype=np.float64), tuple(kshape))


# -- shape rasterization -------------------------------------------------------
#
# shapes: float array (k, 6) of rows (kind, cy, cx, a, b, angle); kind 0 is a
# rectangle of height a / width b rotated by angle, kind 1 a disk of radius a.
# A pixel is covered when its centre is inside the shape.


def rasterize_numpy(n, shapes):
    img = np.zeros((n, n), dtype=np.bool_)
    for kind, cy, cx, a, b, angle in shapes:
        reach = a if kind == 1 else 0.5 * np.sqrt(a * a + b * b)
        r0, r1 = max(0, int(np.floor(cy - reach))), min(n, int(np.ceil(cy + reach)) + 1)
        c0, c1 = max(0, int(np.floor(cx - reach))), min(n, int(np.ceil(cx + reach)) + 1)
        dy = np.arange(r0, r1)[:, None] - cy
        dx = np.arange(c0, c1)[None, :] - cx
        if kind == 1:
            inside = dy * dy + dx * dx <= a * a
        else:
            c, s = np.cos(angle), np.sin(angle)
            inside = (np.abs(c * dy + s * dx) <= 0.5 * a) & (np.abs(c * dx - s * dy) <= 0.5 * b)
        img[r0:r1, c0:c1] |= inside
    return img


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def rasterize_numba(n, shapes):
        img = np.zeros((n, n), dtype=np.bool_)
        for t in range(shapes.shape[0]):
            kind, cy, cx, a, b, angle = shapes[t]
            if kind == 1:
                reach = a
            else:
                reach = 0.5 * np.sqrt(a * a + b * b)
            r0 = max(0, int(np.floor(cy - reach)))
            r1 = min(n, int(np.ceil(cy + reach)) + 1)
            c0 = max(0, int(np.floor(cx - reach)))
            c1 = min(n, int(np.ceil(cx + reach)) + 1)
            c = np.cos(angle)
            s = np.sin(angle)
            for i in range(r0, r1):
                dy = i - cy
                for j in range(c0, c1):
                    dx = j - cx
                    if kind == 1:
                        inside = dy * dy + dx * dx <= a * a
                    else:
                        inside = abs(c * dy + s * dx) <= 0.5 * a and abs(c * dx - s * dy) <= 0.5 * b
                    if inside:
                        img[i, j] = True
        return img

    BACKENDS["numba"] = BACKENDS["numba"] + (rasterize_numba,)
BACKENDS["numpy"] = BACKENDS["numpy"] + (rasterize_numpy,)
_active = BACKENDS[BACKEND]


def rasterize(n, shapes):
    return _active[2](int(n), np.ascontiguousarray(shapes, dtype=np.float64).reshape(-1, 6))
