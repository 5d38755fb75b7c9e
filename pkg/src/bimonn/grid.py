"""Dense 2-D grids: same-size zero-padded cross-correlation and the scalar
squashing functions used by every layer.

Images are plain numpy arrays: ``bool`` for binary images, ``float64`` for
real ones. Functions accept a single ``(H, W)`` image or a batch
``(B, H, W)`` and return the same rank they were given.
"""
import numpy as np

from . import _kernels


def check_kernel(k):
    k = np.asarray(k)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be 2-D with odd sides, got shape {k.shape}")
    return k


def half_width(k):
    """n such that the kernel window is [-n, n]^2."""
    return check_kernel(k).shape[0] // 2


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected (H, W) or (B, H, W) grid, got shape {x.shape}")


def correlate2d(x, k, padding="zero"):
    """out(i, j) = sum_{a, b} x(i + a, j + b) k(a, b), offsets centred on the
    kernel origin and out-of-bounds x read as 0. No kernel flip."""
    if padding != "zero":
        raise ValueError("only zero padding is supported")
    k = check_kernel(k)
    xb, single = _as_batch(x)
    if k.shape[0] > min(xb.shape[1:]) or k.shape[1] > min(xb.shape[1:]):
        raise ValueError(f"kernel {k.shape} larger than image {xb.shape[1:]}")
    out = _kernels.correlate(xb, k)
    return out[0] if single else out


def correlate2d_backward(grad_out, x, k, need_input_grad=True):
    """Gradients of ``sum(grad_out * correlate2d(x, k))``.

    Returns ``(grad_x, grad_k)``; ``grad_x`` is the correlation of
    ``grad_out`` with the point-reflected kernel, or None when not needed.
    """
    k = check_kernel(k)
    gb, single = _as_batch(grad_out)
    xb, _ = _as_batch(x)
    if gb.shape != xb.shape:
        raise ValueError(f"grad_out shape {gb.shape} does not match input {xb.shape}")
    grad_k = _kernels.weight_grad(gb, xb, k.shape)
    grad_x = None
    if need_input_grad:
        grad_x = _kernels.correlate(gb, k[::-1, ::-1])
        if single:
            grad_x = grad_x[0]
    return grad_x, grad_k


def xi(x):
    """Smooth threshold 0.5 * tanh(x) + 0.5, values in (0, 1)."""
    return 0.5 * np.tanh(x) + 0.5


def xi_grad(x):
    t = np.tanh(x)
    return 0.5 * (1.0 - t * t)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inverse(y):
    """x with softplus(x) = y, for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus is positive; cannot invert a value <= 0")
    return np.where(y > 30, y + np.log(-np.expm1(-y)), np.log(np.expm1(y)))


def softplus_half(x):
    """ln(1 + e^x) + 0.5, strictly above 0.5."""
    return softplus(x) + 0.5


def softplus_half_grad(x):
    return sigmoid(x)


def softplus_half_inverse(y):
    return softplus_inverse(np.asarray(y, dtype=np.float64) - 0.5)


def dilate_by_correlation(x, se):
    """Dilation as a thresholded correlation count: at least one hit under the
    reflected element. Counts are integers; the -0.25 absorbs rounding."""
    se = np.asarray(se, dtype=bool)
    return correlate2d(np.asarray(x, dtype=np.float64), se[::-1, ::-1].astype(np.float64)) >= 1 - 0.25


def erode_by_correlation(x, se):
    """Erosion as a thresholded correlation count: every pixel under se is set."""
    se = np.asarray(se, dtype=bool)
    return correlate2d(np.asarray(x, dtype=np.float64), se.astype(np.float64)) >= se.sum() - 0.25
