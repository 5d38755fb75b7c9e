"""BiSE neuron: out = xi(p * (correlate(x, xi(W)) - f+(b))).

Activation checks and structuring-element extraction work on the effective
quantities w = xi(W) in (0, 1) and b = f+(b_raw) > 0.5.

Orientation: the neuron correlates, it does not convolve. An erosion neuron
therefore carries the structuring element S itself in its weights, while a
dilation neuron carries the reflected element. Every public function here
speaks in oracle terms: ``Dilation(S)`` means the neuron computes
``morphology.dilate(x, S)``.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import morphology
from .grid import (
    check_kernel,
    correlate2d,
    correlate2d_backward,
    softplus_half,
    softplus_half_grad,
    softplus_half_inverse,
    xi,
    xi_grad,
)


class NotActivatedError(Exception):
    """Raised when a neuron is asked for a morphological equivalent it lacks."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlmostBinaryBounds:
    """Pixel values avoid the open interval (u, v)."""

    u: float = 0.0
    v: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.u < self.v <= 1.0):
            raise ValueError(f"need 0 <= u < v <= 1, got u={self.u}, v={self.v}")


BINARY = AlmostBinaryBounds(0.0, 1.0)


def verify_almost_binary(img, bounds, atol=0.0):
    """No pixel strictly inside (u, v); ``atol`` forgives rounding at the ends."""
    img = np.asarray(img, dtype=np.float64)
    return not np.any((img > bounds.u + atol) & (img < bounds.v - atol))


# initial raw bias: f+(-2) = 0.5 + log(1 + e^-2) ~ 0.627
INIT_BIAS_RAW = -2.0


@dataclass(eq=False)
class BiseParams:
    w_raw: np.ndarray
    b_raw: np.ndarray = field(default_factory=lambda: np.array(INIT_BIAS_RAW))
    p: np.ndarray = field(default_factory=lambda: np.array(4.0))

    def __post_init__(self):
        self.w_raw = np.array(check_kernel(self.w_raw), dtype=np.float64)
        self.b_raw = np.array(self.b_raw, dtype=np.float64).reshape(())
        self.p = np.array(self.p, dtype=np.float64).reshape(())

    @classmethod
    def zeros(cls, size, b_raw=INIT_BIAS_RAW, p=4.0):
        return cls(np.zeros((size, size)), b_raw, p)

    @classmethod
    def from_effective(cls, weights, bias, p=4.0):
        """Build raw parameters reproducing given effective weights and bias."""
        weights = np.asarray(weights, dtype=np.float64)
        if np.any((weights <= 0) | (weights >= 1)):
            raise ValueError("effective weights must lie in (0, 1)")
        if bias <= 0.5:
            raise ValueError("effective bias must exceed 0.5")
        return cls(np.arctanh(2.0 * weights - 1.0), softplus_half_inverse(bias), p)

    @property
    def size(self):
        return self.w_raw.shape[0]

    @property
    def n(self):
        return self.size // 2

    @property
    def weights(self):
        return xi(self.w_raw)

    @property
    def bias(self):
        return float(softplus_half(self.b_raw))

    def parameters(self):
        return {"w_raw": self.w_raw, "b_raw": self.b_raw, "p": self.p}

    def copy(self):
        return BiseParams(self.w_raw.copy(), self.b_raw.copy(), self.p.copy())

    def to_dict(self):
        return {
            "n": self.n,
            "w_raw": self.w_raw.ravel().tolist(),
            "b_raw": float(self.b_raw),
            "p": float(self.p),
        }

    @classmethod
    def from_dict(cls, d):
        size = 2 * int(d["n"]) + 1
        w = np.asarray(d["w_raw"], dtype=np.float64)
        if w.size != size * size:
            raise ValueError(f"expected {size * size} weights for n={d['n']}, got {w.size}")
        return cls(w.reshape(size, size), d["b_raw"], d["p"])


@dataclass
class BiseCache:
    x: np.ndarray
    pre: np.ndarray  # correlate(x, w) - bias
    params: BiseParams
    snapshot: tuple


@dataclass
class BiseGrads:
    x: np.ndarray
    w_raw: np.ndarray
    b_raw: float
    p: float

    def as_dict(self):
        return {"w_raw": self.w_raw, "b_raw": np.array(self.b_raw), "p": np.array(self.p)}


def _snapshot(params):
    return (params.w_raw.copy(), float(params.b_raw), float(params.p))


def bise_forward(x, params):
    """Returns ``(out, cache)``; ``x`` is (H, W) or (B, H, W) with values in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    pre = correlate2d(x, params.weights) - params.bias
    out = xi(params.p * pre)
    return out, BiseCache(x, pre, params, _snapshot(params))


def bise_backward(grad_out, cache, need_input_grad=True):
    params = cache.params
    w0, b0, p0 = cache.snapshot
    if not (np.array_equal(w0, params.w_raw) and b0 == params.b_raw and p0 == params.p):
        raise StaleCacheError("parameters changed since the forward pass")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.pre.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} != output shape {cache.pre.shape}")
    g_z = grad_out * xi_grad(p0 * cache.pre)
    g_pre = p0 * g_z
    grad_x, g_w = correlate2d_backward(g_pre, cache.x, params.weights, need_input_grad)
    return BiseGrads(
        x=grad_x,
        w_raw=g_w * xi_grad(params.w_raw),
        b_raw=float(-g_pre.sum() * softplus_half_grad(b0)),
        p=float((g_z * cache.pre).sum()),
    )


# -- activation ------------------------------------------------------------
#
# For a kernel-space support M and effective weights w, bias b:
#   dilation: sum_{~M} w + u sum_M w  <=  b  <  v min_M w
#   erosion:  sum_all w - (1 - u) min_M w  <=  b  <  v sum_M w
# The left side bounds the correlation on pixels that must come out as
# background, the right side bounds it from below on foreground pixels.


def dilation_interval(w, mask, bounds):
    w = np.asarray(w, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    lo = w[~mask].sum() + bounds.u * w[mask].sum()
    hi = bounds.v * w[mask].min()
    return lo, hi


def erosion_interval(w, mask, bounds):
    w = np.asarray(w, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    lo = w.sum() - (1.0 - bounds.u) * w[mask].min()
    hi = bounds.v * w[mask].sum()
    return lo, hi


def _kernel_mask(op, se):
    se = morphology.as_se(se)
    return morphology.reflect(se) if op == "dilation" else se


def _interval(op, w, se, bounds):
    mask = _kernel_mask(op, se)
    if mask.shape != np.shape(w):
        raise ValueError(f"structuring element {mask.shape} does not match kernel {np.shape(w)}")
    return (dilation_interval if op == "dilation" else erosion_interval)(w, mask, bounds)


def check_activation_effective(w, b, se, bounds=BINARY):
    se = np.asarray(se, dtype=bool)
    if not se.any():
        raise ValueError("structuring element is empty")
    d_lo, d_hi = _interval("dilation", w, se, bounds)
    e_lo, e_hi = _interval("erosion", w, se, bounds)
    return {"is_dilation": bool(d_lo <= b < d_hi), "is_erosion": bool(e_lo <= b < e_hi)}


def check_activation(params, se, bounds=BINARY):
    """Is the neuron dilate(., se) / erode(., se) on inputs in B(u, v)?"""
    return check_activation_effective(params.weights, params.bias, se, bounds)


@dataclass(frozen=True, eq=False)
class ActivationStatus:
    op: str  # "dilation", "erosion" or None
    se: np.ndarray = None
    margin: float = -np.inf
    lower: float = None
    upper: float = None
    bias: float = None
    input_bounds: AlmostBinaryBounds = BINARY

    @property
    def activated(self):
        return self.op is not None

    def output_bounds(self, p):
        """Certified (u', v') of the neuron output given its input bounds.

        Background pixels have pre-activation <= lower - bias <= 0, foreground
        ones >= upper - bias > 0, and xi(p * .) is increasing for p > 0.
        """
        if not self.activated:
            raise NotActivatedError("no certified output bounds for a non-activated neuron", self)
        return AlmostBinaryBounds(float(xi(p * (self.lower - self.bias))),
                                  float(xi(p * (self.upper - self.bias))))

    def __repr__(self):
        if not self.activated:
            return f"NotActivated(margin={self.margin:.4g})"
        return f"{self.op.capitalize()}(|S|={int(self.se.sum())}, margin={self.margin:.4g})"


def find_activation_effective(w, b, bounds=BINARY):
    """Threshold the weights at the two candidate values and verify each.

    Linear in the window size; the candidate sets are never sorted.
    """
    w = np.asarray(w, dtype=np.float64)
    best = -np.inf
    candidates = (
        ("dilation", b / bounds.v, dilation_interval),
        ("erosion", (w.sum() - b) / (1.0 - bounds.u), erosion_interval),
    )
    for op, tau, interval in candidates:
        mask = w >= tau
        if not mask.any():
            continue
        lo, hi = interval(w, mask, bounds)
        margin = min(b - lo, hi - b)
        if lo <= b < hi:
            se = morphology.reflect(mask) if op == "dilation" else mask.copy()
            return ActivationStatus(op, se, float(margin), float(lo), float(hi), float(b), bounds)
        best = max(best, margin)
    return ActivationStatus(None, margin=float(best), bias=float(b), input_bounds=bounds)


def find_activation(params, bounds=BINARY):
    return find_activation_effective(params.weights, params.bias, bounds)


def binarize_bise(params, bounds=BINARY):
    """(op, se) of the exact morphological replacement, or NotActivatedError."""
    status = find_activation(params, bounds)
    if not status.activated:
        raise NotActivatedError(f"neuron not activated (margin {status.margin:.4g})", status)
    return status.op, status.se


def dual_bounds(w, u_d, v_d):
    """Erosion bounds (u_e, v_e) from dilation bounds sharing the same weights:
    u_e = sum(w) - v_d, v_e = sum(w) - u_d."""
    total = float(np.sum(w))
    if total <= 1e-12:
        warnings.warn("weights carry no mass; dual interval is degenerate", RuntimeWarning)
    return total - v_d, total - u_d


def ideal_params(op, se, bounds=BINARY, p=4.0, saturation=5.0, bias=None):
    """Parameters that realise ``op`` by ``se`` exactly on B(u, v) inputs.

    Raw weights are +saturation on the support and -saturation elsewhere; the
    bias defaults to the middle of the admissible interval (kept above 0.5).
    """
    if op not in ("dilation", "erosion"):
        raise ValueError(f"a single neuron realises dilation or erosion, not {op!r}")
    mask = _kernel_mask(op, se)
    w_raw = np.where(mask, saturation, -saturation).astype(np.float64)
    if bias is None:
        lo, hi = _interval(op, xi(w_raw), se, bounds)
        lo = max(lo, 0.5)
        if not lo < hi:
            raise ValueError(f"no admissible bias for {op} with |S|={mask.sum()} on {bounds}")
        bias = 0.5 * (lo + hi)
    return BiseParams(w_raw, softplus_half_inverse(bias), p)
