"""LUI channel aggregator and the BiSEL layer (N x K BiSE + K LUI).

LUI: out = xi(p * (sum_k beta_k x_k - f+(b))), with beta = softplus(beta_raw)
kept nonnegative so the union/intersection characterisation always applies.
"""
import itertools
from dataclasses import dataclass, field

import numpy as np

from .bise import (
    BINARY,
    INIT_BIAS_RAW,
    AlmostBinaryBounds,
    BiseParams,
    NotActivatedError,
    StaleCacheError,
    bise_backward,
    bise_forward,
)
from .grid import sigmoid, softplus, softplus_half, softplus_half_grad, softplus_half_inverse, softplus_inverse, xi, xi_grad


@dataclass(eq=False)
class LuiParams:
    beta_raw: np.ndarray
    b_raw: np.ndarray = field(default_factory=lambda: np.array(INIT_BIAS_RAW))
    p: np.ndarray = field(default_factory=lambda: np.array(4.0))

    def __post_init__(self):
        self.beta_raw = np.array(self.beta_raw, dtype=np.float64).reshape(-1)
        self.b_raw = np.array(self.b_raw, dtype=np.float64).reshape(())
        self.p = np.array(self.p, dtype=np.float64).reshape(())
        if self.beta_raw.size == 0:
            raise ValueError("LUI needs at least one input channel")

    @classmethod
    def from_effective(cls, beta, bias, p=4.0):
        beta = np.asarray(beta, dtype=np.float64)
        if np.any(beta <= 0):
            raise ValueError("effective beta must be positive to be representable")
        return cls(softplus_inverse(beta), softplus_half_inverse(bias), p)

    @property
    def n_channels(self):
        return self.beta_raw.size

    @property
    def beta(self):
        return softplus(self.beta_raw)

    @property
    def bias(self):
        return float(softplus_half(self.b_raw))

    def parameters(self):
        return {"beta_raw": self.beta_raw, "b_raw": self.b_raw, "p": self.p}

    def to_dict(self):
        return {"beta_raw": self.beta_raw.tolist(), "b_raw": float(self.b_raw), "p": float(self.p)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["beta_raw"], d["b_raw"], d["p"])


@dataclass
class LuiCache:
    x: np.ndarray
    pre: np.ndarray
    params: LuiParams
    snapshot: tuple


@dataclass
class LuiGrads:
    channels: np.ndarray
    beta_raw: np.ndarray
    b_raw: float
    p: float

    def as_dict(self):
        return {"beta_raw": self.beta_raw, "b_raw": np.array(self.b_raw), "p": np.array(self.p)}


def _stack_channels(channels):
    if isinstance(channels, np.ndarray):
        x = np.asarray(channels, dtype=np.float64)
    else:
        channels = list(channels)
        if not channels:
            raise ValueError("LUI needs at least one channel")
        shapes = {np.shape(c) for c in channels}
        if len(shapes) != 1:
            raise ValueError(f"channel shapes differ: {sorted(shapes)}")
        x = np.stack([np.asarray(c, dtype=np.float64) for c in channels])
    if x.shape[0] == 0:
        raise ValueError("LUI needs at least one channel")
    return x


def lui_forward(channels, params):
    """channels: sequence of c same-shaped grids, or an array with channels first."""
    x = _stack_channels(channels)
    if x.shape[0] != params.n_channels:
        raise ValueError(f"expected {params.n_channels} channels, got {x.shape[0]}")
    pre = np.tensordot(params.beta, x, axes=1) - params.bias
    snap = (params.beta_raw.copy(), float(params.b_raw), float(params.p))
    return xi(params.p * pre), LuiCache(x, pre, params, snap)


def lui_backward(grad_out, cache):
    params = cache.params
    beta0, b0, p0 = cache.snapshot
    if not (np.array_equal(beta0, params.beta_raw) and b0 == params.b_raw and p0 == params.p):
        raise StaleCacheError("parameters changed since the forward pass")
    g_z = np.asarray(grad_out, dtype=np.float64) * xi_grad(p0 * cache.pre)
    g_pre = p0 * g_z
    beta = softplus(beta0)
    grad_channels = beta.reshape((-1,) + (1,) * g_pre.ndim) * g_pre[None]
    g_beta = np.tensordot(cache.x, g_pre, axes=g_pre.ndim)
    return LuiGrads(
        channels=grad_channels,
        beta_raw=g_beta * sigmoid(beta0),
        b_raw=float(-g_pre.sum() * softplus_half_grad(b0)),
        p=float((g_z * cache.pre).sum()),
    )


# -- activation ------------------------------------------------------------


def _per_channel(bounds, n):
    if isinstance(bounds, AlmostBinaryBounds):
        bounds = [bounds] * n
    bounds = list(bounds)
    if len(bounds) != n:
        raise ValueError(f"need {n} channel bounds, got {len(bounds)}")
    return np.array([b.u for b in bounds]), np.array([b.v for b in bounds])


def intersection_interval(beta, channels, u, v):
    c = list(channels)
    lo = beta.sum() - np.min((1.0 - u[c]) * beta[c])
    hi = np.sum(beta[c] * v[c])
    return lo, hi


def union_interval(beta, channels, u, v):
    c = list(channels)
    rest = np.ones(beta.size, dtype=bool)
    rest[c] = False
    lo = np.sum(beta[c] * u[c]) + beta[rest].sum()
    hi = np.min(beta[c] * v[c])
    return lo, hi


def check_lui_activation_effective(beta, b, channels, bounds=BINARY):
    beta = np.asarray(beta, dtype=np.float64)
    channels = sorted(set(channels))
    if not channels:
        raise ValueError("channel subset is empty")
    u, v = _per_channel(bounds, beta.size)
    i_lo, i_hi = intersection_interval(beta, channels, u, v)
    u_lo, u_hi = union_interval(beta, channels, u, v)
    return {"is_intersection": bool(i_lo <= b < i_hi), "is_union": bool(u_lo <= b < u_hi)}


def check_lui_activation(params, channels, bounds=BINARY):
    """channels: 0-based indices of the aggregated subset C."""
    return check_lui_activation_effective(params.beta, params.bias, channels, bounds)


@dataclass(frozen=True)
class LuiStatus:
    op: str  # "intersection", "union" or None
    channels: tuple = ()
    margin: float = -np.inf
    lower: float = None
    upper: float = None
    bias: float = None

    @property
    def activated(self):
        return self.op is not None

    def output_bounds(self, p):
        if not self.activated:
            raise NotActivatedError("no certified output bounds for a non-activated LUI", self)
        return AlmostBinaryBounds(float(xi(p * (self.lower - self.bias))),
                                  float(xi(p * (self.upper - self.bias))))


def find_lui_activation_effective(beta, b, bounds=BINARY):
    """Sweep prefixes of the channels ranked by beta (and by the bound-weighted
    variants of beta, which differ when channels carry different bounds)."""
    beta = np.asarray(beta, dtype=np.float64)
    u, v = _per_channel(bounds, beta.size)
    orders = {tuple(np.argsort(-key, kind="stable")) for key in (beta, beta * (1 - u), beta * v)}
    candidates = []
    for order in orders:
        for k in range(1, beta.size + 1):
            c = tuple(sorted(order[:k]))
            if c not in candidates:
                candidates.append(c)
    best = -np.inf
    for c in candidates:
        for op, interval in (("intersection", intersection_interval), ("union", union_interval)):
            lo, hi = interval(beta, c, u, v)
            margin = min(b - lo, hi - b)
            if lo <= b < hi:
                return LuiStatus(op, tuple(int(i) for i in c), float(margin), float(lo), float(hi), float(b))
            best = max(best, margin)
    return LuiStatus(None, margin=float(best), bias=float(b))


def find_lui_activation(params, bounds=BINARY):
    return find_lui_activation_effective(params.beta, params.bias, bounds)


# -- BiSEL -------------------------------------------------------------------


@dataclass(eq=False)
class BiselParams:
    """bises[n][k] maps input channel n to the k-th LUI; luis[k] aggregates."""

    bises: list
    luis: list

    def __post_init__(self):
        if not self.bises or not self.luis:
            raise ValueError("BiSEL needs at least one input and one output channel")
        if any(len(row) != len(self.luis) for row in self.bises):
            raise ValueError("every input channel needs one BiSE per LUI")
        if any(lui.n_channels != len(self.bises) for lui in self.luis):
            raise ValueError("every LUI must aggregate all input channels")

    @classmethod
    def create(cls, n_in, n_out, size, b_raw=INIT_BIAS_RAW, p=4.0):
        bises = [[BiseParams.zeros(size, b_raw, p) for _ in range(n_out)] for _ in range(n_in)]
        luis = [LuiParams(np.zeros(n_in), b_raw, p) for _ in range(n_out)]
        return cls(bises, luis)

    @property
    def n_in(self):
        return len(self.bises)

    @property
    def n_out(self):
        return len(self.luis)

    @property
    def kernel_size(self):
        return self.bises[0][0].size

    def parameters(self):
        out = {}
        for n, row in enumerate(self.bises):
            for k, bp in enumerate(row):
                for name, arr in bp.parameters().items():
                    out[f"bise[{n},{k}].{name}"] = arr
        for k, lp in enumerate(self.luis):
            for name, arr in lp.parameters().items():
                out[f"lui[{k}].{name}"] = arr
        return out

    def count_parameters(self):
        """Learned scalars, the fixed scalings p excluded: N K |Omega| weights,
        N K BiSE biases, N K LUI coefficients and K LUI biases."""
        bise = sum(bp.w_raw.size + 1 for row in self.bises for bp in row)
        lui = sum(lp.beta_raw.size + 1 for lp in self.luis)
        return bise + lui

    def to_dict(self):
        return {
            "bises": [[bp.to_dict() for bp in row] for row in self.bises],
            "luis": [lp.to_dict() for lp in self.luis],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([[BiseParams.from_dict(b) for b in row] for row in d["bises"]],
                   [LuiParams.from_dict(lp) for lp in d["luis"]])


@dataclass
class BiselCache:
    bise_caches: list
    lui_caches: list


def bisel_forward(x, params):
    """x: N grids (array with channels first, or a list); returns K grids stacked."""
    x = _stack_channels(x)
    if x.shape[0] != params.n_in:
        raise ValueError(f"BiSEL expects {params.n_in} input channels, got {x.shape[0]}")
    bise_caches = [[None] * params.n_out for _ in range(params.n_in)]
    outs = []
    lui_caches = []
    for k, lui in enumerate(params.luis):
        per_channel = []
        for n in range(params.n_in):
            y, cache = bise_forward(x[n], params.bises[n][k])
            bise_caches[n][k] = cache
            per_channel.append(y)
        out, lcache = lui_forward(np.stack(per_channel), lui)
        outs.append(out)
        lui_caches.append(lcache)
    return np.stack(outs), BiselCache(bise_caches, lui_caches)


def bisel_backward(grad_out, cache, need_input_grad=True):
    """Returns (grad_x, grads) where grads maps parameter names as in
    ``BiselParams.parameters`` to gradient arrays."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    n_in = len(cache.bise_caches)
    grads = {}
    grad_x = None
    for k, lcache in enumerate(cache.lui_caches):
        lg = lui_backward(grad_out[k], lcache)
        for name, g in lg.as_dict().items():
            grads[f"lui[{k}].{name}"] = g
        for n in range(n_in):
            bg = bise_backward(lg.channels[n], cache.bise_caches[n][k], need_input_grad)
            for name, g in bg.as_dict().items():
                grads[f"bise[{n},{k}].{name}"] = g
            if need_input_grad:
                if grad_x is None:
                    grad_x = np.zeros((n_in,) + bg.x.shape)
                grad_x[n] += bg.x
    return grad_x, grads


def truth_table(params, threshold=0.5):
    """Hard-thresholded LUI output on every binary channel pattern, as a dict
    pattern -> bool."""
    n = params.n_channels
    patterns = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
    out, _ = lui_forward(patterns.T, params)
    return {tuple(int(v) for v in pat): bool(o > threshold) for pat, o in zip(patterns, out)}
