"""Generators shared by the test modules."""
import numpy as np

from bimonn import bise, morphology


def random_bounds(rng):
    return bise.AlmostBinaryBounds(float(rng.uniform(0, 0.15)), float(rng.uniform(0.85, 1.0)))


def almost_binary(rng, shape, bounds, p_fg=0.5):
    """Random image in B(u, v) and its binary support."""
    fg = rng.random(shape) < p_fg
    low = rng.uniform(0, bounds.u, shape) if bounds.u > 0 else np.zeros(shape)
    high = rng.uniform(bounds.v, 1.0, shape)
    return np.where(fg, high, low), fg


def random_mask(rng, size, p=0.4):
    m = rng.random((size, size)) < p
    if not m.any():
        m[rng.integers(size), rng.integers(size)] = True
    return m


def random_activated(rng, op, size=3, bounds=bise.BINARY, tries=1000):
    """Random effective (w, b) activated as ``op`` by a random element.

    Returns (w, b, se) with se in image terms (what the oracle receives).
    """
    for _ in range(tries):
        mask = random_mask(rng, size, p=rng.uniform(0.05, 0.5))
        off = rng.uniform(0.001, 0.5 / size**2, (size, size))
        w = np.where(mask, rng.uniform(0.55, 0.999, (size, size)), off)
        interval = bise.dilation_interval if op == "dilation" else bise.erosion_interval
        lo, hi = interval(w, mask, bounds)
        lo = max(lo, 0.5 + 1e-9)
        if lo < hi:
            b = float(rng.uniform(lo, hi))
            se = morphology.reflect(mask) if op == "dilation" else mask
            return w, b, se
    raise RuntimeError("could not draw an activated neuron")
