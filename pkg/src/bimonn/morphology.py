"""Reference binary morphology, computed straight from the set definitions.

This module deliberately avoids the correlation kernels so it can serve as
an independent oracle for everything that is learned. Out-of-bounds pixels
are background for every operator.
"""
import re
from dataclasses import dataclass

import numpy as np


def as_se(s):
    s = np.asarray(s, dtype=bool)
    if s.ndim != 2 or s.shape[0] % 2 == 0 or s.shape[1] % 2 == 0:
        raise ValueError(f"structuring element must be 2-D with odd sides, got {s.shape}")
    if not s.any():
        raise ValueError("structuring element is empty")
    return s


def offsets(s):
    """Offsets (a, b) of the true entries, relative to the centre."""
    s = as_se(s)
    rows, cols = np.nonzero(s)
    return list(zip(rows - s.shape[0] // 2, cols - s.shape[1] // 2))


def _shifted(x, a, b):
    """y(i, j) = x(i + a, j + b), zero outside. Works on (..., H, W)."""
    H, W = x.shape[-2:]
    y = np.zeros_like(x)
    if abs(a) >= H or abs(b) >= W:
        return y
    src_r = slice(max(a, 0), H + min(a, 0))
    dst_r = slice(max(-a, 0), H + min(-a, 0))
    src_c = slice(max(b, 0), W + min(b, 0))
    dst_c = slice(max(-b, 0), W + min(-b, 0))
    y[..., dst_r, dst_c] = x[..., src_r, src_c]
    return y


def dilate(x, s):
    """Union of the translates x + a, a in S: out(i) iff x(i - a) for some a."""
    x = np.asarray(x, dtype=bool)
    out = np.zeros_like(x)
    for a, b in offsets(s):
        out |= _shifted(x, -a, -b)
    return out


def erode(x, s):
    """out(i) iff x(i + a) for every a in S."""
    x = np.asarray(x, dtype=bool)
    out = np.ones_like(x)
    for a, b in offsets(s):
        out &= _shifted(x, a, b)
    return out


def opening(x, s):
    return dilate(erode(x, s), s)


def closing(x, s):
    return erode(dilate(x, s), s)


def complement(x):
    return ~np.asarray(x, dtype=bool)


def reflect(s):
    """Point reflection through the origin."""
    return np.asarray(s, dtype=bool)[::-1, ::-1].copy()


OPERATIONS = {
    "dilation": dilate,
    "erosion": erode,
    "opening": opening,
    "closing": closing,
}

DUAL_OPERATION = {
    "dilation": "erosion",
    "erosion": "dilation",
    "opening": "closing",
    "closing": "opening",
}


def apply(op, x, s):
    try:
        fn = OPERATIONS[op]
    except KeyError:
        raise ValueError(f"unknown operation {op!r}") from None
    return fn(x, s)


def adjunction_check(x, y, s):
    """I <= erode(J)  <=>  dilate(I) <= J, on the unbounded plane.

    Both images are embedded in a zero canvas padded by the element radius so
    that dilation never clips at the frame; on the bare grid zero padding makes
    the erosion side false along the border and the equivalence breaks.
    """
    s = as_se(s)
    n, m = s.shape[0] // 2, s.shape[1] // 2
    pad = ((0, 0),) * (np.ndim(x) - 2) + ((n, n), (m, m))
    x = np.pad(np.asarray(x, dtype=bool), pad)
    y = np.pad(np.asarray(y, dtype=bool), pad)
    lhs = not np.any(x & ~erode(y, s))
    rhs = not np.any(dilate(x, s) & ~y)
    return lhs == rhs


@dataclass(frozen=True)
class SeShape:
    kind: str  # "disk" | "stick" | "cross"
    radius: float = None
    length: int = None
    orientation: str = "horizontal"  # stick: horizontal | vertical | diagonal | antidiagonal
    diagonal: bool = True  # cross: diagonals instead of axes


def make_se(shape, size):
    """Render a structuring element into a ``size x size`` window.

    ``shape`` is a SeShape or one of the shorthand names "disk", "stick",
    "hstick", "vstick", "cross", "dcross" (defaults fill the window).
    """
    if size % 2 == 0 or size < 1:
        raise ValueError("window size must be odd and positive")
    if isinstance(shape, str):
        shape = _named_shape(shape, size)
    n = size // 2
    a, b = np.mgrid[-n:n + 1, -n:n + 1]
    if shape.kind == "disk":
        r = n if shape.radius is None else shape.radius
        se = a * a + b * b <= r * r
    elif shape.kind == "stick":
        half = (size if shape.length is None else shape.length) // 2
        se = _segment(a, b, shape.orientation, half)
    elif shape.kind == "cross":
        half = n if shape.length is None else shape.length // 2
        if shape.diagonal:
            se = _segment(a, b, "diagonal", half) | _segment(a, b, "antidiagonal", half)
        else:
            se = _segment(a, b, "horizontal", half) | _segment(a, b, "vertical", half)
    else:
        raise ValueError(f"unknown shape kind {shape.kind!r}")
    if half_out_of_window(shape, n):
        raise ValueError(f"{shape} does not fit in a {size}x{size} window")
    return as_se(se)


def half_out_of_window(shape, n):
    if shape.kind == "disk":
        return shape.radius is not None and shape.radius > n
    return shape.length is not None and shape.length // 2 > n


def _segment(a, b, orientation, half):
    if orientation == "horizontal":
        return (a == 0) & (np.abs(b) <= half)
    if orientation == "vertical":
        return (b == 0) & (np.abs(a) <= half)
    if orientation == "diagonal":
        return (a == b) & (np.abs(a) <= half)
    if orientation == "antidiagonal":
        return (a == -b) & (np.abs(a) <= half)
    raise ValueError(f"unknown orientation {orientation!r}")


def _named_shape(name, size):
    table = {
        "disk": SeShape("disk"),
        "stick": SeShape("stick", orientation="horizontal"),
        "hstick": SeShape("stick", orientation="horizontal"),
        "vstick": SeShape("stick", orientation="vertical"),
        "cross": SeShape("cross", diagonal=True),
        "dcross": SeShape("cross", diagonal=True),
        "across": SeShape("cross", diagonal=False),
    }
    try:
        return table[name]
    except KeyError:
        raise ValueError(f"unknown structuring element {name!r}") from None


def se_to_text(s):
    return "\n".join("".join("1" if v else "0" for v in row) for row in np.asarray(s, dtype=bool))


def se_from_text(text):
    rows = [r.strip() for r in text.strip().splitlines() if r.strip()]
    return as_se(np.array([[c == "1" for c in r] for r in rows]))


def write_pgm(path, img):
    """Binary (P5) PGM; booleans map to 0/255, floats in [0, 1] are scaled."""
    img = np.asarray(img)
    if img.dtype == bool:
        data = img.astype(np.uint8) * 255
    else:
        data = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (data.shape[1], data.shape[0]))
        f.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(raw[m.end():m.end() + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError("truncated PGM file")
    return data.reshape(h, w).astype(np.float64) / maxval
