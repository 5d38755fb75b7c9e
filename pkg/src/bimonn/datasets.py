"""Training data: the Diskorect generator, MNIST (IDX files) and task
wrappers pairing inputs with oracle targets."""
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _kernels, morphology

IDX_IMAGE_MAGIC = 0x00000803
MNIST_ENV = "BIMONN_MNIST"


# -- Diskorect ---------------------------------------------------------------


@dataclass(frozen=True)
class DiskorectConfig:
    """Random rotated rectangles and disks, Bernoulli pixel noise, and random
    complementation. Ranges are inclusive."""

    image_size: int = 50
    n_shapes: tuple = (8, 20)
    rect_size: tuple = (3, 15)
    disk_radius: tuple = (2, 7)
    rotation: tuple = (0.0, np.pi)
    rect_probability: float = 0.5
    noise_p: float = 0.02
    invert_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("rect_probability", "noise_p", "invert_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        for name in ("n_shapes", "rect_size", "disk_radius"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range {lo, hi} is empty or negative")
        if self.n_shapes[1] < 1:
            raise ValueError("need at least one shape per image")
        if self.rect_size[1] >= self.image_size or 2 * self.disk_radius[1] >= self.image_size:
            raise ValueError("shapes must be smaller than the image")
        if self.rect_size[0] < 1 and self.rect_probability > 0:
            raise ValueError("rectangle sides must be positive")


def _shape_rows(shapes):
    rows = []
    for sh in shapes:
        if sh[0] == "rectangle":
            _, (cy, cx), (h, w), angle = sh
            rows.append((0.0, cy, cx, h, w, angle))
        else:
            _, (cy, cx), r = sh
            rows.append((1.0, cy, cx, r, 0.0, 0.0))
    return np.array(rows, dtype=np.float64).reshape(-1, 6)


def draw_rectangle(canvas, center, size, angle):
    """OR into a square canvas a filled rectangle (height, width) rotated by ``angle`` into canvas;
    a pixel is inside when its centre is."""
    canvas |= _kernels.rasterize(canvas.shape[0], _shape_rows([("rectangle", center, size, angle)]))
    return canvas


def draw_disk(canvas, center, radius):
    canvas |= _kernels.rasterize(canvas.shape[0], _shape_rows([("disk", center, radius)]))
    return canvas


def diskorect_image(cfg, index, return_shapes=False):
    """Image number ``index`` of the stream; a pure function of (cfg, index)."""
    rng = np.random.default_rng((cfg.seed, index))
    n = cfg.image_size
    k = int(rng.integers(cfg.n_shapes[0], cfg.n_shapes[1] + 1))
    centers = rng.uniform(0, n - 1, size=(k, 2))
    is_rect = rng.random(k) < cfg.rect_probability
    sides = rng.integers(cfg.rect_size[0], cfg.rect_size[1] + 1, size=(k, 2))
    angles = rng.uniform(cfg.rotation[0], cfg.rotation[1], size=k)
    radii = rng.uniform(cfg.disk_radius[0], cfg.disk_radius[1], size=k)
    rows = np.zeros((k, 6))
    rows[:, 0] = np.where(is_rect, 0.0, 1.0)
    rows[:, 1:3] = centers
    rows[:, 3] = np.where(is_rect, sides[:, 0], radii)
    rows[:, 4] = np.where(is_rect, sides[:, 1], 0.0)
    rows[:, 5] = np.where(is_rect, angles, 0.0)
    img = _kernels.rasterize(n, rows)
    flip = rng.random((n, n)) < cfg.noise_p
    inverted = bool(rng.random() < cfg.invert_p)
    img ^= flip
    if inverted:
        img = ~img
    if return_shapes:
        shapes = [("rectangle", tuple(r[1:3]), (int(r[3]), int(r[4])), float(r[5])) if r[0] == 0
                  else ("disk", tuple(r[1:3]), float(r[3])) for r in rows]
        return img, {"shapes": shapes, "noise": flip, "inverted": inverted}
    return img


def gen_diskorect(cfg, count, start=0):
    """Iterator over ``count`` images starting at stream position ``start``."""
    for i in range(start, start + count):
        yield diskorect_image(cfg, i)


def diskorect_batch(cfg, start, count):
    return np.stack([diskorect_image(cfg, i) for i in range(start, start + count)])


# -- MNIST -------------------------------------------------------------------


def read_idx_images(path):
    """Raw uint8 images from an IDX3 file (big-endian header, magic 0x803)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise ValueError(f"{path}: bad magic number 0x{magic:08x}")
    expected = count * rows * cols
    if len(raw) - 16 < expected:
        raise ValueError(f"{path}: truncated, expected {expected} pixel bytes, found {len(raw) - 16}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=16).reshape(count, rows, cols)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())


def keys_cubic(t, a=-0.5):
    t = np.abs(t)
    return np.where(
        t <= 1, (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
        np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0),
    )


def cubic_resize_matrix(n_in, n_out, a=-0.5):
    """Row-stochastic (n_out, n_in) matrix of Keys cubic weights; pixel-centre
    alignment, edge pixels replicated."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    m = np.zeros((n_out, n_in))
    for off in range(-1, 3):
        idx = base + off
        w = keys_cubic(src - idx, a)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return m


def resize_bicubic(images, size, a=-0.5):
    """Resize (..., H, W) float images to (..., size, size)."""
    images = np.asarray(images, dtype=np.float64)
    ry = cubic_resize_matrix(images.shape[-2], size, a)
    rx = cubic_resize_matrix(images.shape[-1], size, a)
    return np.einsum("ih,...hw,jw->...ij", ry, images, rx, optimize=True)


def binarize_mnist(images, size=50, threshold=0.5):
    """Grey uint8 digits -> upscaled boolean images."""
    grey = resize_bicubic(np.asarray(images, dtype=np.float64) / 255.0, size)
    return np.clip(grey, 0.0, 1.0) > threshold


def load_mnist(path, size=50, limit=None):
    """Boolean ``(N, size, size)`` array from an IDX image file."""
    raw = read_idx_images(path)
    if limit is not None:
        raw = raw[:limit]
    out = np.empty((raw.shape[0], size, size), dtype=bool)
    for i in range(0, raw.shape[0], 1000):
        out[i:i + 1000] = binarize_mnist(raw[i:i + 1000], size)
    return out


def invert_dataset(images):
    """Pixelwise complement; works on a single image, an array or any iterable."""
    if isinstance(images, np.ndarray):
        return ~images.astype(bool)
    return (~np.asarray(img, dtype=bool) for img in images)


def find_mnist(explicit=None):
    """Path of an MNIST IDX image file: ``explicit``, else $BIMONN_MNIST."""
    path = explicit or os.environ.get(MNIST_ENV)
    if not path:
        raise FileNotFoundError(f"no MNIST file given; set ${MNIST_ENV} to an IDX image file")
    path = Path(path)
    if path.is_dir():
        for name in ("train-images-idx3-ubyte", "train-images.idx3-ubyte"):
            if (path / name).exists():
                return path / name
        raise FileNotFoundError(f"no train-images IDX file in {path}")
    return path


# -- tasks ---------------------------------------------------------------------


def make_task(images, op, se):
    """Iterator of (input, target, op, se) with oracle targets."""
    se = morphology.as_se(se)
    for img in images:
        img = np.asarray(img, dtype=bool)
        yield SamplePair(img, morphology.apply(op, img, se), op, se)


@dataclass
class SamplePair:
    input: np.ndarray
    target: np.ndarray
    op: str
    se: np.ndarray

    def verify(self):
        return bool(np.array_equal(self.target, morphology.apply(self.op, self.input, self.se)))


class DiskorectTask:
    """Infinite Diskorect stream with targets op(x, se). Batches and the
    validation set come from disjoint seeds."""

    def __init__(self, op, se, cfg=None, n_val=64, complement_inputs=False):
        self.op = op
        self.se = morphology.as_se(se)
        self.cfg = cfg or DiskorectConfig()
        self.n_val = n_val
        self.complement_inputs = complement_inputs
        self._val = None

    def _pair(self, x):
        if self.complement_inputs:
            x = ~x
        return x, morphology.apply(self.op, x, self.se)

    def batch(self, index, size):
        return self._pair(diskorect_batch(self.cfg, index * size, size))

    def validation(self):
        if self._val is None:
            val_cfg = DiskorectConfig(**{**asdict(self.cfg), "seed": self.cfg.seed + 1_000_003})
            self._val = self._pair(diskorect_batch(val_cfg, 0, self.n_val))
        return self._val


class ArrayTask:
    """Fixed image collection split into train / validation, with targets
    op(x, se). Batches are drawn without replacement, seeded per index."""

    def __init__(self, images, op, se, n_val=None, seed=0, complement_inputs=False, max_val=512):
        images = np.asarray(images, dtype=bool)
        if complement_inputs:
            images = ~images
        self.op = op
        self.se = morphology.as_se(se)
        self.seed = seed
        if n_val is None:
            n_val = min(5000, max(1, len(images) // 10))
        self.x_train = images[:-n_val]
        self.x_val = images[-n_val:][:max_val]
        self.y_train = morphology.apply(op, self.x_train, self.se)
        self.y_val = morphology.apply(op, self.x_val, self.se)

    def batch(self, index, size):
        rng = np.random.default_rng((self.seed, index))
        idx = rng.choice(len(self.x_train), size=min(size, len(self.x_train)), replace=False)
        return self.x_train[idx], self.y_train[idx]

    def validation(self):
        return self.x_val, self.y_val


def export_png_dataset(images, out_dir, manifest=None, targets=None):
    """Write images (and optional targets) as PNG files plus manifest.json."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, img in enumerate(images):
        name = f"input_{i:05d}.png"
        Image.fromarray(np.asarray(img, dtype=np.uint8) * 255).save(out / name)
        entry = {"input": name}
        if targets is not None:
            tname = f"target_{i:05d}.png"
            Image.fromarray(np.asarray(targets[i], dtype=np.uint8) * 255).save(out / tname)
            entry["target"] = tname
        entries.append(entry)
    doc = dict(manifest or {})
    doc["samples"] = entries
    with open(out / "manifest.json", "w") as f:
        json.dump(doc, f, indent=1, default=_json_default)
    return out / "manifest.json"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def diskorect_manifest(cfg):
    """Generator settings for a manifest; the unpublished choices are labelled."""
    return {
        "generator": "diskorect",
        "config": asdict(cfg),
        "assumed_parameters": ["n_shapes", "rect_size", "disk_radius", "noise_p", "rect_probability"],
    }
