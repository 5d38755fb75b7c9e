"""BiMoNN: a chain of BiSE / BiSEL layers, its losses, optimizer and
training loop.

Tensors inside the network are channels-first batches ``(C, B, H, W)``.
``Bimonn.forward`` also accepts a plain ``(B, H, W)`` batch and returns the
same rank for single-channel networks.
"""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .bise import (
    BINARY,
    INIT_BIAS_RAW,
    AlmostBinaryBounds,
    BiseParams,
    bise_backward,
    bise_forward,
    find_activation,
)
from .lui import BiselParams, bisel_backward, bisel_forward, find_lui_activation

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "bimonn-checkpoint"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


# -- layers ------------------------------------------------------------------


class BiseLayer:
    kind = "bise"
    n_in = 1
    n_out = 1

    def __init__(self, params):
        self.params = params

    @classmethod
    def create(cls, size, b_raw=INIT_BIAS_RAW, p=4.0):
        return cls(BiseParams.zeros(size, b_raw, p))

    @property
    def kernel_size(self):
        return self.params.size

    def forward(self, x):
        out, cache = bise_forward(x[0], self.params)
        return out[None], cache

    def backward(self, grad_out, cache, need_input_grad=True):
        g = bise_backward(grad_out[0], cache, need_input_grad)
        grad_x = g.x[None] if need_input_grad else None
        return grad_x, g.as_dict()

    def parameters(self):
        return self.params.parameters()

    def bise_params(self):
        return [self.params]

    def lui_params(self):
        return []

    def activation(self, in_bounds):
        """Statuses for this layer's neurons and the certified bounds of each
        output channel (None where a neuron is not activated)."""
        if in_bounds[0] is None:
            return [None], [None]
        status = find_activation(self.params, in_bounds[0])
        out = status.output_bounds(float(self.params.p)) if status.activated else None
        return [status], [out]

    def to_dict(self):
        return {"type": "bise", **self.params.to_dict()}


class BiselLayer:
    kind = "bisel"

    def __init__(self, params):
        self.params = params

    @classmethod
    def create(cls, n_in, n_out, size, b_raw=INIT_BIAS_RAW, p=4.0):
        return cls(BiselParams.create(n_in, n_out, size, b_raw, p))

    @property
    def n_in(self):
        return self.params.n_in

    @property
    def n_out(self):
        return self.params.n_out

    @property
    def kernel_size(self):
        return self.params.kernel_size

    def forward(self, x):
        return bisel_forward(x, self.params)

    def backward(self, grad_out, cache, need_input_grad=True):
        return bisel_backward(grad_out, cache, need_input_grad)

    def parameters(self):
        return self.params.parameters()

    def bise_params(self):
        return [bp for row in self.params.bises for bp in row]

    def lui_params(self):
        return list(self.params.luis)

    def activation(self, in_bounds):
        bise_status = [[None] * self.n_out for _ in range(self.n_in)]
        for n, row in enumerate(self.params.bises):
            for k, bp in enumerate(row):
                if in_bounds[n] is not None:
                    bise_status[n][k] = find_activation(bp, in_bounds[n])
        statuses = [s for row in bise_status for s in row]
        out_bounds = []
        for k, lp in enumerate(self.params.luis):
            col = [bise_status[n][k] for n in range(self.n_in)]
            if any(s is None or not s.activated for s in col):
                statuses.append(None)
                out_bounds.append(None)
                continue
            ch_bounds = [s.output_bounds(float(self.params.bises[n][k].p)) for n, s in enumerate(col)]
            ls = find_lui_activation(lp, ch_bounds)
            statuses.append(ls)
            out_bounds.append(ls.output_bounds(float(lp.p)) if ls.activated else None)
        return statuses, out_bounds

    def to_dict(self):
        return {"type": "bisel", **self.params.to_dict()}


def layer_from_dict(d):
    if d["type"] == "bise":
        return BiseLayer(BiseParams.from_dict(d))
    if d["type"] == "bisel":
        return BiselLayer(BiselParams.from_dict(d))
    raise ValueError(f"unknown layer type {d['type']!r}")


# -- network -----------------------------------------------------------------


class Bimonn:
    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("a BiMoNN needs at least one layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.n_out != b.n_in:
                raise ValueError(f"layer {i} outputs {a.n_out} channels, layer {i + 1} expects {b.n_in}")
        self.layers = layers

    @classmethod
    def chain(cls, kernel_sizes, b_raw=INIT_BIAS_RAW, p=4.0):
        """Stack of single BiSE neurons, one per kernel size."""
        return cls([BiseLayer.create(k, b_raw, p) for k in kernel_sizes])

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def border(self):
        """Border band corrupted by zero padding, accumulated over layers."""
        return sum(layer.kernel_size // 2 for layer in self.layers)

    def _channels_first(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3 and self.n_in == 1:
            return x[None], True
        if x.ndim == 4 and x.shape[0] == self.n_in:
            return x, False
        raise ValueError(f"input of shape {x.shape} does not fit a {self.n_in}-channel network")

    def forward(self, x):
        h, squeeze = self._channels_first(x)
        caches = []
        for layer in self.layers:
            h, cache = layer.forward(h)
            caches.append(cache)
        if squeeze and h.shape[0] == 1:
            h = h[0]
        return h, caches

    def predict(self, x):
        return self.forward(x)[0]

    def backward(self, grad_out, caches):
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 3:
            g = g[None]
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            g, lg = self.layers[i].backward(g, caches[i], need_input_grad=i > 0)
            for name, val in lg.items():
                grads[f"layers[{i}].{name}"] = val
        return grads

    def parameters(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.parameters().items():
                out[f"layers[{i}].{name}"] = arr
        return out

    def activations(self, sample=None, input_bounds=BINARY):
        """Per-layer activation statuses with bounds propagated layer by layer.

        When an upstream neuron is not activated there is no certified bound
        for its output. If ``sample`` inputs are given, the bounds observed on
        them are used instead (and the layer's result is marked uncertified);
        otherwise downstream statuses are None.
        """
        bounds = [input_bounds] * self.n_in
        h = None
        if sample is not None:
            h, _ = self._channels_first(sample)
        report = []
        certified = True
        for layer in self.layers:
            statuses, out_bounds = layer.activation(bounds)
            report.append({"statuses": statuses, "certified": certified})
            if h is not None:
                h, _ = layer.forward(h)
            if any(b is None for b in out_bounds):
                if h is None:
                    bounds = out_bounds
                else:
                    certified = False
                    bounds = [b if b is not None else observed_bounds(h[c]) for c, b in enumerate(out_bounds)]
            else:
                bounds = out_bounds
        return report

    def activation_flags(self, sample=None):
        """Flat list of booleans, one per BiSE (then LUI), in layer order."""
        flags = []
        for entry in self.activations(sample):
            flags.extend(bool(s is not None and s.activated) for s in entry["statuses"])
        return flags

    def to_dict(self):
        return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a bimonn checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        return cls([layer_from_dict(layer) for layer in d["layers"]])


def observed_bounds(values, threshold=0.5):
    values = np.asarray(values)
    low = values[values <= threshold]
    high = values[values > threshold]
    u = float(low.max()) if low.size else 0.0
    v = float(high.min()) if high.size else 1.0
    return AlmostBinaryBounds(u, v)


def save_checkpoint(net, path, meta=None):
    d = net.to_dict()
    if meta is not None:
        d["meta"] = meta
    with open(path, "w") as f:
        json.dump(d, f, indent=1)


def load_checkpoint(path):
    with open(path) as f:
        d = json.load(f)
    return Bimonn.from_dict(d), d.get("meta", {})


# -- losses and metric -------------------------------------------------------


def interior_mask(shape, border):
    H, W = shape[-2:]
    if 2 * border >= min(H, W):
        raise ValueError(f"border {border} leaves nothing of a {H}x{W} image")
    mask = np.zeros((H, W), dtype=bool)
    mask[border:H - border, border:W - border] = True
    return mask


def _batch(a):
    a = np.asarray(a, dtype=np.float64)
    return (a[None], True) if a.ndim == 2 else (a, False)


def dice_loss(pred, target, border=0, eps=1e-6):
    """Soft Dice 1 - (2 sum(pt) + eps) / (sum(p^2) + sum(t^2) + eps) per image,
    averaged over the batch. Returns (loss, d loss / d pred)."""
    p, single = _batch(pred)
    t, _ = _batch(target)
    m = interior_mask(p.shape, border)
    pm, tm = p * m, t * m
    inter = (pm * tm).sum(axis=(1, 2))
    denom = (pm * pm).sum(axis=(1, 2)) + (tm * tm).sum(axis=(1, 2)) + eps
    num = 2 * inter + eps
    loss = float(np.mean(1 - num / denom))
    d = (2 * tm * denom[:, None, None] - num[:, None, None] * 2 * pm) / (denom[:, None, None] ** 2)
    grad = -d * m / p.shape[0]
    return loss, grad[0] if single else grad


def mse_loss(pred, target, border=0):
    p, single = _batch(pred)
    t, _ = _batch(target)
    m = interior_mask(p.shape, border)
    count = m.sum() * p.shape[0]
    diff = (p - t) * m
    loss = float((diff * diff).sum() / count)
    grad = 2 * diff / count
    return loss, grad[0] if single else grad


LOSSES = {"dice": dice_loss, "mse": mse_loss}


def dice_metric(pred_bin, target, border=0):
    """Mean over the batch of 2|A n B| / (|A| + |B|); two empty sets score 1."""
    a = np.asarray(pred_bin, dtype=bool)
    b = np.asarray(target, dtype=bool)
    if a.ndim == 2:
        a, b = a[None], b[None]
    m = interior_mask(a.shape, border)
    a, b = a & m, b & m
    inter = (a & b).sum(axis=(1, 2))
    total = a.sum(axis=(1, 2)) + b.sum(axis=(1, 2))
    scores = np.where(total == 0, 1.0, 2 * inter / np.maximum(total, 1))
    return float(scores.mean())


# -- optimizer and init ------------------------------------------------------


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        """In-place update of every array in ``params`` that has a gradient."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, arr in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if name not in self.m:
                self.m[name] = np.zeros_like(arr)
                self.v[name] = np.zeros_like(arr)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            arr[...] = arr - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def init_network(net, seed, method="kaiming", bias_init_raw=INIT_BIAS_RAW, p=4.0):
    """Uniform weight init (bound sqrt(6 / fan_in) for kaiming, sqrt(6 /
    (fan_in + fan_out)) for glorot), biases at ``bias_init_raw``, scalings
    at ``p``. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)

    def bound(fan_in, fan_out):
        if method == "kaiming":
            return math.sqrt(6.0 / fan_in)
        if method == "glorot":
            return math.sqrt(6.0 / (fan_in + fan_out))
        raise ValueError(f"unknown init method {method!r}")

    for layer in net.layers:
        for bp in layer.bise_params():
            a = bound(bp.w_raw.size, bp.w_raw.size)
            bp.w_raw[...] = rng.uniform(-a, a, size=bp.w_raw.shape)
            bp.b_raw[...] = bias_init_raw
            bp.p[...] = p
        for lp in layer.lui_params():
            a = bound(lp.n_channels, 1)
            lp.beta_raw[...] = rng.uniform(-a, a, size=lp.beta_raw.shape)
            lp.b_raw[...] = bias_init_raw
            lp.p[...] = p
    return net


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    loss: str = "dice"
    learning_rate: float = 0.01
    iterations: int = 30000
    batch_size: int = 32
    seed: int = 0
    p_fixed: float = 4.0
    bias_init_raw: float = INIT_BIAS_RAW
    init: str = "kaiming"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learn_p: bool = False
    eval_every: int = 100
    stop_dice_error: float = 1e-3
    require_activation: bool = True

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.iterations <= 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ValueError("iterations, batch_size and eval_every must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    stopped_early: bool = False

    def append(self, **row):
        self.records.append(row)

    @property
    def final(self):
        return self.records[-1] if self.records else None

    def first_below(self, threshold):
        """First evaluated iteration whose DICE error is <= threshold."""
        for r in self.records:
            if r["dice_error"] <= threshold:
                return r["iteration"]
        return None

    def to_csv(self, path):
        if not self.records:
            open(path, "w").close()
            return
        n_flags = len(self.records[0]["activated"])
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "loss", "dice_error"] + [f"activated_{i}" for i in range(n_flags)])
            for r in self.records:
                w.writerow([r["iteration"], f"{r['loss']:.8g}", f"{r['dice_error']:.8g}"]
                           + [int(a) for a in r["activated"]])


def train(net, dataset, config):
    """Fit ``net`` on ``dataset`` (an object with ``batch(index, size)`` and
    ``validation()`` returning boolean ``(inputs, targets)`` arrays)."""
    loss_fn = LOSSES[config.loss]
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    params = net.parameters()
    trainable = {k: v for k, v in params.items() if config.learn_p or not k.endswith(".p")}
    border = net.border
    x_val, y_val = dataset.validation()
    x_val = x_val.astype(np.float64)
    result = TrainLog()
    running = []
    for it in range(1, config.iterations + 1):
        x, y = dataset.batch(it - 1, config.batch_size)
        out, caches = net.forward(x.astype(np.float64))
        loss, grad = loss_fn(out, y, border)
        if not math.isfinite(loss):
            raise DivergenceError(f"loss is {loss} at iteration {it}")
        grads = net.backward(grad, caches)
        opt.step(trainable, grads)
        running.append(loss)
        if it % config.eval_every == 0 or it == config.iterations:
            pred = net.predict(x_val) > 0.5
            dice_error = 1.0 - dice_metric(pred, y_val, border)
            flags = net.activation_flags(sample=x_val)
            result.append(iteration=it, loss=float(np.mean(running)), dice_error=dice_error, activated=flags)
            log.debug("it %d loss %.5f dice error %.5f activated %s", it, np.mean(running), dice_error, flags)
            running = []
            if dice_error <= config.stop_dice_error and (not config.require_activation or all(flags)):
                result.stopped_early = it < config.iterations
                break
    return result
