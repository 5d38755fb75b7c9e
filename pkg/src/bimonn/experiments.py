"""Experiment runner: build the network for an operation, train it on a
dataset, evaluate, extract the learned operators and write reports."""
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import datasets, morphology
from .bise import BINARY
from .network import (
    Bimonn,
    BiseLayer,
    DivergenceError,
    TrainConfig,
    dice_metric,
    init_network,
    interior_mask,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger(__name__)

DATASETS = ("diskorect", "mnist", "inverted_mnist")
SE_SHAPES = ("disk", "stick", "cross")

# (loss, learning rate) for single-neuron and two-neuron tasks
PROTOCOL = {
    "diskorect": ("dice", 0.01, 0.001),
    "mnist": ("mse", 0.1, 0.01),
    "inverted_mnist": ("mse", 0.1, 0.01),
}
DISKORECT_ITERATIONS = 30000
MNIST_EPOCHS = 3
MNIST_TRAIN_SIZE = 55000  # standard 60k train split minus 5k validation


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    dataset: str
    operation: str
    se_shape: str
    se_size: int = None
    train: dict = field(default_factory=dict)
    out_dir: str = None
    mnist_path: str = None
    complement_inputs: bool = False
    n_val: int = 64
    name: str = None

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.operation not in morphology.OPERATIONS:
            raise ConfigError(f"operation must be one of {tuple(morphology.OPERATIONS)}")
        if self.se_shape not in SE_SHAPES and self.se_shape not in ("hstick", "vstick", "dcross", "across"):
            raise ConfigError(f"se_shape must be one of {SE_SHAPES}, got {self.se_shape!r}")
        if self.se_size is None:
            small = self.dataset != "diskorect" and self.single_neuron
            self.se_size = 5 if small else 7
        if self.se_size % 2 == 0 or not 1 <= self.se_size < 50:
            raise ConfigError(f"se_size must be odd and smaller than the images, got {self.se_size}")
        try:
            self.train_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if self.name is None:
            self.name = f"{self.dataset}-{self.operation}-{self.se_shape}{self.se_size}"

    @property
    def single_neuron(self):
        return self.operation in ("dilation", "erosion")

    @property
    def se(self):
        return morphology.make_se(self.se_shape, self.se_size)

    def train_config(self):
        loss, lr_single, lr_double = PROTOCOL[self.dataset]
        if self.dataset == "diskorect":
            iterations = DISKORECT_ITERATIONS
        else:
            iterations = math.ceil(MNIST_EPOCHS * MNIST_TRAIN_SIZE / self.train.get("batch_size", 32))
        base = {"loss": loss, "learning_rate": lr_single if self.single_neuron else lr_double,
                "iterations": iterations}
        return TrainConfig.from_dict({**base, **self.train})

    def dual(self):
        """Dual operator on the complemented data, same seed."""
        d = asdict(self)
        d["operation"] = morphology.DUAL_OPERATION[self.operation]
        d["complement_inputs"] = not self.complement_inputs
        d["name"] = None
        if self.out_dir:
            d["out_dir"] = str(Path(self.out_dir).with_name(Path(self.out_dir).name + "-dual"))
        return ExperimentSpec(**d)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown spec fields: {sorted(unknown)}")
        missing = {"dataset", "operation", "se_shape"} - set(d)
        if missing:
            raise ConfigError(f"missing spec fields: {sorted(missing)}")
        return cls(**d)


def load_config_file(path):
    """JSON or TOML document as a dict."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ImportError:  # python < 3.11
                import tomli as tomllib
            return tomllib.loads(text)
        return json.loads(text)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


_mnist_cache = {}


def _mnist_images(path):
    path = str(datasets.find_mnist(path))
    if path not in _mnist_cache:
        _mnist_cache[path] = datasets.load_mnist(path)
    return _mnist_cache[path]


def build_task(spec, seed=0):
    op, se = spec.operation, spec.se
    if spec.dataset == "diskorect":
        return datasets.DiskorectTask(op, se, datasets.DiskorectConfig(seed=seed), n_val=spec.n_val,
                                      complement_inputs=spec.complement_inputs)
    images = _mnist_images(spec.mnist_path)
    invert = (spec.dataset == "inverted_mnist") != spec.complement_inputs
    return datasets.ArrayTask(images, op, se, seed=seed, complement_inputs=invert)


def build_network(spec):
    n_layers = 1 if spec.single_neuron else 2
    return Bimonn([BiseLayer.create(spec.se_size) for _ in range(n_layers)])


def target_pipeline(spec):
    se = spec.se
    if spec.operation == "opening":
        return [("erosion", se), ("dilation", se)]
    if spec.operation == "closing":
        return [("dilation", se), ("erosion", se)]
    return [(spec.operation, se)]


@dataclass
class ExperimentReport:
    spec: dict
    config: dict
    dice_error: float
    activated: list
    statuses: list
    extracted: list
    iterations: int
    first_below_1e3: int
    wall_clock: float
    log: object = field(repr=False, default=None)
    net: object = field(repr=False, default=None)

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("log", "net")}
        return d


def _describe_status(s):
    if s is None:
        return {"op": None, "margin": None}
    d = {"op": s.op, "margin": s.margin}
    if getattr(s, "se", None) is not None:
        d["se"] = morphology.se_to_text(s.se)
    if getattr(s, "channels", None):
        d["channels"] = list(s.channels)
    return d


def run_experiment(spec):
    """Train and evaluate one cell. Raises DivergenceError on NaN loss."""
    if isinstance(spec, dict):
        spec = ExperimentSpec.from_dict(spec)
    config = spec.train_config()
    task = build_task(spec, seed=config.seed)
    net = init_network(build_network(spec), config.seed, config.init, config.bias_init_raw, config.p_fixed)
    t0 = time.perf_counter()
    train_log = train(net, task, config)
    elapsed = time.perf_counter() - t0
    x_val, _ = task.validation()
    act = net.activations(sample=x_val)
    statuses = [s for entry in act for s in entry["statuses"]]
    report = ExperimentReport(
        spec=asdict(spec),
        config=config.to_dict(),
        dice_error=float(train_log.final["dice_error"]),
        activated=[bool(s is not None and s.activated) for s in statuses],
        statuses=[_describe_status(s) for s in statuses],
        extracted=[morphology.se_to_text(s.se) if s is not None and s.activated else None for s in statuses],
        iterations=int(train_log.final["iteration"]),
        first_below_1e3=train_log.first_below(1e-3),
        wall_clock=elapsed,
        log=train_log,
        net=net,
    )
    if spec.out_dir:
        write_report(report, spec, spec.out_dir)
    return report


def write_report(report, spec, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as f:
        json.dump(report.to_dict(), f, indent=1)
    report.log.to_csv(out / "log.csv")
    save_checkpoint(report.net, out / "checkpoint.json", meta={"spec": report.spec, "config": report.config})
    render_report(report, out, target_se=spec.se)


def _png(path, img):
    from PIL import Image

    img = np.asarray(img)
    if img.dtype == bool:
        data = img.astype(np.uint8) * 255
    else:
        data = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def render_report(report, out_dir, target_se=None, scale=1):
    """PNG per neuron: effective weights, extracted SE (when activated) and the
    target SE, plus a side-by-side panel and a weights CSV. Returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    bises = [bp for layer in report.net.layers for bp in layer.bise_params()]
    if target_se is not None:
        _png(out / "target_se.png", target_se)
        written.append(out / "target_se.png")
    for i, bp in enumerate(bises):
        w = bp.weights
        _png(out / f"neuron{i}_weights.png", np.kron(w, np.ones((scale, scale))))
        written.append(out / f"neuron{i}_weights.png")
        panels = [w]
        se_text = report.extracted[i] if i < len(report.extracted) else None
        if se_text is not None:
            se = morphology.se_from_text(se_text)
            _png(out / f"neuron{i}_se.png", se)
            written.append(out / f"neuron{i}_se.png")
            panels.append(se.astype(np.float64))
        if target_se is not None:
            panels.append(np.asarray(target_se, dtype=np.float64))
        sep = np.full((w.shape[0], 1), 0.5)
        row = [panels[0]]
        for p in panels[1:]:
            row += [sep, p]
        _png(out / f"neuron{i}_panel.png", np.hstack(row))
        written.append(out / f"neuron{i}_panel.png")
        np.savetxt(out / f"neuron{i}_weights.csv", w, delimiter=",", fmt="%.6f")
    return written


# -- suites --------------------------------------------------------------------


SUITE_COLUMNS = ["name", "dataset", "operation", "se_shape", "se_size", "status",
                 "dice_error", "activated", "iterations", "wall_clock", "error"]


def expand_grid(doc):
    """Spec dicts from a suite document: either {"specs": [...]} or a grid
    {"datasets": [...], "operations": [...], "se_shapes": [...], ...common}."""
    if isinstance(doc, list):
        return list(doc)
    if "specs" in doc:
        return list(doc["specs"])
    common = {k: v for k, v in doc.items() if k not in ("datasets", "operations", "se_shapes")}
    return [{"dataset": d, "operation": o, "se_shape": s, **common}
            for d in doc.get("datasets", []) for o in doc.get("operations", []) for s in doc.get("se_shapes", [])]


def run_suite(specs, out_dir=None):
    """Run cells in order; failures become rows with status "error"."""
    rows = []
    for i, d in enumerate(specs):
        d = dict(d)
        row = {"name": d.get("name") or f"cell{i}", "dataset": d.get("dataset"), "operation": d.get("operation"),
               "se_shape": d.get("se_shape"), "se_size": d.get("se_size")}
        try:
            spec = ExperimentSpec.from_dict(d)
            row["name"], row["se_size"] = spec.name, spec.se_size
            if out_dir and not spec.out_dir:
                spec.out_dir = str(Path(out_dir) / spec.name)
            rep = run_experiment(spec)
            row.update(status="ok", dice_error=rep.dice_error, activated=rep.activated,
                       iterations=rep.iterations, wall_clock=rep.wall_clock, error="")
        except Exception as e:  # a failed cell must still appear in the table
            log.exception("cell %s failed", row["name"])
            row.update(status="error", dice_error=None, activated=[], iterations=None, wall_clock=None,
                       error=f"{type(e).__name__}: {e}")
        rows.append(row)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_suite_csv(rows, out / "suite.csv")
        (out / "suite.md").write_text(suite_markdown(rows))
    return rows


def write_suite_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUITE_COLUMNS)
        w.writeheader()
        for r in rows:
            r = dict(r)
            r["activated"] = "".join("1" if a else "0" for a in r.get("activated") or [])
            w.writerow({k: r.get(k) for k in SUITE_COLUMNS})


def _flags(activated):
    return "".join("✓" if a else "✗" for a in activated)


def suite_markdown(rows):
    """Table with one row per cell: DICE error and activation marks."""
    lines = ["| dataset | operation | SE | DICE error | activated |", "|---|---|---|---|---|"]
    for r in rows:
        if r["status"] == "ok":
            err, flags = f"{r['dice_error']:.3f}", _flags(r["activated"])
        else:
            err, flags = "error", r["error"]
        lines.append(f"| {r['dataset']} | {r['operation']} | {r['se_shape']}{r['se_size'] or ''} | {err} | {flags} |")
    return "\n".join(lines) + "\n"


# -- binarization ----------------------------------------------------------------


def export_pipeline(net):
    """Ordered morphological pipeline equivalent to the thresholded network,
    or a refusal listing the neurons that are not activated."""
    report = net.activations()
    pipeline, missing = [], []
    for li, (layer, entry) in enumerate(zip(net.layers, report)):
        statuses = entry["statuses"]
        bad = [{"layer": li, "neuron": j, "margin": None if s is None else s.margin}
               for j, s in enumerate(statuses) if s is None or not s.activated]
        missing += bad
        if bad:
            continue
        if layer.kind == "bise":
            s = statuses[0]
            pipeline.append({"op": s.op, "se": s.se.astype(int).tolist()})
        else:
            n_in, n_out = layer.n_in, layer.n_out
            outputs = []
            for k in range(n_out):
                lui = statuses[n_in * n_out + k]
                inputs = []
                for n in lui.channels:
                    s = statuses[n * n_out + k]
                    inputs.append({"channel": n, "op": s.op, "se": s.se.astype(int).tolist()})
                outputs.append({"aggregate": lui.op, "inputs": inputs})
            pipeline.append({"op": "bisel", "outputs": outputs})
    if missing:
        return {"status": "refused", "not_activated": missing}
    return {"status": "ok", "pipeline": pipeline}


def run_pipeline(pipeline, x):
    """Execute an exported pipeline with the reference morphology. ``x`` is a
    boolean (B, H, W) batch or a (C, B, H, W) multi-channel batch."""
    h = np.asarray(x, dtype=bool)
    channels = h[None] if h.ndim == 3 else h
    for step in pipeline:
        if step["op"] == "bisel":
            outs = []
            for o in step["outputs"]:
                parts = [morphology.apply(i["op"], channels[i["channel"]], np.array(i["se"], dtype=bool))
                         for i in o["inputs"]]
                agg = np.logical_and.reduce if o["aggregate"] == "intersection" else np.logical_or.reduce
                outs.append(agg(parts))
            channels = np.stack(outs)
        else:
            channels = np.stack([morphology.apply(step["op"], c, np.array(step["se"], dtype=bool))
                                 for c in channels])
    return channels[0] if np.asarray(x).ndim == 3 and channels.shape[0] == 1 else channels


def binarize_command(checkpoint, n_samples=20, seed=12345, image_size=50):
    """Pipeline export plus an equivalence spot check on Diskorect samples."""
    net, _ = load_checkpoint(checkpoint) if not isinstance(checkpoint, Bimonn) else (checkpoint, {})
    result = export_pipeline(net)
    if result["status"] != "ok":
        return result
    cfg = datasets.DiskorectConfig(seed=seed, image_size=image_size)
    x = datasets.diskorect_batch(cfg, 0, n_samples)
    if net.n_in > 1:
        x = np.stack([x] * net.n_in)
    thresholded = net.predict(x.astype(np.float64)) > 0.5
    executed = run_pipeline(result["pipeline"], x)
    m = interior_mask(x.shape, net.border)
    matches = int(sum(np.array_equal(a[..., m], b[..., m]) for a, b in
                      zip(np.asarray(thresholded).reshape(-1, *x.shape[-2:]),
                          np.asarray(executed).reshape(-1, *x.shape[-2:]))))
    result["spot_check"] = {"samples": n_samples, "matches": matches}
    return result


# -- duality -------------------------------------------------------------------


@dataclass
class DualityReport:
    primal: ExperimentReport
    dual: ExperimentReport
    threshold: float
    primal_iterations: int
    dual_iterations: int

    @property
    def ratio(self):
        if not self.primal_iterations or not self.dual_iterations:
            return None
        return self.dual_iterations / self.primal_iterations

    def to_dict(self):
        return {"primal": self.primal.to_dict(), "dual": self.dual.to_dict(), "threshold": self.threshold,
                "primal_iterations": self.primal_iterations, "dual_iterations": self.dual_iterations,
                "ratio": self.ratio}


def duality_probe(spec, threshold=0.01):
    """Train ``spec`` and its dual (dual operator on complemented inputs) with
    a shared seed. The named SE shapes are point-symmetric, so the dual keeps
    the same SE."""
    if isinstance(spec, dict):
        spec = ExperimentSpec.from_dict(spec)
    primal = run_experiment(spec)
    dual = run_experiment(spec.dual())
    return DualityReport(primal, dual, threshold, primal.log.first_below(threshold), dual.log.first_below(threshold))
