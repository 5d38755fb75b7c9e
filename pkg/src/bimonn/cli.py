"""Command line: ``bimonn run | suite | binarize | duality``.

Exit codes: 0 ok, 1 experiment failed (or binarization refused), 2 bad config.
"""
import argparse
import json
import logging
import sys

from . import experiments
from .experiments import ConfigError, ExperimentSpec

EXIT_OK, EXIT_FAILED, EXIT_BAD_CONFIG = 0, 1, 2


def _spec_from_file(path, out=None):
    doc = experiments.load_config_file(path)
    if out:
        doc["out_dir"] = out
    return ExperimentSpec.from_dict(doc)


def cmd_run(args):
    spec = _spec_from_file(args.spec, args.out)
    rep = experiments.run_experiment(spec)
    print(json.dumps({"name": spec.name, "dice_error": rep.dice_error, "activated": rep.activated,
                      "extracted": rep.extracted, "iterations": rep.iterations,
                      "wall_clock": round(rep.wall_clock, 2)}, indent=1))
    return EXIT_OK


def cmd_suite(args):
    doc = experiments.load_config_file(args.grid)
    specs = experiments.expand_grid(doc)
    rows = experiments.run_suite(specs, args.out)
    print(experiments.suite_markdown(rows), end="")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_FAILED


def cmd_binarize(args):
    result = experiments.binarize_command(args.ckpt, n_samples=args.samples)
    text = json.dumps(result, indent=1)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    print(text)
    if result["status"] != "ok":
        return EXIT_FAILED
    check = result["spot_check"]
    return EXIT_OK if check["matches"] == check["samples"] else EXIT_FAILED


def cmd_duality(args):
    spec = _spec_from_file(args.spec, args.out)
    rep = experiments.duality_probe(spec, threshold=args.threshold)
    print(json.dumps({
        "primal": {"name": rep.primal.spec["name"], "dice_error": rep.primal.dice_error,
                   "iterations_to_threshold": rep.primal_iterations},
        "dual": {"name": rep.dual.spec["name"], "dice_error": rep.dual.dice_error,
                 "iterations_to_threshold": rep.dual_iterations},
        "ratio": rep.ratio,
    }, indent=1))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="bimonn", description="Binary morphological neural networks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one experiment cell")
    p.add_argument("--spec", required=True, help="JSON or TOML experiment spec")
    p.add_argument("--out", help="output directory (overrides the spec)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="run a grid of cells and tabulate them")
    p.add_argument("--grid", required=True, help="JSON or TOML suite/grid file")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("binarize", help="export a trained network as a morphological pipeline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="write the pipeline JSON here")
    p.add_argument("--samples", type=int, default=20, help="spot-check sample count")
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("duality", help="train an experiment and its dual")
    p.add_argument("--spec", required=True)
    p.add_argument("--out")
    p.add_argument("--threshold", type=float, default=0.01)
    p.set_defaults(func=cmd_duality)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"bimonn: bad config: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except Exception as e:
        print(f"bimonn: experiment failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
