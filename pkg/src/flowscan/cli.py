"""``flowscan train|eval|sample|verify --config PATH [--section.key value]...``

Exit codes: 0 ok, 1 usage or config error, 2 data/checkpoint error,
3 numeric abort during training, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager

import numpy as np

from . import checkpoint, config as cfgmod, datasets, transforms, verify
from .errors import (CheckpointError, ConfigError, ContractError, FsetError, NumericError,
                     SchemaError)
from .model import FlowScan, evaluate_ppll
from .train import train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3, 4
COMMANDS = ("train", "eval", "sample", "verify")


def fresh_dir(parent, name):
    """Create ``parent/name`` or, if taken, the first free ``name-1``, ``name-2``, ..."""
    os.makedirs(parent, exist_ok=True)
    candidate = os.path.join(parent, name)
    k = 0
    while True:
        try:
            os.mkdir(candidate)
            return candidate
        except FileExistsError:
            k += 1
            candidate = os.path.join(parent, f"{name}-{k}")


def echo_config(cfg, run_dir, overrides):
    with open(os.path.join(run_dir, "config.ini"), "w") as fh:
        fh.write(cfg.text)
    resolved = {"overrides": [list(o) for o in overrides],
                "seed_env": os.environ.get(cfgmod.SEED_ENV)}
    with open(os.path.join(run_dir, "invocation.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)


def load_data(dc):
    """The dataset described by a ``[data]`` section, jittered and split."""
    if dc.source == "sinusoid":
        ds = datasets.gen_sinusoid(dc.n_sets, dc.n, seed=dc.seed, noise_sd=dc.noise_sd)
    elif dc.source in ("circle", "square"):
        ds = datasets.gen_shape_clouds(
            dc.n_sets, dc.n, dc.source, radius_range=(dc.radius_min, dc.radius_max),
            noise_sd=0.05 if dc.noise_sd is None else dc.noise_sd, seed=dc.seed,
            center_range=(dc.center_min, dc.center_max))
    elif dc.source == "fset":
        ds = datasets.read_fset(dc.path)
    else:
        ds = datasets.read_csv(dc.path)
    if len(ds) == 0:
        raise SchemaError("dataset is empty")
    if dc.jitter_sd > 0:
        ds = datasets.jitter(ds, dc.jitter_sd, seed=dc.seed)
    if ds.labels is None:
        ds = datasets.split(ds, dc.fractions, seed=dc.split_seed)
    return ds


def _split_sets(ds, label):
    part = ds.subset(label)
    return part.array() if part.uniform_n() is not None and len(part) else part.sets


def cmd_train(cfg, overrides, out=print):
    ds = load_data(cfg.data)
    model_cfg = cfg.model_config(ds.d, ds.uniform_n())
    model = FlowScan(model_cfg)
    run_dir = fresh_dir(cfg.output.dir, cfg.output.name)
    echo_config(cfg, run_dir, overrides)
    out(f"run directory: {run_dir}")
    out(f"model: {model.num_values()} parameters; data: {len(ds)} sets, d={ds.d}")
    schema = {"n": ds.uniform_n(), "d": ds.d}
    try:
        result = train(model, _split_sets(ds, "train"), _split_sets(ds, "val"), cfg.train,
                       out_dir=run_dir, log=out, schema=schema)
    except NumericError as err:
        out(f"numeric abort in {err.op}: {err}; checkpoints already in {run_dir} are kept")
        return EXIT_NUMERIC
    out(f"best val PPLL {result.best_val:.4f} at step {result.best_step}")
    return EXIT_OK


def ppll_summary(values):
    values = np.asarray(values, dtype=float)
    stderr = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    return {"mean_ppll": float(values.mean()), "stderr": stderr, "n_sets": int(len(values))}


def eval_report(model, ds, batch_size=256):
    report = {}
    for label in datasets.SPLITS:
        part = ds.subset(label)
        if len(part):
            report[label] = ppll_summary(evaluate_ppll(model, part.sets, batch_size))
    return report


def cmd_eval(cfg, overrides, out=print):
    model = checkpoint.load(cfg.eval.checkpoint)
    ds = load_data(cfg.data)
    if ds.d != model.config.d:
        raise SchemaError(f"checkpoint expects d={model.config.d}, data has d={ds.d}")
    report = eval_report(model, ds, cfg.eval.batch_size)
    run_dir = fresh_dir(cfg.output.dir, f"{cfg.output.name}-eval")
    echo_config(cfg, run_dir, overrides)
    text = json.dumps(report, indent=2, sort_keys=True)
    with open(os.path.join(run_dir, "report.json"), "w") as fh:
        fh.write(text + "\n")
    out(text)
    return EXIT_OK


def write_svg(sets, path, size=480, pad=20):
    """Scatter plot of the first two coordinates, one colour per set."""
    pts = np.concatenate([s[:, :2] for s in sets])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    scale = (size - 2 * pad) / span
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for i, s in enumerate(sets):
        hue = (i * 137) % 360
        for x, y in s[:, :2]:
            cx = pad + (x - lo[0]) * scale
            cy = size - pad - (y - lo[1]) * scale
            lines.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2" fill="hsl({hue},70%,45%)"/>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_sample(cfg, overrides, out=print):
    sc = cfg.sample
    model = checkpoint.load(sc.checkpoint)
    if model.config.effective_base == "flat" and sc.n != model.config.n:
        raise SchemaError(f"flat-base model only samples n={model.config.n}")
    x = model.sample(sc.n, sc.seed, count=sc.count)
    ds = datasets.SetDataset(list(x), d=model.config.d,
                             meta={"generator": "flowscan-sample", "seed": sc.seed, "n": sc.n})
    run_dir = fresh_dir(cfg.output.dir, f"{cfg.output.name}-sample")
    echo_config(cfg, run_dir, overrides)
    datasets.write_fset(ds, os.path.join(run_dir, "samples.fset"))
    if cfg.output.csv:
        datasets.write_csv(ds, os.path.join(run_dir, "samples.csv"))
    if cfg.output.svg:
        write_svg(ds.sets, os.path.join(run_dir, "samples.svg"))
    out(f"wrote {sc.count} sets of {sc.n} points to {run_dir}")
    return EXIT_OK


@contextmanager
def injected(fault):
    if fault:
        transforms.FAULTS.add(fault)
    try:
        yield
    finally:
        transforms.FAULTS.discard(fault)


def cmd_verify(cfg, overrides, out=print):
    with injected(cfg.verify.inject_fault):
        results = verify.run(cfg.verify.scope)
    for r in results:
        out(r.line())
    failed = [r.name for r in results if not r.passed]
    out(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_VERIFY if failed else EXIT_OK


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample, "verify": cmd_verify}


def build_parser():
    p = argparse.ArgumentParser(prog="flowscan", description="Exchangeable set densities with FlowScan.",
                                epilog="Any config key can be overridden with --section.key value.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI config file (optional for verify)")
    return p


def main(argv=None, out=print):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    err = lambda msg: print(f"flowscan: {msg}", file=sys.stderr)
    try:
        overrides = cfgmod.parse_overrides(rest)
        if args.config is None and args.command != "verify":
            raise ConfigError(f"{args.command} needs --config")
        cfg = cfgmod.load(args.config, overrides, command=args.command)
        return HANDLERS[args.command](cfg, overrides, out=out)
    except ConfigError as e:
        err(f"config error: {e}")
        return EXIT_USAGE
    except (FsetError, SchemaError, CheckpointError, ContractError, OSError) as e:
        err(f"data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        err(f"numeric error in {e.op}: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
