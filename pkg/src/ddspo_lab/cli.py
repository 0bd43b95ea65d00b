"""``ddspo-lab``: data generation, training, sampling, evaluation, sweeps and self-check.

Every subcommand writes only under ``--out`` and records a ``manifest.json``
there before doing any heavy work.  ``--config run.json`` supplies option
values; flags given on the command line take precedence.  A manifest's
``config`` block is itself a valid ``--config`` file.

Exit codes: 0 ok, 1 selfcheck failure, 2 bad flags, 3 missing or invalid
inputs, 4 numerical failure, 5 sweep finished with failed cells.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from .diffusion import build_linear_schedule, sample_conditions
from .experiment import ToyConfig, make_pairs, run_sweep, run_toy, stage_seed
from .metrics import evaluate
from .network import CheckpointError, NetConfig, eps_fn_for
from .objectives import LossConfig
from .report import emit_scatter_svg, save_panels, save_sweep_heatmap
from .trainer import (NumericalError, finetune, finetune_config, load_checkpoint, pretrain_config,
                      pretrain_reference, save_checkpoint)

log = logging.getLogger("ddspo_lab")

EXIT_OK, EXIT_SELFCHECK, EXIT_FLAGS, EXIT_INPUTS, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3, 4, 5

METHOD_NAMES = {
    "ddpo": "ddpo",
    "dspo": "dspo",
    "dspo-cpp": "dspo_cpp",
    "ddspo": "ddspo_practical",
    "ddspo-efficient": "ddspo_efficient",
}


class UsageError(Exception):
    """Flag or config validation failure (exit 2)."""


class InputError(Exception):
    """Missing or unreadable input (exit 3)."""


# -- option plumbing ---------------------------------------------------------------

def _list_of(kind):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return [kind(v) for v in text]
        try:
            vals = [kind(v) for v in str(text).split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad list {text!r}: {exc}") from None
        if not vals:
            raise argparse.ArgumentTypeError("empty list")
        return vals
    parse.__name__ = f"list of {kind.__name__}"
    return parse


def _bool(text):
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


class _Options:
    """Collects per-command defaults so config files can sit between defaults and flags."""

    def __init__(self, parser):
        self.parser = parser
        self.defaults, self.types = {}, {}

    def add(self, flag, kind, default, help, **kw):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest], self.types[dest] = default, kind
        shown = ",".join(map(str, default)) if isinstance(default, (list, tuple)) else default
        self.parser.add_argument(flag, type=kind, default=None, dest=dest,
                                 help=f"{help} (default: {shown})", **kw)


def _resolve(args, opts: _Options) -> dict:
    cfg = dict(opts.defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        doc = doc.get("config", doc) if isinstance(doc, dict) else doc
        if not isinstance(doc, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {unknown}")
        for k, v in doc.items():
            try:
                cfg[k] = None if v is None else opts.types[k](v)
            except (argparse.ArgumentTypeError, TypeError, ValueError) as exc:
                raise UsageError(f"config key {k!r}: {exc}") from None
    for k in opts.defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


def write_manifest(out: Path, command: str, cfg: dict, inputs: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "tool_version": __version__,
        "seed": cfg.get("seed"),
        "config": {k: _jsonable(v) for k, v in cfg.items()},
        "inputs": {k: str(Path(v).resolve()) for k, v in inputs.items() if v is not None},
        "out": str(out.resolve()),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _require_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} file not found: {p}")
    return p


def _check(cond, msg):
    if not cond:
        raise UsageError(msg)


def _mixture(cfg) -> D.MixtureSpec:
    _check(cfg["classes"] >= 2, "--classes must be at least 2")
    _check(cfg["radius"] > 0, "--radius must be positive")
    _check(cfg["std"] > 0, "--std must be positive")
    return D.build_ring_mixture(cfg["classes"], cfg["radius"], cfg["std"])


def _geometry_opts(o: _Options):
    o.add("--classes", int, 6, "number of mixture components K")
    o.add("--radius", float, 2.0, "ring radius")
    o.add("--std", float, 0.18, "per-component standard deviation")


def _write_trace(path: Path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, format(float(v), ".17g")])


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise InputError(f"{path}: {exc}") from None


def _write_samples(out: Path, pts, labs, spec, title):
    D.save_dataset_csv(D.ToyDataset(pts, labs), out / "samples.csv")
    emit_scatter_svg(pts, labs, spec, out / "samples.svg", title=title)


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(cfg, out):
    spec = _mixture(cfg)
    _check(cfg["n_per_class"] >= 1, "--n-per-class must be at least 1")
    _check(cfg["extra_std"] >= 0, "--extra-std must be non-negative")
    _check(0 <= cfg["contamination"] <= 1, "--contamination must lie in [0, 1]")
    write_manifest(out, "gen-data", cfg, {})
    seed = cfg["seed"]
    clean = D.sample_clean(spec, cfg["n_per_class"], stage_seed(seed, "clean"))
    noisy = D.corrupt_dataset(clean, spec, cfg["extra_std"], cfg["contamination"], stage_seed(seed, "corrupt"))
    D.save_dataset_csv(clean, out / "clean.csv")
    D.save_dataset_csv(noisy, out / "train.csv")
    emit_scatter_svg(noisy.x0, noisy.c, spec, out / "train.svg", title="training set")
    print(f"wrote {len(clean)} clean and {len(noisy)} corrupted records to {out}")
    return EXIT_OK


def cmd_pretrain(cfg, out):
    spec = _mixture(cfg)
    data_path = _require_file(cfg["data"], "data")
    for k in ("steps", "batch_size", "T", "hidden_width", "hidden_layers"):
        _check(cfg[k] >= 1, f"--{k.replace('_', '-')} must be at least 1")
    _check(cfg["lr"] > 0, "--lr must be positive")
    try:
        schedule = build_linear_schedule(cfg["T"], cfg["beta_start"], cfg["beta_end"])
        net_cfg = NetConfig(cfg["hidden_width"], cfg["hidden_layers"], spec.num_classes, num_steps=cfg["T"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        data = D.load_dataset_csv(data_path, spec.num_classes)
    except D.DataFormatError as exc:
        raise InputError(str(exc)) from None
    if len(data) == 0:
        raise InputError(f"{data_path} holds no records")
    write_manifest(out, "pretrain", cfg, {"data": data_path})
    tc = pretrain_config(steps=cfg["steps"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"], seed=cfg["seed"])
    ck = pretrain_reference(data, net_cfg, schedule, tc, stage_seed(cfg["seed"], "pretrain"))
    save_checkpoint(ck, out / "reference.json")
    _write_trace(out / "loss_trace.csv", ck.loss_trace)
    print(f"pretrained reference: loss {ck.loss_summary['first']:.4f} -> {ck.loss_summary['final']:.4f}")
    return EXIT_OK


def cmd_finetune(cfg, out):
    method = cfg["method"]
    _check(method in METHOD_NAMES, f"--method must be one of {sorted(METHOD_NAMES)}")
    internal = METHOD_NAMES[method]
    _check(cfg["beta"] > 0, "--beta must be positive")
    _check(cfg["lr"] >= 0, "--lr must be non-negative")
    _check(cfg["steps"] >= 1 and cfg["batch_size"] >= 1, "--steps and --batch-size must be at least 1")
    _check(cfg["pair_source"] in ("clean", "reference"), "--pair-source must be clean or reference")
    spec = _mixture(cfg)
    ref = _load_ckpt(_require_file(cfg["ref"], "ref"))
    if ref.params.config.num_classes != spec.num_classes:
        raise InputError(f"reference has K={ref.params.config.num_classes}, --classes is {spec.num_classes}")
    pairs_path = None
    if cfg["pairs"] is not None:
        pairs_path = _require_file(cfg["pairs"], "pairs")
        try:
            pairs = D.load_pairs_csv(pairs_path, spec.num_classes)
        except D.DataFormatError as exc:
            raise InputError(str(exc)) from None
        want = "unpaired" if internal == "ddspo_efficient" else "paired"
        if pairs.mode != want:
            raise InputError(f"{method} needs {want} pairs but {pairs_path} is {pairs.mode}")
        if len(pairs) == 0:
            raise InputError(f"{pairs_path} holds no pairs")
    else:
        _check(cfg["N"] >= spec.num_classes and cfg["N"] % spec.num_classes == 0,
               f"--N must be a positive multiple of --classes ({spec.num_classes})")
        try:
            toy = ToyConfig(num_classes=spec.num_classes, radius=cfg["radius"], std=cfg["std"], n_pairs=cfg["N"],
                            neighbor_offsets=tuple(cfg["neighbor_offsets"]), pair_source=cfg["pair_source"])
            pairs = make_pairs(toy, cfg["seed"], ref=ref, unpaired=(internal == "ddspo_efficient"))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    write_manifest(out, "finetune", cfg, {"ref": cfg["ref"], "pairs": pairs_path})
    D.save_pairs_csv(pairs, out / "pairs.csv")
    tc = finetune_config(internal, steps=cfg["steps"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
                         warmup_steps=cfg["warmup_steps"], seed=stage_seed(cfg["seed"], "finetune"),
                         loss=LossConfig(beta=cfg["beta"], dspo_gate_stop_gradient=cfg["gate_stop_gradient"]))
    ck = finetune(internal, ref, pairs, tc)
    save_checkpoint(ck, out / "finetuned.json")
    _write_trace(out / "loss_trace.csv", ck.loss_trace)
    print(f"{method}: {len(pairs)} pairs, loss {ck.loss_summary['first']:.4f} -> {ck.loss_summary['final']:.4f}")
    return EXIT_OK


def _sample_ckpt(ck, cfg):
    _check(cfg["n_per_class"] >= 1, "--n-per-class must be at least 1")
    K = ck.params.config.num_classes
    return sample_conditions(ck.schedule, eps_fn_for(ck.params), range(K), cfg["n_per_class"],
                             stage_seed(cfg["seed"], "eval"))


def cmd_sample(cfg, out):
    spec = _mixture(cfg)
    ck = _load_ckpt(_require_file(cfg["ckpt"], "ckpt"))
    write_manifest(out, "sample", cfg, {"ckpt": cfg["ckpt"]})
    pts, labs = _sample_ckpt(ck, cfg)
    _write_samples(out, pts, labs, spec, title=Path(cfg["ckpt"]).stem)
    print(f"wrote {len(pts)} samples to {out / 'samples.csv'}")
    return EXIT_OK


def cmd_eval(cfg, out):
    spec = _mixture(cfg)
    _check((cfg["samples"] is None) != (cfg["ckpt"] is None), "give exactly one of --samples or --ckpt")
    if cfg["samples"] is not None:
        path = _require_file(cfg["samples"], "samples")
        try:
            ds = D.load_dataset_csv(path, spec.num_classes)
        except D.DataFormatError as exc:
            raise InputError(str(exc)) from None
        write_manifest(out, "eval", cfg, {"samples": path})
        pts, labs = ds.x0, ds.c
    else:
        ck = _load_ckpt(_require_file(cfg["ckpt"], "ckpt"))
        write_manifest(out, "eval", cfg, {"ckpt": cfg["ckpt"]})
        pts, labs = _sample_ckpt(ck, cfg)
        _write_samples(out, pts, labs, spec, title=Path(cfg["ckpt"]).stem)
    try:
        rep = evaluate(pts, labs, spec)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    (out / "metrics.json").write_text(rep.to_json() + "\n")
    save_panels([("samples", pts, labs)], spec, out / "samples.png")
    print(f"condition_consistency {rep.condition_consistency:.4f}  centroid_shift {rep.centroid_shift:.4f}")
    return EXIT_OK


def _toy_config(cfg) -> ToyConfig:
    try:
        return ToyConfig(num_classes=cfg["classes"], radius=cfg["radius"], std=cfg["std"], n_pairs=2 * cfg["classes"],
                         pretrain_steps=cfg["pretrain_steps"], finetune_steps=cfg["finetune_steps"],
                         finetune_lr=cfg["lr"], eval_per_class=cfg["n_per_class"],
                         neighbor_offsets=tuple(cfg["neighbor_offsets"]), pair_source=cfg["pair_source"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _methods(names):
    bad = [m for m in names if m not in METHOD_NAMES]
    _check(not bad, f"unknown method(s) {bad}; expected names from {sorted(METHOD_NAMES)}")
    return [METHOD_NAMES[m] for m in names]


def cmd_sweep(cfg, out):
    _mixture(cfg)
    methods = _methods(cfg["methods"])
    _check(all(n >= 1 and n % cfg["classes"] == 0 for n in cfg["N"]),
           f"every N must be a positive multiple of --classes ({cfg['classes']})")
    _check(all(b > 0 for b in cfg["beta"]), "every beta must be positive")
    _check(cfg["workers"] >= 1, "--workers must be at least 1")
    toy = _toy_config(cfg)
    write_manifest(out, "sweep", cfg, {})
    grid = run_sweep(methods, cfg["N"], cfg["beta"], cfg["seeds"], toy, out, cfg["workers"])
    (out / "cells.json").write_text(json.dumps(grid.cells, indent=1, default=float) + "\n")
    if any(c["status"] == "ok" for c in grid.cells):
        save_sweep_heatmap(grid.cells, out / "heatmap.png", grid.beta_values, grid.N_values)
    for m in grid.methods:
        for b in grid.beta_values:
            vals = " ".join(f"N={n}:{grid.mean_consistency(m, n, b):.3f}" for n in grid.N_values)
            print(f"{m:16s} beta={b:g}  {vals}")
    if grid.failed:
        print(f"{len(grid.failed)} of {len(grid.cells)} cells failed; see grid.csv", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_toy(cfg, out):
    _mixture(cfg)
    methods = _methods(cfg["methods"])
    toy = _toy_config(cfg)
    write_manifest(out, "toy", cfg, {})
    spec = toy.mixture()
    summary = {}
    for seed in cfg["seeds"]:
        run = run_toy(toy, seed, methods)
        sd = out / f"seed{seed}"
        sd.mkdir(exist_ok=True)
        panels = [("ground truth", *_gt(spec, toy, seed)), ("training data", run.noisy.x0, run.noisy.c)]
        for res in [run.reference, *run.results.values()]:
            save_checkpoint(res.checkpoint, sd / f"{res.method}.json")
            D.save_dataset_csv(D.ToyDataset(res.samples, res.labels), sd / f"samples_{res.method}.csv")
            emit_scatter_svg(res.samples, res.labels, spec, sd / f"samples_{res.method}.svg", title=res.method)
            (sd / f"metrics_{res.method}.json").write_text(res.metrics.to_json() + "\n")
            panels.append((res.method, res.samples, res.labels))
            summary.setdefault(res.method, []).append(res.metrics.condition_consistency)
        save_panels(panels, spec, sd / "panels.png", ncols=min(len(panels), 4))
    means = {m: float(np.mean(v)) for m, v in summary.items()}
    (out / "summary.json").write_text(json.dumps({"seeds": cfg["seeds"], "consistency": summary,
                                                  "mean_consistency": means}, indent=2) + "\n")
    for m, v in means.items():
        print(f"{m:16s} mean consistency {v:.4f}")
    return EXIT_OK


def _gt(spec, toy, seed):
    ds = D.sample_clean(spec, toy.eval_per_class, stage_seed(seed, "clean"))
    return ds.x0, ds.c


def cmd_selfcheck(cfg, out):
    from .checks import FAULTS, run_selfcheck
    fault = cfg["inject_fault"]
    _check(fault is None or fault in FAULTS, f"--inject-fault must be one of {FAULTS}")
    results = run_selfcheck(fault)
    failed = [r for r in results if not r.passed]
    print(f"selfcheck: {len(results) - len(failed)}/{len(results)} passed")
    return EXIT_SELFCHECK if failed else EXIT_OK


# -- parser ----------------------------------------------------------------------------

COMMANDS = {}


def _sub(subs, name, fn, help, needs_out=True):
    p = subs.add_parser(name, help=help, description=help)
    p.add_argument("--config", help="JSON file of option values; command-line flags take precedence")
    if needs_out:
        p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    o = _Options(p)
    COMMANDS[name] = (fn, o)
    return o


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddspo-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    ints, floats, strs = _list_of(int), _list_of(float), _list_of(str)

    o = _sub(subs, "gen-data", cmd_gen_data, "sample the clean mixture and its corrupted training copy")
    _geometry_opts(o)
    o.add("--n-per-class", int, 2000, "records per class")
    o.add("--extra-std", float, 0.12, "jitter added to every training point")
    o.add("--contamination", float, 0.1, "probability of relabelling a training point")
    o.add("--seed", int, 0, "random seed")

    o = _sub(subs, "pretrain", cmd_pretrain, "train the reference noise predictor on a dataset CSV")
    o.add("--data", str, None, "dataset CSV (x,y,c)")
    _geometry_opts(o)
    o.add("--steps", int, 4000, "optimizer steps")
    o.add("--batch-size", int, 256, "minibatch size")
    o.add("--lr", float, 1e-3, "learning rate")
    o.add("--T", int, 100, "diffusion steps")
    o.add("--beta-start", float, 1e-4, "first noise variance")
    o.add("--beta-end", float, 0.05, "last noise variance")
    o.add("--hidden-width", int, 128, "hidden layer width")
    o.add("--hidden-layers", int, 2, "number of hidden layers")
    o.add("--seed", int, 0, "random seed")

    o = _sub(subs, "finetune", cmd_finetune, "preference fine-tuning of a reference checkpoint")
    o.add("--ref", str, None, "reference checkpoint JSON")
    o.add("--method", str, "ddspo", f"objective, one of {','.join(METHOD_NAMES)}")
    o.add("--pairs", str, None, "pairs CSV; drawn fresh when omitted")
    o.add("--N", int, 12, "total pairs to draw when --pairs is omitted")
    o.add("--neighbor-offsets", ints, [1, -1], "class offsets cycled to pick the perturbed condition")
    o.add("--pair-source", str, "clean", "draw pairs from the clean mixture or the reference model")
    _geometry_opts(o)
    o.add("--beta", float, 400.0, "regularization strength")
    o.add("--gate-stop-gradient", _bool, True, "treat the DSPO gate as a constant in backprop")
    o.add("--steps", int, 600, "optimizer steps")
    o.add("--batch-size", int, 64, "minibatch size (capped at the pair count)")
    o.add("--lr", float, 7e-4, "learning rate")
    o.add("--warmup-steps", int, 50, "linear warmup steps")
    o.add("--seed", int, 0, "random seed")

    for name, fn, text in (("sample", cmd_sample, "draw samples for every condition from a checkpoint"),
                           ("eval", cmd_eval, "score samples (or a checkpoint) for mode separation")):
        o = _sub(subs, name, fn, text)
        o.add("--ckpt", str, None, "checkpoint JSON")
        if name == "eval":
            o.add("--samples", str, None, "samples CSV (x,y,c); alternative to --ckpt")
        _geometry_opts(o)
        o.add("--n-per-class", int, 300, "samples per condition")
        o.add("--seed", int, 0, "random seed")

    for name, fn, text, methods in (
            ("sweep", cmd_sweep, "fine-tune and score every (method, N, beta, seed) cell", "ddpo,dspo,ddspo"),
            ("toy", cmd_toy, "full toy comparison: reference plus each method, with figures",
             "ddpo,dspo,ddspo,ddspo-efficient")):
        o = _sub(subs, name, fn, text)
        o.add("--methods", strs, methods.split(","), "comma list of methods")
        if name == "sweep":
            o.add("--N", ints, [12, 120, 1200], "comma list of total pair counts")
            o.add("--beta", floats, [200.0, 400.0, 800.0], "comma list of regularization strengths")
            o.add("--seeds", ints, [0, 1, 2], "comma list of seeds")
            o.add("--workers", int, 1, "parallel worker processes (one seed each)")
        else:
            o.add("--seeds", ints, [0, 1, 2, 3, 4], "comma list of seeds")
        _geometry_opts(o)
        o.add("--pretrain-steps", int, 4000, "reference pretraining steps")
        o.add("--finetune-steps", int, 600, "fine-tuning steps")
        o.add("--lr", float, 7e-4, "fine-tuning learning rate")
        o.add("--neighbor-offsets", ints, [1, -1], "class offsets cycled to pick the perturbed condition")
        o.add("--pair-source", str, "clean", "draw pairs from the clean mixture or the reference model")
        o.add("--n-per-class", int, 300, "evaluation samples per condition")

    o = _sub(subs, "selfcheck", cmd_selfcheck, "run the fast invariant suite", needs_out=False)
    o.add("--inject-fault", str, None, "test hook: deliberately break a component ('gradient')")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, opts = COMMANDS[args.command]
    out = Path(args.out) if getattr(args, "out", None) else None
    try:
        cfg = _resolve(args, opts)
        return fn(cfg, out)
    except UsageError as exc:
        print(f"ddspo-lab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FLAGS
    except (InputError, FileNotFoundError) as exc:
        print(f"ddspo-lab {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUTS
    except (NumericalError, FloatingPointError) as exc:
        print(f"ddspo-lab {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
