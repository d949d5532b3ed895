"""Experiment runner: ``nsfx {train,noise-compare,gradcheck,saturation-study}``.

Config files
------------
Configs are TOML documents restricted to dotted keys (``[section]`` tables
are equivalent and also accepted).  Recognised keys::

    seed = 0                       # run seed; --seed overrides
    output_dir = "runs/x"          # --out overrides
    dataset.kind = "mnist_idx"     # or "synthetic"
    dataset.train_images = "..."   # paths relative to the config file
    dataset.train_labels = "..."
    dataset.test_images = "..."
    dataset.test_labels = "..."
    dataset.per_class = 60         # 0 keeps every training digit
    dataset.subset_seed = 0        # default: the run seed
    dataset.n_per_class = 100      # synthetic only
    dataset.test_per_class = 500   # synthetic only
    dataset.dim = 2                # synthetic only
    dataset.separation = 4.0       # synthetic only
    dataset.seed = 0               # synthetic only; default: the run seed
    dataset.mean_subtract = true
    noise.variant = "annealed"     # none annealed normal negative free amplitude
    noise.alpha_squared = 0.1
    train.layers = ["mlp"]         # "mlp", "cnn" or layer strings like "dense(784, 64)"
    train.batch_size = 64
    train.total_iterations = 2000
    train.base_lr = 0.05
    train.lr_drops = [1500]        # default: 75% of total_iterations
    train.lr_factor = 10.0
    train.weight_decay = 0.001
    train.momentum = 0.9
    train.pbar_interval = 100      # metrics every K updates
    train.dtype = "float32"
    train.pbar_mode = "noisy"      # or "clean"
    sweep.variants = ["none", "annealed"]
    sweep.alpha_squares = [0.0, 0.1]   # noise-compare grid
    sweep.alpha_squared = 0.1          # saturation-study scale
    sweep.seeds = [0, 1, 2]            # paired seeds; --seed runs just that one
    sweep.checkpoint = 0.25            # fraction of training for the P-bar checkpoint
    gradcheck.variants = [...]
    gradcheck.alpha_squares = [...]
    gradcheck.configs = 100
    gradcheck.tol = 1e-5

Any other key is rejected.  Exit codes: 0 success, 1 configuration error,
2 divergence, 3 I/O or file-format error; 4 from ``gradcheck`` when a
check fails.  ``NSFX_THREADS`` caps the number of worker processes used
for sweep cells (default 1).
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import gradcheck as gc
from .data import DatasetSpec, load_datasets
from .errors import ConfigError, DivergedError, FormatError, NonFiniteError, NsfxError
from .losses import VARIANTS, NoiseSpec
from .outputs import write_csv, write_json, write_params
from .training import METRIC_FIELDS, TrainConfig, train

log = logging.getLogger("nsfx")

COMPARISON_FIELDS = ("variant", "alpha_squared", "seed", "final_test_err", "final_p_bar")
SATURATION_FIELDS = ("iteration", "variant", "p_bar", "test_err")
GRADCHECK_FIELDS = ("variant", "alpha_squared", "n_classes", "dim", "batch", "seed",
                    "max_rel", "max_abs", "worst_block", "passed")

SCHEMA = {
    "": {"seed": "int", "output_dir": "str"},
    "dataset": {"kind": "str", "train_images": "str", "train_labels": "str", "test_images": "str",
                "test_labels": "str", "per_class": "int", "subset_seed": "int", "n_per_class": "int",
                "test_per_class": "int", "dim": "int", "separation": "float", "seed": "int",
                "mean_subtract": "bool"},
    "noise": {"variant": "str", "alpha_squared": "float"},
    "train": {"layers": "str_list", "batch_size": "int", "total_iterations": "int", "base_lr": "float",
              "lr_drops": "int_list", "lr_factor": "float", "weight_decay": "float", "momentum": "float",
              "pbar_interval": "int", "dtype": "str", "pbar_mode": "str"},
    "sweep": {"variants": "str_list", "alpha_squares": "float_list", "alpha_squared": "float",
              "seeds": "int_list", "checkpoint": "float"},
    "gradcheck": {"variants": "str_list", "alpha_squares": "float_list", "configs": "int", "tol": "float"},
}


def _flatten(tree, prefix=""):
    for k, v in tree.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, path + ".")
        else:
            yield path, v


def _coerce(path, kind, v):
    def bad():
        return ConfigError(f"config key '{path}': expected {kind.replace('_', ' ')}, got {v!r}")

    def scalar(k, x):
        if k == "int":
            if isinstance(x, bool) or not isinstance(x, int):
                raise bad()
            return x
        if k == "float":
            if isinstance(x, bool) or not isinstance(x, (int, float)):
                raise bad()
            return float(x)
        if k == "str":
            if not isinstance(x, str):
                raise bad()
            return x
        if not isinstance(x, bool):
            raise bad()
        return x

    if kind.endswith("_list"):
        if not isinstance(v, list):
            raise bad()
        return [scalar(kind[:-5], x) for x in v]
    return scalar(kind, v)


def parse_config_text(text):
    """Parse and type-check config text into ``{section: {key: value}}``; unknown keys raise."""
    try:
        tree = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    out = {s: {} for s in SCHEMA}
    for path, v in _flatten(tree):
        section, _, key = path.rpartition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key '{path}'")
        out[section][key] = _coerce(path, SCHEMA[section][key], v)
    return out


@dataclass
class SweepSpec:
    variants: tuple = ("none", "annealed")
    alpha_squares: tuple = (0.0, 0.1)
    alpha_squared: float = 0.1
    seeds: tuple = (0,)
    checkpoint: float = 0.25

    def __post_init__(self):
        self.variants = tuple(self.variants)
        self.alpha_squares = tuple(float(a) for a in self.alpha_squares)
        self.seeds = tuple(int(s) for s in self.seeds)
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"sweep.variants: unknown variant {v!r}")
        if not self.variants or not self.alpha_squares or not self.seeds:
            raise ConfigError("sweep.variants, sweep.alpha_squares and sweep.seeds must be non-empty")
        if min(self.alpha_squares) < 0 or self.alpha_squared < 0:
            raise ConfigError("alpha_squared values must be >= 0")
        if any(not 0 <= s < 2**64 for s in self.seeds):
            raise ConfigError("sweep.seeds must be unsigned 64-bit integers")
        if not 0 < self.checkpoint <= 1:
            raise ConfigError("sweep.checkpoint must lie in (0, 1]")


@dataclass
class ExperimentConfig:
    """A parsed config file: template training config plus sweep and gradcheck options."""

    train: TrainConfig
    alpha_squared: float = 0.0
    sweep: SweepSpec = field(default_factory=SweepSpec)
    gradcheck: dict = field(default_factory=dict)
    output_dir: str = ""
    base_dir: Path = Path(".")
    seed_set: bool = False
    follow_seed: tuple = ()

    def cell(self, variant, alpha_squared, seed):
        """Training config for one sweep cell; dataset seeds follow ``seed`` unless pinned."""
        ds = self.train.dataset
        if "subset_seed" in self.follow_seed:
            ds = replace(ds, subset_seed=seed)
        if "seed" in self.follow_seed:
            ds = replace(ds, seed=seed)
        return replace(self.train, dataset=ds, seed=seed,
                       noise=NoiseSpec.from_alpha_squared(variant, alpha_squared))


def build_config(sections, base_dir=Path("."), seed=None):
    top, ds, noise, tr = sections[""], sections["dataset"], sections["noise"], sections["train"]
    run_seed = seed if seed is not None else top.get("seed", 0)
    if not 0 <= run_seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {run_seed}")
    follow = tuple(k for k in ("subset_seed", "seed") if k not in ds)
    dataset = DatasetSpec(**ds)
    a2 = noise.get("alpha_squared", 0.0)
    tcfg = TrainConfig(dataset=dataset, noise=NoiseSpec.from_alpha_squared(noise.get("variant", "none"), a2),
                       seed=run_seed, **tr)
    sw = dict(sections["sweep"])
    if seed is not None:
        sw["seeds"] = [seed]
    elif "seeds" not in sw:
        sw["seeds"] = [run_seed]
    exp = ExperimentConfig(tcfg, a2, SweepSpec(**sw), dict(sections["gradcheck"]),
                           top.get("output_dir", ""), Path(base_dir), seed is not None, follow)
    return exp


def load_config(path, seed=None):
    path = Path(path)
    text = path.read_text()
    try:
        return build_config(parse_config_text(text), path.parent, seed)
    except ConfigError:
        raise
    except (NsfxError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _threads():
    raw = os.environ.get("NSFX_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"NSFX_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"NSFX_THREADS must be a positive integer, got {raw!r}")
    return n


_DATA_CACHE = {}


def _data(spec, base_dir):
    key = (repr(spec), str(base_dir))
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = load_datasets(spec, base_dir)
    return _DATA_CACHE[key]


def _run_cell(job):
    cfg, base_dir = job
    return train(cfg, data=_data(cfg.dataset, base_dir))


def run_cells(jobs, workers=1):
    """Train every ``(TrainConfig, base_dir)`` job; results come back in job order."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


def canonical_cell(variant, alpha_squared):
    """Cells with ``alpha_squared == 0`` collapse to ``("none", 0.0)``; everything else is kept as given."""
    if alpha_squared == 0:
        return "none", 0.0
    return variant, float(alpha_squared)


def cell_name(variant, alpha_squared):
    return f"{variant}_a2-{alpha_squared:g}"


def metric_rows(metrics):
    return [m.row() for m in metrics]


def checkpoint_record(metrics, iteration):
    """Last recorded metrics at or before ``iteration``."""
    best = metrics[0]
    for m in metrics:
        if m.iteration <= iteration:
            best = m
    return best


def run_summary(result, alpha_squared):
    ms = result.metrics
    final = ms[-1]
    best = min(ms, key=lambda m: (m.test_err, m.iteration))
    return {
        "seed": result.config.seed,
        "variant": result.config.noise.variant,
        "alpha_squared": alpha_squared,
        "iterations": final.iteration,
        "final_loss": final.loss,
        "final_train_err": final.train_err,
        "final_test_err": final.test_err,
        "best_test_err": best.test_err,
        "best_iteration": best.iteration,
        "final_p_bar": final.p_bar,
        "final_p_bar_clean": final.p_bar_clean,
    }


def _out_dir(args, exp, default):
    out = args.out or (str(exp.base_dir / exp.output_dir) if exp.output_dir else default)
    return Path(out)


def _progress(args, label):
    if args.quiet:
        return None

    def cb(m):
        print(f"{label} it={m.iteration:6d} loss={m.loss:.4f} train_err={m.train_err:6.2f} "
              f"test_err={m.test_err:6.2f} p_bar={m.p_bar:.4f} lr={m.lr:g}", flush=True)
    return cb


def cmd_train(args):
    exp = load_config(args.config, args.seed)
    cfg = exp.cell(exp.train.noise.variant, exp.alpha_squared, exp.train.seed)
    out = _out_dir(args, exp, "runs/train")
    data = load_datasets(cfg.dataset, exp.base_dir)
    result = train(cfg, data=data, timing=args.timing, callback=_progress(args, "train"))
    write_csv(out / "metrics.csv", METRIC_FIELDS, metric_rows(result.metrics))
    summary = {"subcommand": "train", **run_summary(result, exp.alpha_squared), "config": cfg.as_dict()}
    summary["config"]["noise"]["alpha_squared"] = exp.alpha_squared
    write_json(out / "summary.json", summary)
    write_params(out / "params.bin", result.params())
    if args.timing:
        write_json(out / "timing.json", {"wall_time_s": result.wall_time})
    if not args.quiet:
        print(f"wrote {out}/metrics.csv, summary.json, params.bin")
    return 0


def _sweep(exp, cells, out, args, label):
    """Train every ``cell x seed`` pair, write per-cell metrics, return ``{(cell, seed): result}``."""
    jobs, keys = [], []
    for seed in exp.sweep.seeds:
        for v, a2 in cells:
            jobs.append((exp.cell(v, a2, seed), exp.base_dir))
            keys.append(((v, a2), seed))
    results = {}
    for key, job, res in zip(keys, jobs, run_cells(jobs, _threads())):
        (v, a2), seed = key
        write_csv(out / "cells" / cell_name(v, a2) / f"seed-{seed}" / "metrics.csv",
                  METRIC_FIELDS, metric_rows(res.metrics))
        results[key] = res
        if not args.quiet:
            f = res.metrics[-1]
            print(f"{label} {cell_name(v, a2)} seed={seed} test_err={f.test_err:.2f} p_bar={f.p_bar:.4f}",
                  flush=True)
    return results


def _dedupe(pairs):
    cells = []
    for v, a2 in pairs:
        c = canonical_cell(v, a2)
        if c not in cells:
            cells.append(c)
    return cells


def cmd_noise_compare(args):
    exp = load_config(args.config, args.seed)
    out = _out_dir(args, exp, "runs/noise-compare")
    cells = _dedupe((v, a2) for v in exp.sweep.variants for a2 in exp.sweep.alpha_squares)
    results = _sweep(exp, cells, out, args, "noise-compare")
    rows = []
    for seed in exp.sweep.seeds:
        for v, a2 in cells:
            f = results[(v, a2), seed].metrics[-1]
            rows.append((v, a2, seed, f.test_err, f.p_bar))
    write_csv(out / "comparison.csv", COMPARISON_FIELDS, rows)
    ckpt = int(round(exp.sweep.checkpoint * exp.train.total_iterations))
    summary = {"subcommand": "noise-compare", "seeds": list(exp.sweep.seeds), "checkpoint_iteration": ckpt,
               "cells": [], "config": exp.train.as_dict()}
    for v, a2 in cells:
        runs = [results[(v, a2), s] for s in exp.sweep.seeds]
        summary["cells"].append({
            "variant": v, "alpha_squared": a2,
            "mean_final_test_err": float(np.mean([r.metrics[-1].test_err for r in runs])),
            "mean_final_p_bar": float(np.mean([r.metrics[-1].p_bar for r in runs])),
            "mean_checkpoint_p_bar": float(np.mean([checkpoint_record(r.metrics, ckpt).p_bar for r in runs])),
        })
    write_json(out / "summary.json", summary)
    if not args.quiet:
        print(f"wrote {out}/comparison.csv ({len(rows)} rows)")
    return 0


def cmd_saturation_study(args):
    exp = load_config(args.config, args.seed)
    out = _out_dir(args, exp, "runs/saturation-study")
    cells = _dedupe((v, exp.sweep.alpha_squared) for v in exp.sweep.variants)
    results = _sweep(exp, cells, out, args, "saturation")
    seeds = exp.sweep.seeds
    iterations = [m.iteration for m in results[cells[0], seeds[0]].metrics]
    rows = []
    for i, it in enumerate(iterations):
        for c in cells:
            ms = [results[c, s].metrics[i] for s in seeds]
            rows.append((it, c[0], float(np.mean([m.p_bar for m in ms])), float(np.mean([m.test_err for m in ms]))))
    write_csv(out / "saturation.csv", SATURATION_FIELDS, rows)
    ckpt = int(round(exp.sweep.checkpoint * exp.train.total_iterations))
    summary = {"subcommand": "saturation-study", "seeds": list(seeds), "alpha_squared": exp.sweep.alpha_squared,
               "checkpoint_iteration": ckpt, "pbar_mode": exp.train.pbar_mode, "variants": {},
               "config": exp.train.as_dict()}
    for c in cells:
        runs = [results[c, s] for s in seeds]
        summary["variants"][c[0]] = {
            "checkpoint_p_bar": float(np.mean([checkpoint_record(r.metrics, ckpt).p_bar for r in runs])),
            "final_p_bar": float(np.mean([r.metrics[-1].p_bar for r in runs])),
            "checkpoint_p_bar_clean": float(np.mean([checkpoint_record(r.metrics, ckpt).p_bar_clean for r in runs])),
            "final_p_bar_clean": float(np.mean([r.metrics[-1].p_bar_clean for r in runs])),
            "final_test_err": float(np.mean([r.metrics[-1].test_err for r in runs])),
        }
    write_json(out / "summary.json", summary)
    if not args.quiet:
        print(f"wrote {out}/saturation.csv ({len(rows)} rows)")
    return 0


def cmd_gradcheck(args):
    opts = {}
    seed = 0
    if args.config:
        exp = load_config(args.config, args.seed)
        opts, seed = exp.gradcheck, exp.train.seed
    if args.seed is not None:
        seed = args.seed
    variants = args.variants.split(",") if args.variants else opts.get("variants", list(VARIANTS))
    a2s = [float(a) for a in args.alpha_squares.split(",")] if args.alpha_squares else \
        opts.get("alpha_squares", [0.0, 0.05, 0.1, 0.5, 1.0])
    n_configs = args.configs if args.configs is not None else opts.get("configs", 100)
    tol = args.tol if args.tol is not None else opts.get("tol", 1e-5)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    if n_configs < 1 or tol <= 0 or min(a2s) < 0:
        raise ConfigError("configs and tol must be positive, alpha squares >= 0")

    rows, worst = [], {}
    for rep in gc.sweep(variants, a2s, n_configs, seed, tol):
        m = rep.meta
        rows.append((m["variant"], m["alpha_squared"], m["n_classes"], m["dim"], m["batch"], m["seed"], rep.max_rel, rep.max_abs,
                     rep.worst_block(), int(rep.passed)))
        key = (m["variant"], m["alpha_squared"])
        if key not in worst or rep.max_rel > worst[key][0]:
            worst[key] = (rep.max_rel, rep.label, rep.worst_block())
    failed = sum(1 for r in rows if not r[-1])
    print(f"{'variant':<10s} {'alpha^2':>8s} {'max_rel':>10s}  worst case")
    for (v, a2), (rel, label, block) in worst.items():
        print(f"{v:<10s} {a2:8g} {rel:10.3e}  {block} @ {label}")
    overall = max(r[6] for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} checks passed; max_rel={overall:.3e} tol={tol:.1e}")
    if args.out:
        out = Path(args.out)
        write_csv(out / "gradcheck.csv", GRADCHECK_FIELDS, rows)
        write_json(out / "summary.json", {"subcommand": "gradcheck", "seed": seed, "tol": tol,
                                          "variants": variants, "alpha_squares": a2s, "configs": n_configs,
                                          "checks": len(rows), "failed": failed, "max_rel": overall})
    return 0 if failed == 0 else 4


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = argparse.ArgumentParser(prog="nsfx", description="Noisy Softmax experiments")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--timing", action="store_true", help="record wall time (ms column, timing.json)")
    t.set_defaults(func=cmd_train, need_config=True)
    sub.add_parser("noise-compare", parents=[common], help="variant x alpha^2 sweep with paired seeds") \
        .set_defaults(func=cmd_noise_compare, need_config=True)
    sub.add_parser("saturation-study", parents=[common], help="P-bar curves per variant") \
        .set_defaults(func=cmd_saturation_study, need_config=True)
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference sweep of the loss gradients")
    g.add_argument("--variants", help="comma-separated variants (default: all)")
    g.add_argument("--alpha-squares", help="comma-separated alpha^2 values")
    g.add_argument("--configs", type=int, help="number of random configurations")
    g.add_argument("--tol", type=float, help="relative error tolerance")
    g.set_defaults(func=cmd_gradcheck, need_config=False)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="nsfx: %(levelname)s: %(message)s")
    try:
        if args.need_config and not args.config:
            raise ConfigError(f"{args.command} needs --config")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        return args.func(args)
    except ConfigError as exc:
        print(f"nsfx: config error: {exc}", file=sys.stderr)
        return 1
    except (DivergedError, NonFiniteError) as exc:
        print(f"nsfx: diverged: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError) as exc:
        print(f"nsfx: I/O error: {exc}", file=sys.stderr)
        return 3
    except NsfxError as exc:
        print(f"nsfx: invalid input: {exc}", file=sys.stderr)
        return 1
