"""Experiment runner: declarative YAML configs expanded into run matrices
(variants x sweep points x seeds), executed on a bounded worker pool,
with per-run CSVs, an aggregate summary, and static SVG plots.

Outputs are a pure function of (config, seeds): CSV bytes are reproducible
across invocations. Wall-clock timings never enter the files.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import os
import re
import sys
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np
import yaml

from .envs import NcpRanges
from .harness import (RunConfig, TrainingStats,
                      similarity_delta_experiment, train)
from .mechanisms import MechanismConfig
from .networks import ArchitectureConfig
from .svgplot import Series, write_line_plot

CSV_VERSION = "mixmask-csv-v1"
OUT_ROOT_ENV = "MIXMASK_OUT_ROOT"

EPISODE_COLUMNS = [
    "episode", "seed", "variant", "sweep", "train_return", "steps", "epsilon",
    "eval_return", "solved", "j_pi", "j_v", "entropy", "alpha_s", "alpha_d",
    "penalty_mix", "penalty_mask", "contrastive_mix", "contrastive_mask",
]

RUN_COLUMNS = ["run_id", "variant", "sweep", "seed", "episodes_run", "solved",
               "final_eval", "config_hash", "aborted"]


class SchemaError(ValueError):
    """Configuration file violates the experiment schema."""


# ---------------------------------------------------------------------------
# experiment config
# ---------------------------------------------------------------------------

TRAIN_FIELDS = {
    "gamma", "lam", "entropy_coef", "learning_rate", "value_lr", "epsilon0",
    "epsilon_decay", "episodes", "eval_interval", "eval_trials", "normalize_adv",
    "value_coef", "max_grad_norm",
}
MULTIOBJ_FIELDS = {"mode", "z", "calibration_samples", "recalibrate_interval",
                   "recalibrate_z"}
ARCH_FIELDS = {"trunk_hidden", "backbone_width", "head_hidden", "extraction_point",
               "obs_dim", "n_actions"}


@dataclass
class VariantSpec:
    name: str
    arch: str
    mechanism: dict = field(default_factory=dict)
    arch_overrides: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    name: str
    variants: list[VariantSpec]
    seeds: list[int]
    out_dir: str
    env_mode: str = "cp"
    ncp_mode: str = "eval_only"
    ncp_ranges: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    multiobj: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    similarity: dict = field(default_factory=dict)


def _require(cond: bool, message: str):
    if not cond:
        raise SchemaError(message)


def load_experiment(path) -> ExperimentConfig:
    """Parse and validate a YAML experiment file; every enum and field is
    checked here, before any run starts."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    _require(isinstance(raw, dict), "config: top level must be a mapping")
    for key in ("name", "variants", "seeds", "out_dir"):
        _require(key in raw, f"config: missing required field {key!r}")
    seeds = raw["seeds"]
    _require(isinstance(seeds, list) and len(seeds) > 0, "seeds: must be a nonempty list")
    _require(all(isinstance(s, int) for s in seeds), "seeds: entries must be integers")

    env = raw.get("env", {}) or {}
    _require(isinstance(env, dict), "env: must be a mapping")
    train_d = dict(raw.get("train", {}) or {})
    unknown = set(train_d) - TRAIN_FIELDS
    _require(not unknown, f"train: unknown fields {sorted(unknown)}")
    mo = dict(raw.get("multiobj", {}) or {})
    unknown = set(mo) - MULTIOBJ_FIELDS
    _require(not unknown, f"multiobj: unknown fields {sorted(unknown)}")

    variants = []
    _require(isinstance(raw["variants"], list) and raw["variants"],
             "variants: must be a nonempty list")
    for i, v in enumerate(raw["variants"]):
        _require(isinstance(v, dict), f"variants[{i}]: must be a mapping")
        _require("name" in v and "arch" in v, f"variants[{i}]: needs name and arch")
        extra = set(v) - {"name", "arch", "mechanism", "arch_overrides"}
        _require(not extra, f"variants[{i}]: unknown fields {sorted(extra)}")
        arch_over = dict(v.get("arch_overrides", {}) or {})
        unknown = set(arch_over) - ARCH_FIELDS
        _require(not unknown, f"variants[{i}].arch_overrides: unknown fields {sorted(unknown)}")
        variants.append(VariantSpec(name=str(v["name"]), arch=str(v["arch"]),
                                    mechanism=dict(v.get("mechanism", {}) or {}),
                                    arch_overrides=arch_over))
    names = [v.name for v in variants]
    _require(len(names) == len(set(names)), "variants: names must be unique")

    sweep = dict(raw.get("sweep", {}) or {})
    for key, vals in sweep.items():
        _require(isinstance(vals, list) and vals, f"sweep.{key}: must be a nonempty list")

    exp = ExperimentConfig(
        name=str(raw["name"]),
        variants=variants,
        seeds=[int(s) for s in seeds],
        out_dir=str(raw["out_dir"]),
        env_mode=str(env.get("mode", "cp")),
        ncp_mode=str(env.get("ncp_mode", "eval_only")),
        ncp_ranges=dict(env.get("ncp_ranges", {}) or {}),
        train=train_d,
        multiobj=mo,
        sweep=sweep,
        similarity=dict(raw.get("similarity", {}) or {}),
    )
    # building the matrix validates every enum/range via the dataclasses
    expand_runs(exp)
    return exp


@dataclass
class RunSpec:
    run_id: str
    variant: str
    sweep: dict
    seed: int
    config: RunConfig


def _sanitize(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=+-]", "_", s)


def _apply_sweep(key: str, value, train_kw: dict, mech_kw: dict, arch_kw: dict):
    if key.startswith("mechanism."):
        mech_kw[key.split(".", 1)[1]] = value
    elif key.startswith("arch."):
        arch_kw[key.split(".", 1)[1]] = value
    elif key in TRAIN_FIELDS:
        train_kw[key] = value
    else:
        raise SchemaError(f"sweep: unknown axis {key!r}")


def expand_runs(exp: ExperimentConfig) -> list[RunSpec]:
    """Cartesian product of variants x sweep points x seeds, each one a
    fully validated RunConfig."""
    try:
        ncp_ranges = NcpRanges(**{k: tuple(v) for k, v in exp.ncp_ranges.items()})
    except TypeError as e:
        raise SchemaError(f"env.ncp_ranges: {e}") from None
    mo_kw = dict(exp.multiobj)
    mo_mode = mo_kw.pop("mode", "none")
    if "z" in mo_kw:
        mo_kw["z_score"] = mo_kw.pop("z")

    sweep_keys = sorted(exp.sweep)
    sweep_points = list(itertools.product(*(exp.sweep[k] for k in sweep_keys))) or [()]

    specs = []
    for variant in exp.variants:
        for point in sweep_points:
            assignment = dict(zip(sweep_keys, point))
            train_kw = dict(exp.train)
            mech_kw = dict(variant.mechanism)
            arch_kw = dict(variant.arch_overrides)
            for k, v in assignment.items():
                _apply_sweep(k, v, train_kw, mech_kw, arch_kw)
            try:
                mechanism = MechanismConfig(**mech_kw) if mech_kw else None
                arch = ArchitectureConfig(arch=variant.arch, mechanism=mechanism, **arch_kw)
            except (TypeError, ValueError) as e:
                raise SchemaError(f"variant {variant.name!r}: {e}") from None
            for seed in exp.seeds:
                try:
                    cfg = RunConfig(arch=arch, env_mode=exp.env_mode, ncp_mode=exp.ncp_mode,
                                    ncp_ranges=ncp_ranges, multiobj_mode=mo_mode,
                                    **mo_kw, **train_kw)
                except (TypeError, ValueError) as e:
                    raise SchemaError(f"variant {variant.name!r}: {e}") from None
                tag = "".join(f"__{k}={v}" for k, v in assignment.items())
                run_id = _sanitize(f"{variant.name}{tag}__s{seed}")
                specs.append(RunSpec(run_id=run_id, variant=variant.name,
                                     sweep=assignment, seed=seed, config=cfg))
    return specs


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _sweep_tag(sweep: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in sorted(sweep.items()))


def episode_rows(spec: RunSpec, stats: TrainingStats) -> list[list[str]]:
    rows = []
    for row in stats.rows:
        comp = row.components
        rows.append([
            _cell(row.episode), _cell(spec.seed), spec.variant, _sweep_tag(spec.sweep),
            _cell(row.train_return), _cell(row.steps), _cell(row.epsilon),
            _cell(row.eval_return), _cell(row.solved),
            _cell(comp.get("j_pi")), _cell(comp.get("j_v")), _cell(comp.get("entropy")),
            _cell(comp.get("alpha_s")), _cell(comp.get("alpha_d")),
            _cell(comp.get("penalty_mix")), _cell(comp.get("penalty_mask")),
            _cell(comp.get("contrastive_mix")), _cell(comp.get("contrastive_mask")),
        ])
    return rows


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CSV_VERSION}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise SchemaError(f"{path}: missing version header")
        reader = csv.reader(fh)
        columns = next(reader)
        rows = [dict(zip(columns, r)) for r in reader]
    return columns, rows


def run_row(spec: RunSpec, stats: TrainingStats) -> list[str]:
    return [spec.run_id, spec.variant, _sweep_tag(spec.sweep), _cell(spec.seed),
            _cell(stats.episodes_run), _cell(stats.solved), _cell(stats.final_eval),
            stats.config_hash, stats.aborted or ""]


# ---------------------------------------------------------------------------
# plotting from summaries
# ---------------------------------------------------------------------------

def _variant_key(row: dict) -> str:
    return row["variant"] + (f" [{row['sweep']}]" if row["sweep"] else "")


def plot_curves(summary_rows: list[dict], out_path, title: str) -> None:
    """Evaluation return vs episode: mean with a min/max band across seeds.

    Early-stopped (solved) runs hold their last evaluation value through
    the remaining episodes so seed aggregation stays aligned.
    """
    needed = {"variant", "sweep", "seed", "episode", "eval_return"}
    if summary_rows and not needed <= set(summary_rows[0]):
        raise SchemaError(f"summary is missing columns {sorted(needed - set(summary_rows[0]))}")
    by_variant: dict[str, dict[int, dict[int, float]]] = {}
    for row in summary_rows:
        if row["eval_return"] == "":
            continue
        v = _variant_key(row)
        by_variant.setdefault(v, {}).setdefault(int(row["seed"]), {})[int(row["episode"])] = \
            float(row["eval_return"])
    series = []
    for v in sorted(by_variant):
        seeds = by_variant[v]
        all_eps = sorted({e for per_seed in seeds.values() for e in per_seed})
        if not all_eps:
            continue
        mat = []
        for per_seed in seeds.values():
            filled, last = [], None
            for e in all_eps:
                last = per_seed.get(e, last)
                filled.append(last)
            mat.append(filled)
        arr = np.array([[np.nan if x is None else x for x in row] for row in mat])
        mean = np.nanmean(arr, axis=0)
        lo = np.nanmin(arr, axis=0)
        hi = np.nanmax(arr, axis=0)
        keep = ~np.isnan(mean)
        xs = [float(e) for e, k in zip(all_eps, keep) if k]
        series.append(Series(label=v, xs=xs, ys=mean[keep].tolist(),
                             band_lo=lo[keep].tolist() if len(seeds) > 1 else None,
                             band_hi=hi[keep].tolist() if len(seeds) > 1 else None))
    write_line_plot(out_path, series, title, "training episode", "evaluation return")


def plot_sweep(run_rows: list[dict], out_path, title: str) -> None:
    """Median final evaluation return against the swept axis, per variant."""
    needed = {"variant", "sweep", "final_eval"}
    if run_rows and not needed <= set(run_rows[0]):
        raise SchemaError(f"runs table is missing columns {sorted(needed - set(run_rows[0]))}")
    by_variant: dict[str, dict[float, list[float]]] = {}
    for row in run_rows:
        if not row["sweep"] or row["final_eval"] == "":
            continue
        x = float(row["sweep"].split("=", 1)[1].split(";")[0])
        by_variant.setdefault(row["variant"], {}).setdefault(x, []).append(
            float(row["final_eval"]))
    series = []
    for v in sorted(by_variant):
        pts = sorted(by_variant[v].items())
        xs = [p[0] for p in pts]
        ys = [float(np.median(p[1])) for p in pts]
        lo = [float(np.min(p[1])) for p in pts]
        hi = [float(np.max(p[1])) for p in pts]
        series.append(Series(label=v, xs=xs, ys=ys, band_lo=lo, band_hi=hi))
    write_line_plot(out_path, series, title, "swept value", "final evaluation return")


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def _resolve_out_dir(out_dir: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    path = Path(out_dir)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _execute(spec: RunSpec) -> tuple[str, TrainingStats]:
    return spec.run_id, train(spec.config, spec.seed)


def cmd_run(config_path, workers: int = 1, require_sweep: bool = False) -> int:
    exp = load_experiment(config_path)
    if require_sweep and not exp.sweep:
        raise SchemaError("sweep: this command needs a sweep section with at least one axis")
    specs = expand_runs(exp)
    out = _resolve_out_dir(exp.out_dir)
    if workers > 1:
        with Pool(workers) as pool:
            results = pool.map(_execute, specs)
    else:
        results = [_execute(s) for s in specs]
    stats_by_id = dict(results)

    summary_rows, run_rows, aborted = [], [], []
    for spec in specs:
        stats = stats_by_id[spec.run_id]
        rows = episode_rows(spec, stats)
        write_csv(out / f"{spec.run_id}.csv", EPISODE_COLUMNS, rows)
        if stats.aborted:
            (out / f"{spec.run_id}.ABORTED").write_text(stats.aborted + "\n")
            aborted.append(spec.run_id)
        summary_rows.extend(rows)
        run_rows.append(run_row(spec, stats))
    write_csv(out / "summary.csv", EPISODE_COLUMNS, summary_rows)
    write_csv(out / "runs.csv", RUN_COLUMNS, run_rows)
    _, srows = read_csv(out / "summary.csv")
    plot_curves(srows, out / "curves.svg", exp.name)
    if exp.sweep:
        _, rrows = read_csv(out / "runs.csv")
        plot_sweep(rrows, out / "sweep.svg", exp.name)
    print(f"{exp.name}: {len(specs)} runs -> {out}")
    if aborted:
        print(f"aborted runs: {', '.join(aborted)}", file=sys.stderr)
        return 1
    return 0


def cmd_plot(summary_path, figure: str, out_path=None) -> int:
    _, rows = read_csv(summary_path)
    out_path = out_path or str(Path(summary_path).with_suffix("")) + f".{figure}.svg"
    if figure == "curves":
        plot_curves(rows, out_path, Path(summary_path).stem)
    elif figure == "sweep":
        plot_sweep(rows, out_path, Path(summary_path).stem)
    else:
        raise SchemaError(f"unknown figure kind: {figure!r}")
    print(out_path)
    return 0


def cmd_similarity(config_path) -> int:
    exp = load_experiment(config_path)
    n_models = int(exp.similarity.get("n_models", 20))
    n_rollouts = int(exp.similarity.get("n_rollouts", 20))
    sim_seed = int(exp.similarity.get("seed", 0))
    out = _resolve_out_dir(exp.out_dir)
    specs = expand_runs(exp)
    rc = 0
    for variant in exp.variants:
        spec = next(s for s in specs if s.variant == variant.name)
        res = similarity_delta_experiment(spec.config, n_models, n_rollouts, seed=sim_seed)
        cols = ["layer", "mean_delta"] + [f"model_{i:02d}" for i in range(n_models)]
        rows = [[name, _cell(res.mean_deltas[j])] + [_cell(x) for x in res.per_model[:, j]]
                for j, name in enumerate(res.layer_names)]
        write_csv(out / f"similarity_{_sanitize(variant.name)}.csv", cols, rows)
        xs = list(range(1, len(res.layer_names) + 1))
        series = [Series(label=variant.name, xs=[float(x) for x in xs],
                         ys=res.mean_deltas.tolist())]
        write_line_plot(out / f"similarity_{_sanitize(variant.name)}.svg", series,
                        f"similarity delta: {variant.name}", "layer", "E[S(trained) - S(untrained)]")
        print(f"{variant.name}: per-layer deltas "
              + ", ".join(f"{n}={d:+.4f}" for n, d in zip(res.layer_names, res.mean_deltas)))
    return rc


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mixmask",
                                     description="actor-critic mix/mask experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--workers", type=int, default=1)
    p_plot = sub.add_parser("plot", help="render a figure from a summary CSV")
    p_plot.add_argument("summary")
    p_plot.add_argument("--figure", default="curves", choices=["curves", "sweep"])
    p_plot.add_argument("--out", default=None)
    p_sim = sub.add_parser("similarity", help="run the layer-similarity-delta measurement")
    p_sim.add_argument("config")
    p_sweep = sub.add_parser("sweep", help="execute a config whose sweep section is required")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--workers", type=int, default=1)
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.workers)
        if args.command == "plot":
            return cmd_plot(args.summary, args.figure, args.out)
        if args.command == "similarity":
            return cmd_similarity(args.config)
        if args.command == "sweep":
            return cmd_run(args.config, args.workers, require_sweep=True)
    except SchemaError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
