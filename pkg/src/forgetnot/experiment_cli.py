"""Experiment runner: config files, sweeps, persistence, reports, plots.

Configs are YAML with a fixed schema (stream / train / vit / ddpm /
diagnostics / sweeps / seeds / output_dir). Every run resolves to a
plain dict; its sha256 together with the package version is the run id,
so re-running an existing id is a no-op unless --force is given.

Layout under <output_dir>:
    runs/<run-id>/record.json       deterministic result payload
    runs/<run-id>/timings.json      wall-clock sidecar
    runs/<run-id>/accuracy.csv      the A[j,t] matrix
    runs/<run-id>/bound_terms.csv   per-task divergence/drift/forgetting
    runs/<run-id>/buffer.bin        final replay buffer
    runs/<run-id>/config.json       resolved config snapshot
    plots/                          emitted by `plot`
"""

import argparse
import copy
import csv
import hashlib
import itertools
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bound_diagnostics import BoundTerms, bound_surface, fit_regression
from .continual_trainer import (DdpmOptions, DiagnosticsConfig, OptimizerConfig,
                                TrainConfig, run_sequence)
from .errors import ConfigError, ForgetnotError, GroupingError
from .task_stream import (StreamConfig, load_medmnist_file, make_synthetic_stream,
                          split_class_incremental)
from .vit_classifier import ViTConfig

ENV_OUTPUT_DIR = "FORGETNOT_RESULTS"

DEFAULT_CONFIG = {
    "stream": {},
    "train": {},
    "vit": {"preset": "desk"},
    "ddpm": {},
    "diagnostics": {},
    "sweeps": {},
    "seeds": [0],
    "output_dir": "results",
}

SWEEP_TARGETS = {
    "lambda": ("train", "lambda"),
    "budget_mb": ("train", "replay_budget_mb"),
    "timesteps": ("ddpm", "timesteps"),
    "schedule": ("ddpm", "schedule"),
    "order": ("stream", "order"),
    "low_shot": ("stream", "low_shot_fraction"),
    "method": ("train", "method"),
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def canonical_json(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def load_config(path):
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in raw.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def apply_override(cfg, dotted, value):
    """Apply --set a.b.c=value; the value is parsed as YAML."""
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config path {dotted!r} (at {key!r})")
        node = node[key]
    if not isinstance(node, dict):
        raise ConfigError(f"config path {dotted!r} does not address a mapping")
    node[keys[-1]] = yaml.safe_load(value)
    return cfg


def _parse_ratio(value):
    if isinstance(value, str):
        parts = value.split(":")
        if len(parts) != 2:
            raise ConfigError(f"replay_ratio {value!r} must look like '1:1'")
        return (int(parts[0]), int(parts[1]))
    return tuple(value)


def build_run_objects(resolved):
    """Dataclass instances for one resolved run config."""
    stream_kwargs = dict(resolved.get("stream", {}))
    stream_cfg = StreamConfig(**stream_kwargs)

    train_kwargs = dict(resolved.get("train", {}))
    if "lambda" in train_kwargs:
        train_kwargs["lam"] = train_kwargs.pop("lambda")
    if "replay_ratio" in train_kwargs:
        train_kwargs["replay_ratio"] = _parse_ratio(train_kwargs["replay_ratio"])
    if "optimizer" in train_kwargs and isinstance(train_kwargs["optimizer"], dict):
        train_kwargs["optimizer"] = OptimizerConfig(**train_kwargs["optimizer"])
    ddpm_kwargs = dict(resolved.get("ddpm", {}))
    if "epochs" in ddpm_kwargs:
        train_kwargs["epochs_ddpm"] = ddpm_kwargs.pop("epochs")
    train_cfg = TrainConfig(**train_kwargs)

    vit_kwargs = dict(resolved.get("vit", {}))
    preset = vit_kwargs.pop("preset", None)
    if preset:
        vit_cfg = ViTConfig.preset(preset, **vit_kwargs)
    else:
        vit_cfg = ViTConfig(**vit_kwargs)

    ddpm_opts = DdpmOptions(**ddpm_kwargs)
    diag = DiagnosticsConfig(**resolved.get("diagnostics", {}))
    return stream_cfg, train_cfg, vit_cfg, ddpm_opts, diag


def build_stream(stream_cfg):
    if stream_cfg.dataset_name == "synthetic":
        return make_synthetic_stream(stream_cfg)
    path = Path(stream_cfg.dataset_name)
    if not path.exists():
        raise ConfigError(f"dataset {stream_cfg.dataset_name!r} is neither "
                          "'synthetic' nor an existing archive path")
    triple = load_medmnist_file(path)
    return split_class_incremental(triple, stream_cfg)


def expand_runs(cfg):
    """Resolved per-run configs: Cartesian product of sweeps x seeds."""
    sweeps = cfg.get("sweeps") or {}
    axes = []
    for name, values in sweeps.items():
        if name not in SWEEP_TARGETS:
            raise ConfigError(f"unknown sweep axis {name!r}; have {sorted(SWEEP_TARGETS)}")
        if not values:
            raise ConfigError(f"sweep axis {name!r} is empty")
        axes.append([(name, v) for v in values])
    seeds = cfg.get("seeds") or [0]
    runs = []
    for point in itertools.product(*axes) if axes else [()]:
        for seed in seeds:
            resolved = copy.deepcopy(cfg)
            resolved.pop("sweeps", None)
            resolved.pop("seeds", None)
            resolved.pop("output_dir", None)
            for name, value in point:
                section, key = SWEEP_TARGETS[name]
                resolved[section][key] = value
            resolved["train"]["seed"] = seed
            runs.append((resolved, seed, dict(point)))
    return runs


def run_id_for(resolved):
    blob = canonical_json({"config": resolved, "version": __version__})
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ResultsStore:
    def __init__(self, root):
        self.root = Path(root)

    def run_dir(self, run_id):
        return self.root / "runs" / run_id

    def exists(self, run_id):
        return (self.run_dir(run_id) / "record.json").exists()

    def save_run(self, run_id, result, resolved):
        rdir = self.run_dir(run_id)
        rdir.mkdir(parents=True, exist_ok=True)
        record = result.record
        (rdir / "record.json").write_text(canonical_json(record.to_json_dict()))
        (rdir / "timings.json").write_text(json.dumps(_jsonable(record.timings), sort_keys=True))
        (rdir / "config.json").write_text(canonical_json(resolved))
        with open(rdir / "accuracy.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task_j"] + [f"after_t{t}" for t in range(1, record.accuracy_matrix.K + 1)])
            for j, row in enumerate(record.accuracy_matrix.to_lists(), start=1):
                writer.writerow([j] + ["" if v is None else f"{v:.6f}" for v in row])
        with open(rdir / "bound_terms.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task_id", "kl_estimate", "drift", "observed_forgetting",
                             "replay_weight"])
            for term in record.bound_terms:
                writer.writerow(["" if v is None else v for v in term.row()])
        result.buffer.serialize(rdir / "buffer.bin")
        (rdir / "status.json").write_text(json.dumps({"status": "ok"}))

    def mark_failed(self, run_id, resolved, message):
        rdir = self.run_dir(run_id)
        rdir.mkdir(parents=True, exist_ok=True)
        (rdir / "config.json").write_text(canonical_json(resolved))
        (rdir / "status.json").write_text(json.dumps({"status": "error", "error": message}))

    def iter_records(self):
        runs_dir = self.root / "runs"
        if not runs_dir.exists():
            return
        for rdir in sorted(runs_dir.iterdir()):
            record_path = rdir / "record.json"
            if record_path.exists():
                yield rdir.name, json.loads(record_path.read_text())


def execute_run(resolved):
    stream_cfg, train_cfg, vit_cfg, ddpm_opts, diag = build_run_objects(resolved)
    stream = build_stream(stream_cfg)
    return run_sequence(stream, train_cfg, vit_config=vit_cfg, ddpm_opts=ddpm_opts,
                        diag=diag, stream_config=stream_cfg)


def _run_one(args):
    resolved, run_id, out_dir = args
    store = ResultsStore(out_dir)
    try:
        result = execute_run(resolved)
        store.save_run(run_id, result, resolved)
        return run_id, "ok", ""
    except Exception as exc:  # noqa: BLE001 - per-run isolation is the point
        store.mark_failed(run_id, resolved, repr(exc))
        return run_id, "error", repr(exc)


def cmd_run(args):
    cfg = load_config(args.config)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        apply_override(cfg, dotted, value)
    if args.seeds:
        cfg["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.replay_budget_mb is not None:
        cfg["train"]["replay_budget_mb"] = args.replay_budget_mb
    if args.measure_fwt:
        cfg["train"]["measure_fwt"] = True
    out_dir = args.output_dir or cfg.get("output_dir") \
        or os.environ.get(ENV_OUTPUT_DIR, "results")
    store = ResultsStore(out_dir)

    planned = []
    statuses = []
    for resolved, seed, point in expand_runs(cfg):
        build_run_objects(resolved)   # fail fast on schema errors, with key names
        rid = run_id_for(resolved)
        label = ",".join(f"{k}={v}" for k, v in point.items()) or "base"
        if store.exists(rid) and not args.force:
            print(f"{rid}  seed={seed}  {label}: skipped (exists)")
            statuses.append((rid, "skipped", ""))
            continue
        planned.append((resolved, rid, out_dir, seed, label))

    jobs = max(1, args.jobs)
    if jobs == 1 or len(planned) <= 1:
        results = [_run_one((r, rid, out)) for r, rid, out, _, _ in planned]
    else:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, [(r, rid, out) for r, rid, out, _, _ in planned]))

    for (resolved, rid, _, seed, label), (rid2, status, msg) in zip(planned, results):
        line = f"{rid}  seed={seed}  {label}: {status}"
        if msg:
            line += f"  {msg}"
        print(line)
        statuses.append((rid, status, msg))
    failures = [s for s in statuses if s[1] == "error"]
    print(f"done: {len(statuses)} runs, {len(failures)} failed")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# reporting

def _group_key(record):
    cfg = copy.deepcopy(record["config"])
    cfg.get("train", {}).pop("seed", None)
    return canonical_json(cfg)


def _group_label(record, varied):
    cfg = record["config"]
    label = cfg["train"]["method"]
    extras = []
    for axis in sorted(varied):
        section, key = SWEEP_TARGETS[axis]
        if axis == "method":
            continue
        extras.append(f"{axis}={cfg[section][key]}")
    return label + (" [" + ", ".join(extras) + "]" if extras else "")


def _varied_axes(records):
    varied = set()
    for axis, (section, key) in SWEEP_TARGETS.items():
        values = {canonical_json(r["config"].get(section, {}).get(key)) for _, r in records}
        if len(values) > 1:
            varied.add(axis)
    return varied


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def _fmt(mean, std, pct=False):
    if pct:
        return f"{100 * mean:.1f} ± {100 * std:.1f}"
    return f"{mean:.3f} ± {std:.3f}"


def aggregate_records(records):
    """Group records by config-minus-seed; labels must stay unambiguous."""
    varied = _varied_axes(records)
    groups = {}
    for rid, record in records:
        groups.setdefault(_group_key(record), []).append(record)
    rows = []
    seen_labels = {}
    for key, group in groups.items():
        label = _group_label(group[0], varied)
        if label in seen_labels and seen_labels[label] != key:
            raise GroupingError(
                f"aggregate label {label!r} maps to incompatible configs; "
                "runs in one results dir must differ only along sweep axes or the seed")
        seen_labels[label] = key
        rows.append((label, group))
    rows.sort(key=lambda r: r[0])
    return rows, varied


def build_report_tables(records):
    rows, varied = aggregate_records(records)
    main = ["| Method | Acc ↑ | F ↓ | AUC ↑ | seeds |",
            "|---|---|---|---|---|"]
    taskwise = ["| Method | T1 | Tmid | Tn |", "|---|---|---|---|"]
    transfer = ["| Method | FWT | BWT |", "|---|---|---|"]
    have_transfer = False
    summary = {}
    for label, group in rows:
        acc = _mean_std([g["metrics"]["average_accuracy"] for g in group])
        fgt = _mean_std([g["metrics"]["forgetting"] for g in group])
        auc = _mean_std([g["metrics"]["macro_auc"] for g in group])
        main.append(f"| {label} | {_fmt(*acc, pct=True)} | {_fmt(*fgt, pct=True)} "
                    f"| {_fmt(*auc)} | {len(group)} |")
        t1 = _mean_std([g["metrics"]["taskwise"]["T1"] for g in group])
        tm = _mean_std([g["metrics"]["taskwise"]["Tmid"] for g in group])
        tn = _mean_std([g["metrics"]["taskwise"]["Tn"] for g in group])
        taskwise.append(f"| {label} | {_fmt(*t1, pct=True)} | {_fmt(*tm, pct=True)} "
                        f"| {_fmt(*tn, pct=True)} |")
        if group[0]["metrics"].get("fwt") is not None:
            have_transfer = True
            fwt = _mean_std([g["metrics"]["fwt"] for g in group])
            bwt = _mean_std([g["metrics"]["bwt"] for g in group])
            transfer.append(f"| {label} | {_fmt(*fwt)} | {_fmt(*bwt)} |")
        summary[label] = {
            "n": len(group),
            "average_accuracy": acc,
            "forgetting": fgt,
            "macro_auc": auc,
        }
    sections = ["## Continual adaptation results", *main, "",
                "## Task-wise accuracy after the final task", *taskwise]
    if have_transfer:
        sections += ["", "## Knowledge transfer", *transfer]

    terms = collect_bound_terms(records)
    fit = None
    if len([t for t in terms if t.drift is not None]) >= 3:
        fit = fit_regression(terms)
        sections += ["", "## Forgetting-bound regression",
                     f"- n = {fit.n} task observations",
                     f"- F_j = {fit.a:.4f} * KL + {fit.b:.6f} * drift + {fit.intercept:.4f}",
                     f"- R²: joint {fit.r2_joint:.3f}, KL-only {fit.r2_kl_only:.3f}, "
                     f"drift-only {fit.r2_drift_only:.3f}"]
        summary["bound_fit"] = fit.to_dict()
    return "\n".join(sections) + "\n", summary


def collect_bound_terms(records):
    terms = []
    for _, record in records:
        for row in record.get("bound_terms", []):
            terms.append(BoundTerms(task_id=row[0], kl_estimate=row[1], drift=row[2],
                                    observed_forgetting=row[3], replay_weight=row[4]))
    return terms


def cmd_report(args):
    store = ResultsStore(args.results_dir)
    records = list(store.iter_records())
    if not records:
        raise ForgetnotError(f"no completed runs under {args.results_dir!r}")
    text, summary = build_report_tables(records)
    print(text)
    out_md = Path(args.results_dir) / "report.md"
    out_md.write_text(text)
    (Path(args.results_dir) / "summary.json").write_text(canonical_json(summary))
    return 0


# ---------------------------------------------------------------------------
# plotting

def _plot_dir(results_dir):
    pdir = Path(results_dir) / "plots"
    pdir.mkdir(parents=True, exist_ok=True)
    return pdir


def _axis_values(records, section, key):
    return sorted({r["config"][section][key] for _, r in records})


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    store = ResultsStore(args.results_dir)
    records = list(store.iter_records())
    pdir = _plot_dir(args.results_dir)

    if args.kind == "surface":
        deltas = np.linspace(0.0, args.delta_max, 50)
        lams = np.linspace(1.0, args.lambda_max, 50)
        surf = bound_surface(args.alpha, args.beta, deltas, lams)
        if not (np.diff(surf.values, axis=1) <= 1e-15).all():
            raise ForgetnotError("rendered surface is not monotone in lambda")
        fig, ax = plt.subplots(figsize=(6, 4.5))
        im = ax.pcolormesh(surf.lam, surf.delta, surf.values, shading="auto")
        fig.colorbar(im, ax=ax, label="bound value")
        ax.set_xlabel("consolidation strength λ")
        ax.set_ylabel("replay divergence δ")
        ax.set_title(f"forgetting bound {args.alpha:g}·δ + {args.beta:g}/λ")
        out = pdir / "bound_surface.png"
        fig.savefig(out, dpi=120, bbox_inches="tight")
        print(out)
        return 0

    if not records:
        raise ForgetnotError(f"no completed runs under {args.results_dir!r}")

    if args.kind == "budget":
        budgets = _axis_values(records, "train", "replay_budget_mb")
        if len(budgets) < 2:
            raise ForgetnotError("budget plot needs runs sweeping budget_mb")
        fig, ax = plt.subplots(figsize=(6, 4))
        methods = sorted({r["config"]["train"]["method"] for _, r in records})
        for method in methods:
            ys = []
            for b in budgets:
                vals = [r["metrics"]["average_accuracy"] for _, r in records
                        if r["config"]["train"]["method"] == method
                        and r["config"]["train"]["replay_budget_mb"] == b]
                ys.append(np.mean(vals) if vals else np.nan)
            ax.plot(budgets, ys, marker="o", label=method)
        ax.set_xlabel("replay budget (MB)")
        ax.set_ylabel("final average accuracy")
        ax.legend()
        out = pdir / "budget_curve.png"
        fig.savefig(out, dpi=120, bbox_inches="tight")
        print(out)
        return 0

    if args.kind == "timesteps":
        steps = _axis_values(records, "ddpm", "timesteps")
        if len(steps) < 2:
            raise ForgetnotError("timesteps plot needs runs sweeping timesteps")
        fig, ax = plt.subplots(figsize=(6, 4))
        kinds = sorted({r["config"]["ddpm"]["schedule"] for _, r in records})
        for kind in kinds:
            ys = []
            for t in steps:
                vals = [r["metrics"]["average_accuracy"] for _, r in records
                        if r["config"]["ddpm"]["schedule"] == kind
                        and r["config"]["ddpm"]["timesteps"] == t]
                ys.append(np.mean(vals) if vals else np.nan)
            ax.plot(steps, ys, marker="o", label=kind)
        ax.set_xlabel("diffusion timesteps T")
        ax.set_ylabel("final average accuracy")
        ax.legend()
        out = pdir / "timesteps_curve.png"
        fig.savefig(out, dpi=120, bbox_inches="tight")
        print(out)
        return 0

    if args.kind == "bound-scatter":
        terms = [t for t in collect_bound_terms(records) if t.drift is not None]
        if len(terms) < 3:
            raise ForgetnotError("bound-scatter needs >= 3 replay runs with anchors")
        fit = fit_regression(terms)
        kl = np.array([t.kl_estimate for t in terms])
        drift = np.array([t.drift for t in terms])
        y = np.array([t.observed_forgetting for t in terms])
        fig = plt.figure(figsize=(6.5, 5))
        ax = fig.add_subplot(111, projection="3d")
        ax.scatter(kl, drift, y, c=y, cmap="viridis")
        gk, gd = np.meshgrid(np.linspace(kl.min(), kl.max(), 12),
                             np.linspace(drift.min(), drift.max(), 12))
        ax.plot_surface(gk, gd, fit.intercept + fit.a * gk + fit.b * gd,
                        alpha=0.25, color="gray")
        ax.set_xlabel("replay KL")
        ax.set_ylabel("fisher drift")
        ax.set_zlabel("forgetting")
        ax.set_title(f"R² joint={fit.r2_joint:.2f} "
                     f"(KL {fit.r2_kl_only:.2f} / drift {fit.r2_drift_only:.2f})")
        out = pdir / "bound_scatter.png"
        fig.savefig(out, dpi=120, bbox_inches="tight")
        print(out)
        return 0

    raise ConfigError(f"unknown plot kind {args.kind!r}")


def cmd_inspect_buffer(args):
    from .replay_buffer import ReplayBuffer
    buf = ReplayBuffer.deserialize(args.path)
    print(json.dumps(buf.summary(), indent=2, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="forgetnot",
                                     description="continual-learning experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the configured experiment grid")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override (repeatable)")
    p_run.add_argument("--seeds", help="comma-separated seed list override")
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--output-dir")
    p_run.add_argument("--replay-budget-mb", type=float, default=None)
    p_run.add_argument("--measure-fwt", action="store_true")
    p_run.add_argument("--force", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="aggregate runs into tables")
    p_rep.add_argument("results_dir")
    p_rep.set_defaults(func=cmd_report)

    p_plot = sub.add_parser("plot", help="emit figures from stored runs")
    p_plot.add_argument("results_dir")
    p_plot.add_argument("--kind", required=True,
                        choices=["budget", "timesteps", "surface", "bound-scatter"])
    p_plot.add_argument("--alpha", type=float, default=1.0)
    p_plot.add_argument("--beta", type=float, default=1.0)
    p_plot.add_argument("--delta-max", type=float, default=1.0)
    p_plot.add_argument("--lambda-max", type=float, default=200.0)
    p_plot.set_defaults(func=cmd_plot)

    p_buf = sub.add_parser("inspect-buffer", help="summarize a buffer.bin file")
    p_buf.add_argument("path")
    p_buf.set_defaults(func=cmd_inspect_buffer)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ForgetnotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
