"""Experiment runner: single runs, parameter sweeps, CSV/JSON/SVG output.

Exit status: 0 on success, 2 on a usage or configuration error, 3 when any
run-time invariant check fails.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys

from . import runner
from .memsim import ConfigurationError, write_event_csv
from .sched import SchedulerError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVARIANT = 3

SWEEP_CAP = 512
PLOT_METRICS = ["misses_total", "invalidation_total", "steals_total",
                "idle_total"]

BOOL_KEYS = {"padded", "gapped", "stress", "measure", "trace"}
INT_KEYS = {"n", "p", "M", "B", "hit_cost", "miss_cost", "steal_cost",
            "sched_interval", "seed", "stack_words"}


def build_parser():
    ap = argparse.ArgumentParser(
        prog="pwsim",
        description="Simulate one fork-join algorithm on a p-core machine "
                    "with private caches and write-invalidate coherence.")
    ap.add_argument("--config", help="flat key=value file mirroring the flags")
    ap.add_argument("--alg", dest="algorithm", help="algorithm name")
    ap.add_argument("--sched", dest="scheduler",
                    choices=["pws", "rws", "seq"], help="scheduler")
    ap.add_argument("--n", type=int, help="input size (matrix side for "
                    "matrix algorithms); power of two")
    ap.add_argument("--p", type=int, help="number of cores")
    ap.add_argument("--M", type=int, help="private cache words per core")
    ap.add_argument("--B", type=int, help="block size in words")
    ap.add_argument("--hit-cost", type=int, dest="hit_cost")
    ap.add_argument("--miss-cost", type=int, dest="miss_cost")
    ap.add_argument("--steal-cost", type=int, dest="steal_cost")
    ap.add_argument("--sched-interval", type=int, dest="sched_interval")
    ap.add_argument("--padded", action="store_true", default=None,
                    help="pad execution-stack frames")
    ap.add_argument("--gapped", action="store_true", default=None,
                    help="use the gapped layout variant of bi_to_rm")
    ap.add_argument("--stress", action="store_true", default=None,
                    help="exercise pseudo-steals with stale phase snapshots")
    ap.add_argument("--seed", type=int, help="run seed (mandatory)")
    ap.add_argument("--sweep", action="append", default=[],
                    metavar="axis=v1,v2,...",
                    help="sweep an axis; repeatable for a cartesian product")
    ap.add_argument("--out-dir", default="out", help="output directory")
    ap.add_argument("--trace", action="store_true", default=None,
                    help="write events.csv, steals.csv, tasks.csv")
    ap.add_argument("--no-baseline", action="store_true",
                    help="skip the p=1 baseline and excess report")
    ap.add_argument("--plot-metrics", default=",".join(PLOT_METRICS),
                    help="comma-separated CSV columns to plot in sweeps")
    return ap


def load_config_file(path):
    out = {}
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"bad config line: {raw.rstrip()}")
            k, v = line.split("=", 1)
            k = k.strip().replace("-", "_")
            v = v.strip()
            if k == "alg":
                k = "algorithm"
            if k == "sched":
                k = "scheduler"
            if k == "sweep":
                out.setdefault("sweep", []).extend(
                    s for s in v.split(";") if s)
                continue
            if k in BOOL_KEYS:
                out[k] = v.lower() in ("1", "true", "yes", "on")
            elif k in INT_KEYS:
                out[k] = int(v)
            else:
                out[k] = v
    return out


def parse_sweeps(specs):
    axes = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigurationError(f"sweep needs axis=v1,v2,... got {spec!r}")
        k, vals = spec.split("=", 1)
        k = k.strip().replace("-", "_")
        if k == "alg":
            k = "algorithm"
        if k == "sched":
            k = "scheduler"
        items = [v.strip() for v in vals.split(",") if v.strip()]
        if not items:
            raise ConfigurationError(f"sweep axis {k} has no values")
        if k in INT_KEYS:
            axes[k] = [int(v) for v in items]
        elif k in BOOL_KEYS:
            axes[k] = [v.lower() in ("1", "true", "yes", "on") for v in items]
        else:
            axes[k] = items
    return axes


def make_config(ns, overrides=None):
    cfg_kw = {}
    if ns.config:
        cfg_kw.update(load_config_file(ns.config))
    for key in ("algorithm", "scheduler", "n", "p", "M", "B", "hit_cost",
                "miss_cost", "steal_cost", "sched_interval", "padded",
                "gapped", "stress", "seed", "trace"):
        v = getattr(ns, key, None)
        if v is not None:
            cfg_kw[key] = v
    cfg_kw.pop("sweep", None)
    if overrides:
        cfg_kw.update(overrides)
    return runner.ExperimentConfig(**cfg_kw)


def write_report(out_dir, report):
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_counters_csv(out_dir, rows, name="counters.csv"):
    path = os.path.join(out_dir, name)
    cols = runner.csv_columns()
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return path


def write_trace_files(out_dir, res):
    write_event_csv(res.machine, os.path.join(out_dir, "events.csv"))
    with open(os.path.join(out_dir, "steals.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "priority", "thief", "victim", "task_id", "kind"])
        for r in res.steal_log:
            w.writerow([r.round, r.priority, r.thief, r.victim,
                        r.task_uid, r.kind])
    with open(os.path.join(out_dir, "tasks.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tick", "core", "task_id", "event"])
        for e in res.task_events:
            w.writerow([e.tick, e.core, e.task_uid, e.event])


def plot_sweep(out_dir, rows, axis, metrics_list):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    group_keys = [c for c in runner.CSV_CONFIG_COLS if c != axis]
    for metric in metrics_list:
        fig, ax = plt.subplots(figsize=(6, 4))
        groups = {}
        for row in rows:
            if row.get(metric) is None:
                continue
            gk = tuple((k, row[k]) for k in group_keys
                       if len({r[k] for r in rows}) > 1)
            groups.setdefault(gk, []).append((row[axis], row[metric]))
        for gk, pts in sorted(groups.items()):
            pts.sort()
            label = ",".join(f"{k}={v}" for k, v in gk) or metric
            ax.plot([x for x, _ in pts], [y for _, y in pts],
                    marker="o", label=label)
        ax.set_xlabel(axis)
        ax.set_ylabel(metric)
        ax.set_xscale("log", base=2)
        if any(v > 0 for _, pts in groups.items() for _, v in pts):
            ax.set_yscale("symlog")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, f"plot_{metric}.svg"),
                    metadata={"Date": None})
        plt.close(fig)


def cmd_run(ns):
    cfg = make_config(ns)
    cfg.validate()
    os.makedirs(ns.out_dir, exist_ok=True)
    res, prep, report, ok = runner.run_with_report(
        cfg, with_baseline=not ns.no_baseline)
    write_report(ns.out_dir, report)
    write_counters_csv(ns.out_dir, [runner.csv_row(report)])
    if cfg.trace:
        write_trace_files(ns.out_dir, res)
    if not ok:
        bad = [k for k, v in report["invariants"].items() if not v]
        print(f"invariant checks failed: {', '.join(bad)}", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"ok: {cfg.effective_algorithm()} n={cfg.n} p={cfg.p} "
          f"misses={report['counters']['misses_total']} "
          f"ticks={report['ticks']}")
    return EXIT_OK


def cmd_sweep(ns, axes):
    os.makedirs(ns.out_dir, exist_ok=True)
    names = sorted(axes)
    combos = list(itertools.product(*(axes[k] for k in names)))
    if len(combos) > SWEEP_CAP:
        raise ConfigurationError(
            f"sweep of {len(combos)} runs exceeds the cap of {SWEEP_CAP}")
    rows = []
    all_ok = True
    for combo in combos:
        overrides = dict(zip(names, combo))
        cfg = make_config(ns, overrides)
        cfg.validate()
        res, prep, report, ok = runner.run_with_report(
            cfg, with_baseline=not ns.no_baseline)
        all_ok = all_ok and ok
        rows.append(runner.csv_row(report))
    rows.sort(key=lambda r: tuple(str(r[c]) for c in runner.CSV_CONFIG_COLS))
    write_counters_csv(ns.out_dir, rows)
    axis = names[0] if len(axes) == 1 else sorted(
        axes, key=lambda k: -len(axes[k]))[0]
    plot_sweep(ns.out_dir, rows, axis,
               [m.strip() for m in ns.plot_metrics.split(",") if m.strip()])
    print(f"sweep complete: {len(rows)} runs, results in {ns.out_dir}")
    return EXIT_OK if all_ok else EXIT_INVARIANT


def main(argv=None):
    ap = build_parser()
    ns = ap.parse_args(argv)
    try:
        sweep_specs = list(ns.sweep)
        if ns.config:
            file_kw = load_config_file(ns.config)
            sweep_specs.extend(file_kw.get("sweep", []))
        if sweep_specs:
            axes = parse_sweeps(sweep_specs)
            return cmd_sweep(ns, axes)
        return cmd_run(ns)
    except (ConfigurationError, SchedulerError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
