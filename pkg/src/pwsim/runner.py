"""Experiment configuration and single-run orchestration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import algos, metrics
from .layouts import is_pow2
from .memsim import ConfigurationError, CostModel, Machine
from .sched import Engine, SeqDriver

SCHEDULERS = ("pws", "rws", "seq")

# frozen regression constants for the asymptotic bound checks
CMAX = {
    "cache_excess_bp": 8.0,
    "block_excess_bp": 6.0,
    "uppass_idle": 12.0,
}


@dataclass
class ExperimentConfig:
    algorithm: str = "msum"
    scheduler: str = "pws"
    n: int = 1 << 12
    p: int = 1
    M: int = 1 << 12
    B: int = 32
    hit_cost: int = 1
    miss_cost: int = 4
    steal_cost: int = 8
    sched_interval: int = 1
    padded: bool = False
    gapped: bool = False
    seed: int = None
    stack_words: int = 0        # 0 means sized automatically
    measure: bool = False
    trace: bool = False
    stress: bool = False

    def validate(self):
        if self.seed is None:
            raise ConfigurationError("seed is mandatory")
        if self.scheduler not in SCHEDULERS:
            raise ConfigurationError(f"unknown scheduler {self.scheduler!r}")
        if self.p < 1:
            raise ConfigurationError("p must be >= 1")
        if self.scheduler == "seq" and self.p != 1:
            raise ConfigurationError("the sequential executor uses p=1")
        if self.M < self.B:
            raise ConfigurationError("need M >= B")
        for name in ("n", "p", "M", "B"):
            v = getattr(self, name)
            if not is_pow2(v):
                raise ConfigurationError(f"{name}={v} must be a power of two")
        if self.effective_algorithm() not in algos.SPECS:
            raise ConfigurationError(
                f"unknown algorithm {self.algorithm!r}; choose from "
                f"{sorted(algos.SPECS)}")

    def effective_algorithm(self):
        if self.gapped and self.algorithm in ("bi_to_rm_direct", "bi_to_rm"):
            return "bi_to_rm_gapped"
        if self.algorithm == "bi_to_rm":
            return "bi_to_rm_direct"
        return self.algorithm

    def cost_model(self):
        return CostModel(self.hit_cost, self.miss_cost,
                         self.steal_cost, self.sched_interval)

    def key(self):
        return tuple(getattr(self, f.name) for f in fields(self)
                     if f.name not in ("measure", "trace"))

    def as_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["algorithm"] = self.effective_algorithm()
        return d

    def replace(self, **kw):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return ExperimentConfig(**d)


def build_machine(cfg: ExperimentConfig, prep_template=None):
    name = cfg.effective_algorithm()
    gwords = int(algos.global_words(name, cfg.n)) + 16 * cfg.B
    if cfg.stack_words:
        swords = cfg.stack_words
    else:
        template = prep_template
        if template is None:
            template = _template_for(cfg)
        swords = 8 * template.stack_need() + (1 << 15)
    return Machine(cfg.p, cfg.M, cfg.B, cfg.cost_model(),
                   global_words=gwords, stack_words=swords,
                   dtype=algos.machine_dtype(name),
                   log_events=cfg.trace)


def _template_for(cfg):
    name = cfg.effective_algorithm()
    builder = {
        "msum": algos.msum_template,
        "prefix_sums": algos.prefix_sums_template,
        "matrix_add": algos.matrix_add_template,
        "mt_bi": algos.mt_bi_template,
        "rm_to_bi": algos.rm_to_bi_template,
        "bi_to_rm_direct": algos.bi_to_rm_direct_template,
        "bi_to_rm_gapped": algos.bi_to_rm_gapped_template,
        "bi_to_rm_fft_variant": algos.bi_to_rm_fft_template,
        "strassen": algos.strassen_template,
        "depth_n_mm": algos.depth_n_mm_template,
        "fft": algos.fft_template,
    }[name]
    return builder(cfg.n, cfg.padded)


def run_single(cfg: ExperimentConfig):
    """One simulation; returns (RunResult, Prepared)."""
    cfg.validate()
    name = cfg.effective_algorithm()
    machine = build_machine(cfg)
    prep = algos.prepare(machine, name, cfg.n, cfg.seed, cfg.padded)
    if cfg.scheduler == "seq":
        res = SeqDriver(machine).run(prep.template, prep.args)
    else:
        eng = Engine(machine, cfg.scheduler, seed=cfg.seed,
                     measure=cfg.measure, trace=cfg.trace,
                     stress_phases=cfg.stress)
        res = eng.run(prep.template, prep.args)
    res.config = cfg
    return res, prep


def output_tolerance(name):
    return 1e-9 if name == "fft" else 0.0


def run_with_report(cfg: ExperimentConfig, with_baseline=True):
    """Run, oracle-check, baseline, excess, bounds, invariants."""
    res, prep = run_single(cfg)
    name = cfg.effective_algorithm()
    tol = output_tolerance(name)
    try:
        max_err = algos.check_output(prep, res.machine, tol)
        output_ok = True
    except AssertionError:
        max_err = float("nan")
        output_ok = False

    invariants = metrics.run_invariants(res, prep.spec.write_budget)
    invariants["output_matches_oracle"] = output_ok

    excess = None
    bounds = []
    if with_baseline and cfg.p > 1:
        base_cfg = cfg.replace(scheduler="seq", p=1, measure=False,
                               trace=False)
        base_res, _ = run_single(base_cfg)
        excess = metrics.compute_excess(res, base_res)
        prm = {
            "n": cfg.n if not prep.spec.input_is_matrix else cfg.n * cfg.n,
            "p": cfg.p, "M": cfg.M, "B": cfg.B, "b": cfg.miss_cost,
            "rounds": res.counters.rounds,
        }
        bounds.append(metrics.check_bound(
            metrics.obs3_max_per_priority(res),
            metrics.STANDARD_BOUNDS["obs3_per_priority"], 1.0, prm))
        if cfg.scheduler == "pws":
            bounds.append(metrics.check_bound(
                res.counters.total_attempts,
                metrics.STANDARD_BOUNDS["cor4_attempts"], 1.0, prm))
        bounds.append(metrics.check_bound(
            metrics.max_usurped_per_boundary(res),
            metrics.STANDARD_BOUNDS["usurpers_per_boundary"], 1.0, prm))
        if prep.spec.f_tag in ("const", "sqrt"):
            bounds.append(metrics.check_bound(
                excess.cache_excess,
                metrics.STANDARD_BOUNDS["cache_excess_bp"],
                CMAX["cache_excess_bp"], prm))
        if prep.spec.L_tag == "const":
            bounds.append(metrics.check_bound(
                excess.block_wait_total,
                metrics.STANDARD_BOUNDS["block_excess_bp"],
                CMAX["block_excess_bp"], prm))
        excess.bounds = bounds
        for b in bounds:
            invariants[f"bound_{b.name}"] = b.passed or b.skipped

    report = {
        "config": _jsonable(cfg.as_dict()),
        "counters": _jsonable(res.counters.as_flat_dict()),
        "per_core": {
            "cold_capacity": list(map(int, res.counters.cold_capacity_misses)),
            "invalidation": list(map(int, res.counters.invalidation_misses)),
            "idle": list(map(int, res.counters.idle_ticks)),
        },
        "ticks": int(res.ticks),
        "output_ok": output_ok,
        "output_max_err": None if math.isnan(max_err) else float(max_err),
        "invariants": {k: bool(v) for k, v in sorted(invariants.items())},
        "excess": _jsonable(excess.as_dict()) if excess else None,
        "phase_steps": res.phase_step_count,
    }
    ok = all(invariants.values())
    return res, prep, report, ok


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


CSV_CONFIG_COLS = ["algorithm", "scheduler", "n", "p", "M", "B", "hit_cost",
                   "miss_cost", "steal_cost", "sched_interval", "padded",
                   "gapped", "seed"]
CSV_COUNTER_COLS = ["misses_total", "cold_capacity_total", "invalidation_total",
                    "hits_total", "queue_delay_total", "idle_total",
                    "idle_phase_wait_total", "idle_uppass_wait_total",
                    "steals_total", "pseudo_steals_total", "attempts_total",
                    "usurpations_total", "max_usurped_per_boundary",
                    "sched_steps", "phases", "retry_phases", "rounds",
                    "max_writes_per_address"]
CSV_EXTRA_COLS = ["ticks", "output_ok", "q_seq", "cache_excess",
                  "block_wait_total"]
CSV_BOUND_COLS = ["bound_obs3_per_priority_ratio", "bound_cor4_attempts_ratio",
                  "bound_cache_excess_bp_ratio", "bound_block_excess_bp_ratio"]


def csv_row(report):
    row = {}
    for c in CSV_CONFIG_COLS:
        row[c] = report["config"].get(c)
    for c in CSV_COUNTER_COLS:
        row[c] = report["counters"].get(c)
    row["ticks"] = report["ticks"]
    row["output_ok"] = report["output_ok"]
    ex = report.get("excess") or {}
    row["q_seq"] = ex.get("q_seq")
    row["cache_excess"] = ex.get("cache_excess")
    row["block_wait_total"] = ex.get("block_wait_total")
    ratios = {("bound_" + b["name"] + "_ratio"): b["ratio"]
              for b in ex.get("bounds", [])}
    for c in CSV_BOUND_COLS:
        row[c] = ratios.get(c)
    return row


def csv_columns():
    return CSV_CONFIG_COLS + CSV_COUNTER_COLS + CSV_EXTRA_COLS + CSV_BOUND_COLS
