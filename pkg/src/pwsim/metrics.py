"""Derived quantities from run counters and their bound checks.

The quantities of interest compare a parallel run against the p=1 baseline
of the same configuration:

  cache excess      cold+capacity misses beyond the sequential count
  block wait        invalidation-miss count (each costs one miss latency)
  idle time         ticks a core spent neither computing nor paying for an
                    access or a steal it initiated

Bound formulas are plain callables over the run parameters; each check
reports the measured/formula ratio so fitted constants can be frozen and
tracked as regression thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .memsim import EV_INVALIDATION, ConfigurationError


@dataclass
class BoundResult:
    name: str
    formula_value: float
    measured: float
    ratio: float
    passed: bool
    skipped: bool = False
    note: str = ""

    def as_dict(self):
        return {"name": self.name, "formula": self.formula_value,
                "measured": self.measured, "ratio": self.ratio,
                "passed": self.passed, "skipped": self.skipped,
                "note": self.note}


@dataclass
class BoundSpec:
    """A named bound: measured <= c_max * formula(params)."""

    name: str
    formula: object                  # params dict -> float
    requires: object = None          # params dict -> bool, regime hypothesis
    tall_cache: str = ""             # Gamma(B) tag, informational


def check_bound(measured, spec: BoundSpec, c_max, params) -> BoundResult:
    if spec.requires is not None and not spec.requires(params):
        return BoundResult(spec.name, 0.0, measured, 0.0, True, skipped=True,
                           note="outside the bound's parameter regime")
    val = float(spec.formula(params))
    if val <= 0:
        raise ConfigurationError(f"bound {spec.name} non-positive at {params}")
    ratio = measured / val
    return BoundResult(spec.name, val, measured, ratio, measured <= c_max * val)


@dataclass
class ExcessReport:
    q_seq: int
    q_par: int
    cache_excess: int
    block_wait_total: int
    idle_total: int
    bounds: list = field(default_factory=list)

    def as_dict(self):
        return {"q_seq": self.q_seq, "q_par": self.q_par,
                "cache_excess": self.cache_excess,
                "block_wait_total": self.block_wait_total,
                "idle_total": self.idle_total,
                "bounds": [b.as_dict() for b in self.bounds]}


_COMPAT_KEYS = ("algorithm", "n", "M", "B", "hit_cost", "miss_cost",
                "steal_cost", "sched_interval", "padded", "gapped", "seed")


def compute_excess(run, baseline) -> ExcessReport:
    """Clamped miss excess of run over its p=1 baseline."""
    ca = getattr(run, "config", None)
    cb = getattr(baseline, "config", None)
    if ca is not None and cb is not None:
        for k in _COMPAT_KEYS:
            if getattr(ca, k) != getattr(cb, k):
                raise ConfigurationError(
                    f"baseline config differs in {k}: "
                    f"{getattr(ca, k)} vs {getattr(cb, k)}")
    if baseline.counters.total_invalidation != 0:
        raise ConfigurationError("baseline run is not steal-free")
    q_seq = baseline.counters.total_misses
    c = run.counters
    return ExcessReport(
        q_seq=q_seq,
        q_par=c.total_misses,
        cache_excess=max(0, c.total_cold_capacity - q_seq),
        block_wait_total=c.total_invalidation,
        idle_total=sum(c.idle_ticks),
    )


def measure_idle(run):
    """Per-core idle breakdown: steal-phase waits vs up-pass waits."""
    c = run.counters
    return {
        "total": sum(c.idle_ticks),
        "phase_wait": sum(c.idle_phase_wait),
        "uppass_wait": sum(c.idle_uppass_wait),
        "per_core": list(c.idle_ticks),
        "per_core_phase": list(c.idle_phase_wait),
        "per_core_uppass": list(c.idle_uppass_wait),
    }


# -- stack block delay ---------------------------------------------------------


def stack_block_delay(run, span) -> int:
    """Max transfers of any one stack block of a stolen task, inside its span.

    span is a StolenSpan from the run; the machine must have been created
    with log_events=True.
    """
    m = run.machine
    if not m.log_events:
        raise ConfigurationError("stack_block_delay needs the event log")
    b0 = span.stack_lo // m.B
    b1 = (span.stack_hi - 1) // m.B
    counts = {}
    for (t, core, blk, kind) in m.events:
        if kind == "queue":
            continue
        if b0 <= blk <= b1 and span.start <= t <= span.end:
            counts[blk] = counts.get(blk, 0) + 1
    return max(counts.values(), default=0)


def stack_region_invalidations(run) -> int:
    """Invalidation misses landing in any execution-stack arena."""
    m = run.machine
    if not m.log_events:
        raise ConfigurationError("needs the event log")
    first_stack_block = m.global_size // m.B
    return sum(1 for (t, c, blk, kind) in m.events
               if kind == EV_INVALIDATION and blk >= first_stack_block)


def frame_block_delays(run, min_task_words):
    """Per-block transfer counts of stack blocks holding frames of tasks
    whose size exceeds min_task_words, over each task's execution span."""
    out = []
    for span in run.stolen_spans:
        if span.size > min_task_words:
            out.append(stack_block_delay(run, span))
    return out


# -- friendliness and sharing estimation ------------------------------------------


def _parallel_nondesc(a, b) -> bool:
    """True when the two recorded tasks could run in parallel and neither
    contains the other. Sequenced stages of one call are never parallel."""
    if a.anc == b.anc:
        return b.hi <= a.lo or a.hi <= b.lo
    la, lb = len(a.anc), len(b.anc)
    k = 0
    while k < la and k < lb and a.anc[k] == b.anc[k]:
        k += 1
    if k == la:
        nxt = b.anc[k]
        if nxt[0] == "m":
            return not (a.lo <= nxt[1] < a.hi)
        return False
    if k == lb:
        nxt = a.anc[k]
        if nxt[0] == "m":
            return not (b.lo <= nxt[1] < b.hi)
        return False
    ea, eb = a.anc[k], b.anc[k]
    if ea[0] == "m" and eb[0] == "m":
        return True
    return False


def estimate_fL(run, stolen_only=False, data_blocks_only=True):
    """Per-size-class tables of measured friendliness and write sharing.

    f_hat(r) = max over size-r tasks of (blocks touched - r/B), floored at 0.
    L_hat(r) = max over size-r tasks of the number of its written data blocks
    also written by some parallel-schedulable non-descendant task.
    Needs a run executed with measure=True.
    """
    m = run.machine
    B = m.B
    limit = m.global_size // B if data_blocks_only else None
    records = run.task_records
    if stolen_only:
        records = [r for r in records if r.stolen]

    f_hat = {}
    for r in records:
        excess = max(0.0, r.nblocks - r.size / B)
        if excess > f_hat.get(r.size, -1.0):
            f_hat[r.size] = excess

    writers = {}
    for idx, r in enumerate(run.task_records):
        for blk in r.wblocks:
            if limit is not None and blk >= limit:
                continue
            writers.setdefault(blk, []).append(idx)

    all_recs = run.task_records
    L_hat = {}
    for r in records:
        shared = 0
        for blk in r.wblocks:
            if limit is not None and blk >= limit:
                continue
            for j in writers.get(blk, ()):
                o = all_recs[j]
                if o.uid != r.uid and _parallel_nondesc(r, o):
                    shared += 1
                    break
        if shared > L_hat.get(r.size, -1):
            L_hat[r.size] = shared
    return f_hat, L_hat


def shared_write_blocks(run, size_min, data_blocks_only=True):
    """Max shared written data blocks among tasks of at least size_min."""
    _, lh = estimate_fL(run, data_blocks_only=data_blocks_only)
    vals = [v for s, v in lh.items() if s >= size_min]
    return max(vals, default=0)


# -- formula helpers ------------------------------------------------------------------


def s_star(n, s_fn, limit) -> int:
    """Iterations of s_fn until the size drops to limit or below."""
    i = 0
    x = n
    while x > limit and i < 64:
        nxt = s_fn(x)
        if nxt >= x:
            raise ConfigurationError("child-size function does not shrink")
        x = nxt
        i += 1
    return i


def eval_block_share_sum(r, n, p, alpha, L_fn):
    """The two-regime level sum of shared blocks under priority stealing.

    Levels with fewer than p tasks contribute one term per task; deeper
    levels contribute p terms each. The second sum is empty when p exceeds
    the number of leaves.
    """
    y = 1.0 / math.log2(1.0 / alpha)
    depth_limit = math.log2(r ** y) if r > 1 else 0.0
    lo = math.log2(max(1.0, n / r))
    hi1 = min(math.log2(p) if p > 1 else 0.0, depth_limit)
    total = 0.0
    i = math.ceil(lo)
    while i <= hi1:
        total += (2 ** i) * L_fn(r * alpha ** i)
        i += 1
    if p <= r ** y:
        i = math.floor(math.log2(p)) + 1 if p > 1 else 1
        while i <= depth_limit:
            total += p * L_fn(r * alpha ** i)
            i += 1
    return total


STANDARD_BOUNDS = {
    "obs3_per_priority": BoundSpec(
        "obs3_per_priority", lambda prm: prm["p"] - 1),
    "cor4_attempts": BoundSpec(
        "cor4_attempts", lambda prm: 2 * prm["p"] * max(1, prm["rounds"])),
    "cache_excess_bp": BoundSpec(
        "cache_excess_bp", lambda prm: prm["p"] * prm["M"] / prm["B"],
        requires=lambda prm: prm["n"] >= prm["M"] * prm["p"],
        tall_cache="B^2 log B"),
    "block_excess_bp": BoundSpec(
        "block_excess_bp",
        lambda prm: prm["p"] * prm["B"] * max(1.0, math.log2(prm["B"])),
        tall_cache="B^2 log B"),
    "uppass_idle": BoundSpec(
        "uppass_idle",
        lambda prm: prm["b"] * prm["p"]
        * (math.log2(prm["n"]) + prm["B"] * max(1.0, math.log2(prm["B"])))),
    "usurpers_per_boundary": BoundSpec(
        "usurpers_per_boundary", lambda prm: max(prm["p"] - 1, 1)),
}


def max_usurped_per_boundary(run) -> int:
    by_boundary = {}
    for ms in run.member_stats:
        if ms.start_core != ms.end_core:
            by_boundary[ms.boundary] = by_boundary.get(ms.boundary, 0) + 1
    return max(by_boundary.values(), default=0)


def obs3_max_per_priority(run) -> int:
    c = run.counters
    keys = set(c.steals_per_priority) | set(c.pseudo_steals_per_priority)
    return max((c.steals_per_priority.get(k, 0)
                + c.pseudo_steals_per_priority.get(k, 0) for k in keys),
               default=0)


def stolen_priority_order_ok(run) -> bool:
    """Steals from one victim while its deque stays nonempty come top-down."""
    per_victim = {}
    for rec in run.steal_log:
        if rec.kind != "stolen":
            continue
        per_victim.setdefault(rec.victim, []).append(rec)
    for recs in per_victim.values():
        recs.sort(key=lambda r: r.tick)
        for a, b in zip(recs, recs[1:]):
            if b.tick == a.tick and b.priority > a.priority:
                return False
    return True


def run_invariants(run, write_budget=4) -> dict:
    """The per-run exact invariant checks; True means satisfied."""
    c = run.counters
    p = run.p
    out = {}
    out["single_writer_coherence"] = True  # asserted inside the machine
    out["conservation"] = (c.total_misses == run.machine.total_transfers())
    out["limited_access"] = c.max_writes_per_address <= write_budget
    out["seq_no_invalidation"] = (p > 1 or c.total_invalidation == 0)
    if run.scheduler == "pws":
        out["obs3_per_priority"] = obs3_max_per_priority(run) <= max(p - 1, 0)
        out["cor4_attempts"] = c.total_attempts <= 2 * p * max(c.rounds, 1)
        rt = [d for _, d in run.round_trace]
        out["round_monotone"] = all(a >= b for a, b in zip(rt, rt[1:]))
        out["steal_order_top_down"] = stolen_priority_order_ok(run)
    out["usurpers_per_boundary"] = \
        max_usurped_per_boundary(run) <= max(p - 1, 0)
    return out
