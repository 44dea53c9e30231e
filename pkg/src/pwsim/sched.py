"""Runtime drivers: the lock-step multicore engine and a sequential executor.

The engine advances p simulated cores over a shared virtual clock. Each step
executes one O(1)-access work unit on the core with the smallest clock, so
cores interleave deterministically at work-unit granularity. Three schedulers
are supported:

  pws   round-based priority stealing: steal requests are served in phases
        of 2*ceil(log2 p) + PHASE_EXTRA scheduler steps; a round of priority
        d admits only head tasks of priority d and ends once no head holds d
        and no busy core could still fork a task of priority >= d
  rws   randomized stealing: an idle core probes uniform-random victims
  seq   direct recursive execution on core 0 with no scheduler machinery

A pws or rws run at p=1 produces the identical memory trace and counter set
to the sequential executor; the test suite asserts this.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from .compute import (
    F_JC, F_RES_L, F_RES_R, Stack, TaskDeque, TaskNode, UNIT_COST,
    frame_words, pad_words, path_frames_need, tree_depth,
)
from .memsim import ConfigurationError, Machine

PHASE_EXTRA = 3  # scheduler steps per phase beyond the two prefix-sum sweeps


class SchedulerError(Exception):
    """The runtime wedged: no core can progress but work remains."""


def phase_steps(p: int) -> int:
    return 2 * math.ceil(math.log2(p)) + PHASE_EXTRA if p > 1 else 0


# -- runtime instances -----------------------------------------------------------


class StageRun:
    """One executing instance of a StageSpec."""

    __slots__ = ("uid", "spec", "ops", "band_top", "call_run", "stage_idx",
                 "leaf_size", "words_per_elem", "carry", "frame_nwords",
                 "anc", "start_core", "end_core")

    def __init__(self, uid, spec, ops, band_top, call_run, stage_idx):
        self.uid = uid
        self.spec = spec
        self.ops = ops
        self.band_top = band_top
        self.call_run = call_run
        self.stage_idx = stage_idx
        if spec.kind == "fanout":
            self.leaf_size = 1
            self.words_per_elem = max(1, spec.wpe)
            self.carry = False
            self.frame_nwords = 1
        else:
            self.leaf_size = spec.descriptor.leaf_size
            self.words_per_elem = ops.words_per_elem
            self.carry = ops.carry
            self.frame_nwords = frame_words(ops)
        self.anc = call_run.anc + ((uid, stage_idx),)
        self.start_core = None
        self.end_core = None

    @property
    def padded(self):
        return self.spec.descriptor.padded


class CallRun:
    """One executing recursive-call instance (a sequence of stages)."""

    __slots__ = ("uid", "template", "args", "parent_node", "home_stack",
                 "scratch_base", "scratch_restore", "stage_idx",
                 "base_priority", "start_core", "end_core", "anc",
                 "boundary_key", "blocks", "wblocks")

    def __init__(self, uid, template, args, parent_node, home_stack,
                 base_priority, anc, boundary_key):
        self.uid = uid
        self.template = template
        self.args = args
        self.parent_node = parent_node
        self.home_stack = home_stack
        self.scratch_base = None
        self.scratch_restore = None
        self.stage_idx = 0
        self.base_priority = base_priority
        self.start_core = None
        self.end_core = None
        self.anc = anc
        self.boundary_key = boundary_key
        self.blocks = None
        self.wblocks = None


@dataclass
class StealRecord:
    thief: int
    victim: int
    task_uid: int
    priority: int
    round: int
    kind: str  # 'stolen' | 'pseudo-stolen'
    tick: int


@dataclass
class TaskEvent:
    tick: int
    core: int
    task_uid: int
    event: str  # fork | start | finish | steal | usurp


@dataclass
class MemberStat:
    """Start/end core of one collection member, for usurper accounting."""
    boundary: tuple
    start_core: int
    end_core: int


@dataclass
class TaskRecord:
    """Per-task measurement sample (measure mode only)."""
    uid: int
    stage_uid: int
    anc: tuple
    lo: int
    hi: int
    size: int
    stolen: bool
    nblocks: int
    wblocks: frozenset


@dataclass
class StolenSpan:
    uid: int
    size: int
    start: int
    end: int
    stack_lo: int
    stack_hi: int


@dataclass
class RunResult:
    machine: Machine
    counters: object
    scheduler: str
    p: int
    ticks: int
    steal_log: list = field(default_factory=list)
    task_events: list = field(default_factory=list)
    task_records: list = field(default_factory=list)
    member_stats: list = field(default_factory=list)
    stolen_spans: list = field(default_factory=list)
    round_trace: list = field(default_factory=list)
    phase_step_count: int = 0
    config: object = None


# -- access context ---------------------------------------------------------------


class Ctx:
    """Memory access facade handed to stage work callbacks."""

    __slots__ = ("machine", "core", "tick", "lat", "node", "measure")

    def __init__(self, machine, measure=False):
        self.machine = machine
        self.core = 0
        self.tick = 0
        self.lat = 0
        self.node = None
        self.measure = measure

    def read(self, addr):
        v, lat = self.machine.read(self.core, addr, self.tick)
        self.lat += lat
        if self.measure and self.node is not None:
            self.node.blocks.add(addr // self.machine.B)
        return v

    def write(self, addr, value):
        self.lat += self.machine.write(self.core, addr, value, self.tick)
        if self.measure and self.node is not None:
            b = addr // self.machine.B
            self.node.blocks.add(b)
            self.node.wblocks.add(b)

    def read_range(self, lo, n):
        self.lat += self.machine.access_range(self.core, lo, n, False, self.tick)
        if self.measure and self.node is not None:
            self.node.blocks.update(range(lo // self.machine.B,
                                          (lo + n - 1) // self.machine.B + 1))
        return self.machine.peek_range(lo, lo + n)

    def write_range(self, lo, values):
        n = len(values)
        self.machine.poke_range(lo, values)
        self.lat += self.machine.access_range(self.core, lo, n, True, self.tick)
        if self.measure and self.node is not None:
            blks = range(lo // self.machine.B, (lo + n - 1) // self.machine.B + 1)
            self.node.blocks.update(blks)
            self.node.wblocks.update(blks)


class Core:
    __slots__ = ("cid", "clock", "deque", "current", "cur_priority",
                 "idle", "request_tick", "next_serve", "idle_mark")

    def __init__(self, cid):
        self.cid = cid
        self.clock = 0
        self.deque = TaskDeque(cid)
        self.current = None   # ('start_call', call) | ('node', t) | ('join', t)
        self.cur_priority = None
        self.idle = False
        self.request_tick = None
        self.next_serve = None
        self.idle_mark = None


# -- engine -----------------------------------------------------------------------


class Engine:
    """Deterministic lock-step execution of one plan on p cores."""

    def __init__(self, machine: Machine, scheduler="pws", seed=0,
                 measure=False, trace=False, stress_phases=False,
                 max_units=None):
        self.m = machine
        self.p = machine.p
        self.scheduler = scheduler
        self.measure = measure
        self.trace = trace
        self.stress = stress_phases
        self.cores = [Core(c) for c in range(self.p)]
        self.ctx = Ctx(machine, measure)
        self.uid = 0
        self.rng = random.Random(seed ^ 0x5EA15EED)
        self.done = False
        self.root_call = None

        self.steal_log = []
        self.task_events = []
        self.task_records = []
        self.member_stats = []
        self.stolen_open = {}
        self.stolen_spans = []
        self.round_trace = []

        self.round_prio = None
        self.last_round_prio = None
        self.failed_attempts = set()
        self.phase_len = phase_steps(self.p) * machine.cost.sched_interval
        self.prev_heads = {}
        self.max_units = max_units
        self.units = 0

    # -- ids and logging ---------------------------------------------------------

    def next_uid(self):
        self.uid += 1
        return self.uid

    def log_task(self, tick, core, uid, event):
        if self.trace:
            self.task_events.append(TaskEvent(tick, core, uid, event))

    # -- plan instantiation --------------------------------------------------------

    def start_root(self, template, args):
        need = template.stack_need() + 4 * self.m.B
        root_stack = Stack(self.m, 0, need)
        call = CallRun(self.next_uid(), template, args, None, root_stack,
                       template.total_levels - 1, (), ("root",))
        self.root_call = call
        self.cores[0].current = ("start_call", call)
        self.cores[0].cur_priority = call.base_priority + 1
        return call

    def make_stage(self, call, idx):
        spec = call.template.stages[idx]
        ops = spec.build(self, call) if spec.kind == "bp" else None
        return StageRun(self.next_uid(), spec, ops,
                        call.base_priority - spec.band_offset, call, idx)

    def new_node(self, stage, lo, hi, depth, parent, which):
        n = TaskNode(self.next_uid(), stage, lo, hi, depth,
                     stage.band_top - depth, parent, which)
        if self.measure:
            n.blocks = set()
            n.wblocks = set()
        return n

    # -- unit execution -------------------------------------------------------------

    def step(self, core: Core):
        kind, payload = core.current
        ctx = self.ctx
        ctx.core = core.cid
        ctx.tick = core.clock
        ctx.lat = 0
        if kind == "start_call":
            self.unit_start_call(core, payload)
        elif kind == "node":
            self.unit_node(core, payload)
        else:
            self.unit_join(core, payload)
        core.clock += UNIT_COST + ctx.lat
        self.m.clock[core.cid] = core.clock
        self.units += 1
        if self.max_units is not None and self.units > self.max_units:
            raise SchedulerError("unit budget exhausted; runaway computation")

    def unit_start_call(self, core, call):
        call.start_core = core.cid
        if self.measure:
            call.blocks = set()
            call.wblocks = set()
        if call.template.scratch_words:
            call.scratch_restore = call.home_stack.top
            call.scratch_base = call.home_stack.push(call.template.scratch_words)
        stage = self.make_stage(call, 0)
        root = self.new_node(stage, 0, stage.spec.elems, 0, None, "S")
        root.call_run = call
        root.home_stack = call.home_stack
        core.current = ("node", root)
        core.cur_priority = root.priority

    def unit_node(self, core, t):
        ctx = self.ctx
        ctx.node = t
        stage = t.stage
        t.start_tick = core.clock
        if stage.start_core is None:
            stage.start_core = core.cid
        core.cur_priority = t.priority
        self.log_task(core.clock, core.cid, t.uid, "start")

        if t.is_leaf():
            if stage.spec.kind == "fanout":
                spec = stage.spec
                args = spec.member_argfn(stage.call_run, t.lo)
                call = CallRun(
                    self.next_uid(), spec.member_template, args, t,
                    t.home_stack,
                    stage.band_top - tree_depth(spec.elems, 1) - 1,
                    stage.anc + (("m", t.lo),), (stage.uid,))
                self.unit_start_call(core, call)
                return
            v = stage.ops.leaf(ctx, t)
            self.finish_task(core, t, v)
            return

        pad = pad_words(t.size) if stage.padded else 0
        t.frame_restore = t.home_stack.top
        t.frame = t.home_stack.push(stage.frame_nwords, pad)
        t.kernel_core = core.cid
        t.join_pending = 2
        ctx.write(t.frame + F_JC, 2)
        if stage.spec.kind == "bp":
            stage.ops.head(ctx, t)
        mid = t.split()
        left = self.new_node(stage, t.lo, mid, t.depth + 1, t, "L")
        right = self.new_node(stage, mid, t.hi, t.depth + 1, t, "R")
        left.home_stack = right.home_stack = t.home_stack
        self.log_task(core.clock, core.cid, t.uid, "fork")
        core.deque.push_bottom(right)
        core.current = ("node", left)
        core.cur_priority = left.priority

    def unit_join(self, core, child):
        """One up-pass step at child's parent."""
        ctx = self.ctx
        t = child.parent
        ctx.node = t
        core.cur_priority = t.priority
        assert t.join_pending > 0, "double join"
        t.join_pending -= 1
        ctx.write(t.frame + F_JC, t.join_pending)
        if t.join_pending > 0:
            core.current = None
            return
        if core.cid != t.kernel_core:
            self.m.counters.usurpations += 1
            self.log_task(core.clock, core.cid, t.uid, "usurp")
        vl = vr = None
        if t.stage.carry:
            vl = ctx.read(t.frame + F_RES_L)
            vr = ctx.read(t.frame + F_RES_R)
        v = t.stage.ops.join(ctx, t, vl, vr) if t.stage.spec.kind == "bp" else None
        t.home_stack.pop(t.frame_restore)
        self.finish_task(core, t, v)

    def finish_task(self, core, t, value):
        """t's subtree is complete; deposit its value and continue upward."""
        ctx = self.ctx
        ctx.node = t
        stage = t.stage
        self.log_task(core.clock, core.cid, t.uid, "finish")
        if t.stolen and t.uid in self.stolen_open:
            st = self.stolen_open.pop(t.uid)
            st.end = core.clock
            self.stolen_spans.append(st)
        if self.measure:
            self.record_task(t)
        if t.parent is not None:
            if stage.carry and value is not None:
                slot = F_RES_L if t.which == "L" else F_RES_R
                ctx.write(t.parent.frame + slot, value)
            if self.measure:
                t.parent.blocks |= t.blocks
                t.parent.wblocks |= t.wblocks
            core.current = ("join", t)
            return
        # stage root finished
        stage.end_core = core.cid
        call = t.call_run
        if stage.spec.kind == "bp" and hasattr(stage.ops, "root_out"):
            stage.ops.root_out(ctx, value)
        if self.measure:
            call.blocks |= t.blocks
            call.wblocks |= t.wblocks
        self.member_stats.append(MemberStat(
            ("stage", call.uid, stage.stage_idx), stage.start_core, core.cid))
        call.stage_idx += 1
        if call.stage_idx < len(call.template.stages):
            nstage = self.make_stage(call, call.stage_idx)
            root = self.new_node(nstage, 0, nstage.spec.elems, 0, None, "S")
            root.call_run = call
            root.home_stack = call.home_stack
            core.current = ("node", root)
            core.cur_priority = root.priority
            return
        # call complete
        call.end_core = core.cid
        if call.scratch_base is not None:
            call.home_stack.pop(call.scratch_restore)
        self.member_stats.append(MemberStat(
            call.boundary_key, call.start_core, core.cid))
        pn = call.parent_node
        if pn is None:
            self.done = True
            core.current = None
            return
        if self.measure:
            pn.blocks |= call.blocks
            pn.wblocks |= call.wblocks
        self.finish_task(core, pn, None)

    def record_task(self, t):
        if t.blocks is None:
            return
        self.task_records.append(TaskRecord(
            t.uid, t.stage.uid, t.stage.anc, t.lo, t.hi, t.size,
            t.stolen, len(t.blocks), frozenset(t.wblocks)))

    # -- work acquisition -----------------------------------------------------------

    def acquire(self, core):
        t = core.deque.pop_bottom()
        if t is not None:
            core.current = ("node", t)
            core.idle = False
            return True
        if not core.idle:
            core.idle = True
            core.request_tick = core.clock
            core.idle_mark = core.clock
            if self.p > 1 and self.phase_len:
                core.next_serve = (core.clock // self.phase_len + 2) * self.phase_len
        return False

    # -- main loops -------------------------------------------------------------------

    def run(self, template, args):
        self.start_root(template, args)
        if self.scheduler == "rws":
            self.run_rws()
        else:
            self.run_pws()
        end = max(c.clock for c in self.cores)
        for c in self.cores:
            if c.idle and c.current is None:
                self.mark_idle(c, end, uppass=True)
        self.m.finalize_counters()
        for core in self.cores:
            core.deque.check_monotone()
        self.m.check_coherence()
        return RunResult(
            machine=self.m, counters=self.m.counters, scheduler=self.scheduler,
            p=self.p, ticks=max(c.clock for c in self.cores),
            steal_log=self.steal_log, task_events=self.task_events,
            task_records=self.task_records, member_stats=self.member_stats,
            stolen_spans=self.stolen_spans, round_trace=self.round_trace,
            phase_step_count=phase_steps(self.p))

    def run_pws(self):
        while not self.done:
            runnable = []
            waiting = []
            for c in self.cores:
                if c.current is None:
                    self.acquire(c)
                if c.current is not None:
                    runnable.append(c)
                elif c.idle:
                    waiting.append(c)
            if not runnable:
                if self.done:
                    return
                if self.p == 1 or not waiting:
                    raise SchedulerError("deadlock: nothing runnable, work remains")
                if all(len(c.deque) == 0 for c in self.cores):
                    raise SchedulerError("deadlock: all cores idle, empty deques")
            if waiting and self.p > 1:
                T = min(c.next_serve for c in waiting)
                if not runnable or min(c.clock for c in runnable) >= T:
                    self.resolve_phase(T)
                    continue
            nxt = min(runnable, key=lambda c: (c.clock, c.cid))
            self.step(nxt)

    # -- pws phases -------------------------------------------------------------------

    def snapshot_heads(self):
        return {c.cid: c.deque.head() for c in self.cores
                if c.deque.head() is not None}

    def flagged_bounds(self):
        """Upper bounds published by busy cores with empty deques."""
        return {c.cid: c.cur_priority - 1 for c in self.cores
                if c.current is not None and len(c.deque) == 0
                and c.cur_priority is not None}

    def resolve_phase(self, T):
        heads = self.snapshot_heads()
        eligible = sorted((c for c in self.cores
                           if c.current is None and c.idle and c.next_serve <= T),
                          key=lambda c: c.cid)
        prev_heads = self.prev_heads
        self.prev_heads = heads
        if not eligible:
            return
        cset = self.m.counters
        cset.phases += 1
        cset.sched_steps += phase_steps(self.p)

        bounds = self.flagged_bounds()
        if self.round_prio is None:
            # a flagged bound is only an upper bound; it cannot promise a task
            # above a priority that already ran (up-pass bounds overshoot)
            last = self.last_round_prio
            bvals = [b if last is None else min(b, last) for b in bounds.values()]
            cand = [h.priority for h in heads.values()] + bvals
            if not cand:
                for c in eligible:
                    self.mark_idle(c, T, uppass=True)
                    c.next_serve = T + self.phase_len
                cset.retry_phases += 1
                return
            d = max(cand)
            if last is not None:
                assert d <= last, \
                    f"round priority rose from {last} to {d}"
            if d != last:
                cset.rounds += 1  # distinct priority executed
            self.round_prio = d
            self.last_round_prio = d
            self.round_trace.append((T, d))
        d = self.round_prio
        assert all(h.priority <= d for h in heads.values()), \
            "head above the current round priority"

        src = prev_heads if self.stress else heads
        victims = [cid for cid in sorted(src) if src[cid].priority == d]
        ranks = prefix_rank([c.cid for c in eligible], self.p)
        eligible.sort(key=lambda c: ranks[c.cid])
        nmatch = min(len(eligible), len(victims))

        matched = set()
        for i in range(nmatch):
            thief = eligible[i]
            vcid = victims[i]
            want = src[vcid]
            got = self.cores[vcid].deque.head()
            if got is not want:
                self.steal_log.append(StealRecord(
                    thief.cid, vcid, want.uid, d, cset.rounds,
                    "pseudo-stolen", T))
                bump(cset.pseudo_steals_per_priority, d)
                self.mark_idle(thief, T, uppass=False)
                thief.next_serve = T + self.phase_len
                continue
            node = self.cores[vcid].deque.steal_top()
            self.execute_steal(thief, vcid, node, d, T)
            matched.add(thief.cid)

        leftovers = [c for c in eligible if c.cid not in matched
                     and c.current is None]
        live = any(cc.deque.head() is not None
                   and cc.deque.head().priority == d for cc in self.cores)
        blocked = any(b >= d for b in self.flagged_bounds().values())
        if leftovers:
            cset.retry_phases += 1
            for c in leftovers:
                self.mark_idle(c, T, uppass=not live)
                c.next_serve = T + self.phase_len
            if not live and not blocked:
                for c in leftovers:
                    if (c.cid, d) not in self.failed_attempts:
                        self.failed_attempts.add((c.cid, d))
                        bump(cset.attempts_per_priority, d)
                self.round_prio = None
        elif not live and not blocked:
            # every request served and nothing of priority d remains anywhere
            self.round_prio = None

    def execute_steal(self, thief, victim_cid, node, d, T):
        cset = self.m.counters
        bump(cset.steals_per_priority, d)
        bump(cset.attempts_per_priority, d)
        node.stolen = True
        node.home_stack = Stack(self.m, thief.cid, self.node_stack_need(node))
        node.kernel_core = thief.cid
        self.mark_idle(thief, T, uppass=False)
        thief.idle = False
        thief.clock = T + self.m.cost.steal_cost
        self.m.clock[thief.cid] = thief.clock
        thief.current = ("node", node)
        thief.cur_priority = node.priority
        self.steal_log.append(StealRecord(
            thief.cid, victim_cid, node.uid, d, cset.rounds, "stolen", T))
        self.log_task(T, thief.cid, node.uid, "steal")
        self.stolen_open[node.uid] = StolenSpan(
            node.uid, node.size, T, T, node.home_stack.base,
            node.home_stack.limit)

    def node_stack_need(self, node):
        spec = node.stage.spec
        need = path_frames_need(node.span, spec.descriptor, spec.wpe)
        if spec.kind == "fanout":
            need += spec.member_template.stack_need()
        return need + 2 * self.m.B

    def mark_idle(self, core, T, uppass):
        span = T - core.idle_mark
        core.idle_mark = T
        core.clock = T
        self.m.clock[core.cid] = T
        if span <= 0:
            return
        c = self.m.counters
        c.idle_ticks[core.cid] += span
        if uppass:
            c.idle_uppass_wait[core.cid] += span
        else:
            c.idle_phase_wait[core.cid] += span

    # -- rws ---------------------------------------------------------------------------

    def run_rws(self):
        cset = self.m.counters
        cost = self.m.cost.steal_cost
        while not self.done:
            for c in self.cores:
                if c.current is None:
                    self.acquire(c)
            if all(c.current is None and len(c.deque) == 0 for c in self.cores):
                raise SchedulerError("deadlock: all cores idle, empty deques")
            nxt = min(self.cores, key=lambda c: (c.clock, c.cid))
            if nxt.current is not None:
                self.step(nxt)
                continue
            if self.p == 1:
                raise SchedulerError("single core idle with work remaining")
            victim = self.rng.randrange(self.p - 1)
            if victim >= nxt.cid:
                victim += 1
            cset.sched_steps += 1
            node = self.cores[victim].deque.steal_top()
            if node is None:
                cset.idle_ticks[nxt.cid] += cost
                cset.idle_phase_wait[nxt.cid] += cost
                nxt.clock += cost
                self.m.clock[nxt.cid] = nxt.clock
                continue
            d = node.priority
            bump(cset.steals_per_priority, d)
            bump(cset.attempts_per_priority, d)
            node.stolen = True
            node.home_stack = Stack(self.m, nxt.cid, self.node_stack_need(node))
            node.kernel_core = nxt.cid
            nxt.idle = False
            nxt.clock += cost
            self.m.clock[nxt.cid] = nxt.clock
            nxt.current = ("node", node)
            nxt.cur_priority = node.priority
            self.steal_log.append(StealRecord(
                nxt.cid, victim, node.uid, d, -1, "stolen", nxt.clock))
            self.log_task(nxt.clock, nxt.cid, node.uid, "steal")
            self.stolen_open[node.uid] = StolenSpan(
                node.uid, node.size, nxt.clock, nxt.clock,
                node.home_stack.base, node.home_stack.limit)


def bump(d, k):
    d[k] = d.get(k, 0) + 1


def prefix_rank(ids, p):
    """Ranks via the two-sweep partial-sum tree over p leaves.

    The tree is built explicitly (2p-1 nodes); the simulated time of the two
    sweeps is charged by the per-phase step accounting.
    """
    flags = [0] * p
    for i in ids:
        flags[i] = 1
    size = 1
    while size < p:
        size *= 2
    tree = [0] * (2 * size)
    tree[size:size + p] = flags
    for i in range(size - 1, 0, -1):
        tree[i] = tree[2 * i] + tree[2 * i + 1]
    ranks = {}
    for i in ids:
        acc = 0
        pos = 1
        lo, hi = 0, size
        while pos < size:
            mid = (lo + hi) // 2
            if i < mid:
                pos = 2 * pos
                hi = mid
            else:
                acc += tree[2 * pos]
                pos = 2 * pos + 1
                lo = mid
        ranks[i] = acc
    return ranks


# -- sequential driver ---------------------------------------------------------------


class SeqDriver:
    """Direct recursive execution on core 0, matching the engine's trace."""

    def __init__(self, machine):
        self.m = machine
        self.ctx = Ctx(machine, measure=False)
        self.uid = 0
        self.clock = 0

    def next_uid(self):
        self.uid += 1
        return self.uid

    def charge(self):
        self.clock += UNIT_COST + self.ctx.lat
        self.ctx.lat = 0
        self.ctx.tick = self.clock
        self.m.clock[0] = self.clock

    def run(self, template, args):
        need = template.stack_need() + 4 * self.m.B
        stack = Stack(self.m, 0, need)
        self.run_call(template, args, stack)
        self.m.finalize_counters()
        return RunResult(
            machine=self.m, counters=self.m.counters, scheduler="seq",
            p=self.m.p, ticks=self.clock)

    def run_call(self, template, args, stack):
        restore = stack.top
        call = CallRun(self.next_uid(), template, args, None, stack,
                       template.total_levels - 1, (), ("seq",))
        if template.scratch_words:
            call.scratch_base = stack.push(template.scratch_words)
        self.charge()  # call-start unit
        for idx, spec in enumerate(template.stages):
            call.stage_idx = idx
            ops = spec.build(self, call) if spec.kind == "bp" else None
            sr = StageRun(self.next_uid(), spec, ops, 0, call, idx)
            self.rec(sr, 0, spec.elems, None, None, "S", stack)
        stack.pop(restore)

    def rec(self, stage, lo, hi, parent, parent_frame, which, stack):
        ctx = self.ctx
        span = hi - lo
        node = _SeqNode(stage, lo, hi, parent, which)
        if span <= stage.leaf_size:
            if stage.spec.kind == "fanout":
                spec = stage.spec
                args = spec.member_argfn(stage.call_run, lo)
                self.run_call(spec.member_template, args, stack)
                v = None
                self.deposit(stage, parent_frame, which, v)
                return
            v = stage.ops.leaf(ctx, node)
            self.deposit(stage, parent_frame, which, v)
            self.charge()
            return
        pad = pad_words(span * stage.words_per_elem) if stage.padded else 0
        restore = stack.top
        frame = stack.push(stage.frame_nwords, pad)
        node.frame = frame
        ctx.write(frame + F_JC, 2)
        if stage.spec.kind == "bp":
            stage.ops.head(ctx, node)
        self.charge()  # fork unit
        mid = node.split()
        self.rec(stage, lo, mid, node, frame, "L", stack)
        ctx.write(frame + F_JC, 1)
        self.charge()  # left join unit
        self.rec(stage, mid, hi, node, frame, "R", stack)
        ctx.write(frame + F_JC, 0)
        vl = vr = None
        if stage.carry:
            vl = ctx.read(frame + F_RES_L)
            vr = ctx.read(frame + F_RES_R)
        v = stage.ops.join(ctx, node, vl, vr) if stage.spec.kind == "bp" else None
        stack.pop(restore)
        self.deposit(stage, parent_frame, which, v)
        self.charge()  # right join unit

    def deposit(self, stage, parent_frame, which, v):
        if parent_frame is None:
            if stage.spec.kind == "bp" and hasattr(stage.ops, "root_out"):
                stage.ops.root_out(self.ctx, v)
            return
        if stage.carry and v is not None:
            slot = F_RES_L if which == "L" else F_RES_R
            self.ctx.write(parent_frame + slot, v)


class _SeqNode:
    """Duck-typed stand-in for TaskNode inside the sequential driver."""

    __slots__ = ("stage", "lo", "hi", "frame", "parent", "which")

    def __init__(self, stage, lo, hi, parent, which):
        self.stage = stage
        self.lo = lo
        self.hi = hi
        self.frame = None
        self.parent = parent
        self.which = which

    @property
    def span(self):
        return self.hi - self.lo

    @property
    def size(self):
        return self.span * self.stage.words_per_elem

    def split(self):
        return self.lo + (self.span + 1) // 2
