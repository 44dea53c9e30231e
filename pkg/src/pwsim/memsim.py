"""Word-addressed shared memory with per-core private LRU caches.

The machine models p cores, each with a private cache of M words organized
in B-word blocks, in front of a single shared store. Writes invalidate every
other cached copy of the block (write-invalidate coherence with a directory),
and at most one core ever holds a dirty copy. All costs are charged on a
discrete virtual clock in units of ticks; the caller supplies the tick at
which each access happens.

Misses are classified into two buckets:

  cold/capacity  first touch of a block at this core, or a refetch after the
                 core's own LRU eviction
  invalidation   refetch of a block this core lost to a remote write, or a
                 fetch that has to take the block away from a remote dirty
                 owner (the ping-pong pattern)

Latency-only upgrade charges (a sole clean holder gaining write ownership)
pay miss_cost but are not counted as misses and move no block.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

GLOBAL_ARENA = -1

# event kinds in the transfer log
EV_COLD = "cold"
EV_CAPACITY = "capacity"
EV_INVALIDATION = "invalidation"
EV_QUEUE = "queue"


class MemoryFault(Exception):
    """Access to an address that was never allocated."""


class ConfigurationError(Exception):
    """Arena exhausted or invalid machine parameters."""


@dataclass(frozen=True)
class CostModel:
    hit_cost: int = 1
    miss_cost: int = 4
    steal_cost: int = 8
    sched_interval: int = 1

    def validate(self):
        if self.hit_cost < 1 or self.miss_cost < 1:
            raise ConfigurationError("all costs must be >= 1")
        if self.miss_cost < self.hit_cost:
            raise ConfigurationError("miss_cost must be >= hit_cost")
        if self.steal_cost < 1 or self.sched_interval < 1:
            raise ConfigurationError("steal_cost and sched_interval must be >= 1")


@dataclass
class CounterSet:
    """Per-run counters. Scheduler-side counters are filled in by the runtime."""

    p: int
    cold_capacity_misses: list = field(default_factory=list)
    invalidation_misses: list = field(default_factory=list)
    hits: list = field(default_factory=list)
    queue_delays: list = field(default_factory=list)
    idle_ticks: list = field(default_factory=list)
    idle_phase_wait: list = field(default_factory=list)
    idle_uppass_wait: list = field(default_factory=list)
    per_block_delay: dict = field(default_factory=dict)
    steals_per_priority: dict = field(default_factory=dict)
    pseudo_steals_per_priority: dict = field(default_factory=dict)
    attempts_per_priority: dict = field(default_factory=dict)
    usurpations: int = 0
    usurped_per_boundary: dict = field(default_factory=dict)
    sched_steps: int = 0
    phases: int = 0
    retry_phases: int = 0
    rounds: int = 0
    max_writes_per_address: int = 0

    def __post_init__(self):
        for name in ("cold_capacity_misses", "invalidation_misses", "hits",
                     "queue_delays", "idle_ticks", "idle_phase_wait",
                     "idle_uppass_wait"):
            if not getattr(self, name):
                setattr(self, name, [0] * self.p)

    @property
    def total_misses(self) -> int:
        return sum(self.cold_capacity_misses) + sum(self.invalidation_misses)

    @property
    def total_cold_capacity(self) -> int:
        return sum(self.cold_capacity_misses)

    @property
    def total_invalidation(self) -> int:
        return sum(self.invalidation_misses)

    @property
    def total_steals(self) -> int:
        return sum(self.steals_per_priority.values())

    @property
    def total_pseudo_steals(self) -> int:
        return sum(self.pseudo_steals_per_priority.values())

    @property
    def total_attempts(self) -> int:
        return sum(self.attempts_per_priority.values())

    @property
    def distinct_priorities(self) -> int:
        return self.rounds

    def as_flat_dict(self) -> dict:
        d = {
            "misses_total": self.total_misses,
            "cold_capacity_total": self.total_cold_capacity,
            "invalidation_total": self.total_invalidation,
            "hits_total": sum(self.hits),
            "queue_delay_total": sum(self.queue_delays),
            "idle_total": sum(self.idle_ticks),
            "idle_phase_wait_total": sum(self.idle_phase_wait),
            "idle_uppass_wait_total": sum(self.idle_uppass_wait),
            "steals_total": self.total_steals,
            "pseudo_steals_total": self.total_pseudo_steals,
            "attempts_total": self.total_attempts,
            "usurpations_total": self.usurpations,
            "max_usurped_per_boundary": max(self.usurped_per_boundary.values(), default=0),
            "sched_steps": self.sched_steps,
            "phases": self.phases,
            "retry_phases": self.retry_phases,
            "rounds": self.rounds,
            "max_writes_per_address": self.max_writes_per_address,
        }
        return d


class Machine:
    """Shared store plus p private LRU caches and a coherence directory.

    One Machine instance belongs to one simulation run and is advanced from a
    single thread of control. Addresses come from arena allocation only; any
    access outside allocated space faults.
    """

    def __init__(self, p, M, B, cost=None, global_words=1 << 20,
                 stack_words=1 << 18, dtype=np.int64, log_events=False):
        if M < B or B < 1 or M % B != 0:
            raise ConfigurationError("need M >= B and B | M")
        self.p = p
        self.M = M
        self.B = B
        self.cost = cost or CostModel()
        self.cost.validate()
        self.capacity_blocks = M // B

        def align(x):
            return ((x + B - 1) // B) * B

        self.global_size = align(global_words)
        self.stack_size = align(stack_words)
        total = self.global_size + p * self.stack_size
        self.words = np.zeros(total, dtype=dtype)
        self.write_counts = np.zeros(total, dtype=np.uint32)
        # arena id -> (base, limit, next_free); GLOBAL_ARENA or a core id
        self.arenas = {GLOBAL_ARENA: [0, self.global_size, 0]}
        for c in range(p):
            base = self.global_size + c * self.stack_size
            self.arenas[c] = [base, base + self.stack_size, base]

        # cache[c]: OrderedDict block -> dirty flag, LRU order oldest-first
        self.caches = [OrderedDict() for _ in range(p)]
        self.holders = {}        # block -> set of cores with a copy
        self.dirty_owner = {}    # block -> core holding the sole dirty copy
        self.remote_invalidated = [set() for _ in range(p)]
        self.ever_resident = [set() for _ in range(p)]

        self.clock = [0] * p
        self.counters = CounterSet(p=p)
        self.transfers = {}      # block -> total transfer count
        self.last_transfer = {}  # block -> (tick, core) of most recent transfer
        self.log_events = log_events
        self.events = []         # (tick, core, block, kind)
        self.max_writes_seen = 0

    # -- allocation ---------------------------------------------------------

    def alloc(self, core, nwords):
        """Claim a block-aligned range of ceil(nwords/B)*B words.

        core is a core id for that core's stack arena, or GLOBAL_ARENA.
        Ranges from different calls never share a block.
        """
        if nwords < 1:
            raise ConfigurationError("alloc needs nwords >= 1")
        arena = self.arenas[core]
        size = ((nwords + self.B - 1) // self.B) * self.B
        base = arena[2]
        if base + size > arena[1]:
            raise ConfigurationError(
                f"arena {core} exhausted: need {size} words at {base}, "
                f"limit {arena[1]} (configured arena too small)")
        arena[2] = base + size
        return base, base + size

    def allocated(self, addr) -> bool:
        if addr < 0:
            return False
        if addr < self.global_size:
            return addr < self.arenas[GLOBAL_ARENA][2]
        c = (addr - self.global_size) // self.stack_size
        return c < self.p and addr < self.arenas[c][2]

    def _check(self, addr):
        if not self.allocated(addr):
            raise MemoryFault(f"access to unallocated address {addr}")

    # -- uninstrumented access (setup and inspection) ------------------------

    def poke(self, addr, value):
        self.words[addr] = value

    def poke_range(self, lo, values):
        self.words[lo:lo + len(values)] = values

    def peek(self, addr):
        return self.words[addr]

    def peek_range(self, lo, hi):
        return self.words[lo:hi]

    # -- instrumented access --------------------------------------------------

    def _fetch(self, core, blk, tick, writing):
        """Bring blk into core's cache; returns latency. Classifies the miss."""
        cost = self.cost
        latency = cost.miss_cost
        holders = self.holders.get(blk)
        owner = self.dirty_owner.get(blk)

        # queuing: a transfer of the same block at the same tick by another core
        lt = self.last_transfer.get(blk)
        if lt is not None and lt[0] == tick and lt[1] != core:
            latency += cost.miss_cost
            self.counters.queue_delays[core] += 1
            if self.log_events:
                self.events.append((tick, core, blk, EV_QUEUE))

        inval = False
        if blk in self.remote_invalidated[core]:
            self.remote_invalidated[core].discard(blk)
            inval = True
        if owner is not None and owner != core:
            inval = True

        if writing:
            # take exclusive ownership: drop every other copy
            if holders:
                for h in list(holders):
                    if h == core:
                        continue
                    self.caches[h].pop(blk, None)
                    self.remote_invalidated[h].add(blk)
                holders.clear()
            self.dirty_owner.pop(blk, None)
        else:
            if owner is not None and owner != core:
                # downgrade the dirty copy to clean-shared
                self.caches[owner][blk] = False
                self.dirty_owner.pop(blk, None)

        # make room
        cache = self.caches[core]
        if len(cache) >= self.capacity_blocks:
            victim, victim_dirty = cache.popitem(last=False)
            hv = self.holders.get(victim)
            if hv is not None:
                hv.discard(core)
                if not hv:
                    del self.holders[victim]
            if victim_dirty:
                self.dirty_owner.pop(victim, None)
            # write-back folded into miss cost

        cache[blk] = writing
        self.holders.setdefault(blk, set()).add(core)
        if writing:
            self.dirty_owner[blk] = core

        if inval:
            self.counters.invalidation_misses[core] += 1
            kind = EV_INVALIDATION
        else:
            self.counters.cold_capacity_misses[core] += 1
            kind = EV_COLD if blk not in self.ever_resident[core] else EV_CAPACITY
        self.ever_resident[core].add(blk)
        self.transfers[blk] = self.transfers.get(blk, 0) + 1
        self.last_transfer[blk] = (tick, core)
        if self.log_events:
            self.events.append((tick, core, blk, kind))
        return latency

    def read(self, core, addr, tick=0):
        """Returns (value, latency in ticks)."""
        blk = addr // self.B
        cache = self.caches[core]
        if blk in cache:
            cache.move_to_end(blk)
            self.counters.hits[core] += 1
            return self.words[addr], self.cost.hit_cost
        self._check(addr)
        latency = self._fetch(core, blk, tick, writing=False)
        return self.words[addr], latency

    def write(self, core, addr, value, tick=0):
        """Returns latency in ticks. Invalidates every other cached copy."""
        blk = addr // self.B
        cache = self.caches[core]
        self.words[addr] = value
        self.write_counts[addr] += 1
        dirty = cache.get(blk)
        if dirty is not None:
            if dirty:
                cache.move_to_end(blk)
                self.counters.hits[core] += 1
                return self.cost.hit_cost
            holders = self.holders.get(blk, ())
            if len(holders) == 1:
                # sole clean holder: upgrade in place. Charged at miss cost per
                # the machine contract, but no block moves and no miss counted.
                cache[blk] = True
                cache.move_to_end(blk)
                self.dirty_owner[blk] = core
                return self.cost.miss_cost
            cache.pop(blk)
            hv = self.holders.get(blk)
            if hv is not None:
                hv.discard(core)
            return self._fetch(core, blk, tick, writing=True)
        self._check(addr)
        return self._fetch(core, blk, tick, writing=True)

    # -- batched access (same classification, one LRU op per block touch) ----

    def access_range(self, core, lo, n, writing, tick=0):
        """Charge a sequential touch of words [lo, lo+n); returns latency.

        Values are moved by the caller through peek/poke_range on the same
        span; this method only runs the cache protocol, block by block in
        ascending order, exactly as the per-word loop would.
        """
        if n <= 0:
            return 0
        self._check(lo)
        self._check(lo + n - 1)
        B = self.B
        cost = self.cost
        cache = self.caches[core]
        latency = 0
        blk = lo // B
        last_blk = (lo + n - 1) // B
        pos = lo
        while blk <= last_blk:
            span = min((blk + 1) * B, lo + n) - pos
            if blk in cache and (not writing or cache[blk]):
                cache.move_to_end(blk)
                self.counters.hits[core] += span
                latency += cost.hit_cost * span
            else:
                if writing and blk in cache:
                    holders = self.holders.get(blk, ())
                    if len(holders) == 1:
                        cache[blk] = True
                        cache.move_to_end(blk)
                        self.dirty_owner[blk] = core
                        latency += cost.miss_cost + cost.hit_cost * (span - 1)
                        self.counters.hits[core] += span - 1
                        pos += span
                        blk += 1
                        continue
                    cache.pop(blk)
                    hv = self.holders.get(blk)
                    if hv is not None:
                        hv.discard(core)
                latency += self._fetch(core, blk, tick, writing)
                latency += cost.hit_cost * (span - 1)
                self.counters.hits[core] += span - 1
            pos += span
            blk += 1
        if writing:
            self.write_counts[lo:lo + n] += 1
        return latency

    def reset_write_counts(self, lo, hi):
        """New variable lifetime for [lo, hi): stack frames reuse addresses.

        The expiring lifetime's write counts fold into the running maximum so
        the per-lifetime bound stays observable after the space is reused.
        """
        if hi <= lo:
            return
        wc = self.write_counts
        if hi - lo <= 8:
            m = max(wc[lo:hi].tolist())
        else:
            m = int(wc[lo:hi].max())
        if m > self.max_writes_seen:
            self.max_writes_seen = m
        wc[lo:hi] = 0

    # -- queries ---------------------------------------------------------------

    def block_delay(self, blk, interval=None) -> int:
        """Number of transfers of blk, optionally within [t0, t1] ticks."""
        if interval is None:
            return self.transfers.get(blk, 0)
        if not self.log_events:
            raise ConfigurationError("block_delay over an interval needs the event log")
        t0, t1 = interval
        return sum(1 for (t, c, b, k) in self.events
                   if b == blk and t0 <= t <= t1 and k != EV_QUEUE)

    def total_transfers(self) -> int:
        return sum(self.transfers.values())

    def check_coherence(self):
        """Single-writer / directory consistency; raises on violation."""
        for blk, owner in self.dirty_owner.items():
            holders = self.holders.get(blk, set())
            assert holders == {owner}, \
                f"dirty block {blk} held by {holders}, owner {owner}"
            assert self.caches[owner].get(blk) is True
        for blk, holders in self.holders.items():
            for h in holders:
                assert blk in self.caches[h], f"directory stale for block {blk}"
        for c in range(self.p):
            assert len(self.caches[c]) <= self.capacity_blocks
            for blk, dirty in self.caches[c].items():
                if dirty:
                    assert self.dirty_owner.get(blk) == c

    def finalize_counters(self):
        self.counters.max_writes_per_address = max(
            self.max_writes_seen, int(self.write_counts.max()))
        return self.counters


def write_event_csv(machine, path):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tick", "core", "block", "kind"])
        for row in machine.events:
            w.writerow(row)
