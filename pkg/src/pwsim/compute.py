"""Fork-join computation structures.

An algorithm is described as a tree of call templates. A call template is a
sequence of stages; a stage is either a balanced binary fork tree ("bp") whose
leaves run O(1)-access work, or a fanout ("fanout") whose balanced fork tree
distributes v parallel recursive calls. Templates carry only structure and
sizes; concrete runs bind addresses when a call instance starts.

Priorities are assigned by a pre-pass over the template: every stage owns a
contiguous descending band of integers, bands of sequenced stages are
disjoint and descending, and a node at depth i of a stage tree has priority
band_top - i. This gives strictly decreasing priorities along every path of
the computation DAG and equal priorities to equal-depth nodes of a
collection.

Execution stacks are simulated-memory regions. Every fork node pushes a
small frame (join counter, result slots, algorithm locals); padded mode
inserts an untouched gap of ceil(sqrt(|task|)) words before each frame.
Frames of a node and its non-stolen descendants sit contiguously on one
stack; a stolen task starts a fresh stack on the thief's arena.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .memsim import ConfigurationError

UNIT_COST = 1  # baseline ticks per executed work unit


class DescriptorError(ConfigurationError):
    """Structural parameters violate the balance conditions."""


@dataclass
class BPDescriptor:
    """Shape parameters of one balanced fork tree.

    Halving with ceil/floor keeps every level-i size in
    {floor(r/2^i), ceil(r/2^i)}, which c1=1/2 and c2=2 accommodate for
    arbitrary r down to single-element leaves.
    """

    alpha: float = 0.5
    c1: float = 0.5
    c2: float = 2.0
    declared_f: str = "const"      # 'const' | 'sqrt'
    declared_L: str = "const"      # 'const' | 'sqrt' | 'gap'
    padded: bool = False
    leaf_size: int = 1

    def validate(self):
        if not (0.5 <= self.alpha < 1.0):
            raise DescriptorError(f"alpha {self.alpha} not realizable")
        if not (self.c1 <= 1.0 <= self.c2):
            raise DescriptorError("need c1 <= 1 <= c2")
        if self.leaf_size < 1:
            raise DescriptorError("leaf_size must be >= 1")


@dataclass
class HBPDescriptor:
    """Recursive structure declaration for one algorithm."""

    hbp_type: int
    rounds: int                  # c successive recursive collections
    fanout: object               # v(n): callable size -> member count
    child_size: object           # s(n): callable size -> member size
    linear_space: bool = False
    base_size: int = 1

    def validate(self, n):
        if self.hbp_type >= 2 and n > self.base_size:
            v = self.fanout(n)
            s = self.child_size(n)
            if v < 1:
                raise DescriptorError("fanout must be >= 1")
            if s >= n:
                raise DescriptorError(
                    f"child size {s} not smaller than parent {n}: unbalanced")


# -- execution stacks -----------------------------------------------------------


class Stack:
    """A simulated-memory stack segment owned by one task kernel at a time."""

    __slots__ = ("machine", "core", "base", "limit", "top")

    def __init__(self, machine, core, nwords):
        self.machine = machine
        self.core = core
        self.base, self.limit = machine.alloc(core, nwords)
        self.top = self.base

    def push(self, nwords, pad=0):
        """Claim pad untouched words then nwords of locals; returns frame base."""
        addr = self.top + pad
        new_top = addr + nwords
        if new_top > self.limit:
            raise ConfigurationError(
                f"execution stack overflow on core {self.core} "
                f"(need {new_top - self.base} words, have {self.limit - self.base})")
        self.machine.reset_write_counts(self.top, new_top)
        self.top = new_top
        return addr

    def pop(self, to):
        assert self.base <= to <= self.top, "unbalanced stack pop"
        self.top = to

    def contains(self, addr):
        return self.base <= addr < self.limit


# frame word offsets
F_JC = 0
F_RES_L = 1
F_RES_R = 2


def frame_words(stage):
    return (3 if stage.carry else 1) + stage.frame_locals


def pad_words(size_words):
    return math.isqrt(size_words - 1) + 1 if size_words > 0 else 0


# -- stage work interface --------------------------------------------------------


class StageOps:
    """Work performed at the nodes of one fork-tree stage.

    Subclasses bind input/output addresses and implement the per-node
    O(1)-access callbacks. Node spans are element ranges [lo, hi) in the
    stage's own index space.
    """

    carry = False          # leaves/joins produce a value stored in parent frames
    frame_locals = 0       # extra frame words beyond protocol slots
    words_per_elem = 1     # |task| in words = span elements * this

    def head(self, ctx, node):
        """Down-pass work at a fork node, after its frame exists."""

    def leaf(self, ctx, node):
        """Work at a leaf; returns the upward value when carry is set."""
        raise NotImplementedError

    def join(self, ctx, node, vl=None, vr=None):
        """Up-pass work at a fork node; returns upward value when carry."""
        return None


# -- task nodes and deques -------------------------------------------------------


class TaskNode:
    __slots__ = (
        "uid", "stage", "lo", "hi", "depth", "priority", "parent", "which",
        "frame", "frame_restore", "home_stack", "kernel_core", "join_pending",
        "call_run", "stolen", "start_tick", "blocks", "wblocks",
    )

    def __init__(self, uid, stage, lo, hi, depth, priority, parent, which):
        self.uid = uid
        self.stage = stage
        self.lo = lo
        self.hi = hi
        self.depth = depth
        self.priority = priority
        self.parent = parent
        self.which = which          # 'L', 'R', or 'S' for a stage root
        self.frame = None           # frame base address once pushed
        self.frame_restore = None
        self.home_stack = None
        self.kernel_core = None
        self.join_pending = 0
        self.call_run = None        # set on stage roots
        self.stolen = False
        self.start_tick = None
        self.blocks = None
        self.wblocks = None

    @property
    def span(self):
        return self.hi - self.lo

    @property
    def size(self):
        return self.span * self.stage.words_per_elem

    def is_leaf(self):
        return self.span <= self.stage.leaf_size

    def split(self):
        return self.lo + (self.span + 1) // 2


class TaskDeque:
    """Owner pushes and pops at the bottom; thieves take the top."""

    __slots__ = ("owner", "items")

    def __init__(self, owner):
        self.owner = owner
        self.items = []

    def push_bottom(self, node):
        if self.items:
            assert node.priority < self.items[-1].priority, \
                "deque priority order violated by fork"
        self.items.append(node)

    def pop_bottom(self):
        return self.items.pop() if self.items else None

    def steal_top(self):
        return self.items.pop(0) if self.items else None

    def head(self):
        return self.items[0] if self.items else None

    def __len__(self):
        return len(self.items)

    def check_monotone(self):
        pr = [t.priority for t in self.items]
        assert all(a > b for a, b in zip(pr, pr[1:])), \
            f"deque priorities not strictly decreasing: {pr}"


# -- templates and priority bands -------------------------------------------------


def tree_depth(elems, leaf_size):
    """Fork levels needed to reduce a span to leaf_size by halving."""
    d = 0
    while elems > leaf_size:
        elems = (elems + 1) // 2
        d += 1
    return d


@dataclass
class StageSpec:
    """One structural stage of a call template."""

    kind: str                    # 'bp' | 'fanout'
    elems: int                   # index-space size of the stage tree
    build: object = None         # bp: (run, call_run) -> StageOps
    member_template: object = None   # fanout: CallTemplate of every member
    member_argfn: object = None      # fanout: (call_run, i) -> member args
    descriptor: BPDescriptor = field(default_factory=BPDescriptor)
    name: str = ""
    wpe: int = 1                 # words per index element, for |task| and pads
    levels: int = 0              # priority levels this stage consumes
    band_offset: int = 0         # offset of the band top below the call base

    @property
    def members_range(self):
        return range(self.elems)

    def depth(self):
        return tree_depth(self.elems, self.descriptor.leaf_size)


class CallTemplate:
    """Static structure of one recursive call at one concrete size."""

    def __init__(self, name, size, stages, scratch_words=0, linear_space=False):
        self.name = name
        self.size = size
        self.stages = stages
        self.scratch_words = scratch_words
        self.linear_space = linear_space
        self._need = None
        off = 0
        for st in stages:
            st.band_offset = off
            if st.kind == "bp":
                st.levels = st.depth() + 1
            else:
                fd = tree_depth(st.elems, 1)
                st.levels = fd + 1 + st.member_template.total_levels
            off += st.levels
        self.total_levels = off

    def stack_need(self):
        """Worst-case words a kernel of this call can push on one stack.

        Sequential bound: stages of a call reuse the same region one after
        another; the call's scratch frame persists across them.
        """
        if self._need is not None:
            return self._need
        worst_stage = 0
        for st in self.stages:
            worst_stage = max(worst_stage, stage_stack_need(st))
        self._need = self.scratch_words + worst_stage
        return self._need


FRAME_RESERVE = 8  # conservative per-frame words for stack sizing


def path_frames_need(elems, desc: BPDescriptor, wpe=1):
    """Words of frames plus pads along one root-to-leaf path."""
    n = 0
    r = elems
    while r > desc.leaf_size:
        pad = pad_words(r * wpe) if desc.padded else 0
        n += FRAME_RESERVE + pad
        r = (r + 1) // 2
    return n


def stage_stack_need(st: StageSpec):
    if st.kind == "bp":
        return path_frames_need(st.elems, st.descriptor, st.wpe)
    member_need = st.member_template.stack_need()
    return path_frames_need(st.elems, st.descriptor, st.wpe) + member_need


# -- spec-surface helpers ---------------------------------------------------------


def build_bp_shape(n, leaf_size=1):
    """Sizes per level of the halving tree over n elements, for inspection."""
    levels = [[n]]
    while max(levels[-1]) > leaf_size:
        nxt = []
        for s in levels[-1]:
            if s > leaf_size:
                nxt.extend([(s + 1) // 2, s // 2])
            else:
                nxt.append(s)
        levels.append(nxt)
    return levels


def check_balance(n, desc: BPDescriptor):
    """Assert the balance condition over the generated shape."""
    desc.validate()
    levels = build_bp_shape(n, desc.leaf_size)
    for i, sizes in enumerate(levels):
        lo_bound = desc.c1 * (desc.alpha ** i) * n
        hi_bound = desc.c2 * (desc.alpha ** i) * n
        for s in sizes:
            if s > desc.leaf_size and not (lo_bound <= s <= hi_bound):
                raise DescriptorError(
                    f"level {i} task size {s} outside "
                    f"[{lo_bound:.2f}, {hi_bound:.2f}]")
    return levels


def assign_priorities(template: CallTemplate, base=None):
    """Labels every (stage, depth) position; returns {(stage_i, depth): prio}.

    base defaults to total_levels - 1 so the lowest leaf priority is >= 0.
    """
    if base is None:
        base = template.total_levels - 1
    out = {}
    for i, st in enumerate(template.stages):
        top = base - st.band_offset
        if st.kind == "bp":
            for d in range(st.levels):
                out[(i, d)] = top - d
        else:
            fd = tree_depth(st.elems, 1)
            for d in range(fd + 1):
                out[(i, d)] = top - d
    return out
