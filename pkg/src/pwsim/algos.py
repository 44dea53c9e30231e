"""The algorithm suite: balanced fork-join plans over simulated memory.

Every algorithm is packaged as

  * a machine-free call template (structure, sizes, priority bands),
  * a setup step that allocates arrays in the global arena, generates the
    seeded input, and returns the root args, and
  * a plain-numpy oracle used to check the simulated output.

Matrices use the bit-interleaved (BI) layout unless stated otherwise, so
every recursive quadrant is one contiguous address range. Complex values
occupy two consecutive words (re, im).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layouts
from .compute import BPDescriptor, CallTemplate, StageOps, StageSpec
from .layouts import deinterleave_bits, ilog2, interleave_bits, is_pow2
from .memsim import ConfigurationError

MM_BASE = 8        # matrix side at or below which multiplication goes direct
FFT_BASE = 32      # transform length at or below which the DFT goes direct
BIFFT_BASE = 4     # matrix side at or below which the tiled conversion is direct
FFT_LEAF = 16      # elements per leaf in the data-movement passes of fft

EVEN_MASK = 0x5555555555555555
ODD_MASK = 0xAAAAAAAAAAAAAAAA


class AlgorithmError(ConfigurationError):
    pass


@dataclass
class MatrixHandle:
    n: int
    layout: str            # 'rm' | 'bi' | 'gapped'
    base: int
    row_width: int = 0     # gapped only
    col_table: list = None  # gapped only

    def words(self):
        if self.layout == "gapped":
            return self.n * self.row_width
        return self.n * self.n


@dataclass
class AlgorithmSpec:
    """Declared structural parameters of one suite algorithm."""

    name: str
    hbp_type: int
    f_tag: str             # 'const' | 'sqrt'
    L_tag: str             # 'const' | 'sqrt' | 'gap'
    write_budget: int = 4
    input_is_matrix: bool = False
    work: object = None          # n -> float
    span: object = None          # n -> float
    seq_q: object = None         # (n, M, B) -> float


SPECS = {
    "msum": AlgorithmSpec("msum", 1, "const", "const",
                          work=lambda n: n, span=lambda n: math.log2(n) + 1,
                          seq_q=lambda n, M, B: n / B),
    "prefix_sums": AlgorithmSpec("prefix_sums", 1, "const", "const",
                                 work=lambda n: n,
                                 span=lambda n: math.log2(n) + 1,
                                 seq_q=lambda n, M, B: n / B),
    "matrix_add": AlgorithmSpec("matrix_add", 1, "const", "const", input_is_matrix=True,
                                work=lambda n: n * n,
                                span=lambda n: 2 * math.log2(n) + 1,
                                seq_q=lambda n, M, B: n * n / B),
    "mt_bi": AlgorithmSpec("mt_bi", 1, "const", "const", input_is_matrix=True,
                           work=lambda n: n * n,
                           span=lambda n: 2 * math.log2(n) + 1,
                           seq_q=lambda n, M, B: n * n / B),
    "rm_to_bi": AlgorithmSpec("rm_to_bi", 1, "sqrt", "const", input_is_matrix=True,
                              work=lambda n: n * n,
                              span=lambda n: 2 * math.log2(n) + 1,
                              seq_q=lambda n, M, B: n * n / B),
    "bi_to_rm_direct": AlgorithmSpec("bi_to_rm_direct", 1, "sqrt", "sqrt", input_is_matrix=True,
                                     work=lambda n: n * n,
                                     span=lambda n: 2 * math.log2(n) + 1,
                                     seq_q=lambda n, M, B: n * n / B),
    "bi_to_rm_gapped": AlgorithmSpec("bi_to_rm_gapped", 1, "sqrt", "gap", input_is_matrix=True,
                                     work=lambda n: n * n,
                                     span=lambda n: 2 * math.log2(n) + 1,
                                     seq_q=lambda n, M, B: n * n / B),
    "bi_to_rm_fft_variant": AlgorithmSpec(
        "bi_to_rm_fft_variant", 2, "sqrt", "const", input_is_matrix=True,
        work=lambda n: n * n * (1 + math.log2(max(2, math.log2(max(4, n))))),
        span=lambda n: 2 * math.log2(n) + 1,
        seq_q=lambda n, M, B: (n * n / B) * max(1, math.log(n * n) / math.log(M))),
    "strassen": AlgorithmSpec("strassen", 2, "const", "const", input_is_matrix=True,
                              work=lambda n: n ** math.log2(7),
                              span=lambda n: math.log2(n) ** 2 + 1,
                              seq_q=lambda n, M, B:
                              n ** math.log2(7) / (B * M ** (math.log2(7) / 2 - 1))),
    "depth_n_mm": AlgorithmSpec("depth_n_mm", 2, "const", "const", input_is_matrix=True,
                                work=lambda n: n ** 3,
                                span=lambda n: n,
                                seq_q=lambda n, M, B: n ** 3 / (B * math.sqrt(M))),
    "fft": AlgorithmSpec("fft", 2, "sqrt", "const",
                         work=lambda n: n * math.log2(n),
                         span=lambda n: math.log2(n) * math.log2(max(2, math.log2(n))),
                         seq_q=lambda n, M, B:
                         (n / B) * max(1, math.log(n) / math.log(M))),
}


def bi_transpose_index(off: int) -> int:
    """Transpose inside BI: swap the row/col bit of every interleaved pair."""
    return ((off & EVEN_MASK) << 1) | ((off & ODD_MASK) >> 1)


def _bp(elems, build, name="", leaf_size=1, padded=False, wpe=1,
        declared_f="const", declared_L="const"):
    return StageSpec(
        kind="bp", elems=elems, build=build, name=name, wpe=wpe,
        descriptor=BPDescriptor(leaf_size=leaf_size, padded=padded,
                                declared_f=declared_f, declared_L=declared_L))


def _fanout(v, member_template, argfn, name="", padded=False, wpe=1):
    return StageSpec(
        kind="fanout", elems=v, member_template=member_template,
        member_argfn=argfn, name=name, wpe=wpe,
        descriptor=BPDescriptor(padded=padded))


# -- scans ---------------------------------------------------------------------


class MSumOps(StageOps):
    carry = True

    def __init__(self, a, out):
        self.a = a
        self.out = out

    def leaf(self, ctx, node):
        return ctx.read(self.a + node.lo)

    def join(self, ctx, node, vl, vr):
        return vl + vr

    def root_out(self, ctx, v):
        ctx.write(self.out, v)


def msum_template(n, padded=False):
    def build(run, call):
        return MSumOps(call.args["a"], call.args["out"])
    return CallTemplate("msum", n, [_bp(n, build, "sum", padded=padded)])


class PSUpOps(StageOps):
    """Up-sweep: every subtree sum lands at its node's in-order slot."""

    carry = True

    def __init__(self, a, sums):
        self.a = a
        self.sums = sums

    def leaf(self, ctx, node):
        v = ctx.read(self.a + node.lo)
        ctx.write(self.sums + 2 * node.lo, v)
        return v

    def join(self, ctx, node, vl, vr):
        s = vl + vr
        ctx.write(self.sums + 2 * node.split() - 1, s)
        return s


def _sibling_sum_slot(parent):
    """In-order slot of the left child of parent, in the same tree."""
    lo, mid = parent.lo, parent.split()
    if mid - lo == 1:
        return 2 * lo
    return 2 * (lo + (mid - lo + 1) // 2) - 1


class PSDownOps(StageOps):
    """Down-sweep: frames carry the prefix of everything left of the span."""

    carry = False
    frame_locals = 1  # carry slot at frame + 1

    def __init__(self, a, sums, out):
        self.a = a
        self.sums = sums
        self.out = out

    def _incoming(self, ctx, node):
        p = node.parent
        if p is None:
            return 0
        c = ctx.read(p.frame + 1)
        if node.which == "R":
            c += ctx.read(self.sums + _sibling_sum_slot(p))
        return c

    def head(self, ctx, node):
        ctx.write(node.frame + 1, self._incoming(ctx, node))

    def leaf(self, ctx, node):
        c = self._incoming(ctx, node)
        v = ctx.read(self.a + node.lo)
        ctx.write(self.out + node.lo, c + v)
        return None


def prefix_sums_template(n, padded=False):
    def build_up(run, call):
        return PSUpOps(call.args["a"], call.args["sums"])

    def build_down(run, call):
        return PSDownOps(call.args["a"], call.args["sums"], call.args["out"])

    return CallTemplate("prefix_sums", n, [
        _bp(n, build_up, "up", padded=padded),
        _bp(n, build_down, "down", padded=padded),
    ])


# -- matrix scans and transposition ----------------------------------------------


class MAOps(StageOps):
    def __init__(self, a, b, c):
        self.a = a
        self.b = b
        self.c = c

    def leaf(self, ctx, node):
        va = ctx.read(self.a + node.lo)
        vb = ctx.read(self.b + node.lo)
        ctx.write(self.c + node.lo, va + vb)


def matrix_add_template(n, padded=False):
    def build(run, call):
        return MAOps(call.args["a"], call.args["b"], call.args["c"])
    return CallTemplate("matrix_add", n * n,
                        [_bp(n * n, build, "add", padded=padded)])


class MTOps(StageOps):
    """Out-of-place transpose, both matrices in BI."""

    def __init__(self, src, dst):
        self.src = src
        self.dst = dst

    def leaf(self, ctx, node):
        off = node.lo
        v = ctx.read(self.src + bi_transpose_index(off))
        ctx.write(self.dst + off, v)


def mt_bi_template(n, padded=False):
    def build(run, call):
        return MTOps(call.args["src"], call.args["dst"])
    return CallTemplate("mt_bi", n * n,
                        [_bp(n * n, build, "mt", padded=padded)])


class RMtoBIOps(StageOps):
    def __init__(self, src, dst, n):
        self.src = src
        self.dst = dst
        self.n = n
        self.bits = ilog2(n)

    def leaf(self, ctx, node):
        r, c = deinterleave_bits(node.lo, self.bits)
        v = ctx.read(self.src + r * self.n + c)
        ctx.write(self.dst + node.lo, v)


def rm_to_bi_template(n, padded=False):
    def build(run, call):
        return RMtoBIOps(call.args["src"], call.args["dst"], n)
    return CallTemplate("rm_to_bi", n * n,
                        [_bp(n * n, build, "r2b", padded=padded,
                             declared_f="sqrt")])


class BItoRMOps(StageOps):
    def __init__(self, src, dst, n):
        self.src = src
        self.dst = dst
        self.n = n
        self.bits = ilog2(n)

    def leaf(self, ctx, node):
        v = ctx.read(self.src + node.lo)
        r, c = deinterleave_bits(node.lo, self.bits)
        ctx.write(self.dst + r * self.n + c, v)


def bi_to_rm_direct_template(n, padded=False):
    def build(run, call):
        return BItoRMOps(call.args["src"], call.args["dst"], n)
    return CallTemplate("bi_to_rm_direct", n * n,
                        [_bp(n * n, build, "b2r", padded=padded,
                             declared_f="sqrt", declared_L="sqrt")])


class BItoGapOps(StageOps):
    def __init__(self, src, gap_base, n, row_width, col_table):
        self.src = src
        self.gap = gap_base
        self.n = n
        self.bits = ilog2(n)
        self.width = row_width
        self.cols = col_table

    def leaf(self, ctx, node):
        v = ctx.read(self.src + node.lo)
        r, c = deinterleave_bits(node.lo, self.bits)
        ctx.write(self.gap + r * self.width + self.cols[c], v)


class GapCompressOps(StageOps):
    def __init__(self, gap_base, dst, n, row_width, col_table):
        self.gap = gap_base
        self.dst = dst
        self.n = n
        self.width = row_width
        self.cols = col_table

    def leaf(self, ctx, node):
        r, c = divmod(node.lo, self.n)
        v = ctx.read(self.gap + r * self.width + self.cols[c])
        ctx.write(self.dst + node.lo, v)


def bi_to_rm_gapped_template(n, padded=False):
    width = layouts.gapped_row_width(n)
    cols = layouts.gapped_col_table(n)

    def build_scatter(run, call):
        return BItoGapOps(call.args["src"], call.args["gap"], n, width, cols)

    def build_compress(run, call):
        return GapCompressOps(call.args["gap"], call.args["dst"], n, width, cols)

    return CallTemplate("bi_to_rm_gapped", n * n, [
        _bp(n * n, build_scatter, "scatter", padded=padded,
            declared_f="sqrt", declared_L="gap"),
        _bp(n * n, build_compress, "compress", padded=padded),
    ])


# -- tiled BI-to-RM conversion (recursive variant) ---------------------------------


class TiledCopyOps(StageOps):
    """Copy pass: reads tile-local RM scratch in global RM target order."""

    def __init__(self, scratch, dst, side, sub):
        self.scratch = scratch
        self.dst = dst
        self.side = side
        self.sub = sub
        self.tbits = ilog2(side // sub)

    def leaf(self, ctx, node):
        j = node.lo
        R, C = divmod(j, self.side)
        t = interleave_bits(R // self.sub, C // self.sub, self.tbits)
        local = (R % self.sub) * self.sub + (C % self.sub)
        v = ctx.read(self.scratch + t * self.sub * self.sub + local)
        ctx.write(self.dst + j, v)


class DirectTileOps(StageOps):
    """Base case: one small BI tile rewritten as local RM."""

    def __init__(self, src, dst, side):
        self.src = src
        self.dst = dst
        self.side = side
        self.perm = bi_perm(side)

    def leaf(self, ctx, node):
        m = self.side * self.side
        vals = np.array(ctx.read_range(self.src, m), copy=True)
        out = vals[self.perm]
        ctx.write_range(self.dst, out)


_BI_PERM_CACHE = {}


def bi_perm(n):
    """(row-major index) -> BI index permutation for an n x n matrix."""
    if n not in _BI_PERM_CACHE:
        _BI_PERM_CACHE[n] = np.array(layouts.bi_index_table(n), dtype=np.int64)
    return _BI_PERM_CACHE[n]


_BIFFT_CACHE = {}


def bi_to_rm_fft_template(side, padded=False):
    key = (side, padded)
    if key in _BIFFT_CACHE:
        return _BIFFT_CACHE[key]
    m = side * side
    if side <= BIFFT_BASE:
        def build(run, call):
            return DirectTileOps(call.args["src"], call.args["dst"], side)
        t = CallTemplate("bi_to_rm_fft_variant", m,
                         [_bp(1, build, "tile", padded=padded, wpe=m)])
        _BIFFT_CACHE[key] = t
        return t
    sub = 1 << (ilog2(side) // 2)
    if sub * sub != side:
        raise AlgorithmError(
            f"tiled conversion needs a square tile grid; side {side} "
            f"is not a power of 4")
    tiles = m // (sub * sub)
    member = bi_to_rm_fft_template(sub, padded)

    def argfn(call, i):
        a = call.args
        q = sub * sub
        return {"src": a["src"] + i * q, "dst": call.scratch_base + i * q}

    def build_copy(run, call):
        return TiledCopyOps(call.scratch_base, call.args["dst"], side, sub)

    t = CallTemplate("bi_to_rm_fft_variant", m, [
        _fanout(tiles, member, argfn, "tiles", padded=padded, wpe=sub * sub),
        _bp(m, build_copy, "copy", padded=padded, declared_f="sqrt"),
    ], scratch_words=m, linear_space=True)
    _BIFFT_CACHE[key] = t
    return t


# -- matrix multiplication ----------------------------------------------------------


class DirectMMOps(StageOps):
    """Base case: whole product of one small BI tile pair, via gathered RM."""

    def __init__(self, a, b, c, n):
        self.a = a
        self.b = b
        self.c = c
        self.n = n
        self.perm = bi_perm(n)

    def leaf(self, ctx, node):
        n = self.n
        m = n * n
        va = np.array(ctx.read_range(self.a, m), copy=True)[self.perm].reshape(n, n)
        vb = np.array(ctx.read_range(self.b, m), copy=True)[self.perm].reshape(n, n)
        prod = (va @ vb).reshape(-1)
        out = np.empty(m, dtype=np.int64)
        out[self.perm] = prod
        ctx.write_range(self.c, out)


# the seven product operand selectors: (left operand, right operand)
# quadrant codes: 0..3 are A11,A12,A21,A22 / B11,B12,B21,B22; 4.. are temps
_STRASSEN_SUMS = [
    ("A", 0, "A", 3, 1),   # T0 = A11 + A22
    ("B", 0, "B", 3, 1),   # T1 = B11 + B22
    ("A", 2, "A", 3, 1),   # T2 = A21 + A22
    ("B", 1, "B", 3, -1),  # T3 = B12 - B22
    ("B", 2, "B", 0, -1),  # T4 = B21 - B11
    ("A", 0, "A", 1, 1),   # T5 = A11 + A12
    ("A", 2, "A", 0, -1),  # T6 = A21 - A11
    ("B", 0, "B", 1, 1),   # T7 = B11 + B12
    ("A", 1, "A", 3, -1),  # T8 = A12 - A22
    ("B", 2, "B", 3, 1),   # T9 = B21 + B22
]

# product i = left x right; operands are ('T', k) or ('A'/'B', quadrant)
_STRASSEN_PRODUCTS = [
    (("T", 0), ("T", 1)),
    (("T", 2), ("B", 0)),
    (("A", 0), ("T", 3)),
    (("A", 3), ("T", 4)),
    (("T", 5), ("B", 3)),
    (("T", 6), ("T", 7)),
    (("T", 8), ("T", 9)),
]

# C quadrant = sum of signed products (1-based product ids)
_STRASSEN_COMBINE = [
    [(1, 1), (4, 1), (5, -1), (7, 1)],   # C11
    [(3, 1), (5, 1)],                    # C12
    [(2, 1), (4, 1)],                    # C21
    [(1, 1), (2, -1), (3, 1), (6, 1)],   # C22
]


class StrassenSumOps(StageOps):
    def __init__(self, a, b, scratch, q):
        self.a = a
        self.b = b
        self.scratch = scratch
        self.q = q

    def leaf(self, ctx, node):
        q = self.q
        t, o = divmod(node.lo, q)
        m1, q1, m2, q2, sign = _STRASSEN_SUMS[t]
        b1 = (self.a if m1 == "A" else self.b) + q1 * q
        b2 = (self.a if m2 == "A" else self.b) + q2 * q
        v = ctx.read(b1 + o) + sign * ctx.read(b2 + o)
        ctx.write(self.scratch + t * q + o, v)


class StrassenCombineOps(StageOps):
    def __init__(self, c, scratch, q):
        self.c = c
        self.scratch = scratch
        self.q = q

    def leaf(self, ctx, node):
        q = self.q
        quad, o = divmod(node.lo, q)
        prod_base = self.scratch + 10 * q
        v = 0
        for pid, sign in _STRASSEN_COMBINE[quad]:
            v += sign * ctx.read(prod_base + (pid - 1) * q + o)
        ctx.write(self.c + quad * q + o, v)


_STRASSEN_CACHE = {}


def strassen_template(n, padded=False):
    key = (n, padded)
    if key in _STRASSEN_CACHE:
        return _STRASSEN_CACHE[key]
    m = n * n
    if n <= MM_BASE:
        def build(run, call):
            return DirectMMOps(call.args["a"], call.args["b"],
                               call.args["c"], n)
        t = CallTemplate("strassen", m, [_bp(1, build, "mmbase", padded=padded,
                                             wpe=m)])
        _STRASSEN_CACHE[key] = t
        return t
    q = m // 4
    member = strassen_template(n // 2, padded)

    def argfn(call, i):
        a = call.args
        sc = call.scratch_base
        left, right = _STRASSEN_PRODUCTS[i]
        def side(op):
            kind, idx = op
            if kind == "T":
                return sc + idx * q
            return (a["a"] if kind == "A" else a["b"]) + idx * q
        return {"a": side(left), "b": side(right),
                "c": sc + 10 * q + i * q}

    def build_sums(run, call):
        return StrassenSumOps(call.args["a"], call.args["b"],
                              call.scratch_base, q)

    def build_combine(run, call):
        return StrassenCombineOps(call.args["c"], call.scratch_base, q)

    t = CallTemplate("strassen", m, [
        _bp(10 * q, build_sums, "sums", padded=padded),
        _fanout(7, member, argfn, "products", padded=padded, wpe=q),
        _bp(4 * q, build_combine, "combine", padded=padded),
    ], scratch_words=17 * q, linear_space=True)
    _STRASSEN_CACHE[key] = t
    return t


# round 1 products: (A quadrant, B quadrant); round 2 likewise
_DNMM_ROUND1 = [(0, 0), (0, 1), (2, 0), (2, 1)]   # A11B11 A11B12 A21B11 A21B12
_DNMM_ROUND2 = [(1, 2), (1, 3), (3, 2), (3, 3)]   # A12B21 A12B22 A22B21 A22B22


class DnmmCombineOps(StageOps):
    def __init__(self, c, scratch, q):
        self.c = c
        self.scratch = scratch
        self.q = q

    def leaf(self, ctx, node):
        q = self.q
        quad, o = divmod(node.lo, q)
        v = ctx.read(self.scratch + quad * q + o) \
            + ctx.read(self.scratch + (4 + quad) * q + o)
        ctx.write(self.c + quad * q + o, v)


_DNMM_CACHE = {}


def depth_n_mm_template(n, padded=False):
    key = (n, padded)
    if key in _DNMM_CACHE:
        return _DNMM_CACHE[key]
    m = n * n
    if n <= MM_BASE:
        def build(run, call):
            return DirectMMOps(call.args["a"], call.args["b"],
                               call.args["c"], n)
        t = CallTemplate("depth_n_mm", m, [_bp(1, build, "mmbase",
                                               padded=padded, wpe=m)])
        _DNMM_CACHE[key] = t
        return t
    q = m // 4
    member = depth_n_mm_template(n // 2, padded)

    def round_argfn(pairs, round_off):
        def argfn(call, i):
            a = call.args
            aq, bq = pairs[i]
            return {"a": a["a"] + aq * q, "b": a["b"] + bq * q,
                    "c": call.scratch_base + (round_off + i) * q}
        return argfn

    def build_combine(run, call):
        return DnmmCombineOps(call.args["c"], call.scratch_base, q)

    t = CallTemplate("depth_n_mm", m, [
        _fanout(4, member, round_argfn(_DNMM_ROUND1, 0), "round1",
                padded=padded, wpe=q),
        _fanout(4, member, round_argfn(_DNMM_ROUND2, 4), "round2",
                padded=padded, wpe=q),
        _bp(4 * q, build_combine, "combine", padded=padded),
    ], scratch_words=8 * q, linear_space=True)
    _DNMM_CACHE[key] = t
    return t


# -- fft -----------------------------------------------------------------------------


def fft_split(n):
    lg = ilog2(n)
    n1 = 1 << ((lg + 1) // 2)
    return n1, n // n1


class DirectDFTOps(StageOps):
    """Base case: full small DFT through a gathered coefficient table."""

    words_per_elem = 2

    def __init__(self, src, dst, tw, n):
        self.src = src
        self.dst = dst
        self.tw = tw
        self.n = n

    def leaf(self, ctx, node):
        n = self.n
        vals = np.array(ctx.read_range(self.src, 2 * n), copy=True)
        tv = np.array(ctx.read_range(self.tw, 2 * n), copy=True)
        x = vals[0::2] + 1j * vals[1::2]
        w = tv[0::2] + 1j * tv[1::2]
        idx = (np.outer(np.arange(n), np.arange(n)) % n)
        y = (w[idx] * x[None, :]).sum(axis=1)
        out = np.empty(2 * n)
        out[0::2] = y.real
        out[1::2] = y.imag
        ctx.write_range(self.dst, out)


class GatherPairOps(StageOps):
    """Data-movement pass: scattered pair reads, contiguous pair writes."""

    words_per_elem = 2

    def __init__(self, src, dst, src_index):
        self.src = src
        self.dst = dst
        self.src_index = src_index

    def leaf(self, ctx, node):
        span = node.span
        buf = np.empty(2 * span)
        for k in range(span):
            e = node.lo + k
            pair = ctx.read_range(self.src + 2 * self.src_index(e), 2)
            buf[2 * k] = pair[0]
            buf[2 * k + 1] = pair[1]
        ctx.write_range(self.dst + 2 * node.lo, buf)


class TwiddleOps(StageOps):
    """In-place scale of S2[j2, k1] by the root-of-unity power j2*k1."""

    words_per_elem = 2

    def __init__(self, buf, tw, n1):
        self.buf = buf
        self.tw = tw
        self.n1 = n1

    def leaf(self, ctx, node):
        span = node.span
        vals = np.array(ctx.read_range(self.buf + 2 * node.lo, 2 * span),
                        copy=True)
        x = vals[0::2] + 1j * vals[1::2]
        for k in range(span):
            e = node.lo + k
            j2, k1 = divmod(e, self.n1)
            tpair = ctx.read_range(self.tw + 2 * (j2 * k1), 2)
            x[k] *= complex(tpair[0], tpair[1])
        out = np.empty(2 * span)
        out[0::2] = x.real
        out[1::2] = x.imag
        ctx.write_range(self.buf + 2 * node.lo, out)


_FFT_CACHE = {}


def fft_template(n, padded=False):
    key = (n, padded)
    if key in _FFT_CACHE:
        return _FFT_CACHE[key]
    if not is_pow2(n):
        raise AlgorithmError(f"fft length {n} is not a power of two")
    if n <= FFT_BASE:
        def build(run, call):
            return DirectDFTOps(call.args["src"], call.args["dst"],
                                call.args["tw"][n], n)
        t = CallTemplate("fft", 2 * n, [_bp(1, build, "dft", padded=padded,
                                            wpe=2 * n)])
        _FFT_CACHE[key] = t
        return t

    n1, n2 = fft_split(n)
    memb1 = fft_template(n1, padded)
    memb2 = fft_template(n2, padded)

    def build_t1(run, call):
        a = call.args
        # S1[j2, j1] = x[j1 * n2 + j2]
        return GatherPairOps(a["src"], call.scratch_base,
                             lambda e: (e % n1) * n2 + e // n1)

    def argfn1(call, i):
        s1 = call.scratch_base
        s2 = call.scratch_base + 2 * n
        return {"src": s1 + 2 * i * n1, "dst": s2 + 2 * i * n1,
                "tw": call.args["tw"]}

    def build_tw(run, call):
        return TwiddleOps(call.scratch_base + 2 * n, call.args["tw"][n], n1)

    def build_t2(run, call):
        # S1[k1, j2] = S2[j2, k1]
        s1 = call.scratch_base
        s2 = call.scratch_base + 2 * n
        return GatherPairOps(s2, s1,
                             lambda e: (e % n2) * n1 + e // n2)

    def argfn2(call, i):
        s1 = call.scratch_base
        s2 = call.scratch_base + 2 * n
        return {"src": s1 + 2 * i * n2, "dst": s2 + 2 * i * n2,
                "tw": call.args["tw"]}

    def build_t3(run, call):
        # dst[k2 * n1 + k1] = S2[k1 * n2 + k2]
        s2 = call.scratch_base + 2 * n
        return GatherPairOps(s2, call.args["dst"],
                             lambda e: (e % n1) * n2 + e // n1)

    leaf = FFT_LEAF
    t = CallTemplate("fft", 2 * n, [
        _bp(n, build_t1, "t1", leaf_size=leaf, padded=padded, wpe=2,
            declared_f="sqrt"),
        _fanout(n2, memb1, argfn1, "rows", padded=padded, wpe=2 * n1),
        _bp(n, build_tw, "twiddle", leaf_size=leaf, padded=padded, wpe=2),
        _bp(n, build_t2, "t2", leaf_size=leaf, padded=padded, wpe=2,
            declared_f="sqrt"),
        _fanout(n1, memb2, argfn2, "cols", padded=padded, wpe=2 * n2),
        _bp(n, build_t3, "t3", leaf_size=leaf, padded=padded, wpe=2,
            declared_f="sqrt"),
    ], scratch_words=4 * n, linear_space=True)
    _FFT_CACHE[key] = t
    return t


def fft_table_sizes(n):
    """Distinct transform lengths appearing in the recursion, root included."""
    out = set()
    def walk(m):
        out.add(m)
        if m > FFT_BASE:
            a, b = fft_split(m)
            walk(a)
            walk(b)
    walk(n)
    return sorted(out)


# -- setup, oracles, registry ---------------------------------------------------------


@dataclass
class Prepared:
    name: str
    n: int
    template: CallTemplate
    args: dict
    spec: AlgorithmSpec
    expected: object          # plain numpy value for the oracle check
    out_base: int
    out_words: int
    extract: object = None    # machine -> actual output array
    handles: dict = field(default_factory=dict)


def global_words(name, n):
    """Generous global-arena sizing for setup allocations."""
    if name == "msum":
        return n + 64
    if name == "prefix_sums":
        return 4 * n + 64
    if name in ("matrix_add",):
        return 3 * n * n + 64
    if name in ("mt_bi", "rm_to_bi", "bi_to_rm_direct"):
        return 2 * n * n + 64
    if name == "bi_to_rm_gapped":
        return (2 + layouts.gapped_row_width(n) / max(1, n)) * n * n + 4 * n + 128
    if name == "bi_to_rm_fft_variant":
        return 2 * n * n + 64
    if name in ("strassen", "depth_n_mm"):
        return 3 * n * n + 64
    if name == "fft":
        return 4 * n + 4 * sum(fft_table_sizes(n)) + 256
    raise AlgorithmError(f"unknown algorithm {name!r}")


def stack_words_for(template):
    return 4 * template.stack_need() + (1 << 14)


def make_input_ints(rng, count, lo=0, hi=64):
    return rng.integers(lo, hi, size=count, dtype=np.int64)


def mt_bi_plan(src: MatrixHandle, dst: MatrixHandle, padded=False):
    """Transpose plan over explicit handles; rejects non-BI layouts."""
    if src.layout != "bi" or dst.layout != "bi":
        raise AlgorithmError("mt_bi requires both matrices in the BI layout")
    if src.n != dst.n:
        raise AlgorithmError("mt_bi needs equal dimensions")
    return mt_bi_template(src.n, padded), {"src": src.base, "dst": dst.base}


def prepare(machine, name, n, seed, padded=False):
    """Allocate arrays, generate input, and build the plan for one run."""
    if name not in SPECS:
        raise AlgorithmError(f"unknown algorithm {name!r}")
    spec = SPECS[name]
    if not is_pow2(n):
        raise AlgorithmError(f"{name} needs a power-of-two size, got {n}")
    rng = np.random.default_rng(seed)
    m = machine

    if name == "msum":
        a_lo, _ = m.alloc(-1, n)
        out_lo, _ = m.alloc(-1, 1)
        data = make_input_ints(rng, n)
        m.poke_range(a_lo, data)
        return Prepared(name, n, msum_template(n, padded),
                        {"a": a_lo, "out": out_lo}, spec,
                        np.array([data.sum()]), out_lo, 1)

    if name == "prefix_sums":
        a_lo, _ = m.alloc(-1, n)
        sums_lo, _ = m.alloc(-1, max(1, 2 * n - 1))
        out_lo, _ = m.alloc(-1, n)
        data = make_input_ints(rng, n)
        m.poke_range(a_lo, data)
        return Prepared(name, n, prefix_sums_template(n, padded),
                        {"a": a_lo, "sums": sums_lo, "out": out_lo}, spec,
                        np.cumsum(data), out_lo, n)

    if name == "matrix_add":
        w = n * n
        a_lo, _ = m.alloc(-1, w)
        b_lo, _ = m.alloc(-1, w)
        c_lo, _ = m.alloc(-1, w)
        da = make_input_ints(rng, w)
        db = make_input_ints(rng, w)
        m.poke_range(a_lo, da)
        m.poke_range(b_lo, db)
        return Prepared(name, n, matrix_add_template(n, padded),
                        {"a": a_lo, "b": b_lo, "c": c_lo}, spec,
                        da + db, c_lo, w)

    if name == "mt_bi":
        w = n * n
        src_lo, _ = m.alloc(-1, w)
        dst_lo, _ = m.alloc(-1, w)
        data = make_input_ints(rng, w)
        m.poke_range(src_lo, data)
        perm = bi_perm(n)
        mat = data[perm].reshape(n, n)      # matrix in row-major
        expected = np.empty(w, dtype=np.int64)
        expected[perm] = mat.T.reshape(-1)  # transposed, back to BI
        h = {"src": MatrixHandle(n, "bi", src_lo),
             "dst": MatrixHandle(n, "bi", dst_lo)}
        return Prepared(name, n, mt_bi_template(n, padded),
                        {"src": src_lo, "dst": dst_lo}, spec,
                        expected, dst_lo, w, handles=h)

    if name == "rm_to_bi":
        w = n * n
        src_lo, _ = m.alloc(-1, w)
        dst_lo, _ = m.alloc(-1, w)
        data = make_input_ints(rng, w)     # row-major input
        m.poke_range(src_lo, data)
        perm = bi_perm(n)
        expected = np.empty(w, dtype=np.int64)
        expected[perm] = data              # BI[interleave(r,c)] = RM[r*n+c]
        return Prepared(name, n, rm_to_bi_template(n, padded),
                        {"src": src_lo, "dst": dst_lo}, spec,
                        expected, dst_lo, w)

    if name in ("bi_to_rm_direct", "bi_to_rm_gapped"):
        w = n * n
        src_lo, _ = m.alloc(-1, w)
        dst_lo, _ = m.alloc(-1, w)
        data = make_input_ints(rng, w)     # BI input
        m.poke_range(src_lo, data)
        perm = bi_perm(n)
        expected = data[perm]              # RM[r*n+c] = BI[interleave]
        if name == "bi_to_rm_direct":
            return Prepared(name, n, bi_to_rm_direct_template(n, padded),
                            {"src": src_lo, "dst": dst_lo}, spec,
                            expected, dst_lo, w)
        width = layouts.gapped_row_width(n)
        gap_lo, _ = m.alloc(-1, n * width)
        return Prepared(name, n, bi_to_rm_gapped_template(n, padded),
                        {"src": src_lo, "gap": gap_lo, "dst": dst_lo}, spec,
                        expected, dst_lo, w)

    if name == "bi_to_rm_fft_variant":
        w = n * n
        src_lo, _ = m.alloc(-1, w)
        dst_lo, _ = m.alloc(-1, w)
        data = make_input_ints(rng, w)
        m.poke_range(src_lo, data)
        perm = bi_perm(n)
        expected = data[perm]
        return Prepared(name, n, bi_to_rm_fft_template(n, padded),
                        {"src": src_lo, "dst": dst_lo}, spec,
                        expected, dst_lo, w)

    if name in ("strassen", "depth_n_mm"):
        w = n * n
        a_lo, _ = m.alloc(-1, w)
        b_lo, _ = m.alloc(-1, w)
        c_lo, _ = m.alloc(-1, w)
        da = make_input_ints(rng, w)
        db = make_input_ints(rng, w)
        m.poke_range(a_lo, da)
        m.poke_range(b_lo, db)
        perm = bi_perm(n)
        ma_ = da[perm].reshape(n, n)
        mb_ = db[perm].reshape(n, n)
        prod = (ma_ @ mb_).reshape(-1)
        expected = np.empty(w, dtype=np.int64)
        expected[perm] = prod
        tfn = strassen_template if name == "strassen" else depth_n_mm_template
        return Prepared(name, n, tfn(n, padded),
                        {"a": a_lo, "b": b_lo, "c": c_lo}, spec,
                        expected, c_lo, w)

    if name == "fft":
        src_lo, _ = m.alloc(-1, 2 * n)
        dst_lo, _ = m.alloc(-1, 2 * n)
        re = rng.standard_normal(n)
        im = rng.standard_normal(n)
        buf = np.empty(2 * n)
        buf[0::2] = re
        buf[1::2] = im
        m.poke_range(src_lo, buf)
        tw = {}
        for sz in fft_table_sizes(n):
            base, _ = m.alloc(-1, 2 * sz)
            ws = np.exp(-2j * np.pi * np.arange(sz) / sz)
            tbuf = np.empty(2 * sz)
            tbuf[0::2] = ws.real
            tbuf[1::2] = ws.imag
            m.poke_range(base, tbuf)
            tw[sz] = base
        x = re + 1j * im
        expected = np.fft.fft(x)
        exp_buf = np.empty(2 * n)
        exp_buf[0::2] = expected.real
        exp_buf[1::2] = expected.imag
        return Prepared(name, n, fft_template(n, padded),
                        {"src": src_lo, "dst": dst_lo, "tw": tw}, spec,
                        exp_buf, dst_lo, 2 * n)

    raise AlgorithmError(f"unknown algorithm {name!r}")


def output_of(prepared, machine):
    return np.array(machine.peek_range(prepared.out_base,
                                       prepared.out_base + prepared.out_words),
                    copy=True)


def check_output(prepared, machine, tol=0.0):
    """Compare the simulated output to the oracle; returns max abs error."""
    got = output_of(prepared, machine)
    want = np.asarray(prepared.expected)
    if tol == 0.0:
        if not np.array_equal(got, want):
            bad = np.nonzero(got != want)[0][:5]
            raise AssertionError(
                f"{prepared.name} output mismatch at {bad}: "
                f"{got[bad]} != {want[bad]}")
        return 0.0
    err = float(np.max(np.abs(got - want))) if len(want) else 0.0
    if err >= tol:
        raise AssertionError(f"{prepared.name} max error {err} >= {tol}")
    return err


def seq_oracle(name, n, seed):
    """Reference output computed without the simulator."""
    rng = np.random.default_rng(seed)
    if name == "msum":
        return np.array([make_input_ints(rng, n).sum()])
    if name == "prefix_sums":
        return np.cumsum(make_input_ints(rng, n))
    raise AlgorithmError(f"seq_oracle covers array scans; use prepare() "
                         f"for {name}")


def machine_dtype(name):
    return np.float64 if name == "fft" else np.int64
