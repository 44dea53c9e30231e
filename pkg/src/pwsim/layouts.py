"""Index maps for matrix layouts and tree output placement.

Three layouts appear throughout the algorithm suite:

  RM         row major, element (r, c) at r*n + c
  BI         bit interleaved (Morton / Z-order): quadrants are stored
             recursively top-left, top-right, bottom-left, bottom-right,
             so every recursive quadrant is a contiguous range
  gapped RM  row major with unused gaps appended after every recursive
             column segment, sized seg/ceil(log2(seg))^2, so that writers
             of sibling subarrays land in disjoint blocks

The in-order helpers place one output word per fork-tree node at the node's
in-order traversal index, which keeps writes of large disjoint subtrees at
least a block apart.
"""

from __future__ import annotations

import math


def is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


def ilog2(x: int) -> int:
    return x.bit_length() - 1


def interleave_bits(row: int, col: int, bits: int) -> int:
    """BI index of (row, col) in a 2^bits square; row bit above col bit."""
    out = 0
    for i in range(bits):
        out |= ((col >> i) & 1) << (2 * i)
        out |= ((row >> i) & 1) << (2 * i + 1)
    return out


def deinterleave_bits(idx: int, bits: int):
    row = col = 0
    for i in range(bits):
        col |= ((idx >> (2 * i)) & 1) << i
        row |= ((idx >> (2 * i + 1)) & 1) << i
    return row, col


def bi_index_table(n: int):
    """row-major offset -> BI index, as a list of length n*n."""
    bits = ilog2(n)
    table = [0] * (n * n)
    for r in range(n):
        for c in range(n):
            table[r * n + c] = interleave_bits(r, c, bits)
    return table


# -- in-order output placement ------------------------------------------------


def inorder_leaf(base_lo: int, i: int) -> int:
    """In-order index of leaf i in a tree over [base_lo, ...)."""
    return 2 * (i - base_lo)


def inorder_internal(base_lo: int, mid: int) -> int:
    """In-order index of the internal node splitting at mid."""
    return 2 * (mid - base_lo) - 1


def inorder_size(nleaves: int) -> int:
    return 2 * nleaves - 1


# -- gapped row-major layout ---------------------------------------------------

GAP_FLOOR = 16  # below this segment side the layout degenerates to plain RM


def gap_words(seg: int) -> int:
    """Gap appended after a column segment of width seg."""
    if seg < GAP_FLOOR:
        return 0
    lg = math.ceil(math.log2(seg))
    return max(1, seg // (lg * lg))


def gapped_row_width(n: int) -> int:
    """Width of one gapped row for an n-wide matrix (n a power of two)."""
    if n < GAP_FLOOR:
        return n
    half = gapped_row_width(n // 2)
    return 2 * (half + gap_words(n // 2))


def gapped_col_table(n: int):
    """column -> offset inside a gapped row, for all n columns."""
    table = [0] * n

    def fill(col_lo: int, width: int, off: int):
        if width < GAP_FLOOR:
            for i in range(width):
                table[col_lo + i] = off + i
            return
        half = width // 2
        w = gapped_row_width(half) + gap_words(half)
        fill(col_lo, half, off)
        fill(col_lo + half, half, off + w)

    fill(0, n, 0)
    return table
