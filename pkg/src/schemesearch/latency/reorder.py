"""Row reordering that groups rows with the same sparsity signature."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ReorderPlan:
    perm: np.ndarray        # perm[j] = original row placed at position j
    inverse: np.ndarray     # inverse[perm[j]] = j
    groups: tuple[int, ...]  # start offsets of each group, plus len(perm)

    def group_slices(self):
        return [slice(a, b) for a, b in zip(self.groups[:-1], self.groups[1:])]


def row_signatures(a: np.ndarray) -> list[int]:
    """Bitmask of nonzero columns per row (bit j = column j)."""
    nz = np.asarray(a).reshape(len(a), -1) != 0
    weights = [1 << j for j in range(nz.shape[1])]
    return [sum(w for w, on in zip(weights, row) if on) for row in nz.tolist()]


def reorder(signatures) -> ReorderPlan:
    """Group equal signatures, groups ordered by first appearance.

    Rows keep their original relative order inside a group, so rows that
    are already grouped give the identity permutation.
    """
    sigs = list(signatures)
    first: dict = {}
    for i, s in enumerate(sigs):
        first.setdefault(s, len(first))
    key = np.array([first[s] for s in sigs], dtype=np.int64)
    perm = np.argsort(key, kind="stable")
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))
    sorted_key = key[perm]
    starts = [0] + [j for j in range(1, len(perm)) if sorted_key[j] != sorted_key[j - 1]]
    return ReorderPlan(perm, inverse, tuple(starts) + (len(perm),))


@dataclass
class GroupedMatrix:
    """Rows of a sparse matrix stored per signature group as compact dense blocks."""
    plan: ReorderPlan
    cols: list[np.ndarray]
    blocks: list[np.ndarray]
    shape: tuple[int, int]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        out_shape = (self.shape[0],) + x.shape[1:]
        y = np.zeros(out_shape, dtype=np.result_type(x.dtype, *(b.dtype for b in self.blocks))
                     if self.blocks else x.dtype)
        for sl, cols, blk in zip(self.plan.group_slices(), self.cols, self.blocks):
            rows = self.plan.perm[sl]
            if cols.size:
                y[rows] = _rowwise(blk, x[cols])
        return y


def _rowwise(blk: np.ndarray, xs: np.ndarray) -> np.ndarray:
    # left-to-right accumulation over columns, the same order as the reference
    x2 = xs.reshape(xs.shape[0], -1)
    acc = blk[:, 0, None] * x2[0]
    for j in range(1, blk.shape[1]):
        acc += blk[:, j, None] * x2[j]
    return acc.reshape((blk.shape[0],) + xs.shape[1:])


def group_rows(a: np.ndarray) -> GroupedMatrix:
    a = np.asarray(a)
    plan = reorder(row_signatures(a))
    cols, blocks = [], []
    for sl in plan.group_slices():
        rows = plan.perm[sl]
        c = np.flatnonzero(a[rows[0]] != 0)
        cols.append(c)
        blocks.append(np.ascontiguousarray(a[np.ix_(rows, c)]))
    return GroupedMatrix(plan, cols, blocks, a.shape)


def direct_matvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Reference product summing each row's nonzero terms left to right."""
    a = np.asarray(a)
    x = np.asarray(x)
    y = np.zeros((a.shape[0],) + x.shape[1:], dtype=np.result_type(a.dtype, x.dtype))
    for i in range(a.shape[0]):
        c = np.flatnonzero(a[i])
        if c.size:
            y[i] = _rowwise(a[i:i + 1, c], x[c])[0]
    return y
