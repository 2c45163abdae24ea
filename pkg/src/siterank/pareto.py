"""Pareto dominance tests and non-dominated front extraction on column subsets.

Maximization convention throughout: column orientation already happened
during scaling, so larger is always better. Duplicate rows on the evaluated
subset are mutual ties and all stay on the front.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from siterank.combinatorics import CombinationSet


def _columns(idx: CombinationSet | Sequence[int]) -> tuple[int, ...]:
    """0-based column tuple from a CombinationSet or 1-based index sequence."""
    if isinstance(idx, CombinationSet):
        return idx.columns()
    return tuple(int(i) - 1 for i in idx)


def _values(matrix) -> np.ndarray:
    vals = getattr(matrix, "values", matrix)
    return np.asarray(vals, dtype=np.float64)


def dominates(a: Iterable[float], b: Iterable[float], idx: CombinationSet | Sequence[int]) -> bool:
    """True iff row a dominates row b on the selected objectives.

    a dominates b when a >= b on every selected column and a > b on at
    least one. Equal rows never dominate each other.
    """
    cols = list(_columns(idx))
    av = np.asarray(a, dtype=np.float64)[cols]
    bv = np.asarray(b, dtype=np.float64)[cols]
    return bool(np.all(av >= bv) and np.any(av > bv))


def non_dominated_mask(matrix, idx: CombinationSet | Sequence[int]) -> np.ndarray:
    """Boolean mask of rows not dominated by any other row on columns idx.

    Bit i is set iff no other row dominates row i. The result is
    independent of row order and matches ``non_dominated_mask_naive``
    bit for bit.
    """
    values = _values(matrix)
    cols = list(_columns(idx))
    if not cols:
        raise ValueError("index set must be nonempty")
    sub = values[:, cols]
    return front_mask(sub)


def non_dominated_mask_naive(matrix, idx: CombinationSet | Sequence[int]) -> np.ndarray:
    """Reference O(n^2) all-pairs implementation, kept as the in-tree oracle."""
    values = _values(matrix)
    cols = list(_columns(idx))
    if not cols:
        raise ValueError("index set must be nonempty")
    sub = values[:, cols]
    n = sub.shape[0]
    mask = np.ones(n, dtype=bool)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            ge = np.all(sub[j] >= sub[i])
            gt = np.any(sub[j] > sub[i])
            if ge and gt:
                mask[i] = False
                break
    return mask


def front_mask(sub: np.ndarray) -> np.ndarray:
    """Non-dominated mask of an n x s value block (maximization).

    Collapses duplicate rows first (duplicates share front status), then
    sweeps unique rows in descending-sum order: any dominator has a
    strictly larger coordinate sum, so each surviving row is on the front
    and only has to eliminate rows after it in the ordering.
    """
    n, s = sub.shape
    if n == 0:
        return np.zeros(0, dtype=bool)
    if s == 1:
        col = sub[:, 0]
        return col == col.max()
    uniq, inverse = np.unique(sub, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    nu = uniq.shape[0]
    order = np.argsort(-uniq.sum(axis=1), kind="stable")
    ordered = uniq[order]
    alive = np.ones(nu, dtype=bool)
    for i in range(nu - 1):
        if not alive[i]:
            continue
        p = ordered[i]
        # Rows are distinct, so <= everywhere already implies dominated.
        dominated = (ordered[i + 1 :] <= p).all(axis=1)
        alive[i + 1 :] &= ~dominated
    front_u = np.zeros(nu, dtype=bool)
    front_u[order] = alive
    return front_u[inverse]
