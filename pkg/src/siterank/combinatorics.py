"""Lexicographic enumeration, ranking, and unranking of objective index subsets."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

# Subset membership must fit a single machine-word bitmask.
MAX_OBJECTIVES = 64


class CombinationError(ValueError):
    """Raised for out-of-range subset parameters or ranks."""


@dataclass(frozen=True)
class CombinationSet:
    """One size-s subset of {1..m} with its 1-based lexicographic rank k.

    Indices are 1-based and strictly increasing; ``columns()`` gives the
    0-based view used for array indexing.
    """

    indices: tuple[int, ...]
    s: int
    k: int

    def columns(self) -> tuple[int, ...]:
        return tuple(i - 1 for i in self.indices)


def _check_m(m: int) -> None:
    if m > MAX_OBJECTIVES:
        raise CombinationError(f"m={m} objectives exceeds the supported maximum of {MAX_OBJECTIVES}")
    if m < 0:
        raise CombinationError(f"m must be nonnegative, got {m}")


def binomial(m: int, s: int) -> int:
    """Exact C(m, s) for 0 <= s <= m <= 64."""
    _check_m(m)
    if not 0 <= s <= m:
        raise CombinationError(f"require 0 <= s <= m, got s={s}, m={m}")
    return math.comb(m, s)


def enumerate_combinations(m: int, s: int) -> Iterator[CombinationSet]:
    """Yield all C(m, s) index subsets in lexicographic order.

    The first set is (1..s), the last is (m-s+1..m); k counts from 1.
    """
    _check_m(m)
    if s < 1 or s > m:
        raise CombinationError(f"require 1 <= s <= m, got s={s}, m={m}")
    for k, idx in enumerate(itertools.combinations(range(1, m + 1), s), start=1):
        yield CombinationSet(idx, s, k)


def unrank(m: int, s: int, k: int) -> CombinationSet:
    """Return the k-th (1-based) size-s subset in lexicographic order."""
    if s < 1 or s > m:
        raise CombinationError(f"require 1 <= s <= m, got s={s}, m={m}")
    total = binomial(m, s)
    if not 1 <= k <= total:
        raise CombinationError(f"rank {k} out of range [1, {total}] for C({m}, {s})")
    r = k - 1
    out: list[int] = []
    c = 1
    for pos in range(s):
        while True:
            below = math.comb(m - c, s - pos - 1)
            if r < below:
                break
            r -= below
            c += 1
        out.append(c)
        c += 1
    return CombinationSet(tuple(out), s, k)


def rank(m: int, indices: Sequence[int]) -> int:
    """1-based lexicographic rank of a strictly increasing index subset of {1..m}."""
    idx = tuple(indices)
    s = len(idx)
    if s < 1 or s > m:
        raise CombinationError(f"require 1 <= len(indices) <= m, got {s} and m={m}")
    _check_m(m)
    prev = 0
    r = 0
    for pos, c in enumerate(idx):
        if c <= prev or c > m:
            raise CombinationError(f"indices must be strictly increasing within 1..{m}, got {idx}")
        for x in range(prev + 1, c):
            r += math.comb(m - x, s - pos - 1)
        prev = c
    return r + 1


def iter_from(m: int, s: int, k_start: int) -> Iterator[CombinationSet]:
    """Stream subsets in lexicographic order starting at rank k_start.

    Equivalent to skipping the first k_start - 1 items of
    ``enumerate_combinations`` but with O(s) startup cost, which is what
    makes checkpoint resume and rank-range work partitioning cheap.
    """
    for k, idx in enumerate(_iter_index_tuples(m, s, k_start), start=k_start):
        yield CombinationSet(idx, s, k)


def _iter_index_tuples(m: int, s: int, k_start: int) -> Iterator[tuple[int, ...]]:
    """Raw tuple stream behind iter_from; avoids per-item dataclass cost on hot paths."""
    total = binomial(m, s)
    cur = list(unrank(m, s, k_start).indices)
    k = k_start
    while True:
        yield tuple(cur)
        if k == total:
            return
        k += 1
        i = s - 1
        while cur[i] == m - s + 1 + i:
            i -= 1
        cur[i] += 1
        for j in range(i + 1, s):
            cur[j] = cur[j - 1] + 1
