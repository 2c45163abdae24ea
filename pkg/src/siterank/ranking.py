"""Streaming sweep over every objective subset: front-mass accumulation,
siting metric, and per-objective contribution attribution.

The per-(s, k) masks are never materialized as tensors; each combination
length keeps one n-vector of accumulated front mass and one n x m count
matrix, which is all the downstream metrics need.
"""

from __future__ import annotations

import json
import time
import warnings
from concurrent.futures import Executor, ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from siterank.combinatorics import _iter_index_tuples, binomial
from siterank.dataset import AliasMap, ScaledMatrix
from siterank.pareto import front_mask

# Fixed work-partition size. Chunk boundaries, not worker count, decide the
# floating-point merge grouping, so results are identical for any pool size.
DEFAULT_CHUNK = 64
DEFAULT_CHECKPOINT_STRIDE = 100_000


class RankingError(RuntimeError):
    """Raised for sweep misuse: resume mismatches, incomplete inputs, worker failures."""


@dataclass
class LengthAccumulator:
    """Running totals for one combination length s.

    obs_ratio[i] accumulates 1/front_size for every subset whose front
    contains site i (total mass 1 per combination). contrib_counts[i, j]
    counts the fronts containing site i among subsets that include
    objective j.
    """

    s: int
    obs_ratio: np.ndarray
    contrib_counts: np.ndarray
    combos_done: int = 0
    elapsed: float = 0.0

    @classmethod
    def empty(cls, n: int, m: int, s: int) -> "LengthAccumulator":
        return cls(s=s, obs_ratio=np.zeros(n), contrib_counts=np.zeros((n, m)), combos_done=0, elapsed=0.0)

    @property
    def n(self) -> int:
        return self.obs_ratio.shape[0]

    @property
    def m(self) -> int:
        return self.contrib_counts.shape[1]

    def total_combos(self) -> int:
        return binomial(self.m, self.s)

    def is_complete(self) -> bool:
        return self.combos_done == self.total_combos()

    def copy(self) -> "LengthAccumulator":
        return LengthAccumulator(
            s=self.s,
            obs_ratio=self.obs_ratio.copy(),
            contrib_counts=self.contrib_counts.copy(),
            combos_done=self.combos_done,
            elapsed=self.elapsed,
        )


@dataclass
class SitingScores:
    """Summed front mass per site and its min-max scaled [0, 1] metric."""

    summed_ratio: np.ndarray
    metric: np.ndarray
    site_ids: list[str]


@dataclass
class ContributionResult:
    """Objective attribution: per-length row-normalized counts, their sum,
    and the final importance matrix whose nonzero rows sum to 1."""

    by_length: dict[int, np.ndarray]
    summed: np.ndarray
    importance: np.ndarray


@dataclass
class RankResult:
    """Complete sweep output for one scaled matrix."""

    site_ids: list[str]
    objective_names: list[str]
    summed_ratio: np.ndarray  # (n,)
    metric: np.ndarray  # (n,)
    importance: np.ndarray  # (n, m)
    obs_by_length: np.ndarray  # (m, n); row s-1 holds length-s front mass
    variance: np.ndarray  # (m,)
    elapsed_by_length: np.ndarray  # (m,) seconds
    fingerprint: str = ""

    def to_json_dict(self) -> dict:
        return {
            "site_ids": self.site_ids,
            "objective_names": self.objective_names,
            "summed_ratio": self.summed_ratio.tolist(),
            "metric": self.metric.tolist(),
            "importance": self.importance.tolist(),
            "obs_by_length": self.obs_by_length.tolist(),
            "variance": self.variance.tolist(),
            "elapsed_by_length": self.elapsed_by_length.tolist(),
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "RankResult":
        variance = np.asarray(data["variance"], dtype=np.float64)
        elapsed = data.get("elapsed_by_length")
        return cls(
            site_ids=[str(s) for s in data["site_ids"]],
            objective_names=[str(s) for s in data["objective_names"]],
            summed_ratio=np.asarray(data["summed_ratio"], dtype=np.float64),
            metric=np.asarray(data["metric"], dtype=np.float64),
            importance=np.asarray(data["importance"], dtype=np.float64),
            obs_by_length=np.asarray(data["obs_by_length"], dtype=np.float64),
            variance=variance,
            elapsed_by_length=np.asarray(elapsed, dtype=np.float64) if elapsed is not None else np.zeros_like(variance),
            fingerprint=str(data.get("fingerprint", "")),
        )

    def canonical_bytes(self) -> bytes:
        """Stable serialization for bitwise reproducibility checks.

        Wall-clock timings are measurement metadata, not sweep results,
        so they are excluded from the determinism contract.
        """
        payload = self.to_json_dict()
        payload.pop("elapsed_by_length")
        return json.dumps(payload, sort_keys=True).encode()

    def expand_aliases(self, aliases: AliasMap) -> "RankResult":
        """Copy each kept site's results onto its removed duplicate ids."""
        index = {sid: i for i, sid in enumerate(self.site_ids)}
        extra_ids: list[str] = []
        extra_rows: list[int] = []
        for kept, removed in aliases.kept_to_removed.items():
            if kept not in index:
                raise RankingError(f"alias map references unknown site id {kept!r}")
            for rid in removed:
                extra_ids.append(rid)
                extra_rows.append(index[kept])
        if not extra_ids:
            return self
        rows = np.asarray(extra_rows, dtype=int)
        return RankResult(
            site_ids=self.site_ids + extra_ids,
            objective_names=self.objective_names,
            summed_ratio=np.concatenate([self.summed_ratio, self.summed_ratio[rows]]),
            metric=np.concatenate([self.metric, self.metric[rows]]),
            importance=np.concatenate([self.importance, self.importance[rows]], axis=0),
            obs_by_length=np.concatenate([self.obs_by_length, self.obs_by_length[:, rows]], axis=1),
            variance=self.variance,
            elapsed_by_length=self.elapsed_by_length,
            fingerprint=self.fingerprint,
        )


def _run_chunk(values: np.ndarray, s: int, k_start: int, k_end: int) -> tuple[np.ndarray, np.ndarray]:
    """Process combinations k_start..k_end (inclusive) into fresh partial sums."""
    n, m = values.shape
    nr = np.zeros(n)
    oc = np.zeros((n, m))
    stream = _iter_index_tuples(m, s, k_start)
    for _ in range(k_end - k_start + 1):
        indices = next(stream)
        cols = [i - 1 for i in indices]
        mask = front_mask(values[:, cols])
        members = np.flatnonzero(mask)
        nr[members] += 1.0 / members.size
        oc[np.ix_(members, cols)] += 1.0
    return nr, oc


# Worker-process state, set once per worker by the pool initializer.
_WORKER_VALUES: np.ndarray | None = None


def _init_worker(values: np.ndarray) -> None:
    global _WORKER_VALUES
    _WORKER_VALUES = values


def _chunk_task(args: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    s, k_start, k_end = args
    return _run_chunk(_WORKER_VALUES, s, k_start, k_end)


@contextmanager
def worker_pool(values: np.ndarray, workers: int):
    """Process pool whose workers hold a private copy of the scaled matrix."""
    if workers <= 1:
        yield None
        return
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(values,)) as pool:
        yield pool


def accumulate_length(
    matrix: ScaledMatrix,
    s: int,
    resume: LengthAccumulator | None = None,
    *,
    pool: Executor | None = None,
    chunk: int = DEFAULT_CHUNK,
    checkpoint_fn: Callable[[LengthAccumulator], None] | None = None,
    checkpoint_stride: int = DEFAULT_CHECKPOINT_STRIDE,
) -> LengthAccumulator:
    """Stream all length-s combinations in lexicographic order into an accumulator.

    Work is split into fixed-size contiguous k-ranges; partial sums merge in
    ascending range order, so the result is identical for any pool size.
    ``checkpoint_fn`` is invoked at merge points every ``checkpoint_stride``
    combinations and once at completion.
    """
    values = matrix.values
    n, m = values.shape
    if not 1 <= s <= m:
        raise RankingError(f"require 1 <= s <= m={m}, got s={s}")
    total = binomial(m, s)

    if resume is not None:
        if resume.s != s:
            raise RankingError(f"resume accumulator is for length {resume.s}, not {s}")
        if resume.n != n or resume.m != m:
            raise RankingError(f"resume accumulator shape ({resume.n}, {resume.m}) does not match matrix ({n}, {m})")
        if resume.combos_done > total:
            raise RankingError(f"resume combos_done {resume.combos_done} exceeds total {total}")
        acc = resume.copy()
    else:
        acc = LengthAccumulator.empty(n, m, s)

    if acc.combos_done == total:
        return acc

    ranges = [(k0, min(k0 + chunk - 1, total)) for k0 in range(acc.combos_done + 1, total + 1, chunk)]
    last_saved = acc.combos_done
    t_mark = time.perf_counter()

    def merge(part_nr: np.ndarray, part_oc: np.ndarray, k_end: int) -> None:
        nonlocal last_saved, t_mark
        acc.obs_ratio += part_nr
        acc.contrib_counts += part_oc
        acc.combos_done = k_end
        if checkpoint_fn is not None and acc.combos_done - last_saved >= checkpoint_stride and acc.combos_done < total:
            now = time.perf_counter()
            acc.elapsed += now - t_mark
            t_mark = now
            checkpoint_fn(acc)
            last_saved = acc.combos_done

    if pool is None:
        for k0, k1 in ranges:
            part_nr, part_oc = _run_chunk(values, s, k0, k1)
            merge(part_nr, part_oc, k1)
    else:
        results = pool.map(_chunk_task, [(s, k0, k1) for k0, k1 in ranges])
        for (k0, k1), outcome in zip(ranges, _reraise_with_range(results, s, ranges)):
            merge(outcome[0], outcome[1], k1)

    acc.elapsed += time.perf_counter() - t_mark
    if checkpoint_fn is not None:
        checkpoint_fn(acc)
    return acc


def _reraise_with_range(results, s: int, ranges):
    it = iter(results)
    for k0, k1 in ranges:
        try:
            yield next(it)
        except Exception as exc:  # noqa: BLE001 - annotate and surface worker failures
            raise RankingError(f"worker failed on s={s}, k range [{k0}, {k1}]: {exc}") from exc


def _as_complete_accumulators(accumulators) -> dict[int, LengthAccumulator]:
    if isinstance(accumulators, Mapping):
        accs = dict(accumulators)
    else:
        accs = {a.s: a for a in accumulators}
    if not accs:
        raise RankingError("no accumulators supplied")
    m = next(iter(accs.values())).m
    missing = [s for s in range(1, m + 1) if s not in accs]
    if missing:
        raise RankingError(f"missing accumulators for lengths {missing}")
    for s in range(1, m + 1):
        acc = accs[s]
        if acc.m != m:
            raise RankingError(f"accumulator for s={s} has m={acc.m}, expected {m}")
        if not acc.is_complete():
            raise RankingError(f"accumulator for s={s} is incomplete ({acc.combos_done}/{acc.total_combos()})")
    return accs


def siting_metric(accumulators, site_ids: list[str] | None = None) -> SitingScores:
    """Sum front mass over all lengths and min-max scale it to [0, 1]."""
    accs = _as_complete_accumulators(accumulators)
    m = accs[1].m
    summed = np.zeros(accs[1].n)
    for s in range(1, m + 1):
        summed = summed + accs[s].obs_ratio
    lo, hi = summed.min(), summed.max()
    if hi == lo:
        warnings.warn("summed front mass is constant across sites; metric set to all zeros", stacklevel=2)
        metric = np.zeros_like(summed)
    else:
        metric = (summed - lo) / (hi - lo)
    if site_ids is None:
        site_ids = [str(i) for i in range(summed.shape[0])]
    return SitingScores(summed_ratio=summed, metric=metric, site_ids=list(site_ids))


def _row_normalize(matrix: np.ndarray) -> np.ndarray:
    """Scale each row to sum 1; all-zero rows stay zero instead of NaN."""
    sums = matrix.sum(axis=1)
    out = np.zeros_like(matrix)
    nz = sums > 0
    out[nz] = matrix[nz] / sums[nz, None]
    return out


def contributions(accumulators) -> ContributionResult:
    """Row-normalize per-length counts, sum over lengths, and normalize again."""
    accs = _as_complete_accumulators(accumulators)
    m = accs[1].m
    by_length: dict[int, np.ndarray] = {}
    summed = np.zeros_like(accs[1].contrib_counts)
    for s in range(1, m + 1):
        nc = _row_normalize(accs[s].contrib_counts)
        by_length[s] = nc
        summed = summed + nc
    return ContributionResult(by_length=by_length, summed=summed, importance=_row_normalize(summed))


def variance_by_length(accumulators) -> np.ndarray:
    """Population variance of per-site front mass, one value per length."""
    accs = _as_complete_accumulators(accumulators)
    m = accs[1].m
    return np.array([accs[s].obs_ratio.var() for s in range(1, m + 1)])


def parse_length_range(text: str, m: int) -> list[int]:
    """Parse a CLI lengths argument like '1-3', '2,5,7', or 'all'."""
    if text.strip().lower() in ("", "all"):
        return list(range(1, m + 1))
    lengths: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            lengths.update(range(int(a), int(b) + 1))
        elif part:
            lengths.add(int(part))
    bad = [s for s in lengths if not 1 <= s <= m]
    if bad:
        raise RankingError(f"lengths {sorted(bad)} outside [1, {m}]")
    return sorted(lengths)


def run_sweep(
    matrix: ScaledMatrix,
    s_range: Iterable[int] | None = None,
    checkpoint_dir=None,
    workers: int = 1,
    *,
    chunk: int = DEFAULT_CHUNK,
    checkpoint_stride: int = DEFAULT_CHECKPOINT_STRIDE,
    aliases: AliasMap | None = None,
    log_fn: Callable[[str], None] | None = None,
) -> RankResult | None:
    """Run the sweep for the requested lengths, resuming from checkpoints.

    Returns the final RankResult once every length 1..m is complete
    (combining checkpoints from earlier partial runs), otherwise None with
    all progress persisted. Output is identical for any worker count.
    """
    from siterank import checkpoint as ckpt  # local import; checkpoint depends on this module

    n, m = matrix.values.shape
    lengths = sorted(set(s_range)) if s_range is not None else list(range(1, m + 1))
    for s in lengths:
        if not 1 <= s <= m:
            raise RankingError(f"length {s} outside [1, {m}]")

    fingerprint = matrix.fingerprint()
    store = ckpt.CheckpointStore(checkpoint_dir, fingerprint) if checkpoint_dir is not None else None

    accs: dict[int, LengthAccumulator] = {}
    with worker_pool(matrix.values, workers) as pool:
        for s in lengths:
            resume = store.load(s) if store is not None else None
            if resume is not None and resume.is_complete():
                accs[s] = resume
                if log_fn:
                    log_fn(f"length {s}: already complete ({resume.combos_done} combinations), skipping")
                continue
            acc = accumulate_length(
                matrix,
                s,
                resume=resume,
                pool=pool,
                chunk=chunk,
                checkpoint_fn=store.save if store is not None else None,
                checkpoint_stride=checkpoint_stride,
            )
            accs[s] = acc
            if store is not None:
                store.write_timings()
            if log_fn:
                log_fn(f"length {s}: {acc.combos_done} combinations in {acc.elapsed:.2f}s")

    # Pull any lengths finished in earlier runs before deciding completeness.
    if store is not None:
        for s in range(1, m + 1):
            if s not in accs:
                loaded = store.load(s)
                if loaded is not None:
                    accs[s] = loaded
    done = [s for s in range(1, m + 1) if s in accs and accs[s].is_complete()]
    if len(done) < m:
        if log_fn:
            missing = [s for s in range(1, m + 1) if s not in done]
            log_fn(f"sweep incomplete; missing lengths {missing}")
        return None

    scores = siting_metric(accs, matrix.site_ids)
    contrib = contributions(accs)
    result = RankResult(
        site_ids=list(matrix.site_ids),
        objective_names=matrix.spec.names,
        summed_ratio=scores.summed_ratio,
        metric=scores.metric,
        importance=contrib.importance,
        obs_by_length=np.stack([accs[s].obs_ratio for s in range(1, m + 1)]),
        variance=variance_by_length(accs),
        elapsed_by_length=np.array([accs[s].elapsed for s in range(1, m + 1)]),
        fingerprint=fingerprint,
    )
    if aliases is not None:
        result = result.expand_aliases(aliases)
    return result
