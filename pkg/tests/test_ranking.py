"""Accumulation sweep, siting metric, contributions, and determinism contracts."""

import numpy as np
import pytest

from siterank.combinatorics import binomial
from siterank.dataset import AliasMap, Objective, ObjectiveSpec, ScaledMatrix, orient_and_scale
from siterank.ranking import (
    LengthAccumulator,
    RankingError,
    accumulate_length,
    contributions,
    parse_length_range,
    run_sweep,
    siting_metric,
    variance_by_length,
    worker_pool,
)

from .conftest import random_matrix, small_spec, synthetic_table
from .oracle import dense_sweep


def three_site_matrix() -> ScaledMatrix:
    spec = small_spec(2, binary_every=None)
    values = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])
    return ScaledMatrix(values=values, site_ids=["s1", "s2", "s3"], spec=spec)


def full_accumulators(matrix: ScaledMatrix) -> dict[int, LengthAccumulator]:
    return {s: accumulate_length(matrix, s) for s in range(1, matrix.m + 1)}


class TestAccumulateLength:
    def test_three_sites_singletons(self):
        acc = accumulate_length(three_site_matrix(), 1)
        assert np.allclose(acc.obs_ratio, [1.0, 0.0, 1.0])
        assert np.allclose(acc.contrib_counts, [[1, 0], [0, 0], [0, 1]])
        assert acc.combos_done == 2

    def test_three_sites_full_pair(self):
        acc = accumulate_length(three_site_matrix(), 2)
        assert np.allclose(acc.obs_ratio, [1 / 3, 1 / 3, 1 / 3])
        assert np.allclose(acc.contrib_counts, np.ones((3, 2)))

    def test_worked_combination_outer_product(self, worked_matrix):
        # subset (2, 3, 5): front is rows 3 and 4, so those rows gain one
        # count at exactly columns 2, 3, and 5
        from siterank.combinatorics import rank

        acc = accumulate_length(worked_matrix, 3)
        k = rank(5, (2, 3, 5))
        single = _accumulate_single_combination(worked_matrix, 3, k)
        expected_rows = np.zeros((4, 5))
        expected_rows[2, [1, 2, 4]] = 1.0
        expected_rows[3, [1, 2, 4]] = 1.0
        assert np.array_equal(single.contrib_counts, expected_rows)
        assert acc.combos_done == binomial(5, 3)

    def test_resume_mismatch_rejected(self):
        matrix = three_site_matrix()
        done = accumulate_length(matrix, 1)
        with pytest.raises(RankingError, match="length"):
            accumulate_length(matrix, 2, resume=done)

    def test_resume_continues_where_left_off(self, rng):
        # chunk size fixes the float merge grouping, so the comparison run
        # must use the same chunk as the interrupted one
        matrix = random_matrix(rng, 20, 5)
        full = accumulate_length(matrix, 3, chunk=2)
        captured: list[LengthAccumulator] = []
        accumulate_length(matrix, 3, chunk=2, checkpoint_stride=4, checkpoint_fn=lambda a: captured.append(a.copy()))
        mid = next(a for a in captured if not a.is_complete())
        resumed = accumulate_length(matrix, 3, resume=mid, chunk=2)
        assert np.array_equal(resumed.obs_ratio, full.obs_ratio)
        assert np.array_equal(resumed.contrib_counts, full.contrib_counts)


def _accumulate_single_combination(matrix, s, k):
    """Accumulator state contributed by exactly one combination rank."""
    before = LengthAccumulator.empty(matrix.n, matrix.m, s)
    states = []
    accumulate_length(matrix, s, chunk=1, checkpoint_stride=1, checkpoint_fn=lambda a: states.append(a.copy()))
    after_k = next(a for a in states if a.combos_done == k)
    before_k = next((a for a in states if a.combos_done == k - 1), before)
    delta = LengthAccumulator.empty(matrix.n, matrix.m, s)
    delta.obs_ratio = after_k.obs_ratio - before_k.obs_ratio
    delta.contrib_counts = after_k.contrib_counts - before_k.contrib_counts
    return delta


class TestSitingMetric:
    def test_three_site_example(self):
        scores = siting_metric(full_accumulators(three_site_matrix()), ["s1", "s2", "s3"])
        assert np.allclose(scores.summed_ratio, [4 / 3, 1 / 3, 4 / 3])
        assert np.allclose(scores.metric, [1.0, 0.0, 1.0])

    def test_unique_maximum_scores_one(self, rng):
        matrix = random_matrix(rng, 15, 4)
        scores = siting_metric(full_accumulators(matrix), matrix.site_ids)
        assert scores.metric.max() == 1.0
        assert scores.metric.min() == 0.0
        # metric preserves the summed-ratio ordering
        assert np.array_equal(np.argsort(scores.metric), np.argsort(scores.summed_ratio))

    def test_constant_sum_warns_and_zeroes(self):
        spec = small_spec(1, binary_every=None)
        matrix = ScaledMatrix(np.array([[0.5], [0.5]]), ["a", "b"], spec)
        accs = full_accumulators(matrix)
        with pytest.warns(UserWarning, match="constant"):
            scores = siting_metric(accs, matrix.site_ids)
        assert np.array_equal(scores.metric, [0.0, 0.0])

    def test_incomplete_accumulator_rejected(self):
        matrix = three_site_matrix()
        accs = full_accumulators(matrix)
        accs[2].combos_done -= 1
        with pytest.raises(RankingError, match="incomplete"):
            siting_metric(accs)


class TestContributions:
    def test_row_normalization_matches_rounded_display(self):
        # a length's count row [0.3, 0.5, 2, 0.7, 0.1] normalizes to
        # [0.08, 0.14, 0.56, 0.19, 0.03] at two decimals, summing to 1
        row = np.array([[0.3, 0.5, 2.0, 0.7, 0.1]])
        from siterank.ranking import _row_normalize

        normalized = _row_normalize(row)
        assert np.allclose(np.round(normalized, 2), [[0.08, 0.14, 0.56, 0.19, 0.03]])
        assert np.isclose(normalized.sum(), 1.0)

    def test_zero_rows_stay_zero(self):
        matrix = three_site_matrix()
        accs = full_accumulators(matrix)
        result = contributions(accs)
        # site s2 is on no singleton front: its length-1 row is all zero
        assert np.array_equal(result.by_length[1][1], [0.0, 0.0])
        assert result.importance.min() >= 0.0

    def test_nonzero_rows_sum_to_one(self, rng):
        for _ in range(10):
            matrix = random_matrix(rng, int(rng.integers(3, 15)), int(rng.integers(2, 6)))
            result = contributions(full_accumulators(matrix))
            for s, nc in result.by_length.items():
                sums = nc.sum(axis=1)
                nz = sums > 0
                assert np.allclose(sums[nz], 1.0, atol=1e-12)
            sc_sums = result.importance.sum(axis=1)
            assert np.allclose(sc_sums[sc_sums > 0], 1.0, atol=1e-12)


class TestVariance:
    def test_constant_mass_has_zero_variance(self):
        spec = small_spec(1, binary_every=None)
        matrix = ScaledMatrix(np.array([[0.5], [0.5]]), ["a", "b"], spec)
        var = variance_by_length(full_accumulators(matrix))
        assert var[0] == 0.0

    def test_three_site_singleton_variance(self):
        var = variance_by_length(full_accumulators(three_site_matrix()))
        assert np.isclose(var[0], 2 / 9)

    def test_singleton_variance_small_on_large_uniform_data(self, rng):
        matrix = random_matrix(rng, 500, 6, binary_every=None)
        accs = {1: accumulate_length(matrix, 1)}
        var1 = accs[1].obs_ratio.var()
        assert var1 < 0.05


class TestSweepOracleEquivalence:
    def test_worked_matrix_full_sweep(self, worked_matrix):
        matrix = ScaledMatrix(worked_matrix.values[:, [1, 2, 4]], worked_matrix.site_ids, small_spec(3, None))
        result = run_sweep(matrix)
        reference = dense_sweep(matrix.values)
        assert np.allclose(result.obs_by_length, reference["nr"], atol=1e-12)
        assert np.allclose(result.summed_ratio, reference["sr"], atol=1e-12)
        assert np.allclose(result.metric, reference["metric"], atol=1e-12)
        assert np.allclose(result.importance, reference["sc"], atol=1e-12)
        assert np.allclose(result.variance, reference["variance"], atol=1e-12)

    def test_random_instances_match_dense_oracle(self):
        rng = np.random.default_rng(777)
        for trial in range(40):
            n = int(rng.integers(2, 13))
            m = int(rng.integers(2, 7))
            matrix = random_matrix(rng, n, m)
            result = run_sweep(matrix)
            reference = dense_sweep(matrix.values)
            accs = full_accumulators(matrix)
            for s in range(1, m + 1):
                assert np.allclose(accs[s].obs_ratio, reference["nr"][s - 1], atol=1e-12), f"trial {trial} s={s}"
                assert np.array_equal(accs[s].contrib_counts, reference["oc"][s - 1]), f"trial {trial} s={s}"
            assert np.allclose(result.summed_ratio, reference["sr"], atol=1e-12)
            assert np.allclose(result.metric, reference["metric"], atol=1e-12)
            assert np.allclose(result.importance, reference["sc"], atol=1e-12)


class TestNormalizationInvariants:
    def test_mass_per_length_equals_combination_count(self, rng):
        for _ in range(10):
            matrix = random_matrix(rng, int(rng.integers(2, 20)), int(rng.integers(2, 7)))
            for s in range(1, matrix.m + 1):
                acc = accumulate_length(matrix, s)
                assert np.isclose(acc.obs_ratio.sum(), binomial(matrix.m, s), atol=1e-9)

    def test_full_length_mass_is_reciprocal_front_size(self, rng):
        from siterank.pareto import non_dominated_mask

        for _ in range(10):
            matrix = random_matrix(rng, int(rng.integers(2, 20)), int(rng.integers(2, 6)))
            acc = accumulate_length(matrix, matrix.m)
            mask = non_dominated_mask(matrix, tuple(range(1, matrix.m + 1)))
            front = int(mask.sum())
            expected = np.where(mask, 1.0 / front, 0.0)
            assert np.allclose(acc.obs_ratio, expected, atol=1e-12)

    def test_duplicating_a_site_leaves_other_contrib_counts_alone(self, rng):
        matrix = random_matrix(rng, 10, 4)
        accs = full_accumulators(matrix)
        dup_values = np.vstack([matrix.values, matrix.values[4]])
        dup_matrix = ScaledMatrix(dup_values, matrix.site_ids + ["dup"], matrix.spec)
        for s in range(1, matrix.m + 1):
            extended = accumulate_length(dup_matrix, s)
            assert np.array_equal(extended.contrib_counts[:10][np.arange(10) != 4], accs[s].contrib_counts[np.arange(10) != 4])

    def test_positive_column_scaling_is_absorbed(self, rng):
        spec = small_spec(4, binary_every=None)
        table = synthetic_table(rng, 12, spec)
        base = run_sweep(orient_and_scale(table))
        for record in table.records:
            record.raw_objectives = record.raw_objectives * np.array([1.0, 3.7, 1.0, 1.0])
        rescaled = run_sweep(orient_and_scale(table))
        assert np.array_equal(base.summed_ratio, rescaled.summed_ratio)
        assert np.array_equal(base.metric, rescaled.metric)
        assert np.array_equal(base.importance, rescaled.importance)


class TestDeterminismAndParallelism:
    def test_worker_counts_agree_bitwise(self, rng):
        matrix = random_matrix(rng, 25, 5)
        results = {}
        for workers in (1, 2, 8):
            results[workers] = run_sweep(matrix, workers=workers, chunk=3)
        assert results[1].canonical_bytes() == results[2].canonical_bytes() == results[8].canonical_bytes()

    def test_chunk_boundaries_not_worker_count_fix_the_merge(self, rng):
        matrix = random_matrix(rng, 18, 5)
        a = run_sweep(matrix, workers=1, chunk=4)
        b = run_sweep(matrix, workers=2, chunk=4)
        assert a.canonical_bytes() == b.canonical_bytes()

    def test_pool_reuse_across_lengths(self, rng):
        matrix = random_matrix(rng, 12, 4)
        serial = {s: accumulate_length(matrix, s) for s in range(1, 5)}
        with worker_pool(matrix.values, 2) as pool:
            for s in range(1, 5):
                parallel = accumulate_length(matrix, s, pool=pool)
                assert np.array_equal(parallel.obs_ratio, serial[s].obs_ratio)
                assert np.array_equal(parallel.contrib_counts, serial[s].contrib_counts)


class TestRunSweep:
    def test_partial_range_returns_none(self, rng, tmp_path):
        matrix = random_matrix(rng, 8, 4)
        assert run_sweep(matrix, s_range=[1, 2], checkpoint_dir=tmp_path) is None

    def test_split_ranges_equal_single_run(self, rng, tmp_path):
        matrix = random_matrix(rng, 8, 6)
        full = run_sweep(matrix)
        assert run_sweep(matrix, s_range=[1, 2, 3], checkpoint_dir=tmp_path) is None
        merged = run_sweep(matrix, s_range=[4, 5, 6], checkpoint_dir=tmp_path)
        assert merged is not None
        assert merged.canonical_bytes() == full.canonical_bytes()

    def test_rerun_skips_completed_lengths(self, rng, tmp_path):
        matrix = random_matrix(rng, 8, 4)
        first = run_sweep(matrix, checkpoint_dir=tmp_path)
        messages = []
        second = run_sweep(matrix, checkpoint_dir=tmp_path, log_fn=messages.append)
        assert second.canonical_bytes() == first.canonical_bytes()
        assert all("skipping" in msg for msg in messages[:4])

    def test_alias_backfill_copies_kept_rows(self, rng):
        matrix = random_matrix(rng, 6, 3)
        aliases = AliasMap({"S2": ["S2-dup", "S2-bis"]})
        result = run_sweep(matrix, aliases=aliases)
        idx = {sid: i for i, sid in enumerate(result.site_ids)}
        assert result.metric[idx["S2-dup"]] == result.metric[idx["S2"]]
        assert np.array_equal(result.importance[idx["S2-bis"]], result.importance[idx["S2"]])
        assert len(result.site_ids) == 8

    def test_unknown_alias_owner_rejected(self, rng):
        matrix = random_matrix(rng, 4, 3)
        with pytest.raises(RankingError, match="unknown site id"):
            run_sweep(matrix, aliases=AliasMap({"nope": ["x"]}))

    def test_result_json_round_trip(self, rng):
        from siterank.ranking import RankResult
        import json

        result = run_sweep(random_matrix(rng, 6, 3))
        again = RankResult.from_json_dict(json.loads(result.canonical_bytes()))
        assert again.canonical_bytes() == result.canonical_bytes()


class TestParseLengthRange:
    def test_forms(self):
        assert parse_length_range("all", 5) == [1, 2, 3, 4, 5]
        assert parse_length_range("", 3) == [1, 2, 3]
        assert parse_length_range("1-3", 6) == [1, 2, 3]
        assert parse_length_range("2,5", 6) == [2, 5]
        assert parse_length_range("1-2,4", 6) == [1, 2, 4]

    def test_out_of_range(self):
        with pytest.raises(RankingError):
            parse_length_range("0-2", 4)
        with pytest.raises(RankingError):
            parse_length_range("5", 4)
