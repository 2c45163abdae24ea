"""Shared fixtures and synthetic data helpers."""

from __future__ import annotations

import numpy as np
import pytest

from siterank.dataset import Objective, ObjectiveSpec, ScaledMatrix, SiteRecord, SiteTable


def small_spec(m: int, binary_every: int | None = 3, seed_names: str = "obj") -> ObjectiveSpec:
    """m-objective spec; every binary_every-th column is binary, first column state-scoped."""
    objectives = []
    for j in range(m):
        kind = "binary" if binary_every and j % binary_every == binary_every - 1 else "continuous"
        objectives.append(
            Objective(
                name=f"{seed_names}_{j + 1}",
                direction="maximize",
                kind=kind,
                category="socioeconomic",
                scope="state" if j == 0 else "site",
            )
        )
    return ObjectiveSpec(tuple(objectives))


def random_matrix(rng: np.random.Generator, n: int, m: int, binary_every: int | None = 3) -> ScaledMatrix:
    """Random scaled matrix with mixed continuous/binary columns, values in [0, 1]."""
    spec = small_spec(m, binary_every)
    values = rng.random((n, m))
    for j in spec.binary_columns():
        values[:, j] = rng.integers(0, 2, n).astype(float)
    # coarse rounding manufactures ties, which exercise duplicate-row handling
    values = np.round(values, 2)
    return ScaledMatrix(values=values, site_ids=[f"S{i}" for i in range(n)], spec=spec)


def synthetic_table(rng: np.random.Generator, n: int, spec: ObjectiveSpec, n_states: int = 4) -> SiteTable:
    """Random site table whose state-scoped columns are constant within a state."""
    state_values = {
        st: {j: float(np.round(rng.uniform(0, 50), 3)) for j in spec.state_columns()} for st in range(1, n_states + 1)
    }
    records = []
    for i in range(n):
        st = int(rng.integers(1, n_states + 1))
        vals = np.empty(spec.m)
        for j, obj in enumerate(spec.objectives):
            if obj.scope == "state":
                base = state_values[st][j]
                vals[j] = float(base >= 25.0) if obj.kind == "binary" else base
            elif obj.kind == "binary":
                vals[j] = float(rng.integers(0, 2))
            else:
                vals[j] = float(np.round(rng.uniform(0, 100), 4))
        records.append(
            SiteRecord(
                registry_id=f"T{i:04d}",
                site_type="coal" if i % 3 else "brownfield",
                longitude=float(np.round(rng.uniform(-120, -70), 4)),
                latitude=float(np.round(rng.uniform(26, 48), 4)),
                county_fips=1000 + st,
                state_fips=st,
                raw_objectives=vals,
            )
        )
    return SiteTable(records, spec)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)


@pytest.fixture
def worked_matrix() -> ScaledMatrix:
    """4 x 5 matrix whose columns 2, 3, 5 hold the hand-checked dominance block.

    On those columns row 4 dominates rows 1 and 2, row 3 dominates row 2,
    and rows 3 and 4 are mutually non-dominated, so the front is rows 3, 4.
    """
    spec = small_spec(5, binary_every=None)
    values = np.array(
        [
            [0.10, 0.2023, 0.6605, 0.30, 0.6158],
            [0.20, 0.0729, 0.2907, 0.40, 0.5883],
            [0.30, 0.3935, 0.5107, 0.50, 0.9067],
            [0.40, 0.4777, 0.7118, 0.60, 0.6409],
        ]
    )
    return ScaledMatrix(values=values, site_ids=["row1", "row2", "row3", "row4"], spec=spec)
