"""State-keyed lookup table with inverse-distance spatial interpolation.

Objective columns split two ways: state-scope columns are constant within a
state and come straight from a FIPS-keyed row, so every known state is
predicted exactly; site-scope columns are interpolated from the nearest
training sites in (lon, lat) degree space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from siterank.dataset import ObjectiveSpec, SiteTable

DEFAULT_NEIGHBORS = 3


class PredictorError(ValueError):
    """Raised for unbuildable tables or unanswerable queries."""


@dataclass
class LookupTable:
    """Immutable spatial + state-keyed store of raw objective rows."""

    spec: ObjectiveSpec
    site_ids: list[str]
    coords: np.ndarray  # (n, 2) lon, lat
    rows: np.ndarray  # (n, m) raw objective values
    state_rows: dict[int, np.ndarray]  # state_fips -> values at state-scope columns
    neighbors: int = DEFAULT_NEIGHBORS
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)
    _exact: dict[tuple[float, float], int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self._tree is None:
            self._tree = cKDTree(self.coords)
        if not self._exact:
            self._exact = {(float(lon), float(lat)): i for i, (lon, lat) in enumerate(self.coords)}

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    def predict(self, x, k: int | None = None) -> np.ndarray:
        return predict_objectives(self, x, k=k)


def build_lookup(table: SiteTable, spec: ObjectiveSpec | None = None, neighbors: int = DEFAULT_NEIGHBORS) -> LookupTable:
    """Index a deduplicated site table for objective prediction.

    Duplicate exact coordinates with conflicting objective rows are an
    error; they should have been collapsed by the coordinate dedup step.
    """
    spec = spec or table.spec
    if table.n < 1:
        raise PredictorError("cannot build a lookup table from an empty site table")
    coords = np.array([[r.longitude, r.latitude] for r in table.records], dtype=np.float64)
    rows = table.raw_matrix()

    seen: dict[tuple[float, float], int] = {}
    for i, (lon, lat) in enumerate(coords):
        key = (float(lon), float(lat))
        j = seen.get(key)
        if j is not None and not np.array_equal(rows[i], rows[j]):
            raise PredictorError(
                f"sites {table.records[j].registry_id!r} and {table.records[i].registry_id!r} share "
                f"coordinates {key} with conflicting objective rows; dedup the table first"
            )
        seen.setdefault(key, i)

    state_cols = spec.state_columns()
    state_rows: dict[int, np.ndarray] = {}
    for record in table.records:
        state_rows.setdefault(int(record.state_fips), record.raw_objectives[state_cols].copy())

    return LookupTable(
        spec=spec,
        site_ids=table.ids(),
        coords=coords,
        rows=rows,
        state_rows=state_rows,
        neighbors=neighbors,
    )


def predict_objectives(lut: LookupTable, x, k: int | None = None) -> np.ndarray:
    """Predict the full objective row for x = (lon, lat, county_fips, state_fips).

    Exact coordinate matches return the stored row unchanged. Otherwise
    state-scope columns come from the state row and site-scope columns are
    the 1/d weighted average of the k nearest training sites, with binary
    columns snapped to {0, 1} at 0.5.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (4,):
        raise PredictorError(f"query must be (lon, lat, county_fips, state_fips), got shape {x.shape}")
    lon, lat = float(x[0]), float(x[1])
    state_fips = int(x[3])

    hit = lut._exact.get((lon, lat))
    if hit is not None:
        return lut.rows[hit].copy()

    state_values = lut.state_rows.get(state_fips)
    if state_values is None:
        raise PredictorError(f"unknown state_fips {state_fips}: no training site in that state")

    k = lut.neighbors if k is None else k
    k = max(1, min(k, lut.n))
    distances, neighbor_idx = lut._tree.query([lon, lat], k=k)
    distances = np.atleast_1d(distances)
    neighbor_idx = np.atleast_1d(neighbor_idx)

    site_cols = lut.spec.site_columns()
    neighbor_vals = lut.rows[neighbor_idx][:, site_cols]
    zero = distances == 0.0
    if zero.any():
        site_values = neighbor_vals[int(np.flatnonzero(zero)[0])].copy()
    else:
        weights = 1.0 / distances
        site_values = weights @ neighbor_vals / weights.sum()

    prediction = np.empty(lut.spec.m)
    prediction[lut.spec.state_columns()] = state_values
    prediction[site_cols] = site_values
    for j in lut.spec.binary_columns():
        if j in site_cols:
            prediction[j] = 1.0 if prediction[j] >= 0.5 else 0.0
    return prediction
