"""Site table ingestion, coordinate-truncation dedup, and objective scaling.

Raw per-site objective values arrive as CSV rows. They leave this module as
a ScaledMatrix: every column oriented so larger is better and min-max scaled
to [0, 1], which is the only form the ranking sweep ever sees.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import warnings
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np

DIRECTIONS = ("maximize", "minimize")
KINDS = ("continuous", "binary")
CATEGORIES = ("socioeconomic", "safety", "proximity")
SCOPES = ("site", "state")
SITE_TYPES = ("coal", "brownfield")

# contiguous-US bounding box (lon_min, lon_max, lat_min, lat_max)
CONUS_BOUNDS = (-125.0, -66.0, 24.0, 50.0)

META_COLUMNS = ("registry_id", "site_type", "longitude", "latitude", "county_fips", "state_fips")


class DatasetError(ValueError):
    """Raised for malformed input tables or objective configuration."""


@dataclass(frozen=True)
class Objective:
    """Configuration for one objective column."""

    name: str
    direction: str = "maximize"
    kind: str = "continuous"
    category: str = "socioeconomic"
    scope: str = "site"  # "state" marks columns constant within a state (FIPS-keyed)

    def __post_init__(self):
        if not self.name:
            raise DatasetError("objective name must be nonempty")
        for value, allowed, label in (
            (self.direction, DIRECTIONS, "direction"),
            (self.kind, KINDS, "kind"),
            (self.category, CATEGORIES, "category"),
            (self.scope, SCOPES, "scope"),
        ):
            if value not in allowed:
                raise DatasetError(f"objective {self.name!r}: {label} must be one of {allowed}, got {value!r}")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Ordered objective configuration; column order is fixed by this spec."""

    objectives: tuple[Objective, ...]

    def __post_init__(self):
        if not self.objectives:
            raise DatasetError("objective spec must contain at least one objective")
        names = [o.name for o in self.objectives]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise DatasetError(f"duplicate objective names: {dupes}")

    @property
    def m(self) -> int:
        return len(self.objectives)

    @property
    def names(self) -> list[str]:
        return [o.name for o in self.objectives]

    def minimize_mask(self) -> np.ndarray:
        return np.array([o.direction == "minimize" for o in self.objectives], dtype=bool)

    def binary_columns(self) -> list[int]:
        return [j for j, o in enumerate(self.objectives) if o.kind == "binary"]

    def continuous_columns(self) -> list[int]:
        return [j for j, o in enumerate(self.objectives) if o.kind == "continuous"]

    def state_columns(self) -> list[int]:
        return [j for j, o in enumerate(self.objectives) if o.scope == "state"]

    def site_columns(self) -> list[int]:
        return [j for j, o in enumerate(self.objectives) if o.scope == "site"]

    def to_json_dict(self) -> dict:
        return {
            "objectives": [
                {
                    "name": o.name,
                    "direction": o.direction,
                    "kind": o.kind,
                    "category": o.category,
                    "scope": o.scope,
                }
                for o in self.objectives
            ]
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ObjectiveSpec":
        try:
            entries = data["objectives"]
        except (KeyError, TypeError):
            raise DatasetError("objective spec JSON must contain an 'objectives' list")
        objectives = []
        for entry in entries:
            if "name" not in entry:
                raise DatasetError("every objective entry needs a 'name'")
            objectives.append(
                Objective(
                    name=entry["name"],
                    direction=entry.get("direction", "maximize"),
                    kind=entry.get("kind", "continuous"),
                    category=entry.get("category", "socioeconomic"),
                    scope=entry.get("scope", "site"),
                )
            )
        return cls(tuple(objectives))

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ObjectiveSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass
class SiteRecord:
    """One candidate site row: identity, location, and raw objective values."""

    registry_id: str
    site_type: str
    longitude: float
    latitude: float
    county_fips: int
    state_fips: int
    raw_objectives: np.ndarray


@dataclass
class SiteTable:
    """Parsed site records together with the objective spec they follow."""

    records: list[SiteRecord]
    spec: ObjectiveSpec

    @property
    def n(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [r.registry_id for r in self.records]

    def raw_matrix(self) -> np.ndarray:
        return np.array([r.raw_objectives for r in self.records], dtype=np.float64)


@dataclass
class AliasMap:
    """Kept site id -> ids removed as coordinate-grid duplicates.

    Downstream results for removed ids are back-filled from their kept
    representative.
    """

    kept_to_removed: dict[str, list[str]] = field(default_factory=dict)

    def removed_ids(self) -> list[str]:
        return [rid for removed in self.kept_to_removed.values() for rid in removed]

    def n_removed(self) -> int:
        return sum(len(v) for v in self.kept_to_removed.values())

    def to_json_dict(self) -> dict:
        return {"kept_to_removed": self.kept_to_removed}

    @classmethod
    def from_json_dict(cls, data: dict) -> "AliasMap":
        return cls({str(k): [str(x) for x in v] for k, v in data.get("kept_to_removed", {}).items()})


@dataclass
class ScaledMatrix:
    """Oriented, min-max scaled n x m analysis matrix with aligned site ids."""

    values: np.ndarray
    site_ids: list[str]
    spec: ObjectiveSpec

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def fingerprint(self) -> str:
        """Content hash used to tie checkpoints and models to one dataset."""
        h = hashlib.sha256()
        h.update(f"{self.n}x{self.m}".encode())
        h.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        for sid in self.site_ids:
            h.update(sid.encode())
            h.update(b"\x00")
        for o in self.spec.objectives:
            h.update(f"{o.name}|{o.direction}|{o.kind}".encode())
            h.update(b"\x00")
        return h.hexdigest()


def _open_text(source) -> io.TextIOBase:
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8"))
    if hasattr(source, "read"):
        probe = source.read(0)
        if isinstance(probe, bytes):
            return io.TextIOWrapper(source, encoding="utf-8", newline="")
        return source
    raise DatasetError(f"unsupported input source: {type(source)!r}")


def parse_sites(source, spec: ObjectiveSpec, validate_coords: bool = False) -> SiteTable:
    """Parse delimited site rows into a SiteTable.

    The header must name every meta column and every objective in ``spec``;
    any other column is rejected. Errors carry the 1-based data row index
    and the offending column name.
    """
    fh = _open_text(source)
    reader = csv.DictReader(fh)
    if reader.fieldnames is None:
        raise DatasetError("input has no header row")
    header = [h.strip() for h in reader.fieldnames]

    missing_meta = [c for c in META_COLUMNS if c not in header]
    if missing_meta:
        raise DatasetError(f"missing required columns: {missing_meta}")
    known = set(META_COLUMNS) | set(spec.names)
    unknown = [c for c in header if c not in known]
    if unknown:
        raise DatasetError(f"unknown objective columns: {unknown}")
    missing_obj = [name for name in spec.names if name not in header]
    if missing_obj:
        raise DatasetError(f"missing objective columns: {missing_obj}")

    records: list[SiteRecord] = []
    seen_ids: set[str] = set()
    for row_idx, row in enumerate(reader, start=1):
        records.append(_parse_row(row, row_idx, spec, validate_coords, seen_ids))
    if not records:
        raise DatasetError("no sites: input contains a header but no data rows")
    return SiteTable(records, spec)


def _parse_row(row: dict, row_idx: int, spec: ObjectiveSpec, validate_coords: bool, seen_ids: set[str]) -> SiteRecord:
    def fail(column: str, detail: str):
        raise DatasetError(f"row {row_idx}, column {column!r}: {detail}")

    def text(column: str) -> str:
        value = row.get(column)
        if value is None or value.strip() == "":
            fail(column, "missing value")
        return value.strip()

    def number(column: str) -> float:
        raw = text(column)
        try:
            value = float(raw)
        except ValueError:
            fail(column, f"not a number: {raw!r}")
        if not np.isfinite(value):
            fail(column, f"non-finite value: {raw!r}")
        return value

    def integer(column: str) -> int:
        raw = text(column)
        try:
            return int(raw)
        except ValueError:
            fail(column, f"not an integer: {raw!r}")

    registry_id = text("registry_id")
    if registry_id in seen_ids:
        fail("registry_id", f"duplicate registry_id {registry_id!r}")
    seen_ids.add(registry_id)

    site_type = text("site_type").lower()
    if site_type not in SITE_TYPES:
        fail("site_type", f"must be one of {SITE_TYPES}, got {site_type!r}")

    longitude = number("longitude")
    latitude = number("latitude")
    if not -180.0 <= longitude <= 180.0:
        fail("longitude", f"out of range [-180, 180]: {longitude}")
    if not -90.0 <= latitude <= 90.0:
        fail("latitude", f"out of range [-90, 90]: {latitude}")
    if validate_coords:
        lon_min, lon_max, lat_min, lat_max = CONUS_BOUNDS
        if not (lon_min <= longitude <= lon_max and lat_min <= latitude <= lat_max):
            fail("longitude", f"({longitude}, {latitude}) outside the contiguous-US bounding box")

    objectives = np.array([number(name) for name in spec.names], dtype=np.float64)
    return SiteRecord(
        registry_id=registry_id,
        site_type=site_type,
        longitude=longitude,
        latitude=latitude,
        county_fips=integer("county_fips"),
        state_fips=integer("state_fips"),
        raw_objectives=objectives,
    )


def _truncate_key(value: float, precision: Decimal) -> int:
    # Digit-drop truncation toward zero; Decimal avoids float grid artifacts
    # like -81.46 / 0.01 landing a hair past the integer it prints as.
    return int(Decimal(repr(value)) / precision)


def truncate_dedup(table: SiteTable, precision: float = 0.01) -> tuple[SiteTable, AliasMap]:
    """Collapse sites sharing a truncated (lon, lat) key to the first occurrence.

    Truncation is toward zero (digit drop), so -81.4682 keys with -81.46.
    The AliasMap records every removal so results can be back-filled later.
    """
    if precision <= 0:
        raise DatasetError(f"precision must be positive, got {precision}")
    quantum = Decimal(repr(precision))
    kept: list[SiteRecord] = []
    aliases: dict[str, list[str]] = {}
    first_by_key: dict[tuple[int, int], str] = {}
    for record in table.records:
        key = (_truncate_key(record.longitude, quantum), _truncate_key(record.latitude, quantum))
        owner = first_by_key.get(key)
        if owner is None:
            first_by_key[key] = record.registry_id
            kept.append(record)
        else:
            aliases.setdefault(owner, []).append(record.registry_id)
    return SiteTable(kept, table.spec), AliasMap(aliases)


def orient_and_scale(table: SiteTable, spec: ObjectiveSpec | None = None) -> ScaledMatrix:
    """Negate minimize columns, then min-max scale every column to [0, 1].

    Constant columns cannot affect dominance and map to 0.5 with a warning.
    """
    spec = spec or table.spec
    if table.n < 1:
        raise DatasetError("cannot scale an empty table")
    raw = table.raw_matrix()
    if raw.shape[1] != spec.m:
        raise DatasetError(f"table has {raw.shape[1]} objective columns, spec expects {spec.m}")
    if not np.isfinite(raw).all():
        bad = np.argwhere(~np.isfinite(raw))[0]
        raise DatasetError(f"non-finite value at row {bad[0] + 1}, objective {spec.names[bad[1]]!r}")

    oriented = raw.copy()
    oriented[:, spec.minimize_mask()] *= -1.0

    scaled = np.empty_like(oriented)
    for j in range(spec.m):
        col = oriented[:, j]
        lo, hi = col.min(), col.max()
        if hi == lo:
            warnings.warn(
                f"objective {spec.names[j]!r} is constant; scaled to 0.5 (uninformative for dominance)",
                stacklevel=2,
            )
            scaled[:, j] = 0.5
        else:
            scaled[:, j] = (col - lo) / (hi - lo)
    return ScaledMatrix(values=scaled, site_ids=table.ids(), spec=spec)


def default_spec() -> ObjectiveSpec:
    """The 22-objective configuration shipped with the tool.

    Directions are configuration, not code; this default minimizes
    restriction/hazard/protected-land counts, social vulnerability, labor
    rate, and substation/transportation distances, and maximizes the rest.
    """
    so, sa, px = CATEGORIES
    entries = [
        ("Number of Nuclear Restrictions in the State", "minimize", "continuous", so, "state"),
        ("State Electricity Price", "maximize", "continuous", so, "state"),
        ("State Net Electricity Imports", "maximize", "continuous", so, "state"),
        ("State Nuclear Inclusive Policy", "maximize", "binary", so, "state"),
        ("Population Sentiment Towards Nuclear Energy", "maximize", "continuous", so, "site"),
        ("Traditional Regulation In The Energy Market", "maximize", "binary", so, "state"),
        ("5-Year Average Labor Rate", "minimize", "continuous", so, "state"),
        ("Social Vulnerability Index", "minimize", "continuous", so, "site"),
        ("Number of Intersecting Protected Lands", "minimize", "continuous", sa, "site"),
        ("Number of Hazardous Facilities in 5 Miles", "minimize", "continuous", sa, "site"),
        ("No Fault Line Intersection", "maximize", "binary", sa, "site"),
        ("No Landslide Area", "maximize", "binary", sa, "site"),
        ("Having A Peak Ground Acceleration Lower Than 0.3g", "maximize", "binary", sa, "site"),
        ("Not Having A Flood in Previous 100 Years", "maximize", "binary", sa, "site"),
        ("No Open Water Or Wetland Intersection", "maximize", "binary", sa, "site"),
        ("Having A Slope Lower Than 12 Percent", "maximize", "binary", sa, "site"),
        ("Population Center Distance", "maximize", "continuous", px, "site"),
        ("Retiring Facility Distance", "maximize", "continuous", px, "site"),
        ("Existing Nuclear R&D Center in 100 Miles", "maximize", "continuous", px, "site"),
        ("Electricity Substation Distance", "minimize", "continuous", px, "site"),
        ("Transportation System Distance", "minimize", "continuous", px, "site"),
        ("Having A Streamflow with 50 Kgpm Flow in 20 Miles", "maximize", "continuous", px, "site"),
    ]
    return ObjectiveSpec(tuple(Objective(n, d, k, c, s) for n, d, k, c, s in entries))


DATASET_FORMAT_VERSION = 1


def _site_meta(record: SiteRecord) -> dict:
    return {
        "registry_id": record.registry_id,
        "site_type": record.site_type,
        "longitude": record.longitude,
        "latitude": record.latitude,
        "county_fips": record.county_fips,
        "state_fips": record.state_fips,
    }


@dataclass
class DatasetBundle:
    """Everything the rank/train commands need from one ingest run."""

    table: SiteTable
    matrix: ScaledMatrix
    aliases: AliasMap
    removed_meta: list[dict]

    def site_meta_index(self) -> dict[str, dict]:
        """Per-id location metadata for kept and dedup-removed sites alike."""
        index = {r.registry_id: _site_meta(r) for r in self.table.records}
        for meta in self.removed_meta:
            index[meta["registry_id"]] = meta
        return index


def save_dataset(
    path: str | Path,
    table: SiteTable,
    matrix: ScaledMatrix,
    aliases: AliasMap,
    removed_records: list[SiteRecord] | None = None,
) -> None:
    """Write the ingested dataset artifact consumed by rank/train commands."""
    payload = {
        "format_version": DATASET_FORMAT_VERSION,
        "spec": matrix.spec.to_json_dict(),
        "sites": [_site_meta(r) for r in table.records],
        "raw_values": table.raw_matrix().tolist(),
        "scaled_values": matrix.values.tolist(),
        "aliases": aliases.to_json_dict(),
        "removed_sites": [_site_meta(r) for r in removed_records or []],
        "fingerprint": matrix.fingerprint(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_dataset(path: str | Path) -> DatasetBundle:
    """Load a dataset artifact, verifying its stored fingerprint."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version: {payload.get('format_version')!r}")
    spec = ObjectiveSpec.from_json_dict(payload["spec"])
    raw = np.asarray(payload["raw_values"], dtype=np.float64)
    records = [
        SiteRecord(
            registry_id=s["registry_id"],
            site_type=s["site_type"],
            longitude=float(s["longitude"]),
            latitude=float(s["latitude"]),
            county_fips=int(s["county_fips"]),
            state_fips=int(s["state_fips"]),
            raw_objectives=raw[i],
        )
        for i, s in enumerate(payload["sites"])
    ]
    table = SiteTable(records, spec)
    matrix = ScaledMatrix(
        values=np.asarray(payload["scaled_values"], dtype=np.float64),
        site_ids=table.ids(),
        spec=spec,
    )
    if matrix.fingerprint() != payload["fingerprint"]:
        raise DatasetError("dataset fingerprint mismatch: file contents were altered")
    return DatasetBundle(
        table=table,
        matrix=matrix,
        aliases=AliasMap.from_json_dict(payload["aliases"]),
        removed_meta=list(payload.get("removed_sites", [])),
    )
