"""Local metric projection, grid binning and unit assignment.

Positions are projected with an equirectangular plane anchored at the grid
origin, then binned into square cells. Cells are linked to metro-station
neighbourhoods (3x3 blocks) and to street polygons (centroid containment).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import shapely
from shapely.geometry import Polygon, shape

EARTH_RADIUS_M = 6_371_000.0


class GridError(ValueError):
    pass


def _check_coords(lon, lat) -> None:
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if not (np.all(np.isfinite(lon)) and np.all(np.isfinite(lat))):
        raise GridError("non-finite coordinate")
    if np.any(np.abs(lon) > 180.0):
        raise GridError(f"longitude out of range [-180, 180]: {lon[np.abs(lon) > 180.0].ravel()[0]}")
    if np.any(np.abs(lat) > 90.0):
        raise GridError(f"latitude out of range [-90, 90]: {lat[np.abs(lat) > 90.0].ravel()[0]}")


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float]
    cell_size: float = 500.0

    def __post_init__(self):
        if not self.cell_size > 0:
            raise GridError(f"cell_size must be positive, got {self.cell_size}")
        _check_coords(self.origin[0], self.origin[1])
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    def with_cell_size(self, cell_size: float) -> "GridSpec":
        return GridSpec(self.origin, cell_size)


class CellId(NamedTuple):
    row: int
    col: int

    def label(self) -> str:
        return f"{self.row}_{self.col}"


def haversine_m(lon1, lat1, lon2, lat2):
    """Great-circle distance in metres; accepts scalars or arrays."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=float)) for v in (lon1, lat1, lon2, lat2))
    a = np.sin((lat2 - lat1) / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return d if d.ndim else float(d)


def project_arrays(lon, lat, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    _check_coords(lon, lat)
    lon0, lat0 = spec.origin
    k = math.pi / 180.0
    x = EARTH_RADIUS_M * (np.asarray(lon, dtype=float) - lon0) * k * math.cos(lat0 * k)
    y = EARTH_RADIUS_M * (np.asarray(lat, dtype=float) - lat0) * k
    return x, y


def unproject_arrays(x, y, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    lon0, lat0 = spec.origin
    k = math.pi / 180.0
    lon = lon0 + np.asarray(x, dtype=float) / (EARTH_RADIUS_M * k * math.cos(lat0 * k))
    lat = lat0 + np.asarray(y, dtype=float) / (EARTH_RADIUS_M * k)
    return lon, lat


def project(pos: tuple[float, float], spec: GridSpec) -> tuple[float, float]:
    x, y = project_arrays(pos[0], pos[1], spec)
    return float(x), float(y)


def unproject(xy: tuple[float, float], spec: GridSpec) -> tuple[float, float]:
    lon, lat = unproject_arrays(xy[0], xy[1], spec)
    return float(lon), float(lat)


def to_cells(lon, lat, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised cell indices ``(rows, cols)`` for coordinate arrays."""
    x, y = project_arrays(lon, lat, spec)
    rows = np.floor(y / spec.cell_size).astype(np.int64)
    cols = np.floor(x / spec.cell_size).astype(np.int64)
    return rows, cols


def to_cell(pos: tuple[float, float], spec: GridSpec) -> CellId:
    x, y = project(pos, spec)
    return CellId(math.floor(y / spec.cell_size), math.floor(x / spec.cell_size))


def cell_center(cell: CellId, spec: GridSpec) -> tuple[float, float]:
    c = spec.cell_size
    return unproject(((cell.col + 0.5) * c, (cell.row + 0.5) * c), spec)


@dataclass(frozen=True)
class Station:
    station_id: str
    lon: float
    lat: float
    ridership: float | None = None


@dataclass(frozen=True)
class Street:
    street_id: str
    polygon: Polygon


def _as_polygon(street_id: str, geom) -> Polygon:
    if not isinstance(geom, shapely.geometry.base.BaseGeometry):
        geom = Polygon(geom)
    if geom.geom_type == "Polygon":
        ring = list(geom.exterior.coords)
        distinct = {tuple(p) for p in ring}
        if len(distinct) < 3:
            raise GridError(f"street {street_id!r}: degenerate polygon (< 3 vertices)")
    elif geom.geom_type == "MultiPolygon":
        for part in geom.geoms:
            _as_polygon(street_id, part)
    else:
        raise GridError(f"street {street_id!r}: expected Polygon, got {geom.geom_type}")
    return geom


def make_street(street_id: str, geom) -> Street:
    return Street(str(street_id), _as_polygon(str(street_id), geom))


@dataclass(frozen=True)
class UnitMap:
    """Immutable cell -> unit lookup tables for the station and street scales."""

    spec: GridSpec
    stations: tuple[Station, ...]
    streets: tuple[Street, ...]
    cell_to_stations: Mapping[CellId, tuple[str, ...]] = field(repr=False)
    cell_to_street: Mapping[CellId, str] = field(repr=False)

    @property
    def station_ids(self) -> list[str]:
        return [s.station_id for s in self.stations]

    @property
    def street_ids(self) -> list[str]:
        return [s.street_id for s in self.streets]

    def station_cells(self, station_id: str) -> list[CellId]:
        return sorted(c for c, ids in self.cell_to_stations.items() if station_id in ids)


def station_block(station: Station, spec: GridSpec) -> list[CellId]:
    center = to_cell((station.lon, station.lat), spec)
    return [CellId(center.row + dr, center.col + dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]


def cells_in_bbox(bbox: Sequence[float], spec: GridSpec) -> list[CellId]:
    min_lon, min_lat, max_lon, max_lat = bbox
    (r0, r1), (c0, c1) = to_cells([min_lon, max_lon], [min_lat, max_lat], spec)
    return [CellId(r, c) for r in range(int(r0), int(r1) + 1) for c in range(int(c0), int(c1) + 1)]


def build_unit_map(
    stations: Iterable[Station],
    streets: Iterable[Street],
    spec: GridSpec,
    bbox: Sequence[float] | None = None,
) -> UnitMap:
    """Assign grid cells to station neighbourhoods and street polygons.

    Each station claims the 3x3 block of cells around its own cell; blocks
    may overlap. Each cell inside ``bbox`` goes to the first street polygon
    (in input order) covering the cell centroid. ``bbox`` defaults to the
    total bounds of the streets.
    """
    stations = tuple(stations)
    streets = tuple(make_street(s.street_id, s.polygon) for s in streets)
    for st in stations:
        _check_coords(st.lon, st.lat)

    cell_to_stations: dict[CellId, list[str]] = {}
    for st in stations:
        for cell in station_block(st, spec):
            cell_to_stations.setdefault(cell, []).append(st.station_id)

    cell_to_street: dict[CellId, str] = {}
    if streets:
        if bbox is None:
            bbox = shapely.total_bounds([s.polygon for s in streets])
        cells = cells_in_bbox(bbox, spec)
        c = spec.cell_size
        rows = np.array([cell.row for cell in cells], dtype=float)
        cols = np.array([cell.col for cell in cells], dtype=float)
        clon, clat = unproject_arrays((cols + 0.5) * c, (rows + 0.5) * c, spec)
        unassigned = np.ones(len(cells), dtype=bool)
        for street in streets:
            hit = unassigned & shapely.intersects_xy(street.polygon, clon, clat)
            for i in np.flatnonzero(hit):
                cell_to_street[cells[i]] = street.street_id
            unassigned &= ~hit

    return UnitMap(
        spec=spec,
        stations=stations,
        streets=streets,
        cell_to_stations=MappingProxyType({k: tuple(v) for k, v in sorted(cell_to_stations.items())}),
        cell_to_street=MappingProxyType(dict(sorted(cell_to_street.items()))),
    )


def read_stations_csv(path: str | Path) -> list[Station]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"station_id", "lon", "lat"} - set(reader.fieldnames or ())
        if missing:
            raise GridError(f"stations file {path}: missing columns {sorted(missing)}")
        for rec in reader:
            rid = rec.get("ridership")
            out.append(
                Station(
                    rec["station_id"],
                    float(rec["lon"]),
                    float(rec["lat"]),
                    float(rid) if rid not in (None, "") else None,
                )
            )
    return out


def read_streets_geojson(path: str | Path) -> list[Street]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise GridError(f"streets file {path}: expected a GeoJSON FeatureCollection")
    out = []
    for feat in doc.get("features", []):
        props = feat.get("properties") or {}
        if "street_id" not in props:
            raise GridError(f"streets file {path}: feature without street_id property")
        out.append(make_street(str(props["street_id"]), shape(feat["geometry"])))
    return out
