"""Single-pass self-loop identification and intensity aggregation.

Each segment of a bike chain is walked once with a ``cell -> last visit``
record. A revisit emits a loop from the recorded visit to the current one and
refreshes the record, so every segment yields ``stays - distinct cells``
loops.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .gridmap import CellId, GridSpec, UnitMap, to_cell, to_cells
from .ingest import BikeChain, StayTable, format_ts_array

SCALES = ("grid", "station", "street")


class LoopError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class SelfLoopEvent:
    bike_id: str
    cell: CellId
    start: int
    end: int


def detect_self_loops(chain: BikeChain, spec: GridSpec) -> list[SelfLoopEvent]:
    loops = []
    for segment in chain.segments:
        record: dict[CellId, int] = {}
        for stay in segment:
            cell = to_cell(stay.position, spec)
            seen = record.get(cell)
            if seen is not None:
                loops.append(SelfLoopEvent(chain.bike_id, cell, seen, stay.arrive))
            record[cell] = stay.arrive
    return loops


@dataclass
class LoopTable:
    """Columnar loop events; ``bike`` indexes ``bike_ids``."""

    bike_ids: np.ndarray
    bike: np.ndarray
    row: np.ndarray
    col: np.ndarray
    start: np.ndarray
    end: np.ndarray

    def __len__(self) -> int:
        return len(self.start)

    def events(self) -> list[SelfLoopEvent]:
        labels = self.bike_ids[self.bike]
        return [
            SelfLoopEvent(b, CellId(r, c), s, e)
            for b, r, c, s, e in zip(labels, self.row.tolist(), self.col.tolist(), self.start.tolist(), self.end.tolist())
        ]

    def cell_counts(self) -> Counter:
        return Counter(zip(self.row.tolist(), self.col.tolist()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bike_id", "row", "col", "start", "end"])
        if len(self):
            w.writerows(
                zip(
                    self.bike_ids[self.bike],
                    self.row.tolist(),
                    self.col.tolist(),
                    format_ts_array(self.start).tolist(),
                    format_ts_array(self.end).tolist(),
                )
            )
        return buf.getvalue()


def detect_loops_table(stays: StayTable, spec: GridSpec) -> LoopTable:
    """Same walk as :func:`detect_self_loops`, over a whole :class:`StayTable`."""
    empty = np.zeros(0, dtype=np.int64)
    if len(stays) == 0:
        return LoopTable(stays.bike_ids, empty, empty, empty, empty, empty)
    rows, cols = to_cells(stays.lon, stays.lat, spec)
    seg = stays.segment.tolist()
    arrive = stays.arrive.tolist()
    keys = list(zip(rows.tolist(), cols.tolist()))
    hits, starts = [], []
    record: dict = {}
    cur = None
    for i, key in enumerate(keys):
        if seg[i] != cur:
            record.clear()
            cur = seg[i]
        seen = record.get(key)
        if seen is not None:
            hits.append(i)
            starts.append(seen)
        record[key] = arrive[i]
    idx = np.array(hits, dtype=np.int64)
    return LoopTable(
        bike_ids=stays.bike_ids,
        bike=stays.bike[idx],
        row=rows[idx],
        col=cols[idx],
        start=np.array(starts, dtype=np.int64),
        end=stays.arrive[idx],
    )


@dataclass(frozen=True)
class IntensityTable:
    scale: str
    rows: dict[str, float]
    observation_days: int
    counts: dict[str, int]

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        buf.write(header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["unit_id", "intensity"])
        for unit, value in self.rows.items():
            w.writerow([unit, repr(float(value))])
        return buf.getvalue()


def _cell_totals(events) -> Counter:
    if isinstance(events, LoopTable):
        return events.cell_counts()
    return Counter((e.cell.row, e.cell.col) for e in events)


def aggregate_intensity(
    events: LoopTable | Iterable[SelfLoopEvent],
    units: UnitMap | None,
    scale: str,
    observation_days: int,
) -> IntensityTable:
    """Loops per day for each unit at ``scale``.

    Grid rows list only cells with loops, in (row, col) order. Station and
    street rows list every unit in map order, zeros included. A cell inside
    several station blocks counts toward each of them.
    """
    if scale not in SCALES:
        raise LoopError(f"unknown scale {scale!r}; expected one of {SCALES}")
    if int(observation_days) < 1 or observation_days != int(observation_days):
        raise LoopError(f"observation_days must be a positive integer, got {observation_days}")
    days = int(observation_days)
    cells = _cell_totals(events)

    if scale == "grid":
        counts = {CellId(*k).label(): n for k, n in sorted(cells.items())}
    else:
        if units is None:
            raise LoopError(f"scale {scale!r} needs a UnitMap")
        if scale == "station":
            counts = dict.fromkeys(units.station_ids, 0)
            for key, n in sorted(cells.items()):
                for sid in units.cell_to_stations.get(CellId(*key), ()):
                    counts[sid] += n
        else:
            counts = dict.fromkeys(units.street_ids, 0)
            for key, n in sorted(cells.items()):
                sid = units.cell_to_street.get(CellId(*key))
                if sid is not None:
                    counts[sid] += n
    return IntensityTable(scale, {k: v / days for k, v in counts.items()}, days, counts)


def total_trips(chains: Sequence[BikeChain] | StayTable) -> int:
    if isinstance(chains, StayTable):
        return chains.n_trips
    return sum(c.n_trips for c in chains)


def self_loop_proportion(events, chains: Sequence[BikeChain] | StayTable) -> float:
    """Total loops over total completed (non-repositioning) trips."""
    trips = total_trips(chains)
    if trips <= 0:
        raise LoopError("self-loop proportion undefined: zero trips")
    return len(events) / trips
