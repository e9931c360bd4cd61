"""Lock/unlock event parsing and per-bike mobility chains.

The heavy lifting is columnar: :func:`read_events` yields an
:class:`EventTable` and :func:`build_stay_table` turns it into a
:class:`StayTable` with vectorised numpy passes. :func:`parse_events` and
:func:`build_chains` are the object-level views of the same computation.
"""

from __future__ import annotations

import csv
import gzip
import io
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np
import pandas as pd

from .gridmap import haversine_m

UNLOCK = 0
LOCK = 1
KINDS = ("unlock", "lock")
COLUMNS = ("bike_id", "timestamp", "lon", "lat", "kind")


class IngestError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class RawEvent:
    bike_id: str
    timestamp: int  # epoch seconds, UTC
    lon: float
    lat: float
    kind: str  # "lock" | "unlock"


@dataclass(frozen=True, slots=True)
class StayPoint:
    bike_id: str
    lon: float
    lat: float
    arrive: int
    depart: int

    @property
    def position(self) -> tuple[float, float]:
        return (self.lon, self.lat)


@dataclass(frozen=True)
class BikeChain:
    bike_id: str
    segments: tuple[tuple[StayPoint, ...], ...]
    n_trips: int = 0
    n_locks: int = 0
    n_orphan_locks: int = 0
    n_orphan_unlocks: int = 0
    n_merged: int = 0
    n_repositioned: int = 0

    @property
    def n_stays(self) -> int:
        return sum(len(s) for s in self.segments)


def format_ts(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def format_ts_array(ts: np.ndarray) -> np.ndarray:
    return np.char.add(np.datetime_as_string(np.asarray(ts, dtype="datetime64[s]"), unit="s"), "Z")


@dataclass
class EventTable:
    """Columnar event store; ``bike`` holds codes into the sorted ``bike_ids``."""

    bike_ids: np.ndarray
    bike: np.ndarray
    t: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    kind: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_events(cls, events: Iterable[RawEvent]) -> "EventTable":
        events = list(events)
        labels = np.array([e.bike_id for e in events], dtype=object)
        codes, uniques = pd.factorize(labels, sort=True)
        kind = []
        for e in events:
            if e.kind not in KINDS:
                raise IngestError(f"unknown event kind {e.kind!r}")
            kind.append(KINDS.index(e.kind))
        return cls(
            bike_ids=np.asarray(uniques, dtype=object),
            bike=codes.astype(np.int64),
            t=np.array([e.timestamp for e in events], dtype=np.int64),
            lon=np.array([e.lon for e in events], dtype=float),
            lat=np.array([e.lat for e in events], dtype=float),
            kind=np.array(kind, dtype=np.int8),
        )

    def to_events(self) -> list[RawEvent]:
        labels = self.bike_ids[self.bike]
        return [
            RawEvent(b, int(t), float(x), float(y), KINDS[k])
            for b, t, x, y, k in zip(labels, self.t.tolist(), self.lon.tolist(), self.lat.tolist(), self.kind.tolist())
        ]

    def sort_order(self) -> np.ndarray:
        # unlock (0) before lock (1) at equal timestamps; lon/lat make the key total
        return np.lexsort((self.lat, self.lon, self.kind, self.t, self.bike))

    def take(self, idx: np.ndarray) -> "EventTable":
        return EventTable(self.bike_ids, self.bike[idx], self.t[idx], self.lon[idx], self.lat[idx], self.kind[idx])


def _open_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    else:
        data = source.read()
        if isinstance(data, str):
            data = data.encode("utf-8")
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _floats(col: Sequence[str]) -> np.ndarray:
    try:
        return np.array(col, dtype=float)
    except ValueError:
        return pd.to_numeric(pd.Series(col, dtype=object), errors="coerce").to_numpy(dtype=float)


def _numpy_datetimes(arr: np.ndarray) -> np.ndarray | None:
    """Naive or ``Z``-suffixed ISO strings via numpy; None if anything else shows up."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            return np.char.rstrip(arr, "Z").astype("datetime64[s]")
    except (ValueError, TypeError, DeprecationWarning, UserWarning):
        return None


def _timestamps(col: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Parse epoch-second or ISO-8601 strings; returns (seconds, valid mask)."""
    n = len(col)
    try:
        return np.array(col, dtype=np.int64), np.ones(n, dtype=bool)
    except (ValueError, OverflowError):
        pass
    arr = np.char.strip(np.array(col, dtype=str))
    out = np.zeros(n, dtype=np.int64)
    valid = np.zeros(n, dtype=bool)
    digits = np.char.isdigit(arr)
    if digits.any():
        out[digits] = arr[digits].astype(np.int64)
        valid[digits] = True
    rest = np.flatnonzero(~digits)
    if rest.size:
        fast = _numpy_datetimes(arr[rest])
        if fast is not None:
            ok = ~np.isnat(fast)
            out[rest[ok]] = fast[ok].astype(np.int64)
            valid[rest[ok]] = True
            return out, valid
        parsed = pd.to_datetime(pd.Series(arr[rest]), format="ISO8601", utc=True, errors="coerce")
        ok = parsed.notna().to_numpy()
        ns = parsed.to_numpy(dtype="datetime64[ns]").astype(np.int64)
        out[rest[ok]] = np.floor_divide(ns[ok], 1_000_000_000)
        valid[rest[ok]] = True
    return out, valid


def _read_typed(text: str) -> dict | None:
    """C-parser fast path for clean files; None sends the caller to the row-by-row path."""
    try:
        df = pd.read_csv(
            io.StringIO(text),
            dtype={"bike_id": str, "timestamp": str, "kind": str, "lon": float, "lat": float},
            keep_default_na=False,
            na_filter=False,
            skipinitialspace=False,
        )
    except (ValueError, pd.errors.ParserError):
        return None
    if len(df.columns) != 5 or df.isna().to_numpy().any():
        return None
    return {c: df[c].to_numpy() for c in COLUMNS}


def read_events(source, strict: bool = False) -> tuple[EventTable, int]:
    """Parse the ``bike_id,timestamp,lon,lat,kind`` CSV wire format.

    ``source`` may be a path (``.gz`` handled transparently), raw bytes or a
    binary stream. Returns the parsed table, in input order, and the number of
    rejected rows. A bad header is always fatal; with ``strict`` so is any
    bad row.
    """
    text = _open_bytes(source).decode("utf-8-sig")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise IngestError("empty events file: header required")
    header = [h.strip() for h in header]
    if sorted(header) != sorted(COLUMNS):
        raise IngestError(f"malformed header {header!r}; expected {','.join(COLUMNS)}")
    pos = [header.index(c) for c in COLUMNS]

    fast = _read_typed(text)
    if fast is not None:
        good = None
        bad_len = 0
        bike_col, ts_col, lon_col, lat_col, kind_col = (fast[c] for c in COLUMNS)
    else:
        rows = [r for r in reader if r]
        good = [r for r in rows if len(r) == 5]
        bad_len = len(rows) - len(good)
        if strict and bad_len:
            first = next(i for i, r in enumerate(rows) if len(r) != 5)
            raise IngestError(f"row {first + 2}: expected 5 fields, got {len(rows[first])}")
        if good:
            cols = list(zip(*good))
            bike_col, ts_col, lon_col, lat_col, kind_col = (cols[p] for p in pos)
        else:
            bike_col = ts_col = lon_col = lat_col = kind_col = ()

    lon = _floats(lon_col)
    lat = _floats(lat_col)
    t, t_ok = _timestamps(ts_col)
    kinds = np.array(kind_col, dtype=str) if len(kind_col) else np.array([], dtype=str)
    kind = np.where(kinds == "lock", LOCK, np.where(kinds == "unlock", UNLOCK, -1)).astype(np.int8)
    if np.any(kind < 0):
        norm = np.char.lower(np.char.strip(kinds))
        kind = np.where(norm == "lock", LOCK, np.where(norm == "unlock", UNLOCK, -1)).astype(np.int8)
    labels = np.array(bike_col, dtype=object)
    labels_ok = np.array([bool(b) for b in bike_col], dtype=bool)

    ok = (
        t_ok
        & labels_ok
        & (kind >= 0)
        & np.isfinite(lon)
        & np.isfinite(lat)
        & (np.abs(lon) <= 180.0)
        & (np.abs(lat) <= 90.0)
    )
    if strict and not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        row = [bike_col[bad], ts_col[bad], lon_col[bad], lat_col[bad], kind_col[bad]]
        raise IngestError(f"malformed event row {bad + 2}: {row!r}")
    rejected = bad_len + int((~ok).sum())

    codes, uniques = pd.factorize(labels[ok], sort=True)
    table = EventTable(
        bike_ids=np.asarray(uniques, dtype=object),
        bike=codes.astype(np.int64),
        t=t[ok],
        lon=lon[ok],
        lat=lat[ok],
        kind=kind[ok],
    )
    return table, rejected


def parse_events(stream, strict: bool = False) -> tuple[list[RawEvent], int]:
    """Object-level parse: ``(events in input order, rejected row count)``."""
    table, rejected = read_events(stream, strict=strict)
    return table.to_events(), rejected


@dataclass
class StayTable:
    """Merged stay points of all bikes, ordered by (bike, arrive).

    Per-bike counters are indexed by bike code.
    """

    bike_ids: np.ndarray
    bike: np.ndarray
    segment: np.ndarray  # globally unique, nondecreasing
    lon: np.ndarray
    lat: np.ndarray
    arrive: np.ndarray
    depart: np.ndarray
    trips: np.ndarray
    locks: np.ndarray
    orphan_locks: np.ndarray
    orphan_unlocks: np.ndarray
    merged: np.ndarray
    repositioned: np.ndarray
    end_of_data: int = 0
    _chains: list | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.arrive)

    @property
    def n_trips(self) -> int:
        return int(self.trips.sum())

    def to_chains(self) -> list[BikeChain]:
        if self._chains is not None:
            return self._chains
        chains = []
        bounds = np.flatnonzero(np.r_[True, self.bike[1:] != self.bike[:-1]]) if len(self) else np.array([], int)
        starts = dict(zip(self.bike[bounds].tolist(), bounds.tolist()))
        ends = dict(zip(self.bike[bounds].tolist(), np.r_[bounds[1:], len(self)].astype(int).tolist()))
        lon, lat, arr, dep, seg = (a.tolist() for a in (self.lon, self.lat, self.arrive, self.depart, self.segment))
        for code, label in enumerate(self.bike_ids):
            segments: list[tuple[StayPoint, ...]] = []
            if code in starts:
                cur: list[StayPoint] = []
                cur_seg = None
                for i in range(starts[code], ends[code]):
                    if seg[i] != cur_seg and cur:
                        segments.append(tuple(cur))
                        cur = []
                    cur_seg = seg[i]
                    cur.append(StayPoint(label, lon[i], lat[i], arr[i], dep[i]))
                if cur:
                    segments.append(tuple(cur))
            if not segments and self.locks[code] == 0 and self.trips[code] == 0:
                continue
            chains.append(
                BikeChain(
                    bike_id=label,
                    segments=tuple(segments),
                    n_trips=int(self.trips[code]),
                    n_locks=int(self.locks[code]),
                    n_orphan_locks=int(self.orphan_locks[code]),
                    n_orphan_unlocks=int(self.orphan_unlocks[code]),
                    n_merged=int(self.merged[code]),
                    n_repositioned=int(self.repositioned[code]),
                )
            )
        self._chains = chains
        return chains


def _stays_for_block(bike, t, lon, lat, kind, n_bikes, s_sched, s_stay, eod):
    def _count(codes, weights=None):
        return np.bincount(codes, weights=weights, minlength=n_bikes)

    same_next = np.r_[bike[1:] == bike[:-1], False]
    same_prev = np.r_[False, same_next[:-1]]
    prev_kind = np.r_[-1, kind[:-1]]
    next_kind = np.r_[kind[1:], -1]
    is_lock = kind == LOCK
    orphan_lock = is_lock & same_prev & (prev_kind == LOCK)
    orphan_unlock = ~is_lock & same_next & (next_kind == UNLOCK)
    counts = {
        "locks": _count(bike[is_lock]),
        "orphan_locks": _count(bike[orphan_lock]),
        "orphan_unlocks": _count(bike[orphan_unlock]),
    }

    keep = ~(orphan_lock | orphan_unlock)
    bike, t, lon, lat, kind = bike[keep], t[keep], lon[keep], lat[keep], kind[keep]
    # kept events alternate within each bike
    same_next = np.r_[bike[1:] == bike[:-1], False]
    counts["trips"] = _count(bike[(kind == UNLOCK) & same_next])

    li = np.flatnonzero(kind == LOCK)
    has_next = same_next[li]
    ni = np.minimum(li + 1, len(t) - 1)
    depart = np.where(has_next, t[ni], eod)
    disp = np.where(has_next, haversine_m(lon[li], lat[li], lon[ni], lat[ni]), 0.0) if li.size else np.zeros(0)
    repos = has_next & (disp > s_sched)

    sb, sx, sy, sa = bike[li], lon[li], lat[li], t[li]
    first_of_bike = np.r_[True, sb[1:] != sb[:-1]] if li.size else np.zeros(0, bool)
    seg_start = first_of_bike | np.r_[False, repos[:-1]] if li.size else first_of_bike
    step = haversine_m(sx[:-1], sy[:-1], sx[1:], sy[1:]) if li.size > 1 else np.zeros(0)
    grp_start = seg_start | np.r_[False, step > s_stay] if li.size else seg_start
    gid = np.cumsum(grp_start) - 1
    n_groups = int(grp_start.sum())

    head = np.flatnonzero(grp_start)
    tail = np.r_[head[1:] - 1, li.size - 1].astype(np.int64) if li.size else head
    gx, gy = sx[head].astype(float), sy[head].astype(float)
    size = np.bincount(gid, minlength=n_groups)
    multi = np.flatnonzero(size > 1)
    if multi.size:
        w = (depart - sa).astype(float)
        wsum = np.bincount(gid, weights=w, minlength=n_groups)
        wx = np.bincount(gid, weights=w * sx, minlength=n_groups)
        wy = np.bincount(gid, weights=w * sy, minlength=n_groups)
        ux = np.bincount(gid, weights=sx, minlength=n_groups)
        uy = np.bincount(gid, weights=sy, minlength=n_groups)
        for g in multi:
            if wsum[g] > 0:
                gx[g], gy[g] = wx[g] / wsum[g], wy[g] / wsum[g]
            else:
                gx[g], gy[g] = ux[g] / size[g], uy[g] / size[g]

    counts["merged"] = _count(sb) - _count(sb[head])
    counts["repositioned"] = _count(sb[repos])
    stays = {
        "bike": sb[head],
        "segment": (np.cumsum(seg_start) - 1)[head],
        "lon": gx,
        "lat": gy,
        "arrive": sa[head],
        "depart": depart[tail],
    }
    return stays, {k: v.astype(np.int64) for k, v in counts.items()}


def build_stay_table(
    table: EventTable,
    s_sched: float = 500.0,
    s_stay: float = 100.0,
    threads: int = 1,
    end_of_data: int | None = None,
) -> StayTable:
    """Sort, de-orphan, split at repositioning and merge stays, columnar.

    Bikes are partitioned into ``threads`` contiguous code ranges; results are
    concatenated in bike order so the output does not depend on ``threads``.
    """
    if not s_sched > 0:
        raise IngestError(f"s_sched must be positive, got {s_sched}")
    if not s_stay >= 0:
        raise IngestError(f"s_stay must be non-negative, got {s_stay}")
    if len(table) == 0:
        raise IngestError("no events to process")
    eod = int(table.t.max()) if end_of_data is None else int(end_of_data)
    st = table.take(table.sort_order())
    n_bikes = len(table.bike_ids)

    threads = max(1, int(threads))
    cuts = np.searchsorted(st.bike, np.linspace(0, n_bikes, threads + 1).round().astype(np.int64))
    blocks = [(int(a), int(b)) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]

    def work(block):
        a, b = block
        return _stays_for_block(st.bike[a:b], st.t[a:b], st.lon[a:b], st.lat[a:b], st.kind[a:b], n_bikes, s_sched, s_stay, eod)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]

    offset = 0
    segs = []
    for stays, _ in parts:
        segs.append(stays["segment"] + offset)
        if len(stays["segment"]):
            offset += int(stays["segment"][-1]) + 1

    def cat(key):
        return np.concatenate([p[0][key] for p in parts])

    def total(key):
        return np.sum([p[1][key] for p in parts], axis=0)

    return StayTable(
        bike_ids=table.bike_ids,
        bike=cat("bike"),
        segment=np.concatenate(segs),
        lon=cat("lon"),
        lat=cat("lat"),
        arrive=cat("arrive"),
        depart=cat("depart"),
        trips=total("trips"),
        locks=total("locks"),
        orphan_locks=total("orphan_locks"),
        orphan_unlocks=total("orphan_unlocks"),
        merged=total("merged"),
        repositioned=total("repositioned"),
        end_of_data=eod,
    )


def build_chains(
    events: Sequence[RawEvent] | EventTable,
    s_sched: float = 500.0,
    s_stay: float = 100.0,
    threads: int = 1,
) -> list[BikeChain]:
    """Group events per bike into segmented stay-point chains.

    A lock followed by the next unlock is one candidate stay at the lock
    position. A displacement above ``s_sched`` across that locked interval is
    operator repositioning and starts a new segment. Consecutive stays within
    ``s_stay`` merge into one stay at their duration-weighted centroid.
    Repeated locks (or unlocks) keep only the first lock (last unlock); the
    rest are dropped and counted as orphans.
    """
    table = events if isinstance(events, EventTable) else EventTable.from_events(events)
    return build_stay_table(table, s_sched, s_stay, threads=threads).to_chains()
