"""Shared fixtures and brute-force reference implementations used as test oracles."""

from __future__ import annotations

import math
from itertools import groupby
from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"
MINI = FIXTURES / "mini"
EARTH_R = 6_371_000.0


@pytest.fixture
def mini_dir() -> Path:
    return MINI


def great_circle(lon1, lat1, lon2, lat2) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_R * math.asin(min(1.0, math.sqrt(h)))


def reference_chains(events, s_sched=500.0, s_stay=100.0, end_of_data=None):
    """Event-by-event rebuild of the stay chains.

    ``events`` are ``RawEvent``-like objects. Returns ``{bike: (segments, trips)}``
    where each segment is a list of ``(lon, lat, arrive, depart)``.
    """
    events = list(events)
    eod = max(e.timestamp for e in events) if end_of_data is None else end_of_data
    order = {"unlock": 0, "lock": 1}
    out = {}
    keyed = sorted(events, key=lambda e: (e.bike_id, e.timestamp, order[e.kind], e.lon, e.lat))
    for bike, grp in groupby(keyed, key=lambda e: e.bike_id):
        evs = list(grp)
        kept = []
        for i, e in enumerate(evs):
            if e.kind == "lock" and i > 0 and evs[i - 1].kind == "lock":
                continue  # later lock of a run
            if e.kind == "unlock" and i + 1 < len(evs) and evs[i + 1].kind == "unlock":
                continue  # earlier unlock of a run
            kept.append(e)
        trips = sum(1 for a, b in zip(kept, kept[1:]) if a.kind == "unlock" and b.kind == "lock")
        segments = [[]]
        for i, e in enumerate(kept):
            if e.kind != "lock":
                continue
            nxt = kept[i + 1] if i + 1 < len(kept) else None
            depart = nxt.timestamp if nxt is not None else eod
            segments[-1].append([(e.lon, e.lat, e.timestamp, depart)])
            if nxt is not None and great_circle(e.lon, e.lat, nxt.lon, nxt.lat) > s_sched:
                segments.append([])
        merged = []
        for seg in segments:
            if not seg:
                continue
            runs = [seg[0]]
            for cand in seg[1:]:
                prev = runs[-1][-1]
                if great_circle(prev[0], prev[1], cand[0][0], cand[0][1]) <= s_stay:
                    runs[-1].append(cand[0])
                else:
                    runs.append(cand)
            stays = []
            for run in runs:
                if len(run) == 1:
                    stays.append(run[0])
                    continue
                w = [d - a for _, _, a, d in run]
                tot = sum(w)
                if tot > 0:
                    lon = sum(wi * r[0] for wi, r in zip(w, run)) / tot
                    lat = sum(wi * r[1] for wi, r in zip(w, run)) / tot
                else:
                    lon = sum(r[0] for r in run) / len(run)
                    lat = sum(r[1] for r in run) / len(run)
                stays.append((lon, lat, run[0][2], run[-1][3]))
            merged.append(stays)
        out[bike] = (merged, trips)
    return out


def brute_force_loops(segments_cells):
    """For each stay, scan backwards for the latest earlier stay in the same cell."""
    found = []
    for s, cells in enumerate(segments_cells):
        for j in range(len(cells)):
            for i in range(j - 1, -1, -1):
                if cells[i] == cells[j]:
                    found.append((s, i, j))
                    break
    return found


def closed_form(segments_cells) -> int:
    return sum(len(c) - len(set(c)) for c in segments_cells)


def lattice_rook(side: int) -> np.ndarray:
    """Dense binary rook adjacency of a ``side x side`` lattice."""
    n = side * side
    A = np.zeros((n, n))
    for r in range(side):
        for c in range(side):
            i = r * side + c
            if r + 1 < side:
                A[i, i + side] = A[i + side, i] = 1
            if c + 1 < side:
                A[i, i + 1] = A[i + 1, i] = 1
    return A


ACCEPTANCE: dict[int, str] = {}


class Verdict:
    def __init__(self, number: int):
        self.number = number

    def __call__(self, name: str, checks: dict[str, bool], detail: str = "") -> None:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"criterion {self.number} {'PASS' if ok else 'FAIL'}: {name}"
        if detail:
            line += f" [{detail}]"
        if failed:
            line += f" failed: {', '.join(failed)}"
        ACCEPTANCE[self.number] = line
        print(line)
        assert ok, line


@pytest.fixture
def verdict(request):
    number = int(request.node.get_closest_marker("criterion").args[0])
    yield Verdict(number)
    ACCEPTANCE.setdefault(number, f"criterion {number} FAIL: raised before reaching a verdict")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
