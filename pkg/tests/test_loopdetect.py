import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from looplens.gridmap import CellId, GridSpec, Station, build_unit_map, cell_center, unproject
from looplens.ingest import BikeChain, EventTable, RawEvent, StayPoint, build_chains, build_stay_table, read_events
from looplens.loopdetect import (
    LoopError,
    SelfLoopEvent,
    aggregate_intensity,
    detect_loops_table,
    detect_self_loops,
    self_loop_proportion,
    total_trips,
)
from looplens.synthlab import SynthScenario, gen_trajectories

from conftest import brute_force_loops, closed_form

SPEC = GridSpec((121.4, 31.15), 500.0)


def chain_from_cells(segments, bike="b"):
    t = 0
    segs = []
    for cells in segments:
        stays = []
        for rc in cells:
            lon, lat = cell_center(CellId(*rc), SPEC)
            stays.append(StayPoint(bike, lon, lat, t, t + 50))
            t += 100
        segs.append(tuple(stays))
    return BikeChain(bike, tuple(segs))


def test_single_stay_no_loop():
    assert detect_self_loops(chain_from_cells([[(0, 0)]]), SPEC) == []


def test_revisits_anchor_at_latest_visit():
    g1, g2, g3 = (0, 0), (0, 1), (5, 5)
    loops = detect_self_loops(chain_from_cells([[g1, g2, g1, g3, g1]]), SPEC)
    assert loops == [
        SelfLoopEvent("b", CellId(*g1), 0, 200),
        SelfLoopEvent("b", CellId(*g1), 200, 400),
    ]


def test_record_resets_at_split():
    assert detect_self_loops(chain_from_cells([[(0, 0), (0, 1)], [(0, 0)]]), SPEC) == []


def test_consecutive_same_cell_counts():
    assert len(detect_self_loops(chain_from_cells([[(0, 0), (0, 0)]]), SPEC)) == 1


def random_cells(rng: random.Random):
    n_seg = rng.randint(1, 4)
    n_cells = rng.randint(1, 20)
    pool = [(rng.randint(-5, 5), rng.randint(-5, 5)) for _ in range(n_cells)]
    total = rng.randint(0, 200)
    cuts = sorted(rng.randint(0, total) for _ in range(n_seg - 1))
    seq = [rng.choice(pool) for _ in range(total)]
    return [seq[a:b] for a, b in zip([0, *cuts], [*cuts, total])]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_single_pass_matches_brute_force(seed):
    segments = random_cells(random.Random(seed))
    chain = chain_from_cells(segments)
    loops = detect_self_loops(chain, SPEC)
    ref = brute_force_loops(segments)
    assert len(loops) == len(ref) == closed_form(segments)
    flat = [s for seg in chain.segments for s in seg]
    offsets = [0]
    for seg in segments:
        offsets.append(offsets[-1] + len(seg))
    want = [
        SelfLoopEvent("b", CellId(*segments[s][j]), flat[offsets[s] + i].arrive, flat[offsets[s] + j].arrive)
        for s, i, j in ref
    ]
    assert sorted(loops, key=lambda e: e.end) == sorted(want, key=lambda e: e.end)
    for e in loops:
        assert e.start < e.end


def test_table_walk_matches_object_walk():
    rng = random.Random(3)
    events = []
    for b in range(20):
        t = 0
        for _ in range(rng.randint(2, 30)):
            r, c = rng.randint(0, 3), rng.randint(0, 3)
            lon, lat = cell_center(CellId(r, c), SPEC)
            events.append(RawEvent(f"b{b}", t, lon, lat, "unlock" if rng.random() < 0.5 else "lock"))
            t += rng.randint(1, 500)
    chains = build_chains(events)
    want = [e for c in chains for e in detect_self_loops(c, SPEC)]
    got = detect_loops_table(build_stay_table(EventTable.from_events(events)), SPEC).events()
    assert got == want


def test_empty_events_zero_table():
    um = build_unit_map([Station("m", *cell_center(CellId(0, 0), SPEC))], [], SPEC)
    tab = aggregate_intensity([], um, "station", 7)
    assert tab.rows == {"m": 0.0}
    assert aggregate_intensity([], um, "grid", 7).rows == {}


def test_fourteen_loops_fourteen_days():
    um = build_unit_map([Station("m", *cell_center(CellId(0, 0), SPEC))], [], SPEC)
    events = [SelfLoopEvent("b", CellId(1, 1), i, i + 1) for i in range(14)]
    assert aggregate_intensity(events, um, "station", 14).rows == {"m": 1.0}


def test_overlapping_stations_brute_force():
    stations = [Station("a", *cell_center(CellId(0, 0), SPEC)), Station("b", *cell_center(CellId(0, 2), SPEC))]
    um = build_unit_map(stations, [], SPEC)
    events = [SelfLoopEvent("x", CellId(0, c), 0, 1) for c in (0, 1, 1, 2, 2, 2)]
    tab = aggregate_intensity(events, um, "station", 1)
    for s in stations:
        centre = (0, 0) if s.station_id == "a" else (0, 2)
        want = sum(1 for e in events if abs(e.cell.row - centre[0]) <= 1 and abs(e.cell.col - centre[1]) <= 1)
        assert tab.counts[s.station_id] == want
    assert tab.counts == {"a": 3, "b": 5}


def test_unknown_scale():
    with pytest.raises(LoopError):
        aggregate_intensity([], None, "district", 1)


def test_grid_intensity_sums_to_total():
    events = [SelfLoopEvent("x", CellId(r, c), 0, 1) for r, c in [(0, 0), (0, 0), (3, -2), (-1, 4)]]
    tab = aggregate_intensity(events, None, "grid", 3)
    assert sum(tab.rows.values()) * 3 == pytest.approx(len(events))
    assert list(tab.rows) == ["-1_4", "0_0", "3_-2"]


def test_proportion_zero_and_error():
    chains = [BikeChain("b", (), n_trips=100)]
    assert self_loop_proportion([], chains) == 0.0
    with pytest.raises(LoopError):
        self_loop_proportion([], [BikeChain("b", ())])


def two_slots(cell):
    """Two positions in ``cell`` 200 m apart, too far to merge."""
    c = SPEC.cell_size
    x, y = (cell[1] + 0.5) * c, (cell[0] + 0.5) * c
    return unproject((x - 100, y), SPEC), unproject((x + 100, y), SPEC)


def test_trips_returning_to_origin_cell_give_proportion_one():
    events = []
    for b in range(5):
        slots = two_slots((0, 0))
        events.append(RawEvent(f"b{b}", 0, *slots[0], "lock"))
        for k in range(10):
            t = 200 * k
            events.append(RawEvent(f"b{b}", t + 100, *slots[k % 2], "unlock"))
            events.append(RawEvent(f"b{b}", t + 200, *slots[(k + 1) % 2], "lock"))
    chains = build_chains(events)
    loops = [e for c in chains for e in detect_self_loops(c, SPEC)]
    assert sum(c.n_stays for c in chains) == 55
    assert total_trips(chains) == 50
    assert self_loop_proportion(loops, chains) == 1.0


def test_proportion_nondecreasing_with_cell_size():
    sc = SynthScenario(seed=4, n_bikes=60, days=2)
    table, _ = read_events(gen_trajectories(sc).events_csv)
    stays = build_stay_table(table)
    props = [
        self_loop_proportion(detect_loops_table(stays, SPEC.with_cell_size(c)), stays) for c in (125, 250, 500, 1000)
    ]
    assert props == sorted(props)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_coarsening_never_decreases_loops(seed):
    rng = random.Random(seed)
    chain = chain_from_cells(random_cells(rng))
    counts = [len(detect_self_loops(chain, SPEC.with_cell_size(c))) for c in (125, 250, 500, 1000, 2000)]
    assert counts == sorted(counts)


def test_loop_csv_layout():
    a, b = two_slots((2, 3))
    events = [RawEvent("b", 0, *a, "lock"), RawEvent("b", 10, *a, "unlock"), RawEvent("b", 20, *b, "lock")]
    table = detect_loops_table(build_stay_table(EventTable.from_events(events)), SPEC)
    assert table.to_csv() == "bike_id,row,col,start,end\nb,2,3,1970-01-01T00:00:00Z,1970-01-01T00:00:20Z\n"
    assert Counter(table.cell_counts()) == {(2, 3): 1}
