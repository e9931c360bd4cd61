"""Seeded synthetic datasets with known ground truth.

Trajectory scenarios plant per-bike cell sequences whose loop counts are
known in closed form (stays minus distinct cells, per segment), and write
them in the same CSV/GeoJSON formats the pipeline reads. SAR and DML
generators plant model parameters.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np
import pandas as pd

from ._seeding import child_rng, derive_seed
from .gridmap import CellId, GridSpec, unproject_arrays
from .ingest import format_ts_array
from .sarmodel import ModelMatrix, rho_bounds
from .spatialstats import WeightsMatrix


class SynthError(ValueError):
    pass


# stay slots sit a quarter cell from the centre on both axes; two distinct
# slots, or slots in different cells, are at least c/2 - 2*jitter apart, which
# stays above the 100 m merge radius for cells of MIN_CELL metres or more
_SLOTS = ((-1, -1), (-1, 1), (1, -1), (1, 1))
_STAY_JITTER = 5.0
_UNLOCK_JITTER = 15.0
MIN_CELL = 240.0

COVARIATE_COLUMNS = (
    "average_age",
    "fixed_occ_pct",
    "nonresident_pct",
    "car_ownership",
    "work_poi",
    "residential_poi",
    "commercial_poi",
    "central",
    "university",
    "cbd",
    "hub",
    "bus_stations",
)


@dataclass(frozen=True)
class SynthScenario:
    seed: int = 0
    n_bikes: int = 100
    days: int = 2
    extent_m: float = 8000.0
    n_stations: int = 60
    street_grid: tuple[int, int] = (8, 8)
    loop_propensity: float = 0.3
    reposition_rate: float = 0.02
    trips_per_day: float = 6.0
    cell_size: float = 500.0
    origin: tuple[float, float] = (121.40, 31.15)
    start: str = "2023-08-01T00:00:00Z"

    def __post_init__(self):
        for name in ("loop_propensity", "reposition_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SynthError(f"{name} must be in [0, 1], got {v}")
        if not self.extent_m > 0:
            raise SynthError("extent_m must be positive")
        if self.cell_size < MIN_CELL:
            raise SynthError(f"cell_size must be >= {MIN_CELL:g} m so planted stays never merge")
        if self.extent_m < 4 * self.cell_size:
            raise SynthError("extent_m must cover at least 4 cells per side")
        if self.n_bikes < 1 or self.days < 1 or self.trips_per_day <= 0:
            raise SynthError("n_bikes, days and trips_per_day must be positive")
        if self.n_stations < 0 or min(self.street_grid) < 1:
            raise SynthError("invalid station count or street grid")
        object.__setattr__(self, "street_grid", tuple(int(v) for v in self.street_grid))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.origin, self.cell_size)

    @property
    def n_cells_side(self) -> int:
        return int(self.extent_m // self.cell_size)

    def start_epoch(self) -> int:
        return int(pd.Timestamp(self.start).timestamp())


TRUTH_SCHEMA = {
    "type": "object",
    "required": ["kind", "seed"],
    "properties": {"kind": {"enum": ["trajectories", "sar", "dml"]}, "seed": {"type": "integer"}},
    "allOf": [
        {
            "if": {"properties": {"kind": {"const": "trajectories"}}},
            "then": {
                "required": [
                    "scenario",
                    "grid",
                    "thresholds",
                    "n_events",
                    "total_loops",
                    "total_trips",
                    "total_stays",
                    "repositionings",
                    "cell_loops",
                ],
                "properties": {
                    "grid": {
                        "type": "object",
                        "required": ["origin", "cell_size"],
                        "properties": {
                            "origin": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                            "cell_size": {"type": "number", "exclusiveMinimum": 0},
                        },
                    },
                    "n_events": {"type": "integer", "minimum": 0},
                    "total_loops": {"type": "integer", "minimum": 0},
                    "total_trips": {"type": "integer", "minimum": 0},
                    "total_stays": {"type": "integer", "minimum": 0},
                    "repositionings": {"type": "integer", "minimum": 0},
                    "cell_loops": {
                        "type": "object",
                        "additionalProperties": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
        {
            "if": {"properties": {"kind": {"const": "sar"}}},
            "then": {
                "required": ["rho", "beta", "sigma", "n"],
                "properties": {
                    "rho": {"type": "number"},
                    "beta": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                    "sigma": {"type": "number", "minimum": 0},
                    "n": {"type": "integer", "minimum": 1},
                },
            },
        },
        {
            "if": {"properties": {"kind": {"const": "dml"}}},
            "then": {
                "required": ["theta", "g_form", "m_form", "noise", "n"],
                "properties": {
                    "theta": {"type": "number"},
                    "g_form": {"type": "string"},
                    "m_form": {"type": "string"},
                    "noise": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2},
                },
            },
        },
    ],
}


def validate_truth(truth: dict) -> dict:
    jsonschema.validate(truth, TRUTH_SCHEMA)
    return truth


def write_truth(path: str | Path, truth: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(validate_truth(truth), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_truth(path: str | Path) -> dict:
    return validate_truth(json.loads(Path(path).read_text(encoding="utf-8")))


def truth_path_for(dataset: str | Path) -> Path:
    p = Path(dataset)
    name = p.name
    for suffix in (".gz", ".csv", ".geojson", ".json"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return p.with_name(name + ".truth.json")


# -- trajectories ---------------------------------------------------------


def _bike_events(b: int, sc: SynthScenario, t0: int, t_end: int):
    rnd = random.Random(derive_seed(sc.seed, "bike", b))
    side = sc.n_cells_side
    c = sc.cell_size
    cycle = 86400.0 / sc.trips_per_day

    def place(cell, prev):
        # prev: (cell, slot) of the preceding stay in this segment
        if prev is not None and prev[0] == cell:
            slot = (prev[1] + 1 + rnd.randrange(3)) % 4
        else:
            slot = rnd.randrange(4)
        dx, dy = (v * c / 4 for v in _SLOTS[slot])
        x = (cell[1] + 0.5) * c + dx + rnd.uniform(-_STAY_JITTER, _STAY_JITTER)
        y = (cell[0] + 0.5) * c + dy + rnd.uniform(-_STAY_JITTER, _STAY_JITTER)
        return x, y, slot

    def fresh(origin, visited):
        for _ in range(30):
            r = origin[0] + rnd.randint(-4, 4)
            q = origin[1] + rnd.randint(-4, 4)
            if 0 <= r < side and 0 <= q < side and (r, q) not in visited and (r, q) != origin:
                return (r, q)
        free = [(r, q) for r in range(side) for q in range(side) if (r, q) not in visited and (r, q) != origin]
        if free:
            return free[rnd.randrange(len(free))]
        return origin

    def far_cell(origin):
        for _ in range(100):
            r = rnd.randrange(side)
            q = rnd.randrange(side)
            if max(abs(r - origin[0]), abs(q - origin[1])) >= 3:
                return (r, q)
        raise SynthError("extent too small for repositioning moves")

    events = []
    segments: list[list[tuple[int, int]]] = []
    cell = (rnd.randrange(side), rnd.randrange(side))
    t = t0 + rnd.randrange(3600)
    x, y, slot = place(cell, None)
    events.append((t, x, y, 1))
    seg = [cell]
    prev = (cell, slot)
    trips = repos = 0
    while True:
        dwell = max(60, int(rnd.uniform(0.2, 1.8) * cycle))
        duration = rnd.randint(120, 1800)
        t_unlock = t + dwell
        t_lock = t_unlock + duration
        if t_lock >= t_end:
            break
        if rnd.random() < sc.reposition_rate:
            origin = far_cell(prev[0])
            ux, uy, _ = place(origin, None)
            segments.append(seg)
            seg = []
            prev = None
            repos += 1
        else:
            origin = prev[0]
            ux = x + rnd.uniform(-_UNLOCK_JITTER, _UNLOCK_JITTER)
            uy = y + rnd.uniform(-_UNLOCK_JITTER, _UNLOCK_JITTER)
        events.append((t_unlock, ux, uy, 0))
        if rnd.random() < sc.loop_propensity:
            dest = origin
        else:
            dest = fresh(origin, set(seg))
        x, y, slot = place(dest, prev)
        events.append((t_lock, x, y, 1))
        seg.append(dest)
        prev = (dest, slot)
        trips += 1
        t = t_lock
    segments.append(seg)
    return events, segments, trips, repos


def closed_form_loops(segments) -> tuple[int, dict[CellId, int]]:
    """Loops implied by planted cell sequences: per segment, stays - distinct cells."""
    total = 0
    per_cell: dict[CellId, int] = {}
    for seg in segments:
        total += len(seg) - len(set(seg))
        seen = set()
        for cell in seg:
            if cell in seen:
                key = CellId(*cell)
                per_cell[key] = per_cell.get(key, 0) + 1
            seen.add(cell)
    return total, per_cell


@dataclass
class SynthTrajectories:
    events_csv: bytes
    truth: dict
    segments: dict[str, list[list[tuple[int, int]]]] = field(repr=False)


def gen_trajectories(sc: SynthScenario) -> SynthTrajectories:
    """Event CSV plus closed-form loop truth for a scenario."""
    t0 = sc.start_epoch()
    t_end = t0 + sc.days * 86400
    width = max(6, len(str(sc.n_bikes)))
    bikes, ts, xs, ys, kinds = [], [], [], [], []
    all_segments = {}
    total_loops = total_trips = total_repos = total_stays = 0
    cell_loops: dict[CellId, int] = {}
    for b in range(sc.n_bikes):
        label = f"B{b:0{width}d}"
        events, segments, trips, repos = _bike_events(b, sc, t0, t_end)
        for t, x, y, k in events:
            bikes.append(label)
            ts.append(t)
            xs.append(x)
            ys.append(y)
            kinds.append(k)
        loops, per_cell = closed_form_loops(segments)
        total_loops += loops
        total_trips += trips
        total_repos += repos
        total_stays += sum(len(s) for s in segments)
        for key, v in per_cell.items():
            cell_loops[key] = cell_loops.get(key, 0) + v
        all_segments[label] = segments

    lon, lat = unproject_arrays(np.array(xs), np.array(ys), sc.grid)
    frame = pd.DataFrame(
        {
            "bike_id": bikes,
            "t": np.array(ts, dtype=np.int64),
            "lon": lon,
            "lat": lat,
            "kind": np.where(np.array(kinds) == 1, "lock", "unlock"),
        }
    )
    frame = frame.sort_values(["t", "bike_id"], kind="stable")
    frame.insert(1, "timestamp", format_ts_array(frame["t"].to_numpy()))
    csv_text = frame[["bike_id", "timestamp", "lon", "lat", "kind"]].to_csv(
        index=False, float_format="%.7f", lineterminator="\n"
    )
    truth = {
        "kind": "trajectories",
        "seed": sc.seed,
        "scenario": _scenario_dict(sc),
        "grid": {"origin": list(sc.origin), "cell_size": sc.cell_size},
        "thresholds": {"s_sched": 500.0, "s_stay": 100.0},
        "n_events": len(frame),
        "total_loops": total_loops,
        "total_trips": total_trips,
        "total_stays": total_stays,
        "repositionings": total_repos,
        "cell_loops": {k.label(): v for k, v in sorted(cell_loops.items())},
    }
    return SynthTrajectories(csv_text.encode("utf-8"), validate_truth(truth), all_segments)


def _scenario_dict(sc: SynthScenario) -> dict:
    d = asdict(sc)
    d["street_grid"] = list(sc.street_grid)
    d["origin"] = list(sc.origin)
    return d


def gen_stations(sc: SynthScenario) -> pd.DataFrame:
    rng = child_rng(sc.seed, "stations")
    side = sc.n_cells_side
    n = min(sc.n_stations, side * side)
    flat = rng.choice(side * side, size=n, replace=False)
    rows, cols = np.divmod(flat, side)
    x = (cols + 0.5) * sc.cell_size
    y = (rows + 0.5) * sc.cell_size
    lon, lat = unproject_arrays(x, y, sc.grid)
    return pd.DataFrame(
        {
            "station_id": [f"M{i:03d}" for i in range(n)],
            "lon": np.round(lon, 7),
            "lat": np.round(lat, 7),
            "ridership": np.round(rng.lognormal(9.8, 0.8, n)).astype(int),
        }
    )


def gen_streets_geojson(sc: SynthScenario) -> dict:
    nr, nc = sc.street_grid
    h = sc.extent_m / nr
    w = sc.extent_m / nc
    feats = []
    for r in range(nr):
        for q in range(nc):
            xs = np.array([q * w, (q + 1) * w, (q + 1) * w, q * w, q * w])
            ys = np.array([r * h, r * h, (r + 1) * h, (r + 1) * h, r * h])
            lon, lat = unproject_arrays(xs, ys, sc.grid)
            ring = [[round(a, 7), round(b, 7)] for a, b in zip(lon.tolist(), lat.tolist())]
            feats.append(
                {
                    "type": "Feature",
                    "properties": {"street_id": f"S{r:02d}_{q:02d}"},
                    "geometry": {"type": "Polygon", "coordinates": [ring]},
                }
            )
    return {"type": "FeatureCollection", "features": feats}


def gen_covariates(unit_ids, seed: int, label: str, with_ridership: bool = False) -> pd.DataFrame:
    """Table-of-attributes stand-in: socioeconomic, land-use and transit columns."""
    rng = child_rng(seed, "covariates", label)
    n = len(unit_ids)
    df = pd.DataFrame({"unit_id": list(unit_ids)})
    df["average_age"] = np.round(rng.uniform(35, 65, n), 3)
    df["fixed_occ_pct"] = np.round(rng.uniform(0, 60, n), 3)
    df["nonresident_pct"] = np.round(rng.uniform(0, 60, n), 3)
    df["car_ownership"] = np.round(rng.uniform(0.2, 3.0, n), 3)
    df["work_poi"] = rng.poisson(80, n)
    df["residential_poi"] = rng.poisson(55, n)
    df["commercial_poi"] = rng.poisson(280, n)
    df["central"] = (rng.random(n) < 0.25).astype(int)
    df["university"] = (rng.random(n) < 0.3).astype(int)
    df["cbd"] = (rng.random(n) < 0.35).astype(int)
    df["hub"] = (rng.random(n) < 0.15).astype(int)
    df["bus_stations"] = rng.poisson(5, n)
    if with_ridership:
        df["metro_ridership"] = np.round(rng.lognormal(9.8, 0.8, n)).astype(int)
    return df


def write_scenario(sc: SynthScenario, out_dir: str | Path, model_overrides: dict | None = None) -> dict[str, Path]:
    """Write events, stations, streets, covariates, truth and a run config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj = gen_trajectories(sc)
    paths = {
        "events": out / "events.csv",
        "stations": out / "stations.csv",
        "streets": out / "streets.geojson",
        "covariates_station": out / "covariates_station.csv",
        "covariates_street": out / "covariates_street.csv",
    }
    paths["events"].write_bytes(traj.events_csv)
    paths["truth"] = write_truth(truth_path_for(paths["events"]), traj.truth)
    stations = gen_stations(sc)
    stations.to_csv(paths["stations"], index=False, lineterminator="\n")
    streets = gen_streets_geojson(sc)
    paths["streets"].write_text(json.dumps(streets, separators=(",", ":")) + "\n", encoding="utf-8")
    gen_covariates(stations["station_id"], sc.seed, "station", with_ridership=True).to_csv(
        paths["covariates_station"], index=False, lineterminator="\n"
    )
    street_ids = [f["properties"]["street_id"] for f in streets["features"]]
    gen_covariates(street_ids, sc.seed, "street").to_csv(paths["covariates_street"], index=False, lineterminator="\n")

    config = {
        "paths": {
            "events": paths["events"].name,
            "stations": paths["stations"].name,
            "streets": paths["streets"].name,
            "covariates": {"station": paths["covariates_station"].name, "street": paths["covariates_street"].name},
            "output_dir": "out",
        },
        "grid": {"origin": list(sc.origin), "cell_size": sc.cell_size},
        "window_days": sc.days,
        "seed": sc.seed,
    }
    if model_overrides:
        config.update(model_overrides)
    paths["config"] = out / "config.json"
    paths["config"].write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return paths


# -- model data -----------------------------------------------------------


@dataclass
class SarSample:
    data: ModelMatrix
    eps: np.ndarray
    truth: dict


def gen_sar_data(n: int, W: WeightsMatrix, rho: float, beta, sigma: float, seed: int) -> SarSample:
    """``y = (I - rho W)^-1 (X beta + eps)`` with standard-normal X and an intercept."""
    if W.n != n:
        raise SynthError(f"W has {W.n} units, expected n={n}")
    lo, hi = rho_bounds(W)
    if not lo < rho < hi:
        raise SynthError(f"rho={rho} outside admissible interval ({lo:.4g}, {hi:.4g})")
    beta = np.asarray(beta, dtype=float)
    rng = child_rng(seed, "sar")
    X = np.column_stack([np.ones(n), rng.standard_normal((n, beta.size - 1))])
    eps = sigma * rng.standard_normal(n)
    A = np.eye(n) - rho * W.to_dense()
    y = np.linalg.solve(A, X @ beta + eps)
    names = ("Constant", *(f"x{j}" for j in range(1, beta.size)))
    truth = {"kind": "sar", "seed": int(seed), "rho": float(rho), "beta": beta.tolist(), "sigma": float(sigma), "n": n}
    return SarSample(ModelMatrix(y, X, names), eps, validate_truth(truth))


FORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "zero": lambda X: np.zeros(X.shape[0]),
    "linear": lambda X: X[:, 0] + 0.5 * X[:, 1 % X.shape[1]],
    "quadratic": lambda X: X[:, 0] ** 2,
    "sine": lambda X: np.sin(2.0 * X[:, 0]),
    "step": lambda X: (X[:, 0] > 1.0).astype(float),
}


@dataclass
class DmlSample:
    frame: pd.DataFrame
    g: np.ndarray
    m: np.ndarray
    truth: dict

    @property
    def covariates(self) -> tuple[str, ...]:
        return tuple(c for c in self.frame.columns if c.startswith("x"))


def gen_dml_data(
    n: int,
    theta: float,
    g_form: str,
    m_form: str,
    noise: float | tuple[float, float] = 1.0,
    seed: int = 0,
    p: int = 4,
    covariates: str = "uniform",
    treatment: str = "continuous",
    theta_pos: float | None = None,
    split: str = "x1",
) -> DmlSample:
    """Partially linear data: ``D = m(X) + v``, ``Y = g(X) + theta D + e``.

    Covariates are Uniform(0, 2) by default, which makes ``sine`` and
    ``quadratic`` forms correlated (a confounded design); ``"normal"`` draws
    standard-normal covariates instead. A binary treatment is drawn with
    probability ``logistic(m(X) - mean m(X))`` clipped to [0.05, 0.95].

    With ``theta_pos`` set the effect is heterogeneous: rows whose ``split``
    covariate is positive get ``theta_pos``, the rest get ``theta``.
    """
    for form in (g_form, m_form):
        if form not in FORMS:
            raise SynthError(f"unknown functional form {form!r}; choose from {sorted(FORMS)}")
    if covariates not in ("uniform", "normal"):
        raise SynthError(f"unknown covariate distribution {covariates!r}")
    if treatment not in ("continuous", "binary"):
        raise SynthError(f"unknown treatment type {treatment!r}")
    s_eps, s_nu = (noise, noise) if np.isscalar(noise) else tuple(noise)
    rng = child_rng(seed, "dml")
    X = rng.uniform(0.0, 2.0, (n, p)) if covariates == "uniform" else rng.standard_normal((n, p))
    g = FORMS[g_form](X)
    m = FORMS[m_form](X)
    nu = rng.standard_normal(n)
    eps = rng.standard_normal(n)
    if treatment == "binary":
        prob = np.clip(1.0 / (1.0 + np.exp(-(m - m.mean()))), 0.05, 0.95)
        D = (rng.random(n) < prob).astype(float)
    else:
        D = m + s_nu * nu
    frame = pd.DataFrame(X, columns=[f"x{j + 1}" for j in range(p)])
    if theta_pos is None:
        effect = np.full(n, float(theta))
    else:
        if split not in frame.columns:
            raise SynthError(f"split covariate {split!r} not among {list(frame.columns)}")
        effect = np.where(frame[split].to_numpy() > 0, float(theta_pos), float(theta))
    Y = g + effect * D + s_eps * eps
    frame["D"] = D
    frame["Y"] = Y
    truth = {
        "kind": "dml",
        "seed": int(seed),
        "theta": float(theta),
        "g_form": g_form,
        "m_form": m_form,
        "noise": [float(s_eps), float(s_nu)],
        "n": int(n),
        "p": int(p),
        "covariates": covariates,
        "treatment": treatment,
    }
    if theta_pos is not None:
        truth.update(theta_pos=float(theta_pos), split=split)
    return DmlSample(frame, g, m, validate_truth(truth))
