"""Pipeline stages behind the CLI and the report tables they write."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import shapely

from ._seeding import derive_seed
from .config import RunConfig
from .dml import DmlSpec, cate_by_groups, run_dml
from .gridmap import CellId, GridSpec, build_unit_map, project_arrays, read_stations_csv, read_streets_geojson
from .ingest import build_stay_table, read_events
from .loopdetect import SCALES, aggregate_intensity, detect_loops_table, self_loop_proportion
from .sarmodel import ModelMatrix, fit_sar
from .spatialstats import WeightsMatrix, build_weights, morans_permutation_test, vif


class StageError(Exception):
    """A pipeline stage failed on its inputs; ``stage`` names where."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class AnalyzeError(ValueError):
    pass


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (ValueError, OSError, KeyError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        raise StageError(name, msg) from exc


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "NA"
    return f"{v:.8g}"


def write_table(path: Path, header: str, columns, rows) -> Path:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([c if isinstance(c, str) else fmt(c) for c in row])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(type(o).__name__)


def _clean(v):
    """JSON-safe float (NaN/inf become None)."""
    v = float(v)
    return v if math.isfinite(v) else None


# -- detect ---------------------------------------------------------------


@dataclass
class DetectResult:
    paths: dict[str, Path]
    manifest: dict


def intensity_path(cfg: RunConfig, scale: str) -> Path:
    return cfg.output_dir / f"intensity_{scale}.csv"


def cmd_detect(cfg: RunConfig, threads: int = 1) -> DetectResult:
    with stage("config"):
        cfg.validate(need=("events",))
    header = cfg.header()
    with stage("ingest"):
        table, rejected = read_events(cfg.events)
        if len(table) == 0:
            raise AnalyzeError(f"no valid events in {cfg.events} ({rejected} rejected rows)")
        # unset origin: lower-left corner of the event bounding box
        spec = cfg.grid_at((float(table.lon.min()), float(table.lat.min())))
        stays = build_stay_table(table, cfg.s_sched, cfg.s_stay, threads=threads)
    with stage("loopdetect"):
        loops = detect_loops_table(stays, spec)
    with stage("gridmap"):
        stations = read_stations_csv(cfg.stations) if cfg.stations else []
        streets = read_streets_geojson(cfg.streets) if cfg.streets else []
        units = build_unit_map(stations, streets, spec)
    scales = ["grid"] + (["station"] if stations else []) + (["street"] if streets else [])

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    paths = {"loops": out / "loops.csv"}
    paths["loops"].write_text(header + loops.to_csv(), encoding="utf-8")
    totals = {}
    n_units = {}
    with stage("aggregate"):
        for scale in scales:
            tab = aggregate_intensity(loops, units, scale, cfg.window_days)
            paths[f"intensity_{scale}"] = intensity_path(cfg, scale)
            paths[f"intensity_{scale}"].write_text(tab.to_csv(header), encoding="utf-8")
            totals[scale] = int(sum(tab.counts.values()))
            n_units[scale] = len(tab.rows)
        proportion = self_loop_proportion(loops, stays) if stays.n_trips > 0 else None

    manifest = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "grid": {"origin": list(spec.origin), "cell_size": spec.cell_size},
        "events": {"accepted": len(table), "rejected": int(rejected), "bikes": len(table.bike_ids)},
        "stays": len(stays),
        "trips": int(stays.n_trips),
        "repositionings": int(stays.repositioned.sum()),
        "orphan_locks": int(stays.orphan_locks.sum()),
        "orphan_unlocks": int(stays.orphan_unlocks.sum()),
        "merged_stays": int(stays.merged.sum()),
        "loops": {"total": len(loops), "by_scale": totals},
        "proportion": proportion,
        "units": n_units,
        "window_days": cfg.window_days,
    }
    paths["manifest"] = write_json(out / "manifest.json", manifest)
    return DetectResult(paths, manifest)


# -- analyze --------------------------------------------------------------


def read_report_csv(path: Path, **kw) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", **kw)


def _join(scale: str, intensity: pd.DataFrame, cov: pd.DataFrame, needed: list[str]) -> pd.DataFrame:
    if "unit_id" not in cov.columns:
        raise AnalyzeError(f"{scale} covariates: missing column 'unit_id'")
    missing = [c for c in needed if c not in cov.columns]
    if missing:
        raise AnalyzeError(f"{scale} covariates: missing column(s) {', '.join(missing)}")
    if cov["unit_id"].duplicated().any():
        dup = cov.loc[cov["unit_id"].duplicated(), "unit_id"].tolist()
        raise AnalyzeError(f"{scale} covariates: duplicated unit_id {dup[:10]}")
    a = set(intensity["unit_id"])
    b = set(cov["unit_id"])
    if a != b:
        only_i = sorted(a - b)
        only_c = sorted(b - a)
        raise AnalyzeError(
            f"{scale}: unit_id mismatch; in intensity only: {only_i[:20]}"
            f"{' ...' if len(only_i) > 20 else ''}; in covariates only: {only_c[:20]}"
            f"{' ...' if len(only_c) > 20 else ''}"
        )
    frame = intensity.merge(cov[["unit_id", *needed]], on="unit_id", how="left", validate="one_to_one")
    bad = [c for c in needed if not np.all(np.isfinite(frame[c].to_numpy(dtype=float)))]
    if bad:
        raise AnalyzeError(f"{scale} covariates: non-numeric or missing values in {', '.join(bad)}")
    return frame


def resolved_grid(cfg: RunConfig) -> GridSpec:
    """The grid detect used: the configured origin, else the one in manifest.json."""
    if cfg.origin is not None:
        return cfg.grid
    manifest = cfg.output_dir / "manifest.json"
    if not manifest.exists():
        raise AnalyzeError("grid.origin is unset and manifest.json is missing; run detect first")
    return cfg.grid_at(tuple(json.loads(manifest.read_text(encoding="utf-8"))["grid"]["origin"]))


def _unit_weights(cfg: RunConfig, scale: str, unit_ids: list[str], spec: GridSpec) -> WeightsMatrix:
    mode = cfg.weights.get(scale, "queen")
    if scale == "grid":
        cells = [CellId(*map(int, u.split("_"))) for u in unit_ids]
        c = spec.cell_size
        coords = np.array([((cell.col + 0.5) * c, (cell.row + 0.5) * c) for cell in cells])
        polys = [shapely.box(x - c / 2, y - c / 2, x + c / 2, y + c / 2) for x, y in coords]
    elif scale == "station":
        if cfg.stations is None:
            raise AnalyzeError("station scale needs paths.stations")
        by_id = {s.station_id: s for s in read_stations_csv(cfg.stations)}
        pts = [by_id[u] for u in unit_ids]
        x, y = project_arrays([p.lon for p in pts], [p.lat for p in pts], spec)
        coords = np.column_stack([x, y])
        polys = None
    else:
        if cfg.streets is None:
            raise AnalyzeError("street scale needs paths.streets")
        by_id = {s.street_id: s for s in read_streets_geojson(cfg.streets)}
        polys = [by_id[u].polygon for u in unit_ids]
        coords = np.array([(p.centroid.x, p.centroid.y) for p in polys])
        x, y = project_arrays(coords[:, 0], coords[:, 1], spec)
        coords = np.column_stack([x, y])
    return build_weights(mode, coords=coords, polygons=polys)


def _design(frame: pd.DataFrame, cfg: RunConfig) -> pd.DataFrame:
    m = cfg.models
    out = pd.DataFrame({"unit_id": frame["unit_id"]})
    y = frame["intensity"].to_numpy(dtype=float)
    out["y"] = np.log1p(y) if m.log_outcome else y
    for c in frame.columns:
        if c in ("unit_id", "intensity"):
            continue
        v = frame[c].to_numpy(dtype=float)
        if c in m.log_variables:
            if np.any(v <= -1):
                raise AnalyzeError(f"log1p transform of {c!r} needs values > -1")
            v = np.log1p(v)
        out[c] = v
    return out


def _sar_rows(fit) -> list:
    table = fit.coef_table()
    body = [r for r in table[:-1] if r[0] != "Constant"]
    const = [r for r in table[:-1] if r[0] == "Constant"]
    rows = [list(r) for r in body + const + [table[-1]]]
    rows.append(["PseudoR2", fit.pseudo_r2, None, None, None])
    rows.append(["N", fit.n, None, None, None])
    return rows


def analyze_scale(cfg: RunConfig, scale: str, threads: int = 1, spec: GridSpec | None = None) -> dict:
    m = cfg.models
    header = cfg.header()
    out = cfg.output_dir
    ipath = intensity_path(cfg, scale)
    if not ipath.exists():
        raise AnalyzeError(f"missing {ipath.name}; run detect first")
    intensity = read_report_csv(ipath, dtype={"unit_id": str})
    cov = read_report_csv(cfg.covariates[scale], dtype={"unit_id": str})
    groupings = [g for g in m.cate if g.applies_to(scale)]
    needed = list(dict.fromkeys([*m.variables, *m.treatments, *(g.by for g in groupings), *(g.treatment for g in groupings)]))
    frame = _join(scale, intensity, cov, needed)
    data = _design(frame, cfg)
    unit_ids = data["unit_id"].tolist()
    n = len(unit_ids)
    if n < len(m.variables) + 3:
        raise AnalyzeError(f"{scale}: only {n} units for {len(m.variables)} variables")

    W = _unit_weights(cfg, scale, unit_ids, spec if spec is not None else resolved_grid(cfg))
    y = data["y"].to_numpy()
    moran = morans_permutation_test(y, W, m.n_perm, seed=derive_seed(cfg.seed, "moran", scale), threads=threads)
    moran_doc = {"config_hash": cfg.config_hash(), "scale": scale, "n": n, "islands": len(W.islands), **moran.to_json()}
    write_json(out / f"moran_{scale}.json", moran_doc)

    X = data[list(m.variables)].to_numpy()
    v = vif(X, m.variables)
    rows = [[name, val, 1.0 / val] for name, val in zip(v.names, v.vif.tolist())]
    rows.append(["Mean VIF", v.mean_vif, None])
    write_table(out / f"vif_{scale}.csv", header, ["Variable", "VIF", "1/VIF"], rows)

    sar = fit_sar(ModelMatrix.with_intercept(y, X, m.variables), W)
    write_table(out / f"sar_{scale}.csv", header, ["Variable", "Coef", "StdErr", "z", "p"], _sar_rows(sar))

    dml_rows = []
    dml_doc = []
    for treat in m.treatments:
        spec = DmlSpec("y", treat, tuple(c for c in m.variables if c != treat), m.folds, m.gbt, derive_seed(cfg.seed, "dml", scale, treat), threads)
        fit = run_dml(data, spec)
        dml_rows.append([treat, fit.effect_kind, fit.theta, fit.se, fit.t, fit.p_value, fit.n])
        dml_doc.append({"treatment": treat, "effect": fit.effect_kind, "coef": fit.theta, "se": fit.se, "p": fit.p_value, "r2_g": _clean(fit.r2_g), "r2_m": _clean(fit.r2_m)})
    write_table(out / f"dml_{scale}.csv", header, ["Treatment", "EffectKind", "Coef", "StdErr", "t", "p", "N"], dml_rows)

    cate_rows = []
    cate_doc = []
    skipped = []
    for g in groupings:
        covs = tuple(c for c in m.variables if c != g.treatment)
        spec = DmlSpec("y", g.treatment, covs, m.folds, m.gbt, derive_seed(cfg.seed, "cate", scale, g.treatment, g.by), threads)
        # group on the untransformed column
        grouped = data.copy()
        grouped["__by"] = frame[g.by].to_numpy(dtype=float)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fits = cate_by_groups(grouped, spec, "__by", quantiles=g.quantiles if g.edges is None else None, edges=g.edges)
        skipped += [str(w.message).replace("'__by'", repr(g.by)) for w in caught]
        for gf in fits:
            cate_rows.append([g.treatment, g.by, gf.group, gf.lower, gf.upper, gf.n, gf.fit.theta, gf.fit.se])
            cate_doc.append({"treatment": g.treatment, "by": g.by, "group": gf.group, "lower": gf.lower, "upper": gf.upper, "n": gf.n, "coef": gf.fit.theta, "se": gf.fit.se})
    write_table(out / f"cate_{scale}.csv", header, ["Treatment", "By", "Group", "Lower", "Upper", "N", "Coef", "StdErr"], cate_rows)

    raw_i = frame["intensity"].to_numpy(dtype=float)
    return {
        "n": n,
        "intensity": {
            "mean": float(raw_i.mean()),
            "quantiles": dict(zip(("min", "q25", "median", "q75", "max"), np.quantile(raw_i, [0, 0.25, 0.5, 0.75, 1]).tolist())),
            "zero_units": int(np.sum(raw_i == 0)),
        },
        "moran": moran.to_json(),
        "vif": {**v.as_dict(), "mean": v.mean_vif},
        "sar": {
            "rho": sar.rho,
            "rho_se": _clean(sar.se[-1]),
            "pseudo_r2": _clean(sar.pseudo_r2),
            "log_likelihood": sar.log_likelihood,
            "coefficients": {name: {"coef": c, "se": _clean(s), "p": _clean(p)} for name, c, s, _, p in sar.coef_table()},
        },
        "dml": dml_doc,
        "cate": cate_doc,
        "cate_skipped": skipped,
    }


def cmd_analyze(cfg: RunConfig, threads: int = 1) -> dict[str, Path]:
    with stage("config"):
        cfg.validate()
        if not cfg.covariates:
            raise AnalyzeError("paths.covariates is empty: nothing to analyze")
        spec = resolved_grid(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    summary = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "scales": {}}
    for scale in SCALES:
        if scale not in cfg.covariates:
            continue
        with stage(f"analyze:{scale}"):
            summary["scales"][scale] = analyze_scale(cfg, scale, threads, spec)
    path = write_json(cfg.output_dir / "summary.json", summary)
    return {"summary": path}


def cmd_run(cfg: RunConfig, threads: int = 1) -> dict[str, Path]:
    res = cmd_detect(cfg, threads)
    paths = dict(res.paths)
    paths.update(cmd_analyze(cfg, threads))
    return paths

