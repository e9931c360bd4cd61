"""Run configuration: one JSON file, unknown keys rejected, CLI flags layered on top."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .gbt import GbtParams
from .gridmap import GridSpec
from .spatialstats import parse_weights_mode

DEFAULT_VARIABLES = (
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
DEFAULT_TREATMENTS = ("central", "university", "cbd", "hub", "bus_stations")
DEFAULT_LOG_VARIABLES = (
    "car_ownership",
    "work_poi",
    "residential_poi",
    "commercial_poi",
    "bus_stations",
    "metro_ridership",
)
DEFAULT_WEIGHTS = {"grid": "queen", "station": "knn:5", "street": "queen"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CateGrouping:
    treatment: str
    by: str
    quantiles: int | None = 3
    edges: tuple[float, ...] | None = None
    scales: tuple[str, ...] | None = None

    def applies_to(self, scale: str) -> bool:
        return self.scales is None or scale in self.scales


@dataclass(frozen=True)
class ModelConfig:
    variables: tuple[str, ...] = DEFAULT_VARIABLES
    treatments: tuple[str, ...] = DEFAULT_TREATMENTS
    log_outcome: bool = True
    log_variables: tuple[str, ...] = DEFAULT_LOG_VARIABLES
    cate: tuple[CateGrouping, ...] = ()
    folds: int = 5
    gbt: GbtParams = field(default_factory=GbtParams)
    n_perm: int = 999


@dataclass(frozen=True)
class RunConfig:
    events: Path | None = None
    stations: Path | None = None
    streets: Path | None = None
    covariates: dict[str, Path] = field(default_factory=dict)
    output_dir: Path = Path("out")
    origin: tuple[float, float] | None = None
    cell_size: float = 500.0
    s_sched: float = 500.0
    s_stay: float = 100.0
    window_days: int = 7
    weights: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    models: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    base_dir: Path = Path(".")

    @property
    def grid(self) -> GridSpec:
        if self.origin is None:
            raise ConfigError("grid.origin is unset; it is resolved from the events at detect time")
        return GridSpec(self.origin, self.cell_size)

    def grid_at(self, origin: tuple[float, float]) -> GridSpec:
        return GridSpec(self.origin if self.origin is not None else origin, self.cell_size)

    def validate(self, need: tuple[str, ...] = ()) -> "RunConfig":
        if not self.cell_size > 0:
            raise ConfigError(f"grid.cell_size must be positive, got {self.cell_size}")
        if int(self.window_days) != self.window_days or self.window_days < 1:
            raise ConfigError(f"window_days must be a positive integer, got {self.window_days}")
        if not self.s_sched > 0 or not self.s_stay >= 0:
            raise ConfigError("thresholds must be positive")
        for scale, mode in self.weights.items():
            if scale not in DEFAULT_WEIGHTS:
                raise ConfigError(f"weights: unknown scale {scale!r}")
            try:
                parse_weights_mode(mode)
            except ValueError as exc:
                raise ConfigError(f"weights.{scale}: {exc}") from None
        for scale in self.covariates:
            if scale not in DEFAULT_WEIGHTS:
                raise ConfigError(f"paths.covariates: unknown scale {scale!r}")
        for name in need:
            if getattr(self, name) is None:
                raise ConfigError(f"paths.{name} is required")
        for name, path in self._paths():
            if not path.exists():
                raise ConfigError(f"paths.{name}: file not found: {path}")
        return self

    def _paths(self):
        for name in ("events", "stations", "streets"):
            p = getattr(self, name)
            if p is not None:
                yield name, p
        for scale, p in sorted(self.covariates.items()):
            yield f"covariates.{scale}", p

    def _rel(self, p: Path | None) -> str | None:
        if p is None:
            return None
        try:
            return p.resolve().relative_to(self.base_dir.resolve()).as_posix()
        except ValueError:
            return p.resolve().as_posix()

    def to_dict(self) -> dict[str, Any]:
        m = self.models
        return {
            "paths": {
                "events": self._rel(self.events),
                "stations": self._rel(self.stations),
                "streets": self._rel(self.streets),
                "covariates": {k: self._rel(v) for k, v in sorted(self.covariates.items())},
                "output_dir": self._rel(self.output_dir),
            },
            "grid": {"origin": None if self.origin is None else list(self.origin), "cell_size": self.cell_size},
            "thresholds": {"s_sched": self.s_sched, "s_stay": self.s_stay},
            "window_days": self.window_days,
            "weights": dict(sorted(self.weights.items())),
            "models": {
                "variables": list(m.variables),
                "treatments": list(m.treatments),
                "log_outcome": m.log_outcome,
                "log_variables": list(m.log_variables),
                "cate": [
                    {
                        "treatment": g.treatment,
                        "by": g.by,
                        "quantiles": g.quantiles,
                        "edges": None if g.edges is None else list(g.edges),
                        "scales": None if g.scales is None else list(g.scales),
                    }
                    for g in m.cate
                ],
                "folds": m.folds,
                "gbt": {
                    "n_trees": m.gbt.n_trees,
                    "max_depth": m.gbt.max_depth,
                    "learning_rate": m.gbt.learning_rate,
                    "min_samples_leaf": m.gbt.min_samples_leaf,
                    "subsample": m.gbt.subsample,
                    "max_bins": m.gbt.max_bins,
                },
                "n_perm": m.n_perm,
            },
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        """Digest of everything that affects results; output location and threads excluded."""
        d = self.to_dict()
        del d["paths"]["output_dir"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def header(self) -> str:
        return f"# looplens config_hash={self.config_hash()} seed={self.seed}\n"

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")


def _gbt(obj: dict) -> GbtParams:
    _check_keys(obj, {"n_trees", "max_depth", "learning_rate", "min_samples_leaf", "subsample", "max_bins"}, "models.gbt")
    try:
        return GbtParams(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"models.gbt: {exc}") from None


def _cate(items: list) -> tuple[CateGrouping, ...]:
    out = []
    for k, item in enumerate(items):
        _check_keys(item, {"treatment", "by", "quantiles", "edges", "scales"}, f"models.cate[{k}]")
        if "treatment" not in item or "by" not in item:
            raise ConfigError(f"models.cate[{k}] needs 'treatment' and 'by'")
        edges = item.get("edges")
        quantiles = item.get("quantiles", None if edges else 3)
        scales = item.get("scales")
        out.append(
            CateGrouping(
                item["treatment"],
                item["by"],
                quantiles,
                None if edges is None else tuple(float(e) for e in edges),
                None if scales is None else tuple(scales),
            )
        )
    return tuple(out)


def _models(obj: dict) -> ModelConfig:
    allowed = {"variables", "treatments", "log_outcome", "log_variables", "cate", "folds", "gbt", "n_perm"}
    _check_keys(obj, allowed, "models")
    kw: dict[str, Any] = {}
    for key in ("variables", "treatments", "log_variables"):
        if key in obj:
            kw[key] = tuple(obj[key])
    if "log_outcome" in obj:
        kw["log_outcome"] = bool(obj["log_outcome"])
    if "cate" in obj:
        kw["cate"] = _cate(obj["cate"])
    if "folds" in obj:
        kw["folds"] = int(obj["folds"])
        if kw["folds"] < 2:
            raise ConfigError("models.folds must be >= 2")
    if "gbt" in obj:
        kw["gbt"] = _gbt(obj["gbt"])
    if "n_perm" in obj:
        kw["n_perm"] = int(obj["n_perm"])
    return ModelConfig(**kw)


def config_from_dict(raw: dict, base_dir: Path | str = ".") -> RunConfig:
    """Build a config from parsed JSON; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    _check_keys(raw, {"paths", "grid", "thresholds", "window_days", "weights", "models", "seed"}, "")
    kw: dict[str, Any] = {"base_dir": base}

    def path(v):
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else base / p

    paths = raw.get("paths", {})
    _check_keys(paths, {"events", "stations", "streets", "covariates", "output_dir"}, "paths")
    for key in ("events", "stations", "streets"):
        if key in paths:
            kw[key] = path(paths[key])
    if "covariates" in paths:
        cov = paths["covariates"]
        if not isinstance(cov, dict):
            raise ConfigError("paths.covariates must map scale -> CSV path")
        kw["covariates"] = {k: path(v) for k, v in cov.items()}
    kw["output_dir"] = path(paths.get("output_dir", "out"))

    grid = raw.get("grid", {})
    _check_keys(grid, {"origin", "cell_size"}, "grid")
    if "origin" in grid:
        origin = grid["origin"]
        if not isinstance(origin, list) or len(origin) != 2:
            raise ConfigError("grid.origin must be [lon, lat]")
        kw["origin"] = (float(origin[0]), float(origin[1]))
    if "cell_size" in grid:
        kw["cell_size"] = float(grid["cell_size"])

    thr = raw.get("thresholds", {})
    _check_keys(thr, {"s_sched", "s_stay"}, "thresholds")
    for key in ("s_sched", "s_stay"):
        if key in thr:
            kw[key] = float(thr[key])

    if "window_days" in raw:
        kw["window_days"] = raw["window_days"]
    if "weights" in raw:
        if not isinstance(raw["weights"], dict):
            raise ConfigError("weights must map scale -> mode")
        kw["weights"] = {**DEFAULT_WEIGHTS, **raw["weights"]}
    if "models" in raw:
        kw["models"] = _models(raw["models"])
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError("seed must be an integer")
        kw["seed"] = raw["seed"]
    return RunConfig(**kw)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(raw, path.parent)
