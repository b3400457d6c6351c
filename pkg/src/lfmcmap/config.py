"""Pipeline configuration: one JSON file drives every CLI stage.

Paths resolve against the config file's directory. Validation happens
up front so a bad config fails before any work starts; every stage
writes the resolved snapshot next to its outputs.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .core import DEFAULT_CAP
from .errors import ConfigError
from .geo import CONUS_BBOX, BoundingBox
from .ingest.cube import Month, month_range
from .model import TrainingConfig

CONFIG_VERSION = 1

_MODEL_CHOICES = ("regressor", "baseline", "both")


@dataclass
class GridConfig:
    crs: str
    origin_x: float
    origin_y: float
    height: int
    width: int
    pixel_size: float = 10.0


@dataclass
class DatasetConfig:
    shape: Tuple[int, int, int] = (32, 32, 12)
    fractions: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0
    cap: float = DEFAULT_CAP
    group_by_site: bool = False


@dataclass
class EvaluationConfig:
    knn_k: int = 8
    permutations: int = 999
    alternative: str = "greater"
    seed: int = 0
    model: str = "regressor"


@dataclass
class MapConfig:
    months: List[Month] = field(default_factory=list)
    stride: Optional[int] = None
    region: Optional[BoundingBox] = None
    model: str = "regressor"


@dataclass
class AblationConfig:
    shapes: Optional[List[Tuple[int, int, int]]] = None
    removals: Optional[List[str]] = None
    hidden: Tuple[int, int] = (128, 64)


@dataclass
class PipelineConfig:
    labels_csv: Path
    raster_manifest: Path
    output_dir: Path
    land_cover_raster: Optional[Path] = None
    elevation_raster: Optional[Path] = None
    column_map: Optional[Dict[str, str]] = None
    region: BoundingBox = CONUS_BBOX
    date_range: Tuple[dt.date, dt.date] = (dt.date(2017, 1, 1), dt.date(2023, 12, 31))
    grid: Optional[GridConfig] = None
    months: List[Month] = field(default_factory=list)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    train_model: str = "regressor"
    hidden: Tuple[int, int] = (128, 64)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    map: MapConfig = field(default_factory=MapConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    threads: int = 1

    def resolved(self) -> dict:
        """JSON-ready snapshot of every setting actually in effect."""
        return {
            "config_version": CONFIG_VERSION,
            "paths": {
                "labels_csv": str(self.labels_csv),
                "raster_manifest": str(self.raster_manifest),
                "output_dir": str(self.output_dir),
                "land_cover_raster": str(self.land_cover_raster) if self.land_cover_raster else None,
                "elevation_raster": str(self.elevation_raster) if self.elevation_raster else None,
            },
            "column_map": self.column_map,
            "region": _bbox_dict(self.region),
            "date_range": [d.isoformat() for d in self.date_range],
            "grid": None if self.grid is None else {
                "crs": self.grid.crs, "origin_x": self.grid.origin_x,
                "origin_y": self.grid.origin_y, "height": self.grid.height,
                "width": self.grid.width, "pixel_size": self.grid.pixel_size,
            },
            "months": [list(m) for m in self.months],
            "dataset": {
                "shape": list(self.dataset.shape),
                "fractions": list(self.dataset.fractions),
                "seed": self.dataset.seed, "cap": self.dataset.cap,
                "group_by_site": self.dataset.group_by_site,
            },
            "training": {
                "model": self.train_model, "hidden": list(self.hidden),
                "max_epochs": self.training.max_epochs,
                "patience": self.training.patience,
                "learning_rate": self.training.learning_rate,
                "momentum": self.training.momentum,
                "batch_size": self.training.batch_size,
                "seed": self.training.seed,
            },
            "evaluation": {
                "knn_k": self.evaluation.knn_k,
                "permutations": self.evaluation.permutations,
                "alternative": self.evaluation.alternative,
                "seed": self.evaluation.seed,
                "model": self.evaluation.model,
            },
            "map": {
                "months": [list(m) for m in self.map.months],
                "stride": self.map.stride,
                "region": _bbox_dict(self.map.region) if self.map.region else None,
                "model": self.map.model,
            },
            "ablation": {
                "shapes": [list(s) for s in self.ablation.shapes] if self.ablation.shapes else None,
                "removals": list(self.ablation.removals) if self.ablation.removals else None,
                "hidden": list(self.ablation.hidden),
            },
            "threads": self.threads,
        }

    def digest(self) -> str:
        """Content digest of the resolved config, independent of where
        outputs land (so reruns into different directories compare equal)."""
        snapshot = self.resolved()
        snapshot["paths"] = {k: v for k, v in snapshot["paths"].items()
                             if k != "output_dir"}
        payload = json.dumps(snapshot, sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


def _bbox_dict(bbox: BoundingBox) -> dict:
    return {"min_lon": bbox.min_lon, "min_lat": bbox.min_lat,
            "max_lon": bbox.max_lon, "max_lat": bbox.max_lat}


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _bbox_from(obj: dict, context: str) -> BoundingBox:
    try:
        return BoundingBox(min_lon=float(obj["min_lon"]), min_lat=float(obj["min_lat"]),
                           max_lon=float(obj["max_lon"]), max_lat=float(obj["max_lat"]))
    except KeyError as exc:
        raise ConfigError(f"{context}: missing bounding box field {exc}") from None


def _months_from(obj, context: str) -> List[Month]:
    if obj is None:
        return []
    if isinstance(obj, dict):
        _require("start" in obj and "end" in obj,
                 f"{context}: months need 'start' and 'end' or an explicit list")
        months = month_range(tuple(obj["start"]), tuple(obj["end"]))
    else:
        months = [tuple(m) for m in obj]
    for year, month in months:
        _require(1 <= month <= 12, f"{context}: month {year}-{month} out of range")
    return months


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None

    version = raw.get("config_version", CONFIG_VERSION)
    _require(version == CONFIG_VERSION,
             f"config version {version} != supported {CONFIG_VERSION}")
    base = path.parent

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    paths = raw.get("paths") or {}
    _require("labels_csv" in paths, "paths.labels_csv is required")
    _require("raster_manifest" in paths, "paths.raster_manifest is required")
    _require("output_dir" in paths, "paths.output_dir is required")

    config = PipelineConfig(
        labels_csv=resolve(paths["labels_csv"]),
        raster_manifest=resolve(paths["raster_manifest"]),
        output_dir=resolve(paths["output_dir"]),
        land_cover_raster=resolve(paths["land_cover_raster"]) if paths.get("land_cover_raster") else None,
        elevation_raster=resolve(paths["elevation_raster"]) if paths.get("elevation_raster") else None,
        column_map=raw.get("column_map"),
    )
    if "region" in raw:
        config.region = _bbox_from(raw["region"], "region")
    if "date_range" in raw:
        start, end = raw["date_range"]
        config.date_range = (dt.date.fromisoformat(start), dt.date.fromisoformat(end))
        _require(config.date_range[0] <= config.date_range[1],
                 f"inverted date_range {raw['date_range']}")
    if raw.get("grid") is not None:
        g = raw["grid"]
        try:
            config.grid = GridConfig(crs=g["crs"], origin_x=float(g["origin_x"]),
                                     origin_y=float(g["origin_y"]),
                                     height=int(g["height"]), width=int(g["width"]),
                                     pixel_size=float(g.get("pixel_size", 10.0)))
        except KeyError as exc:
            raise ConfigError(f"grid: missing field {exc}") from None
    config.months = _months_from(raw.get("months"), "months")

    ds = raw.get("dataset") or {}
    config.dataset = DatasetConfig(
        shape=tuple(ds.get("shape", (32, 32, 12))),
        fractions=tuple(ds.get("fractions", (0.70, 0.15, 0.15))),
        seed=int(ds.get("seed", 0)),
        cap=float(ds.get("cap", DEFAULT_CAP)),
        group_by_site=bool(ds.get("group_by_site", False)),
    )
    _require(len(config.dataset.shape) == 3 and all(s >= 1 for s in config.dataset.shape),
             f"dataset.shape must be three positive integers, got {ds.get('shape')}")

    tr = raw.get("training") or {}
    config.train_model = tr.get("model", "regressor")
    _require(config.train_model in _MODEL_CHOICES,
             f"training.model must be one of {_MODEL_CHOICES}")
    config.hidden = tuple(tr.get("hidden", (128, 64)))
    config.training = TrainingConfig(
        max_epochs=int(tr.get("max_epochs", 100)),
        patience=int(tr.get("patience", 5)),
        learning_rate=float(tr.get("learning_rate", 1e-3)),
        momentum=float(tr.get("momentum", 0.9)),
        batch_size=int(tr.get("batch_size", 64)),
        seed=int(tr.get("seed", 0)),
    )

    ev = raw.get("evaluation") or {}
    config.evaluation = EvaluationConfig(
        knn_k=int(ev.get("knn_k", 8)),
        permutations=int(ev.get("permutations", 999)),
        alternative=ev.get("alternative", "greater"),
        seed=int(ev.get("seed", 0)),
        model=ev.get("model", "regressor"),
    )
    _require(1 <= config.evaluation.knn_k <= 32,
             f"evaluation.knn_k must be in [1, 32], got {config.evaluation.knn_k}")
    _require(config.evaluation.model in ("regressor", "baseline"),
             "evaluation.model must be 'regressor' or 'baseline'")

    mp = raw.get("map") or {}
    config.map = MapConfig(
        months=_months_from(mp.get("months"), "map.months"),
        stride=int(mp["stride"]) if mp.get("stride") is not None else None,
        region=_bbox_from(mp["region"], "map.region") if mp.get("region") else None,
        model=mp.get("model", "regressor"),
    )
    _require(config.map.model in ("regressor", "baseline"),
             "map.model must be 'regressor' or 'baseline'")

    ab = raw.get("ablation") or {}
    config.ablation = AblationConfig(
        shapes=[tuple(s) for s in ab["shapes"]] if ab.get("shapes") else None,
        removals=list(ab["removals"]) if ab.get("removals") else None,
        hidden=tuple(ab.get("hidden", config.hidden)),
    )

    config.threads = int(raw.get("threads", 1))
    _require(config.threads >= 1, "threads must be >= 1")
    return config
