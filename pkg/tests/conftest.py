"""Shared fixtures: synthetic grids, rasters, manifests, and cubes.

The synthetic world is a small UTM tile with plausible value ranges per
modality so tests exercise the real ingestion path end to end.
"""
import datetime as dt
import json

import numpy as np
import pytest

from lfmcmap.geo import GridSpec
from lfmcmap.geotiff import write_geotiff
from lfmcmap.ingest import DEFAULT_MODALITIES, ManifestEntry, load_cube, month_range


def make_grid(height=64, width=64, origin=(500000.0, 4000000.0), crs="EPSG:32611"):
    return GridSpec(origin_x=origin[0], origin_y=origin[1],
                    pixel_size_x=10.0, pixel_size_y=10.0,
                    height=height, width=width, crs=crs)


MONTHS_2024 = month_range((2024, 1), (2024, 12))


def synth_band(rng, grid, low, high):
    return rng.uniform(low, high, size=(grid.height, grid.width)).astype(np.float32)


def write_modality_rasters(tmp_path, grid, months, rng, scenes_per_month=1):
    """Write one small GeoTIFF per (modality, month) plus statics; returns
    manifest entries."""
    entries = []
    ranges = {
        "S2": (0.02, 0.6, 10),
        "S1": (-25.0, -5.0, 2),
        "VIIRS": (0.0, 60.0, 1),
        "ERA5": (0.0, 120.0, 2),
        "TerraClimate": (0.0, 150.0, 3),
    }
    for name, (low, high, n_bands) in ranges.items():
        per_month = scenes_per_month if name in ("S2", "S1") else 1
        for (year, month) in months:
            for scene in range(per_month):
                data = np.stack([synth_band(rng, grid, low, high)
                                 for _ in range(n_bands)])
                path = tmp_path / f"{name.lower()}_{year}_{month:02d}_{scene}.tif"
                write_geotiff(path, data, grid, nodata=-9999.0)
                entries.append(ManifestEntry(modality=name, path=str(path),
                                             year=year, month=month))
    dem = (1200.0 + 40.0 * rng.standard_normal((grid.height, grid.width))).astype(np.float32)
    dem_path = tmp_path / "srtm.tif"
    write_geotiff(dem_path, dem, grid, nodata=-9999.0)
    entries.append(ManifestEntry(modality="SRTM", path=str(dem_path)))
    return entries


def write_manifest_json(tmp_path, entries):
    payload = [{"modality": e.modality, "path": e.path,
                **({"year": e.year, "month": e.month} if e.year else {})}
               for e in entries]
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(payload, indent=1))
    return path


@pytest.fixture(scope="session")
def session_cube(tmp_path_factory):
    """A 64x64, 12-month cube shared by read-only tests."""
    tmp_path = tmp_path_factory.mktemp("cube_fixture")
    grid = make_grid()
    rng = np.random.default_rng(1234)
    entries = write_modality_rasters(tmp_path, grid, MONTHS_2024, rng)
    return load_cube(entries, grid, MONTHS_2024, DEFAULT_MODALITIES)


def observations_on_grid(grid, n, rng, months, margin=8, value_range=(30.0, 290.0)):
    """Synthetic SiteObservations at random interior pixels of the grid."""
    from lfmcmap.ingest import SiteObservation

    out = []
    for i in range(n):
        row = int(rng.integers(margin, grid.height - margin))
        col = int(rng.integers(margin, grid.width - margin))
        x, y = grid.xy_of(row, col)
        lat, lon = grid.xy_to_lonlat(x, y)
        year, month = months[int(rng.integers(0, len(months)))]
        out.append(SiteObservation(
            site_id=f"site{i:04d}", latitude=float(lat), longitude=float(lon),
            date=dt.date(year, month, 15),
            lfmc_percent=float(rng.uniform(*value_range)), n_merged=1))
    return out


def synthetic_instances(n, shape=(2, 2, 4), seed=0, target="random"):
    """Instances built directly (no cube) for model-level tests.

    The S2 NDVI plane is constant per instance (drawn from U(-1, 1)), so
    a target defined on it is exactly recoverable from pooled features.
    ``target``: "random", "ndvi" (clamped affine of the NDVI value),
    "month" (pure function of the calendar month), or a callable
    (ndvi_value, month) -> normalized target.
    """
    from lfmcmap.dataset import InstanceMeta, TileInstance

    rng = np.random.default_rng(seed)
    h, w, t = shape
    instances = []
    for i in range(n):
        v = float(rng.uniform(-1.0, 1.0))
        month = int(rng.integers(1, 13))
        s2 = rng.uniform(0.05, 0.5, size=(h, w, t, 11)).astype(np.float32)
        s2[..., 10] = v
        features = {
            "S2": s2,
            "S1": rng.uniform(-25.0, -5.0, size=(h, w, t, 2)).astype(np.float32),
            "VIIRS": rng.uniform(0.0, 60.0, size=(t, 1)).astype(np.float32),
            "ERA5": rng.uniform(0.0, 120.0, size=(t, 2)).astype(np.float32),
            "TerraClimate": rng.uniform(0.0, 150.0, size=(t, 3)).astype(np.float32),
            "SRTM": rng.uniform(900.0, 1500.0, size=(h, w, 2)).astype(np.float32),
            "Location": np.array([34.0 / 90.0, -118.0 / 180.0], dtype=np.float32),
        }
        if target == "random":
            y = float(rng.uniform(0.1, 0.9))
        elif target == "ndvi":
            y = float(np.clip(0.55 + 0.35 * v, 0.0, 1.0))
        elif target == "month":
            y = 0.2 + month / 24.0
        else:
            y = float(target(v, month))
        meta = InstanceMeta(site_id=f"syn{i:04d}", date=dt.date(2021, month, 15),
                            latitude=34.0, longitude=-118.0)
        instances.append(TileInstance(features=features, shape=shape,
                                      meta=meta, target=y))
    return instances


class ConstantPredictor:
    """Predictor stub returning a fixed normalized value."""

    model_type = "constant_stub"

    def __init__(self, value=0.5, input_shape=(8, 8, 3), cap=302.0):
        self.value = value
        self.input_shape = tuple(input_shape)
        self.cap = cap
        self.removed = frozenset()

    def predict(self, instance):
        return self.value

    def predict_batch(self, instances):
        return np.full(len(instances), self.value, dtype=float)


def labels_csv_text(rows):
    header = "site_id,latitude,longitude,date,lfmc_percent,species"
    return "\n".join([header] + rows) + "\n"


def write_labels_csv(tmp_path, rows, name="labels.csv"):
    path = tmp_path / name
    path.write_text(labels_csv_text(rows), encoding="utf-8")
    return path


def pipeline_world(tmp_path, n_obs=40, grid_size=48, shape=(8, 8, 3), seed=7,
                   output_name="out", permutations=99, train_overrides=None):
    """A complete small pipeline fixture: rasters + manifest + labels CSV +
    land cover raster + config JSON. Returns the config path."""
    from lfmcmap.ingest import month_range

    grid = make_grid(grid_size, grid_size)
    months = month_range((2024, 1), (2024, 12))
    rng = np.random.default_rng(seed)

    raster_dir = tmp_path / "rasters"
    raster_dir.mkdir(exist_ok=True)
    entries = write_modality_rasters(raster_dir, grid, months, rng)
    manifest = write_manifest_json(raster_dir, entries)

    codes = rng.choice([10, 20, 30], size=(grid.height, grid.width)).astype(np.int16)
    land_cover_path = tmp_path / "land_cover.tif"
    from lfmcmap.geotiff import write_geotiff as _write
    _write(land_cover_path, codes, grid, nodata=0)

    margin = shape[0] // 2 + 2
    rows = []
    for i in range(n_obs):
        r = int(rng.integers(margin, grid.height - margin))
        c = int(rng.integers(margin, grid.width - margin))
        x, y = grid.xy_of(r, c)
        lat, lon = grid.xy_to_lonlat(x, y)
        month = int(rng.integers(shape[2], 13))  # leave temporal history
        day = int(rng.integers(1, 28))
        value = float(rng.uniform(30.0, 290.0))
        rows.append(f"s{i:03d},{float(lat):.6f},{float(lon):.6f},"
                    f"2024-{month:02d}-{day:02d},{value:.1f},")
    labels_path = write_labels_csv(tmp_path, rows)

    corner_lats, corner_lons = [], []
    for (r, c) in [(0, 0), (0, grid.width), (grid.height, 0), (grid.height, grid.width)]:
        x = grid.origin_x + c * grid.pixel_size_x
        y = grid.origin_y - r * grid.pixel_size_y
        lat, lon = grid.xy_to_lonlat(x, y)
        corner_lats.append(float(lat))
        corner_lons.append(float(lon))

    config = {
        "config_version": 1,
        "paths": {
            "labels_csv": str(labels_path),
            "raster_manifest": str(manifest),
            "land_cover_raster": str(land_cover_path),
            "output_dir": str(tmp_path / output_name),
        },
        "region": {"min_lon": min(corner_lons) - 0.01, "min_lat": min(corner_lats) - 0.01,
                   "max_lon": max(corner_lons) + 0.01, "max_lat": max(corner_lats) + 0.01},
        "date_range": ["2024-01-01", "2024-12-31"],
        "grid": {"crs": grid.crs, "origin_x": grid.origin_x, "origin_y": grid.origin_y,
                 "height": grid.height, "width": grid.width, "pixel_size": 10.0},
        "months": {"start": [2024, 1], "end": [2024, 12]},
        "dataset": {"shape": list(shape), "fractions": [0.7, 0.15, 0.15], "seed": 0},
        "training": dict({"model": "both", "hidden": [8, 4], "max_epochs": 4,
                          "patience": 5, "learning_rate": 0.05, "momentum": 0.9,
                          "batch_size": 16, "seed": 0}, **(train_overrides or {})),
        "evaluation": {"knn_k": 2, "permutations": permutations, "seed": 0},
        "map": {"months": [[2024, 6], [2024, 7]], "model": "regressor"},
        "ablation": {"shapes": [[8, 8, 3], [4, 4, 3], [1, 1, 3]], "hidden": [8, 4]},
        "threads": 1,
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config, indent=1))
    return config_path


#: Ten-row fixture: one out-of-range latitude (reject) and one same-day
#: duplicate pair; everything inside CONUS / 2017-2023.
TEN_ROW_FIXTURE = [
    "siteA,34.10,-118.20,2021-06-01,95.0,chamise",
    "siteA,34.10,-118.20,2021-06-01,105.0,chamise",   # same-day duplicate
    "siteA,34.10,-118.20,2021-07-01,88.0,chamise",
    "siteB,39.50,-120.10,2020-05-15,140.0,sagebrush",
    "siteB,39.50,-120.10,2020-08-15,76.0,sagebrush",
    "siteC,44.00,-110.50,2019-09-10,350.0,",           # capped to 302
    "siteC,44.00,-110.50,2019-10-10,120.0,",
    "siteD,31.30,-97.40,2022-03-05,180.0,juniper",
    "siteD,95.00,-97.40,2022-04-05,160.0,juniper",     # latitude out of range
    "siteE,40.70,-105.20,2023-01-20,110.0,",
]
