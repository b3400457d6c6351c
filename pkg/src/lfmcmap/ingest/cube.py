"""Harmonized monthly input cubes from multimodal raster stacks.

A cube is a fixed 10 m grid carrying, per modality, either a full
H x W x T x bands block (space-time modalities), per-month scalars
(time-only modalities, spatially static at this scale), or a single
static layer. Scenes are composited to monthly values with a per-band
aggregator; every cell is either valid or masked, never a sentinel.
"""
from __future__ import annotations

import datetime as dt
import enum
import hashlib
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core import ndvi
from ..errors import ConfigError, DataError
from ..geo import GridSpec
from ..geotiff import read_geotiff

Month = Tuple[int, int]  # (year, month)


# -- month arithmetic --------------------------------------------------------

def add_months(month: Month, delta: int) -> Month:
    year, m = month
    total = year * 12 + (m - 1) + delta
    return total // 12, total % 12 + 1


def month_range(start: Month, end: Month) -> List[Month]:
    """Inclusive list of consecutive months."""
    if (start[0], start[1]) > (end[0], end[1]):
        raise ConfigError(f"inverted month range {start}..{end}")
    months = []
    current = start
    while current <= end:
        months.append(current)
        current = add_months(current, 1)
    return months


def month_of(date: dt.date) -> Month:
    return (date.year, date.month)


# -- modality taxonomy -------------------------------------------------------

class Variability(enum.Enum):
    SPACE_TIME = "space_time"
    TIME_ONLY = "time_only"
    STATIC = "static"


class Aggregator(enum.Enum):
    MEAN = "mean"
    SUM = "sum"
    MEDIAN = "median"


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    bands: Tuple[str, ...]              # full band list, derived bands included
    variability: Variability
    aggregators: Tuple[Aggregator, ...]  # one per band
    native_resolution_m: float
    source_bands: Tuple[str, ...] = ()   # bands read from files (defaults to all)

    def __post_init__(self):
        if len(self.aggregators) != len(self.bands):
            raise ConfigError(f"{self.name}: one aggregator per band required")
        if not self.source_bands:
            object.__setattr__(self, "source_bands", self.bands)

    @property
    def n_bands(self) -> int:
        return len(self.bands)


_S2_OPTICAL = ("B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B11", "B12")

DEFAULT_MODALITIES: Dict[str, ModalitySpec] = {
    "S2": ModalitySpec(
        name="S2", bands=_S2_OPTICAL + ("NDVI",),
        variability=Variability.SPACE_TIME,
        aggregators=(Aggregator.MEDIAN,) * 11,
        native_resolution_m=10.0,
        source_bands=_S2_OPTICAL,  # NDVI derived from the monthly composite
    ),
    "S1": ModalitySpec(
        name="S1", bands=("VV", "VH"),
        variability=Variability.SPACE_TIME,
        aggregators=(Aggregator.MEAN,) * 2,
        native_resolution_m=10.0,
    ),
    "VIIRS": ModalitySpec(
        name="VIIRS", bands=("DNB_avg",),
        variability=Variability.TIME_ONLY,
        aggregators=(Aggregator.MEAN,),
        native_resolution_m=463.0,
    ),
    "ERA5": ModalitySpec(
        name="ERA5", bands=("precipitation", "temperature"),
        variability=Variability.TIME_ONLY,
        aggregators=(Aggregator.SUM, Aggregator.MEAN),
        native_resolution_m=11132.0,
    ),
    "TerraClimate": ModalitySpec(
        name="TerraClimate",
        bands=("climate_water_deficit", "soil_moisture", "actual_evapotranspiration"),
        variability=Variability.TIME_ONLY,
        aggregators=(Aggregator.MEAN,) * 3,
        native_resolution_m=4638.0,
    ),
    "SRTM": ModalitySpec(
        name="SRTM", bands=("elevation", "slope"),
        variability=Variability.STATIC,
        aggregators=(Aggregator.MEAN,) * 2,
        native_resolution_m=30.0,
        source_bands=("elevation",),  # slope derived on the target grid
    ),
    "Location": ModalitySpec(
        name="Location", bands=("latitude", "longitude"),
        variability=Variability.STATIC,
        aggregators=(Aggregator.MEAN,) * 2,
        native_resolution_m=0.0,
    ),
}

#: Canonical modality ordering used for feature layout and serialization.
MODALITY_ORDER = ("S2", "S1", "VIIRS", "ERA5", "TerraClimate", "SRTM", "Location")

_NDVI_NIR, _NDVI_RED = _S2_OPTICAL.index("B08"), _S2_OPTICAL.index("B04")


# -- manifest ----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    """One raster file: which modality it feeds and which month it covers
    (static modalities omit the month)."""

    modality: str
    path: str
    year: Optional[int] = None
    month: Optional[int] = None

    @property
    def month_key(self) -> Optional[Month]:
        if self.year is None or self.month is None:
            return None
        return (self.year, self.month)


def load_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    """Read a JSON manifest: a list of {modality, path, year, month}."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"raster manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed raster manifest {path}: {exc}") from None
    if not isinstance(raw, list):
        raise ConfigError(f"raster manifest {path} must be a JSON array")
    base = Path(path).parent
    entries = []
    for item in raw:
        file_path = Path(item["path"])
        if not file_path.is_absolute():
            file_path = base / file_path
        entries.append(ManifestEntry(modality=item["modality"], path=str(file_path),
                                     year=item.get("year"), month=item.get("month")))
    return entries


# -- cube --------------------------------------------------------------------

@dataclass
class InputCube:
    grid: GridSpec
    months: Tuple[Month, ...]
    space_time: Dict[str, np.ndarray] = field(default_factory=dict)        # (H,W,T,B) float32
    space_time_valid: Dict[str, np.ndarray] = field(default_factory=dict)  # (H,W,T,B) bool
    time_only: Dict[str, np.ndarray] = field(default_factory=dict)         # (T,B) float32
    time_only_valid: Dict[str, np.ndarray] = field(default_factory=dict)   # (T,B) bool
    static: Dict[str, np.ndarray] = field(default_factory=dict)            # (H,W,B) or (B,)
    cube_id: str = "in-memory"

    @property
    def n_months(self) -> int:
        return len(self.months)

    def month_index(self, month: Month) -> int:
        try:
            return self.months.index(tuple(month))
        except ValueError:
            raise DataError(f"month {month} not covered by cube "
                            f"({self.months[0]}..{self.months[-1]})") from None

    def validate(self) -> None:
        expected = (self.grid.height, self.grid.width, self.n_months)
        for name, arr in self.space_time.items():
            if arr.shape[:3] != expected:
                raise DataError(f"{name}: space-time block {arr.shape} does not "
                                f"match grid/month layout {expected}")
            if self.space_time_valid[name].shape != arr.shape:
                raise DataError(f"{name}: validity mask shape mismatch")
            if np.any(np.isnan(arr[self.space_time_valid[name]])):
                raise DataError(f"{name}: NaN leaked into valid cells")
        for name, arr in self.time_only.items():
            if arr.shape[0] != self.n_months:
                raise DataError(f"{name}: time-only block has {arr.shape[0]} months, "
                                f"cube has {self.n_months}")
        for prev, cur in zip(self.months, self.months[1:]):
            if add_months(prev, 1) != cur:
                raise DataError(f"cube months not consecutive at {prev} -> {cur}")


# -- resampling and compositing ----------------------------------------------

def resample_raster(array: np.ndarray, src_grid: GridSpec, dst_grid: GridSpec,
                    nodata: Optional[float] = None, method: str = "bilinear",
                    ) -> Tuple[np.ndarray, np.ndarray]:
    """Resample a single-band raster onto ``dst_grid``.

    Returns (values float64, valid bool). Cells falling outside the source
    or touching nodata are invalid. Bilinear is for continuous bands;
    nearest is for categorical ones.
    """
    if array.ndim != 2:
        raise DataError(f"expected 2D band, got shape {array.shape}")
    src = array.astype(float)
    invalid_src = np.isnan(src)
    if nodata is not None:
        invalid_src |= src == nodata

    rows = np.arange(dst_grid.height)
    cols = np.arange(dst_grid.width)
    col_grid, row_grid = np.meshgrid(cols, rows)
    x, y = dst_grid.xy_of(row_grid, col_grid)
    if src_grid.crs.upper() != dst_grid.crs.upper():
        lat, lon = dst_grid.xy_to_lonlat(x, y)
        x, y = src_grid.lonlat_to_xy(lat, lon)

    # fractional source pixel-center coordinates
    fx = (x - src_grid.origin_x) / src_grid.pixel_size_x - 0.5
    fy = (src_grid.origin_y - y) / src_grid.pixel_size_y - 0.5

    if method == "nearest":
        ix = np.rint(fx).astype(int)
        iy = np.rint(fy).astype(int)
        inside = (ix >= 0) & (ix < src_grid.width) & (iy >= 0) & (iy < src_grid.height)
        out = np.full(inside.shape, np.nan)
        out[inside] = src[iy[inside], ix[inside]]
        valid = inside & ~np.isnan(out)
        if nodata is not None:
            valid &= out != nodata
        out[~valid] = np.nan
        return out, valid
    if method != "bilinear":
        raise ConfigError(f"unknown resampling method {method!r}")

    inside = ((fx >= 0) & (fx <= src_grid.width - 1)
              & (fy >= 0) & (fy <= src_grid.height - 1))
    x0c = np.clip(np.floor(fx).astype(int), 0, max(src_grid.width - 2, 0))
    y0c = np.clip(np.floor(fy).astype(int), 0, max(src_grid.height - 2, 0))
    tx = fx - x0c
    ty = fy - y0c
    q00 = src[y0c, x0c]
    q01 = src[y0c, x0c + 1]
    q10 = src[y0c + 1, x0c]
    q11 = src[y0c + 1, x0c + 1]
    bad = (invalid_src[y0c, x0c] | invalid_src[y0c, x0c + 1]
           | invalid_src[y0c + 1, x0c] | invalid_src[y0c + 1, x0c + 1])
    out = (q00 * (1 - tx) * (1 - ty) + q01 * tx * (1 - ty)
           + q10 * (1 - tx) * ty + q11 * tx * ty)
    valid = inside & ~bad & ~np.isnan(out)
    out[~valid] = np.nan
    return out, valid


def _sorted_nan_reduce(stack: np.ndarray, aggregator: Aggregator) -> np.ndarray:
    """Reduce a (scenes, ...) stack with NaN as nodata.

    Values are sorted along the scene axis first, which makes every
    reduction invariant to scene ordering down to the last bit.
    """
    ordered = np.sort(stack, axis=0)  # NaNs sort to the end
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices
        if aggregator is Aggregator.MEAN:
            return np.nanmean(ordered, axis=0)
        if aggregator is Aggregator.MEDIAN:
            return np.nanmedian(ordered, axis=0)
        out = np.nansum(ordered, axis=0)
        all_nan = np.isnan(stack).all(axis=0)
        return np.where(all_nan, np.nan, out)


def composite_scenes(scenes: Sequence[np.ndarray], aggregator: Aggregator) -> np.ndarray:
    """Monthly composite of same-band scenes (NaN = nodata)."""
    if not scenes:
        raise DataError("no scenes to composite")
    return _sorted_nan_reduce(np.stack(scenes, axis=0), aggregator)


def resample_to_monthly(timestamps: Sequence[dt.date], values: Sequence[float],
                        months: Sequence[Month], aggregator: Aggregator,
                        ) -> Tuple[np.ndarray, np.ndarray]:
    """Collapse a timestamped series onto the requested months.

    Returns (values, valid); months with no observations are invalid.
    """
    ts = list(timestamps)
    vals = np.asarray(values, dtype=float)
    if len(ts) != vals.size:
        raise DataError("timestamps and values must align")
    out = np.full(len(months), np.nan)
    valid = np.zeros(len(months), dtype=bool)
    for t_index, month in enumerate(months):
        bucket = vals[[i for i, stamp in enumerate(ts) if month_of(stamp) == tuple(month)]]
        bucket = bucket[~np.isnan(bucket)]
        if bucket.size == 0:
            continue
        out[t_index] = float(_sorted_nan_reduce(bucket[:, None], aggregator)[0])
        valid[t_index] = True
    return out, valid


def horn_slope(elevation: np.ndarray, pixel_size_x_m: float, pixel_size_y_m: float,
               ) -> np.ndarray:
    """Slope in degrees from a DEM via the 3x3 Horn kernel, edge-replicated."""
    z = np.pad(elevation.astype(float), 1, mode="edge")
    dzdx = ((z[:-2, 2:] + 2 * z[1:-1, 2:] + z[2:, 2:])
            - (z[:-2, :-2] + 2 * z[1:-1, :-2] + z[2:, :-2])) / (8.0 * pixel_size_x_m)
    dzdy = ((z[2:, :-2] + 2 * z[2:, 1:-1] + z[2:, 2:])
            - (z[:-2, :-2] + 2 * z[:-2, 1:-1] + z[:-2, 2:])) / (8.0 * pixel_size_y_m)
    return np.degrees(np.arctan(np.hypot(dzdx, dzdy)))


# -- cube assembly -----------------------------------------------------------

def _read_bands(path: str, expected_bands: int) -> Tuple[List[np.ndarray], GridSpec, Optional[float]]:
    array, grid, nodata = read_geotiff(path)
    if array.shape[0] != expected_bands:
        raise DataError(f"{path}: expected {expected_bands} band(s), found {array.shape[0]}")
    return [array[b] for b in range(array.shape[0])], grid, nodata


def _bbox_scalar(band: np.ndarray, src_grid: GridSpec, nodata: Optional[float],
                 dst_grid: GridSpec) -> float:
    """Mean of source cells overlapping the cube extent; coarse rasters
    that straddle the whole extent contribute their nearest cell."""
    values = band.astype(float)
    if nodata is not None:
        values = np.where(values == nodata, np.nan, values)
    min_x, min_y, max_x, max_y = dst_grid.bounds
    corners_x = np.array([min_x, min_x, max_x, max_x])
    corners_y = np.array([min_y, max_y, min_y, max_y])
    if src_grid.crs.upper() != dst_grid.crs.upper():
        lat, lon = dst_grid.xy_to_lonlat(corners_x, corners_y)
        corners_x, corners_y = src_grid.lonlat_to_xy(lat, lon)
    rows, cols = src_grid.rowcol_of(corners_x, corners_y)
    r0, r1 = int(np.min(rows)), int(np.max(rows))
    c0, c1 = int(np.min(cols)), int(np.max(cols))
    r0c, r1c = max(r0, 0), min(r1, src_grid.height - 1)
    c0c, c1c = max(c0, 0), min(c1, src_grid.width - 1)
    if r0c > r1c or c0c > c1c:
        raise DataError("cube extent does not intersect raster")
    window = values[r0c:r1c + 1, c0c:c1c + 1]
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return float(np.nanmean(window))


def load_cube(entries: Sequence[ManifestEntry], grid: GridSpec,
              months: Sequence[Month],
              specs: Optional[Dict[str, ModalitySpec]] = None,
              threads: int = 1) -> InputCube:
    """Assemble an InputCube from manifest entries.

    Space-time rasters are resampled (bilinear) onto the cube grid and
    composited monthly per band aggregator; a month with no scenes is an
    all-invalid layer. Time-only modalities reduce to per-month scalars
    over the cube extent and must cover every month. SRTM is loaded once
    with slope derived on the grid; Location holds the grid center
    coordinates, normalized.
    """
    specs = dict(specs or DEFAULT_MODALITIES)
    months = [tuple(m) for m in months]
    by_modality: Dict[str, List[ManifestEntry]] = {}
    for entry in entries:
        if entry.modality not in specs:
            raise ConfigError(f"manifest names unknown modality {entry.modality!r}")
        by_modality.setdefault(entry.modality, []).append(entry)
    needs_files = [name for name, spec in specs.items() if name != "Location"]
    absent = [name for name in needs_files if name not in by_modality]
    if absent:
        raise DataError(f"raster manifest has no entries for: {', '.join(absent)}")

    cube = InputCube(grid=grid, months=tuple(months), cube_id=_cube_id(entries, grid, months))
    height, width, n_months = grid.height, grid.width, len(months)

    def month_entries(name: str) -> Dict[Month, List[ManifestEntry]]:
        grouped: Dict[Month, List[ManifestEntry]] = {}
        # sort by path so compositing input order never depends on manifest order
        for entry in sorted(by_modality.get(name, []), key=lambda e: e.path):
            if entry.month_key is None:
                raise ConfigError(f"{name}: entry {entry.path} is missing year/month")
            grouped.setdefault(entry.month_key, []).append(entry)
        return grouped

    def build_space_time(spec: ModalitySpec):
        grouped = month_entries(spec.name)
        n_source = len(spec.source_bands)
        block = np.full((height, width, n_months, spec.n_bands), np.nan, dtype=np.float32)
        for t_index, month in enumerate(months):
            scenes_per_band: List[List[np.ndarray]] = [[] for _ in range(n_source)]
            for entry in grouped.get(month, []):
                bands, src_grid, nodata = _read_bands(entry.path, n_source)
                for b, band in enumerate(bands):
                    resampled, _ = resample_raster(band, src_grid, grid,
                                                   nodata=nodata, method="bilinear")
                    scenes_per_band[b].append(resampled)
            for b in range(n_source):
                if scenes_per_band[b]:
                    composite = composite_scenes(scenes_per_band[b], spec.aggregators[b])
                    block[:, :, t_index, b] = composite.astype(np.float32)
        if spec.name == "S2":
            nir = block[:, :, :, _NDVI_NIR].astype(float)
            red = block[:, :, :, _NDVI_RED].astype(float)
            both = ~np.isnan(nir) & ~np.isnan(red)
            # TOA products occasionally dip below zero; clamp before NDVI
            derived = np.full(nir.shape, np.nan, dtype=np.float32)
            derived[both] = ndvi(np.clip(nir[both], 0.0, None),
                                 np.clip(red[both], 0.0, None)).astype(np.float32)
            block[:, :, :, spec.n_bands - 1] = derived
        valid = ~np.isnan(block)
        return spec.name, block, valid

    def build_time_only(spec: ModalitySpec):
        grouped = month_entries(spec.name)
        missing = [m for m in months if m not in grouped]
        if missing:
            raise DataError(f"{spec.name}: no rasters for months "
                            + ", ".join(f"{y}-{m:02d}" for y, m in missing))
        block = np.full((n_months, spec.n_bands), np.nan, dtype=np.float32)
        for t_index, month in enumerate(months):
            per_band: List[List[float]] = [[] for _ in spec.bands]
            for entry in grouped[month]:
                bands, src_grid, nodata = _read_bands(entry.path, spec.n_bands)
                for b, band in enumerate(bands):
                    per_band[b].append(_bbox_scalar(band, src_grid, nodata, grid))
            for b, scalars in enumerate(per_band):
                stack = np.asarray(sorted(scalars), dtype=float)[:, None]
                block[t_index, b] = _sorted_nan_reduce(stack, spec.aggregators[b])[0]
        return spec.name, block, ~np.isnan(block)

    tasks = []
    for name in MODALITY_ORDER:
        spec = specs.get(name)
        if spec is None:
            continue
        if spec.variability is Variability.SPACE_TIME and name in by_modality:
            tasks.append((build_space_time, spec))
        elif spec.variability is Variability.TIME_ONLY and name in by_modality:
            tasks.append((build_time_only, spec))

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda t: t[0](t[1]), tasks))
    else:
        results = [fn(spec) for fn, spec in tasks]
    for name, block, valid in results:
        if block.ndim == 4:
            cube.space_time[name] = block
            cube.space_time_valid[name] = valid
        else:
            cube.time_only[name] = block
            cube.time_only_valid[name] = valid

    if "SRTM" in by_modality:
        entry = sorted(by_modality["SRTM"], key=lambda e: e.path)[0]
        bands, src_grid, nodata = _read_bands(entry.path, 1)
        dem, dem_valid = resample_raster(bands[0], src_grid, grid,
                                         nodata=nodata, method="bilinear")
        px_m, py_m = grid.pixel_size_m()
        slope = horn_slope(np.where(dem_valid, dem, 0.0), px_m, py_m)
        slope[~dem_valid] = np.nan
        dem[~dem_valid] = np.nan
        cube.static["SRTM"] = np.stack([dem, slope], axis=-1).astype(np.float32)

    lat_c, lon_c = grid.center_lonlat()
    cube.static["Location"] = np.array([lat_c / 90.0, lon_c / 180.0], dtype=np.float32)

    cube.validate()
    return cube


def _cube_id(entries: Sequence[ManifestEntry], grid: GridSpec,
             months: Sequence[Month]) -> str:
    digest = hashlib.sha256()
    for entry in sorted(entries, key=lambda e: (e.modality, e.path)):
        digest.update(f"{entry.modality}|{entry.path}|{entry.year}|{entry.month}\n".encode())
    digest.update(repr(grid).encode())
    digest.update(repr(sorted(months)).encode())
    return digest.hexdigest()[:12]
