"""Wall-to-wall map generation: tiling plan, batched inference, mosaic.

The default mode tiles the grid at stride = tile size; edge windows are
clamped inward so every window is full-size (models want a fixed shape),
and each pixel is owned by exactly one writing window (last window in
row-major order wins, resolved per axis). The optional sliding mode
(stride < tile) averages every window's prediction into all the pixels
it covers. Both are deterministic for any worker count because workers
only compute scalars; the mosaic is assembled in window order.
"""
from __future__ import annotations

import datetime as dt
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import denormalize_target
from .dataset import InstanceMeta, TileInstance, crop_features
from .errors import ConfigError, DataError
from .geo import BoundingBox, GridSpec
from .geotiff import write_geotiff
from .ingest.cube import InputCube, Month
from .model import Predictor

#: Output nodata marker, outside the valid LFMC range.
MAP_NODATA = -1.0


@dataclass(frozen=True)
class Window:
    row0: int
    col0: int
    height: int
    width: int


@dataclass
class TilePlan:
    windows: List[Window]
    owned: Optional[List[Window]]  # None in sliding (averaging) mode
    tile_shape: Tuple[int, int]
    stride: int
    grid_shape: Tuple[int, int]

    @property
    def mode(self) -> str:
        return "owned" if self.owned is not None else "sliding"


def _axis_starts(length: int, tile: int, stride: int) -> List[int]:
    starts = list(range(0, length - tile + 1, stride))
    if not starts or starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def plan_tiles(grid_shape: Tuple[int, int], tile_shape: Tuple[int, int],
               stride: Optional[int] = None) -> TilePlan:
    """Row-major full-size windows covering the grid.

    With the default stride (= tile size) the plan also carries owned
    sub-windows forming an exact partition of the grid: when the final
    clamped window overlaps its predecessor, the later window owns the
    contested pixels.
    """
    height, width = grid_shape
    tile_h, tile_w = tile_shape
    if tile_h > height or tile_w > width:
        raise DataError(f"tile {tile_h}x{tile_w} larger than grid {height}x{width}; "
                        "shrink the tile or extend the grid")
    if stride is None:
        stride = tile_h
    if stride < 1 or stride > max(tile_h, tile_w):
        raise ConfigError(f"stride {stride} must be in [1, tile size]")

    row_starts = _axis_starts(height, tile_h, stride)
    col_starts = _axis_starts(width, tile_w, stride)
    windows = [Window(r, c, tile_h, tile_w) for r in row_starts for c in col_starts]

    owned: Optional[List[Window]] = None
    if stride == tile_h == tile_w:
        row_owned = _owned_spans(row_starts, tile_h, height)
        col_owned = _owned_spans(col_starts, tile_w, width)
        owned = [Window(r0, c0, rh, cw)
                 for (r0, rh) in row_owned for (c0, cw) in col_owned]
    return TilePlan(windows=windows, owned=owned, tile_shape=(tile_h, tile_w),
                    stride=stride, grid_shape=(height, width))


def _owned_spans(starts: List[int], tile: int, length: int) -> List[Tuple[int, int]]:
    spans = []
    for i, start in enumerate(starts):
        end = starts[i + 1] if i + 1 < len(starts) else length
        spans.append((start, end - start))
    return spans


@dataclass
class LfmcMap:
    grid: GridSpec
    values: np.ndarray  # (H, W) float32, percent; MAP_NODATA where invalid
    month: Month
    nodata: float = MAP_NODATA
    provenance: Dict[str, str] = field(default_factory=dict)

    @property
    def valid_mask(self) -> np.ndarray:
        return self.values != self.nodata


def generate_map(cube: InputCube, predictor: Predictor, plan: TilePlan,
                 month_index: int, threads: int = 1) -> LfmcMap:
    """Predict every window, denormalize, and mosaic.

    Input nodata propagates: a pixel with any invalid required input
    (within the window's months and bands) is nodata in the output, and
    a fully-invalid window is skipped entirely.
    """
    h, w = plan.tile_shape
    t = predictor.input_shape[2]
    if (h, w) != tuple(predictor.input_shape[:2]):
        raise ConfigError(f"plan tile {h}x{w} does not match predictor input "
                          f"{predictor.input_shape[0]}x{predictor.input_shape[1]}")
    if plan.grid_shape != (cube.grid.height, cube.grid.width):
        raise ConfigError(f"plan covers a {plan.grid_shape} grid, cube is "
                          f"{(cube.grid.height, cube.grid.width)}")
    if month_index - t + 1 < 0:
        raise DataError(f"month index {month_index} has fewer than {t} months of history")

    required = frozenset(getattr(predictor, "modalities", ()) or ()) or None
    month = cube.months[month_index]

    def run_window(window: Window):
        features, invalid_plane, _ = crop_features(
            cube, window.row0, window.col0, (h, w, t), month_index,
            required=required)
        if invalid_plane.all():
            return None, invalid_plane
        x, y = cube.grid.xy_of(window.row0 + h / 2.0 - 0.5, window.col0 + w / 2.0 - 0.5)
        lat, lon = cube.grid.xy_to_lonlat(x, y)
        features["Location"] = np.array([float(lat) / 90.0, float(lon) / 180.0],
                                        dtype=np.float32)
        meta = InstanceMeta(site_id=f"tile_{window.row0}_{window.col0}",
                            date=dt.date(month[0], month[1], 1),
                            latitude=float(lat), longitude=float(lon))
        instance = TileInstance(features=features, shape=(h, w, t), meta=meta)
        value = denormalize_target(predictor.predict(instance), predictor.cap)
        return np.float32(value), invalid_plane

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_window, plan.windows))
    else:
        results = [run_window(window) for window in plan.windows]

    height, width = plan.grid_shape
    values = np.full((height, width), MAP_NODATA, dtype=np.float32)
    if plan.owned is not None:
        for window, owned, (value, invalid) in zip(plan.windows, plan.owned, results):
            if value is None:
                continue
            block = np.full((owned.height, owned.width), value, dtype=np.float32)
            local = invalid[owned.row0 - window.row0:owned.row0 - window.row0 + owned.height,
                            owned.col0 - window.col0:owned.col0 - window.col0 + owned.width]
            block[local] = MAP_NODATA
            values[owned.row0:owned.row0 + owned.height,
                   owned.col0:owned.col0 + owned.width] = block
    else:
        acc = np.zeros((height, width), dtype=np.float64)
        count = np.zeros((height, width), dtype=np.int64)
        blocked = np.zeros((height, width), dtype=bool)
        for window, (value, invalid) in zip(plan.windows, results):
            rows = slice(window.row0, window.row0 + window.height)
            cols = slice(window.col0, window.col0 + window.width)
            blocked[rows, cols] |= invalid
            if value is None:
                continue
            acc[rows, cols] += float(value)
            count[rows, cols] += 1
        covered = (count > 0) & ~blocked
        values[covered] = (acc[covered] / count[covered]).astype(np.float32)

    provenance = {
        "model": getattr(predictor, "model_type", "unknown"),
        "cube": cube.cube_id,
        "stride_mode": plan.mode,
        "stride": str(plan.stride),
        "month": f"{month[0]}-{month[1]:02d}",
    }
    return LfmcMap(grid=cube.grid, values=values, month=month, provenance=provenance)


def map_series(cube: InputCube, predictor: Predictor, months: Sequence[Month],
               stride: Optional[int] = None, threads: int = 1) -> List[LfmcMap]:
    """One map per requested month on identical grids."""
    h, w, _ = predictor.input_shape
    plan = plan_tiles((cube.grid.height, cube.grid.width), (h, w), stride)
    return [generate_map(cube, predictor, plan, cube.month_index(m), threads=threads)
            for m in months]


@dataclass(frozen=True)
class RegionalMean:
    month: Month
    mean_percent: Optional[float]  # None when the region has no valid pixels
    n_valid: int


def regional_mean_series(maps: Sequence[LfmcMap],
                         region: Union[BoundingBox, np.ndarray, None] = None,
                         ) -> List[RegionalMean]:
    """Arithmetic mean over valid pixels in the region, per month."""
    out = []
    for lfmc_map in maps:
        mask = _region_mask(lfmc_map.grid, region)
        if not mask.any():
            raise DataError("region does not intersect the map grid")
        select = mask & lfmc_map.valid_mask
        n_valid = int(select.sum())
        mean = float(lfmc_map.values[select].mean()) if n_valid else None
        out.append(RegionalMean(month=lfmc_map.month, mean_percent=mean,
                                n_valid=n_valid))
    return out


def _region_mask(grid: GridSpec, region) -> np.ndarray:
    if region is None:
        return np.ones((grid.height, grid.width), dtype=bool)
    if isinstance(region, np.ndarray):
        if region.shape != (grid.height, grid.width):
            raise DataError(f"region mask {region.shape} does not match grid "
                            f"{(grid.height, grid.width)}")
        return region.astype(bool)
    rows = np.arange(grid.height)
    cols = np.arange(grid.width)
    col_grid, row_grid = np.meshgrid(cols, rows)
    x, y = grid.xy_of(row_grid, col_grid)
    lat, lon = grid.xy_to_lonlat(x, y)
    return ((region.min_lat <= lat) & (lat <= region.max_lat)
            & (region.min_lon <= lon) & (lon <= region.max_lon))


def save_map(lfmc_map: LfmcMap, path: Union[str, Path]) -> None:
    """Write the map as float32 GeoTIFF with provenance tags."""
    write_geotiff(path, lfmc_map.values, lfmc_map.grid, nodata=lfmc_map.nodata,
                  metadata=dict(lfmc_map.provenance))
