"""Grids, bounding boxes, and coordinate transforms.

Rasters and map grids are north-up affine grids in either geographic
WGS84 (EPSG:4326) or a WGS84 UTM zone (EPSG:326xx / 327xx). The UTM
forward/inverse transverse-Mercator series below are the standard ones
and are good to well under a meter, which is plenty for placing 10 m
pixels. Anything more exotic needs reprojection before it enters the
pipeline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError, DataError

#: Mean Earth radius in meters, used for great-circle distances.
EARTH_RADIUS_M = 6371008.8

# WGS84 ellipsoid.
_WGS84_A = 6378137.0
_WGS84_F = 1.0 / 298.257223563
_E2 = _WGS84_F * (2.0 - _WGS84_F)
_EP2 = _E2 / (1.0 - _E2)
_K0 = 0.9996


@dataclass(frozen=True)
class BoundingBox:
    """Geographic lat/lon box, edges inclusive."""

    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float

    def __post_init__(self) -> None:
        if self.min_lon > self.max_lon or self.min_lat > self.max_lat:
            raise ConfigError(f"inverted bounding box {self}")

    def contains(self, lat: float, lon: float) -> bool:
        return (self.min_lat <= lat <= self.max_lat
                and self.min_lon <= lon <= self.max_lon)

    @property
    def center(self) -> Tuple[float, float]:
        """(lat, lon) of the box center."""
        return ((self.min_lat + self.max_lat) / 2.0,
                (self.min_lon + self.max_lon) / 2.0)


#: Continental United States, the default label filter region.
CONUS_BBOX = BoundingBox(min_lon=-125.0, min_lat=24.5, max_lon=-66.9, max_lat=49.5)


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters; accepts scalars or arrays."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(v, dtype=float))
                              for v in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def _parse_crs(crs: str):
    """Return ("geographic", None, None) or ("utm", zone, north)."""
    code = crs.upper().replace(" ", "")
    if not code.startswith("EPSG:"):
        raise ConfigError(f"unsupported CRS {crs!r} (expected EPSG:4326 or EPSG:326xx/327xx)")
    try:
        epsg = int(code[5:])
    except ValueError:
        raise ConfigError(f"malformed CRS {crs!r}") from None
    if epsg == 4326:
        return "geographic", None, None
    if 32601 <= epsg <= 32660:
        return "utm", epsg - 32600, True
    if 32701 <= epsg <= 32760:
        return "utm", epsg - 32700, False
    raise ConfigError(f"unsupported CRS {crs!r} (expected EPSG:4326 or EPSG:326xx/327xx)")


def utm_zone_of(lon: float) -> int:
    return int((lon + 180.0) // 6.0) + 1


def utm_crs_for(lat: float, lon: float) -> str:
    zone = min(max(utm_zone_of(lon), 1), 60)
    return f"EPSG:{32600 + zone if lat >= 0 else 32700 + zone}"


def _central_meridian(zone: int) -> float:
    return -183.0 + 6.0 * zone


def utm_forward(lat, lon, zone: int, north: bool):
    """Lat/lon (degrees) to UTM easting/northing (meters)."""
    phi = np.radians(np.asarray(lat, dtype=float))
    lam = np.radians(np.asarray(lon, dtype=float))
    lam0 = math.radians(_central_meridian(zone))

    sin_phi = np.sin(phi)
    cos_phi = np.cos(phi)
    n = _WGS84_A / np.sqrt(1.0 - _E2 * sin_phi ** 2)
    t = np.tan(phi) ** 2
    c = _EP2 * cos_phi ** 2
    a_ = (lam - lam0) * cos_phi
    e2, e4, e6 = _E2, _E2 ** 2, _E2 ** 3
    m = _WGS84_A * (
        (1 - e2 / 4 - 3 * e4 / 64 - 5 * e6 / 256) * phi
        - (3 * e2 / 8 + 3 * e4 / 32 + 45 * e6 / 1024) * np.sin(2 * phi)
        + (15 * e4 / 256 + 45 * e6 / 1024) * np.sin(4 * phi)
        - (35 * e6 / 3072) * np.sin(6 * phi)
    )
    easting = _K0 * n * (
        a_ + (1 - t + c) * a_ ** 3 / 6
        + (5 - 18 * t + t ** 2 + 72 * c - 58 * _EP2) * a_ ** 5 / 120
    ) + 500000.0
    northing = _K0 * (
        m + n * np.tan(phi) * (
            a_ ** 2 / 2
            + (5 - t + 9 * c + 4 * c ** 2) * a_ ** 4 / 24
            + (61 - 58 * t + t ** 2 + 600 * c - 330 * _EP2) * a_ ** 6 / 720
        )
    )
    if not north:
        northing = northing + 10000000.0
    return easting, northing


def utm_inverse(easting, northing, zone: int, north: bool):
    """UTM easting/northing (meters) to lat/lon (degrees)."""
    x = np.asarray(easting, dtype=float) - 500000.0
    y = np.asarray(northing, dtype=float)
    if not north:
        y = y - 10000000.0
    lam0 = math.radians(_central_meridian(zone))

    e2, e4, e6 = _E2, _E2 ** 2, _E2 ** 3
    m = y / _K0
    mu = m / (_WGS84_A * (1 - e2 / 4 - 3 * e4 / 64 - 5 * e6 / 256))
    e1 = (1 - math.sqrt(1 - e2)) / (1 + math.sqrt(1 - e2))
    phi1 = mu + (
        (3 * e1 / 2 - 27 * e1 ** 3 / 32) * np.sin(2 * mu)
        + (21 * e1 ** 2 / 16 - 55 * e1 ** 4 / 32) * np.sin(4 * mu)
        + (151 * e1 ** 3 / 96) * np.sin(6 * mu)
        + (1097 * e1 ** 4 / 512) * np.sin(8 * mu)
    )
    sin1 = np.sin(phi1)
    cos1 = np.cos(phi1)
    c1 = _EP2 * cos1 ** 2
    t1 = np.tan(phi1) ** 2
    n1 = _WGS84_A / np.sqrt(1 - e2 * sin1 ** 2)
    r1 = _WGS84_A * (1 - e2) / (1 - e2 * sin1 ** 2) ** 1.5
    d = x / (n1 * _K0)
    phi = phi1 - (n1 * np.tan(phi1) / r1) * (
        d ** 2 / 2
        - (5 + 3 * t1 + 10 * c1 - 4 * c1 ** 2 - 9 * _EP2) * d ** 4 / 24
        + (61 + 90 * t1 + 298 * c1 + 45 * t1 ** 2 - 252 * _EP2 - 3 * c1 ** 2) * d ** 6 / 720
    )
    lam = lam0 + (
        d - (1 + 2 * t1 + c1) * d ** 3 / 6
        + (5 - 2 * c1 + 28 * t1 - 3 * c1 ** 2 + 8 * _EP2 + 24 * t1 ** 2) * d ** 5 / 120
    ) / cos1
    return np.degrees(phi), np.degrees(lam)


@dataclass(frozen=True)
class GridSpec:
    """North-up affine pixel grid.

    ``origin_x``/``origin_y`` locate the outer corner of pixel (0, 0);
    ``pixel_size_y`` is applied southward. Coordinates are in the units
    of ``crs`` (meters for UTM, degrees for EPSG:4326).
    """

    origin_x: float
    origin_y: float
    pixel_size_x: float
    pixel_size_y: float
    height: int
    width: int
    crs: str = "EPSG:4326"

    def __post_init__(self) -> None:
        if self.pixel_size_x <= 0 or self.pixel_size_y <= 0:
            raise ConfigError("pixel sizes must be positive")
        if self.height <= 0 or self.width <= 0:
            raise ConfigError("grid dimensions must be positive")
        _parse_crs(self.crs)  # reject unsupported CRS early

    # -- coordinate math ---------------------------------------------------

    def xy_of(self, row, col):
        """Map coordinates of pixel centers."""
        x = self.origin_x + (np.asarray(col, dtype=float) + 0.5) * self.pixel_size_x
        y = self.origin_y - (np.asarray(row, dtype=float) + 0.5) * self.pixel_size_y
        return x, y

    def rowcol_of(self, x, y):
        """Pixel indices containing map coordinates (floor rule)."""
        col = np.floor((np.asarray(x, dtype=float) - self.origin_x) / self.pixel_size_x)
        row = np.floor((self.origin_y - np.asarray(y, dtype=float)) / self.pixel_size_y)
        return row.astype(int), col.astype(int)

    def contains_rowcol(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        """(min_x, min_y, max_x, max_y) of the grid extent."""
        return (self.origin_x,
                self.origin_y - self.height * self.pixel_size_y,
                self.origin_x + self.width * self.pixel_size_x,
                self.origin_y)

    # -- CRS bridging ------------------------------------------------------

    def lonlat_to_xy(self, lat, lon):
        kind, zone, north = _parse_crs(self.crs)
        if kind == "geographic":
            return np.asarray(lon, dtype=float), np.asarray(lat, dtype=float)
        return utm_forward(lat, lon, zone, north)

    def xy_to_lonlat(self, x, y):
        kind, zone, north = _parse_crs(self.crs)
        if kind == "geographic":
            return np.asarray(y, dtype=float), np.asarray(x, dtype=float)
        return utm_inverse(x, y, zone, north)

    def lonlat_to_rowcol(self, lat, lon):
        x, y = self.lonlat_to_xy(lat, lon)
        return self.rowcol_of(x, y)

    def center_lonlat(self) -> Tuple[float, float]:
        """(lat, lon) of the grid center."""
        x = self.origin_x + self.width * self.pixel_size_x / 2.0
        y = self.origin_y - self.height * self.pixel_size_y / 2.0
        lat, lon = self.xy_to_lonlat(x, y)
        return float(lat), float(lon)

    def pixel_size_m(self) -> Tuple[float, float]:
        """Approximate pixel footprint in meters (exact for UTM grids)."""
        kind, _, _ = _parse_crs(self.crs)
        if kind == "utm":
            return self.pixel_size_x, self.pixel_size_y
        lat, _ = self.center_lonlat()
        meters_per_deg_lat = 2 * math.pi * EARTH_RADIUS_M / 360.0
        meters_per_deg_lon = meters_per_deg_lat * math.cos(math.radians(lat))
        return self.pixel_size_x * meters_per_deg_lon, self.pixel_size_y * meters_per_deg_lat


def grid_from_bbox(bbox: BoundingBox, pixel_size_m: float = 10.0,
                   crs: str | None = None) -> GridSpec:
    """Build a square-pixel grid covering ``bbox``.

    With no explicit CRS the UTM zone of the box center is used so the
    pixels are true 10 m squares.
    """
    if crs is None:
        lat_c, lon_c = bbox.center
        crs = utm_crs_for(lat_c, lon_c)
    kind, zone, north = _parse_crs(crs)
    if kind == "geographic":
        raise ConfigError("grid_from_bbox needs a projected (UTM) CRS for metric pixels")
    corners_lat = [bbox.min_lat, bbox.min_lat, bbox.max_lat, bbox.max_lat]
    corners_lon = [bbox.min_lon, bbox.max_lon, bbox.min_lon, bbox.max_lon]
    xs, ys = utm_forward(corners_lat, corners_lon, zone, north)
    min_x, max_x = float(np.min(xs)), float(np.max(xs))
    min_y, max_y = float(np.min(ys)), float(np.max(ys))
    width = max(1, int(math.ceil((max_x - min_x) / pixel_size_m)))
    height = max(1, int(math.ceil((max_y - min_y) / pixel_size_m)))
    return GridSpec(origin_x=min_x, origin_y=max_y,
                    pixel_size_x=pixel_size_m, pixel_size_y=pixel_size_m,
                    height=height, width=width, crs=crs)


def require_same_crs(a: str, b: str, context: str) -> None:
    if a.upper() != b.upper():
        ka = _parse_crs(a)
        kb = _parse_crs(b)
        # A geographic<->UTM pair is bridgeable; anything else is not.
        if "geographic" not in (ka[0], kb[0]) and ka != kb:
            raise DataError(f"{context}: CRS mismatch {a} vs {b} with no supported transform")
