"""Domain vocabulary and elemental formulas.

Everything in this module is a pure function or an immutable value type:
the fuel-moisture equation, the cap/normalization pair used to put targets
into [0, 1], NDVI, and the three stratifiers (meteorological season, land
cover class, 500 m elevation band).
"""
from __future__ import annotations

import datetime as dt
import enum
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import DomainError

#: Default cap applied to fuel moisture percentages before normalization.
#: Chosen just above the label distribution's extreme tail; configurable
#: wherever it is consumed.
DEFAULT_CAP = 302.0

#: Elevation bands are this many meters tall.
ELEVATION_BAND_M = 500


class Season(enum.Enum):
    """Meteorological seasons (DJF / MAM / JJA / SON)."""

    WINTER = "Winter"
    SPRING = "Spring"
    SUMMER = "Summer"
    AUTUMN = "Autumn"


_MONTH_TO_SEASON = {
    12: Season.WINTER, 1: Season.WINTER, 2: Season.WINTER,
    3: Season.SPRING, 4: Season.SPRING, 5: Season.SPRING,
    6: Season.SUMMER, 7: Season.SUMMER, 8: Season.SUMMER,
    9: Season.AUTUMN, 10: Season.AUTUMN, 11: Season.AUTUMN,
}


class LandCoverClass(enum.IntEnum):
    """ESA WorldCover class codes. Unknown codes are rejected at parse time."""

    TREES = 10
    SHRUB = 20
    GRASS = 30
    CROPLAND = 40
    BUILT_UP = 50
    BARE_SPARSE = 60
    SNOW_ICE = 70
    WATER = 80
    WETLAND = 90
    MANGROVES = 95
    MOSS_LICHEN = 100

    @classmethod
    def from_code(cls, code: int) -> "LandCoverClass":
        try:
            return cls(int(code))
        except ValueError:
            raise DomainError(f"unknown land cover code {code!r}") from None

    @property
    def label(self) -> str:
        return _LAND_COVER_LABELS[self]


_LAND_COVER_LABELS = {
    LandCoverClass.TREES: "Trees",
    LandCoverClass.SHRUB: "Shrub",
    LandCoverClass.GRASS: "Grass",
    LandCoverClass.CROPLAND: "Cropland",
    LandCoverClass.BUILT_UP: "Built-up",
    LandCoverClass.BARE_SPARSE: "Bare / Sparse",
    LandCoverClass.SNOW_ICE: "Snow / Ice",
    LandCoverClass.WATER: "Water",
    LandCoverClass.WETLAND: "Wetland",
    LandCoverClass.MANGROVES: "Mangroves",
    LandCoverClass.MOSS_LICHEN: "Moss / Lichen",
}


@dataclass(frozen=True)
class FreshDryWeights:
    """Oven-dry sample weights, both in grams."""

    w_fresh: float
    w_dry: float

    def __post_init__(self) -> None:
        if self.w_dry <= 0:
            raise DomainError(f"w_dry must be > 0, got {self.w_dry}")
        if self.w_fresh < 0:
            raise DomainError(f"w_fresh must be >= 0, got {self.w_fresh}")


@dataclass(frozen=True)
class ElevationBand:
    """Half-open elevation interval [lower_m, upper_m), 500 m tall."""

    lower_m: int

    @property
    def upper_m(self) -> int:
        return self.lower_m + ELEVATION_BAND_M

    @property
    def label(self) -> str:
        return f"{self.lower_m}-{self.upper_m}m"

    def __contains__(self, elevation_m: float) -> bool:
        return self.lower_m <= elevation_m < self.upper_m


@dataclass
class LfmcSample:
    """One georeferenced, dated fuel-moisture label.

    ``land_cover`` and ``elevation_m`` start unset and are filled in by
    enrichment against static rasters.
    """

    site_id: str
    latitude: float
    longitude: float
    date: dt.date
    lfmc_percent: float
    species: Optional[str] = None
    land_cover: Optional[LandCoverClass] = None
    elevation_m: Optional[float] = None

    def validate(self) -> None:
        if not -90.0 <= self.latitude <= 90.0:
            raise DomainError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise DomainError(f"longitude {self.longitude} outside [-180, 180]")
        if self.lfmc_percent < 0:
            raise DomainError(f"lfmc_percent {self.lfmc_percent} is negative")


def compute_lfmc(weights: FreshDryWeights) -> float:
    """Fuel moisture percentage from fresh and oven-dry weights.

    Returns 100 * (w_fresh - w_dry) / w_dry. A negative result (fresh
    lighter than dry) is returned as-is so data-entry errors surface in
    validation rather than silently disappearing.
    """
    return 100.0 * (weights.w_fresh - weights.w_dry) / weights.w_dry


def cap_lfmc(value: float, cap: float = DEFAULT_CAP) -> float:
    """Clamp an LFMC percentage from above at ``cap``."""
    if value < 0:
        raise DomainError(f"cannot cap negative LFMC value {value}")
    return min(value, cap)


def normalize_target(value: float, cap: float = DEFAULT_CAP) -> float:
    """Map a capped LFMC percentage linearly onto [0, 1]."""
    if not 0.0 <= value <= cap:
        raise DomainError(f"value {value} outside [0, {cap}]")
    return value / cap


def denormalize_target(value: float, cap: float = DEFAULT_CAP) -> float:
    """Inverse of :func:`normalize_target`."""
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"normalized value {value} outside [0, 1]")
    return value * cap


def season_of(date: Union[dt.date, dt.datetime]) -> Season:
    """Meteorological season of a calendar date."""
    return _MONTH_TO_SEASON[date.month]


def elevation_band(elevation_m: float) -> ElevationBand:
    """500 m band containing ``elevation_m``; boundaries fall into the
    band above (half-open intervals)."""
    if elevation_m < -ELEVATION_BAND_M:
        raise DomainError(f"elevation {elevation_m} below supported range")
    lower = ELEVATION_BAND_M * math.floor(elevation_m / ELEVATION_BAND_M)
    if elevation_m < lower:  # division underflow for tiny negatives
        lower -= ELEVATION_BAND_M
    return ElevationBand(int(lower))


def ndvi(nir, red):
    """Normalized difference vegetation index, (nir - red) / (nir + red).

    Accepts scalars or numpy arrays. Cells where nir + red == 0 come back
    as NaN (nodata); negative reflectances are a domain error.
    """
    nir_a = np.asarray(nir, dtype=float)
    red_a = np.asarray(red, dtype=float)
    if np.any(nir_a < 0) or np.any(red_a < 0):
        raise DomainError("reflectance must be non-negative")
    denom = nir_a + red_a
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, (nir_a - red_a) / np.where(denom > 0, denom, 1.0), np.nan)
    if np.isscalar(nir) and np.isscalar(red):
        return float(out)
    return out
