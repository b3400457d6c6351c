"""Label CSV ingestion: parse, filter, aggregate, enrich.

The label file is UTF-8 CSV with a header row. Column names vary between
dataset releases, so a column map names the source columns; rows that fail
validation land in a rejects report instead of killing the run.
"""
from __future__ import annotations

import csv
import datetime as dt
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core import LandCoverClass, LfmcSample, cap_lfmc, DEFAULT_CAP
from ..errors import ConfigError, DomainError
from ..geo import CONUS_BBOX, BoundingBox, GridSpec

#: Canonical column names; override entries to match the source file.
DEFAULT_COLUMN_MAP: Dict[str, str] = {
    "site": "site_id",
    "lat": "latitude",
    "lon": "longitude",
    "date": "date",
    "value": "lfmc_percent",
    "species": "species",  # optional column
}

_REQUIRED_KEYS = ("site", "lat", "lon", "date", "value")

#: Default temporal filter, matching satellite data availability.
DEFAULT_DATE_RANGE = (dt.date(2017, 1, 1), dt.date(2023, 12, 31))


@dataclass(frozen=True)
class RejectedRow:
    row_index: int  # 1-based data row number (header not counted)
    reason: str


@dataclass
class ParseResult:
    samples: List[LfmcSample]
    rejects: List[RejectedRow]

    @property
    def n_rejected(self) -> int:
        return len(self.rejects)


def _parse_date(text: str) -> dt.date:
    text = text.strip()
    for parse in (dt.date.fromisoformat,
                  lambda s: dt.datetime.strptime(s, "%Y/%m/%d").date()):
        try:
            return parse(text)
        except ValueError:
            continue
    raise ValueError(f"unparseable date {text!r}")


def parse_labels(source: Union[str, Path, io.TextIOBase],
                 column_map: Optional[Dict[str, str]] = None) -> ParseResult:
    """Read one LfmcSample per well-formed CSV row.

    Malformed rows (missing fields, bad numbers, out-of-range coordinates,
    negative moisture) are collected with their row index and reason.
    A missing mapped column is a configuration error, not a data reject.
    """
    columns = dict(DEFAULT_COLUMN_MAP)
    if column_map:
        columns.update(column_map)
    for key in _REQUIRED_KEYS:
        if key not in columns:
            raise ConfigError(f"column map missing required key {key!r}")

    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return _parse_stream(fh, columns)
    return _parse_stream(source, columns)


def _parse_stream(stream, columns: Dict[str, str]) -> ParseResult:
    reader = csv.DictReader(stream)
    if reader.fieldnames is None:
        return ParseResult(samples=[], rejects=[])
    missing = [columns[key] for key in _REQUIRED_KEYS
               if columns[key] not in reader.fieldnames]
    if missing:
        raise ConfigError(f"label CSV is missing mapped columns: {missing}")
    species_col = columns.get("species")
    has_species = species_col in reader.fieldnames if species_col else False

    samples: List[LfmcSample] = []
    rejects: List[RejectedRow] = []
    for index, row in enumerate(reader, start=1):
        try:
            sample = LfmcSample(
                site_id=(row[columns["site"]] or "").strip(),
                latitude=float(row[columns["lat"]]),
                longitude=float(row[columns["lon"]]),
                date=_parse_date(row[columns["date"]]),
                lfmc_percent=float(row[columns["value"]]),
                species=(row[species_col] or "").strip() or None if has_species else None,
            )
            if not sample.site_id:
                raise ValueError("empty site id")
            sample.validate()
        except (ValueError, TypeError, DomainError) as exc:
            rejects.append(RejectedRow(row_index=index, reason=str(exc)))
            continue
        samples.append(sample)
    return ParseResult(samples=samples, rejects=rejects)


def filter_samples(samples: Sequence[LfmcSample],
                   bbox: BoundingBox = CONUS_BBOX,
                   date_range: Tuple[dt.date, dt.date] = DEFAULT_DATE_RANGE,
                   ) -> List[LfmcSample]:
    """Keep samples inside the box and within [start, end] inclusive."""
    start, end = date_range
    if start > end:
        raise ConfigError(f"inverted date range {start}..{end}")
    return [s for s in samples
            if start <= s.date <= end and bbox.contains(s.latitude, s.longitude)]


@dataclass
class SiteObservation:
    """A deduplicated (site, date) observation; same-day samples at one
    site are averaged into it, then capped."""

    site_id: str
    latitude: float
    longitude: float
    date: dt.date
    lfmc_percent: float
    n_merged: int
    species: Optional[str] = None
    land_cover: Optional[LandCoverClass] = None
    elevation_m: Optional[float] = None
    flags: Tuple[str, ...] = ()

    @property
    def key(self) -> Tuple[str, str]:
        return (self.site_id, self.date.isoformat())


def aggregate_same_day_site(samples: Sequence[LfmcSample],
                            cap: float = DEFAULT_CAP) -> List[SiteObservation]:
    """Group by (site_id, date), average the values, then apply the cap.

    Output is sorted by (site_id, date) so downstream steps are
    order-deterministic regardless of input order.
    """
    groups: Dict[Tuple[str, dt.date], List[LfmcSample]] = {}
    for sample in samples:
        groups.setdefault((sample.site_id, sample.date), []).append(sample)

    observations = []
    for (site_id, date), members in sorted(groups.items()):
        # normalize member order so coordinates and species of the merged
        # observation never depend on input row order
        members = sorted(members, key=lambda m: (m.latitude, m.longitude,
                                                 m.lfmc_percent, m.species or ""))
        mean_value = float(np.mean([m.lfmc_percent for m in members]))
        species = {m.species for m in members}
        observations.append(SiteObservation(
            site_id=site_id,
            latitude=members[0].latitude,
            longitude=members[0].longitude,
            date=date,
            lfmc_percent=cap_lfmc(mean_value, cap),
            n_merged=len(members),
            species=species.pop() if len(species) == 1 else None,
        ))
    return observations


def enrich_observations(observations: Sequence[SiteObservation],
                        land_cover: Optional[Tuple[np.ndarray, GridSpec]] = None,
                        elevation: Optional[Tuple[np.ndarray, GridSpec]] = None,
                        land_cover_nodata: Optional[float] = None,
                        elevation_nodata: Optional[float] = None,
                        ) -> List[SiteObservation]:
    """Attach land cover and elevation from static rasters (nearest pixel).

    Coordinates outside a raster (or over its nodata) leave the field
    unset and add a flag; such observations stay in overall metrics and
    drop only from the affected stratified table.
    """
    enriched = []
    for obs in observations:
        updates: Dict[str, object] = {}
        flags: List[str] = list(obs.flags)
        if land_cover is not None:
            value = _lookup(land_cover, obs.latitude, obs.longitude, land_cover_nodata)
            lc = None
            if value is not None:
                try:
                    lc = LandCoverClass.from_code(int(round(value)))
                except DomainError:
                    lc = None
            if lc is None:
                flags.append("land_cover_missing")
            updates["land_cover"] = lc
        if elevation is not None:
            value = _lookup(elevation, obs.latitude, obs.longitude, elevation_nodata)
            if value is None:
                flags.append("elevation_missing")
            updates["elevation_m"] = value
        enriched.append(replace(obs, flags=tuple(flags), **updates))
    return enriched


def _lookup(raster: Tuple[np.ndarray, GridSpec], lat: float, lon: float,
            nodata: Optional[float]) -> Optional[float]:
    array, grid = raster
    if array.ndim == 3:
        array = array[0]
    row, col = grid.lonlat_to_rowcol(lat, lon)
    row, col = int(row), int(col)
    if not grid.contains_rowcol(row, col):
        return None
    value = float(array[row, col])
    if nodata is not None and value == nodata:
        return None
    if np.isnan(value):
        return None
    return value
