"""Fixed-shape training instances and the on-disk dataset container.

An instance is a center crop of H x W pixels around a site with the T
months up to and including the observation month, one array per
modality, plus the normalized target. The container is a directory of
{manifest.json, tensors.bin}: flat little-endian float32 records in a
fixed modality order, with all metadata (including split tags) in the
manifest. Writing is deterministic, so identical inputs give
byte-identical containers.
"""
from __future__ import annotations

import datetime as dt
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .core import DEFAULT_CAP, LandCoverClass, normalize_target, season_of
from .errors import ConfigError, DataError
from .ingest.cube import MODALITY_ORDER, DEFAULT_MODALITIES, InputCube, Variability, add_months
from .ingest.labels import SiteObservation

Shape = Tuple[int, int, int]  # (H, W, T)

#: Nominal provenance footprint around each site; recorded in the manifest.
PROVENANCE_BOX_M = 1000.0

MANIFEST_VERSION = 1


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


# -- feature layout ----------------------------------------------------------

def feature_dims(shape: Shape) -> List[Tuple[str, Tuple[int, ...]]]:
    """Per-modality array dimensions for a given instance shape, in the
    canonical modality order."""
    h, w, t = shape
    dims = []
    for name in MODALITY_ORDER:
        spec = DEFAULT_MODALITIES[name]
        if spec.variability is Variability.SPACE_TIME:
            dims.append((name, (h, w, t, spec.n_bands)))
        elif spec.variability is Variability.TIME_ONLY:
            dims.append((name, (t, spec.n_bands)))
        elif name == "SRTM":
            dims.append((name, (h, w, spec.n_bands)))
        else:  # Location
            dims.append((name, (spec.n_bands,)))
    return dims


def record_length(shape: Shape) -> int:
    return sum(int(np.prod(d)) for _, d in feature_dims(shape))


@dataclass(frozen=True)
class InstanceMeta:
    site_id: str
    date: dt.date
    latitude: float
    longitude: float
    land_cover: Optional[LandCoverClass] = None
    elevation_m: Optional[float] = None

    @property
    def month(self) -> Tuple[int, int]:
        return (self.date.year, self.date.month)

    @property
    def season(self):
        return season_of(self.date)


@dataclass
class TileInstance:
    features: Dict[str, np.ndarray]
    shape: Shape
    meta: InstanceMeta
    target: Optional[float] = None
    has_nodata: bool = False


# -- cropping ----------------------------------------------------------------

def crop_features(cube: InputCube, row0: int, col0: int, shape: Shape,
                  t_end: int, required: Optional[frozenset] = None,
                  ) -> Tuple[Dict[str, np.ndarray], np.ndarray, bool]:
    """Crop every modality at window (row0, col0) ending at month index
    ``t_end`` inclusive.

    Returns (features, invalid_plane, any_invalid): invalid cells carry
    NaN in the features, and ``invalid_plane`` marks pixels with any
    invalid input across bands and months (time-only gaps invalidate the
    whole plane, since every pixel consumes those values). With
    ``required`` given, only those modalities contribute to the
    invalidity flags — a predictor that ignores a modality should not
    inherit its gaps.
    """
    h, w, t = shape
    t0 = t_end - t + 1
    if t0 < 0:
        first = add_months(cube.months[0], 0)
        raise DataError(f"window of {t} months ending at index {t_end} starts "
                        f"before the cube's first month {first[0]}-{first[1]:02d}")
    if t_end >= cube.n_months:
        raise DataError(f"month index {t_end} beyond cube ({cube.n_months} months)")
    if row0 < 0 or col0 < 0 or row0 + h > cube.grid.height or col0 + w > cube.grid.width:
        raise DataError(f"crop ({row0},{col0})+{h}x{w} exceeds cube grid "
                        f"{cube.grid.height}x{cube.grid.width}")

    def matters(name: str) -> bool:
        return required is None or name in required

    features: Dict[str, np.ndarray] = {}
    invalid_plane = np.zeros((h, w), dtype=bool)
    any_invalid = False
    for name, block in cube.space_time.items():
        crop = block[row0:row0 + h, col0:col0 + w, t0:t_end + 1, :].astype(np.float32)
        valid = cube.space_time_valid[name][row0:row0 + h, col0:col0 + w, t0:t_end + 1, :]
        crop = np.where(valid, crop, np.nan)
        features[name] = crop
        bad = ~valid
        if bad.any() and matters(name):
            any_invalid = True
            invalid_plane |= bad.any(axis=(2, 3))
    for name, block in cube.time_only.items():
        window = block[t0:t_end + 1, :].astype(np.float32)
        valid = cube.time_only_valid[name][t0:t_end + 1, :]
        window = np.where(valid, window, np.nan)
        features[name] = window
        if not valid.all() and matters(name):
            any_invalid = True
            invalid_plane[:] = True
    srtm = cube.static.get("SRTM")
    if srtm is not None:
        crop = srtm[row0:row0 + h, col0:col0 + w, :].astype(np.float32)
        features["SRTM"] = crop
        bad = np.isnan(crop)
        if bad.any() and matters("SRTM"):
            any_invalid = True
            invalid_plane |= bad.any(axis=2)
    features["Location"] = np.asarray(cube.static["Location"], dtype=np.float32).copy()
    return features, invalid_plane, any_invalid


def extract_instance(cube: InputCube, obs: SiteObservation, shape: Shape,
                     cap: float = DEFAULT_CAP) -> TileInstance:
    """Instance for one observation: spatial center crop around the site,
    temporal window ending at the observation month, normalized target.

    The crop center sits at (floor(H/2), floor(W/2)) inside the window;
    the Location features carry the site coordinates, not the grid
    center. Instances touching nodata are returned flagged.
    """
    h, w, t = shape
    row, col = cube.grid.lonlat_to_rowcol(obs.latitude, obs.longitude)
    row, col = int(row), int(col)
    if not cube.grid.contains_rowcol(row, col):
        raise DataError(f"site {obs.site_id} at ({obs.latitude}, {obs.longitude}) "
                        "is outside the cube grid")
    row0 = row - h // 2
    col0 = col - w // 2
    t_end = cube.month_index((obs.date.year, obs.date.month))
    features, _, any_invalid = crop_features(cube, row0, col0, shape, t_end)
    features["Location"] = np.array([obs.latitude / 90.0, obs.longitude / 180.0],
                                    dtype=np.float32)
    meta = InstanceMeta(site_id=obs.site_id, date=obs.date,
                        latitude=obs.latitude, longitude=obs.longitude,
                        land_cover=obs.land_cover, elevation_m=obs.elevation_m)
    return TileInstance(features=features, shape=shape, meta=meta,
                        target=normalize_target(obs.lfmc_percent, cap),
                        has_nodata=any_invalid)


def crop_instance(instance: TileInstance, shape: Shape) -> TileInstance:
    """Sub-crop an instance to a smaller shape: same center pixel, same
    ending month (spatial center crop, trailing temporal window)."""
    h, w, t = shape
    oh, ow, ot = instance.shape
    if h > oh or w > ow or t > ot:
        raise ConfigError(f"crop shape {shape} exceeds stored shape {instance.shape}")
    r0 = oh // 2 - h // 2
    c0 = ow // 2 - w // 2
    features: Dict[str, np.ndarray] = {}
    for name, arr in instance.features.items():
        variability = DEFAULT_MODALITIES[name].variability
        if variability is Variability.SPACE_TIME:
            features[name] = arr[r0:r0 + h, c0:c0 + w, ot - t:, :]
        elif variability is Variability.TIME_ONLY:
            features[name] = arr[ot - t:, :]
        elif name == "SRTM":
            features[name] = arr[r0:r0 + h, c0:c0 + w, :]
        else:
            features[name] = arr
    return TileInstance(features=features, shape=shape, meta=instance.meta,
                        target=instance.target, has_nodata=instance.has_nodata)


def coverage_filter(observations: Sequence[SiteObservation], cube: InputCube,
                    shape: Shape) -> Tuple[List[SiteObservation], List[SiteObservation]]:
    """Partition observations into (extractable, out_of_coverage) for a cube."""
    h, w, t = shape
    inside, outside = [], []
    for obs in observations:
        row, col = cube.grid.lonlat_to_rowcol(obs.latitude, obs.longitude)
        row, col = int(row), int(col)
        row0, col0 = row - h // 2, col - w // 2
        month = (obs.date.year, obs.date.month)
        ok = (0 <= row0 and row0 + h <= cube.grid.height
              and 0 <= col0 and col0 + w <= cube.grid.width
              and tuple(month) in cube.months
              and cube.month_index(month) - t + 1 >= 0)
        (inside if ok else outside).append(obs)
    return inside, outside


# -- splitting ---------------------------------------------------------------

@dataclass
class SplitAssignment:
    fractions: Tuple[float, float, float]
    seed: int
    assignment: Dict[Tuple[str, str], Split]
    group_by_site: bool = False

    def of(self, obs: SiteObservation) -> Split:
        return self.assignment[obs.key]

    @property
    def counts(self) -> Dict[Split, int]:
        out = {s: 0 for s in Split}
        for split in self.assignment.values():
            out[split] += 1
        return out


def split(observations: Sequence[SiteObservation],
          fractions: Tuple[float, float, float] = (0.70, 0.15, 0.15),
          seed: int = 0, group_by_site: bool = False) -> SplitAssignment:
    """Random train/val/test assignment.

    Sizes are floors of n * fraction with the remainder going to train;
    observations are order-normalized by (site_id, date) before shuffling
    so the same seed always produces the same assignment. The optional
    site-grouped mode assigns whole sites to one split, avoiding spatial
    leakage at the cost of approximate sizes.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    keys = sorted(obs.key for obs in observations)
    if len(set(keys)) != len(keys):
        raise DataError("duplicate (site_id, date) keys; aggregate before splitting")
    n = len(keys)
    rng = np.random.default_rng(seed)
    assignment: Dict[Tuple[str, str], Split] = {}

    if group_by_site:
        sites = sorted({site for site, _ in keys})
        order = rng.permutation(len(sites))
        per_site: Dict[str, List[Tuple[str, str]]] = {}
        for key in keys:
            per_site.setdefault(key[0], []).append(key)
        assigned = 0
        for site_index in order:
            site_keys = per_site[sites[site_index]]
            if assigned < fractions[0] * n:
                bucket = Split.TRAIN
            elif assigned < (fractions[0] + fractions[1]) * n:
                bucket = Split.VAL
            else:
                bucket = Split.TEST
            for key in site_keys:
                assignment[key] = bucket
            assigned += len(site_keys)
    else:
        order = rng.permutation(n)
        n_train = math.floor(n * fractions[0])
        n_val = math.floor(n * fractions[1])
        n_test = math.floor(n * fractions[2])
        n_train += n - (n_train + n_val + n_test)  # remainder to train
        for rank, key_index in enumerate(order):
            if rank < n_train:
                bucket = Split.TRAIN
            elif rank < n_train + n_val:
                bucket = Split.VAL
            else:
                bucket = Split.TEST
            assignment[keys[key_index]] = bucket
    return SplitAssignment(fractions=tuple(fractions), seed=seed,
                           assignment=assignment, group_by_site=group_by_site)


# -- container ---------------------------------------------------------------

@dataclass
class BuildResult:
    path: Path
    n_written: int
    n_excluded_nodata: int
    counts: Dict[str, int]


def build_dataset(observations: Sequence[SiteObservation],
                  cubes: Union[InputCube, Mapping[str, InputCube]],
                  shape: Shape, assignment: SplitAssignment,
                  out_dir: Union[str, Path], cap: float = DEFAULT_CAP) -> BuildResult:
    """Extract, tag, and serialize one record per observation.

    Instances that touch nodata are counted and excluded. Records are
    written in (site_id, date) order whatever the input order, keeping
    the container byte-stable.
    """
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    ordered = sorted(observations, key=lambda o: o.key)
    layout = feature_dims(shape)
    n_floats = record_length(shape)

    records: List[dict] = []
    n_excluded = 0
    counts = {s.value: 0 for s in Split}
    offset = 0
    with open(out_path / "tensors.bin", "wb") as fh:
        for obs in ordered:
            cube = _resolve_cube(cubes, obs)
            instance = extract_instance(cube, obs, shape, cap=cap)
            if instance.has_nodata:
                n_excluded += 1
                continue
            buf = _pack_record(instance, layout)
            assert buf.size == n_floats
            fh.write(buf.tobytes())
            bucket = assignment.of(obs)
            counts[bucket.value] += 1
            records.append({
                "site_id": obs.site_id,
                "date": obs.date.isoformat(),
                "lat": obs.latitude,
                "lon": obs.longitude,
                "land_cover": int(obs.land_cover) if obs.land_cover is not None else None,
                "elevation_m": obs.elevation_m,
                "n_merged": obs.n_merged,
                "target": instance.target,
                "split": bucket.value,
                "offset": offset,
            })
            offset += n_floats * 4

    manifest = {
        "format_version": MANIFEST_VERSION,
        "shape": list(shape),
        "cap": cap,
        "record_floats": n_floats,
        "byte_order": "little",
        "dtype": "float32",
        "modalities": [
            {"name": name, "dims": list(dims),
             "bands": list(DEFAULT_MODALITIES[name].bands),
             "variability": DEFAULT_MODALITIES[name].variability.value}
            for name, dims in layout
        ],
        "split": {"fractions": list(assignment.fractions), "seed": assignment.seed,
                  "group_by_site": assignment.group_by_site},
        "counts": {**counts, "excluded_nodata": n_excluded},
        "provenance_box_m": PROVENANCE_BOX_M,
        "instances": records,
    }
    _check_counts(manifest, out_path / "tensors.bin")
    (out_path / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return BuildResult(path=out_path, n_written=len(records),
                       n_excluded_nodata=n_excluded, counts=counts)


def _resolve_cube(cubes, obs: SiteObservation) -> InputCube:
    if isinstance(cubes, InputCube):
        return cubes
    try:
        return cubes[obs.site_id]
    except KeyError:
        raise DataError(f"no cube covers site {obs.site_id}") from None


def _pack_record(instance: TileInstance, layout) -> np.ndarray:
    parts = []
    for name, dims in layout:
        arr = np.asarray(instance.features[name], dtype="<f4")
        if arr.shape != dims:
            raise DataError(f"{name}: expected {dims}, got {arr.shape}")
        parts.append(arr.ravel(order="C"))
    buf = np.concatenate(parts)
    if np.isnan(buf).any():
        raise DataError("NaN in a record that passed the nodata check")
    return buf


def _check_counts(manifest: dict, tensors_path: Path) -> None:
    expected = len(manifest["instances"]) * manifest["record_floats"] * 4
    actual = tensors_path.stat().st_size
    if expected != actual:
        raise DataError(f"container inconsistent: manifest implies {expected} "
                        f"bytes, tensors.bin has {actual}")


class Dataset:
    """Reader over a serialized container; feature arrays are memmapped
    views, so iteration stays cheap."""

    def __init__(self, manifest: dict, tensors: np.ndarray, path: Optional[Path] = None):
        self.manifest = manifest
        self._tensors = tensors
        self.path = path
        self.shape: Shape = tuple(manifest["shape"])
        self.cap: float = manifest["cap"]
        self._layout = [(m["name"], tuple(m["dims"])) for m in manifest["modalities"]]
        self._n_floats = manifest["record_floats"]

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Dataset":
        path = Path(path)
        manifest_path = path / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no dataset manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("format_version") != MANIFEST_VERSION:
            raise DataError(f"dataset format {manifest.get('format_version')} "
                            f"!= supported {MANIFEST_VERSION}")
        tensors = np.memmap(path / "tensors.bin", dtype="<f4", mode="r")
        ds = cls(manifest, tensors, path)
        _check_counts(manifest, path / "tensors.bin")
        return ds

    def __len__(self) -> int:
        return len(self.manifest["instances"])

    def indices(self, split: Optional[Split] = None) -> List[int]:
        if split is None:
            return list(range(len(self)))
        return [i for i, rec in enumerate(self.manifest["instances"])
                if rec["split"] == split.value]

    def record(self, index: int) -> dict:
        return self.manifest["instances"][index]

    def instance(self, index: int) -> TileInstance:
        rec = self.record(index)
        start = rec["offset"] // 4
        flat = self._tensors[start:start + self._n_floats]
        features: Dict[str, np.ndarray] = {}
        cursor = 0
        for name, dims in self._layout:
            size = int(np.prod(dims))
            features[name] = flat[cursor:cursor + size].reshape(dims)
            cursor += size
        lc = rec.get("land_cover")
        meta = InstanceMeta(
            site_id=rec["site_id"],
            date=dt.date.fromisoformat(rec["date"]),
            latitude=rec["lat"], longitude=rec["lon"],
            land_cover=LandCoverClass(lc) if lc is not None else None,
            elevation_m=rec.get("elevation_m"),
        )
        return TileInstance(features=features, shape=self.shape, meta=meta,
                            target=rec["target"])

    def instances(self, split: Optional[Split] = None) -> List[TileInstance]:
        return [self.instance(i) for i in self.indices(split)]

    def targets(self, split: Optional[Split] = None) -> np.ndarray:
        return np.array([self.record(i)["target"] for i in self.indices(split)],
                        dtype=float)

    def observations(self, split: Optional[Split] = None) -> List[SiteObservation]:
        """Reconstruct observation-level rows (denormalized targets) for
        evaluation and stratified reporting."""
        out = []
        for i in self.indices(split):
            rec = self.record(i)
            lc = rec.get("land_cover")
            out.append(SiteObservation(
                site_id=rec["site_id"],
                latitude=rec["lat"], longitude=rec["lon"],
                date=dt.date.fromisoformat(rec["date"]),
                lfmc_percent=rec["target"] * self.cap,
                n_merged=rec.get("n_merged", 1),
                land_cover=LandCoverClass(lc) if lc is not None else None,
                elevation_m=rec.get("elevation_m"),
            ))
        return out
