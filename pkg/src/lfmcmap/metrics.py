"""Regression metrics and stratified reporting.

Predictions and targets arrive in percent (already denormalized). The
stratified report mirrors the evaluation tables: an Overall row followed
by one row per non-empty stratum, with empty strata omitted rather than
emitted as NaN.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import LandCoverClass, Season, elevation_band, season_of
from .errors import DomainError


def _paired(preds, targets):
    p = np.asarray(preds, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise DomainError(f"length mismatch: {p.shape} predictions vs {t.shape} targets")
    if p.size == 0:
        raise DomainError("metrics need at least one prediction")
    return p, t


def rmse(preds, targets) -> float:
    p, t = _paired(preds, targets)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(preds, targets) -> float:
    p, t = _paired(preds, targets)
    return float(np.mean(np.abs(p - t)))


def r2(preds, targets) -> float:
    p, t = _paired(preds, targets)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise DomainError("r2 undefined for zero-variance targets")
    return 1.0 - float(np.sum((p - t) ** 2)) / ss_tot


def percent_error(preds, targets) -> np.ndarray:
    """Signed per-observation error as a percentage of the target.

    Zero targets cannot be expressed as a relative error; those entries
    come back as NaN so callers can flag them.
    """
    p, t = _paired(preds, targets)
    out = np.full(p.shape, np.nan)
    nonzero = t != 0
    out[nonzero] = 100.0 * (p[nonzero] - t[nonzero]) / t[nonzero]
    return out


@dataclass(frozen=True)
class MetricRow:
    stratum: str
    n: int
    rmse: float
    mae: float
    r2: Optional[float]  # None when undefined (zero variance within stratum)


#: Stable display order for strata.
_SEASON_ORDER = [s.value for s in Season]
_LAND_COVER_ORDER = [c.label for c in LandCoverClass]


def _season_key(obs) -> Optional[str]:
    return season_of(obs.date).value


def _land_cover_key(obs) -> Optional[str]:
    return obs.land_cover.label if obs.land_cover is not None else None


def _elevation_key(obs) -> Optional[str]:
    if obs.elevation_m is None:
        return None
    return elevation_band(obs.elevation_m).label


_STRATIFIERS: dict[str, Callable] = {
    "season": _season_key,
    "land_cover": _land_cover_key,
    "elevation_band": _elevation_key,
}


def _band_sort_key(label: str) -> int:
    # "-500-0m" -> -500, "1000-1500m" -> 1000
    lower = label[:-1].rsplit("-", 1)[0]
    return int(lower)


def _stratum_sort_key(stratifier: str, label: str):
    if stratifier == "season":
        return _SEASON_ORDER.index(label)
    if stratifier == "land_cover":
        return _LAND_COVER_ORDER.index(label)
    return _band_sort_key(label)


def _row(label: str, p: np.ndarray, t: np.ndarray) -> MetricRow:
    try:
        r2_val: Optional[float] = r2(p, t)
    except DomainError:
        r2_val = None
    return MetricRow(stratum=label, n=int(p.size), rmse=rmse(p, t), mae=mae(p, t), r2=r2_val)


def stratified_report(preds: Sequence[float], observations: Sequence,
                      stratifier: str) -> List[MetricRow]:
    """Overall metrics plus per-stratum rows for one stratifier.

    Observations that cannot be assigned to a stratum (missing enrichment)
    stay in the Overall row but drop out of the per-stratum rows. Strata
    with no members are omitted.
    """
    if stratifier not in _STRATIFIERS:
        raise DomainError(f"unknown stratifier {stratifier!r}; "
                          f"expected one of {sorted(_STRATIFIERS)}")
    p = np.asarray(preds, dtype=float)
    if len(observations) != p.size:
        raise DomainError("one prediction per observation required")
    key_fn = _STRATIFIERS[stratifier]

    rows = [_row("Overall", p, np.array([o.lfmc_percent for o in observations]))]
    groups: dict[str, list[int]] = {}
    for idx, obs in enumerate(observations):
        label = key_fn(obs)
        if label is not None:
            groups.setdefault(label, []).append(idx)
    for label in sorted(groups, key=lambda s: _stratum_sort_key(stratifier, s)):
        idx = np.array(groups[label])
        targets = np.array([observations[i].lfmc_percent for i in idx])
        rows.append(_row(label, p[idx], targets))
    return rows
