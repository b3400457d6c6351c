"""Report writers: delimited tables, JSON mirrors, and figures.

Everything here is deterministic — fixed header orders, sorted JSON
keys, and Agg-rendered PNGs — so repeated runs produce byte-identical
report directories.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .ablation import AblationRow  # noqa: E402
from .core import elevation_band, season_of  # noqa: E402
from .mapper import LfmcMap, RegionalMean  # noqa: E402
from .metrics import MetricRow  # noqa: E402
from .model import TrainingHistory  # noqa: E402
from .spatial import MoranResult  # noqa: E402

_FIG_DPI = 110


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n",
                          encoding="utf-8")


# -- tabular reports ----------------------------------------------------------

_METRIC_HEADER = ("stratum", "n", "rmse", "mae", "r2")


def write_metric_table(rows: Sequence[MetricRow], csv_path, json_path=None) -> None:
    write_csv(csv_path, _METRIC_HEADER,
              [(r.stratum, r.n, r.rmse, r.mae, r.r2) for r in rows])
    if json_path is not None:
        write_json(json_path, [
            {"stratum": r.stratum, "n": r.n, "rmse": r.rmse, "mae": r.mae, "r2": r.r2}
            for r in rows])


def write_ablation_table(rows: Sequence[AblationRow], csv_path, json_path=None) -> None:
    write_csv(csv_path, ("row", "n", "rmse", "mae", "r2"),
              [(r.label, r.n, r.rmse, r.mae, r.r2) for r in rows])
    if json_path is not None:
        write_json(json_path, [
            {"row": r.label, "n": r.n, "rmse": r.rmse, "mae": r.mae, "r2": r.r2}
            for r in rows])


def write_moran_report(result: MoranResult, json_path) -> None:
    write_json(json_path, {
        "morans_i": result.i_value,
        "p_value": result.p_value,
        "n_permutations": result.n_permutations,
        "seed": result.seed,
        "alternative": result.alternative,
        "knn_k": result.k,
    })


def write_percent_error(observations, errors: np.ndarray, csv_path,
                        json_path=None) -> None:
    rows = []
    for obs, err in zip(observations, errors):
        rows.append((obs.site_id, obs.date.isoformat(), obs.latitude, obs.longitude,
                     None if np.isnan(err) else float(err)))
    header = ("site_id", "date", "latitude", "longitude", "percent_error")
    write_csv(csv_path, header, rows)
    if json_path is not None:
        write_json(json_path, [dict(zip(header, row)) for row in rows])


def write_regional_means(entries: Sequence[RegionalMean], csv_path, json_path=None) -> None:
    rows = [(f"{m.month[0]}-{m.month[1]:02d}", m.mean_percent, m.n_valid)
            for m in entries]
    write_csv(csv_path, ("month", "mean_lfmc_percent", "n_valid"), rows)
    if json_path is not None:
        write_json(json_path, [
            {"month": f"{m.month[0]}-{m.month[1]:02d}",
             "mean_lfmc_percent": m.mean_percent, "n_valid": m.n_valid}
            for m in entries])


def write_history(history: TrainingHistory, csv_path, json_path=None) -> None:
    rows = [(epoch + 1, tl, vl) for epoch, (tl, vl)
            in enumerate(zip(history.train_loss, history.val_loss))]
    write_csv(csv_path, ("epoch", "train_loss", "val_loss"), rows)
    if json_path is not None:
        write_json(json_path, {
            "train_loss": history.train_loss, "val_loss": history.val_loss,
            "best_epoch": history.best_epoch, "stopped_epoch": history.stopped_epoch,
        })


# -- census tables (the tabular stand-in for dataset breakdown plots) --------

def census_tables(observations) -> Dict[str, List[tuple]]:
    """Counts and mean LFMC per season, land cover class, and elevation
    band; unenriched observations land in an 'unknown' bucket."""
    def tally(key_fn):
        groups: Dict[str, list] = {}
        for obs in observations:
            groups.setdefault(key_fn(obs), []).append(obs.lfmc_percent)
        return groups

    season = tally(lambda o: season_of(o.date).value)
    land = tally(lambda o: o.land_cover.label if o.land_cover is not None else "unknown")
    elev = tally(lambda o: elevation_band(o.elevation_m).label
                 if o.elevation_m is not None else "unknown")

    def rows(groups):
        out = []
        for label in sorted(groups):
            values = groups[label]
            out.append((label, len(values), float(np.mean(values))))
        return out

    return {"season": rows(season), "land_cover": rows(land),
            "elevation_band": rows(elev)}


def write_census(observations, out_dir: Path) -> None:
    tables = census_tables(observations)
    stems = {"season": "census_season", "land_cover": "census_land_cover",
             "elevation_band": "census_elevation"}
    for name, rows in tables.items():
        write_csv(out_dir / f"{stems[name]}.csv", (name, "n", "mean_lfmc_percent"), rows)
        write_json(out_dir / f"{stems[name]}.json",
                   [{name: label, "n": n, "mean_lfmc_percent": mean}
                    for label, n, mean in rows])


# -- figures ------------------------------------------------------------------

def plot_history(history: TrainingHistory, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = np.arange(1, history.n_epochs + 1)
    ax.plot(epochs, history.train_loss, label="train", color="tab:blue")
    ax.plot(epochs, history.val_loss, label="validation", color="tab:orange")
    if history.best_epoch:
        ax.axvline(history.best_epoch, color="grey", linestyle="--", linewidth=1,
                   label=f"best epoch ({history.best_epoch})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (normalized)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)


def plot_percent_error_map(observations, errors: np.ndarray, path) -> None:
    lons = np.array([o.longitude for o in observations])
    lats = np.array([o.latitude for o in observations])
    finite = ~np.isnan(errors)
    fig, ax = plt.subplots(figsize=(7, 5))
    limit = float(np.percentile(np.abs(errors[finite]), 95)) if finite.any() else 1.0
    scatter = ax.scatter(lons[finite], lats[finite], c=errors[finite],
                         cmap="RdYlGn_r", vmin=-limit, vmax=limit, s=18,
                         edgecolors="none")
    fig.colorbar(scatter, ax=ax, label="percent error")
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    fig.tight_layout()
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)


def plot_regional_series(entries: Sequence[RegionalMean], path) -> None:
    labels = [f"{m.month[0]}-{m.month[1]:02d}" for m in entries]
    values = [m.mean_percent if m.mean_percent is not None else np.nan
              for m in entries]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(np.arange(len(labels)), values, marker="o", color="tab:green")
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel("mean LFMC (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)


def plot_ablation(rows: Sequence[AblationRow], path, title: str) -> None:
    labels = [r.label for r in rows]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.bar(np.arange(len(rows)), [r.rmse for r in rows], color="tab:purple")
    ax.set_xticks(np.arange(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("RMSE (%)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)


def map_preview(lfmc_map: LfmcMap, path, vmax: Optional[float] = None) -> None:
    """8-bit PNG preview of a map; display helper, not a product."""
    values = np.ma.masked_where(~lfmc_map.valid_mask, lfmc_map.values)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    image = ax.imshow(values, cmap="RdYlGn", vmin=0.0,
                      vmax=vmax if vmax is not None else 180.0)
    fig.colorbar(image, ax=ax, label="LFMC (%)")
    ax.set_title(f"{lfmc_map.month[0]}-{lfmc_map.month[1]:02d}")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)
