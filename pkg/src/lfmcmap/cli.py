"""Command-line pipeline: prepare -> train -> evaluate -> map -> ablate.

One JSON config file drives everything; stages chain through
subdirectories of the configured output directory. Each stage writes its
resolved config snapshot and a provenance file (input digests, seeds,
package version) next to its outputs, refuses to clobber a non-empty
stage directory without --overwrite, and is byte-deterministic given
identical config and inputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 unexpected
runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import __version__
from .ablation import (DEFAULT_REMOVALS, DEFAULT_SHAPE_GRID,
                       run_modality_ablation, run_shape_ablation)
from .config import PipelineConfig, load_config
from .core import denormalize_target
from .dataset import Dataset, Split, build_dataset, coverage_filter, split
from .errors import ConfigError, DataError, LfmcError
from .geo import GridSpec, grid_from_bbox
from .geotiff import read_geotiff
from .ingest import (aggregate_same_day_site, enrich_observations, filter_samples,
                     load_cube, load_manifest, parse_labels)
from .mapper import map_series, regional_mean_series, save_map
from .metrics import percent_error, stratified_report
from .model import (ReferenceRegressor, fit_monthly_baseline, load_model,
                    predict_batch, save_model, train)
from .spatial import knn_weights, morans_i_pvalue
from . import reports

_STAGES = {"prepare": "prepare", "train": "train", "evaluate": "evaluate",
           "map": "map", "ablate": "ablate"}

#: Derived grids beyond this pixel count need an explicit grid section.
_MAX_DERIVED_PIXELS = 4 * 10 ** 8


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = load_config(args.config)
        apply_overrides(config, args)
        handler = {
            "prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate,
            "map": cmd_map, "ablate": cmd_ablate,
        }[args.command]
        handler(config, args)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, LfmcError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - defensive
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lfmcmap",
        description="Fuel-moisture mapping pipeline: labels + rasters in, "
                    "trained models and georeferenced LFMC maps out.")
    parser.add_argument("--config", required=True, help="pipeline config JSON")
    parser.add_argument("--threads", type=int, default=None,
                        help="override the configured worker count")
    parser.add_argument("--seed", type=int, default=None,
                        help="override every configured seed")
    parser.add_argument("--overwrite", action="store_true",
                        help="replace existing stage outputs")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", help="parse labels, build the cube, serialize the dataset")
    sub.add_parser("train", help="fit the baseline and/or regressor")
    sub.add_parser("evaluate", help="stratified metrics and spatial statistics on the test split")
    sub.add_parser("map", help="generate monthly LFMC maps and regional means")
    ablate = sub.add_parser("ablate", help="shape or modality ablation table")
    ablate.add_argument("--mode", choices=("shape", "modality"), required=True)
    return parser


def apply_overrides(config: PipelineConfig, args) -> None:
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        config.threads = args.threads
    if args.seed is not None:
        config.dataset.seed = args.seed
        config.training.seed = args.seed
        config.evaluation.seed = args.seed


# -- shared stage plumbing -----------------------------------------------------

def stage_dir(config: PipelineConfig, stage: str, overwrite: bool) -> Path:
    path = config.output_dir / _STAGES[stage]
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise ConfigError(f"output directory {path} already has results; "
                              "pass --overwrite to replace them")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_stage_metadata(path: Path, config: PipelineConfig,
                         inputs: Dict[str, Path]) -> None:
    reports.write_json(path / "resolved_config.json", config.resolved())
    provenance = {
        "package_version": __version__,
        "config_digest": config.digest(),
        "inputs": {name: _sha256(p) for name, p in sorted(inputs.items())
                   if p is not None and Path(p).exists()},
        "seeds": {"dataset": config.dataset.seed, "training": config.training.seed,
                  "evaluation": config.evaluation.seed},
    }
    reports.write_json(path / "provenance.json", provenance)


def resolve_grid(config: PipelineConfig) -> GridSpec:
    if config.grid is not None:
        g = config.grid
        return GridSpec(origin_x=g.origin_x, origin_y=g.origin_y,
                        pixel_size_x=g.pixel_size, pixel_size_y=g.pixel_size,
                        height=g.height, width=g.width, crs=g.crs)
    grid = grid_from_bbox(config.region, pixel_size_m=10.0)
    if grid.height * grid.width > _MAX_DERIVED_PIXELS:
        raise ConfigError(
            f"grid derived from the region is {grid.height}x{grid.width} pixels; "
            "configure an explicit 'grid' section for areas this large")
    return grid


def _build_cube(config: PipelineConfig):
    if not config.months:
        raise ConfigError("config 'months' is required to assemble the input cube")
    if not config.raster_manifest.exists():
        raise ConfigError(f"raster manifest not found: {config.raster_manifest}")
    entries = load_manifest(config.raster_manifest)
    grid = resolve_grid(config)
    return load_cube(entries, grid, config.months, threads=config.threads), entries


def _load_enrichment_raster(path: Optional[Path]):
    if path is None:
        return None, None
    if not path.exists():
        raise ConfigError(f"enrichment raster not found: {path}")
    array, grid, nodata = read_geotiff(path)
    return (array[0], grid), nodata


def dataset_path(config: PipelineConfig) -> Path:
    return config.output_dir / _STAGES["prepare"] / "dataset"


def model_path(config: PipelineConfig, which: str) -> Path:
    return config.output_dir / _STAGES["train"] / which


# -- commands ------------------------------------------------------------------

def cmd_prepare(config: PipelineConfig, args) -> None:
    if not config.labels_csv.exists():
        raise ConfigError(f"labels CSV not found: {config.labels_csv}")
    out = stage_dir(config, "prepare", args.overwrite)

    parsed = parse_labels(config.labels_csv, config.column_map)
    kept = filter_samples(parsed.samples, bbox=config.region,
                          date_range=config.date_range)
    observations = aggregate_same_day_site(kept, cap=config.dataset.cap)

    land_cover, lc_nodata = _load_enrichment_raster(config.land_cover_raster)
    elevation, el_nodata = _load_enrichment_raster(config.elevation_raster)
    cube, _ = _build_cube(config)
    if elevation is None and "SRTM" in cube.static:
        elevation = (cube.static["SRTM"][:, :, 0], cube.grid)
    observations = enrich_observations(observations, land_cover, elevation,
                                       land_cover_nodata=lc_nodata,
                                       elevation_nodata=el_nodata)

    covered, out_of_coverage = coverage_filter(observations, cube,
                                               config.dataset.shape)
    assignment = split(covered, config.dataset.fractions, config.dataset.seed,
                       config.dataset.group_by_site)
    build = build_dataset(covered, cube, config.dataset.shape, assignment,
                          out / "dataset", cap=config.dataset.cap)

    reports.write_census(observations, out)
    reports.write_csv(out / "rejects.csv", ("row_index", "reason"),
                      [(r.row_index, r.reason) for r in parsed.rejects])
    reports.write_json(out / "rejects.json",
                       [{"row_index": r.row_index, "reason": r.reason}
                        for r in parsed.rejects])
    report = {
        "rows": len(parsed.samples) + parsed.n_rejected,
        "parsed": len(parsed.samples),
        "rejected": parsed.n_rejected,
        "after_filter": len(kept),
        "filtered_out": len(parsed.samples) - len(kept),
        "observations": len(observations),
        "merged_away": len(kept) - len(observations),
        "out_of_coverage": len(out_of_coverage),
        "excluded_nodata": build.n_excluded_nodata,
        "written": build.n_written,
        "splits": build.counts,
    }
    reports.write_json(out / "prepare_report.json", report)
    write_stage_metadata(out, config, {
        "labels_csv": config.labels_csv,
        "raster_manifest": config.raster_manifest,
        "land_cover_raster": config.land_cover_raster,
        "elevation_raster": config.elevation_raster,
    })
    print(f"prepare: {report['rows']} rows -> {report['parsed']} samples "
          f"({report['rejected']} rejected) -> {report['observations']} observations "
          f"-> {report['written']} instances written")


def _train_inputs(config: PipelineConfig) -> Dataset:
    path = dataset_path(config)
    if not (path / "manifest.json").exists():
        raise ConfigError(f"no dataset at {path}; run 'prepare' first")
    return Dataset.load(path)


def cmd_train(config: PipelineConfig, args) -> None:
    dataset = _train_inputs(config)
    out = stage_dir(config, "train", args.overwrite)

    if config.train_model in ("baseline", "both"):
        baseline = fit_monthly_baseline(dataset.instances(Split.TRAIN),
                                        cap=dataset.cap)
        save_model(baseline, out / "baseline")
        print(f"train: monthly baseline fitted on "
              f"{len(dataset.indices(Split.TRAIN))} instances")
    if config.train_model in ("regressor", "both"):
        model = ReferenceRegressor(dataset.shape, hidden=config.hidden,
                                   seed=config.training.seed, cap=dataset.cap)
        model, history = train(model, dataset, config.training)
        save_model(model, out / "regressor")
        figures = out / "figures"
        figures.mkdir(exist_ok=True)
        reports.write_history(history, out / "history.csv", out / "history.json")
        reports.plot_history(history, figures / "history.png")
        print(f"train: regressor stopped at epoch {history.stopped_epoch} "
              f"(best {history.best_epoch}, val MSE "
              f"{history.val_loss[history.best_epoch - 1]:.6f})")

    write_stage_metadata(out, config, {"dataset_manifest": dataset_path(config) / "manifest.json"})


def cmd_evaluate(config: PipelineConfig, args) -> None:
    dataset = _train_inputs(config)
    which = config.evaluation.model
    container = model_path(config, which)
    if not container.exists():
        raise ConfigError(f"no model container at {container}; run 'train' first")
    predictor = load_model(container)

    test_instances = dataset.instances(Split.TEST)
    observations = dataset.observations(Split.TEST)
    if not test_instances:
        raise DataError("test split is empty")
    out = stage_dir(config, "evaluate", args.overwrite)
    figures = out / "figures"
    figures.mkdir(exist_ok=True)

    preds = np.array([denormalize_target(p, predictor.cap)
                      for p in predict_batch(predictor, test_instances)])
    targets = np.array([o.lfmc_percent for o in observations])

    for stratifier, filename in (("season", "report_season"),
                                 ("land_cover", "report_land_cover"),
                                 ("elevation_band", "report_elevation")):
        rows = stratified_report(preds, observations, stratifier)
        reports.write_metric_table(rows, out / f"{filename}.csv",
                                   out / f"{filename}.json")
    overall = stratified_report(preds, observations, "season")[:1]
    reports.write_metric_table(overall, out / "report_overall.csv",
                               out / "report_overall.json")

    errors = percent_error(preds, targets)
    reports.write_percent_error(observations, errors, out / "percent_error.csv",
                                out / "percent_error.json")
    reports.plot_percent_error_map(observations, errors,
                                   figures / "percent_error_map.png")

    residuals = preds - targets
    weights = knn_weights([o.latitude for o in observations],
                          [o.longitude for o in observations],
                          k=config.evaluation.knn_k)
    moran = morans_i_pvalue(residuals, weights,
                            n_permutations=config.evaluation.permutations,
                            seed=config.evaluation.seed,
                            alternative=config.evaluation.alternative,
                            threads=config.threads)
    reports.write_moran_report(moran, out / "moran.json")

    write_stage_metadata(out, config, {
        "dataset_manifest": dataset_path(config) / "manifest.json",
        "model": container / "model.json",
        "weights": container / "weights.bin",
    })
    print(f"evaluate[{which}]: n={len(observations)} rmse={overall[0].rmse:.3f} "
          f"mae={overall[0].mae:.3f} r2={overall[0].r2 if overall[0].r2 is not None else 'n/a'} "
          f"moran_i={moran.i_value:.4f} p={moran.p_value:.4f}")


def cmd_map(config: PipelineConfig, args) -> None:
    if not config.map.months:
        raise ConfigError("map.months is empty; nothing to generate")
    container = model_path(config, config.map.model)
    if not container.exists():
        raise ConfigError(f"no model container at {container}; run 'train' first")
    predictor = load_model(container)
    cube, _ = _build_cube(config)

    out = stage_dir(config, "map", args.overwrite)
    maps_dir = out / "maps"
    previews_dir = out / "previews"
    figures = out / "figures"
    for directory in (maps_dir, previews_dir, figures):
        directory.mkdir(exist_ok=True)

    maps = map_series(cube, predictor, config.map.months,
                      stride=config.map.stride, threads=config.threads)
    for lfmc_map in maps:
        stem = f"lfmc_{lfmc_map.month[0]}_{lfmc_map.month[1]:02d}"
        save_map(lfmc_map, maps_dir / f"{stem}.tif")
        reports.map_preview(lfmc_map, previews_dir / f"{stem}.png")

    try:
        series = regional_mean_series(maps, config.map.region)
    except DataError as exc:
        region = config.map.region
        raise DataError(f"map region {region} unusable: {exc}") from None
    reports.write_regional_means(series, out / "regional_means.csv",
                                 out / "regional_means.json")
    reports.plot_regional_series(series, figures / "regional_means.png")

    write_stage_metadata(out, config, {
        "raster_manifest": config.raster_manifest,
        "model": container / "model.json",
        "weights": container / "weights.bin",
    })
    print(f"map[{config.map.model}]: {len(maps)} monthly map(s) written to {maps_dir}")


def cmd_ablate(config: PipelineConfig, args) -> None:
    dataset = _train_inputs(config)
    out = stage_dir(config, "ablate", args.overwrite)
    figures = out / "figures"
    figures.mkdir(exist_ok=True)

    if args.mode == "shape":
        shapes = config.ablation.shapes or list(DEFAULT_SHAPE_GRID)
        rows = run_shape_ablation(dataset, shapes, config.training,
                                  hidden=config.ablation.hidden)
        reports.write_ablation_table(rows, out / "ablation_shape.csv",
                                     out / "ablation_shape.json")
        reports.plot_ablation(rows, figures / "ablation_shape.png",
                              "RMSE by input shape")
    else:
        removals = config.ablation.removals or list(DEFAULT_REMOVALS)
        rows = run_modality_ablation(dataset, removals, config.training,
                                     hidden=config.ablation.hidden)
        reports.write_ablation_table(rows, out / "ablation_modality.csv",
                                     out / "ablation_modality.json")
        reports.plot_ablation(rows, figures / "ablation_modality.png",
                              "RMSE by removed input")
    write_stage_metadata(out, config, {
        "dataset_manifest": dataset_path(config) / "manifest.json"})
    print(f"ablate[{args.mode}]: {len(rows)} rows written")


if __name__ == "__main__":
    sys.exit(main())
