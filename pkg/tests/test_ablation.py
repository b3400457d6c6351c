import numpy as np
import pytest

from lfmcmap.ablation import (
    DEFAULT_REMOVALS,
    DEFAULT_SHAPE_GRID,
    run_modality_ablation,
    run_shape_ablation,
)
from lfmcmap.core import denormalize_target
from lfmcmap.errors import ConfigError
from lfmcmap.metrics import mae, r2, rmse
from lfmcmap.model import ReferenceRegressor, TrainingConfig, predict_batch, train

from conftest import synthetic_instances


def three_way(n=90, shape=(4, 4, 4), seed=0):
    instances = synthetic_instances(n, shape=shape, seed=seed, target="ndvi")
    a, b = int(n * 0.6), int(n * 0.8)
    return instances[:a], instances[a:b], instances[b:]


def fast_config(**overrides):
    defaults = dict(max_epochs=3, patience=5, learning_rate=0.05,
                    momentum=0.9, batch_size=32, seed=0)
    defaults.update(overrides)
    return TrainingConfig(**defaults)


class TestShapeAblation:
    def test_row_per_shape(self):
        splits = three_way()
        shapes = [(4, 4, 4), (4, 4, 2), (2, 2, 4), (1, 1, 4)]
        rows = run_shape_ablation(splits, shapes, fast_config(), hidden=(8, 4))
        assert [r.label for r in rows] == ["4x4x4", "4x4x2", "2x2x4", "1x1x4"]
        assert all(r.n == len(splits[2]) for r in rows)
        assert all(np.isfinite(r.rmse) for r in rows)

    def test_full_shape_row_equals_plain_run(self):
        train_set, val_set, test_set = three_way()
        config = fast_config()
        (row,) = run_shape_ablation((train_set, val_set, test_set),
                                    [(4, 4, 4)], config, hidden=(8, 4))
        model = ReferenceRegressor((4, 4, 4), hidden=(8, 4), seed=config.seed,
                                   cap=302.0)
        model, _ = train(model, (train_set, val_set), config)
        preds = np.array([denormalize_target(p, 302.0)
                          for p in predict_batch(model, test_set)])
        targets = np.array([denormalize_target(i.target, 302.0) for i in test_set])
        assert row.rmse == rmse(preds, targets)
        assert row.mae == mae(preds, targets)
        assert row.r2 == r2(preds, targets)

    def test_default_grid_has_six_shapes(self):
        assert len(DEFAULT_SHAPE_GRID) == 6
        assert DEFAULT_SHAPE_GRID[0] == (32, 32, 12)
        assert DEFAULT_SHAPE_GRID[-1] == (1, 1, 12)

    def test_single_pixel_shape_runs(self):
        splits = three_way(n=50)
        (row,) = run_shape_ablation(splits, [(1, 1, 4)], fast_config(), hidden=(8, 4))
        assert np.isfinite(row.rmse)

    def test_oversized_shape_rejected(self):
        splits = three_way()
        with pytest.raises(ConfigError):
            run_shape_ablation(splits, [(8, 8, 4)], fast_config(), hidden=(8, 4))


class TestModalityAblation:
    def test_default_layout_matches_expected_rows(self):
        splits = three_way(n=60)
        rows = run_modality_ablation(splits, DEFAULT_REMOVALS, fast_config(),
                                     hidden=(8, 4))
        assert [r.label for r in rows] == ["None", "S2", "S1", "ERA5", "TC",
                                           "SRTM", "loc."]

    def test_none_row_equals_plain_run(self):
        train_set, val_set, test_set = three_way(n=60)
        config = fast_config(seed=3)
        rows = run_modality_ablation((train_set, val_set, test_set), ["S1"],
                                     config, hidden=(8, 4))
        model = ReferenceRegressor((4, 4, 4), hidden=(8, 4), seed=3, cap=302.0)
        model, _ = train(model, (train_set, val_set), config)
        preds = np.array([denormalize_target(p, 302.0)
                          for p in predict_batch(model, test_set)])
        targets = np.array([denormalize_target(i.target, 302.0) for i in test_set])
        assert rows[0].rmse == rmse(preds, targets)

    def test_unknown_modality_rejected(self):
        splits = three_way(n=40)
        with pytest.raises(ConfigError, match="MODIS"):
            run_modality_ablation(splits, ["MODIS"], fast_config(), hidden=(8, 4))

    def test_removing_signal_modality_hurts(self):
        # target is a function of NDVI (an S2 band): removing S2 must cost accuracy
        splits = three_way(n=140, seed=5)
        config = fast_config(max_epochs=25, learning_rate=0.08)
        rows = run_modality_ablation(splits, ["S2"], config, hidden=(16, 8))
        by_label = {r.label: r for r in rows}
        assert by_label["S2"].rmse > by_label["None"].rmse
