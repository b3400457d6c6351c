"""Shape and modality ablation harnesses.

Each row retrains the reference regressor from the same seed so row
differences reflect the ablation rather than initialization noise.
Shape rows crop stored instances down (same center, trailing months);
modality rows zero-fill one modality's feature slots at featurization
time, keeping the feature layout shape-stable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import denormalize_target
from .dataset import Dataset, Shape, Split, TileInstance, crop_instance
from .errors import ConfigError
from .metrics import mae, r2, rmse
from .model import ReferenceRegressor, TrainingConfig, predict_batch, train

#: The shape grid evaluated by default: square crops at shrinking extents
#: and shrinking temporal windows.
DEFAULT_SHAPE_GRID: Tuple[Shape, ...] = (
    (32, 32, 12), (32, 32, 6), (32, 32, 3), (16, 16, 12), (8, 8, 12), (1, 1, 12),
)

#: Modalities removed one at a time by default (night lights stay in).
DEFAULT_REMOVALS: Tuple[str, ...] = ("S2", "S1", "ERA5", "TerraClimate", "SRTM", "Location")

#: Display labels for removal rows.
REMOVAL_LABELS = {"S2": "S2", "S1": "S1", "ERA5": "ERA5",
                  "TerraClimate": "TC", "SRTM": "SRTM", "Location": "loc."}


@dataclass(frozen=True)
class AblationRow:
    label: str
    n: int
    rmse: float
    mae: float
    r2: Optional[float]


InstanceSplits = Tuple[Sequence[TileInstance], Sequence[TileInstance], Sequence[TileInstance]]


def _splits(dataset: Union[Dataset, InstanceSplits]) -> InstanceSplits:
    if isinstance(dataset, Dataset):
        return (dataset.instances(Split.TRAIN), dataset.instances(Split.VAL),
                dataset.instances(Split.TEST))
    train_set, val_set, test_set = dataset
    return train_set, val_set, test_set


def _evaluate_row(label: str, train_set, val_set, test_set, shape: Shape,
                  removed: Sequence[str], config: TrainingConfig,
                  hidden: Tuple[int, int], cap: float) -> AblationRow:
    model = ReferenceRegressor(shape, hidden=hidden, seed=config.seed,
                               removed=removed, cap=cap)
    model, _ = train(model, (train_set, val_set), config)
    preds = np.array([denormalize_target(p, cap)
                      for p in predict_batch(model, test_set)])
    targets = np.array([denormalize_target(inst.target, cap) for inst in test_set])
    try:
        r2_val: Optional[float] = r2(preds, targets)
    except Exception:
        r2_val = None
    return AblationRow(label=label, n=len(test_set), rmse=rmse(preds, targets),
                       mae=mae(preds, targets), r2=r2_val)


def run_shape_ablation(dataset: Union[Dataset, InstanceSplits],
                       shapes: Sequence[Shape] = DEFAULT_SHAPE_GRID,
                       config: TrainingConfig = TrainingConfig(),
                       hidden: Tuple[int, int] = (128, 64),
                       cap: float = 302.0) -> List[AblationRow]:
    """Retrain and evaluate at every requested input shape."""
    train_set, val_set, test_set = _splits(dataset)
    if isinstance(dataset, Dataset):
        cap = dataset.cap
    stored = tuple(train_set[0].shape) if train_set else None
    rows = []
    for shape in shapes:
        shape = tuple(shape)
        if stored and any(s > o for s, o in zip(shape, stored)):
            raise ConfigError(f"ablation shape {shape} exceeds stored shape {stored}")
        rows.append(_evaluate_row(
            label=f"{shape[0]}x{shape[1]}x{shape[2]}",
            train_set=[crop_instance(i, shape) for i in train_set],
            val_set=[crop_instance(i, shape) for i in val_set],
            test_set=[crop_instance(i, shape) for i in test_set],
            shape=shape, removed=(), config=config, hidden=hidden, cap=cap))
    return rows


def run_modality_ablation(dataset: Union[Dataset, InstanceSplits],
                          removals: Sequence[str] = DEFAULT_REMOVALS,
                          config: TrainingConfig = TrainingConfig(),
                          hidden: Tuple[int, int] = (128, 64),
                          cap: float = 302.0) -> List[AblationRow]:
    """A no-removal row followed by one row per removed modality."""
    train_set, val_set, test_set = _splits(dataset)
    if isinstance(dataset, Dataset):
        cap = dataset.cap
    unknown = [name for name in removals if name not in REMOVAL_LABELS]
    if unknown:
        raise ConfigError(f"unknown modalities for removal: {unknown} "
                          f"(expected a subset of {sorted(REMOVAL_LABELS)})")
    shape = tuple(train_set[0].shape)
    rows = [_evaluate_row("None", train_set, val_set, test_set, shape,
                          removed=(), config=config, hidden=hidden, cap=cap)]
    for name in removals:
        rows.append(_evaluate_row(REMOVAL_LABELS[name], train_set, val_set, test_set,
                                  shape, removed=(name,), config=config,
                                  hidden=hidden, cap=cap))
    return rows
