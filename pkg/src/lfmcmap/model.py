"""Predictors and the fine-tuning loop.

Two predictor implementations share one contract (normalized prediction
in [0, 1] from a TileInstance):

* MonthlyAverageModel: per-calendar-month mean of the training targets,
  global mean as the fallback. The reference baseline.
* ReferenceRegressor: pooled per-band/per-timestep features feeding a
  two-hidden-layer fully connected network with a sigmoid output. Plain
  SGD with momentum under MSE loss, early stopping on the validation
  split with best-weights restoration.

Parameters live as float32 (what gets serialized); all arithmetic runs
in float64 on upcast copies so save/load roundtrips reproduce
predictions bit for bit.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Sequence, Tuple, Union

import numpy as np

from .core import DEFAULT_CAP
from .dataset import Dataset, Shape, Split, TileInstance
from .errors import ConfigError, DataError, DomainError, LfmcError
from .ingest.cube import DEFAULT_MODALITIES, MODALITY_ORDER, Variability

MODEL_FORMAT_VERSION = 1


class TrainingError(LfmcError, RuntimeError):
    """Training diverged or its inputs were unusable."""


# -- featurization -----------------------------------------------------------

def feature_layout(shape: Shape) -> List[Tuple[str, int, int]]:
    """(modality, start, stop) slots in the pooled feature vector."""
    _, _, t = shape
    layout = []
    cursor = 0
    for name in MODALITY_ORDER:
        spec = DEFAULT_MODALITIES[name]
        if spec.variability in (Variability.SPACE_TIME, Variability.TIME_ONLY):
            size = t * spec.n_bands
        else:
            size = spec.n_bands
        layout.append((name, cursor, cursor + size))
        cursor += size
    return layout


def feature_dim(shape: Shape) -> int:
    return feature_layout(shape)[-1][2]


def featurize(instance: TileInstance,
              removed: FrozenSet[str] = frozenset()) -> np.ndarray:
    """Pool an instance to a flat float64 vector.

    Space-time blocks are spatially averaged per (timestep, band) —
    nodata cells excluded — then concatenated with the time-only and
    static features. Removed modalities keep their slots, zero-filled,
    so the layout is shape-stable across ablations.
    """
    parts = []
    for name in MODALITY_ORDER:
        spec = DEFAULT_MODALITIES[name]
        arr = np.asarray(instance.features[name], dtype=float)
        if spec.variability is Variability.SPACE_TIME or name == "SRTM":
            values = _spatial_nanmean(arr).ravel()
        else:
            values = arr.ravel()
        if name in removed:
            values = np.zeros_like(values)
        parts.append(np.nan_to_num(values, nan=0.0))
    return np.concatenate(parts)


def _spatial_nanmean(arr: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN planes
        return np.nanmean(arr, axis=(0, 1))


def featurize_batch(instances: Sequence[TileInstance],
                    removed: FrozenSet[str] = frozenset()) -> np.ndarray:
    return np.stack([featurize(inst, removed) for inst in instances])


# -- predictors --------------------------------------------------------------

class Predictor:
    """Maps a TileInstance to a normalized LFMC scalar in [0, 1]."""

    model_type = "abstract"
    input_shape: Shape
    cap: float
    removed: FrozenSet[str] = frozenset()

    @property
    def modalities(self) -> Tuple[str, ...]:
        """Modalities the predictor actually consumes."""
        return tuple(name for name in MODALITY_ORDER if name not in self.removed)

    def predict(self, instance: TileInstance) -> float:
        raise NotImplementedError

    def predict_batch(self, instances: Sequence[TileInstance]) -> np.ndarray:
        """Elementwise, order-preserving predictions."""
        for i, inst in enumerate(instances):
            if tuple(inst.shape) != tuple(self.input_shape):
                raise DomainError(
                    f"instance {i} shape {tuple(inst.shape)} does not match "
                    f"predictor input shape {tuple(self.input_shape)}")
        return np.array([self.predict(inst) for inst in instances], dtype=float)

    # serialization hooks
    def _arrays(self) -> List[Tuple[str, np.ndarray]]:
        raise NotImplementedError

    def _config(self) -> dict:
        raise NotImplementedError


def _clamp01(value: float) -> float:
    return min(1.0, max(0.0, float(value)))


class MonthlyAverageModel(Predictor):
    """Predicts the training-set mean target for the instance's calendar
    month; months unseen in training fall back to the global mean."""

    model_type = "monthly_average"

    def __init__(self, month_means: np.ndarray, global_mean: float,
                 input_shape: Shape, cap: float = DEFAULT_CAP):
        self.month_means = np.asarray(month_means, dtype=np.float32)
        if self.month_means.shape != (12,):
            raise ConfigError("month_means must have 12 entries")
        self.global_mean = float(global_mean)
        self.input_shape = tuple(input_shape)
        self.cap = cap

    def predict(self, instance: TileInstance) -> float:
        return _clamp01(self.month_means[instance.meta.date.month - 1])

    def _arrays(self):
        return [("month_means", self.month_means),
                ("global_mean", np.array([self.global_mean], dtype=np.float32))]

    def _config(self):
        return {"input_shape": list(self.input_shape), "cap": self.cap}


def fit_monthly_baseline(train_instances: Sequence[TileInstance],
                         cap: float = DEFAULT_CAP) -> MonthlyAverageModel:
    if not train_instances:
        raise TrainingError("cannot fit the monthly baseline on an empty training set")
    targets = np.array([inst.target for inst in train_instances], dtype=float)
    months = np.array([inst.meta.date.month for inst in train_instances])
    global_mean = float(targets.mean())
    means = np.full(12, global_mean)
    for month in range(1, 13):
        mask = months == month
        if mask.any():
            means[month - 1] = float(targets[mask].mean())
    return MonthlyAverageModel(means.astype(np.float32), global_mean,
                               input_shape=train_instances[0].shape, cap=cap)


class ReferenceRegressor(Predictor):
    """Pooled features -> dense(h1) tanh -> dense(h2) tanh -> sigmoid."""

    model_type = "reference_regressor"

    def __init__(self, input_shape: Shape, hidden: Tuple[int, int] = (128, 64),
                 seed: int = 0, removed: Iterable[str] = (),
                 cap: float = DEFAULT_CAP):
        self.input_shape = tuple(input_shape)
        self.hidden = tuple(int(h) for h in hidden)
        if len(self.hidden) != 2 or any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden must be two positive widths, got {hidden}")
        self.seed = seed
        self.removed = frozenset(removed)
        unknown = self.removed - set(MODALITY_ORDER)
        if unknown:
            raise ConfigError(f"unknown modalities to remove: {sorted(unknown)}")
        self.cap = cap
        d = feature_dim(self.input_shape)
        h1, h2 = self.hidden
        rng = np.random.default_rng(seed)

        def init(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(np.float32)

        self.params: Dict[str, np.ndarray] = {
            "W1": init(d, (h1, d)), "b1": np.zeros(h1, dtype=np.float32),
            "W2": init(h1, (h2, h1)), "b2": np.zeros(h2, dtype=np.float32),
            "W3": init(h2, (1, h2)), "b3": np.zeros(1, dtype=np.float32),
        }
        self.scaler_mean = np.zeros(d, dtype=np.float32)
        self.scaler_std = np.ones(d, dtype=np.float32)

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def fit_scaler(self, features: np.ndarray) -> None:
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        std[std < 1e-12] = 1.0
        self.scaler_mean = mean.astype(np.float32)
        self.scaler_std = std.astype(np.float32)

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.scaler_mean.astype(float))
                / self.scaler_std.astype(float))

    @staticmethod
    def _forward(params64: Dict[str, np.ndarray], x: np.ndarray):
        z1 = x @ params64["W1"].T + params64["b1"]
        a1 = np.tanh(z1)
        z2 = a1 @ params64["W2"].T + params64["b2"]
        a2 = np.tanh(z2)
        z3 = a2 @ params64["W3"].T + params64["b3"]
        yhat = 1.0 / (1.0 + np.exp(-z3[:, 0]))
        return yhat, (x, a1, a2)

    @staticmethod
    def _backward(params64, cache, yhat, y) -> Dict[str, np.ndarray]:
        x, a1, a2 = cache
        n = y.size
        dz3 = (2.0 / n) * (yhat - y) * yhat * (1.0 - yhat)  # (n,)
        dz3 = dz3[:, None]
        grads = {
            "W3": dz3.T @ a2, "b3": dz3.sum(axis=0),
        }
        da2 = dz3 @ params64["W3"]
        dz2 = da2 * (1.0 - a2 ** 2)
        grads["W2"] = dz2.T @ a1
        grads["b2"] = dz2.sum(axis=0)
        da1 = dz2 @ params64["W2"]
        dz1 = da1 * (1.0 - a1 ** 2)
        grads["W1"] = dz1.T @ x
        grads["b1"] = dz1.sum(axis=0)
        return grads

    def _params64(self) -> Dict[str, np.ndarray]:
        return {k: v.astype(np.float64) for k, v in self.params.items()}

    def forward_features(self, features: np.ndarray) -> np.ndarray:
        x = self.standardize(np.atleast_2d(features))
        yhat, _ = self._forward(self._params64(), x)
        return yhat

    def predict(self, instance: TileInstance) -> float:
        if tuple(instance.shape) != self.input_shape:
            raise DomainError(f"instance shape {tuple(instance.shape)} does not "
                              f"match predictor input shape {self.input_shape}")
        yhat = self.forward_features(featurize(instance, self.removed))
        return _clamp01(yhat[0])

    def mse_on(self, features: np.ndarray, targets: np.ndarray) -> float:
        yhat = self.forward_features(features)
        return float(np.mean((yhat - targets) ** 2))

    def _arrays(self):
        return ([("scaler_mean", self.scaler_mean), ("scaler_std", self.scaler_std)]
                + [(k, self.params[k]) for k in sorted(self.params)])

    def _config(self):
        return {"input_shape": list(self.input_shape), "hidden": list(self.hidden),
                "seed": self.seed, "removed": sorted(self.removed), "cap": self.cap}


# -- training ----------------------------------------------------------------

@dataclass
class TrainingConfig:
    max_epochs: int = 100
    patience: int = 5
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.loss != "mse":
            raise ConfigError(f"only MSE loss is supported, got {self.loss!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class TrainingHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    best_epoch: int = 0     # 1-based
    stopped_epoch: int = 0  # last completed epoch

    @property
    def n_epochs(self) -> int:
        return len(self.val_loss)


class EarlyStopping:
    """Strictly-lower-is-better early stopping with a patience window.

    ``update`` returns True once ``patience`` consecutive epochs have
    failed to improve on the best validation loss.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.bad_streak = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_streak = 0
            return False
        self.bad_streak += 1
        return self.bad_streak >= self.patience


def _split_instances(dataset) -> Tuple[Sequence[TileInstance], Sequence[TileInstance]]:
    if isinstance(dataset, Dataset):
        return dataset.instances(Split.TRAIN), dataset.instances(Split.VAL)
    train_instances, val_instances = dataset
    return train_instances, val_instances


def train(regressor: ReferenceRegressor, dataset, config: TrainingConfig,
          ) -> Tuple[ReferenceRegressor, TrainingHistory]:
    """SGD-with-momentum minimization of MSE on normalized targets.

    ``dataset`` is either a Dataset container or a (train, val) pair of
    instance lists. Stops when the validation loss has not improved for
    ``patience`` consecutive epochs (or at max_epochs) and restores the
    best epoch's parameters. Deterministic for a fixed seed.
    """
    train_instances, val_instances = _split_instances(dataset)
    if not train_instances or not val_instances:
        raise TrainingError("training needs non-empty train and val splits")
    for inst in (train_instances[0], val_instances[0]):
        if inst.target is None:
            raise TrainingError("training instances must carry targets")

    x_train = featurize_batch(train_instances, regressor.removed)
    y_train = np.array([i.target for i in train_instances], dtype=float)
    x_val = featurize_batch(val_instances, regressor.removed)
    y_val = np.array([i.target for i in val_instances], dtype=float)

    regressor.fit_scaler(x_train)
    xs_train = regressor.standardize(x_train)
    xs_val = regressor.standardize(x_val)

    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v, dtype=np.float64) for k, v in regressor.params.items()}
    stopper = EarlyStopping(config.patience)
    history = TrainingHistory()
    best_params = {k: v.copy() for k, v in regressor.params.items()}

    n = y_train.size
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            params64 = regressor._params64()
            yhat, cache = regressor._forward(params64, xs_train[batch])
            batch_loss = float(np.mean((yhat - y_train[batch]) ** 2))
            if not np.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} "
                                    f"(batch starting at {start}); "
                                    "lower the learning rate")
            epoch_loss += batch_loss * batch.size
            grads = regressor._backward(params64, cache, yhat, y_train[batch])
            for key, grad in grads.items():
                velocity[key] = config.momentum * velocity[key] - config.learning_rate * grad
                regressor.params[key] = (params64[key] + velocity[key]).astype(np.float32)
        history.train_loss.append(epoch_loss / n)
        val_loss = float(np.mean((regressor._forward(regressor._params64(), xs_val)[0]
                                  - y_val) ** 2))
        history.val_loss.append(val_loss)
        improved = val_loss < stopper.best_loss
        should_stop = stopper.update(epoch, val_loss)
        if improved:
            best_params = {k: v.copy() for k, v in regressor.params.items()}
        if should_stop:
            break

    regressor.params = best_params
    history.best_epoch = stopper.best_epoch
    history.stopped_epoch = history.n_epochs
    return regressor, history


def predict_batch(predictor: Predictor, instances: Sequence[TileInstance]) -> np.ndarray:
    return predictor.predict_batch(instances)


def gradient_check(regressor: ReferenceRegressor,
                   instances: Union[TileInstance, Sequence[TileInstance]],
                   epsilon: float = 1e-5, n_coordinates: int = 40,
                   seed: int = 0) -> float:
    """Max relative error between analytic and central-difference
    gradients over a random parameter subset."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise DomainError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    if isinstance(instances, TileInstance):
        instances = [instances]
    x = regressor.standardize(featurize_batch(instances, regressor.removed))
    y = np.array([inst.target if inst.target is not None else 0.5
                  for inst in instances], dtype=float)

    params64 = regressor._params64()

    def loss_at(params):
        yhat, _ = regressor._forward(params, x)
        return float(np.mean((yhat - y) ** 2))

    yhat, cache = regressor._forward(params64, x)
    analytic = regressor._backward(params64, cache, yhat, y)

    rng = np.random.default_rng(seed)
    names = sorted(params64)
    max_rel = 0.0
    for _ in range(n_coordinates):
        name = names[rng.integers(len(names))]
        flat_index = int(rng.integers(params64[name].size))
        original = params64[name].flat[flat_index]
        params64[name].flat[flat_index] = original + epsilon
        plus = loss_at(params64)
        params64[name].flat[flat_index] = original - epsilon
        minus = loss_at(params64)
        params64[name].flat[flat_index] = original
        numeric = (plus - minus) / (2.0 * epsilon)
        a = analytic[name].flat[flat_index]
        denom = max(abs(a), abs(numeric), 1e-8)
        max_rel = max(max_rel, abs(a - numeric) / denom)
    return max_rel


# -- serialization -----------------------------------------------------------

def save_model(predictor: Predictor, path: Union[str, Path]) -> Path:
    """Write a model container directory: {model.json, weights.bin}."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    arrays = predictor._arrays()
    spec = {
        "format_version": MODEL_FORMAT_VERSION,
        "model_type": predictor.model_type,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
        **predictor._config(),
    }
    with open(out / "weights.bin", "wb") as fh:
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    (out / "model.json").write_text(json.dumps(spec, sort_keys=True, indent=1) + "\n",
                                    encoding="utf-8")
    return out


def load_model(path: Union[str, Path]) -> Predictor:
    base = Path(path)
    spec_path = base / "model.json"
    if not spec_path.exists():
        raise DataError(f"no model container at {base}")
    try:
        spec = json.loads(spec_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt model container {base}: {exc}") from None
    version = spec.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise DataError(f"model format version {version} != supported "
                        f"{MODEL_FORMAT_VERSION}")
    raw = (base / "weights.bin").read_bytes()
    arrays: Dict[str, np.ndarray] = {}
    cursor = 0
    for entry in spec["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        block = np.frombuffer(raw, dtype="<f4", count=size, offset=cursor)
        arrays[entry["name"]] = block.reshape(entry["shape"]).copy()
        cursor += size * 4
    if cursor != len(raw):
        raise DataError(f"weights.bin length {len(raw)} does not match manifest "
                        f"({cursor} expected)")

    if spec["model_type"] == "monthly_average":
        return MonthlyAverageModel(arrays["month_means"],
                                   float(arrays["global_mean"][0]),
                                   input_shape=tuple(spec["input_shape"]),
                                   cap=spec["cap"])
    if spec["model_type"] == "reference_regressor":
        model = ReferenceRegressor(input_shape=tuple(spec["input_shape"]),
                                   hidden=tuple(spec["hidden"]),
                                   seed=spec.get("seed", 0),
                                   removed=spec.get("removed", ()),
                                   cap=spec["cap"])
        model.scaler_mean = arrays["scaler_mean"]
        model.scaler_std = arrays["scaler_std"]
        for key in model.params:
            model.params[key] = arrays[key]
        return model
    raise DataError(f"unknown model type {spec['model_type']!r}")
