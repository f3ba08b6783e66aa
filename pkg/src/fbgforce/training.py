"""Episode-level splitting, Adam/Huber training loops and MAE evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from fbgforce.core import ConfigError, FbgForceError
from fbgforce.estimators import (
    ModelKind,
    ModelParams,
    ModelSpec,
    build_model,
    loss_and_grads,
    predict_episode,
)
from fbgforce.nn import AdamState, adam_step
from fbgforce.preprocess import EpisodeWindows

logger = logging.getLogger(__name__)


class EmptyDataset(FbgForceError, ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    huber_delta: float = 1.0  # grams
    batch: int = 256  # windows per FCN minibatch
    max_epochs: int = 200
    patience: int = 20  # epochs without val MAE improvement
    split_seed: int = 0
    train_ratio: float = 0.7
    val_ratio: float = 0.15
    seed: int = 0
    bptt: int = 100  # windows per truncated-BPTT segment
    seq_batch: int = 8  # episodes per sequence-model batch

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.huber_delta <= 0:
            raise ConfigError(f"huber_delta must be > 0, got {self.huber_delta}")
        if not 0 < self.train_ratio < 1:
            raise ConfigError(f"train_ratio must be in (0, 1), got {self.train_ratio}")
        if not 0 < self.val_ratio < 1 or self.train_ratio + self.val_ratio > 1:
            raise ConfigError(f"val_ratio must be in (0, 1 - train_ratio], got {self.val_ratio}")
        for name in ("batch", "max_epochs", "bptt", "seq_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")


def depth_lr(spec: ModelSpec) -> float:
    """1e-5 for the deep configurations that only converge slowly, 1e-3 otherwise."""
    if spec.kind is ModelKind.RNN and spec.layers == 8:
        return 1e-5
    if spec.kind is ModelKind.TRANSFORMER and spec.layers in (4, 8):
        return 1e-5
    return 1e-3


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: list[EpisodeWindows]
    val: list[EpisodeWindows]
    test: list[EpisodeWindows]

    def ids(self) -> dict[str, list[int]]:
        return {
            "train": [ep.index for ep in self.train],
            "val": [ep.index for ep in self.val],
            "test": [ep.index for ep in self.test],
        }


def split_episodes(episodes: list[EpisodeWindows], cfg: TrainConfig) -> DatasetSplit:
    """Shuffle whole episodes with split_seed and cut train/val/test."""
    n = len(episodes)
    if n < 2:
        raise EmptyDataset(f"need at least 2 episodes for a train/val split, got {n}")
    order = np.random.default_rng(cfg.split_seed).permutation(n)
    n_val = max(1, round(n * cfg.val_ratio))
    n_train = min(max(1, round(n * cfg.train_ratio)), n - n_val)
    picked = [episodes[i] for i in order]
    return DatasetSplit(
        train=picked[:n_train],
        val=picked[n_train : n_train + n_val],
        test=picked[n_train + n_val :],
    )


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = math.inf

    def as_dict(self) -> dict:
        return asdict(self)


def _non_empty(episodes: list[EpisodeWindows]) -> list[EpisodeWindows]:
    return [ep for ep in episodes if len(ep) > 0]


def fit_scales(episodes: list[EpisodeWindows]) -> tuple[float, float]:
    """x_scale = 1/RMS(shift), y_scale = RMS(force); 1.0 when the RMS is zero."""
    x = np.concatenate([ep.x.ravel() for ep in episodes])
    y = np.concatenate([ep.y for ep in episodes])
    x_rms = float(np.sqrt(np.mean(x * x)))
    y_rms = float(np.sqrt(np.mean(y * y)))
    return (1.0 / x_rms if x_rms > 0 else 1.0), (y_rms if y_rms > 0 else 1.0)


def _fcn_epoch(model: ModelParams, episodes, cfg: TrainConfig, state: AdamState, rng):
    x = np.concatenate([ep.x for ep in episodes])
    y = np.concatenate([ep.y for ep in episodes])
    perm = rng.permutation(len(y))
    total = 0.0
    for start in range(0, len(y), cfg.batch):
        idx = perm[start : start + cfg.batch]
        loss, grads, _ = loss_and_grads(model, x[idx], y[idx], cfg.huber_delta)
        model.tensors, state = adam_step(model.tensors, grads, state)
        total += loss * len(idx)
    return total / len(y), state


def _sequence_epoch(model: ModelParams, episodes, cfg: TrainConfig, state: AdamState, rng):
    """Batches of episodes truncated to a common length.

    The RNN runs truncated BPTT in cfg.bptt segments with its hidden state
    carried across segments; the transformer sees each batch whole.
    """
    order = rng.permutation(len(episodes))
    total, count = 0.0, 0
    for start in range(0, len(order), cfg.seq_batch):
        group = [episodes[i] for i in order[start : start + cfg.seq_batch]]
        T = min(len(ep) for ep in group)
        x = np.stack([ep.x[:T] for ep in group])
        y = np.stack([ep.y[:T] for ep in group])
        step = cfg.bptt if model.spec.kind is ModelKind.RNN else T
        carry = None
        for s in range(0, T, step):
            loss, grads, carry = loss_and_grads(model, x[:, s : s + step], y[:, s : s + step], cfg.huber_delta, carry)
            model.tensors, state = adam_step(model.tensors, grads, state)
            n = y[:, s : s + step].size
            total += loss * n
            count += n
    return total / count, state


def train(
    model: ModelParams,
    train_set: list[EpisodeWindows],
    cfg: TrainConfig,
    val_set: list[EpisodeWindows] | None = None,
) -> tuple[ModelParams, History]:
    """Train a copy of model; returns the best-validation checkpoint and its history.

    val_set defaults to train_set. Input and target scales are fitted on
    train_set only.
    """
    train_set = _non_empty(train_set)
    if not train_set:
        raise EmptyDataset("training set has no windows")
    val_set = _non_empty(val_set if val_set is not None else train_set)
    if not val_set:
        raise EmptyDataset("validation set has no windows")

    model = model.copy()
    model.x_scale, model.y_scale = fit_scales(train_set)
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    run_epoch = _fcn_epoch if model.spec.kind is ModelKind.FCN else _sequence_epoch

    history = History()
    best = model.copy()
    for epoch in range(cfg.max_epochs):
        loss, state = run_epoch(model, train_set, cfg, state, rng)
        val_mae = evaluate_mae(model, val_set)
        history.train_loss.append(loss)
        history.val_mae.append(val_mae)
        logger.info("%s epoch %d: train loss %.4f, val MAE %.3f g", model.spec.label, epoch, loss, val_mae)
        if val_mae < history.best_val_mae:
            history.best_val_mae = val_mae
            history.best_epoch = epoch
            best = model.copy()
        elif epoch - history.best_epoch >= cfg.patience:
            logger.info("early stop after %d epochs without improvement", cfg.patience)
            break
    best.meta["history"] = history.as_dict()
    return best, history


def predict_dataset(model: ModelParams, episodes: list[EpisodeWindows]) -> list[np.ndarray]:
    return [predict_episode(model, ep.x) for ep in episodes]


def evaluate_mae(model: ModelParams, episodes: list[EpisodeWindows]) -> float:
    """Mean |pred - target| in grams over every window; sequence models run episode by episode."""
    episodes = _non_empty(episodes)
    if not episodes:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    errors = [np.abs(pred - ep.y) for pred, ep in zip(predict_dataset(model, episodes), episodes)]
    return float(np.mean(np.concatenate(errors)))


def constant_baseline_mae(episodes: list[EpisodeWindows]) -> float:
    """MAE of the best constant predictor (the median force)."""
    episodes = _non_empty(episodes)
    if not episodes:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    y = np.concatenate([ep.y for ep in episodes])
    return float(np.mean(np.abs(y - np.median(y))))


@dataclass(eq=False)
class TrainResult:
    model: ModelParams
    history: History
    split: DatasetSplit
    val_mae: float
    test_mae: float | None


def fit(spec: ModelSpec, episodes: list[EpisodeWindows], cfg: TrainConfig) -> TrainResult:
    """Split, build, train and score one model."""
    split = split_episodes(episodes, cfg)
    model, history = train(build_model(spec, cfg.seed), split.train, cfg, split.val)
    test_mae = evaluate_mae(model, split.test) if _non_empty(split.test) else None
    model.meta["split"] = split.ids()
    return TrainResult(model=model, history=history, split=split, val_mae=history.best_val_mae, test_mae=test_mae)
