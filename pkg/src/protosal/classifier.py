"""Baseline convolutional classifier: architecture, training with early
stopping and learning-rate reduction on plateau, and grid search."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .data import AugmentConfig, augment
from .nn import (Add, BatchNorm2d, ChannelPad, Conv2d, Dense, GlobalAvgPool, Graph, MaxPool, ReLU)
from .optim import make_optimizer


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass
class ModelConfig:
    conv_blocks: int = 4
    channels: tuple = (16, 32, 64, 128)
    use_skip_connections: bool = False
    input_size: tuple = (96, 96, 3)
    num_classes: int = 2

    def validate(self) -> None:
        if self.num_classes != 2:
            raise ValueError("only binary classification is supported")
        if len(self.channels) != self.conv_blocks:
            raise ValueError(f"{self.conv_blocks} conv blocks need {self.conv_blocks} channel counts")
        side = min(self.input_size[:2]) // 2 ** self.conv_blocks
        if side < 3:
            raise ValueError(f"final feature map would be {side}x{side}; need at least 3x3")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        h, w = self.input_size[0] >> self.conv_blocks, self.input_size[1] >> self.conv_blocks
        return h, w, self.channels[-1]


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 100
    early_stop_patience: int = 10
    lr_plateau_factor: float = 0.2
    lr_plateau_patience: int = 3
    min_delta: float = 1e-4
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    augment: bool = True
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.lr_plateau_factor < 1:
            raise ValueError("lr_plateau_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_patience < 1 or self.lr_plateau_patience < 1:
            raise ValueError("patience values must be >= 1")


def add_backbone(graph: Graph, cfg: ModelConfig, rng: np.random.Generator, prefix: str = "") -> str:
    """Append conv blocks (3x3 conv, batch-norm, ReLU, 2x2 max-pool) and
    return the name of the last node. With skip connections each block adds
    a zero-padded identity shortcut before its ReLU."""
    cin = cfg.input_size[2]
    src = graph.output_name or "input"
    for b, cout in enumerate(cfg.channels):
        p = f"{prefix}block{b + 1}."
        conv = graph.add(p + "conv", Conv2d(cin, cout, 3, 1, 1, rng=rng), src)
        bn = graph.add(p + "bn", BatchNorm2d(cout), conv)
        if cfg.use_skip_connections:
            short = graph.add(p + "shortcut", ChannelPad(cout), src)
            bn = graph.add(p + "add", Add(), (bn, short))
        act = graph.add(p + "relu", ReLU(), bn)
        src = graph.add(p + "pool", MaxPool(2), act)
        cin = cout
    return src


def build_cnn(cfg: ModelConfig, seed: int = 0) -> Graph:
    cfg.validate()
    rng = np.random.default_rng(seed)
    g = Graph(tuple(cfg.input_size))
    add_backbone(g, cfg, rng)
    g.add("gap", GlobalAvgPool())
    g.add("logits", Dense(cfg.channels[-1], cfg.num_classes, rng=rng))
    return g


class PlateauSchedule:
    """Tracks validation accuracy for early stopping and LR reduction.

    An epoch counts as an improvement when it beats the best value so far by
    more than ``min_delta``. The LR counter resets after every reduction.
    """

    def __init__(self, lr: float, factor: float, lr_patience: int, stop_patience: int,
                 min_delta: float = 1e-4):
        self.lr, self.factor = lr, factor
        self.lr_patience, self.stop_patience = lr_patience, stop_patience
        self.min_delta = min_delta
        self.best = -math.inf
        self.best_epoch = -1
        self._since_best = 0
        self._since_reduce = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True if it is a new best."""
        if value > self.best + self.min_delta:
            self.best, self.best_epoch = value, epoch
            self._since_best = self._since_reduce = 0
            return True
        self._since_best += 1
        self._since_reduce += 1
        if self._since_reduce >= self.lr_patience:
            self.lr *= self.factor
            self._since_reduce = 0
        return False

    @property
    def should_stop(self) -> bool:
        return self._since_best >= self.stop_patience


def predict_logits(graph: Graph, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(X), batch_size):
            out.append(graph.forward(X[i:i + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, 2))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(graph: Graph, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return softmax_np(predict_logits(graph, X, batch_size).astype(np.float64))


def _check_split(X, y, name):
    if len(y) == 0:
        raise ValueError(f"{name} split is empty")
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name} labels must be 0 or 1")


def train_classifier(model: ModelConfig, X_train, y_train, X_val, y_val, cfg: TrainConfig,
                     graph: Graph | None = None) -> tuple[Graph, list[dict]]:
    """Mini-batch training; returns the parameters of the best validation
    epoch and a per-epoch log (epoch, train_loss, val_accuracy, lr)."""
    cfg.validate()
    _check_split(X_train, y_train, "train")
    _check_split(X_val, y_val, "validation")
    graph = graph or build_cnn(model, cfg.seed)
    opt = make_optimizer(cfg.optimizer, list(graph.parameters().values()), cfg.learning_rate)
    sched = PlateauSchedule(cfg.learning_rate, cfg.lr_plateau_factor, cfg.lr_plateau_patience,
                            cfg.early_stop_patience, cfg.min_delta)
    aug = AugmentConfig(seed=cfg.seed)
    best_state = {k: v.copy() for k, v in graph.state_dict().items()}
    log = []
    n = len(y_train)
    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        opt.lr = sched.lr
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb = X_train[idx]
            if cfg.augment:
                xb = augment(xb, rng, aug)
            opt.zero_grad()
            loss = ad.cross_entropy(graph.forward(xb, training=True), y_train[idx])
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch)
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        val_acc = float((predict_logits(graph, X_val).argmax(axis=1) == y_val).mean())
        log.append({"epoch": epoch, "train_loss": total / n, "val_accuracy": val_acc, "lr": opt.lr})
        if sched.update(epoch, val_acc):
            best_state = {k: v.copy() for k, v in graph.state_dict().items()}
        if sched.should_stop:
            break
    graph.load_state_dict(best_state)
    return graph, log


def grid_search(model: ModelConfig, grid, X_train, y_train, X_val, y_val,
                base: TrainConfig | None = None) -> tuple[TrainConfig, list[dict]]:
    """Train every (optimizer, learning rate) pair and keep the best by
    validation accuracy; ties go to the lower learning rate, then the
    lexicographically smaller optimizer id. Diverging candidates lose."""
    grid = list(grid)
    if not grid:
        raise ValueError("grid is empty")
    base = base or TrainConfig()
    results = []
    for opt_name, lr in grid:
        cfg = replace(base, optimizer=opt_name, learning_rate=lr)
        try:
            _, log = train_classifier(model, X_train, y_train, X_val, y_val, cfg)
            score = max(r["val_accuracy"] for r in log)
        except TrainingDiverged:
            score = -math.inf
        results.append({"optimizer": opt_name, "learning_rate": lr, "val_accuracy": score})
    best = min(results, key=lambda r: (-r["val_accuracy"], r["learning_rate"], r["optimizer"]))
    return replace(base, optimizer=best["optimizer"], learning_rate=best["learning_rate"]), results


def write_log(path: str | Path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_accuracy", "lr"])
        for r in log:
            w.writerow([r["epoch"], repr(float(r["train_loss"])), repr(float(r["val_accuracy"])),
                        repr(float(r["lr"]))])


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`train_classifier`.

    ``X`` is an (N, H, W, 3) array of patches in [0, 1]. If no validation
    set is passed to :meth:`fit`, ``validation_fraction`` of the training
    data is held out.
    """

    def __init__(self, conv_blocks=4, channels=(16, 32, 64, 128), use_skip_connections=False,
                 batch_size=64, max_epochs=100, early_stop_patience=10, lr_plateau_factor=0.2,
                 lr_plateau_patience=3, optimizer="adam", learning_rate=1e-3, augment=True,
                 validation_fraction=0.2, random_state=0):
        self.conv_blocks = conv_blocks
        self.channels = channels
        self.use_skip_connections = use_skip_connections
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.lr_plateau_factor = lr_plateau_factor
        self.lr_plateau_patience = lr_plateau_patience
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def model_config(self, input_shape) -> ModelConfig:
        return ModelConfig(self.conv_blocks, tuple(self.channels), self.use_skip_connections,
                           tuple(input_shape), 2)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.max_epochs, self.early_stop_patience,
                           self.lr_plateau_factor, self.lr_plateau_patience, 1e-4, self.optimizer,
                           self.learning_rate, self.augment, self.random_state)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_patches(X), np.asarray(y, dtype=np.int64)
        if X_val is None:
            rng = np.random.default_rng(self.random_state)
            order = rng.permutation(len(y))
            n_val = max(1, int(round(self.validation_fraction * len(y))))
            X_val, y_val = X[order[:n_val]], y[order[:n_val]]
            X, y = X[order[n_val:]], y[order[n_val:]]
        X_val, y_val = check_patches(X_val), np.asarray(y_val, dtype=np.int64)
        self.graph_, self.history_ = train_classifier(self.model_config(X.shape[1:]), X, y, X_val, y_val,
                                                      self.train_config())
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "graph_")
        return predict_logits(self.graph_, check_patches(X, self.graph_.input_shape))

    def predict_proba(self, X):
        return softmax_np(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


def check_patches(X, input_shape=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected an (N, H, W, 3) array of patches, got shape {X.shape}")
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise ValueError(f"expected patches shaped {tuple(input_shape)}, got {X.shape[1:]}")
    if not np.isfinite(X).all():
        raise ValueError("patches contain NaN or infinite values")
    return X
