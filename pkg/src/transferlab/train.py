"""Optimizers, early stopping, data splits and the training loop."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import sigmoid_bce, softmax_ce
from .models import Model
from .tensor import NumericError, SeededRng, check_finite


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx])


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    batch_size: int = 32
    min_epochs: int = 5
    patience: int = 5
    max_epochs: int = 100
    restore_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.min_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("min_epochs, patience and batch_size must be >= 1")
        if self.max_epochs < self.min_epochs:
            raise ValueError("max_epochs must be >= min_epochs")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochStats:
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainReport:
    history: list[EpochStats] = field(default_factory=list)
    epochs_ran: int = 0
    best_epoch: int = 0
    stopped_early: bool = False
    wall_seconds: float = 0.0

    @property
    def best_val_acc(self) -> float:
        return self.history[self.best_epoch - 1].val_acc if self.history else float("nan")


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, model: Model) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for layer in model.trainable_layers():
            for pname, g in layer.grads.items():
                key = f"{layer.name}.{pname}"
                p = layer.params[pname]
                if key not in self.m:
                    self.m[key] = np.zeros_like(p)
                    self.v[key] = np.zeros_like(p)
                m, v = self.m[key], self.v[key]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, lr=1e-2, momentum=0.0):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, model: Model) -> None:
        for layer in model.trainable_layers():
            for pname, g in layer.grads.items():
                key = f"{layer.name}.{pname}"
                p = layer.params[pname]
                if self.momentum:
                    v = self.velocity.setdefault(key, np.zeros_like(p))
                    v *= self.momentum
                    v -= self.lr * g
                    p += v
                else:
                    p -= (self.lr * g).astype(p.dtype, copy=False)


def adam_step(params: dict, grads: dict, state: dict, cfg: TrainConfig) -> None:
    """Functional single Adam update over name-keyed dicts (in place).

    ``state`` holds ``t`` plus per-name ``m``/``v`` moments.
    """
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    for name, g in grads.items():
        p = params[name]
        m = state.setdefault(("m", name), np.zeros_like(p))
        v = state.setdefault(("v", name), np.zeros_like(p))
        m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        mhat = m / (1.0 - cfg.beta1 ** t)
        vhat = v / (1.0 - cfg.beta2 ** t)
        p -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(cfg.lr, cfg.momentum)


# --------------------------------------------------------------------------
# early stopping
# --------------------------------------------------------------------------

def best_epoch(history) -> int:
    """1-based epoch of the first occurrence of the maximum."""
    return int(np.argmax(np.asarray(history, dtype=np.float64))) + 1


def early_stop_decision(history, cfg: TrainConfig) -> str:
    """``"stop"`` once past ``min_epochs`` with ``patience`` epochs since the best, or at the cap."""
    e = len(history)
    if e == 0:
        return "continue"
    if e >= cfg.max_epochs:
        return "stop"
    if e >= cfg.min_epochs and e - best_epoch(history) >= cfg.patience:
        return "stop"
    return "continue"


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def val_count(n_per_class: int, val_fraction: float, min_val: int = 1) -> int:
    if val_fraction <= 0:
        return 0
    return max(min_val, math.ceil(val_fraction * n_per_class))


def stratified_split(labels, n_per_class: int, val_fraction: float = 0.2,
                     test_per_class: int = 0, seed: int = 0, min_val: int = 1) -> Split:
    """Per class: test first, then train, then validation, from one seeded permutation.

    The test subset depends only on ``seed`` (not on ``n_per_class``), and
    train sets for growing ``n_per_class`` are nested.
    """
    labels = np.asarray(labels)
    v = val_count(n_per_class, val_fraction, min_val)
    rng = SeededRng(seed)
    train, val, test = [], [], []
    for ci, c in enumerate(np.unique(labels)):
        idx = np.flatnonzero(labels == c)
        need = n_per_class + v + test_per_class
        if need > len(idx):
            raise ValueError(f"class {c!r}: need {need} samples, only {len(idx)} available")
        perm = idx[rng.spawn(ci).permutation(len(idx))]
        test.append(perm[:test_per_class])
        pool = perm[test_per_class:]
        train.append(pool[:n_per_class])
        val.append(pool[n_per_class:n_per_class + v])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    return Split(cat(train), cat(val), cat(test))


def kfold_split(labels, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Stratified k folds: each class's shuffled indices are dealt round-robin."""
    if k < 2:
        raise ValueError("k must be >= 2")
    labels = np.asarray(labels)
    rng = SeededRng(seed)
    folds = [[] for _ in range(k)]
    for ci, c in enumerate(np.unique(labels)):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise ValueError(f"class {c!r} has fewer than {k} samples")
        perm = idx[rng.spawn(ci).permutation(len(idx))]
        for f in range(k):
            folds[f].append(perm[f::k])
    return [np.sort(np.concatenate(f)) for f in folds]


# --------------------------------------------------------------------------
# training / evaluation
# --------------------------------------------------------------------------

def predictions(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 1:
        return (logits[:, 0] >= 0).astype(np.int64)  # sigma(z) = 0.5 counts as class 1
    return logits.argmax(axis=1)


def evaluate(model: Model, data: Dataset, batch_size: int = 64, start: int = 0) -> tuple[float, float]:
    """(accuracy, mean loss) in eval mode."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = model.predict(data.x, batch_size=batch_size, start=start)
    check_finite(logits, "logits")
    loss, _ = model.loss()(logits, data.y)
    return float(np.mean(predictions(logits) == data.y)), loss


def _trainable_copy(model: Model):
    return [(l, {k: v.copy() for k, v in l.params.items()}) for l in model.trainable_layers()]


def train_model(model: Model, train: Dataset, val: Dataset | None, cfg: TrainConfig,
                start: int = 0, eval_batch_size: int = 64) -> TrainReport:
    """Mini-batch training with early stopping on validation accuracy.

    ``start`` lets the inputs be activations of layer ``start`` (e.g. cached
    backbone features feeding the head); the parameter trajectory is the
    same as running the full model on the corresponding images.
    """
    n = len(train)
    if n == 0:
        raise ValueError("empty training set")
    t0 = time.perf_counter()
    rng = SeededRng(cfg.seed)
    shuffle = rng.spawn(0)
    model.attach_rng(rng.spawn(1))
    opt = make_optimizer(cfg)
    loss_f = sigmoid_bce if model.outputs == 1 else softmax_ce
    bs = min(cfg.batch_size, n)
    report = TrainReport()
    monitored: list[float] = []
    best = None
    while True:
        perm = shuffle.permutation(n)
        total_loss = 0.0
        correct = 0
        for i in range(0, n, bs):
            idx = perm[i:i + bs]
            logits = model.forward(train.x[idx], train=True, start=start)
            loss, dz = loss_f(logits, train.y[idx])
            if not math.isfinite(loss):
                raise NumericError("non-finite training loss")
            model.backward(dz)
            opt.step(model)
            total_loss += loss * len(idx)
            correct += int(np.sum(predictions(logits) == train.y[idx]))
        for layer in model.trainable_layers():
            for pname, p in layer.params.items():
                check_finite(p, f"{layer.name}.{pname}")
        train_acc = correct / n
        val_acc = evaluate(model, val, eval_batch_size, start)[0] if val is not None and len(val) else train_acc
        report.history.append(EpochStats(total_loss / n, train_acc, val_acc))
        monitored.append(val_acc)
        if cfg.restore_best and best_epoch(monitored) == len(monitored):
            best = _trainable_copy(model)
        if early_stop_decision(monitored, cfg) == "stop":
            break
    model.clear_cache()
    report.epochs_ran = len(monitored)
    report.best_epoch = best_epoch(monitored)
    report.stopped_early = report.epochs_ran < cfg.max_epochs
    if cfg.restore_best and best is not None:
        for layer, params in best:
            layer.params = params
    report.wall_seconds = time.perf_counter() - t0
    return report
