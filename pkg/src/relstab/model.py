"""Logistic-regression and one-hidden-layer ReLU classifiers in plain numpy.

Both kinds use a C-logit softmax head, so two-class models carry two logits.
For LR the "hidden" pre-activation is the logit vector itself, which keeps
``representation`` and ``input_gradient`` uniform across kinds.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset

log = logging.getLogger(__name__)

LR = "LR"
MLP = "MLP"


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class ModelArtifact:
    """Weights of a trained (or freshly initialised) classifier.

    For ``LR`` only ``W1`` (C x d) and ``b1`` (C) are used; ``W2``/``b2`` are None.
    For ``MLP``, ``W1`` is h x d and ``W2`` is C x h.
    """

    kind: str
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray | None = None
    b2: np.ndarray | None = None
    seed: int = 0
    training_meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in (LR, MLP):
            raise ModelError(f"unknown model kind {self.kind!r}")
        arrays = {"W1": self.W1, "b1": self.b1}
        if self.kind == MLP:
            if self.W2 is None or self.b2 is None:
                raise ModelError("MLP needs W2 and b2")
            arrays.update(W2=self.W2, b2=self.b2)
        for name, a in arrays.items():
            a = np.array(a, dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ModelError(f"{name} has non-finite entries")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.W1.ndim != 2 or self.b1.shape != (self.W1.shape[0],):
            raise ModelError(f"W1/b1 shapes {self.W1.shape}/{self.b1.shape} are inconsistent")
        if self.kind == MLP:
            if self.W2.ndim != 2 or self.W2.shape[1] != self.W1.shape[0]:
                raise ModelError(f"W2 shape {self.W2.shape} does not follow W1 shape {self.W1.shape}")
            if self.b2.shape != (self.W2.shape[0],):
                raise ModelError("b2 shape does not match W2")

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W1.shape[0] if self.kind == LR else self.W2.shape[0]

    @property
    def hidden_width(self) -> int:
        return self.W1.shape[0]

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.d:
            raise ModelError(f"expected {self.d} features, got {X.shape[-1]}")
        return X

    # Batched primitives; all accept a single d-vector or an n x d matrix.
    def hidden_pre(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        return X @ self.W1.T + self.b1

    def logits(self, X: np.ndarray) -> np.ndarray:
        pre = self.hidden_pre(X)
        if self.kind == LR:
            return pre
        return np.maximum(pre, 0.0) @ self.W2.T + self.b2

    def probs(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=-1)

    def gradient(self, X: np.ndarray, target: int) -> np.ndarray:
        """d logits[target] / dx, row-wise; ReLU'(0) is taken as 0."""
        if not 0 <= target < self.n_classes:
            raise ModelError(f"target {target} out of range for {self.n_classes} classes")
        X = self._check(X)
        if self.kind == LR:
            return np.broadcast_to(self.W1[target], X.shape).copy()
        active = (self.hidden_pre(X) > 0).astype(np.float64)
        # Explicit reduction instead of matmul: each row is bitwise independent of batch size.
        return np.sum((active * self.W2[target])[..., :, None] * self.W1, axis=-2)

    def with_weights(self, **weights) -> "ModelArtifact":
        return replace(self, **weights)

    # Persistence
    def to_dict(self) -> dict:
        out = {"kind": self.kind, "seed": self.seed, "training_meta": self.training_meta, "shapes": {}}
        names = ("W1", "b1") if self.kind == LR else ("W1", "b1", "W2", "b2")
        for name in names:
            a = getattr(self, name)
            out["shapes"][name] = list(a.shape)
            out[name] = a.ravel().tolist()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelArtifact":
        kind = raw["kind"]
        names = ("W1", "b1") if kind == LR else ("W1", "b1", "W2", "b2")
        arrays = {}
        for name in names:
            shape = tuple(raw["shapes"][name])
            flat = np.asarray(raw[name], dtype=np.float64)
            if flat.size != math.prod(shape):
                raise ModelError(f"{name}: {flat.size} values do not fill shape {shape}")
            arrays[name] = flat.reshape(shape)
        return cls(kind=kind, seed=int(raw.get("seed", 0)), training_meta=raw.get("training_meta", {}), **arrays)


def save_model(model: ModelArtifact, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> ModelArtifact:
    return ModelArtifact.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_model(kind: str, d: int, n_classes: int = 2, hidden_width: int = 100, seed: int = 0) -> ModelArtifact:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for every layer."""
    kind = kind.upper()
    rng = np.random.default_rng((seed, 0))

    def layer(fan_out, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_out, fan_in)), rng.uniform(-bound, bound, size=fan_out)

    if kind == LR:
        W1, b1 = layer(n_classes, d)
        return ModelArtifact(LR, W1, b1, seed=seed)
    if kind == MLP:
        W1, b1 = layer(hidden_width, d)
        W2, b2 = layer(n_classes, hidden_width)
        return ModelArtifact(MLP, W1, b1, W2, b2, seed=seed)
    raise ModelError(f"unknown model kind {kind!r}")


@dataclass(frozen=True)
class ForwardTrace:
    hidden_pre: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    predicted: int


def forward(model: ModelArtifact, x: np.ndarray) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ModelError("forward expects a single feature vector")
    pre = model.hidden_pre(x)
    logits = pre if model.kind == LR else np.maximum(pre, 0.0) @ model.W2.T + model.b2
    return ForwardTrace(hidden_pre=pre, logits=logits, probs=softmax(logits), predicted=int(np.argmax(logits)))


def representation(model: ModelArtifact, x: np.ndarray) -> np.ndarray:
    """Pre-ReLU first-layer output (MLP) or pre-softmax logits (LR)."""
    return model.hidden_pre(x)


def input_gradient(model: ModelArtifact, x: np.ndarray, target: int) -> np.ndarray:
    return model.gradient(x, target)


def finite_diff_gradient(
    model: ModelArtifact | Callable[[np.ndarray], np.ndarray], x: np.ndarray, target: int, step: float = 1e-5
) -> np.ndarray:
    """Central differences of ``logits[target]`` per coordinate.

    ``model`` may also be any callable mapping a batch of inputs to a batch of
    logit vectors.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    scorer = model.logits if isinstance(model, ModelArtifact) else model
    eye = np.eye(x.size) * step
    up = np.atleast_2d(scorer(x + eye))[:, target]
    down = np.atleast_2d(scorer(x - eye))[:, target]
    return (up - down) / (2 * step)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 32
    epochs: int = 100
    decay: float = 0.99
    eps: float = 1e-8


def _loss_and_grads(model: ModelArtifact, X: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
    """Mean cross-entropy of the true-class softmax probability and its parameter gradients."""
    n = X.shape[0]
    pre = X @ model.W1.T + model.b1
    if model.kind == LR:
        logits = pre
    else:
        act = np.maximum(pre, 0.0)
        logits = act @ model.W2.T + model.b2
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    if model.kind == LR:
        return loss, {"W1": dlogits.T @ X, "b1": dlogits.sum(axis=0)}
    dpre = (dlogits @ model.W2) * (pre > 0)
    return loss, {
        "W1": dpre.T @ X,
        "b1": dpre.sum(axis=0),
        "W2": dlogits.T @ act,
        "b2": dlogits.sum(axis=0),
    }


def accuracy(model: ModelArtifact, ds: Dataset) -> float:
    return float(np.mean(model.predict(ds.X) == ds.y))


def train(model: ModelArtifact, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig = TrainConfig()) -> ModelArtifact:
    """Minibatch RMSProp; returns the weights of the epoch with best validation accuracy.

    Ties go to the earliest epoch. With ``epochs=0`` the initial weights are
    returned and ``best_epoch`` is -1.
    """
    if train_ds.n == 0 or val_ds.n == 0:
        raise TrainingError("train and validation splits must be non-empty")
    if train_ds.d != model.d:
        raise TrainingError(f"model expects {model.d} features, data has {train_ds.d}")
    names = ("W1", "b1") if model.kind == LR else ("W1", "b1", "W2", "b2")
    params = {k: getattr(model, k).copy() for k in names}
    sq_avg = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng((model.seed, 1))

    best = dict(params)
    best_acc, best_epoch = accuracy(model, val_ds), -1
    current = model
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_ds.n)
        for b, start in enumerate(range(0, train_ds.n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            loss, grads = _loss_and_grads(current, train_ds.X[idx], train_ds.y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            for k in names:
                sq_avg[k] = cfg.decay * sq_avg[k] + (1 - cfg.decay) * grads[k] ** 2
                params[k] = params[k] - cfg.lr * grads[k] / (np.sqrt(sq_avg[k]) + cfg.eps)
            current = model.with_weights(**params)
        acc = accuracy(current, val_ds)
        if best_epoch < 0 or acc > best_acc:
            best, best_acc, best_epoch = dict(params), acc, epoch
        log.debug("epoch %d loss %.5f val_acc %.4f", epoch, loss, acc)

    meta = {"epochs_run": cfg.epochs, "best_val_accuracy": best_acc, "best_epoch": best_epoch}
    return replace(model.with_weights(**best), training_meta=meta)
