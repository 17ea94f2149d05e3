"""SGD training loop with a stepped learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Rng
from .layers import Model
from .losses import softmax_xent


class TrainingDivergence(RuntimeError):
    def __init__(self, iteration: int, layer: str):
        super().__init__(f"non-finite loss at iteration {iteration} "
                         f"(first non-finite activation in {layer})")
        self.iteration = iteration
        self.layer = layer


@dataclass
class SgdSchedule:
    base_lr: float = 0.01
    batch_size: int = 256
    total_iters: int = 150_000
    drop_every: int = 50_000
    drop_factor: float = 10.0
    locnet_lr_scale: float = 1.0

    def __post_init__(self):
        if min(self.base_lr, self.batch_size, self.total_iters, self.drop_every,
               self.locnet_lr_scale) <= 0:
            raise ValueError("schedule fields must be positive")
        if self.drop_factor <= 1.0:
            raise ValueError("drop_factor must be > 1")

    def lr_at(self, iteration: int) -> float:
        return self.base_lr / self.drop_factor ** (iteration // self.drop_every)

    def to_record(self) -> dict:
        return {"base_lr": self.base_lr, "batch_size": self.batch_size,
                "total_iters": self.total_iters, "drop_every": self.drop_every,
                "drop_factor": self.drop_factor, "locnet_lr_scale": self.locnet_lr_scale}

    @staticmethod
    def from_record(rec: dict) -> "SgdSchedule":
        return SgdSchedule(**rec)


@dataclass
class MetricRow:
    iteration: int
    loss: float
    test_error: float  # percent; nan when not evaluated at this row


def _first_nonfinite_layer(model: Model, x: np.ndarray) -> str:
    for layer in model.layers:
        x = layer.forward(x)
        if not np.all(np.isfinite(x)):
            return layer.name
    return "loss"


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray,
             batch: int = 512) -> float:
    """Argmax prediction error in percent."""
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty evaluation set")
    wrong = 0
    for start in range(0, n, batch):
        logits = model.forward(images[start:start + batch])
        wrong += int(np.count_nonzero(np.argmax(logits, axis=1)
                                      != labels[start:start + batch]))
    return 100.0 * wrong / n


def sgd_train(model: Model, images: np.ndarray, labels: np.ndarray,
              schedule: SgdSchedule, rng: Rng,
              eval_images: np.ndarray | None = None,
              eval_labels: np.ndarray | None = None,
              eval_every: int = 1000,
              log: callable = None) -> list[MetricRow]:
    """Train in place; returns the metric log.

    Batches are drawn with replacement from the training set. Localisation
    sub-network parameters use base_lr * locnet_lr_scale. A non-finite loss
    aborts with the offending iteration and layer.
    """
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    params = model.params()
    metrics: list[MetricRow] = []
    for it in range(schedule.total_iters):
        idx = rng.integers(schedule.batch_size, n)
        x = images[idx]
        y = labels[idx]
        logits = model.forward(x)
        loss, grad = softmax_xent(logits, y)
        if not np.isfinite(loss):
            raise TrainingDivergence(it, _first_nonfinite_layer(model, x))
        model.backward(grad)
        lr = schedule.lr_at(it)
        for p in params:
            scale = lr * (schedule.locnet_lr_scale if p.locnet else 1.0)
            p.value -= (scale * p.grad).astype(p.value.dtype, copy=False)
        if (it + 1) % eval_every == 0 or it + 1 == schedule.total_iters:
            err = np.nan
            if eval_images is not None:
                err = evaluate(model, eval_images, eval_labels)
            row = MetricRow(it + 1, loss, err)
            metrics.append(row)
            if log is not None:
                log(row)
    return metrics
