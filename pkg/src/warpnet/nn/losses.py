"""Classification loss."""

from __future__ import annotations

import numpy as np


class LabelError(ValueError):
    """Label outside the class range."""


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean multinomial cross entropy and its gradient w.r.t. the logits.

    Stable log-sum-exp; the returned gradient already carries the 1/B batch
    averaging, so parameter gradients downstream are batch means.
    """
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    b, k = logits.shape
    if labels.shape != (b,):
        raise LabelError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.mean(lse - shifted[np.arange(b), labels]))
    grad = np.exp(shifted - lse[:, None])
    grad[np.arange(b), labels] -= 1.0
    return loss, (grad / b).astype(logits.dtype)
