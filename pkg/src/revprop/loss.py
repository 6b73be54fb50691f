"""Root-mean-squared-error loss."""

from __future__ import annotations

import numpy as np

from revprop.tensor import ShapeError, Tensor


def rmse_loss(pred: Tensor, target: Tensor) -> tuple[float, Tensor]:
    """Return ``sqrt(mean((pred - target)^2))`` and its gradient w.r.t. ``pred``.

    The gradient is ``(pred - target) / (n * loss)``; at zero loss it is
    defined as zero.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.numpy() - target.numpy()
    n = diff.size
    loss = float(np.sqrt(np.mean(np.square(diff, dtype=np.float64))))
    if loss == 0.0:
        return 0.0, Tensor.zeros(pred.shape, dtype=pred.dtype)
    grad = diff / (n * loss)
    return loss, Tensor.wrap(grad.astype(pred.dtype, copy=False))


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    """Plain-array RMSE, used for metrics where no gradient is needed."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if d.size == 0:
        raise ValueError("RMSE of an empty array is undefined")
    return float(np.sqrt(np.mean(d * d)))


def rmse_loss_batch(preds, targets) -> tuple[float, list]:
    """RMSE over every element of a minibatch, with per-sample gradients."""
    if len(preds) != len(targets) or not preds:
        raise ValueError("need equally many predictions and targets (at least one)")
    diffs = []
    sq = 0.0
    n = 0
    for p, t in zip(preds, targets):
        if p.shape != t.shape:
            raise ShapeError(f"shape mismatch: {p.shape} vs {t.shape}")
        d = p.numpy() - t.numpy()
        diffs.append(d)
        sq += float(np.sum(np.square(d, dtype=np.float64)))
        n += d.size
    loss = float(np.sqrt(sq / n))
    if loss == 0.0:
        return 0.0, [Tensor.zeros(p.shape, dtype=p.dtype) for p in preds]
    scale = 1.0 / (n * loss)
    grads = [Tensor.wrap((d * scale).astype(p.dtype, copy=False)) for d, p in zip(diffs, preds)]
    return loss, grads
