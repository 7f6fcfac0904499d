"""Pure-numpy reference kernels.

Both backends expose the same two functions:

``contingency_by_lead(pred, gt, threshold, pool)``
    ``pred`` and ``gt`` are C-contiguous float64 arrays ``[T, H, W]`` with
    ``H`` and ``W`` divisible by ``pool``. A cell is an event when its value is
    ``>= threshold``; a pooled tile is an event when any of its cells is.
    Returns an int64 array ``[T, 4]`` holding hits, misses, false alarms and
    correct negatives per lead time.

``weighted_sq_error(pred, target, target_raw, tau, w_max, scale)``
    Flat float64 inputs. Returns ``(scale * sum(w * d**2), 2 * w * d * scale)``
    with ``w = w_max`` where ``target_raw > tau`` and 1 elsewhere.
"""
import numpy as np


def _pool_any(events, pool):
    if pool == 1:
        return events
    T, H, W = events.shape
    return events.reshape(T, H // pool, pool, W // pool, pool).any(axis=(2, 4))


def contingency_by_lead(pred, gt, threshold, pool):
    p = _pool_any(pred >= threshold, pool)
    g = _pool_any(gt >= threshold, pool)
    out = np.empty((p.shape[0], 4), dtype=np.int64)
    out[:, 0] = (p & g).sum(axis=(1, 2))
    out[:, 1] = (~p & g).sum(axis=(1, 2))
    out[:, 2] = (p & ~g).sum(axis=(1, 2))
    out[:, 3] = (~p & ~g).sum(axis=(1, 2))
    return out


def weighted_sq_error(pred, target, target_raw, tau, w_max, scale):
    w = np.where(target_raw > tau, w_max, 1.0)
    d = pred - target
    return float(np.sum(w * d * d) * scale), 2.0 * w * d * scale
