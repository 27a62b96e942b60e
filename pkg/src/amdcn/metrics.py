"""Training loss and counting metrics."""

import math

import numpy as np

from amdcn.tensor import ShapeError, Tensor, abs_, mean, sub

GAME_LEVELS = (0, 1, 2, 3)
MAX_GAME_LEVEL = 8


def scaled_mae_loss(pred, true_density, gamma=255.0):
    """Mean absolute difference between ``pred`` and ``gamma * true_density``.

    ``pred`` is a :class:`Tensor`; the result is a scalar Tensor recorded on any
    active tape.
    """
    target = np.asarray(true_density.data if isinstance(true_density, Tensor) else true_density)
    if tuple(target.shape) != tuple(pred.shape):
        raise ShapeError(f"loss: prediction shape {pred.shape} != target shape {target.shape}")
    scaled = Tensor._wrap(np.asarray(target * gamma, dtype=pred.dtype))
    return mean(abs_(sub(pred, scaled)))


def scaled_mae_grad(pred, true_density, gamma=255.0):
    """Closed-form adjoint of :func:`scaled_mae_loss` w.r.t. ``pred``."""
    pred = np.asarray(pred)
    return np.sign(pred - gamma * np.asarray(true_density)) / pred.size


def count_mae(pred_counts, true_counts):
    p = np.asarray(pred_counts, dtype=np.float64).reshape(-1)
    t = np.asarray(true_counts, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("count_mae needs at least one pair")
    if p.size != t.size:
        raise ValueError(f"count_mae: {p.size} predictions vs {t.size} ground-truth counts")
    return math.fsum(np.abs(p - t)) / p.size


def band_edges(n, parts):
    """Split ``n`` into ``parts`` contiguous bands; the leading ``n % parts`` bands get one extra."""
    base, rem = divmod(n, parts)
    sizes = [base + (1 if i < rem else 0) for i in range(parts)]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(int)


def region_counts(density, level):
    density = np.asarray(density, dtype=np.float64)
    if level < 0 or level > MAX_GAME_LEVEL:
        raise ValueError(f"GAME level must be in 0..{MAX_GAME_LEVEL}, got {level}")
    parts = 2 ** level
    H, W = density.shape
    if parts > H or parts > W:
        raise ValueError(f"GAME({level}) needs a {parts}x{parts} grid, map is only {H}x{W}")
    ry, rx = band_edges(H, parts), band_edges(W, parts)
    # reduceat sums each band; bands are non-empty because parts <= extent
    return np.add.reduceat(np.add.reduceat(density, ry[:-1], axis=0), rx[:-1], axis=1)


def game(pred, truth, level):
    """Sum over the ``4**level`` regions of ``|predicted count - true count|`` for one image."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"GAME: prediction shape {pred.shape} != truth shape {truth.shape}")
    diff = np.abs(region_counts(pred, level) - region_counts(truth, level))
    return math.fsum(diff.ravel())


def game_batch(preds, truths, level):
    if len(preds) != len(truths) or not preds:
        raise ValueError("game_batch needs equally many (>= 1) predictions and truths")
    return math.fsum(game(p, t, level) for p, t in zip(preds, truths)) / len(preds)


def game_monotonicity_check(pred, truth, max_level, rtol=1e-12):
    """True if GAME(L+1) >= GAME(L) for every L < max_level (meaningful for power-of-two maps).

    ``rtol`` absorbs rounding when a level's regional errors all share one sign.
    """
    values = [game(pred, truth, L) for L in range(max_level + 1)]
    return all(b >= a - rtol * max(1.0, a) for a, b in zip(values, values[1:]))


def metric_report(pred_counts, true_counts, pred_maps, true_maps, seconds, levels=GAME_LEVELS):
    report = {"mae": count_mae(pred_counts, true_counts)}
    for L in levels:
        report[f"game{L}"] = game_batch(pred_maps, true_maps, L)
    report["images"] = len(pred_counts)
    report["seconds"] = float(seconds)
    return report


def format_report(report):
    return "\n".join(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}" for k, v in report.items())
