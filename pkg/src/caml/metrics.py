"""Overlap and surface metrics, and sliding-window inference."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from caml import kernels
from caml.autodiff.tensor import Tensor, no_grad


class UndefinedSurfaceError(ValueError):
    """Surface distances need a non-empty foreground in both masks."""


@dataclass
class MetricRow:
    sample_id: int
    dice: float
    jaccard: float
    hd95: float
    asd: float


def _fg(mask):
    return np.asarray(mask.data if hasattr(mask, "data") else mask) == 1


def _pair(pred, gt):
    p, g = _fg(pred), _fg(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask dims differ: {p.shape} vs {g.shape}")
    return p, g


def dice(pred, gt):
    p, g = _pair(pred, gt)
    sp, sg = int(p.sum()), int(g.sum())
    if sp + sg == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / (sp + sg)


def jaccard(pred, gt):
    p, g = _pair(pred, gt)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def surface_voxels(mask):
    """Foreground voxels with a 6-neighbour that is background or outside the grid."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(m & ~interior)


def nearest_rank_percentile(values, q):
    """Smallest value with at least q% of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise ValueError("percentile of an empty set")
    rank = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[rank - 1])


def directed_distances(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """(distances of pred surface to gt surface, gt surface to pred surface)."""
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        raise UndefinedSurfaceError("surface distance undefined for an empty mask")
    sp, sg = surface_voxels(p), surface_voxels(g)
    return (kernels.min_distances(sp, sg, spacing), kernels.min_distances(sg, sp, spacing))


def surface_metrics(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """(hd95, asd): max of the directed 95th percentiles; mean of pooled distances."""
    d_pg, d_gp = directed_distances(pred, gt, spacing)
    hd95 = max(nearest_rank_percentile(d_pg, 95), nearest_rank_percentile(d_gp, 95))
    asd = float(np.concatenate([d_pg, d_gp]).mean())
    return hd95, asd


def metric_row(sample_id, pred, gt, spacing=(1.0, 1.0, 1.0)):
    """All four metrics; surface metrics are NaN when either mask is empty."""
    try:
        hd95, asd = surface_metrics(pred, gt, spacing)
    except UndefinedSurfaceError:
        hd95 = asd = float("nan")
    return MetricRow(int(sample_id), dice(pred, gt), jaccard(pred, gt), hd95, asd)


def window_starts(n, window, stride):
    """Window origins along one axis; the last window is clamped to the border."""
    if window > n:
        raise ValueError(f"volume extent {n} smaller than window {window}")
    if stride < 1 or stride > window:
        raise ValueError("stride must lie in [1, window]")
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def sliding_window_probs(predict, volume, window, stride):
    """Average per-voxel class probabilities over all covering windows.

    ``predict`` maps a (1, 1, d, h, w) array to (1, C, d, h, w) probabilities.
    Windows are visited in fixed raster order.
    """
    vol = np.asarray(volume, dtype=np.float32)
    grids = [window_starts(n, w, s) for n, w, s in zip(vol.shape, window, stride)]
    acc = counts = None
    for z in grids[0]:
        for y in grids[1]:
            for x in grids[2]:
                sl = (slice(z, z + window[0]), slice(y, y + window[1]), slice(x, x + window[2]))
                probs = predict(vol[sl][None, None])[0]
                if acc is None:
                    acc = np.zeros((probs.shape[0],) + vol.shape, np.float64)
                    counts = np.zeros(vol.shape, np.int64)
                acc[(slice(None),) + sl] += probs
                counts[sl] += 1
    return acc / counts


def sliding_window_infer(params, volume, window, stride, cfg):
    """Label map from the vanilla branch (batch size 1), no post-processing.

    ``volume`` is a normalised VolumeGrid or (D, H, W) array.
    """
    from caml.autodiff import ops
    from caml.backbone import check_input, forward_vanilla
    from caml.volgen import LabelGrid

    data = volume.data if hasattr(volume, "data") else np.asarray(volume)
    check_input(cfg, Tensor(np.zeros((1, 1) + tuple(window), np.float32)))

    def predict(x):
        with no_grad():
            out = forward_vanilla(params, Tensor(x), cfg)
            return ops.softmax(out.logits, axis=1).value

    probs = sliding_window_probs(predict, data, window, stride)
    return LabelGrid(probs.argmax(0).astype(np.uint8))
