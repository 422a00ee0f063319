"""Dice, Hausdorff distance and boundary-distance-stratified accuracy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .direction_field import check_mask


class UndefinedHausdorff(ValueError):
    pass


@dataclass
class StructureResult:
    structure: str
    dice: float
    hausdorff_mm: float  # nan when undefined


@dataclass
class StratifiedAccuracy:
    distances: list
    accuracy: list
    counts: list


def _same_shape(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice_3d(pred, gt, c):
    pred, gt = _same_shape(pred, gt)
    a, b = pred == c, gt == c
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def _directed(a, b, spacing):
    # distance from every voxel to the nearest voxel of b, read off at a
    dist = ndimage.distance_transform_edt(~b, sampling=spacing)
    return dist[a]


def hausdorff_3d(pred, gt, c, spacing=(1.0, 1.0, 1.0), percentile=None):
    """Symmetric Hausdorff distance between the class-``c`` voxel sets, in mm.

    ``percentile`` (e.g. 95) replaces each directed max by that percentile.
    """
    pred, gt = _same_shape(pred, gt)
    a, b = pred == c, gt == c
    if not a.any() or not b.any():
        raise UndefinedHausdorff(f"undefined Hausdorff: class {c} is empty in {'pred' if not a.any() else 'gt'}")
    spacing = tuple(float(s) for s in spacing)[-a.ndim:]
    dab, dba = _directed(a, b, spacing), _directed(b, a, spacing)
    if percentile is None:
        return float(max(dab.max(), dba.max()))
    return float(max(np.percentile(dab, percentile), np.percentile(dba, percentile)))


def label_distance(gt):
    """Per-pixel distance to the nearest pixel of a different label (any class, background included).

    Pixels of a label that fills the whole slice get ``inf``.
    """
    gt = check_mask(gt)
    out = np.full(gt.shape, np.inf)
    for c in np.unique(gt):
        inside = gt == c
        if inside.all():
            continue
        out[inside] = ndimage.distance_transform_edt(inside)[inside]
    return out


def boundary_distance_accuracy(pred, gt, max_d=10):
    """Pixel accuracy bucketed by rounded distance to the nearest label change.

    2D inputs are one slice; 3D inputs are treated slice by slice.  Buckets
    with no pixels are left out.
    """
    pred, gt = _same_shape(pred, gt)
    if gt.ndim == 2:
        pred, gt = pred[None], gt[None]
    hits = np.zeros(max_d + 1, dtype=np.int64)
    totals = np.zeros(max_d + 1, dtype=np.int64)
    for p, g in zip(pred, gt):
        d = label_distance(g)
        finite = np.isfinite(d)
        bucket = np.floor(d[finite] + 0.5).astype(np.int64)
        ok = (bucket >= 1) & (bucket <= max_d)
        correct = (p == g)[finite][ok]
        bucket = bucket[ok]
        totals += np.bincount(bucket, minlength=max_d + 1)
        hits += np.bincount(bucket, weights=correct, minlength=max_d + 1).astype(np.int64)
    ds = [d for d in range(1, max_d + 1) if totals[d]]
    return StratifiedAccuracy(ds, [hits[d] / totals[d] for d in ds], [int(totals[d]) for d in ds])


def pooled_accuracy(acc: StratifiedAccuracy, lo, hi):
    """Accuracy over buckets ``lo..hi`` inclusive, pooled by pixel count."""
    n = sum(c for d, c in zip(acc.distances, acc.counts) if lo <= d <= hi)
    if n == 0:
        return float("nan")
    return sum(a * c for d, a, c in zip(acc.distances, acc.accuracy, acc.counts) if lo <= d <= hi) / n


def evaluate_case(pred, gt, spacing, structures):
    """One :class:`StructureResult` per ``{label: name}`` entry."""
    rows = []
    for c, name in structures.items():
        try:
            hd = hausdorff_3d(pred, gt, c, spacing)
        except UndefinedHausdorff:
            hd = float("nan")
        rows.append(StructureResult(name, dice_3d(pred, gt, c), hd))
    return rows
