import numpy as np
import pytest
from scipy.spatial.distance import cdist

from conftest import random_blob_mask
from dfm.metrics import (
    UndefinedHausdorff,
    boundary_distance_accuracy,
    dice_3d,
    evaluate_case,
    hausdorff_3d,
    label_distance,
    pooled_accuracy,
)


def brute_hausdorff(a, b, spacing):
    pa = np.argwhere(a) * np.asarray(spacing)
    pb = np.argwhere(b) * np.asarray(spacing)
    d = cdist(pa, pb)
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def vol(points, shape=(3, 4, 8)):
    v = np.zeros(shape, dtype=int)
    for p in points:
        v[p] = 1
    return v


def test_dice_fixtures():
    gt = vol([(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3)])
    assert dice_3d(gt, gt, 1) == 1.0
    assert dice_3d(vol([(1, 1, 1)]), vol([(2, 2, 2)]), 1) == 0.0
    pred = vol([(0, 0, 2), (0, 0, 3), (0, 0, 4), (0, 0, 5)])
    assert dice_3d(pred, gt, 1) == 0.5


def test_dice_empty_conventions():
    empty = np.zeros((2, 3, 3), dtype=int)
    assert dice_3d(empty, empty, 1) == 1.0
    assert dice_3d(vol([(0, 0, 0)], (2, 3, 3)), empty, 1) == 0.0
    with pytest.raises(ValueError):
        dice_3d(empty, np.zeros((2, 3, 4)), 1)


def test_hausdorff_fixtures():
    a = vol([(0, 0, 0), (1, 2, 3)])
    assert hausdorff_3d(a, a, 1) == 0.0
    assert hausdorff_3d(vol([(0, 0, 0)]), vol([(0, 0, 3)]), 1) == 3.0
    asym_a = vol([(0, 0, 0)])
    asym_b = vol([(0, 0, 0), (0, 0, 5)])
    assert hausdorff_3d(asym_a, asym_b, 1, (1, 1, 1)) == 5.0
    assert hausdorff_3d(asym_b, asym_a, 1, (1, 1, 1)) == 5.0


def test_hausdorff_undefined_for_empty_sets():
    with pytest.raises(UndefinedHausdorff, match="undefined Hausdorff"):
        hausdorff_3d(np.zeros((2, 3, 3), dtype=int), vol([(0, 0, 0)], (2, 3, 3)), 1)


@pytest.mark.parametrize("seed", range(6))
def test_hausdorff_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((4, 9, 11)) < 0.15
    b = rng.random((4, 9, 11)) < 0.15
    spacing = tuple(rng.uniform(0.5, 3.0, size=3))
    got = hausdorff_3d(a.astype(int), b.astype(int), 1, spacing)
    assert got == pytest.approx(brute_hausdorff(a, b, spacing), rel=1e-12)


@pytest.mark.parametrize("s", [0.5, 2.0, 3.7])
def test_hausdorff_scales_with_spacing(s):
    rng = np.random.default_rng(1)
    a = (rng.random((3, 8, 8)) < 0.2).astype(int)
    b = (rng.random((3, 8, 8)) < 0.2).astype(int)
    sp = (2.0, 1.25, 0.75)
    base = hausdorff_3d(a, b, 1, sp)
    assert hausdorff_3d(a, b, 1, tuple(s * x for x in sp)) == pytest.approx(s * base, rel=1e-12)


def test_symmetry_and_permutation_invariance():
    rng = np.random.default_rng(3)
    a = rng.integers(0, 3, size=(3, 7, 7))
    b = rng.integers(0, 3, size=(3, 7, 7))
    assert dice_3d(a, b, 2) == dice_3d(b, a, 2)
    assert hausdorff_3d(a, b, 2) == hausdorff_3d(b, a, 2)
    perm = rng.permutation(3)
    assert dice_3d(a[perm], b[perm], 2) == pytest.approx(dice_3d(a, b, 2))


def test_hd95_not_above_exact():
    rng = np.random.default_rng(4)
    a = (rng.random((3, 10, 10)) < 0.3).astype(int)
    b = (rng.random((3, 10, 10)) < 0.3).astype(int)
    assert hausdorff_3d(a, b, 1, percentile=95) <= hausdorff_3d(a, b, 1)


def test_stratified_block_fixture(block_mask):
    acc = boundary_distance_accuracy(np.zeros_like(block_mask), block_mask, max_d=5)
    # bucket 1: 16 correct background pixels + 8 wrong ring pixels; bucket 2: the wrong centre
    assert acc.distances == [1, 2]
    assert acc.counts == [24, 1]
    assert acc.accuracy == [pytest.approx(16 / 24), 0.0]


def test_stratified_brute_counts(block_mask):
    rng = np.random.default_rng(5)
    gt = random_blob_mask(rng, 16, 16, 3)
    pred = random_blob_mask(rng, 16, 16, 3)
    acc = boundary_distance_accuracy(pred, gt, max_d=6)
    for d, a, n in zip(acc.distances, acc.accuracy, acc.counts):
        hits = total = 0
        for r in range(16):
            for c in range(16):
                others = np.argwhere(gt != gt[r, c])
                if len(others) == 0:
                    continue
                dist = np.min(np.hypot(others[:, 0] - r, others[:, 1] - c))
                if int(np.floor(dist + 0.5)) == d:
                    total += 1
                    hits += pred[r, c] == gt[r, c]
        assert n == total and a == pytest.approx(hits / total)


def test_stratified_perfect_prediction():
    rng = np.random.default_rng(6)
    gt = random_blob_mask(rng, 20, 20, 3)
    acc = boundary_distance_accuracy(gt, gt, max_d=8)
    assert acc.distances and all(a == 1.0 for a in acc.accuracy)
    assert pooled_accuracy(acc, 1, 2) == 1.0


def test_label_distance_uniform_slice_is_inf():
    assert np.isinf(label_distance(np.zeros((3, 3), dtype=int))).all()


def test_evaluate_case_reports_missing_hd():
    gt = vol([(0, 0, 0), (0, 1, 1)])
    gt[1, 1, 1] = 2
    pred = gt.copy()
    pred[pred == 2] = 0
    rows = evaluate_case(pred, gt, (1, 1, 1), {1: "A", 2: "B"})
    assert rows[0].dice == 1.0 and rows[0].hausdorff_mm == 0.0
    assert rows[1].dice == 0.0 and np.isnan(rows[1].hausdorff_mm)
