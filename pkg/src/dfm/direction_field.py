"""Ground-truth direction fields from label masks.

For a foreground pixel ``p`` of class ``c`` the boundary set is every pixel
whose label differs from ``c``.  The field is the unit vector pointing from
the nearest such pixel ``b`` to ``p``; background pixels get ``(0, 0)``.
Equidistant candidates are resolved by the smallest ``(row, col)`` of ``b``.

Arrays use channel 0 = x (column) and channel 1 = y (row).
"""
from __future__ import annotations

import math
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage


class NoBoundaryError(ValueError):
    pass


def check_mask(mask, num_classes=None):
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
        raise ValueError(f"label mask must be a non-empty 2D array, got shape {mask.shape}")
    if not np.issubdtype(mask.dtype, np.integer):
        if not np.all(np.equal(np.mod(mask, 1), 0)):
            raise ValueError("label mask must contain integer class ids")
        mask = mask.astype(np.int64)
    if mask.min() < 0:
        raise ValueError("label mask contains negative class ids")
    if num_classes is not None and mask.max() > num_classes:
        raise ValueError(f"label {int(mask.max())} outside [0, {num_classes}]")
    return mask


def compute_boundary(mask, num_classes=None):
    """Boundary sets per foreground class, shape ``(K, H, W)``.

    ``out[c - 1]`` marks every pixel whose label differs from ``c``.  Classes
    absent from the mask get an all-false map.
    """
    mask = check_mask(mask, num_classes)
    k = int(num_classes if num_classes is not None else mask.max())
    out = np.zeros((k,) + mask.shape, dtype=bool)
    for c in range(1, k + 1):
        if np.any(mask == c):
            out[c - 1] = mask != c
    return out


@lru_cache(maxsize=None)
def _circle_offsets(n):
    """Integer offsets (dr, dc) with dr**2 + dc**2 == n, lexicographically sorted."""
    r = math.isqrt(n)
    pts = []
    for dr in range(-r, r + 1):
        rest = n - dr * dr
        dc = math.isqrt(rest)
        if dc * dc == rest:
            pts.extend([(dr, -dc), (dr, dc)] if dc else [(dr, 0)])
    return np.array(pts, dtype=np.int64)


def nearest_boundary(mask, num_classes=None):
    """Nearest different-label pixel for every foreground pixel.

    Returns ``(rows, cols, sqdist)``: the ``(row, col)`` of ``b`` (``-1`` on
    background) and the integer squared distance ``|p - b|^2``.
    """
    mask = check_mask(mask, num_classes)
    h, w = mask.shape
    brow = np.full(mask.shape, -1, dtype=np.int64)
    bcol = np.full(mask.shape, -1, dtype=np.int64)
    sq = np.zeros(mask.shape, dtype=np.int64)
    for c in np.unique(mask):
        if c == 0:
            continue
        inside = mask == c
        if inside.all():
            raise NoBoundaryError(f"no boundary for class {int(c)}")
        dist = ndimage.distance_transform_edt(inside)
        pr, pc = np.nonzero(inside)
        d2 = np.rint(dist[pr, pc] ** 2).astype(np.int64)
        sq[pr, pc] = d2
        # EDT fixes |p - b|; the lattice points on that circle are scanned in
        # (row, col) order and the first different-label hit wins.
        for n in np.unique(d2):
            sel = np.nonzero(d2 == n)[0]
            r0, c0 = pr[sel], pc[sel]
            todo = np.ones(sel.size, dtype=bool)
            for dr, dc in _circle_offsets(int(n)):
                rr, cc = r0 + dr, c0 + dc
                ok = todo & (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
                idx = np.nonzero(ok)[0]
                hit = idx[mask[rr[idx], cc[idx]] != c]
                brow[r0[hit], c0[hit]] = rr[hit]
                bcol[r0[hit], c0[hit]] = cc[hit]
                todo[hit] = False
                if not todo.any():
                    break
            assert not todo.any(), "distance transform and lattice scan disagree"
    return brow, bcol, sq


def _field_from_nearest(mask, brow, bcol):
    df = np.zeros((2,) + mask.shape, dtype=np.float64)
    pr, pc = np.nonzero(mask > 0)
    dy = (pr - brow[pr, pc]).astype(np.float64)
    dx = (pc - bcol[pr, pc]).astype(np.float64)
    norm = np.hypot(dx, dy)
    df[0, pr, pc] = dx / norm
    df[1, pr, pc] = dy / norm
    return df


def compute_direction_field(mask, num_classes=None):
    """Unit vectors pointing away from the nearest boundary, shape ``(2, H, W)``."""
    mask = check_mask(mask, num_classes)
    brow, bcol, _ = nearest_boundary(mask)
    return _field_from_nearest(mask, brow, bcol)


def boundary_distance(mask, num_classes=None):
    """Euclidean distance (pixels) from each foreground pixel to its boundary set; 0 on background."""
    _, _, sq = nearest_boundary(mask, num_classes)
    return np.sqrt(sq.astype(np.float64))


def brute_force_direction_field(mask, num_classes=None):
    """Exhaustive-search version of :func:`compute_direction_field` for tests."""
    mask = check_mask(mask, num_classes)
    df = np.zeros((2,) + mask.shape, dtype=np.float64)
    for c in np.unique(mask):
        if c == 0:
            continue
        others = np.argwhere(mask != c)  # row-major, so argmin picks the lexicographic minimum
        if len(others) == 0:
            raise NoBoundaryError(f"no boundary for class {int(c)}")
        for r, col in np.argwhere(mask == c):
            d2 = (others[:, 0] - r) ** 2 + (others[:, 1] - col) ** 2
            br, bc = others[np.argmin(d2)]
            v = np.array([col - bc, r - br], dtype=np.float64)
            df[:, r, col] = v / np.linalg.norm(v)
    return df


def field_to_polar(df):
    df = np.asarray(df, dtype=np.float64)
    mag = np.hypot(df[0], df[1])
    angle = np.where(mag > 0, np.arctan2(df[1], df[0]), 0.0)
    return angle, mag


def field_to_rgb(df):
    """HSV encoding: angle to hue, magnitude (clipped to 1) to value."""
    from matplotlib.colors import hsv_to_rgb

    angle, mag = field_to_polar(df)
    hsv = np.stack(
        [(angle + np.pi) / (2 * np.pi), np.ones_like(mag), np.clip(mag, 0.0, 1.0)], axis=-1
    )
    return hsv_to_rgb(hsv)


def save_field_png(df, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.imsave(str(path), field_to_rgb(df))


FIELD_MAGIC = "DFM-DF v1"


def write_field(df, path):
    """Header line ``DFM-DF v1 H W`` then little-endian float32, channel-major."""
    df = np.asarray(df)
    if df.ndim != 3 or df.shape[0] != 2:
        raise ValueError(f"direction field must have shape (2, H, W), got {df.shape}")
    _, h, w = df.shape
    with open(path, "wb") as fh:
        fh.write(f"{FIELD_MAGIC} {h} {w}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(df, dtype="<f4").tobytes())


def read_field(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 4 or " ".join(header[:2]) != FIELD_MAGIC:
            raise ValueError(f"{path}: not a DFM-DF v1 field file")
        h, w = int(header[2]), int(header[3])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != 2 * h * w:
        raise ValueError(f"{path}: expected {2 * h * w} floats, found {data.size}")
    return data.reshape(2, h, w).astype(np.float32)


def read_mask(path):
    """Load a 2D label mask from .npy, .png or single-slice NIfTI."""
    path = Path(path)
    name = path.name.lower()
    if name.endswith(".npy"):
        arr = np.load(path)
    elif name.endswith((".nii", ".nii.gz")):
        import nibabel as nib

        arr = np.squeeze(np.asarray(nib.load(str(path)).dataobj))
        if arr.ndim == 2:
            arr = arr.T  # NIfTI stores (x, y)
    else:
        from PIL import Image

        arr = np.asarray(Image.open(path))
        if arr.ndim == 3:
            arr = arr[..., 0]
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a 2D mask, got shape {arr.shape}")
    return check_mask(np.rint(arr).astype(np.int64))
