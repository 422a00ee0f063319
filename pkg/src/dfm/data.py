"""Volumes, slices, augmentation and synthetic cardiac phantoms."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.transform import resize

from .direction_field import check_mask, compute_direction_field
from .losses import class_balance_weights

ACDC_FRAME = re.compile(r"^(patient\d+)_frame(\d+)\.nii(\.gz)?$")
MANIFEST = "manifest.tsv"
DEFAULT_SIZE = 256


@dataclass
class VolumeSample:
    image: np.ndarray  # (D, H, W) float
    label: np.ndarray | None  # (D, H, W) int
    spacing: tuple  # (sz, sy, sx) in mm
    case_id: str

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"{self.case_id}: image must be 3D, got {self.image.shape}")
        if self.label is not None and self.label.shape != self.image.shape:
            raise ValueError(f"{self.case_id}: label shape {self.label.shape} != image {self.image.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"{self.case_id}: spacing must be three positive values, got {self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)


@dataclass
class SliceSample:
    image: np.ndarray  # (1, S, S) float32
    label: np.ndarray | None  # (S, S) int64
    df_gt: np.ndarray | None  # (2, S, S) float32
    weight: np.ndarray | None  # (S, S) float32
    case_id: str
    index: int
    spacing: tuple = (1.0, 1.0, 1.0)  # spacing of the resized grid

    @property
    def provenance(self):
        return self.case_id, self.index


def zscore(img):
    img = np.asarray(img, dtype=np.float64)
    sd = img.std()
    if sd < 1e-8:
        return np.zeros_like(img, dtype=np.float32)
    return ((img - img.mean()) / sd).astype(np.float32)


def make_slice(image, label, case_id, index, spacing=(1.0, 1.0, 1.0), num_classes=None):
    """Wrap a normalised 2D image and label, deriving the field target and weights."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    df = weight = None
    if label is not None:
        label = check_mask(label, num_classes)
        df = compute_direction_field(label).astype(np.float32)
        weight = class_balance_weights(label).astype(np.float32)
    return SliceSample(image, label, df, weight, case_id, index, tuple(spacing))


# -- NIfTI -------------------------------------------------------------------

def read_nifti(path):
    """Returns ``(array (D, H, W), spacing (sz, sy, sx))``."""
    import nibabel as nib

    try:
        img = nib.load(str(path))
        arr = np.asarray(img.dataobj)
    except Exception as exc:  # nibabel raises a zoo of types
        raise ValueError(f"cannot read NIfTI file {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"{path}: expected a 3D volume, got shape {arr.shape}")
    sx, sy, sz = (float(z) for z in img.header.get_zooms()[:3])
    return np.transpose(arr, (2, 1, 0)), (sz, sy, sx)


def write_nifti(arr, path, spacing=(1.0, 1.0, 1.0)):
    import nibabel as nib

    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[None]
    sz, sy, sx = spacing
    data = np.transpose(arr, (2, 1, 0))
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.int16)
    else:
        data = data.astype(np.float32)
    nib.save(nib.Nifti1Image(data, np.diag([sx, sy, sz, 1.0])), str(path))


def _read_label(path, num_classes):
    arr, spacing = read_nifti(path)
    lab = np.rint(arr).astype(np.int64)
    bad = np.setdiff1d(np.unique(lab), np.arange(num_classes + 1))
    if bad.size:
        raise ValueError(f"{path}: label values {bad.tolist()} outside {{0..{num_classes}}}")
    return lab, spacing


def load_acdc_case(dir_path, num_classes=3):
    """All annotated-or-not frames of one ACDC patient directory."""
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise FileNotFoundError(f"case directory not found: {dir_path}")
    out = []
    for f in sorted(dir_path.iterdir()):
        m = ACDC_FRAME.match(f.name)
        if not m:
            continue
        image, spacing = read_nifti(f)
        gt = f.with_name(f.name.replace(".nii", "_gt.nii", 1))
        label = None
        if gt.exists():
            label, _ = _read_label(gt, num_classes)
            if label.shape != image.shape:
                raise ValueError(f"{gt}: shape {label.shape} does not match image {image.shape}")
        out.append(VolumeSample(image.astype(np.float32), label, spacing, f"{m.group(1)}_frame{m.group(2)}"))
    if not out:
        raise FileNotFoundError(f"no patientXXX_frameYY.nii[.gz] files in {dir_path}")
    return out


def load_acdc_root(root, num_classes=3):
    """``{patient_id: [VolumeSample, ...]}`` for every patient directory under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    cases = {}
    for d in sorted(root.iterdir()):
        if d.is_dir() and d.name.startswith("patient"):
            cases[d.name] = load_acdc_case(d, num_classes)
    if not cases:
        raise FileNotFoundError(f"no patient directories under {root}")
    return cases


def fold_split(groups, fold, num_folds=5):
    """Patient-level split: every ``num_folds``-th sorted group goes to validation."""
    if not 0 <= fold < num_folds:
        raise ValueError(f"fold {fold} outside [0, {num_folds})")
    groups = sorted(groups)
    val = [g for i, g in enumerate(groups) if i % num_folds == fold]
    train = [g for i, g in enumerate(groups) if i % num_folds != fold]
    return train, val


# -- preprocessing -----------------------------------------------------------

def resize_slice(image, label, size):
    if image.shape == (size, size):
        return np.asarray(image, dtype=np.float64), None if label is None else np.asarray(label, dtype=np.int64)
    img = resize(image, (size, size), order=1, mode="edge", anti_aliasing=False, preserve_range=True)
    lab = None
    if label is not None:
        lab = resize(label, (size, size), order=0, mode="edge", anti_aliasing=False, preserve_range=True)
        lab = np.rint(lab).astype(np.int64)
    return img, lab


def slice_and_preprocess(v: VolumeSample, size=DEFAULT_SIZE, num_classes=None):
    d, h, w = v.image.shape
    sz, sy, sx = v.spacing
    spacing = (sz, sy * h / size, sx * w / size)
    out = []
    for i in range(d):
        lab = None if v.label is None else v.label[i]
        img, lab = resize_slice(v.image[i], lab, size)
        out.append(make_slice(zscore(img), lab, v.case_id, i, spacing, num_classes))
    return out


def augment(s: SliceSample, rng, max_shift=0.125, max_angle=180.0):
    """Random rigid motion; the field target and weights are recomputed from the moved label."""
    _, h, w = s.image.shape
    ty = rng.uniform(-max_shift, max_shift) * h
    tx = rng.uniform(-max_shift, max_shift) * w
    theta = np.deg2rad(rng.uniform(-max_angle, max_angle))
    return rigid_transform(s, theta, (ty, tx))


def rigid_transform(s: SliceSample, theta, shift):
    """Rotate by ``theta`` radians about the centre, then shift by ``(dy, dx)`` pixels."""
    _, h, w = s.image.shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    cos, sin = np.cos(theta), np.sin(theta)
    inv = np.array([[cos, sin], [-sin, cos]])  # rotation by -theta in (row, col)
    offset = c - inv @ (c + np.asarray(shift, dtype=np.float64))
    img = ndimage.affine_transform(s.image[0], inv, offset, order=1, mode="constant", cval=0.0)
    lab = None
    if s.label is not None:
        lab = ndimage.affine_transform(s.label, inv, offset, order=0, mode="constant", cval=0)
    return make_slice(img, lab, s.case_id, s.index, s.spacing)


# -- synthetic phantoms ------------------------------------------------------

def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    cos, sin = np.cos(theta), np.sin(theta)
    u = (xx - cx) * cos + (yy - cy) * sin
    v = -(xx - cx) * sin + (yy - cy) * cos
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


_LV, _MYO, _RV = 3, 2, 1
_CROSS = ndimage.generate_binary_structure(2, 1)


def _phantom_ok(label, margin):
    if label[:margin].any() or label[-margin:].any() or label[:, :margin].any() or label[:, -margin:].any():
        return False
    if any((label == c).sum() < 20 for c in (1, 2, 3)):
        return False
    lv = label == _LV
    # MYO must fully enclose LV
    return not np.any(ndimage.binary_dilation(lv, _CROSS) & ~np.isin(label, (_LV, _MYO)))


def synth_phantom(rng, size=DEFAULT_SIZE):
    """Raw ``(image, label)`` pair: LV ellipse, MYO annulus, RV crescent."""
    s = float(size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    while True:
        cy, cx = s / 2 + rng.uniform(-0.08, 0.08, size=2) * s
        rx = rng.uniform(0.09, 0.14) * s
        ry = rx * rng.uniform(0.75, 1.0)
        theta = rng.uniform(0, np.pi)
        t = rng.uniform(0.05, 0.075) * s
        lv = _ellipse(yy, xx, cy, cx, ry, rx, theta)
        outer = _ellipse(yy, xx, cy, cx, ry + t, rx + t, theta)

        phi = rng.uniform(0, 2 * np.pi)
        r_long = rng.uniform(0.16, 0.22) * s
        r_short = rng.uniform(0.08, 0.11) * s
        dist = (rx + ry) / 2 + t + 0.3 * r_short
        ry_c, rx_c = cy + dist * np.sin(phi), cx + dist * np.cos(phi)
        rv = _ellipse(yy, xx, ry_c, rx_c, r_long, r_short, phi) & ~outer

        label = np.zeros((size, size), dtype=np.int64)
        label[rv] = _RV
        label[outer & ~lv] = _MYO
        label[lv] = _LV
        if _phantom_ok(label, max(2, size // 32)):
            break

    # surrounding tissue sits close to myocardium, so the epicardial edge is faint
    myo = rng.uniform(0.3, 0.4)
    levels = {0: myo - rng.uniform(0.06, 0.12), _RV: rng.uniform(0.7, 0.85), _MYO: myo, _LV: rng.uniform(0.8, 0.95)}
    img = np.vectorize(levels.get, otypes=[np.float64])(label)
    # papillary muscles: myocardium-bright spots inside the cavity, labelled LV
    inner = np.argwhere(lv & ~ndimage.binary_erosion(lv, _CROSS, iterations=max(1, size // 32)))
    for _ in range(rng.integers(1, 4)):
        py, px = inner[rng.integers(len(inner))]
        pr = rng.uniform(0.015, 0.03) * s
        img[((yy - py) ** 2 + (xx - px) ** 2 <= pr**2) & lv] = myo
    # background clutter of blood-pool-like brightness
    for _ in range(rng.integers(1, 4)):
        by, bx = rng.uniform(0.1, 0.9, size=2) * s
        br = rng.uniform(0.03, 0.07) * s
        blob = ((yy - by) ** 2 + (xx - bx) ** 2 <= br**2) & (label == 0)
        if not ndimage.binary_dilation(label > 0, _CROSS, iterations=2)[blob].any():
            img[blob] = rng.uniform(0.5, 0.8)
    gy, gx = rng.uniform(-0.15, 0.15, size=2)
    img = img + gy * (yy / s - 0.5) + gx * (xx / s - 0.5)
    img = ndimage.gaussian_filter(img, sigma=0.6 * s / 64)
    img = img + rng.normal(0.0, rng.uniform(0.03, 0.07), size=img.shape)
    return img.astype(np.float32), label


def synth_sample(rng, size=DEFAULT_SIZE, case_id="synth", index=0):
    img, label = synth_phantom(rng, size)
    return make_slice(zscore(img), label, case_id, index)


def sample_seed(seed, i):
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def synth_volumes(count, seed=0, size=DEFAULT_SIZE):
    """Single-slice synthetic cases, reproducible per index."""
    out = []
    for i in range(count):
        img, label = synth_phantom(np.random.default_rng(sample_seed(seed, i)), size)
        out.append(VolumeSample(img[None], label[None], (8.0, 1.0, 1.0), f"synth_{i:04d}"))
    return out


def write_synth_dataset(out_dir, count, seed=0, size=DEFAULT_SIZE):
    """NIfTI image/label pairs plus a manifest of ``id, path, seed`` lines."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, v in enumerate(synth_volumes(count, seed, size)):
        img_path = out_dir / f"{v.case_id}.nii.gz"
        write_nifti(v.image, img_path, v.spacing)
        write_nifti(v.label, out_dir / f"{v.case_id}_gt.nii.gz", v.spacing)
        lines.append(f"{v.case_id}\t{img_path.name}\t{sample_seed(seed, i)}")
    (out_dir / MANIFEST).write_text("\n".join(lines) + "\n")
    return out_dir / MANIFEST


def load_manifest_dir(dir_path, num_classes=3):
    dir_path = Path(dir_path)
    out = []
    for line in (dir_path / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        case_id, name, _ = line.split("\t")
        image, spacing = read_nifti(dir_path / name)
        gt = dir_path / name.replace(".nii", "_gt.nii", 1)
        label = _read_label(gt, num_classes)[0] if gt.exists() else None
        out.append(VolumeSample(image.astype(np.float32), label, spacing, case_id))
    return out

