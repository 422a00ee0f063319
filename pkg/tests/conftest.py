import numpy as np
import pytest
from scipy import ndimage


def random_blob_mask(rng, h, w, n_classes):
    """Random smooth blobs of classes 1..n_classes on background."""
    mask = np.zeros((h, w), dtype=np.int64)
    for c in range(1, n_classes + 1):
        noise = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=rng.uniform(1.0, 3.0))
        mask[noise > np.quantile(noise, rng.uniform(0.6, 0.9))] = c
    return mask


@pytest.fixture
def block_mask():
    m = np.zeros((5, 5), dtype=np.int64)
    m[1:4, 1:4] = 1
    return m


def finite_difference_grad(fn, x, index, h=1e-4):
    """Central difference of scalar ``fn`` w.r.t. one entry of the float64 tensor ``x``."""
    import torch

    with torch.no_grad():
        orig = x[index].item()
        x[index] = orig + h
        fp = fn().item()
        x[index] = orig - h
        fm = fn().item()
        x[index] = orig
    return (fp - fm) / (2 * h)


def max_relative_error(analytic, numeric, floor=1e-6):
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"{status} {key}: {detail}")
