import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_blob_mask
from dfm.direction_field import (
    NoBoundaryError,
    boundary_distance,
    brute_force_direction_field,
    compute_boundary,
    compute_direction_field,
    field_to_polar,
    read_field,
    read_mask,
    save_field_png,
    write_field,
)


def test_boundary_sets_of_block(block_mask):
    b = compute_boundary(block_mask)
    assert b.shape == (1, 5, 5)
    assert b[0].sum() == 16
    assert not b[0][1:4, 1:4].any()


def test_boundary_sets_of_split_mask():
    m = np.zeros((4, 4), dtype=int)
    m[:, :2] = 1
    m[:, 2:] = 2
    b = compute_boundary(m)
    np.testing.assert_array_equal(b[0], m == 2)
    np.testing.assert_array_equal(b[1], m == 1)
    assert b[0].sum() == b[1].sum() == 8


def test_boundary_of_empty_mask_is_all_false():
    b = compute_boundary(np.zeros((5, 5), dtype=int), num_classes=3)
    assert b.shape == (3, 5, 5) and not b.any()


def test_all_background_gives_zero_field():
    df = compute_direction_field(np.zeros((8, 8), dtype=int))
    assert df.shape == (2, 8, 8) and not df.any()


def test_single_pixel_tie_break():
    m = np.zeros((5, 5), dtype=int)
    m[2, 2] = 1
    df = compute_direction_field(m)
    # b = (1, 2) wins the four-way tie; p - b = (row +1, col 0)
    np.testing.assert_array_equal(df[:, 2, 2], [0.0, 1.0])
    np.testing.assert_array_equal(df, brute_force_direction_field(m))


def test_block_centre_tie_break(block_mask):
    df = compute_direction_field(block_mask)
    np.testing.assert_array_equal(df[:, 2, 2], [0.0, 1.0])
    assert boundary_distance(block_mask)[2, 2] == 2.0


def test_single_class_everywhere_raises():
    with pytest.raises(NoBoundaryError, match="no boundary for class 2"):
        compute_direction_field(np.full((4, 4), 2))
    with pytest.raises(NoBoundaryError):
        brute_force_direction_field(np.full((4, 4), 2))


def test_rejects_bad_masks():
    with pytest.raises(ValueError):
        compute_direction_field(np.zeros((3, 3, 3), dtype=int))
    with pytest.raises(ValueError):
        compute_direction_field(np.array([[0, -1]]))
    with pytest.raises(ValueError):
        compute_direction_field(np.array([[0, 4]]), num_classes=3)


@pytest.mark.parametrize("seed", range(20))
def test_matches_brute_force_on_random_masks(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(8, 33, size=2)
    m = random_blob_mask(rng, h, w, int(rng.integers(1, 4)))
    np.testing.assert_allclose(compute_direction_field(m), brute_force_direction_field(m), atol=1e-6, rtol=0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 3)))
def test_matches_brute_force_on_arbitrary_masks(m):
    if any((m == c).all() for c in (1, 2, 3)):
        return
    np.testing.assert_allclose(compute_direction_field(m), brute_force_direction_field(m), atol=1e-6, rtol=0)


@pytest.mark.parametrize("seed", range(10))
def test_unit_norm_and_zero_background(seed):
    rng = np.random.default_rng(100 + seed)
    m = random_blob_mask(rng, 24, 30, 3)
    df = compute_direction_field(m)
    norm = np.hypot(df[0], df[1])
    assert np.all(df[:, m == 0] == 0.0)
    assert np.all(np.abs(norm[m > 0] - 1) <= 1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_stepping_against_field_approaches_boundary(seed):
    rng = np.random.default_rng(200 + seed)
    m = random_blob_mask(rng, 20, 20, 2)
    df = compute_direction_field(m)
    for r, c in np.argwhere(m > 0):
        others = np.argwhere(m != m[r, c]).astype(float)
        here = np.min(np.hypot(others[:, 0] - r, others[:, 1] - c))
        q = np.array([r - df[1, r, c], c - df[0, r, c]])
        there = np.min(np.hypot(others[:, 0] - q[0], others[:, 1] - q[1]))
        assert here >= there - 1e-12


def test_deterministic(block_mask):
    rng = np.random.default_rng(7)
    m = random_blob_mask(rng, 32, 32, 3)
    assert compute_direction_field(m).tobytes() == compute_direction_field(m.copy()).tobytes()


@pytest.mark.parametrize(
    "vec, angle, mag",
    [((1.0, 0.0), 0.0, 1.0), ((0.0, 0.0), 0.0, 0.0), ((-1.0, 0.0), np.pi, 1.0), ((0.0, 2.0), np.pi / 2, 2.0)],
)
def test_polar(vec, angle, mag):
    df = np.array(vec).reshape(2, 1, 1)
    a, m = field_to_polar(df)
    assert a[0, 0] == pytest.approx(angle)
    assert m[0, 0] == pytest.approx(mag)


def test_field_file_round_trip(tmp_path, block_mask):
    df = compute_direction_field(block_mask)
    path = tmp_path / "f.df"
    write_field(df, path)
    raw = path.read_bytes()
    assert raw.startswith(b"DFM-DF v1 5 5\n")
    assert len(raw) == len(b"DFM-DF v1 5 5\n") + 2 * 25 * 4
    np.testing.assert_array_equal(read_field(path), df.astype(np.float32))
    # channel-major little-endian float32
    body = np.frombuffer(raw[len(b"DFM-DF v1 5 5\n"):], dtype="<f4")
    assert body[2 * 5 + 2] == df[0, 2, 2] and body[25 + 2 * 5 + 2] == df[1, 2, 2]


def test_field_file_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE 1 1\n" + b"\0" * 8)
    with pytest.raises(ValueError):
        read_field(p)
    p.write_bytes(b"DFM-DF v1 2 2\n" + b"\0" * 8)
    with pytest.raises(ValueError, match="expected 8 floats"):
        read_field(p)


def test_png_and_mask_readers(tmp_path, block_mask):
    from PIL import Image

    png = tmp_path / "m.png"
    Image.fromarray(block_mask.astype(np.uint8)).save(png)
    np.testing.assert_array_equal(read_mask(png), block_mask)
    npy = tmp_path / "m.npy"
    np.save(npy, block_mask)
    np.testing.assert_array_equal(read_mask(npy), block_mask)
    viz = tmp_path / "v.png"
    save_field_png(compute_direction_field(block_mask), viz)
    assert np.asarray(Image.open(viz)).shape[:2] == (5, 5)
