import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gmmtrans.errors import ConfigError, ContractViolation
from gmmtrans.patches import coverage, extract, make_grid, sample_random_patches, stitch


def test_single_valid_anchor():
    image = np.random.default_rng(0).random((32, 32))
    out = sample_random_patches(image, 5, 32, np.random.default_rng(1))
    assert [a for _, a in out] == [(0, 0)] * 5
    assert np.array_equal(out[0][0], image)


def test_random_patches_reproducible_and_in_bounds():
    image = np.zeros((512, 512))
    a = sample_random_patches(image, 200, 32, np.random.default_rng(7))
    b = sample_random_patches(image, 200, 32, np.random.default_rng(7))
    assert [x for _, x in a] == [x for _, x in b]
    anchors = np.array([x for _, x in a])
    assert anchors.min() >= 0 and anchors.max() <= 480


def test_random_patches_cover_all_positions_uniformly():
    image = np.zeros((36, 36))
    anchors = np.array([a for _, a in sample_random_patches(image, 25_000, 32, np.random.default_rng(3))])
    counts = np.bincount(anchors[:, 0], minlength=5)
    assert counts.size == 5 and np.all(np.abs(counts / counts.sum() - 0.2) < 0.02)


def test_random_patches_match_image_content():
    image = np.arange(40 * 50, dtype=float).reshape(40, 50)
    for patch, (r, c) in sample_random_patches(image, 10, 8, np.random.default_rng(0)):
        assert np.array_equal(patch, image[r:r + 8, c:c + 8])


def test_random_patch_errors():
    with pytest.raises(ContractViolation):
        sample_random_patches(np.zeros((16, 40)), 1, 32, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_random_patches(np.zeros((40, 40)), 0, 32, np.random.default_rng(0))


@pytest.mark.parametrize("size,stride,expected", [
    (64, 32, [0, 32]),
    (64, 16, [0, 16, 32]),
    (50, 32, [0, 18]),
])
def test_grid_anchor_examples(size, stride, expected):
    grid = make_grid(size, size, 32, stride)
    assert grid.coords == [(r, c) for r in expected for c in expected]


@pytest.mark.parametrize("stride", [0, 33, -4])
def test_grid_rejects_bad_stride(stride):
    with pytest.raises(ConfigError):
        make_grid(64, 64, 32, stride)


def test_grid_rejects_small_image():
    with pytest.raises(ContractViolation):
        make_grid(20, 64, 32, 16)


@settings(max_examples=60, deadline=None)
@given(st.integers(8, 90), st.integers(8, 90), st.integers(1, 8), st.data())
def test_grid_invariants(h, w, p, data):
    P = 4 * p if 4 * p <= min(h, w) else min(h, w)
    stride = data.draw(st.integers(1, P))
    grid = make_grid(h, w, P, stride)
    assert len(set(grid.coords)) == len(grid.coords)
    assert grid.coords == sorted(grid.coords)
    assert all(r + P <= h and c + P <= w for r, c in grid.coords)
    cov = coverage(grid)
    assert cov.min() >= grid.blend_window.min() > 0


def test_round_trip_identity_randomized():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        P = int(rng.choice([4, 8, 16, 32]))
        h, w = int(rng.integers(P, 3 * P + 20)), int(rng.integers(P, 3 * P + 20))
        stride = int(rng.integers(1, P + 1))
        image = rng.random((h, w))
        grid = make_grid(h, w, P, stride)
        assert np.max(np.abs(stitch(extract(image, grid), grid) - image)) <= 1e-6


def test_constant_patches_give_constant_image():
    grid = make_grid(70, 45, 16, 7)
    out = stitch(np.full((len(grid), 16, 16), 0.37), grid)
    assert np.allclose(out, 0.37, atol=1e-12)


def test_stitch_is_convex_combination():
    rng = np.random.default_rng(5)
    grid = make_grid(40, 40, 16, 5)
    patches = rng.uniform(0.2, 0.6, size=(len(grid), 16, 16))
    out = stitch(patches, grid)
    assert out.min() >= 0.2 - 1e-12 and out.max() <= 0.6 + 1e-12


def test_half_overlap_ramp():
    grid = make_grid(8, 12, 8, 4)
    assert grid.coords == [(0, 0), (0, 4)]
    out = stitch(np.stack([np.zeros((8, 8)), np.ones((8, 8))]), grid)

    def hann(i):
        return 0.5 - 0.5 * math.cos(2 * math.pi * (i + 0.5) / 8) + 1e-3

    for col in (4, 5, 7):
        expected = hann(col - 4) / (hann(col) + hann(col - 4))
        assert out[3, col] == pytest.approx(expected, abs=1e-12)
    strip = out[0, 4:8]
    assert np.all(np.diff(strip) > 0)
    assert np.all(out[:, :4] == 0.0) and np.all(out[:, 8:] == 1.0)


def test_stitch_count_mismatch():
    grid = make_grid(64, 64, 32, 32)
    with pytest.raises(ContractViolation):
        stitch(np.zeros((3, 32, 32)), grid)
