import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from imgconf.dgp import DgpConfig, synth_image_array
from imgconf.raster import (
    DegenerateInputError,
    Kernel,
    Raster,
    convolve2d,
    convolve_batch,
    global_normalize,
    kernel_offsets,
    make_diagonal_kernel,
    max_pool_scene,
    neighborhood,
    read_raster_csv,
    read_raster_pgm,
    write_raster_csv,
    write_raster_pgm,
)

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def naive_conv(grid, weights):
    """Quadruple loop with zero padding and the same offsets as the library."""
    h, w = grid.shape
    z = weights.shape[0]
    offs = list(kernel_offsets(z))
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a, di in enumerate(offs):
                for b, dj in enumerate(offs):
                    y, x = i + di, j + dj
                    if 0 <= y < h and 0 <= x < w:
                        acc += weights[a, b] * grid[y, x]
            out[i, j] = acc
    return out


def test_diagonal_kernel_shapes():
    assert make_diagonal_kernel(1).weights.tolist() == [[1.0]]
    assert make_diagonal_kernel(3, normalize=False).weights.tolist() == np.eye(3).tolist()
    assert make_diagonal_kernel(2, normalize=False).weights.tolist() == [[1.0, 0.0], [0.0, 1.0]]
    k = make_diagonal_kernel(8)
    assert np.isclose((k.weights**2).sum(), 1.0)
    with pytest.raises(ValueError):
        make_diagonal_kernel(0)


def test_normalized_z2_response_has_unit_variance_on_white_noise():
    # i.i.d. N(0,1) pixels and unit-norm weights -> response mean 0, variance 1 away from edges
    imgs = synth_image_array(DgpConfig(image_correlation_length=0, n_scenes=50, image_height=24, image_width=24),
                             np.random.default_rng(4))[..., 0]
    out = convolve_batch(imgs, make_diagonal_kernel(2))[:, 1:-1, 1:-1]
    assert abs(out.mean()) < 0.02
    assert abs(out.var() - 1) < 0.03


def test_identity_kernel_returns_channel_mean():
    rng = np.random.default_rng(0)
    r = Raster(rng.normal(size=(5, 6, 3)))
    np.testing.assert_array_equal(convolve2d(r, Kernel(np.array([[1.0]]))), r.values.mean(axis=2))
    np.testing.assert_array_equal(convolve2d(r, Kernel(np.array([[2.5]]))), 2.5 * r.values.mean(axis=2))


def test_all_ones_diagonal_center_and_corner():
    out = convolve2d(Raster(np.ones((3, 3))), make_diagonal_kernel(3, normalize=False))
    assert out[1, 1] == 3
    assert out[0, 0] == 2
    assert out[2, 2] == 2
    assert out[0, 2] == 1


def test_even_width_neighborhood_is_clipped_to_the_image():
    nb = neighborhood(0, 0, 2, 4, 4)
    assert nb.center == (0, 0)
    assert set(nb.indices) == {(0, 0), (0, 1), (1, 0), (1, 1)}
    assert len(neighborhood(2, 2, 3, 5, 5).indices) == 9


def test_max_pool_scene():
    g = np.array([[1.0, 2.0], [3.0, 0.0]])
    assert max_pool_scene(g) == 3
    assert max_pool_scene(np.full((3, 3), 4.2)) == 4.2
    assert max_pool_scene(g, [(0, 1)]) == 2
    with pytest.raises(ValueError):
        max_pool_scene(g, [])


def test_global_normalize_examples():
    np.testing.assert_allclose(global_normalize([0.0, 2.0]), [-1.0, 1.0])
    v = global_normalize(np.random.default_rng(1).normal(size=50))
    np.testing.assert_allclose(global_normalize(v), v, atol=1e-12)
    with pytest.raises(DegenerateInputError):
        global_normalize([5.0, 5.0, 5.0])


@given(arrays(np.float64, st.integers(2, 200), elements=finite))
def test_global_normalize_moments(v):
    if np.ptp(v) < 1e-6 * max(1.0, np.abs(v).max()):
        return
    out = global_normalize(v)
    assert abs(out.mean()) < 1e-12
    assert abs(out.var() - 1) < 1e-12


@settings(max_examples=40)
@given(arrays(np.float64, (5, 5), elements=finite), st.sampled_from([1, 2, 3]), st.integers(0, 2**32 - 1))
def test_matches_naive_loop(grid, z, seed):
    weights = np.random.default_rng(seed).normal(size=(z, z))
    np.testing.assert_allclose(convolve2d(grid, Kernel(weights)), naive_conv(grid, weights), atol=1e-12, rtol=0)


@settings(max_examples=40)
@given(arrays(np.float64, (6, 7), elements=finite), arrays(np.float64, (6, 7), elements=finite), finite, finite)
def test_linearity(a, b, ca, cb):
    k = make_diagonal_kernel(3)
    lhs = convolve2d(ca * a + cb * b, k)
    rhs = ca * convolve2d(a, k) + cb * convolve2d(b, k)
    scale = 1 + np.abs(ca * a).max() + np.abs(cb * b).max()
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * scale * 3, rtol=0)


@settings(max_examples=30)
@given(arrays(np.float64, (9, 9), elements=finite), st.sampled_from([2, 3, 4]))
def test_translation_equivariance_on_interior(grid, z):
    k = Kernel(np.random.default_rng(z).normal(size=(z, z)))
    shifted = np.zeros_like(grid)
    shifted[:, 1:] = grid[:, :-1]
    a, b = convolve2d(grid, k), convolve2d(shifted, k)
    r = z // 2
    rows = slice(r, 9 - (z - 1 - r))
    # column j of the shifted output equals column j-1 of the original, once no padding tap is used
    cols = range(r + 1, 9 - (z - 1 - r))
    for j in cols:
        np.testing.assert_allclose(b[rows, j], a[rows, j - 1], atol=1e-9)


def test_kernel_larger_than_image_is_rejected():
    with pytest.raises(ValueError):
        convolve2d(np.ones((3, 3)), make_diagonal_kernel(8))


def test_csv_round_trip_is_exact(tmp_path):
    r = Raster(np.random.default_rng(2).normal(size=(4, 5, 2)))
    write_raster_csv(r, tmp_path / "r.csv")
    np.testing.assert_array_equal(read_raster_csv(tmp_path / "r.csv").values, r.values)


def test_csv_rejects_bad_header(tmp_path):
    (tmp_path / "bad.csv").write_text("1,2\n3,4\n")
    with pytest.raises(ValueError, match="header"):
        read_raster_csv(tmp_path / "bad.csv")


@pytest.mark.parametrize("maxval", [255, 65535])
def test_pgm_round_trip_within_quantization(tmp_path, maxval):
    r = Raster(np.random.default_rng(3).normal(size=(6, 7)))
    write_raster_pgm(r, tmp_path / "r.pgm", maxval)
    back = read_raster_pgm(tmp_path / "r.pgm")
    step = np.ptp(r.values) / maxval
    assert back.values.shape == (6, 7, 1)
    np.testing.assert_allclose(back.values, r.values, atol=step / 2 + 1e-12)
