import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jdmhdr import grid as G
from jdmhdr import tensor as T
from jdmhdr.errors import ShapeError


def random_guide(rng):
    return G.GuideParams(np.eye(3) + rng.normal(scale=0.2, size=(3, 3)), rng.normal(scale=0.05, size=3),
                         np.abs(rng.normal(scale=0.5, size=(3, 16))), rng.uniform(0, 0.6, size=3))


def test_guidance_identity_gray():
    g = G.guidance_map(np.full((2, 3, 3), 0.5), G.GuideParams.identity())
    np.testing.assert_allclose(g, 0.5, atol=1e-15)


def test_guidance_zero_mixer(rng):
    p = G.GuideParams.identity()
    p = G.GuideParams(p.ccm, p.bias, p.slopes, np.zeros(3))
    np.testing.assert_array_equal(G.guidance_map(rng.uniform(size=(4, 4, 3)), p), 0.0)


def test_guidance_matches_scalar_oracle(rng):
    p = random_guide(rng)
    img = rng.uniform(size=(5, 6, 3))
    g = G.guidance_map(img, p)
    for i in range(5):
        for j in range(6):
            total = 0.0
            for c in range(3):
                x = sum(p.ccm[c, k] * img[i, j, k] for k in range(3)) + p.bias[c]
                curve = sum(p.slopes[c, n] * max(x - n / 16, 0.0) for n in range(16))
                total += p.mixer[c] * curve
            assert abs(g[i, j] - min(max(total, 0.0), 1.0)) < 1e-12
    t = G.guidance_map_t(T.Tensor(img.transpose(2, 0, 1)[None]), *(T.Tensor(v) for v in
                         (p.ccm, p.bias, p.slopes, p.mixer)))
    np.testing.assert_allclose(t.data[0], g, atol=1e-12)


def test_guidance_gradients(rng):
    p = random_guide(rng)
    tensors = [T.Tensor(rng.uniform(0.1, 0.9, size=(1, 3, 4, 5)))] + [
        T.Tensor(v) for v in (p.ccm, p.bias, p.slopes, p.mixer)]
    wts = T.Tensor(rng.normal(size=(1, 4, 5)))
    assert T.grad_check(lambda *a: (G.guidance_map_t(*a) * wts).sum(), tensors) < 1e-4


def test_slice_constant_grid(rng):
    cell = rng.normal(size=12)
    grid = G.BilateralGrid(np.broadcast_to(cell, (4, 3, 8, 12)).copy())
    g = rng.uniform(size=(9, 11))
    np.testing.assert_array_equal(G.slice_grid(grid, g), np.broadcast_to(cell, (9, 11, 12)))
    np.testing.assert_allclose(G.slice_oracle_dense(grid, g), np.broadcast_to(cell, (9, 11, 12)),
                               atol=1e-12)


def test_slice_at_cell_centres_is_exact(rng):
    gh, gw, d = 4, 5, 8
    grid = G.BilateralGrid(rng.normal(size=(gh, gw, d, 12)))
    k = rng.integers(0, d, size=(gh, gw))
    g = (2 * k + 1) / (2 * d)
    out = G.slice_grid(grid, g)
    for i in range(gh):
        for j in range(gw):
            np.testing.assert_array_equal(out[i, j], grid.coeffs[i, j, k[i, j]])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 6), st.integers(1, 6), st.integers(1, 8),
       st.integers(1, 13), st.integers(1, 13))
def test_slice_matches_dense_oracle(seed, gh, gw, d, h, w):
    rng = np.random.default_rng(seed)
    grid = G.BilateralGrid(rng.normal(size=(gh, gw, d, 12)))
    g = rng.uniform(-0.2, 1.2, size=(h, w))
    assert np.abs(G.slice_grid(grid, g) - G.slice_oracle_dense(grid, g)).max() <= 1e-10


def test_slice_linear_in_x_grid():
    gh, gw, d = 3, 6, 8
    xs = np.arange(gw, dtype=float)
    coeffs = np.broadcast_to((2.0 * xs - 1.0)[None, :, None, None], (gh, gw, d, 12)).copy()
    grid = G.BilateralGrid(coeffs)
    w = 23
    out = G.slice_oracle_dense(grid, np.full((5, w), 0.5))[:, :, 0]
    x = (np.arange(w) + 0.5) * gw / w - 0.5
    inside = (x >= 0) & (x <= gw - 1)
    np.testing.assert_allclose(out[:, inside], np.broadcast_to(2 * x[inside] - 1, (5, inside.sum())),
                               atol=1e-9)
    np.testing.assert_allclose(G.slice_grid(grid, np.full((5, w), 0.5))[:, :, 0], out, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-3, 3), st.floats(-3, 3))
def test_slice_linear_in_grid(seed, a, b):
    rng = np.random.default_rng(seed)
    g1, g2 = rng.normal(size=(2, 4, 4, 8, 12))
    gmap = rng.uniform(size=(10, 9))
    lhs = G.slice_grid(G.BilateralGrid(a * g1 + b * g2), gmap)
    rhs = a * G.slice_grid(G.BilateralGrid(g1), gmap) + b * G.slice_grid(G.BilateralGrid(g2), gmap)
    assert np.abs(lhs - rhs).max() <= 1e-10


def test_apply_affine_examples(rng):
    img = rng.uniform(size=(6, 7, 3))
    ident = np.broadcast_to(G.IDENTITY_AFFINE, (6, 7, 12)).copy()
    np.testing.assert_array_equal(G.apply_affine(img, ident), img)
    const = np.zeros((6, 7, 12))
    const[..., 3], const[..., 7], const[..., 11] = 0.2, 0.4, 0.6
    np.testing.assert_array_equal(G.apply_affine(img, const), np.broadcast_to([0.2, 0.4, 0.6], img.shape))
    coeffs = rng.normal(size=(6, 7, 12))
    out = G.apply_affine(img, coeffs)
    for i in range(6):
        for j in range(7):
            for c in range(3):
                expected = sum(coeffs[i, j, 4 * c + k] * img[i, j, k] for k in range(3)) + coeffs[i, j, 4 * c + 3]
                assert abs(out[i, j, c] - expected) < 1e-12
    with pytest.raises(ShapeError):
        G.apply_affine(img, coeffs[:5])


def test_identity_grid_apply_is_bit_exact(rng):
    img = rng.uniform(size=(33, 29, 3))
    coeffs = G.slice_grid(G.BilateralGrid.identity(), rng.uniform(size=(33, 29)))
    np.testing.assert_array_equal(G.apply_affine(img, coeffs), img)


def test_differentiable_slice_and_apply(rng):
    grid = T.Tensor(rng.normal(size=(2, 3, 4, 5, 12)))
    g = T.Tensor(rng.uniform(0.05, 0.95, size=(2, 6, 7)))
    img = T.Tensor(rng.uniform(size=(2, 3, 6, 7)))
    ref = np.stack([G.apply_affine(img.data[b].transpose(1, 2, 0),
                                   G.slice_grid(G.BilateralGrid(grid.data[b]), g.data[b])) for b in range(2)])
    out = G.apply_affine_t(img, G.slice_grid_t(grid, g))
    np.testing.assert_allclose(out.data.transpose(0, 2, 3, 1), ref, atol=1e-12)
    wts = T.Tensor(rng.normal(size=(2, 3, 6, 7)))
    err = T.grad_check(lambda a, b, c: (G.apply_affine_t(c, G.slice_grid_t(a, b)) * wts).sum(),
                       [grid, g, img])
    assert err < 1e-4


def test_serialized_layout(rng):
    grid = G.BilateralGrid(rng.normal(size=(16, 16, 8, 12)))
    ser = grid.serialized()
    assert ser.shape == (12, 8, 16, 16)
    assert ser[5, 3, 2, 9] == grid.coeffs[2, 9, 3, 5]
    np.testing.assert_array_equal(G.BilateralGrid.from_serialized(ser).coeffs, grid.coeffs)


def test_slice_apply_benchmark(rng):
    grid = G.BilateralGrid(rng.normal(size=(16, 16, 8, 12)))
    g = rng.uniform(size=(1057, 960))
    img = rng.uniform(size=(1057, 960, 3))
    best = np.inf
    for _ in range(3):
        t0 = time.perf_counter()
        G.apply_affine(img, G.slice_grid(grid, g))
        best = min(best, time.perf_counter() - t0)
    print(f"slice+apply 1057x960: {best:.3f} s")
    assert best < 1.0
