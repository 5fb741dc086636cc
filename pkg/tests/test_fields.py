import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SPECS, central_diff, random_field, rel_err, small_decoder
from goembed.fields import (DecoderHead, FieldConfigError, FieldParams, FieldSpec, decoder_for,
                            interpolate, interpolation_weights, query, query_vjp, zero_origin)


def test_zero_origin_voxel_and_triplane():
    v = zero_origin(FieldSpec.voxel(16, 4))
    assert v.data.shape == (16384,) and not v.data.any()
    t = zero_origin(FieldSpec.triplane(32, 8))
    assert t.data.shape == (24576,) and not t.data.any()


def test_zero_origin_mlp_seeded():
    spec = FieldSpec.mlp((16, 16))
    a, b = zero_origin(spec, 3), zero_origin(spec, 3)
    assert np.array_equal(a.data, b.data)
    assert np.any(a.data != 0)
    assert np.all(np.abs(a.data) <= 0.05)
    assert not np.array_equal(a.data, zero_origin(spec, 4).data)


def test_spec_validation():
    with pytest.raises(FieldConfigError):
        FieldSpec.voxel(1, 4)
    with pytest.raises(FieldConfigError):
        FieldSpec.triplane(4, 0)
    with pytest.raises(FieldConfigError):
        FieldSpec("hash", 4, 4)
    with pytest.raises(FieldConfigError):
        FieldParams(FieldSpec.voxel(2, 1), np.zeros(7))


def test_decoder_parameter_budget():
    dec = decoder_for(FieldSpec.triplane(16, 8))
    assert 10_000 <= dec.n_params <= 25_000
    assert np.all(np.isfinite(dec.params))


def test_constant_voxel_interpolation(rng):
    spec = FieldSpec.voxel(5, 3)
    v = np.array([0.3, -1.2, 2.0])
    params = FieldParams.from_grid(spec, np.broadcast_to(v, spec.grid_shape))
    pts = rng.uniform(-1, 1, (50, 3))
    np.testing.assert_allclose(interpolate(params, pts), np.broadcast_to(v, (50, 3)), atol=1e-12)


def test_voxel_midpoint_between_corners():
    spec = FieldSpec.voxel(3, 2)
    grid = np.zeros(spec.grid_shape)
    a, b = np.array([1.0, 2.0]), np.array([3.0, -4.0])
    grid[0, 1, 1], grid[1, 1, 1] = a, b
    params = FieldParams.from_grid(spec, grid)
    # grid points sit at -1, 0, 1 along each axis
    np.testing.assert_allclose(interpolate(params, np.array([[-0.5, 0.0, 0.0]]))[0], (a + b) / 2)


def test_constant_triplane_sum(rng):
    spec = FieldSpec.triplane(6, 2)
    grid = np.zeros(spec.grid_shape)
    u, v, w = np.array([1.0, 0.5]), np.array([-0.25, 2.0]), np.array([0.125, -1.0])
    grid[0], grid[1], grid[2] = u, v, w
    params = FieldParams.from_grid(spec, grid)
    pts = rng.uniform(-1, 1, (40, 3))
    np.testing.assert_allclose(interpolate(params, pts), np.broadcast_to(u + v + w, (40, 2)),
                               atol=1e-12)


def test_triplane_planes_see_right_axes():
    spec = FieldSpec.triplane(2, 1)
    grid = np.zeros(spec.grid_shape)
    grid[0, 1, 0, 0] = 1.0  # xy plane, x high, y low
    params = FieldParams.from_grid(spec, grid)
    f = interpolate(params, np.array([[1.0, -1.0, 0.3], [-1.0, -1.0, 0.3], [1.0, 1.0, 0.3]]))
    np.testing.assert_allclose(f[:, 0], [1.0, 0.0, 0.0])


@pytest.mark.parametrize("kind", ["voxel", "triplane"])
def test_weights_nonnegative_sum_to_one(kind, rng):
    spec = FieldSpec(kind, resolution=7, channels=2)
    pts = rng.uniform(-1, 1, (500, 3))
    pts[:10] = rng.choice([-1.0, 1.0], (10, 3))  # faces and corners
    _, w = interpolation_weights(spec, pts)
    assert np.all(w >= 0)
    per_point = w.sum(1) if kind == "voxel" else w.reshape(-1, 3, 4).sum(2)
    np.testing.assert_allclose(per_point, 1.0, atol=1e-12)


@pytest.mark.parametrize("kind", ["voxel", "triplane"])
def test_feature_level_linearity(kind, rng):
    spec = SPECS[kind]
    z1, z2 = random_field(spec, 1), random_field(spec, 2)
    pts = rng.uniform(-1, 1, (30, 3))
    a = 0.3
    mix = FieldParams(spec, a * z1.data + (1 - a) * z2.data)
    np.testing.assert_allclose(interpolate(mix, pts),
                               a * interpolate(z1, pts) + (1 - a) * interpolate(z2, pts),
                               atol=1e-12)


def test_out_of_bounds_is_empty(rng):
    spec = SPECS["voxel"]
    out = query(random_field(spec), small_decoder(spec), np.array([[1.5, 0, 0], [0, 0, 0]]),
                np.array([[0, 0, 1.0]] * 2))
    assert out[0, 0] == -np.inf and np.all(out[0, 1:] == 0)
    assert np.all(np.isfinite(out[1]))


def test_channel_mismatch():
    with pytest.raises(FieldConfigError):
        query(zero_origin(FieldSpec.voxel(4, 3)), DecoderHead.create(5), np.zeros((1, 3)),
              np.zeros((1, 3)))


@pytest.mark.parametrize("kind", list(SPECS))
def test_vjp_zero_and_linear(kind, rng):
    spec = SPECS[kind]
    p, d = random_field(spec), small_decoder(spec)
    pts = rng.uniform(-1, 1, (6, 3))
    dirs = rng.normal(size=(6, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    gp, gd = query_vjp(p, d, pts, dirs, np.zeros((6, 4)))
    assert not gp.any() and not gd.any()
    up = rng.normal(size=(6, 4))
    gp1, gd1 = query_vjp(p, d, pts, dirs, up)
    gp2, gd2 = query_vjp(p, d, pts, dirs, 2 * up)
    assert np.array_equal(gp2, 2 * gp1) and np.array_equal(gd2, 2 * gd1)


@pytest.mark.parametrize("kind", list(SPECS))
def test_vjp_matches_finite_differences(kind, rng):
    spec = SPECS[kind]
    p = random_field(spec, 3)
    d = small_decoder(spec) if kind == "mlp" else DecoderHead.create(spec.channels, 4, 16,
                                                                     use_dirs=True)
    pts = rng.uniform(-0.9, 0.9, (5, 3))
    dirs = rng.normal(size=(5, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    up = rng.normal(size=(5, 4))
    gp, gd = query_vjp(p, d, pts, dirs, up)

    idx = rng.choice(spec.n_params, min(60, spec.n_params), replace=False)
    fd = central_diff(lambda x: np.sum(up * query(p.with_data(x), d, pts, dirs)), p.data, idx)
    assert rel_err(gp[idx], fd).max() < 1e-4
    if kind != "mlp":
        jdx = rng.choice(d.n_params, 60, replace=False)
        fd = central_diff(lambda x: np.sum(up * query(p, d.with_params(x), pts, dirs)),
                          d.params, jdx)
        assert rel_err(gd[jdx], fd).max() < 1e-4


def test_zero_grid_fast_path_matches_general(rng):
    spec = FieldSpec.voxel(4, 3)
    d = small_decoder(spec)
    pts = rng.uniform(-1, 1, (20, 3))
    dirs = np.tile([0, 0, 1.0], (20, 1))
    up = rng.normal(size=(20, 4))
    zero = zero_origin(spec)
    tiny = FieldParams(spec, np.full(spec.n_params, 1e-300))  # disables the fast path
    np.testing.assert_allclose(query(zero, d, pts, dirs), query(tiny, d, pts, dirs), atol=1e-12)
    a, b = query_vjp(zero, d, pts, dirs, up), query_vjp(tiny, d, pts, dirs, up)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(list(SPECS)), st.integers(0, 2**31 - 1))
def test_flatten_round_trip(kind, seed):
    p = random_field(SPECS[kind], seed)
    q = FieldParams.from_grid(p.spec, p.grid())
    assert np.array_equal(p.data, q.data)
