import numpy as np
import pytest

from conftest import SPECS, central_diff, random_field, rel_err, small_camera, small_decoder
from goembed.fields import FieldParams, FieldSpec, zero_origin
from goembed.renderer import (ContractError, RenderConfig, composite, render, render_mse,
                              render_vjp, set_num_threads, views_mse)

LN2 = np.log(2.0)
BG = np.array([1.0, 1.0, 1.0])


def test_empty_space_composite():
    pix, w, tf = composite(np.zeros(5), np.full((5, 3), 0.3), np.full(5, 0.2), BG)
    np.testing.assert_array_equal(pix, BG)
    assert not w.any() and tf == 1.0


def test_single_sample_half_alpha():
    c = np.array([0.2, 0.6, 0.9])
    bg = np.array([0.1, 0.0, 1.0])
    pix, w, tf = composite(np.array([LN2]), c[None], np.array([1.0]), bg)
    np.testing.assert_allclose(pix, 0.5 * c + 0.5 * bg, atol=1e-15)
    np.testing.assert_allclose([w[0], tf], [0.5, 0.5], atol=1e-15)


def test_two_samples_iterative_oracle():
    c1, c2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    sigma, deltas = np.array([LN2, 2 * LN2]), np.array([1.0, 0.5])
    pix, w, tf = composite(sigma, np.stack([c1, c2]), deltas, BG)
    # front-to-back accumulation written out step by step
    acc, trans = np.zeros(3), 1.0
    for s, d, c in zip(sigma, deltas, (c1, c2)):
        a = 1 - np.exp(-s * d)
        acc += trans * a * c
        trans *= 1 - a
    np.testing.assert_allclose(w, [0.5, 0.25], atol=1e-15)
    np.testing.assert_allclose(pix, acc + trans * BG, atol=1e-15)
    np.testing.assert_allclose(pix, 0.5 * c1 + 0.25 * c2 + 0.25 * BG, atol=1e-15)


def test_negative_inputs_rejected():
    with pytest.raises(ContractError):
        composite(np.array([-1.0]), np.zeros((1, 3)), np.array([1.0]), BG)
    with pytest.raises(ContractError):
        composite(np.array([1.0]), np.zeros((1, 3)), np.array([-1.0]), BG)


def test_weights_partition_of_unity(rng):
    sigma = rng.exponential(2.0, (1000, 24))
    deltas = rng.uniform(0.01, 0.3, (1000, 24))
    colors = rng.uniform(0, 1, (1000, 24, 3))
    pix, w, tf = composite(sigma, colors, deltas, BG)
    np.testing.assert_allclose(w.sum(1) + tf, 1.0, atol=1e-12)
    assert np.all(w >= 0) and np.all((pix >= 0) & (pix <= 1 + 1e-12))


def test_empty_field_renders_background():
    spec = FieldSpec.voxel(4, 3)
    cam = small_camera(6)
    out = render(zero_origin(spec), small_decoder(spec), cam,
                 RenderConfig(density_bias=-1e4, background=(0.2, 0.4, 0.6)))
    np.testing.assert_allclose(out.image, np.broadcast_to([0.2, 0.4, 0.6], (6, 6, 3)),
                               atol=1e-12)


def test_opaque_limit():
    # bias the density up and make the decoder output constant (zero weights but biases)
    spec = FieldSpec.voxel(4, 3)
    dec = small_decoder(spec)
    layers = dec.network.layers(dec.params)
    for w, b in layers:
        w[...] = 0
        b[...] = 0
    c = np.array([0.8, 0.3, 0.1])
    layers[-1][1][1:] = np.log(c / (1 - c))
    cam = small_camera(16)
    cam.near, cam.far = 1.5, 3.5  # camera sits ~2.5 from the origin; rays hit the box
    out = render(zero_origin(spec), dec, cam, RenderConfig(n_samples=64, density_bias=60.0))
    centre = out.image[6:10, 6:10]
    np.testing.assert_allclose(centre, np.broadcast_to(c, centre.shape), atol=1e-3)


def _fd_check(spec, seed=0, res=4):
    p = random_field(spec, seed)
    d = small_decoder(spec)
    img = np.random.default_rng(seed + 10).uniform(0, 1, (res, res, 3))
    cam = small_camera(res, image=img)
    cfg = RenderConfig(n_samples=16)
    _, _, g, gd = render_mse(p, d, cam, cfg)
    idx = np.random.default_rng(seed).choice(spec.n_params, min(100, spec.n_params),
                                            replace=False)
    fd = central_diff(lambda x: render_mse(p.with_data(x), d, cam, cfg, need_decoder=False)[0],
                      p.data, idx)
    err = rel_err(g[idx], fd)
    if spec.kind != "mlp":
        jdx = np.random.default_rng(seed).choice(d.n_params, 60, replace=False)
        fdd = central_diff(lambda x: render_mse(p, d.with_params(x), cam, cfg)[0], d.params, jdx)
        err = np.concatenate([err, rel_err(gd[jdx], fdd)])
    return err


@pytest.mark.parametrize("kind", list(SPECS))
def test_render_mse_gradient_matches_fd(kind):
    assert _fd_check(SPECS[kind]).max() < 1e-4


def test_render_vjp_zero_and_scaling(rng):
    spec = SPECS["voxel"]
    p, d = random_field(spec), small_decoder(spec)
    cam = small_camera(4)
    cfg = RenderConfig(n_samples=8)
    g0 = render_vjp(p, d, cam, cfg, np.zeros((4, 4, 3)))
    assert not g0[0].any() and not g0[1].any()
    r = rng.normal(size=(4, 4, 3))
    g1 = render_vjp(p, d, cam, cfg, r)
    g3 = render_vjp(p, d, cam, cfg, 3 * r)
    np.testing.assert_allclose(g3[0], 3 * g1[0], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(g3[1], 3 * g1[1], rtol=1e-12, atol=1e-15)
    with pytest.raises(ContractError):
        render_vjp(p, d, cam, cfg, np.zeros((3, 4, 3)))


def test_render_vjp_consistent_with_mse_gradient(rng):
    spec = SPECS["triplane"]
    p, d = random_field(spec), small_decoder(spec)
    img = rng.uniform(0, 1, (4, 4, 3))
    cam = small_camera(4, image=img)
    cfg = RenderConfig(n_samples=8, strategy="stratified", seed=5)
    loss, pred, gp, gd = render_mse(p, d, cam, cfg)
    vp, vd = render_vjp(p, d, cam, cfg, 2 * (pred - img) / img.size)
    np.testing.assert_allclose(vp, gp, atol=1e-14)
    np.testing.assert_allclose(vd, gd, atol=1e-14)


def test_thread_count_does_not_change_results(rng):
    spec = FieldSpec.triplane(8, 4)
    p, d = random_field(spec), small_decoder(spec)
    img = rng.uniform(0, 1, (72, 72, 3))  # > 2 chunks of rays
    cam = small_camera(72, image=img)
    cfg = RenderConfig(n_samples=8, strategy="stratified", seed=3)
    outs = []
    try:
        for n in (1, 4):
            set_num_threads(n)
            outs.append(render_mse(p, d, cam, cfg))
    finally:
        set_num_threads(None)
    for a, b in zip(outs[0], outs[1]):
        assert np.array_equal(np.asarray(a), np.asarray(b))


def test_views_mse_subsampling_is_seeded(rng):
    spec = SPECS["voxel"]
    p, d = random_field(spec), small_decoder(spec)
    views = [small_camera(6, eye=e, image=rng.uniform(0, 1, (6, 6, 3)))
             for e in ((2, 0, 1), (0, 2, 1))]
    cfg = RenderConfig(n_samples=8)
    a = views_mse(p, d, views, cfg, 20, np.random.default_rng(1))
    b = views_mse(p, d, views, cfg, 20, np.random.default_rng(1))
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    full = views_mse(p, d, views, cfg)
    per_view = np.mean([render_mse(p, d, v, cfg)[0] for v in views])
    assert full[0] == pytest.approx(per_view, rel=1e-12)
