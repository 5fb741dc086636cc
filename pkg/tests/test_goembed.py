import numpy as np
import pytest

from conftest import SPECS, central_diff, rel_err, small_camera, small_decoder
from goembed.embedding import (GOEmbedConfig, goembed_encode, goembed_loss, goembed_loss_grad,
                               origin_gradient, scale_embedding)
from goembed.fields import FieldParams, FieldSpec, zero_origin
from goembed.renderer import ContractError, RenderConfig, render, render_mse

RAW = GOEmbedConfig(scale_mode="none", render=RenderConfig(n_samples=16))


def views_for(spec, rng, n=2, res=4):
    eyes = [(2.2, 0.4, 1.0), (-0.5, 2.3, 0.8), (0.3, -2.1, 1.4)]
    return [small_camera(res, eye=eyes[i], image=rng.uniform(0, 1, (res, res, 3)))
            for i in range(n)]


@pytest.mark.parametrize("kind", list(SPECS))
def test_zero_residual_gives_zero_embedding(kind, rng):
    spec = SPECS[kind]
    dec = small_decoder(spec)
    views = [v.with_image(render(zero_origin(spec), dec, v, RAW.render).image)
             for v in views_for(spec, rng)]
    emb = goembed_encode(spec, dec, views, RAW)
    assert not emb.data.any()


@pytest.mark.parametrize("kind", list(SPECS))
def test_embedding_is_negative_fd_gradient(kind, rng):
    spec = SPECS[kind]
    dec = small_decoder(spec)
    (view,) = views_for(spec, rng, 1)
    emb = goembed_encode(spec, dec, [view], RAW, seed=0)
    origin = zero_origin(spec, 0)
    idx = rng.choice(spec.n_params, min(100, spec.n_params), replace=False)
    fd = central_diff(lambda x: render_mse(origin.with_data(x), dec, view, RAW.render,
                                           need_decoder=False)[0], origin.data, idx)
    assert rel_err(emb.data[idx], -fd).max() < 1e-4
    assert emb.spec == spec and emb.data.shape == (spec.n_params,)


def test_two_identical_views_double_exactly(rng):
    spec = SPECS["voxel"]
    dec = small_decoder(spec)
    (view,) = views_for(spec, rng, 1)
    one = goembed_encode(spec, dec, [view], RAW)
    two = goembed_encode(spec, dec, [view, view], RAW)
    assert np.array_equal(two.data, 2 * one.data)
    mean = goembed_encode(spec, dec, [view, view], GOEmbedConfig("none", aggregate="mean",
                                                                 render=RAW.render))
    assert np.array_equal(mean.data, one.data)


def test_linear_in_residual(rng):
    spec = SPECS["triplane"]
    dec = small_decoder(spec)
    views = views_for(spec, rng, 2)
    base = [render(zero_origin(spec), dec, v, RAW.render).image for v in views]
    r1 = [rng.normal(0, 0.1, b.shape) for b in base]
    r2 = [rng.normal(0, 0.1, b.shape) for b in base]

    def enc(res):
        return -sum(origin_gradient(spec, dec, views, RAW.render,
                                    images=[b + r for b, r in zip(base, res)]))

    both = enc([a + b for a, b in zip(r1, r2)])
    np.testing.assert_allclose(both, enc(r1) + enc(r2), atol=1e-9)


@pytest.mark.parametrize("kind", list(SPECS))
def test_descent_direction(kind, rng):
    spec = SPECS[kind]
    dec = small_decoder(spec)
    views = views_for(spec, rng, 2)
    emb = goembed_encode(spec, dec, views, RAW)
    origin = zero_origin(spec)

    def loss(p):
        return sum(render_mse(p, dec, v, RAW.render, need_decoder=False)[0] for v in views)

    l0 = loss(origin)
    eta = 1.0
    while eta > 1e-12 and loss(origin.with_data(origin.data + eta * emb.data)) >= l0:
        eta /= 2
    assert loss(origin.with_data(origin.data + eta * emb.data)) < l0


def test_contract_errors(rng):
    spec = SPECS["voxel"]
    dec = small_decoder(spec)
    with pytest.raises(ContractError):
        goembed_encode(spec, dec, [], RAW)
    a = small_camera(4, image=rng.uniform(0, 1, (4, 4, 3)))
    b = small_camera(5, image=rng.uniform(0, 1, (5, 5, 3)))
    with pytest.raises(ContractError):
        goembed_encode(spec, dec, [a, b], RAW)


def test_scale_modes(rng):
    spec = FieldSpec.voxel(2, 1)
    x = FieldParams(spec, rng.normal(size=8))
    assert scale_embedding(x, "none") is x
    s = scale_embedding(x, "per_tensor_std")
    assert abs(np.std(s.data) - 1.0) < 1e-9
    const = FieldParams(spec, np.full(8, 0.5))
    assert np.array_equal(scale_embedding(const, "per_tensor_std").data, const.data)
    g = scale_embedding(FieldParams(FieldSpec.voxel(2, 1), [0.001, -0.002, 0, 0, 0, 0, 0, 0]),
                        "fixed_gain", 100.0)
    np.testing.assert_allclose(g.data[:2], [0.1, -0.2], atol=1e-15)
    with pytest.raises(ValueError):
        GOEmbedConfig(scale_mode="fixed_gain", gain=0.0)


def test_loss_with_targets_equal_context(rng):
    spec = SPECS["voxel"]
    dec = small_decoder(spec)
    views = views_for(spec, rng, 2)
    cfg = GOEmbedConfig(render=RAW.render)
    emb = goembed_encode(spec, dec, views, cfg)
    ctx_term = np.mean([render_mse(emb, dec, v, cfg.render)[0] for v in views])
    total = goembed_loss(dec, spec, views, views, cfg)
    assert total >= 0
    assert total == pytest.approx(2 * ctx_term, rel=1e-12)


def test_loss_gradient_treats_embedding_as_constant(rng):
    spec = SPECS["triplane"]
    dec = small_decoder(spec)
    ctx, trg = views_for(spec, rng, 3)[:2], views_for(spec, rng, 3)[2:]
    cfg = GOEmbedConfig(render=RAW.render)
    loss, grad, emb = goembed_loss_grad(dec, spec, ctx, trg, cfg)
    idx = rng.choice(dec.n_params, 40, replace=False)

    def frozen(w):
        d = dec.with_params(w)
        return sum(np.mean([render_mse(emb, d, v, cfg.render)[0] for v in vs])
                   for vs in (ctx, trg))

    assert frozen(dec.params) == pytest.approx(loss, rel=1e-12)
    assert rel_err(grad[idx], central_diff(frozen, dec.params, idx)).max() < 1e-4
