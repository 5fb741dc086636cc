"""Differentiable emission-absorption raymarching with a hand-written VJP.

Rays are processed in fixed-size chunks. Chunk boundaries do not depend on
the worker count and per-chunk gradients are reduced in chunk order, so the
results are bitwise identical for any number of threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._nn import sigmoid, softplus
from .fields import FieldEval, inside_bounds
from .geometry import generate_rays, sample_t

CHUNK_RAYS = 2048

_num_threads = None


def set_num_threads(n):
    """Worker threads used for chunked rendering (``None`` = env/default)."""
    global _num_threads
    if n is not None and int(n) < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = None if n is None else int(n)


def get_num_threads():
    if _num_threads is not None:
        return _num_threads
    return max(1, int(os.environ.get("GOEMBED_THREADS", "1")))


class ContractError(ValueError):
    pass


@dataclass
class RenderConfig:
    n_samples: int = 32
    strategy: str = "midpoint"
    background: tuple = (1.0, 1.0, 1.0)
    density_bias: float = -2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.shape != (3,) or not np.all(np.isfinite(bg)):
            raise ValueError("background must be a finite RGB triple")
        self.background = tuple(float(b) for b in bg)

    def replace(self, **kw):
        d = dict(self.__dict__)
        d.update(kw)
        return RenderConfig(**d)


@dataclass
class RenderOutput:
    image: np.ndarray
    weights: np.ndarray
    final_transmittance: np.ndarray
    t_values: np.ndarray = field(repr=False, default=None)


def composite(sigma, colors, deltas, background):
    """Alpha-composite samples front to back.

    Works on a single ray (``sigma``: ``(S,)``) or a batch (``(N, S)``).
    Returns ``(pixel, weights, T_final)``.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    if np.any(sigma < 0) or np.any(deltas < 0):
        raise ContractError("densities and step sizes must be non-negative")
    tau = sigma * deltas
    alpha = -np.expm1(-tau)
    trans = np.exp(-np.concatenate([np.zeros_like(tau[..., :1]), np.cumsum(tau, axis=-1)], -1))
    weights = trans[..., :-1] * alpha
    t_final = trans[..., -1]
    pixel = np.einsum("...s,...sc->...c", weights, colors) + t_final[..., None] * np.asarray(background)
    return pixel, weights, t_final


def _composite_vjp(grad_pixel, colors, weights, trans, deltas, background):
    """Cotangents of the densities and colours of a batch of rays."""
    dots = np.einsum("nc,nsc->ns", grad_pixel, colors)
    wd = weights * dots
    # sum over later samples of w_i (g . c_i), plus the background term
    after = np.cumsum(wd[:, ::-1], axis=1)[:, ::-1] - wd
    after += (trans[:, -1] * (grad_pixel @ np.asarray(background)))[:, None]
    g_tau = trans[:, 1:] * dots - after
    g_sigma = g_tau * deltas
    g_colors = weights[..., None] * grad_pixel[:, None, :]
    return g_sigma, g_colors


class _Chunk:
    """Forward state of one chunk of rays."""

    def __init__(self, params, decoder, origins, dirs, t, deltas, cfg):
        n, s = t.shape
        pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        pos = pos.reshape(-1, 3)
        mask = inside_bounds(params.spec, pos)
        self.mask = mask
        self.deltas = deltas
        raw = np.zeros((n * s, 4))
        raw[:, 0] = -np.inf
        self.eval = None
        if mask.any():
            rep_dirs = np.repeat(dirs, s, axis=0)[mask]
            self.eval = FieldEval(params, decoder, pos[mask], rep_dirs)
            raw[mask] = self.eval.out
        self.raw = raw
        sig_in = raw[:, 0] + cfg.density_bias
        sigma = softplus(sig_in).reshape(n, s)
        self.dsigma = sigmoid(sig_in).reshape(n, s)
        colors = sigmoid(raw[:, 1:]).reshape(n, s, 3)
        self.colors = colors
        tau = sigma * deltas
        alpha = -np.expm1(-tau)
        trans = np.exp(-np.concatenate([np.zeros((n, 1)), np.cumsum(tau, axis=1)], axis=1))
        self.trans = trans
        self.weights = trans[:, :-1] * alpha
        self.pixel = (np.einsum("ns,nsc->nc", self.weights, colors)
                      + trans[:, -1:] * np.asarray(cfg.background))

    def backward(self, grad_pixel, background, need_decoder=True):
        n, s = self.weights.shape
        g_sigma, g_colors = _composite_vjp(grad_pixel, self.colors, self.weights, self.trans,
                                           self.deltas, background)
        g_raw = np.empty((n * s, 4))
        g_raw[:, 0] = (g_sigma * self.dsigma).ravel()
        c = self.colors.reshape(-1, 3)
        g_raw[:, 1:] = g_colors.reshape(-1, 3) * c * (1.0 - c)
        if self.eval is None:
            return None
        return self.eval.backward(g_raw[self.mask], need_decoder=need_decoder)


def _map_chunks(fn, n_rays):
    bounds = [(i, min(i + CHUNK_RAYS, n_rays)) for i in range(0, n_rays, CHUNK_RAYS)]
    workers = min(get_num_threads(), len(bounds))
    if workers <= 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


def _ray_samples(n_rays, near, far, cfg):
    return sample_t(n_rays, near, far, cfg.n_samples, cfg.strategy, cfg.seed)


def render_rays(params, decoder, origins, dirs, near, far, cfg):
    """Composite colours for a batch of rays: ``(colors, weights, T_final)``."""
    t, deltas = _ray_samples(len(origins), near, far, cfg)

    def run(a, b):
        ch = _Chunk(params, decoder, origins[a:b], dirs[a:b], t[a:b], deltas[a:b], cfg)
        return ch.pixel, ch.weights, ch.trans[:, -1]

    parts = _map_chunks(run, len(origins))
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]))


def _reduce(parts, n_params, n_dec):
    g_params = np.zeros(n_params)
    g_dec = np.zeros(n_dec)
    for g in parts:
        if g is not None:
            g_params += g[0]
            g_dec += g[1]
    return g_params, g_dec


def render_rays_vjp(params, decoder, origins, dirs, near, far, cfg, grad_colors,
                    need_decoder=True):
    """Gradients of ``sum(grad_colors * colors)`` w.r.t. field and decoder."""
    t, deltas = _ray_samples(len(origins), near, far, cfg)
    bg = cfg.background

    def run(a, b):
        ch = _Chunk(params, decoder, origins[a:b], dirs[a:b], t[a:b], deltas[a:b], cfg)
        return ch.backward(grad_colors[a:b], bg, need_decoder)

    return _reduce(_map_chunks(run, len(origins)), params.spec.n_params, decoder.n_params)


def render_rays_mse(params, decoder, origins, dirs, near, far, cfg, targets, scale,
                    need_decoder=True):
    """One pass computing ``scale * sum((colors - targets)**2)`` and its gradient.

    Returns ``(loss, colors, grad_params, grad_decoder)``.
    """
    t, deltas = _ray_samples(len(origins), near, far, cfg)
    bg = cfg.background

    def run(a, b):
        ch = _Chunk(params, decoder, origins[a:b], dirs[a:b], t[a:b], deltas[a:b], cfg)
        resid = ch.pixel - targets[a:b]
        grads = ch.backward(2.0 * scale * resid, bg, need_decoder)
        return float(np.sum(resid * resid)), ch.pixel, grads

    parts = _map_chunks(run, len(origins))
    loss = scale * sum(p[0] for p in parts)
    colors = np.concatenate([p[1] for p in parts])
    g_params, g_dec = _reduce([p[2] for p in parts], params.spec.n_params, decoder.n_params)
    return loss, colors, g_params, g_dec


def render(params, decoder, camera, cfg=None):
    """Render a full image from ``camera``."""
    cfg = cfg or RenderConfig()
    rays = generate_rays(camera)
    colors, weights, t_final = render_rays(params, decoder, rays.origins, rays.directions,
                                           camera.near, camera.far, cfg)
    h, w = camera.size
    return RenderOutput(colors.reshape(h, w, 3), weights.reshape(h, w, -1), t_final.reshape(h, w))


def render_vjp(params, decoder, camera, cfg, residual_image, need_decoder=True):
    """Gradients of ``sum(residual_image * render(...).image)``."""
    residual_image = np.asarray(residual_image, dtype=np.float64)
    if residual_image.shape != (*camera.size, 3):
        raise ContractError(
            f"residual shape {residual_image.shape} does not match camera {camera.size}")
    rays = generate_rays(camera)
    return render_rays_vjp(params, decoder, rays.origins, rays.directions, camera.near,
                           camera.far, cfg, residual_image.reshape(-1, 3), need_decoder)


def render_mse(params, decoder, camera, cfg, target=None, need_decoder=True):
    """Per-view mean squared error against ``target`` (default: the camera image)
    and its gradient. Returns ``(mse, image, grad_params, grad_decoder)``."""
    target = camera.image if target is None else target
    h, w = camera.size
    rays = generate_rays(camera)
    loss, colors, gp, gd = render_rays_mse(params, decoder, rays.origins, rays.directions,
                                           camera.near, camera.far, cfg,
                                           np.asarray(target).reshape(-1, 3), 1.0 / (h * w * 3),
                                           need_decoder)
    return loss, colors.reshape(h, w, 3), gp, gd


def pooled_rays(views):
    """Rays, per-ray bounds and target colours of several views, concatenated."""
    origins, dirs, near, far, colors = [], [], [], [], []
    for v in views:
        rays = generate_rays(v)
        n = len(rays)
        origins.append(rays.origins)
        dirs.append(rays.directions)
        near.append(np.full(n, v.near))
        far.append(np.full(n, v.far))
        if v.image is not None:
            colors.append(v.image.reshape(-1, 3))
    targets = np.concatenate(colors) if len(colors) == len(views) else None
    return (np.concatenate(origins), np.concatenate(dirs), np.concatenate(near),
            np.concatenate(far), targets)


def views_mse(params, decoder, views, cfg, n_rays=None, rng=None, need_decoder=True):
    """Mean squared error over all pixels of ``views`` and its gradient.

    With ``n_rays`` set, the mean is estimated on a random pixel subset drawn
    from ``rng``. Returns ``(mse, grad_params, grad_decoder)``.
    """
    o, d, near, far, targets = pooled_rays(views)
    if targets is None:
        raise ContractError("every view needs an image to compute an error")
    if n_rays is not None and n_rays < len(o):
        idx = np.sort(rng.choice(len(o), size=n_rays, replace=False))
        o, d, near, far, targets = o[idx], d[idx], near[idx], far[idx], targets[idx]
    loss, _, gp, gd = render_rays_mse(params, decoder, o, d, near, far, cfg, targets,
                                      1.0 / (3 * len(o)), need_decoder)
    return loss, gp, gd
