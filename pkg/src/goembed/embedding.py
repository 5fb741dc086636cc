"""Gradient-origin embeddings.

The embedding of posed context images is the negative gradient, at the fixed
origin parameters, of the squared error between the images and renders of
the origin. It has exactly the layout of the field it encodes into.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import FieldParams, zero_origin
from .renderer import ContractError, RenderConfig, render_mse, views_mse

SCALE_MODES = ("none", "per_tensor_std", "fixed_gain")


@dataclass
class GOEmbedConfig:
    scale_mode: str = "per_tensor_std"
    gain: float = 1.0
    aggregate: str = "sum"
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"unknown scale mode {self.scale_mode!r}")
        if self.scale_mode == "fixed_gain" and not self.gain > 0:
            raise ValueError("fixed gain must be positive")
        if self.aggregate not in ("sum", "mean"):
            raise ValueError(f"unknown aggregate {self.aggregate!r}")


def _check_context(context):
    if not context:
        raise ContractError("at least one context view is required")
    sizes = {v.size for v in context}
    if len(sizes) > 1:
        raise ContractError(f"context views differ in resolution: {sorted(sizes)}")


def origin_gradient(spec, decoder, context, render_cfg, seed=0, images=None):
    """Per-view gradients of the view MSE at the origin (unscaled, not negated)."""
    _check_context(context)
    origin = zero_origin(spec, seed)
    grads = []
    for i, view in enumerate(context):
        target = view.image if images is None else images[i]
        _, _, g, _ = render_mse(origin, decoder, view, render_cfg, target, need_decoder=False)
        grads.append(g)
    return grads


def scale_embedding(emb, mode="none", gain=1.0):
    """Post-scale an embedding. ``per_tensor_std`` leaves near-constant inputs alone."""
    data = emb.data
    if mode == "none":
        return emb
    if mode == "per_tensor_std":
        std = float(np.std(data))
        if std < 1e-12:
            return emb
        return emb.with_data(data / std)
    if mode == "fixed_gain":
        return emb.with_data(data * gain)
    raise ValueError(f"unknown scale mode {mode!r}")


def goembed_encode(spec, decoder, context, cfg=None, seed=0):
    """Encode context views into a field-shaped embedding.

    Only the context images are read.
    """
    cfg = cfg or GOEmbedConfig()
    grads = origin_gradient(spec, decoder, context, cfg.render, seed)
    total = np.zeros(spec.n_params)
    for g in grads:
        total -= g
    if cfg.aggregate == "mean":
        total /= len(grads)
    return scale_embedding(FieldParams(spec, total), cfg.scale_mode, cfg.gain)


def goembed_loss_grad(decoder, spec, context, targets, cfg=None, seed=0, n_rays=None, rng=None,
                      embedding=None):
    """Context MSE plus target MSE of renders of the embedding, and the
    decoder gradient with the embedding held constant.

    ``n_rays`` estimates each term on a random pixel subset. A precomputed
    ``embedding`` skips the encoding pass.
    Returns ``(loss, grad_decoder, embedding)``.
    """
    cfg = cfg or GOEmbedConfig()
    if not targets:
        raise ContractError("at least one target view is required")
    emb = embedding if embedding is not None else goembed_encode(spec, decoder, context, cfg, seed)
    loss = 0.0
    grad = np.zeros(decoder.n_params)
    for views in (context, targets):
        mse, _, gd = views_mse(emb, decoder, views, cfg.render, n_rays, rng)
        loss += mse
        grad += gd
    return loss, grad, emb


def goembed_loss(decoder, spec, context, targets, cfg=None, seed=0):
    return goembed_loss_grad(decoder, spec, context, targets, cfg, seed)[0]
