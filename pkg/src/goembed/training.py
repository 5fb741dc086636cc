"""Optimisation loops: single-scene fitting, plenoptic-encoder training and
the toy reconstruction backbone.

Every loop draws its randomness from generators keyed on
``(seed, stream, step)``, so logs are reproducible run to run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from ._nn import MLP
from .embedding import GOEmbedConfig, goembed_encode, goembed_loss_grad
from .fields import FieldConfigError, FieldParams, decoder_for, init_field, zero_origin
from .metrics import psnr, ssim
from .renderer import RenderConfig, render, views_mse

# stream ids for keyed generators
_RAYS, _SCENE, _SPLIT, _JITTER = 1, 2, 3, 4


class TrainingError(RuntimeError):
    pass


def keyed_rng(seed, stream, step=0):
    return np.random.default_rng([int(seed), int(stream), int(step)])


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, lr=1e-3, **kw):
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns new ``(params, state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes must match")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise TrainingError(
            f"non-finite gradient in {len(bad)} entries (first at index {bad[0]}, "
            f"step {state.step + 1})")
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1 ** step)
    v_hat = v / (1 - state.beta2 ** step)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, step, state.lr, state.beta1, state.beta2, state.eps)


def _check_loss(loss, step):
    if not math.isfinite(loss):
        raise TrainingError(f"loss diverged ({loss}) at step {step}")


def mse_to_psnr(err):
    return 99.0 if err < 1e-10 else float(10 * np.log10(1 / err))


def evaluate_views(params, decoder, views, render_cfg):
    """Mean PSNR/SSIM of full renders against the views' images. SSIM is
    ``None`` for images smaller than its window."""
    ps, ss = [], []
    for v in views:
        img = render(params, decoder, v, render_cfg).image
        ps.append(psnr(img, v.image))
        if min(v.size) >= 11:
            ss.append(ssim(img, v.image))
    return float(np.mean(ps)), (float(np.mean(ss)) if ss else None)


# ---------------------------------------------------------------------------
# single-scene overfitting


@dataclass
class SSOConfig:
    steps: int = 2000
    rays_per_step: int = 1024
    lr_field: float = 1e-2
    lr_decoder: float = 1e-3
    render: RenderConfig = field(default_factory=lambda: RenderConfig(strategy="stratified"))
    eval_render: RenderConfig = field(default_factory=lambda: RenderConfig(n_samples=64))
    decoder_hidden: int = 128
    log_every: int = 100
    seed: int = 0


def fit_sso(scene, spec, cfg=None, heldout=None, log=None):
    """Fit one field and its own decoder to the views of one scene.

    Returns ``(params, decoder, metrics)``; held-out metrics are reported
    when ``heldout`` views are given.
    """
    cfg = cfg or SSOConfig()
    if not scene:
        raise ValueError("fit_sso needs at least one view")
    params = init_field(spec, cfg.seed)
    decoder = decoder_for(spec, cfg.seed, hidden=cfg.decoder_hidden)
    st_f = AdamState.zeros(spec.n_params, cfg.lr_field)
    st_d = AdamState.zeros(decoder.n_params, cfg.lr_decoder)
    losses = []
    for step in range(cfg.steps):
        rcfg = cfg.render.replace(seed=int(keyed_rng(cfg.seed, _JITTER, step).integers(2**31)))
        loss, gp, gd = views_mse(params, decoder, scene, rcfg, cfg.rays_per_step,
                                 keyed_rng(cfg.seed, _RAYS, step))
        _check_loss(loss, step)
        losses.append(loss)
        new_p, st_f = adam_step(params.data, gp, st_f)
        new_d, st_d = adam_step(decoder.params, gd, st_d) if spec.kind != "mlp" else (decoder.params, st_d)
        params = params.with_data(new_p)
        decoder = decoder.with_params(new_d)
        if log is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.append({"step": step, "loss": loss, "psnr": mse_to_psnr(loss), "ssim": None})
    metrics = {"initial_loss": losses[0] if losses else None,
               "final_loss": losses[-1] if losses else None}
    metrics["train_psnr"], metrics["train_ssim"] = evaluate_views(params, decoder, scene,
                                                                  cfg.eval_render)
    if heldout:
        metrics["heldout_psnr"], metrics["heldout_ssim"] = evaluate_views(
            params, decoder, heldout, cfg.eval_render)
    if log is not None:
        log.append({"step": cfg.steps, "loss": metrics["final_loss"],
                    "psnr": metrics.get("heldout_psnr", metrics["train_psnr"]),
                    "ssim": metrics.get("heldout_ssim", metrics["train_ssim"])})
    return params, decoder, metrics


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SceneDataset:
    """Scenes of posed views plus per-scene masks of the views allowed as
    context and as targets."""

    scenes: list
    context_masks: list = None
    target_masks: list = None
    names: list = None

    def __post_init__(self):
        n = len(self.scenes)
        if self.context_masks is None:
            self.context_masks = [np.ones(len(s), bool) for s in self.scenes]
        if self.target_masks is None:
            self.target_masks = [np.ones(len(s), bool) for s in self.scenes]
        if self.names is None:
            self.names = [f"scene_{i:04d}" for i in range(n)]
        for views in self.scenes:
            if len({v.size for v in views}) > 1:
                raise ValueError("views within a scene must share a resolution")

    def __len__(self):
        return len(self.scenes)

    def subset(self, idx):
        return SceneDataset([self.scenes[i] for i in idx], [self.context_masks[i] for i in idx],
                            [self.target_masks[i] for i in idx], [self.names[i] for i in idx])

    def check(self, k, l):
        for name, views in zip(self.names, self.scenes):
            if len(views) < k + l:
                raise ValueError(f"{name} has {len(views)} views, need at least {k + l}")

    def split(self, i, k, l, rng=None):
        """``(context, targets)`` of scene ``i``.

        Without ``rng`` the split is fixed: the first ``k`` context-eligible
        views and the last ``l`` target-eligible ones, so evaluations with
        different ``k`` share their targets.
        """
        views = self.scenes[i]
        ctx_ok = np.flatnonzero(self.context_masks[i])
        trg_ok = np.flatnonzero(self.target_masks[i])
        if rng is None:
            targets = list(trg_ok[::-1][:l][::-1])
            ctx = [j for j in ctx_ok if j not in targets][:k]
        else:
            ctx = list(rng.choice(ctx_ok, size=k, replace=False))
            rest = [j for j in trg_ok if j not in ctx]
            targets = list(rng.choice(rest, size=l, replace=False))
        if len(ctx) < k or len(targets) < l:
            raise ValueError(f"scene {self.names[i]} cannot supply {k} context and {l} targets")
        return [views[j] for j in ctx], [views[j] for j in targets]


def load_dataset(root):
    """Every sub-directory of ``root`` holding a ``cameras.json`` is a scene."""
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "cameras.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no scene directories with cameras.json under {root}")
    return SceneDataset([io.load_views(d) for d in dirs], names=[d.name for d in dirs])


# ---------------------------------------------------------------------------
# plenoptic encoding


@dataclass
class PEConfig:
    k: int = 4
    l: int = 2
    steps: int = 1000
    lr: float = 1e-3
    rays_per_term: int = 1024
    goembed: GOEmbedConfig = field(default_factory=GOEmbedConfig)
    decoder_hidden: int = 128
    log_every: int = 50
    seed: int = 0


def _step_render(cfg_render, seed, step):
    if cfg_render.strategy != "stratified":
        return cfg_render
    return cfg_render.replace(seed=int(keyed_rng(seed, _JITTER, step).integers(2**31)))


def train_plenoptic_encoder(data, spec, cfg=None, decoder=None, log=None):
    """Train the shared decoder so that renders of each scene's embedding
    match both its context and target views. Returns the decoder."""
    cfg = cfg or PEConfig()
    data.check(cfg.k, cfg.l)
    if decoder is None:
        decoder = decoder_for(spec, cfg.seed, hidden=cfg.decoder_hidden)
    state = AdamState.zeros(decoder.n_params, cfg.lr)
    for step in range(cfg.steps):
        i = int(keyed_rng(cfg.seed, _SCENE, step).integers(len(data)))
        ctx, trg = data.split(i, cfg.k, cfg.l, keyed_rng(cfg.seed, _SPLIT, step))
        gcfg = GOEmbedConfig(cfg.goembed.scale_mode, cfg.goembed.gain, cfg.goembed.aggregate,
                             _step_render(cfg.goembed.render, cfg.seed, step))
        loss, grad, _ = goembed_loss_grad(decoder, spec, ctx, trg, gcfg, cfg.seed,
                                          cfg.rays_per_term, keyed_rng(cfg.seed, _RAYS, step))
        _check_loss(loss, step)
        new, state = adam_step(decoder.params, grad, state)
        decoder = decoder.with_params(new)
        if log is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.append({"step": step, "loss": loss, "psnr": mse_to_psnr(loss / 2), "ssim": None})
    return decoder


def evaluate_plenoptic(data, decoder, spec, cfg=None, k=None, l=None, transform=None):
    """Target-view metrics of embedding renders and of origin renders.

    The embedding is computed from context views only. ``transform`` maps an
    embedding to the field that is rendered (e.g. a reconstruction backbone).
    """
    cfg = cfg or PEConfig()
    k = cfg.k if k is None else k
    l = cfg.l if l is None else l
    rcfg = cfg.goembed.render.replace(strategy="midpoint")
    gcfg = GOEmbedConfig(cfg.goembed.scale_mode, cfg.goembed.gain, cfg.goembed.aggregate, rcfg)
    out = {"target_psnr": [], "target_ssim": [], "origin_psnr": [], "origin_ssim": [],
           "context_psnr": []}
    for i in range(len(data)):
        ctx, trg = data.split(i, k, l)
        emb = goembed_encode(spec, decoder, ctx, gcfg, cfg.seed)
        fld = transform(emb) if transform is not None else emb
        origin = zero_origin(spec, cfg.seed)
        p, s = evaluate_views(fld, decoder, trg, rcfg)
        out["target_psnr"].append(p)
        out["target_ssim"].append(s)
        p0, s0 = evaluate_views(origin, decoder, trg, rcfg)
        out["origin_psnr"].append(p0)
        out["origin_ssim"].append(s0)
        out["context_psnr"].append(evaluate_views(fld, decoder, ctx, rcfg)[0])
    return {key: float(np.mean(v)) for key, v in out.items()} | {"per_scene": out}


# ---------------------------------------------------------------------------
# reconstruction backbone


class TokenBackbone:
    """Residual per-token network over patches of a grid field.

    Tokens are non-overlapping ``patch``-sized blocks of each plane (triplane)
    or of the volume (voxel). Each token, concatenated with a one-hot of its
    position, goes through a two-hidden-layer network whose output is added
    back to the token. The output layer starts at zero, so a fresh backbone
    is the identity.
    """

    def __init__(self, spec, patch=4, hidden=256, seed=0):
        if spec.kind == "mlp":
            raise FieldConfigError("the token backbone needs a grid field")
        if spec.resolution % patch:
            raise FieldConfigError(f"patch {patch} does not divide resolution {spec.resolution}")
        self.spec, self.patch, self.hidden = spec, patch, hidden
        tokens = tokenize(np.zeros(spec.n_params), spec, patch)
        self.n_tokens, self.token_dim = tokens.shape
        self.net = MLP((self.token_dim + self.n_tokens, hidden, hidden, self.token_dim), "tanh")
        self.params = self.net.init(np.random.default_rng(seed), zero_last=True)

    def _inputs(self, data):
        tok = tokenize(data, self.spec, self.patch)
        return tok, np.concatenate([tok, np.eye(self.n_tokens)], axis=1)

    def forward(self, params, field_params):
        tok, x = self._inputs(field_params.data)
        delta, cache = self.net.forward(params, x)
        out = untokenize(tok + delta, self.spec, self.patch)
        return FieldParams(self.spec, out), cache

    def __call__(self, field_params, params=None):
        return self.forward(self.params if params is None else params, field_params)[0]

    def backward(self, params, cache, grad_out):
        """Parameter gradient for an output cotangent (input held constant)."""
        g_tok = tokenize(grad_out, self.spec, self.patch)
        g, _ = self.net.backward(params, cache, g_tok, need_input=False)
        return g


def tokenize(data, spec, patch):
    """``(n_tokens, token_dim)`` view of a flat grid parameter vector."""
    r, c, p = spec.resolution, spec.channels, patch
    n = r // p
    if spec.kind == "triplane":
        g = data.reshape(3, n, p, n, p, c).transpose(0, 1, 3, 2, 4, 5)
        return g.reshape(3 * n * n, p * p * c)
    g = data.reshape(n, p, n, p, n, p, c).transpose(0, 2, 4, 1, 3, 5, 6)
    return g.reshape(n ** 3, p ** 3 * c)


def untokenize(tokens, spec, patch):
    r, c, p = spec.resolution, spec.channels, patch
    n = r // p
    if spec.kind == "triplane":
        g = tokens.reshape(3, n, n, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    else:
        g = tokens.reshape(n, n, n, p, p, p, c).transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(g).reshape(-1)


@dataclass
class ReconConfig(PEConfig):
    lr_backbone: float = 3e-3


def train_goembed_recon(data, backbone, spec, cfg=None, decoder=None, log=None):
    """Jointly train ``backbone`` and the decoder so that renders of
    ``backbone(embedding)`` match context and target views.

    Returns ``(backbone, decoder)``; the backbone is updated in place.
    """
    cfg = cfg or ReconConfig()
    data.check(cfg.k, cfg.l)
    if decoder is None:
        decoder = decoder_for(spec, cfg.seed, hidden=cfg.decoder_hidden)
    st_d = AdamState.zeros(decoder.n_params, cfg.lr)
    st_b = AdamState.zeros(len(backbone.params), cfg.lr_backbone)
    for step in range(cfg.steps):
        i = int(keyed_rng(cfg.seed, _SCENE, step).integers(len(data)))
        ctx, trg = data.split(i, cfg.k, cfg.l, keyed_rng(cfg.seed, _SPLIT, step))
        gcfg = GOEmbedConfig(cfg.goembed.scale_mode, cfg.goembed.gain, cfg.goembed.aggregate,
                             _step_render(cfg.goembed.render, cfg.seed, step))
        emb = goembed_encode(spec, decoder, ctx, gcfg, cfg.seed)
        fld, cache = backbone.forward(backbone.params, emb)
        rng = keyed_rng(cfg.seed, _RAYS, step)
        loss = 0.0
        g_fld = np.zeros(spec.n_params)
        g_dec = np.zeros(decoder.n_params)
        for views in (ctx, trg):
            mse, gp, gd = views_mse(fld, decoder, views, gcfg.render, cfg.rays_per_term, rng)
            loss += mse
            g_fld += gp
            g_dec += gd
        _check_loss(loss, step)
        g_back = backbone.backward(backbone.params, cache, g_fld)
        new_d, st_d = adam_step(decoder.params, g_dec, st_d)
        backbone.params, st_b = adam_step(backbone.params, g_back, st_b)
        decoder = decoder.with_params(new_d)
        if log is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.append({"step": step, "loss": loss, "psnr": mse_to_psnr(loss / 2), "ssim": None})
    return backbone, decoder
