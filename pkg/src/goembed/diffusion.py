"""DDPM in field-parameter space with a rendering forward model.

The denoiser predicts clean parameters (x_start). A training pass encodes the
context views, makes a one-shot estimate from pure noise, re-noises that
estimate at a random timestep, denoises it again and renders the result at
the target cameras.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._nn import MLP
from .embedding import GOEmbedConfig, goembed_encode, goembed_loss_grad, scale_embedding
from .fields import FieldParams, decoder_for
from .training import (AdamState, TrainingError, _check_loss, adam_step, tokenize, untokenize)
from .renderer import ContractError, views_mse

# named random streams of a fusion pass
DROPOUT, TIMESTEP, NOISE_T, EPSILON, RAYS = 11, 12, 13, 14, 15


@dataclass
class NoiseSchedule:
    """``betas[t-1]`` etc. hold the values for timestep ``t`` in ``1..T``."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t):
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(kind="cosine", T=1000):
    """Linear (beta from 1e-4 to 0.02) or cosine (s = 0.008) schedule."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if kind == "linear":
        betas = np.linspace(1e-4, 0.02, T)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        ab = f / f[0]
        betas = np.minimum(1.0 - ab[1:] / ab[:-1], 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def corrupt(z0, eps, alpha_bar):
    """Closed-form forward diffusion for a given cumulative alpha."""
    return math.sqrt(alpha_bar) * z0 + math.sqrt(1.0 - alpha_bar) * eps


def forward_corrupt(z0, t, eps, sched):
    data0 = z0.data if isinstance(z0, FieldParams) else np.asarray(z0)
    epsd = eps.data if isinstance(eps, FieldParams) else np.asarray(eps)
    if data0.shape != epsd.shape:
        raise ValueError("clean parameters and noise differ in shape")
    out = corrupt(data0, epsd, sched.alpha_bar(t))
    return z0.with_data(out) if isinstance(z0, FieldParams) else out


def timestep_embedding(t, dim=32):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class TokenDenoiser:
    """Per-token denoiser over patches of a grid field.

    Each token of the noisy field is concatenated with the matching token of
    the conditioning embedding (or of a learned null embedding), a sinusoidal
    timestep embedding and a one-hot token position, then mapped by a
    two-hidden-layer network to the clean token. With ``cond_skip`` the
    conditioning token is added to the network output, so the network learns
    a correction to the embedding. With ``cond_norm`` a conditioning field is
    divided by its standard deviation before use, so raw origin gradients of
    any magnitude reach the network at unit scale.

    The flat parameter vector holds the network weights followed by the null
    embedding.
    """

    def __init__(self, spec, patch=4, hidden=256, t_dim=32, seed=0, cond_skip=False,
                 cond_norm=True):
        self.spec, self.patch, self.t_dim = spec, patch, t_dim
        self.cond_skip = cond_skip
        self.cond_norm = cond_norm
        tok = tokenize(np.zeros(spec.n_params), spec, patch)
        self.n_tokens, self.token_dim = tok.shape
        self.net = MLP((2 * self.token_dim + t_dim + self.n_tokens, hidden, hidden,
                        self.token_dim), "tanh")
        rng = np.random.default_rng(seed)
        self.params = np.concatenate([self.net.init(rng), np.zeros(spec.n_params)])

    @property
    def n_params(self):
        return len(self.params)

    def _split(self, params):
        return params[:self.net.n_params], params[self.net.n_params:]

    def forward(self, params, z_t, t, cond):
        w, null = self._split(params)
        if cond is None:
            c = null
        elif self.cond_norm:
            c = scale_embedding(cond, "per_tensor_std").data
        else:
            c = cond.data
        tok = tokenize(z_t.data, self.spec, self.patch)
        ctok = tokenize(c, self.spec, self.patch)
        temb = np.broadcast_to(timestep_embedding(t, self.t_dim), (self.n_tokens, self.t_dim))
        x = np.concatenate([tok, ctok, temb, np.eye(self.n_tokens)], axis=1)
        y, cache = self.net.forward(w, x)
        if self.cond_skip:
            y = y + ctok
        return FieldParams(self.spec, untokenize(y, self.spec, self.patch)), (cache, cond is None)

    def __call__(self, z_t, t, cond, params=None):
        return self.forward(self.params if params is None else params, z_t, t, cond)[0]

    def backward(self, params, cache, grad_out):
        """Gradient w.r.t. all parameters (null embedding included when used)."""
        w, _ = self._split(params)
        net_cache, used_null = cache
        g_tok = tokenize(np.asarray(grad_out), self.spec, self.patch)
        g_w, g_x = self.net.backward(w, net_cache, g_tok, need_input=used_null)
        g_null = np.zeros(self.spec.n_params)
        if used_null:
            d = self.token_dim
            g_c = g_x[:, d:2 * d] + g_tok if self.cond_skip else g_x[:, d:2 * d]
            g_null = untokenize(g_c, self.spec, self.patch)
        return np.concatenate([g_w, g_null])


def fusion_randomness(seed, step, T, n_params, dropout_p=0.5):
    """The seeded draws of one pass: ``(dropped, t, z_T, eps)``.

    Each quantity has its own generator so adding draws to one stream never
    shifts another.
    """
    key = (int(seed), int(step))
    dropped = bool(np.random.default_rng([*key, DROPOUT]).random() < dropout_p)
    t = int(np.random.default_rng([*key, TIMESTEP]).integers(1, T + 1))
    z_T = np.random.default_rng([*key, NOISE_T]).standard_normal(n_params)
    eps = np.random.default_rng([*key, EPSILON]).standard_normal(n_params)
    return dropped, t, z_T, eps


@dataclass
class FusionResult:
    loss_fusion: float
    loss_pse_det: float
    loss_goembed: float
    loss_total: float
    grad_denoiser: np.ndarray | None
    grad_decoder: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def fusion_forward_pass(context, targets, denoiser, decoder, spec, sched, seed=0, step=0,
                        dropout_p=0.5, goembed_cfg=None, n_rays=None, params=None):
    """Losses and gradients of one training pass.

    ``denoiser`` is a :class:`TokenDenoiser` or any callable
    ``(z_t, t, cond) -> FieldParams``; for plain callables no denoiser
    gradient is returned.
    """
    if not context or not targets:
        raise ContractError("a fusion pass needs context and target views")
    gcfg = goembed_cfg or GOEmbedConfig(scale_mode="none")
    trainable = isinstance(denoiser, TokenDenoiser)
    if trainable and params is None:
        params = denoiser.params
    dropped, t, z_T, eps = fusion_randomness(seed, step, sched.T, spec.n_params, dropout_p)
    emb = goembed_encode(spec, decoder, context, gcfg, seed)
    cond = None if dropped else emb

    def run(z, tt):
        if trainable:
            return denoiser.forward(params, z, tt, cond)
        return denoiser(z, tt, cond), None

    z0_hat, cache0 = run(FieldParams(spec, z_T), sched.T)
    # the re-noised estimate is a constant for the second denoising step
    z_t = FieldParams(spec, corrupt(z0_hat.data.copy(), eps, sched.alpha_bar(t)))
    z0_tilde, cache1 = run(z_t, t)

    rays = np.random.default_rng([int(seed), int(step), RAYS])
    rcfg = gcfg.render
    l_fus, gf1, gd1 = views_mse(z0_tilde, decoder, targets, rcfg, n_rays, rays)
    l_pse, gf0, gd0 = views_mse(z0_hat, decoder, targets, rcfg, n_rays, rays)
    l_emb, gd2, _ = goembed_loss_grad(decoder, spec, context, targets, gcfg, seed, n_rays, rays,
                                      embedding=emb)
    total = l_fus + l_pse + l_emb
    g_den = None
    if trainable:
        g_den = denoiser.backward(params, cache1, gf1) + denoiser.backward(params, cache0, gf0)
    diag = {"dropped": dropped, "t": t, "z_T": z_T, "eps": eps, "z0_hat": z0_hat,
            "embedding": emb}
    return FusionResult(l_fus, l_pse, l_emb, total, g_den, gd1 + gd0 + gd2, diag)


def guide(x_cond, x_uncond, scale):
    """Classifier-free guidance on clean-sample predictions."""
    if scale == 1:
        return x_cond
    if scale == 0:
        return x_uncond
    return x_uncond + scale * (x_cond - x_uncond)


def sample(denoiser, decoder, sched, guidance_scale=1.0, cond=None, seed=0, spec=None,
           return_trajectory=False):
    """Ancestral DDPM sampling under the x_start parameterisation.

    ``decoder`` is not needed to sample parameters; it is accepted so that
    callers can pass the full model. With ``cond=None`` every prediction is
    unconditional.
    """
    del decoder
    if guidance_scale < 0:
        raise ValueError("guidance scale must be non-negative")
    spec = spec or (cond.spec if cond is not None else denoiser.spec)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(spec.n_params)
    traj = []
    for t in range(sched.T, 0, -1):
        z = FieldParams(spec, x)
        if cond is None:
            x0 = denoiser(z, t, None).data
        elif guidance_scale == 1:
            x0 = denoiser(z, t, cond).data
        else:
            x0 = guide(denoiser(z, t, cond).data, denoiser(z, t, None).data, guidance_scale)
        if return_trajectory:
            traj.append(x0)
        if t == 1:
            x = x0
            break
        ab, ab_prev = sched.alpha_bars[t - 1], sched.alpha_bars[t - 2]
        beta = sched.betas[t - 1]
        c0 = beta * math.sqrt(ab_prev) / (1 - ab)
        ct = (1 - ab_prev) * math.sqrt(sched.alphas[t - 1]) / (1 - ab)
        var = beta * (1 - ab_prev) / (1 - ab)
        x = c0 * x0 + ct * x + math.sqrt(var) * rng.standard_normal(spec.n_params)
    out = FieldParams(spec, x)
    return (out, traj) if return_trajectory else out


def pseudo_deterministic_recon(denoiser, cond, sched, seed=0):
    """One denoiser call at ``t = T`` on seeded noise."""
    z_T = np.random.default_rng(seed).standard_normal(cond.spec.n_params)
    return denoiser(FieldParams(cond.spec, z_T), sched.T, cond)


@dataclass
class FusionConfig:
    schedule: str = "cosine"
    T: int = 1000
    lr: float = 5e-5
    lr_decoder: float = 1e-3
    dropout_p: float = 0.5
    k: int = 4
    l: int = 2
    steps: int = 2000
    rays_per_term: int = 512
    patch: int = 4
    hidden: int = 256
    cond_skip: bool = False
    cond_norm: bool = True
    decoder_hidden: int = 128
    goembed: GOEmbedConfig = field(default_factory=lambda: GOEmbedConfig(scale_mode="none"))
    log_every: int = 50
    seed: int = 0


def train_fusion(data, spec, cfg=None, log=None):
    """Train denoiser and decoder end to end. Returns ``(denoiser, decoder, losses)``
    where ``losses`` is the per-step total loss."""
    from .training import keyed_rng, _SCENE, _SPLIT

    cfg = cfg or FusionConfig()
    data.check(cfg.k, cfg.l)
    sched = make_schedule(cfg.schedule, cfg.T)
    denoiser = TokenDenoiser(spec, cfg.patch, cfg.hidden, seed=cfg.seed, cond_skip=cfg.cond_skip,
                             cond_norm=cfg.cond_norm)
    decoder = decoder_for(spec, cfg.seed, hidden=cfg.decoder_hidden)
    st_n = AdamState.zeros(denoiser.n_params, cfg.lr)
    st_d = AdamState.zeros(decoder.n_params, cfg.lr_decoder)
    totals = []
    for step in range(cfg.steps):
        i = int(keyed_rng(cfg.seed, _SCENE, step).integers(len(data)))
        ctx, trg = data.split(i, cfg.k, cfg.l, keyed_rng(cfg.seed, _SPLIT, step))
        res = fusion_forward_pass(ctx, trg, denoiser, decoder, spec, sched, cfg.seed, step,
                                  cfg.dropout_p, cfg.goembed, cfg.rays_per_term)
        _check_loss(res.loss_total, step)
        totals.append(res.loss_total)
        denoiser.params, st_n = adam_step(denoiser.params, res.grad_denoiser, st_n)
        new_d, st_d = adam_step(decoder.params, res.grad_decoder, st_d)
        decoder = decoder.with_params(new_d)
        if log is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.append({"step": step, "loss": res.loss_total, "loss_fusion": res.loss_fusion,
                        "loss_pse_det": res.loss_pse_det, "loss_goembed": res.loss_goembed,
                        "psnr": 99.0 if res.loss_pse_det < 1e-10
                        else float(10 * np.log10(1 / res.loss_pse_det)), "ssim": None})
    return denoiser, decoder, totals


__all__ = ["NoiseSchedule", "make_schedule", "corrupt", "forward_corrupt", "TokenDenoiser",
           "fusion_randomness", "fusion_forward_pass", "FusionResult", "guide", "sample",
           "pseudo_deterministic_recon", "FusionConfig", "train_fusion", "TrainingError"]
