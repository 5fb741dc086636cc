"""
Diffusion over field parameters
===============================

A token denoiser and a decoder are trained end to end on two scenes, using
only rendered views as supervision. Afterwards a field is sampled with four
context views as the condition and rendered from the held-back cameras.
This short run takes a few minutes; expect blurry but recognisable renders.
"""

# %%
from pathlib import Path

import numpy as np

from goembed import datagen, io
from goembed.diffusion import FusionConfig, make_schedule, sample, train_fusion
from goembed.embedding import goembed_encode
from goembed.fields import FieldSpec
from goembed.renderer import RenderConfig, render
from goembed.training import SceneDataset, evaluate_views

out = Path("notebook_out/03")
out.mkdir(parents=True, exist_ok=True)

scenes = [datagen.render_views(datagen.random_scene(s, n_views=6, resolution=32))
          for s in (3, 7)]
ctx_mask = np.array([1, 1, 1, 1, 0, 0], bool)
data = SceneDataset(scenes, [ctx_mask] * 2, [~ctx_mask] * 2)
spec = FieldSpec.triplane(16, 8)

# %%
cfg = FusionConfig(lr=1e-3, steps=400, log_every=50)
log = []
den, dec, totals = train_fusion(data, spec, cfg, log)
for rec in log:
    print(rec["step"], round(rec["loss"], 4), round(rec["psnr"], 2))

# %% [markdown]
# Conditional sampling with guidance 1 and then 0 (unconditional).

# %%
sched = make_schedule(cfg.schedule, cfg.T)
for i in range(2):
    ctx, trg = data.split(i, 4, 2)
    cond = goembed_encode(spec, dec, ctx, cfg.goembed)
    for s in (1.0, 0.0):
        z = sample(den, dec, sched, s, cond, seed=0)
        p, _ = evaluate_views(z, dec, trg, RenderConfig(n_samples=64))
        print(f"scene {i} guidance {s}: target PSNR {p:.2f} dB")
        io.save_png(out / f"scene{i}_s{s:.0f}.png", render(z, dec, trg[0]).image)
