"""
Fitting one scene
=================

Per-scene optimisation of a voxel grid and its decoder, the baseline every
encoder is compared against. Short run here; the acceptance suite uses 2000
steps at 64x64.
"""

# %%
from pathlib import Path

from goembed import datagen, io
from goembed.fields import FieldSpec
from goembed.renderer import RenderConfig, render
from goembed.training import SSOConfig, fit_sso

out = Path("notebook_out/02")
out.mkdir(parents=True, exist_ok=True)

views = datagen.render_views(datagen.sphere_box_scene(n_views=12, resolution=32, seed=1))
train, held = views[:10], views[10:]

# %%
log = []
cfg = SSOConfig(steps=300, rays_per_step=512, log_every=50,
                eval_render=RenderConfig(n_samples=48))
params, dec, metrics = fit_sso(train, FieldSpec.voxel(24, 8), cfg, heldout=held, log=log)
for rec in log:
    print(rec["step"], round(rec["loss"], 5))
print({k: round(v, 3) for k, v in metrics.items()})

# %% [markdown]
# Side by side: ground truth and the fitted field from a held-out camera.

# %%
for v in held:
    io.save_png(out / f"gt_{v.name}", v.image)
    io.save_png(out / f"fit_{v.name}", render(params, dec, v, cfg.eval_render).image)
