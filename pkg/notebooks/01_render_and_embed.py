"""
Rendering a field and encoding views at the origin
===================================================

A synthetic scene is rendered to posed views, then a triplane field is
encoded from those views with a single gradient evaluated at the origin.
Run from the repository root: ``python3 notebooks/01_render_and_embed.py``.
"""

# %%
from pathlib import Path

import numpy as np

from goembed import datagen, io
from goembed.embedding import GOEmbedConfig, goembed_encode
from goembed.fields import FieldSpec, decoder_for, zero_origin
from goembed.renderer import RenderConfig, render, render_mse

out = Path("notebook_out/01")
out.mkdir(parents=True, exist_ok=True)

# %% [markdown]
# Six views of the reference scene, 32x32, on the upper hemisphere.

# %%
views = datagen.render_views(datagen.sphere_box_scene(n_views=6, resolution=32))
for v in views:
    io.save_png(out / f"view_{v.name}", v.image)
print(len(views), "views", views[0].image.shape)

# %% [markdown]
# The encoder needs a decoder; a freshly initialised one is enough to see the
# mechanism. The embedding is minus the summed MSE gradient at the zero field.

# %%
spec = FieldSpec.triplane(16, 8)
dec = decoder_for(spec, seed=0)
cfg = GOEmbedConfig(scale_mode="none", render=RenderConfig(n_samples=32))
emb = goembed_encode(spec, dec, views[:4], cfg)
print("embedding norm", np.linalg.norm(emb.data))

# %% [markdown]
# The embedding is a descent direction: a small step from the origin along it
# lowers the render error of the context views.

# %%
def context_mse(p):
    return sum(render_mse(p, dec, v, cfg.render, need_decoder=False)[0] for v in views[:4])

origin = zero_origin(spec)
for eta in (0.0, 1e2, 1e3, 1e4, 3e4):
    print(f"eta {eta:8.0f}  mse {context_mse(origin.with_data(eta * emb.data)):.5f}")

# %%
img = render(origin.with_data(1e4 * emb.data), dec, views[0], cfg.render).image
io.save_png(out / "step_render.png", img)
