"""Synthetic multi-view scenes built from analytic primitives.

Densities are indicator functions of spheres, boxes and tori (optionally
with a smooth falloff); scenes are rendered with the same emission-absorption
compositing used everywhere else and written as PNG + ``cameras.json``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .geometry import CameraView, generate_rays, look_at, sample_t
from .renderer import composite

SHAPES = ("sphere", "box", "torus")


@dataclass
class Primitive:
    """``size`` is the radius (sphere), half-extents (box) or
    ``(major, minor)`` radii (torus, axis along z)."""

    shape: str
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple | float = 0.5
    density: float = 20.0
    color: tuple = (0.8, 0.3, 0.2)
    color_rule: str = "constant"

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown primitive {self.shape!r}")
        if self.density <= 0:
            raise ValueError("primitive density must be positive")
        if self.color_rule not in ("constant", "position-gradient"):
            raise ValueError(f"unknown color rule {self.color_rule!r}")

    def sdf(self, p):
        q = p - np.asarray(self.center, dtype=np.float64)
        size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        if self.shape == "sphere":
            return np.linalg.norm(q, axis=-1) - size[0]
        if self.shape == "box":
            d = np.abs(q) - np.broadcast_to(size, (3,))
            return (np.linalg.norm(np.maximum(d, 0.0), axis=-1)
                    + np.minimum(np.max(d, axis=-1), 0.0))
        major, minor = size[0], size[1]
        ring = np.linalg.norm(q[..., :2], axis=-1) - major
        return np.hypot(ring, q[..., 2]) - minor

    def extent(self):
        size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        c = np.asarray(self.center, dtype=np.float64)
        if self.shape == "sphere":
            r = np.full(3, size[0])
        elif self.shape == "box":
            r = np.broadcast_to(size, (3,))
        else:
            r = np.array([size[0] + size[1]] * 2 + [size[1]])
        return c - r, c + r


@dataclass
class SceneSpec:
    primitives: list = field(default_factory=list)
    n_views: int = 16
    radius: float = 3.0
    elevation: tuple = (10.0, 70.0)
    resolution: int = 64
    fov: float = 45.0
    seed: int = 0
    background: tuple = (1.0, 1.0, 1.0)
    n_samples: int = 128
    softness: float = 0.0
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

    def validate(self):
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        for prim in self.primitives:
            a, b = prim.extent()
            if np.any(a < lo - 1e-9) or np.any(b > hi + 1e-9):
                raise ValueError(f"{prim.shape} at {prim.center} leaves the scene bounds")
        if self.radius <= np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi))):
            raise ValueError("camera radius must exceed the scene extent")
        if not 0.0 <= self.elevation[0] <= self.elevation[1] < 90.0:
            raise ValueError("elevation range must lie in [0, 90) degrees")


class AnalyticField:
    """Closed-form density and colour of a :class:`SceneSpec`."""

    def __init__(self, spec):
        self.spec = spec
        self.lo = np.asarray(spec.bounds[0], dtype=np.float64)
        self.hi = np.asarray(spec.bounds[1], dtype=np.float64)

    def query(self, positions):
        """``(sigma, rgb)`` at ``positions`` of shape ``(..., 3)``.

        Where primitives overlap the first one listed wins.
        """
        p = np.asarray(positions, dtype=np.float64)
        sigma = np.zeros(p.shape[:-1])
        rgb = np.zeros(p.shape)
        claimed = np.zeros(p.shape[:-1], dtype=bool)
        eps = self.spec.softness
        for prim in self.spec.primitives:
            d = prim.sdf(p)
            if eps > 0:
                occ = 0.5 - 0.5 * np.tanh(d / (2 * eps))
                region = occ > 1e-6
            else:
                occ = (d < 0).astype(np.float64)
                region = d < 0
            new = region & ~claimed
            sigma[new] = prim.density * occ[new]
            if prim.color_rule == "constant":
                rgb[new] = prim.color
            else:
                rgb[new] = (p[new] - self.lo) / (self.hi - self.lo)
            claimed |= new
        return sigma, rgb


def make_synthetic_field(spec):
    return AnalyticField(spec)


def hemisphere_cameras(spec):
    """Seeded cameras on the upper hemisphere, looking at the origin."""
    rng = np.random.default_rng(spec.seed)
    res = spec.resolution
    focal = 0.5 * res / np.tan(np.radians(spec.fov) / 2)
    # the scene fits inside the bounding sphere of the bounds box
    extent = float(np.linalg.norm(np.maximum(np.abs(spec.bounds[0]), np.abs(spec.bounds[1]))))
    cams = []
    for i in range(spec.n_views):
        azim = rng.uniform(0.0, 2 * np.pi)
        elev = np.radians(rng.uniform(*spec.elevation))
        eye = spec.radius * np.array([np.cos(elev) * np.cos(azim),
                                      np.cos(elev) * np.sin(azim), np.sin(elev)])
        cams.append(CameraView(None, look_at(eye), focal, focal, res / 2, res / 2,
                               spec.radius - extent, spec.radius + extent,
                               size=(res, res), name=f"{i:04d}.png"))
    return cams


def turntable_cameras(n_views, radius=3.0, elevation=30.0, resolution=64, fov=45.0,
                      extent=3 ** 0.5):
    """Evenly spaced cameras on a ring at fixed elevation."""
    focal = 0.5 * resolution / np.tan(np.radians(fov) / 2)
    elev = np.radians(elevation)
    cams = []
    for i in range(n_views):
        azim = 2 * np.pi * i / n_views
        eye = radius * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim),
                                 np.sin(elev)])
        cams.append(CameraView(None, look_at(eye), focal, focal, resolution / 2, resolution / 2,
                               radius - extent, radius + extent, size=(resolution, resolution),
                               name=f"{i:04d}.png"))
    return cams


def render_analytic(field_, camera, n_samples=128, background=(1.0, 1.0, 1.0)):
    rays = generate_rays(camera)
    t, deltas = sample_t(len(rays), camera.near, camera.far, n_samples, "midpoint")
    pos = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    sigma, rgb = field_.query(pos)
    pixel, _, _ = composite(sigma, rgb, deltas, background)
    return np.clip(pixel, 0.0, 1.0).reshape(*camera.size, 3)


def render_views(spec):
    """In-memory views of a scene, quantised to 8 bits like the PNGs."""
    spec.validate()
    field_ = make_synthetic_field(spec)
    views = []
    for cam in hemisphere_cameras(spec):
        img = render_analytic(field_, cam, spec.n_samples, spec.background)
        views.append(cam.with_image(io.quantize(img)))
    return views


def render_dataset(spec, out_dir):
    """Write ``NNNN.png`` files and ``cameras.json`` into ``out_dir``."""
    views = render_views(spec)
    io.save_views(views, out_dir)
    return views


def random_scene(seed, n_primitives=None, **kw):
    """A scene of one to three random primitives with random colours."""
    rng = np.random.default_rng(seed)
    n = n_primitives or int(rng.integers(1, 4))
    prims = []
    for _ in range(n):
        shape = SHAPES[int(rng.integers(0, 3))]
        if shape == "sphere":
            size = float(rng.uniform(0.25, 0.5))
        elif shape == "box":
            size = tuple(rng.uniform(0.15, 0.4, 3))
        else:
            size = (float(rng.uniform(0.3, 0.45)), float(rng.uniform(0.1, 0.18)))
        lo, hi = Primitive(shape, (0, 0, 0), size).extent()
        center = tuple(rng.uniform(-0.9 - lo, 0.9 - hi))
        rule = "position-gradient" if rng.random() < 0.25 else "constant"
        prims.append(Primitive(shape, center, size, float(rng.uniform(10, 30)),
                               tuple(rng.uniform(0.05, 0.95, 3)), rule))
    return SceneSpec(primitives=prims, seed=seed, **kw)


def sphere_box_scene(**kw):
    """Reference scene: a red sphere next to a blue box."""
    prims = [Primitive("sphere", (-0.3, 0.2, 0.0), 0.45, 20.0, (0.85, 0.25, 0.2)),
             Primitive("box", (0.4, -0.35, -0.1), (0.25, 0.3, 0.35), 20.0, (0.2, 0.35, 0.8))]
    return SceneSpec(primitives=prims, **kw)


def write_scene_set(out_dir, seeds, **kw):
    """Random scenes ``scene_<seed>/`` under ``out_dir``."""
    out = Path(out_dir)
    for s in seeds:
        render_dataset(random_scene(s, **kw), out / f"scene_{s:04d}")
    return out
