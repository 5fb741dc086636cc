"""Pinhole cameras, ray generation and sampling along rays.

Camera frame convention: right-handed, looking along -z, +x right, +y up.
Pixel ``(i, j)`` (row, column) has its centre at ``(j + 0.5, i + 0.5)`` in
image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidCameraError(ValueError):
    pass


class InvalidIntrinsicsError(ValueError):
    pass


class InvalidBoundsError(ValueError):
    pass


@dataclass
class CameraView:
    """One posed observation.

    ``image`` may be ``None`` for a camera that is only rendered from; then
    ``size = (height, width)`` must be given.
    """

    image: np.ndarray | None
    cam2world: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    near: float
    far: float
    size: tuple[int, int] | None = None
    name: str = ""

    def __post_init__(self):
        self.cam2world = np.asarray(self.cam2world, dtype=np.float64).reshape(4, 4)
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)
            if self.image.ndim != 3 or self.image.shape[2] != 3:
                raise ValueError(f"image must be HxWx3, got {self.image.shape}")
            self.size = self.image.shape[:2]
        elif self.size is None:
            raise ValueError("camera without image needs size=(height, width)")
        self.size = (int(self.size[0]), int(self.size[1]))

    @property
    def height(self):
        return self.size[0]

    @property
    def width(self):
        return self.size[1]

    @property
    def origin(self):
        return self.cam2world[:3, 3].copy()

    def with_image(self, image):
        return CameraView(image, self.cam2world, self.fx, self.fy, self.cx, self.cy,
                          self.near, self.far, name=self.name)

    def validate(self):
        check_pose(self.cam2world)
        if self.fx == 0 or self.fy == 0:
            raise InvalidIntrinsicsError("focal length must be non-zero")
        if not 0 < self.near < self.far:
            raise InvalidBoundsError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.image is not None:
            img = self.image
            if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
                raise ValueError("image values must be finite and in [0, 1]")


def check_pose(cam2world, tol=1e-6):
    m = np.asarray(cam2world, dtype=np.float64)
    if m.shape != (4, 4) or not np.all(np.isfinite(m)):
        raise InvalidCameraError("cam2world must be a finite 4x4 matrix")
    rot = m[:3, :3]
    if not np.allclose(rot.T @ rot, np.eye(3), atol=tol):
        raise InvalidCameraError("rotation block is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > tol:
        raise InvalidCameraError("rotation block must have determinant +1")
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise InvalidCameraError("bottom row must be (0, 0, 0, 1)")


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise InvalidCameraError("view direction is parallel to the up vector")
    right /= norm
    true_up = np.cross(back, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, back, eye
    return m


@dataclass
class RayBundle:
    origins: np.ndarray
    directions: np.ndarray
    pixel_index: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self):
        return len(self.origins)

    def subset(self, idx):
        pix = self.pixel_index[idx] if len(self.pixel_index) else self.pixel_index
        return RayBundle(self.origins[idx], self.directions[idx], pix)


def camera_directions(camera, width, height):
    """Un-normalised camera-frame directions, shape ``(height*width, 3)``."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    x = (cols.ravel() + 0.5 - camera.cx) / camera.fx
    y = -(rows.ravel() + 0.5 - camera.cy) / camera.fy
    return np.stack([x, y, -np.ones_like(x)], axis=-1), np.stack([rows.ravel(), cols.ravel()], -1)


def generate_rays(camera, width=None, height=None):
    """One ray through every pixel centre, row-major pixel order."""
    width = camera.width if width is None else int(width)
    height = camera.height if height is None else int(height)
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    check_pose(camera.cam2world)
    if camera.fx == 0 or camera.fy == 0:
        raise InvalidIntrinsicsError("focal length must be non-zero")
    dirs_cam, pix = camera_directions(camera, width, height)
    rot = camera.cam2world[:3, :3]
    dirs = dirs_cam @ rot.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.cam2world[:3, 3], dirs.shape).copy()
    return RayBundle(origins, dirs, pix)


@dataclass
class SampleSet:
    positions: np.ndarray  # (N, S, 3)
    t_values: np.ndarray  # (N, S)
    deltas: np.ndarray  # (N, S)
    view_dirs: np.ndarray  # (N, 3)


def sample_t(n_rays, near, far, n_samples, strategy="midpoint", seed=0):
    """Ray parameters and step sizes, both ``(n_rays, n_samples)``.

    ``near``/``far`` may be scalars or per-ray arrays. The last step absorbs
    the uncovered end segments so each ray's steps sum to ``far - near``.
    """
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))[:, None]
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))[:, None]
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if np.any(near < 0) or np.any(near >= far):
        raise InvalidBoundsError("need 0 <= near < far")
    bins = np.arange(n_samples, dtype=np.float64)
    if strategy == "midpoint":
        offsets = np.broadcast_to(bins + 0.5, (n_rays, n_samples))
    elif strategy == "stratified":
        rng = np.random.default_rng(seed)
        offsets = bins + rng.random((n_rays, n_samples))
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    width = (far - near) / n_samples
    t = near + offsets * width
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = (far[:, 0] - t[:, -1]) + (t[:, 0] - near[:, 0])
    return t, deltas


def sample_along_rays(rays, near, far, n_samples, strategy="midpoint", seed=0):
    t, deltas = sample_t(len(rays), near, far, n_samples, strategy, seed)
    positions = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    return SampleSet(positions, t, deltas, rays.directions)
