"""Radiance-field parameterisations: voxel grid, triplane and coordinate MLP.

A field maps a point (and optionally a view direction) to four raw values
``(sigma_raw, r_raw, g_raw, b_raw)``. Activations are applied by the renderer.
Grid kinds interpolate feature vectors and decode them with a shared
:class:`DecoderHead`; the MLP kind emits raw values directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._nn import MLP

KINDS = ("voxel", "triplane", "mlp")
DEFAULT_BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
# plane k spans these two world axes
PLANE_AXES = ((0, 1), (0, 2), (1, 2))


class FieldConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    """Layout of a field's parameter vector.

    ``resolution`` is the voxel count per axis (voxel) or the plane size
    (triplane). ``widths`` are the hidden widths of the MLP kind.
    """

    kind: str
    resolution: int = 0
    channels: int = 0
    widths: tuple[int, ...] = ()
    activation: str = "tanh"
    n_octaves: int = 6
    use_dirs: bool = True
    bounds: tuple = DEFAULT_BOUNDS

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FieldConfigError(f"unknown field kind {self.kind!r}")
        if self.kind in ("voxel", "triplane"):
            if self.resolution < 2 or self.channels < 1:
                raise FieldConfigError("grid fields need resolution >= 2 and channels >= 1")
        elif not self.widths or min(self.widths) < 1:
            raise FieldConfigError("mlp fields need at least one hidden width")
        lo, hi = np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise FieldConfigError(f"invalid bounds {self.bounds}")

    @classmethod
    def voxel(cls, resolution, channels, **kw):
        return cls("voxel", resolution=resolution, channels=channels, **kw)

    @classmethod
    def triplane(cls, resolution, channels, **kw):
        return cls("triplane", resolution=resolution, channels=channels, **kw)

    @classmethod
    def mlp(cls, widths, activation="tanh", **kw):
        return cls("mlp", widths=tuple(widths), activation=activation, **kw)

    @property
    def grid_shape(self):
        r, c = self.resolution, self.channels
        if self.kind == "voxel":
            return (r, r, r, c)
        if self.kind == "triplane":
            return (3, r, r, c)
        return (self.network().n_params,)

    @property
    def encoding_dim(self):
        return 3 + 6 * self.n_octaves + (3 if self.use_dirs else 0)

    def network(self):
        if self.kind != "mlp":
            raise FieldConfigError("only mlp fields carry a network")
        return MLP((self.encoding_dim, *self.widths, 4), self.activation)

    @property
    def n_params(self):
        return int(np.prod(self.grid_shape))


def parameter_count(spec):
    return spec.n_params


@dataclass
class FieldParams:
    spec: FieldSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.spec.n_params,):
            raise FieldConfigError(
                f"{self.spec.kind} field expects {self.spec.n_params} values, got {self.data.shape}")

    def grid(self):
        """Structured view of ``data`` (shares memory)."""
        return self.data.reshape(self.spec.grid_shape)

    @classmethod
    def from_grid(cls, spec, grid):
        return cls(spec, np.ascontiguousarray(grid, dtype=np.float64).ravel())

    def copy(self):
        return FieldParams(self.spec, self.data.copy())

    def with_data(self, data):
        return FieldParams(self.spec, data)


def zero_origin(spec, seed=0):
    """The fixed origin at which gradient-origin embeddings are taken.

    Grids start from all-zero features. An all-zero MLP would have identical
    hidden units, so the MLP origin is a small seeded uniform draw in
    ``[-0.05, 0.05]``.
    """
    if spec.kind == "mlp":
        rng = np.random.default_rng(seed)
        return FieldParams(spec, rng.uniform(-0.05, 0.05, spec.n_params))
    return FieldParams(spec, np.zeros(spec.n_params))


def init_field(spec, seed=0):
    """Starting point for direct fitting: zeros for grids, fan-in init for MLPs."""
    if spec.kind == "mlp":
        return FieldParams(spec, spec.network().init(np.random.default_rng(seed)))
    return zero_origin(spec, seed)


@dataclass
class DecoderHead:
    """Shared decoder from interpolated features (+ direction) to raw outputs."""

    in_channels: int
    hidden: int = 128
    use_dirs: bool = False
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.params is None:
            self.params = np.zeros(self.network.n_params)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.network.n_params,):
            raise FieldConfigError(
                f"decoder expects {self.network.n_params} parameters, got {self.params.shape}")

    @property
    def network(self):
        n_in = self.in_channels + (3 if self.use_dirs else 0)
        return MLP((n_in, self.hidden, self.hidden, 4), "tanh")

    @property
    def n_params(self):
        return self.network.n_params

    @classmethod
    def create(cls, in_channels, seed=0, hidden=128, use_dirs=False):
        head = cls(in_channels, hidden, use_dirs)
        head.params = head.network.init(np.random.default_rng(seed))
        return head

    def with_params(self, params):
        return DecoderHead(self.in_channels, self.hidden, self.use_dirs, params)

    def copy(self):
        return self.with_params(self.params.copy())


def decoder_for(spec, seed=0, **kw):
    """Decoder matching ``spec``; a placeholder with no inputs for MLP fields."""
    channels = spec.channels if spec.kind != "mlp" else 1
    return DecoderHead.create(channels, seed, **kw)


def _check_decoder(spec, decoder):
    if spec.kind != "mlp" and decoder.in_channels != spec.channels:
        raise FieldConfigError(
            f"decoder takes {decoder.in_channels} channels but field has {spec.channels}")


def inside_bounds(spec, positions):
    lo, hi = np.asarray(spec.bounds[0]), np.asarray(spec.bounds[1])
    return np.all((positions >= lo) & (positions <= hi), axis=-1)


def _grid_coords(spec, positions):
    lo, hi = np.asarray(spec.bounds[0]), np.asarray(spec.bounds[1])
    u = (positions - lo) / (hi - lo) * (spec.resolution - 1)
    return np.clip(u, 0.0, spec.resolution - 1)


def _linear_1d(u, res):
    i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
    frac = u - i0
    return i0, frac


def interpolation_weights(spec, positions):
    """Row indices into the ``(rows, channels)`` feature table and weights.

    Voxel: 8 trilinear corners. Triplane: 4 bilinear corners on each of the
    three planes (12 entries); features of the planes are summed.
    """
    r = spec.resolution
    u = _grid_coords(spec, positions)
    i0, f = _linear_1d(u, r)
    if spec.kind == "voxel":
        idx, w = [], []
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1.0 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1.0 - f[:, 2]
                    idx.append(((i0[:, 0] + dx) * r + i0[:, 1] + dy) * r + i0[:, 2] + dz)
                    w.append(wx * wy * wz)
        return np.stack(idx, 1), np.stack(w, 1)
    if spec.kind == "triplane":
        idx, w = [], []
        for k, (a, b) in enumerate(PLANE_AXES):
            for da in (0, 1):
                wa = f[:, a] if da else 1.0 - f[:, a]
                for db in (0, 1):
                    wb = f[:, b] if db else 1.0 - f[:, b]
                    idx.append((k * r + i0[:, a] + da) * r + i0[:, b] + db)
                    w.append(wa * wb)
        return np.stack(idx, 1), np.stack(w, 1)
    raise FieldConfigError("mlp fields are not interpolated")


def feature_table(params):
    spec = params.spec
    return params.data.reshape(-1, spec.channels)


def interpolate(params, positions):
    """Pre-decoder feature vectors, shape ``(M, channels)``."""
    idx, w = interpolation_weights(params.spec, positions)
    table = feature_table(params)
    return np.einsum("mk,mkc->mc", w, table[idx])


def scatter_features(spec, idx, w, grad_features):
    """Adjoint of :func:`interpolate` for fixed positions."""
    c = spec.channels
    n_rows = spec.n_params // c
    flat_idx = (idx[..., None] * c + np.arange(c)).ravel()
    weights = (w[..., None] * grad_features[:, None, :]).ravel()
    return np.bincount(flat_idx, weights=weights, minlength=n_rows * c)


def positional_encoding(positions, n_octaves):
    freqs = (2.0 ** np.arange(n_octaves)) * np.pi
    ang = positions[:, :, None] * freqs
    return np.concatenate([positions, np.sin(ang).reshape(len(positions), -1),
                           np.cos(ang).reshape(len(positions), -1)], axis=1)


class FieldEval:
    """Forward evaluation of a field on in-bounds points, with a cache for
    the reverse pass."""

    def __init__(self, params, decoder, positions, view_dirs):
        spec = params.spec
        _check_decoder(spec, decoder)
        self.params, self.decoder = params, decoder
        self.n = len(positions)
        if spec.kind == "mlp":
            net = spec.network()
            x = positional_encoding(positions, spec.n_octaves)
            if spec.use_dirs:
                x = np.concatenate([x, view_dirs], axis=1)
            self.out, self._cache = net.forward(params.data, x)
            self._net = net
            return
        self._idx, self._w = interpolation_weights(spec, positions)
        net = decoder.network
        self._net = net
        # an all-zero grid decodes to the same row everywhere when the decoder
        # ignores directions, so evaluate that row once and broadcast
        self._constant = not decoder.use_dirs and not params.data.any()
        if self._constant:
            feats = np.zeros((1, spec.channels))
        else:
            feats = np.einsum("mk,mkc->mc", self._w, feature_table(params)[self._idx])
        if decoder.use_dirs:
            feats = np.concatenate([feats, view_dirs], axis=1)
        out, self._cache = net.forward(decoder.params, feats)
        self.out = np.broadcast_to(out, (self.n, 4)) if self._constant else out

    def backward(self, upstream, need_decoder=True):
        """Gradients of ``sum(upstream * out)``: ``(grad_params, grad_decoder)``."""
        spec = self.params.spec
        if spec.kind == "mlp":
            g, _ = self._net.backward(self.params.data, self._cache, upstream, need_input=False)
            return g, np.zeros(self.decoder.n_params)
        net, dec = self._net, self.decoder.params
        if self._constant:
            # the network Jacobian is shared by every sample: rows of J are the
            # input gradients for unit cotangents on each of the 4 outputs
            g_dec, _ = net.backward(dec, self._cache, upstream.sum(axis=0, keepdims=True),
                                    need_input=False)
            jac = np.stack([net.backward(dec, self._cache, e[None], need_input=True)[1][0]
                            for e in np.eye(4)])
            g_feat = upstream @ jac
        else:
            g_dec, g_feat = net.backward(dec, self._cache, upstream, need_input=True)
        g_feat = g_feat[:, :spec.channels]
        g_params = scatter_features(spec, self._idx, self._w, g_feat)
        if not need_decoder:
            g_dec = np.zeros_like(dec)
        return g_params, g_dec


def query(params, decoder, positions, view_dirs):
    """Raw ``(sigma_raw, rgb_raw)`` per point, shape ``(M, 4)``.

    Points outside the field bounds are empty: ``sigma_raw = -inf`` (zero
    density after activation) and ``rgb_raw = 0``.
    """
    positions = np.asarray(positions, dtype=np.float64)
    view_dirs = np.asarray(view_dirs, dtype=np.float64)
    _check_decoder(params.spec, decoder)
    out = np.zeros((len(positions), 4))
    out[:, 0] = -np.inf
    mask = inside_bounds(params.spec, positions)
    if mask.any():
        out[mask] = FieldEval(params, decoder, positions[mask], view_dirs[mask]).out
    return out


def query_vjp(params, decoder, positions, view_dirs, upstream):
    """Reverse-mode gradients of ``sum(upstream * query(...))``."""
    positions = np.asarray(positions, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (len(positions), 4):
        raise ValueError(f"upstream must have shape ({len(positions)}, 4)")
    mask = inside_bounds(params.spec, positions)
    if not mask.any():
        return np.zeros(params.spec.n_params), np.zeros(decoder.n_params)
    ev = FieldEval(params, decoder, positions[mask], np.asarray(view_dirs, float)[mask])
    return ev.backward(upstream[mask])
