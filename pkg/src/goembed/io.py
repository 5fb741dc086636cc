"""On-disk formats: PNG views with ``cameras.json``, GOEM checkpoints,
flat ``key=value`` configs and JSON-lines metric logs.

GOEM checkpoint layout (all little-endian)::

    b"GOEM" | u32 version | u8 kind (0 voxel, 1 triplane, 2 mlp)
    u32 n_spec_ints | n_spec_ints x u32
    u32 n_params    | n_params x f32
    u32 n_dec_ints  | n_dec_ints x u32      (0 when no decoder is stored)
    u32 n_dec_params| n_dec_params x f32

Spec integers: voxel/triplane ``[resolution, channels]``; mlp
``[n_hidden, *widths, activation, n_octaves, use_dirs]``. Decoder integers:
``[in_channels, hidden, use_dirs]``. Field bounds are not stored; the default
``[-1, 1]^3`` is assumed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .fields import DecoderHead, FieldParams, FieldSpec
from .geometry import CameraView

MAGIC = b"GOEM"
VERSION = 1
_KIND_CODES = {"voxel": 0, "triplane": 1, "mlp": 2}
_ACTS = ("relu", "tanh", "softplus")


class CheckpointError(ValueError):
    pass


def quantize(image):
    """Round to the 8-bit grid used by PNG files."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def save_png(path, image):
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def load_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def camera_to_json(cam, image_name):
    return {"image": image_name, "cam2world": [float(v) for v in cam.cam2world.ravel()],
            "fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx), "cy": float(cam.cy),
            "near": float(cam.near), "far": float(cam.far)}


def save_views(views, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, view in enumerate(views):
        name = f"{i:04d}.png"
        save_png(out / name, view.image)
        entries.append(camera_to_json(view, name))
    with open(out / "cameras.json", "w") as f:
        json.dump(entries, f, indent=1)


def load_views(scene_dir):
    """Views of one scene directory, in ``cameras.json`` order."""
    scene_dir = Path(scene_dir)
    path = scene_dir / "cameras.json"
    try:
        with open(path) as f:
            entries = json.load(f)
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc}") from exc
    views = []
    for e in entries:
        img = load_png(scene_dir / e["image"])
        views.append(CameraView(img, np.asarray(e["cam2world"]).reshape(4, 4), e["fx"], e["fy"],
                                e["cx"], e["cy"], e["near"], e["far"], name=e["image"]))
    return views


def load_cameras(path):
    """Cameras of a ``cameras.json`` without reading any image."""
    with open(path) as f:
        entries = json.load(f)
    h = w = None
    cams = []
    for e in entries:
        img_path = Path(path).parent / e["image"]
        if img_path.exists():
            with Image.open(img_path) as im:
                w, h = im.size
        else:
            h, w = int(round(2 * e["cy"])), int(round(2 * e["cx"]))
        cams.append(CameraView(None, np.asarray(e["cam2world"]).reshape(4, 4), e["fx"], e["fy"],
                               e["cx"], e["cy"], e["near"], e["far"], size=(h, w), name=e["image"]))
    return cams


def _spec_ints(spec):
    if spec.kind == "mlp":
        return [len(spec.widths), *spec.widths, _ACTS.index(spec.activation), spec.n_octaves,
                int(spec.use_dirs)]
    return [spec.resolution, spec.channels]


def _spec_from_ints(kind, ints):
    if kind == "mlp":
        n = ints[0]
        widths = tuple(ints[1:1 + n])
        act, octaves, dirs = ints[1 + n:4 + n]
        return FieldSpec.mlp(widths, _ACTS[act], n_octaves=octaves, use_dirs=bool(dirs))
    return FieldSpec(kind, resolution=ints[0], channels=ints[1])


def _u32s(values):
    return struct.pack(f"<I{len(values)}I", len(values), *values)


def _f32s(values):
    arr = np.asarray(values, dtype="<f4")
    return struct.pack("<I", len(arr)) + arr.tobytes()


def encode_checkpoint(params, decoder=None):
    blob = bytearray(MAGIC)
    blob += struct.pack("<IB", VERSION, _KIND_CODES[params.spec.kind])
    blob += _u32s(_spec_ints(params.spec))
    blob += _f32s(params.data)
    if decoder is None:
        blob += _u32s([]) + _f32s([])
    else:
        blob += _u32s([decoder.in_channels, decoder.hidden, int(decoder.use_dirs)])
        blob += _f32s(decoder.params)
    return bytes(blob)


def decode_checkpoint(blob):
    """Returns ``(FieldParams, DecoderHead or None)``."""
    if blob[:4] != MAGIC:
        raise CheckpointError("not a GOEM checkpoint (bad magic)")
    pos = 4
    version, code = struct.unpack_from("<IB", blob, pos)
    pos += 5
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = {v: k for k, v in _KIND_CODES.items()}.get(code)
    if kind is None:
        raise CheckpointError(f"unknown field kind code {code}")

    def ints():
        nonlocal pos
        (n,) = struct.unpack_from("<I", blob, pos)
        vals = list(struct.unpack_from(f"<{n}I", blob, pos + 4))
        pos += 4 + 4 * n
        return vals

    def floats():
        nonlocal pos
        (n,) = struct.unpack_from("<I", blob, pos)
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos + 4).astype(np.float64)
        pos += 4 + 4 * n
        return arr

    spec = _spec_from_ints(kind, ints())
    params = FieldParams(spec, floats())
    dec_ints = ints()
    dec_params = floats()
    decoder = None
    if dec_ints:
        decoder = DecoderHead(dec_ints[0], dec_ints[1], bool(dec_ints[2]), dec_params)
    return params, decoder


def save_checkpoint(path, params, decoder=None):
    Path(path).write_bytes(encode_checkpoint(params, decoder))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def read_config(path):
    """Flat ``key=value`` file; ``#`` starts a comment. Values stay strings."""
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def write_config(path, cfg):
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in cfg.items()))


def write_log(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_log(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
