import numpy as np
import pytest

from goembed.fields import DecoderHead, FieldParams, FieldSpec, decoder_for
from goembed.geometry import CameraView, look_at


def small_camera(res=4, eye=(0.3, -2.2, 1.1), image=None, fov=40.0):
    focal = 0.5 * res / np.tan(np.radians(fov) / 2)
    dist = float(np.linalg.norm(eye))
    return CameraView(image, look_at(np.asarray(eye, float)), focal, focal, res / 2, res / 2,
                      dist - 1.8, dist + 1.8, size=(res, res))


def random_field(spec, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    if spec.kind == "mlp":
        return FieldParams(spec, spec.network().init(rng, scale=1.0))
    return FieldParams(spec, rng.normal(0.0, scale, spec.n_params))


SPECS = {
    "voxel": FieldSpec.voxel(4, 3),
    "triplane": FieldSpec.triplane(8, 3),
    "mlp": FieldSpec.mlp((16, 16)),
}


def small_decoder(spec, seed=1, hidden=16):
    return decoder_for(spec, seed, hidden=hidden)


def central_diff(fn, x, idx, h=1e-5):
    """Central finite differences of scalar ``fn`` at coordinates ``idx``."""
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        out[n] = (fn(xp) - fn(xm)) / (2 * h)
    return out


def rel_err(a, b, floor=1e-10):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
