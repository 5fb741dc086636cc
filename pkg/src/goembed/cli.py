"""Command-line entry point: ``goembed <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command that
accepts ``--config FILE`` reads flat ``key=value`` lines whose keys are the
long flag names (``rays-per-step`` or ``rays_per_step``); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datagen, io
from .diffusion import (FusionConfig, TokenDenoiser, make_schedule, pseudo_deterministic_recon,
                        sample, train_fusion)
from .embedding import GOEmbedConfig, goembed_encode
from .fields import DecoderHead, FieldSpec, decoder_for
from .metrics import psnr, ssim
from .renderer import RenderConfig, render, set_num_threads
from .training import (PEConfig, ReconConfig, SceneDataset, SSOConfig, TokenBackbone,
                       evaluate_plenoptic, fit_sso, load_dataset, train_goembed_recon,
                       train_plenoptic_encoder)


class UsageError(Exception):
    pass


def parse_spec(text):
    """``voxel:R:C``, ``triplane:R:C`` or ``mlp:W1,W2,...``."""
    parts = text.split(":")
    try:
        if parts[0] in ("voxel", "triplane") and len(parts) == 3:
            return FieldSpec(parts[0], resolution=int(parts[1]), channels=int(parts[2]))
        if parts[0] == "mlp" and len(parts) == 2:
            return FieldSpec.mlp(tuple(int(w) for w in parts[1].split(",")))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad field spec {text!r}: {exc}") from exc
    raise argparse.ArgumentTypeError(
        f"bad field spec {text!r}; expected voxel:R:C, triplane:R:C or mlp:W1,W2")


def spec_string(spec):
    if spec.kind == "mlp":
        return "mlp:" + ",".join(str(w) for w in spec.widths)
    return f"{spec.kind}:{spec.resolution}:{spec.channels}"


# ---------------------------------------------------------------------------
# model files (decoder plus optional backbone or denoiser) as npz


def save_model(path, spec, decoder, backbone=None, denoiser=None, extra=None):
    arrays = {"spec": np.array(spec_string(spec)), "decoder_params": decoder.params,
              "decoder_ints": np.array([decoder.in_channels, decoder.hidden, int(decoder.use_dirs)])}
    if backbone is not None:
        arrays["backbone_params"] = backbone.params
        arrays["backbone_ints"] = np.array([backbone.patch, backbone.hidden])
    if denoiser is not None:
        arrays["denoiser_params"] = denoiser.params
        arrays["denoiser_ints"] = np.array([denoiser.patch, denoiser.net.sizes[1], denoiser.t_dim,
                                            int(denoiser.cond_skip), int(denoiser.cond_norm)])
    for k, v in (extra or {}).items():
        arrays[k] = np.array(v)
    np.savez(path, **arrays)


def load_model(path):
    with np.load(path) as z:
        spec = parse_spec(str(z["spec"]))
        a, h, d = (int(v) for v in z["decoder_ints"])
        out = {"spec": spec, "decoder": DecoderHead(a, h, bool(d), z["decoder_params"])}
        if "backbone_params" in z:
            patch, hidden = (int(v) for v in z["backbone_ints"])
            bb = TokenBackbone(spec, patch, hidden)
            bb.params = z["backbone_params"].copy()
            out["backbone"] = bb
        if "denoiser_params" in z:
            patch, hidden, t_dim, skip, norm = (int(v) for v in z["denoiser_ints"])
            den = TokenDenoiser(spec, patch, hidden, t_dim, cond_skip=bool(skip),
                                cond_norm=bool(norm))
            den.params = z["denoiser_params"].copy()
            out["denoiser"] = den
        for key in ("schedule", "T", "scale_mode"):
            if key in z:
                out[key] = z[key].item()
    return out


# ---------------------------------------------------------------------------
# commands


def _scene_dirs(root):
    root = Path(root)
    if (root / "cameras.json").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "cameras.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no cameras.json in {root} or its sub-directories")
    return dirs


def cmd_datagen(a):
    out = Path(a.out)
    for i in range(a.scenes):
        seed = a.seed + i
        kw = dict(n_views=a.views, resolution=a.resolution, radius=a.radius, fov=a.fov)
        spec = datagen.sphere_box_scene(seed=seed, **kw) if a.scene == "sphere-box" else \
            datagen.random_scene(seed, **kw)
        datagen.render_dataset(spec, out / f"scene_{i:04d}")
    print(f"wrote {a.scenes} scene(s) of {a.views} views to {out}")


def cmd_fit_sso(a):
    views = io.load_views(_scene_dirs(a.scene)[0])
    if a.heldout >= len(views):
        raise UsageError(f"--heldout {a.heldout} leaves no training views")
    train = views[:len(views) - a.heldout]
    held = views[len(views) - a.heldout:] or None
    cfg = SSOConfig(steps=a.steps, rays_per_step=a.rays_per_step, lr_field=a.lr_field,
                    lr_decoder=a.lr_decoder, log_every=a.log_every, seed=a.seed)
    log = []
    params, decoder, metrics = fit_sso(train, a.spec, cfg, held, log)
    io.save_checkpoint(a.out, params, decoder)
    if a.log:
        io.write_log(a.log, log)
    print(json.dumps(metrics, sort_keys=True))


def _load_decoder(path, spec, seed):
    if path is None:
        return decoder_for(spec, seed)
    if str(path).endswith(".npz"):
        return load_model(path)["decoder"]
    _, dec = io.load_checkpoint(path)
    if dec is None:
        raise ValueError(f"{path} holds no decoder")
    return dec


def cmd_encode(a):
    views = io.load_views(_scene_dirs(a.views)[0])
    decoder = _load_decoder(a.decoder, a.spec, a.seed)
    gcfg = GOEmbedConfig(scale_mode=a.scale_mode, render=RenderConfig(n_samples=a.samples))
    emb = goembed_encode(a.spec, decoder, views, gcfg, a.seed)
    io.save_checkpoint(a.out, emb, decoder)
    print(f"wrote {a.spec.kind} embedding ({a.spec.n_params} values) to {a.out}")


def _write_run(out, cfg_dict, log, metrics):
    out.mkdir(parents=True, exist_ok=True)
    io.write_config(out / "config.txt", cfg_dict)
    io.write_log(out / "log.jsonl", log)
    with open(out / "metrics.json", "w") as f:
        json.dump(metrics, f, indent=1, sort_keys=True)


def _pe_dict(a):
    return {"spec": spec_string(a.spec), "k": a.k, "l": a.l, "steps": a.steps, "lr": a.lr,
            "rays_per_term": a.rays_per_term, "scale_mode": a.scale_mode, "seed": a.seed}


def _pe_config(a, cls=PEConfig, **kw):
    return cls(k=a.k, l=a.l, steps=a.steps, lr=a.lr, rays_per_term=a.rays_per_term,
               goembed=GOEmbedConfig(scale_mode=a.scale_mode), log_every=a.log_every,
               seed=a.seed, **kw)


def _summary(ev):
    return {k: v for k, v in ev.items() if k != "per_scene"}


def cmd_train_pe(a):
    data = load_dataset(a.data)
    cfg = _pe_config(a)
    log = []
    decoder = train_plenoptic_encoder(data, a.spec, cfg, log=log)
    out = Path(a.out)
    metrics = _summary(evaluate_plenoptic(data, decoder, a.spec, cfg))
    _write_run(out, _pe_dict(a), log, metrics)
    save_model(out / "model.npz", a.spec, decoder)
    print(json.dumps(metrics, sort_keys=True))


def cmd_train_recon(a):
    data = load_dataset(a.data)
    cfg = _pe_config(a, ReconConfig, lr_backbone=a.lr_backbone)
    backbone = TokenBackbone(a.spec, a.patch, a.hidden, a.seed)
    log = []
    backbone, decoder = train_goembed_recon(data, backbone, a.spec, cfg, log=log)
    out = Path(a.out)
    metrics = _summary(evaluate_plenoptic(data, decoder, a.spec, cfg, transform=backbone))
    _write_run(out, _pe_dict(a) | {"lr_backbone": a.lr_backbone, "patch": a.patch,
                                   "hidden": a.hidden}, log, metrics)
    save_model(out / "model.npz", a.spec, decoder, backbone=backbone)
    print(json.dumps(metrics, sort_keys=True))


def cmd_train_fusion(a):
    data = load_dataset(a.data)
    cfg = FusionConfig(schedule=a.schedule, T=a.T, lr=a.lr, lr_decoder=a.lr_decoder,
                       dropout_p=a.dropout_p, k=a.k, l=a.l, steps=a.steps,
                       rays_per_term=a.rays_per_term, patch=a.patch, hidden=a.hidden,
                       goembed=GOEmbedConfig(scale_mode=a.scale_mode), log_every=a.log_every,
                       seed=a.seed)
    log = []
    denoiser, decoder, totals = train_fusion(data, a.spec, cfg, log)
    out = Path(a.out)
    metrics = {"initial_loss": float(np.mean(totals[:50])),
               "final_loss": float(np.mean(totals[-50:]))}
    cfg_dict = {"spec": spec_string(a.spec), "schedule": a.schedule, "T": a.T, "lr": a.lr,
                "lr_decoder": a.lr_decoder, "dropout_p": a.dropout_p, "k": a.k, "l": a.l,
                "steps": a.steps, "rays_per_term": a.rays_per_term, "patch": a.patch,
                "hidden": a.hidden, "scale_mode": a.scale_mode, "seed": a.seed}
    _write_run(out, cfg_dict, log, metrics)
    save_model(out / "model.npz", a.spec, decoder, denoiser=denoiser,
               extra={"schedule": a.schedule, "T": a.T, "scale_mode": a.scale_mode})
    print(json.dumps(metrics, sort_keys=True))


def _write_renders(params, decoder, cams, out, n_samples):
    out.mkdir(parents=True, exist_ok=True)
    cfg = RenderConfig(n_samples=n_samples)
    for cam in cams:
        io.save_png(out / cam.name, render(params, decoder, cam, cfg).image)


def cmd_sample(a):
    model = load_model(a.model)
    if "denoiser" not in model:
        raise ValueError(f"{a.model} holds no denoiser; train one with train-fusion")
    spec, decoder, den = model["spec"], model["decoder"], model["denoiser"]
    sched = make_schedule(model.get("schedule", "cosine"), int(model.get("T", 1000)))
    cond = None
    if a.context:
        views = io.load_views(_scene_dirs(a.context)[0])[:a.k]
        gcfg = GOEmbedConfig(scale_mode=model.get("scale_mode", "none"))
        cond = goembed_encode(spec, decoder, views, gcfg, a.seed)
    if a.pseudo:
        if cond is None:
            raise UsageError("--pseudo needs --context views")
        z = pseudo_deterministic_recon(den, cond, sched, a.seed)
    else:
        z = sample(den, decoder, sched, a.guidance, cond, a.seed, spec=spec)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_checkpoint(out / "sample.goem", z, decoder)
    cams = datagen.turntable_cameras(a.turntable, resolution=a.resolution)
    _write_renders(z, decoder, cams, out / "turntable", a.samples)
    print(f"wrote {out / 'sample.goem'} and {a.turntable} turntable views")


def cmd_render(a):
    params, decoder = io.load_checkpoint(a.checkpoint)
    if decoder is None:
        raise ValueError(f"{a.checkpoint} holds no decoder")
    cams = io.load_cameras(a.cameras)
    _write_renders(params, decoder, cams, Path(a.out), a.samples)
    print(f"rendered {len(cams)} views to {a.out}")


def compare_dirs(dir_a, dir_b):
    """Mean PSNR and SSIM over the PNG files two directories share by name."""
    a, b = Path(dir_a), Path(dir_b)
    names = sorted(p.name for p in a.glob("*.png"))
    if not names:
        raise FileNotFoundError(f"no PNG files in {a}")
    missing = [n for n in names if not (b / n).exists()]
    if missing:
        raise FileNotFoundError(f"{b} lacks {missing[0]} ({len(missing)} missing)")
    ps, ss = [], []
    for n in names:
        x, y = io.load_png(a / n), io.load_png(b / n)
        ps.append(psnr(x, y))
        ss.append(ssim(x, y))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


def cmd_metrics(a):
    print(json.dumps(compare_dirs(a.dir_a, a.dir_b)))


# ---------------------------------------------------------------------------
# parser


def _add_pe_flags(p, steps):
    p.add_argument("--data", required=True, help="directory of scene sub-directories")
    p.add_argument("--spec", type=parse_spec, default="triplane:16:8")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=4, help="context views")
    p.add_argument("--l", type=int, default=2, help="target views")
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--rays-per-term", type=int, default=1024)
    p.add_argument("--scale-mode", default="per_tensor_std",
                   choices=("none", "per_tensor_std", "fixed_gain"))
    p.add_argument("--log-every", type=int, default=50)


def build_parser():
    parser = argparse.ArgumentParser(prog="goembed", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="render worker threads (default: $GOEMBED_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="key=value file of flag defaults")
        return p

    p = add("datagen", cmd_datagen, "render synthetic scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--fov", type=float, default=45.0)
    p.add_argument("--scene", choices=("random", "sphere-box"), default="random")

    p = add("fit-sso", cmd_fit_sso, "fit one field to one scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--spec", type=parse_spec, default="voxel:32:8")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--rays-per-step", type=int, default=1024)
    p.add_argument("--lr-field", type=float, default=1e-2)
    p.add_argument("--lr-decoder", type=float, default=1e-3)
    p.add_argument("--heldout", type=int, default=0, help="last N views are held out")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--log", default=None, help="JSON-lines metric log")

    p = add("encode", cmd_encode, "gradient-origin embedding of posed views")
    p.add_argument("--spec", type=parse_spec, required=True)
    p.add_argument("--views", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--decoder", default=None, help="checkpoint or model.npz with a decoder")
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--scale-mode", default="per_tensor_std",
                   choices=("none", "per_tensor_std", "fixed_gain"))

    p = add("train-pe", cmd_train_pe, "train the shared decoder for plenoptic encoding")
    _add_pe_flags(p, 1000)

    p = add("train-recon", cmd_train_recon, "train a reconstruction backbone over embeddings")
    _add_pe_flags(p, 1000)
    p.add_argument("--lr-backbone", type=float, default=3e-3)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--hidden", type=int, default=256)

    p = add("train-fusion", cmd_train_fusion, "train denoiser and decoder end to end")
    _add_pe_flags(p, 2000)
    p.set_defaults(rays_per_term=512, scale_mode="none", lr=5e-5)
    p.add_argument("--schedule", choices=("linear", "cosine"), default="cosine")
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--lr-decoder", type=float, default=1e-3)
    p.add_argument("--dropout-p", type=float, default=0.5)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--hidden", type=int, default=256)

    p = add("sample", cmd_sample, "sample a field with a trained denoiser")
    p.add_argument("--model", required=True, help="model.npz from train-fusion")
    p.add_argument("--out", required=True)
    p.add_argument("--context", default=None, help="scene directory to condition on")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--pseudo", action="store_true", help="single denoiser pass at t=T")
    p.add_argument("--turntable", type=int, default=8)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--samples", type=int, default=64)

    p = add("render", cmd_render, "render a checkpoint at given cameras")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cameras", required=True, help="cameras.json")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=64)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two image directories")
    p.set_defaults(func=cmd_metrics)
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    return parser, sub


def _apply_config(parser, sub, argv):
    """Re-parse with defaults from ``--config`` when one is given."""
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    cfg = io.read_config(path)
    subp = sub.choices[args.command]
    known = {a.dest for a in subp._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            subp.error(f"unknown key {key!r} in {path}")
        defaults[dest] = value
    subp.set_defaults(**defaults)
    return parser.parse_args(argv)


def run(argv=None):
    parser, sub = build_parser()
    try:
        args = _apply_config(parser, sub, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except OSError as exc:
        print(f"goembed: error: {exc}", file=sys.stderr)
        return 2
    if args.threads is not None:
        if args.threads < 1:
            print("goembed: error: --threads must be >= 1", file=sys.stderr)
            return 2
        set_num_threads(args.threads)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"goembed: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"goembed {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        if args.threads is not None:
            set_num_threads(None)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
