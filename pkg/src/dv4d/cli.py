"""Command-line entry points: data generation, training, evaluation,
rendering, gradient checks, and a rasterizer benchmark.

Config files are flat key -> value documents (TOML or JSON) whose keys
mirror TrainConfig fields; command-line flags win over file values.
DV4D_THREADS caps worker threads everywhere.
"""

import argparse
import dataclasses
import glob
import json
import os
import sys
import time

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:           # python < 3.11
    import tomli as tomllib

from .harness import (TrainConfig, evaluate, generate_dataset, train_stage)
from .model import init_model, load_model
from .numerics import grad_check, tensor
from .synth import read_clip


def load_config(path) -> dict:
    """Flat key-value config from a .toml or .json file."""
    if str(path).endswith(".json"):
        with open(path) as fh:
            doc = json.load(fh)
    else:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}; "
                         f"valid keys: {sorted(known)}")
    return doc


def _load_clips(clip_dir):
    paths = sorted(glob.glob(os.path.join(clip_dir, "*.dv4d")))
    if not paths:
        raise FileNotFoundError(f"no .dv4d clips under {clip_dir}")
    return [read_clip(p) for p in paths]


def cmd_gen(args):
    paths = generate_dataset(args.out, args.count, seed=args.seed,
                             n_views=args.views, n_frames=args.frames,
                             height=args.height, width=args.width,
                             dynamic=not args.static)
    print(f"wrote {len(paths)} clips to {args.out}")
    return 0


def cmd_train(args):
    doc = load_config(args.config) if args.config else {}
    if args.stage is not None:
        doc["stage"] = args.stage
    cfg = TrainConfig(**doc)
    clips = _load_clips(args.clips)
    if args.model:
        model = load_model(args.model)
    else:
        model = init_model(cfg.model_config(), seed=cfg.seed)
    model, trace = train_stage(model, clips, cfg, out_dir=args.out)
    print(f"stage {cfg.stage}: {len(trace)} steps, "
          f"loss {trace[0]:.4f} -> {trace[-1]:.4f}, saved to {args.out}")
    return 0


def cmd_eval(args):
    model = load_model(args.model)
    clips = _load_clips(args.clips)
    reports, agg = evaluate(model, clips, report_path=args.report,
                            zero_velocity=args.zero_velocity,
                            align=not args.no_align)
    for key, val in agg.to_dict().items():
        print(f"{key:14s} {val:.6f}")
    print(f"report written to {args.report}")
    return 0


def cmd_render(args):
    from .rasterizer import render_scene_file
    render_scene_file(args.scene, args.out)
    print(f"wrote {args.out}.png and {args.out}.dv4d")
    return 0


# ------------------------------------------------------------------ gradcheck

def _check_numerics(seed):
    from .numerics import softmax
    r = np.random.default_rng(seed)
    w = tensor(r.normal(size=(4, 4)))

    def f(x):
        return (softmax(x @ w, axis=-1) * x).sum()

    return [("matmul+softmax", grad_check(f, tensor(r.normal(size=(3, 4)),
                                                    requires_grad=True)))]


def _check_encoder(seed):
    from .encoder import EncoderConfig, aa_forward, init_encoder_params
    cfg = EncoderConfig(patch_size=4, dim=8, depth=1, n_heads=2,
                        height=8, width=8, max_frames=2)
    params = init_encoder_params(cfg, seed)
    r = np.random.default_rng(seed)
    imgs = r.uniform(size=(2, 3, 8, 8))

    def f(x):
        params2 = dict(params, patch_w=x)
        return aa_forward(imgs, params2, cfg).patches.sum()

    return [("aa_forward/patch_w", grad_check(f, params["patch_w"]))]


def _check_mta(seed):
    from .encoder import EncoderConfig, aa_forward, init_encoder_params
    from .mta import MtaConfig, init_mta_params, mta_forward
    ecfg = EncoderConfig(patch_size=4, dim=8, depth=1, n_heads=2,
                         height=8, width=8, max_frames=3)
    mcfg = MtaConfig(dim=8, depth=1, n_heads=2, n_motion=2)
    eparams = init_encoder_params(ecfg, seed)
    mparams = init_mta_params(mcfg, seed + 1)
    r = np.random.default_rng(seed)
    clips = r.uniform(size=(2, 2, 3, 8, 8))
    tokensets = [aa_forward(clips[t], eparams, ecfg, frame_index=t)
                 for t in range(2)]

    def f(x):
        p2 = dict(mparams)
        p2["mta.0.wq"] = x
        return mta_forward(tokensets, p2, mcfg).patches.sum()

    return [("mta_forward/wq", grad_check(f, mparams["mta.0.wq"]))]


def _check_heads(seed):
    from .heads import (HeadConfig, appearance_features, decode_velocities,
                        fuse, gaussian_decode, init_gaussians,
                        init_head_params, predict_future)
    cfg = HeadConfig(dim=8, channels=4, patch_size=4, feature_stride=2,
                     n_motion=2, height=8, width=8)
    params = init_head_params(cfg, seed)
    r = np.random.default_rng(seed)
    tokens = tensor(r.normal(size=(4, 8)), requires_grad=True)

    def f(x):
        return predict_future(x, params, cfg).sum()

    checks = [("predict_future/tokens", grad_check(f, tokens))]

    img = r.uniform(size=(3, 8, 8))
    cam_vec = tensor(np.array([1.0, 0, 0, 0, 0, 0, 0, 1.0, 1.0]))
    motion = tensor(r.normal(size=(2, 8)))
    tokens_g = tensor(r.normal(size=(4, 8)), requires_grad=True)

    def g(x):
        f_g, depth = gaussian_decode(x, params, cfg)
        f_app = appearance_features(img, params, cfg)
        gs, mix = init_gaussians(fuse(f_app, f_g), depth, cam_vec, params, cfg)
        vel = decode_velocities(mix, motion, params)
        return (gs.mu * gs.color_logit).sum() + gs.log_scale.sum() \
            + gs.quat.sum() + gs.opacity_logit.sum() + (vel * vel).sum()

    checks.append(("gaussian_head/tokens", grad_check(g, tokens_g)))
    return checks


def _check_rasterizer(seed):
    from .heads import DecodedCamera, GaussianSet
    from .rasterizer import render
    r = np.random.default_rng(seed)
    n = 5
    # depths kept far apart so finite differences cannot flip the sort
    mu = tensor(np.column_stack([r.uniform(-0.5, 0.5, n),
                                 r.uniform(-0.5, 0.5, n),
                                 np.linspace(2.0, 3.2, n)]),
                requires_grad=True)
    colors = tensor(r.normal(size=(n, 3)))

    def f(x):
        g = GaussianSet(mu=x, log_scale=tensor(np.zeros((n, 3))),
                        quat=tensor(np.tile([1.0, 0, 0, 0], (n, 1))),
                        color_logit=colors,
                        opacity_logit=tensor(np.zeros(n)),
                        velocity=tensor(np.zeros((n, 3))), t=0.0)
        cam = DecodedCamera(rot=tensor(np.eye(3)), trans=tensor(np.zeros(3)),
                            fx=tensor(16.0), fy=tensor(16.0), cx=7.5, cy=7.5,
                            width=16, height=16)
        out = render(g, cam)
        return out.color.sum() + out.alpha.sum() + out.depth.sum()

    return [("render/mu", grad_check(f, mu, h=1e-4, tol=1e-3))]


def _check_losses(seed):
    from .losses import LossWeights, loss_cam, loss_geo, loss_render, loss_temp
    r = np.random.default_rng(seed)
    gt = r.normal(size=(3, 4, 4)) + np.array([0, 0, 3.0])[:, None, None]
    valid = r.uniform(size=(4, 4)) > 0.3
    pred = tensor(gt + r.normal(scale=0.2, size=gt.shape), requires_grad=True)

    def f(x):
        return loss_geo(x, gt, valid)[0]

    checks = [("loss_geo", grad_check(f, pred))]

    gt2 = gt + r.normal(scale=0.05, size=gt.shape)
    base = tensor(gt + r.normal(scale=0.2, size=gt.shape))
    pred2 = tensor(gt2 + r.normal(scale=0.2, size=gt.shape),
                   requires_grad=True)

    def ft(x):
        return loss_temp(base, x, gt, gt2, [valid])[0]

    checks.append(("loss_temp", grad_check(ft, pred2)))

    # keep the leading quat component away from the sign-canonicalization
    # boundary so finite differences stay on one branch
    gvec = r.normal(size=(2, 9))
    gvec[:, 0] = 1.0 + np.abs(gvec[:, 0])
    pvec = tensor(gvec + r.normal(scale=0.1, size=(2, 9)),
                  requires_grad=True)

    def fc(x):
        return loss_cam(x, gvec)

    checks.append(("loss_cam", grad_check(fc, pvec)))

    w = LossWeights()
    gt_img = r.uniform(size=(3, 6, 6))
    sup_depth = r.uniform(2.0, 5.0, size=(6, 6))
    teacher = r.uniform(2.0, 5.0, size=(6, 6))
    gt_flow = r.normal(size=(9, 3))
    pred_img = tensor(gt_img + r.normal(scale=0.1, size=(3, 6, 6)),
                      requires_grad=True)
    gs_depth = tensor(sup_depth + r.normal(scale=0.3, size=(6, 6)),
                      requires_grad=True)
    pred_flow = tensor(gt_flow + r.normal(scale=0.2, size=(9, 3)),
                       requires_grad=True)

    def fr_img(x):
        return loss_render(x, gt_img, gs_depth, sup_depth, gs_depth,
                           teacher, w, pred_flow, gt_flow)[0]

    def fr_depth(x):
        return loss_render(pred_img, gt_img, x, sup_depth, x,
                           teacher, w, pred_flow, gt_flow)[0]

    def fr_flow(x):
        return loss_render(pred_img, gt_img, gs_depth, sup_depth, gs_depth,
                           teacher, w, x, gt_flow)[0]

    checks.append(("loss_render/image", grad_check(fr_img, pred_img)))
    checks.append(("loss_render/depth", grad_check(fr_depth, gs_depth)))
    checks.append(("loss_render/flow", grad_check(fr_flow, pred_flow)))
    return checks


GRADCHECKS = {
    "numerics": _check_numerics,
    "encoder": _check_encoder,
    "mta": _check_mta,
    "heads": _check_heads,
    "rasterizer": _check_rasterizer,
    "losses": _check_losses,
}


def cmd_gradcheck(args):
    names = list(GRADCHECKS) if args.module == "all" else [args.module]
    failed = 0
    for name in names:
        for label, report in GRADCHECKS[name](args.seed):
            print(f"{name:11s} {label:22s} {report}")
            failed += 0 if report.passed else 1
    return 1 if failed else 0


def cmd_bench(args):
    from .heads import DecodedCamera, GaussianSet
    from .rasterizer import render
    r = np.random.default_rng(0)
    n = args.gaussians
    h = w = args.size
    g = GaussianSet(
        mu=tensor(np.column_stack([r.uniform(-1, 1, n), r.uniform(-1, 1, n),
                                   r.uniform(2, 6, n)]), requires_grad=True),
        log_scale=tensor(np.full((n, 3), -2.0), requires_grad=True),
        quat=tensor(np.tile([1.0, 0, 0, 0], (n, 1)), requires_grad=True),
        color_logit=tensor(r.normal(size=(n, 3)), requires_grad=True),
        opacity_logit=tensor(np.zeros(n), requires_grad=True),
        velocity=tensor(np.zeros((n, 3)), requires_grad=True), t=0.0)
    cam = DecodedCamera(rot=tensor(np.eye(3)), trans=tensor(np.zeros(3)),
                        fx=tensor(w / 2.0), fy=tensor(w / 2.0),
                        cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, width=w, height=h)
    fwd, bwd = [], []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        out = render(g, cam)
        t1 = time.perf_counter()
        out.color.sum().backward()
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        bwd.append(t2 - t1)
    print(f"rasterizer {n} gaussians at {w}x{h}, {args.iters} iters, "
          f"threads {os.environ.get('DV4D_THREADS', '1')}")
    print(f"forward  median {np.median(fwd)*1e3:8.2f} ms")
    print(f"backward median {np.median(bwd)*1e3:8.2f} ms")
    return 0


def build_parser():
    par = argparse.ArgumentParser(prog="dv4d",
                                  description="dynamic point maps plus "
                                              "velocity gaussian splatting")
    sub = par.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic clips")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--static", action="store_true",
                   help="freeze all objects")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--config", help="flat TOML or JSON config")
    p.add_argument("--clips", required=True, help="directory of .dv4d clips")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model", help="warm-start model bundle")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on clips")
    p.add_argument("--model", required=True)
    p.add_argument("--clips", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--zero-velocity", action="store_true")
    p.add_argument("--no-align", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a scene file")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference spot checks")
    p.add_argument("--module", default="all",
                   choices=["all"] + sorted(GRADCHECKS))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="rasterizer timing")
    p.add_argument("--rasterizer", action="store_true", default=True)
    p.add_argument("--gaussians", type=int, default=500)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--iters", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return par


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
