"""Two-stage training loop, optimizer, schedule, and evaluation.

Stage 1 fits cameras, depth, point maps, future points, and the
temporal term; stage 2 adds the splatting losses with one rendered
(view, source frame, target frame) sample per clip per step.  All
sampling comes from one seeded generator, so a fixed seed and a fixed
thread count reproduce a run bit for bit.

Paper-scale defaults are recorded as PAPER_* constants and via
TrainConfig.paper(); the class defaults are desk-scale overrides (a
from-scratch toy model needs a far larger learning rate than a
fine-tuned pretrained stack).
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .heads import camera_from_vector, with_velocity
from .losses import (LossWeights, loss_cam, loss_geo, loss_render, loss_temp,
                     stage1_total, stage2_total)
from .metrics import (MetricReport, accuracy_completeness, depth_metrics,
                      image_metrics, normal_consistency, umeyama_align)
from .model import (Model, ModelConfig, block_reduce, clip_camera_vector,
                    decode_clip_gaussians, forward, init_model, save_model)
from .numerics import DiffTensor, tensor
from .rasterizer import render
from .synth import (SKY_COLOR, future_pointmap, generate_clip,
                    random_scene_spec, write_clip)

PAPER_STAGE1_LR = 1e-6
PAPER_STAGE2_LR = 5e-5
PAPER_BATCH_IMAGES = 18
PAPER_WARMUP_FRAC = 0.5


def _env_threads():
    return max(1, int(os.environ.get("DV4D_THREADS", "1")))


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step} "
                         f"(loss {value!r})")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    epochs: int = 100
    peak_lr: float = 3e-3        # desk default; paper uses PAPER_STAGE*_LR
    warmup_frac: float = 0.5     # fraction of one epoch, linear ramp
    cosine: bool = True
    batch_images: int = 6        # image budget per step; paper uses 18
    delta_lo: int = 1
    delta_hi: int = 3
    seed: int = 0
    lambda_temp: float = 0.01
    lambda_gs: float = 0.1
    lambda_dist: float = 0.1
    lambda_flow: float = 0.01
    # model dims, so one flat document describes a whole experiment
    height: int = 64
    width: int = 64
    patch_size: int = 8
    dim: int = 64
    enc_depth: int = 2
    mta_depth: int = 2
    n_heads: int = 4
    n_motion: int = 8
    channels: int = 16
    feature_stride: int = 2
    max_frames: int = 8

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.peak_lr < 0:
            raise ValueError("peak learning rate cannot be negative")
        if self.warmup_frac < 0:
            raise ValueError("warmup fraction cannot be negative")
        if self.batch_images < 1:
            raise ValueError("batch must hold at least one image")
        if not 1 <= self.delta_lo <= self.delta_hi:
            raise ValueError(f"bad delta range "
                             f"[{self.delta_lo}, {self.delta_hi}]")

    @classmethod
    def paper(cls, stage: int) -> "TrainConfig":
        lr = PAPER_STAGE1_LR if stage == 1 else PAPER_STAGE2_LR
        return cls(stage=stage, peak_lr=lr, warmup_frac=PAPER_WARMUP_FRAC,
                   batch_images=PAPER_BATCH_IMAGES)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_temp=self.lambda_temp,
                           lambda_gs=self.lambda_gs,
                           lambda_dist=self.lambda_dist,
                           lambda_flow=self.lambda_flow)

    def model_config(self) -> ModelConfig:
        return ModelConfig(height=self.height, width=self.width,
                           patch_size=self.patch_size, dim=self.dim,
                           enc_depth=self.enc_depth, mta_depth=self.mta_depth,
                           n_heads=self.n_heads, n_motion=self.n_motion,
                           channels=self.channels,
                           feature_stride=self.feature_stride,
                           max_frames=self.max_frames)


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first warmup_frac of an epoch, then cosine.

    Hits the peak exactly at the end of warmup and 0 at total_steps.
    """
    if total_steps < 1:
        raise ValueError("schedule needs at least one step")
    per_epoch = total_steps / cfg.epochs
    warm = min(int(round(cfg.warmup_frac * per_epoch)), total_steps)
    if cfg.warmup_frac > 0:
        warm = max(warm, 1)
    if step < warm:
        return cfg.peak_lr * step / warm
    if not cfg.cosine:
        return cfg.peak_lr
    span = max(total_steps - warm, 1)
    progress = (step - warm) / span
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adaptive moments with decoupled weight decay, numpy state."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)


def _mean_terms(terms):
    if not terms:
        return tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def clip_stage1_losses(model: Model, pred, clip, weights: LossWeights):
    """All geometric losses over one clip; returns (total, float parts)."""
    v_count, t_count, delta = clip.n_views, clip.n_frames, clip.delta
    cam_terms, depth_terms, pt_terms, fut_terms, temp_terms = [], [], [], [], []
    for v in range(v_count):
        for t in range(t_count):
            cam_terms.append(loss_cam(pred.cameras[v][t],
                                      clip_camera_vector(clip, v, t)))
            term, empty = loss_geo(pred.depths[v][t], clip.depths[v, t],
                                   clip.valid[v, t])
            if not empty:
                depth_terms.append(term)
            term, empty = loss_geo(pred.pointmaps[v][t], clip.points[v, t],
                                   clip.valid[v, t])
            if not empty:
                pt_terms.append(term)
            fut = future_pointmap(clip, v, t, delta)
            term, empty = loss_geo(pred.futures[v][t], fut.points, fut.valid)
            if not empty:
                fut_terms.append(term)
        for t in range(t_count - delta):
            term, empty = loss_temp(pred.pointmaps[v][t],
                                    pred.pointmaps[v][t + delta],
                                    clip.points[v, t], clip.points[v, t + delta],
                                    [clip.valid[v, t], clip.valid[v, t + delta]])
            if not empty:
                temp_terms.append(term)
    l_cam = _mean_terms(cam_terms)
    l_depth = _mean_terms(depth_terms)
    l_pt = _mean_terms(pt_terms)
    l_fut = _mean_terms(fut_terms)
    l_temp = _mean_terms(temp_terms)
    total = stage1_total(l_cam, l_depth, l_pt, l_fut, l_temp, weights)
    parts = {"cam": float(l_cam.data), "depth": float(l_depth.data),
             "point": float(l_pt.data), "future": float(l_fut.data),
             "temp": float(l_temp.data)}
    return total, parts


def clip_render_losses(model: Model, pred, clip, view: int, t_src: int,
                       t_tgt: int, weights: LossWeights, depth_mask=None):
    """Splatting losses for one rendered sample; returns (total, parts).

    depth_mask optionally restricts direct depth supervision to a
    (n_views, n_frames, H, W) boolean subset, emulating sparse sensors;
    the distillation teacher stays dense.
    """
    cfg = model.cfg
    gset, gdepth = decode_clip_gaussians(model, pred, clip.images, view, t_src)
    cam = camera_from_vector(pred.cameras[view][t_tgt], cfg.width, cfg.height)
    out = render(gset, cam, t_render=float(t_tgt), background=tuple(SKY_COLOR))

    s = cfg.feature_stride
    teacher = block_reduce(pred.depths[view][t_src].data, s)
    dist_valid = block_reduce(clip.valid[view, t_src], s, "all")
    gt_flow = block_reduce(clip.flow[view, t_src], s).reshape(3, -1).T
    flow_valid = block_reduce(clip.valid[view, t_src], s, "all").ravel()
    depth_valid = clip.valid[view, t_tgt] & (out.alpha.data > 1e-3)
    if depth_mask is not None:
        depth_valid = depth_valid & np.asarray(depth_mask[view, t_tgt],
                                               dtype=bool)

    total, parts = loss_render(
        out.color, clip.images[view, t_tgt], out.depth,
        clip.depths[view, t_tgt], gdepth, teacher, weights,
        pred_flow=gset.velocity, gt_flow=gt_flow,
        depth_valid=depth_valid, dist_valid=dist_valid,
        flow_valid=flow_valid)
    return total, {k: float(v.data) for k, v in parts.items()}


def train_stage(model: Model, clips, cfg: TrainConfig, out_dir=None):
    """Optimize the model in place; returns (model, loss trace).

    Deterministic for a fixed seed and thread count.  Raises
    TrainingDiverged as soon as the loss stops being finite.
    """
    clips = list(clips)
    if not clips:
        raise ValueError("no clips to train on")
    weights = cfg.loss_weights()
    images_per_clip = clips[0].n_views * clips[0].n_frames
    per_batch = max(1, cfg.batch_images // images_per_clip)
    steps_per_epoch = max(1, math.ceil(len(clips) / per_batch))
    total_steps = cfg.epochs * steps_per_epoch

    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params)
    trace = []
    order, cursor = [], 0
    for step in range(total_steps):
        if cursor + per_batch > len(order):
            order = list(rng.permutation(len(clips)))
            cursor = 0
        batch = [clips[i] for i in order[cursor:cursor + per_batch]]
        cursor += per_batch

        opt.zero_grad()
        losses = []
        for clip in batch:
            pred = forward(model, clip.images)
            total, _ = clip_stage1_losses(model, pred, clip, weights)
            if cfg.stage == 2:
                view = int(rng.integers(clip.n_views))
                t_src = int(rng.integers(clip.n_frames))
                cross = (rng.uniform() < 0.5
                         and t_src + clip.delta < clip.n_frames)
                t_tgt = t_src + clip.delta if cross else t_src
                rtotal, _ = clip_render_losses(model, pred, clip, view,
                                               t_src, t_tgt, weights)
                total = stage2_total(total, rtotal)
            losses.append(total)
        loss = _mean_terms(losses)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        loss.backward()
        opt.step(lr_schedule(step, total_steps, cfg))
        if not all(np.isfinite(p.data).all() for p in model.params.values()):
            raise TrainingDiverged(step, value)
        trace.append(value)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_model(os.path.join(out_dir, "model.dv4d"), model)
        with open(os.path.join(out_dir, "trace.json"), "w") as fh:
            json.dump({"stage": cfg.stage, "steps": total_steps,
                       "loss": trace}, fh)
    return model, trace


# ------------------------------------------------------------------ evaluation

def _gather_points(pred, clip, max_points: int, seed: int):
    pts_p, pts_g = [], []
    for v in range(clip.n_views):
        for t in range(clip.n_frames):
            valid = clip.valid[v, t]
            pts_p.append(pred.pointmaps[v][t].data[:, valid].T)
            pts_g.append(clip.points[v, t][:, valid].T)
    pts_p = np.concatenate(pts_p, axis=0)
    pts_g = np.concatenate(pts_g, axis=0)
    if pts_p.shape[0] > max_points:
        keep = np.random.default_rng(seed).choice(pts_p.shape[0], max_points,
                                                  replace=False)
        pts_p, pts_g = pts_p[keep], pts_g[keep]
    return pts_p, pts_g


def evaluate_clip(model: Model, clip, zero_velocity: bool = False,
                  align: bool = True, max_points: int = 4096,
                  seed: int = 0) -> MetricReport:
    """Every metric for one clip; dynamic image scores use renders
    advected from each view's first frame."""
    cfg = model.cfg
    pred = forward(model, clip.images)

    pts_p, pts_g = _gather_points(pred, clip, max_points, seed)
    if align:
        sim = umeyama_align(pts_p, pts_g)
        pts_p = sim.inverse().apply(pts_p)
    acc_mean, acc_median, comp_mean, comp_median = \
        accuracy_completeness(pts_p, pts_g)
    nc_mean, nc_median = normal_consistency(pts_p, pts_g)

    abs_rels, deltas = [], []
    for v in range(clip.n_views):
        for t in range(clip.n_frames):
            if clip.valid[v, t].any():
                a, d = depth_metrics(pred.depths[v][t].data,
                                     clip.depths[v, t], clip.valid[v, t])
                abs_rels.append(a)
                deltas.append(d)

    psnrs, ssims, dyn_psnrs, dyn_ssims = [], [], [], []
    for v in range(clip.n_views):
        sources = {}
        for t_src in (0,):
            gset, _ = decode_clip_gaussians(model, pred, clip.images, v, t_src)
            if zero_velocity:
                gset = with_velocity(
                    gset, tensor(np.zeros((gset.count, 3))))
            sources[t_src] = gset
        for t in range(clip.n_frames):
            gself, _ = decode_clip_gaussians(model, pred, clip.images, v, t)
            cam = camera_from_vector(pred.cameras[v][t], cfg.width, cfg.height)
            out = render(gself, cam, t_render=float(t),
                         background=tuple(SKY_COLOR))
            p, s = image_metrics(np.clip(out.color.data, 0.0, 1.0),
                                 clip.images[v, t])
            psnrs.append(p)
            ssims.append(s)
            if t > 0 and clip.dynamic[v, t].any():
                out = render(sources[0], cam, t_render=float(t),
                             background=tuple(SKY_COLOR))
                p, s = image_metrics(np.clip(out.color.data, 0.0, 1.0),
                                     clip.images[v, t], clip.dynamic[v, t])
                dyn_psnrs.append(p)
                dyn_ssims.append(s)

    def _mean(vals):
        vals = [x for x in vals if np.isfinite(x)]
        return float(np.mean(vals)) if vals else None

    return MetricReport(
        acc_mean=acc_mean, acc_median=acc_median,
        comp_mean=comp_mean, comp_median=comp_median,
        nc_mean=nc_mean, nc_median=nc_median,
        abs_rel=_mean(abs_rels), delta_125=_mean(deltas),
        psnr=_mean(psnrs), ssim=_mean(ssims),
        psnr_dynamic=_mean(dyn_psnrs), ssim_dynamic=_mean(dyn_ssims))


def evaluate(model: Model, clips, report_path=None,
             zero_velocity: bool = False, align: bool = True,
             max_points: int = 4096):
    """Per-clip and aggregate reports; optionally writes them as JSON."""
    clips = list(clips)
    if not clips:
        raise ValueError("no clips to evaluate")
    # clips are independent; list order keeps aggregation deterministic
    # regardless of the worker count
    with ThreadPoolExecutor(max_workers=_env_threads()) as pool:
        reports = list(pool.map(
            lambda iv: evaluate_clip(model, iv[1], zero_velocity=zero_velocity,
                                     align=align, max_points=max_points,
                                     seed=iv[0]),
            enumerate(clips)))

    agg = {}
    for name in MetricReport.__dataclass_fields__:
        vals = [getattr(r, name) for r in reports
                if getattr(r, name) is not None]
        agg[name] = float(np.mean(vals)) if vals else None
    aggregate = MetricReport(**agg)

    if report_path is not None:
        with open(report_path, "w") as fh:
            json.dump({"clips": [r.to_dict() for r in reports],
                       "aggregate": aggregate.to_dict()}, fh, indent=2)
    return reports, aggregate


def velocity_error(model: Model, clip, dynamic_only: bool = True) -> float:
    """Mean L2 gap between decoded velocities and true per-step flow.

    Measured at each view's first frame over feature pixels whose whole
    stride block is valid (and dynamic, unless dynamic_only is off).
    Returns nan when no pixel qualifies.
    """
    pred = forward(model, clip.images)
    s = model.cfg.feature_stride
    errs = []
    for v in range(clip.n_views):
        gset, _ = decode_clip_gaussians(model, pred, clip.images, v, 0)
        gt = block_reduce(clip.flow[v, 0], s).reshape(3, -1).T
        mask = clip.valid[v, 0]
        if dynamic_only:
            mask = mask & clip.dynamic[v, 0]
        keep = block_reduce(mask, s, "all").ravel()
        if keep.any():
            diff = gset.velocity.data[keep] - gt[keep]
            errs.append(np.linalg.norm(diff, axis=1))
    return float(np.concatenate(errs).mean()) if errs else float("nan")


def generate_dataset(out_dir, count: int, seed: int = 0, n_views: int = 2,
                     n_frames: int = 3, height: int = 64, width: int = 64,
                     dynamic: bool = True):
    """Write `count` clips to out_dir, parallel across clips."""
    os.makedirs(out_dir, exist_ok=True)

    def make(i):
        spec = random_scene_spec(seed + i, n_views=n_views, n_frames=n_frames,
                                 height=height, width=width, dynamic=dynamic)
        clip = generate_clip(spec, seed=seed + i)
        path = os.path.join(out_dir, f"clip_{i:04d}.dv4d")
        write_clip(clip, path)
        return path

    with ThreadPoolExecutor(max_workers=_env_threads()) as pool:
        return list(pool.map(make, range(count)))
