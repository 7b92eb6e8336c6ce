"""Full network assembly: frame encoder, temporal attention, dense heads.

One Model couples a configuration with a flat name -> parameter dict so
the optimizer and the serializer can treat every module uniformly.  The
forward pass consumes an entire clip at once (all views, all frames)
because temporal attention mixes the whole sequence.

All dense outputs live in the clip's shared reference frame (the first
view of the first frame); cameras are predicted as 9-vectors in that
same frame, so predicted Gaussians and predicted cameras compose
without any ground-truth poses.
"""

import math
from dataclasses import dataclass

import numpy as np

from .container import read_bundle, write_bundle
from .encoder import EncoderConfig, aa_forward, init_encoder_params
from .geometry import RigidTransform, camera_encode, compose, CameraExtrinsics
from .heads import (HeadConfig, _dense_decode, appearance_features,
                    decode_velocities, fuse, gaussian_decode, init_gaussians,
                    init_head_params, with_velocity)
from .mta import MtaConfig, init_mta_params, mta_forward
from .numerics import DiffTensor, tensor

CAM_BIAS_INIT = np.array([1.0, 0, 0, 0, 0, 0, 0, 1.0, 1.0])  # identity, fov 1 rad


@dataclass(frozen=True)
class ModelConfig:
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
    rope_base: float = 10000.0

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(patch_size=self.patch_size, dim=self.dim,
                             depth=self.enc_depth, n_heads=self.n_heads,
                             height=self.height, width=self.width,
                             max_frames=self.max_frames)

    def mta(self) -> MtaConfig:
        return MtaConfig(dim=self.dim, depth=self.mta_depth,
                         n_heads=self.n_heads, n_motion=self.n_motion,
                         rope_base=self.rope_base)

    def head(self) -> HeadConfig:
        return HeadConfig(dim=self.dim, channels=self.channels,
                          patch_size=self.patch_size,
                          feature_stride=self.feature_stride,
                          n_motion=self.n_motion,
                          height=self.height, width=self.width)


@dataclass
class Model:
    cfg: ModelConfig
    params: dict


@dataclass
class ClipPrediction:
    cameras: list      # [view][t] (9,) camera vectors
    pointmaps: list    # [view][t] (3, H, W), reference frame
    depths: list       # [view][t] (H, W), camera frame, positive
    futures: list      # [view][t] (3, H, W) point map advected by delta
    patches: DiffTensor  # (V, T, N_p, D) temporally enhanced tokens
    motion: DiffTensor   # (V, T, M, D) motion-token states


def init_model(cfg: ModelConfig, seed: int = 0) -> Model:
    params = {}
    params.update(init_encoder_params(cfg.encoder(), seed))
    params.update(init_mta_params(cfg.mta(), seed + 1))
    params.update(init_head_params(cfg.head(), seed + 2))

    r = np.random.default_rng(seed + 3)
    d, c = cfg.dim, cfg.channels

    def w(fan_in, *shape):
        return tensor(r.normal(0.0, 1.0 / math.sqrt(fan_in), shape),
                      requires_grad=True)

    # point-map and depth branches reuse the shared dense decoder layout
    for prefix, out_c in (("pm.", 3), ("dep.", 1)):
        params[prefix + "proj_w"] = w(d, d, c)
        params[prefix + "proj_b"] = tensor(np.zeros(c), requires_grad=True)
        params[prefix + "fuse_w"] = w(9 * c, c, 9 * c)
        params[prefix + "fuse_b"] = tensor(np.zeros(c), requires_grad=True)
        params[prefix + "out_w"] = w(c, out_c, c)
        params[prefix + "out_b"] = tensor(np.zeros(out_c), requires_grad=True)
    params["pm.out_b"].data[2] = 3.0   # start the cloud in front of the rig
    params["dep.out_b"].data[0] = 3.0

    # camera head starts at an identity pose with a 1-radian field of view
    params["cam_head_w"] = tensor(
        r.normal(0.0, 0.01 / math.sqrt(d), (d, 9)), requires_grad=True)
    params["cam_head_b"] = tensor(CAM_BIAS_INIT.copy(), requires_grad=True)
    return Model(cfg=cfg, params=params)


def forward(model: Model, images, use_rope: bool = True) -> ClipPrediction:
    """Run the full stack over a clip's images, (V, T, 3, H, W)."""
    cfg = model.cfg
    images = np.asarray(images, dtype=np.float64)
    v_count, t_count = images.shape[0], images.shape[1]
    if images.shape[2:] != (3, cfg.height, cfg.width):
        raise ValueError(f"clip images {images.shape[2:]} do not match the "
                         f"model's (3, {cfg.height}, {cfg.width})")
    if t_count > cfg.max_frames:
        raise ValueError(f"{t_count} frames exceed the camera register "
                         f"capacity {cfg.max_frames}")

    enc_cfg, head_cfg = cfg.encoder(), cfg.head()
    tokensets = [aa_forward([images[v, t] for v in range(v_count)],
                            model.params, enc_cfg, frame_index=t)
                 for t in range(t_count)]
    out = mta_forward(tokensets, model.params, cfg.mta(), use_rope=use_rope)

    stages = int(math.log2(cfg.patch_size))
    cameras, pointmaps, depths, futures = [], [], [], []
    for v in range(v_count):
        cams_v, pms_v, deps_v, futs_v = [], [], [], []
        for t in range(t_count):
            tokens = out.patches[v, t]
            pms_v.append(_dense_decode(tokens, model.params, "pm.",
                                       stages, head_cfg))
            dep = _dense_decode(tokens, model.params, "dep.",
                                stages, head_cfg)
            deps_v.append(dep[0].softplus())
            futs_v.append(_dense_decode(tokens, model.params, "fut.",
                                        stages, head_cfg))
            tok = tokensets[t].camera[v].reshape(1, cfg.dim)
            cams_v.append((tok @ model.params["cam_head_w"]).reshape(9)
                          + model.params["cam_head_b"])
        cameras.append(cams_v)
        pointmaps.append(pms_v)
        depths.append(deps_v)
        futures.append(futs_v)
    return ClipPrediction(cameras=cameras, pointmaps=pointmaps, depths=depths,
                          futures=futures, patches=out.patches,
                          motion=out.motion)


def decode_clip_gaussians(model: Model, pred: ClipPrediction, images,
                          view: int, t: int, cam_vec: DiffTensor = None):
    """Gaussians for one (view, frame), with velocities attached.

    Unprojects through the predicted camera unless cam_vec overrides it.
    Returns (GaussianSet, head depth map (H', W')).
    """
    head_cfg = model.cfg.head()
    img = np.asarray(images, dtype=np.float64)[view, t]
    f_app = appearance_features(img, model.params, head_cfg)
    f_g, gdepth = gaussian_decode(pred.patches[view, t], model.params,
                                  head_cfg)
    feats = fuse(f_app, f_g)
    if cam_vec is None:
        cam_vec = pred.cameras[view][t]
    gset, mix = init_gaussians(feats, gdepth, cam_vec, model.params,
                               head_cfg, t=float(t))
    vel = decode_velocities(mix, pred.motion[view, t], model.params)
    return with_velocity(gset, vel), gdepth


def clip_camera_vector(clip, view: int, t: int) -> np.ndarray:
    """Ground-truth 9-vector mapping reference-frame points to (view, t)."""
    ref = RigidTransform(clip.quats[0, 0], clip.trans[0, 0])
    ext = RigidTransform(clip.quats[view, t], clip.trans[view, t])
    rel = compose(ext, ref.inverse())
    return camera_encode(clip.intrinsics(),
                         CameraExtrinsics(rel.rotation, rel.translation))


def block_reduce(arr: np.ndarray, stride: int, op: str = "mean") -> np.ndarray:
    """Downsample the trailing two dims by stride with mean or all."""
    h, w = arr.shape[-2], arr.shape[-1]
    if h % stride or w % stride:
        raise ValueError(f"extents {h}x{w} not divisible by {stride}")
    blocks = arr.reshape(arr.shape[:-2] + (h // stride, stride,
                                           w // stride, stride))
    if op == "mean":
        return blocks.mean(axis=(-3, -1))
    if op == "all":
        return blocks.all(axis=(-3, -1))
    raise ValueError(f"unknown reduction {op!r}")


def parameter_count(model: Model) -> int:
    return int(sum(p.data.size for p in model.params.values()))


def save_model(path, model: Model) -> None:
    meta = {"kind": "model", "cfg": {k: getattr(model.cfg, k)
                                     for k in ModelConfig.__dataclass_fields__}}
    write_bundle(path, {k: v.data for k, v in model.params.items()}, meta)


def load_model(path) -> Model:
    named, meta = read_bundle(path)
    if meta.get("kind") != "model":
        raise ValueError(f"bundle at {path} is not a model "
                         f"(kind={meta.get('kind')!r})")
    cfg_meta = dict(meta["cfg"])
    cfg_meta["rope_base"] = float(cfg_meta["rope_base"])
    cfg = ModelConfig(**{k: (int(v) if k != "rope_base" else v)
                         for k, v in cfg_meta.items()})
    params = {k: tensor(v, requires_grad=True) for k, v in named.items()}
    return Model(cfg=cfg, params=params)
