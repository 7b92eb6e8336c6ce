"""Decoders from temporal features to future points and Gaussians.

Both dense heads share one shape: per-patch linear projection, repeated
2x bilinear upsampling (constant interpolation matrices), a 3x3 conv
fusion, and a 1x1 output projection.  The future head decodes to full
image resolution; the Gaussian head stops at the feature stride, one
Gaussian per feature pixel.

Gaussian centers come from unprojecting the decoded depth through the
PREDICTED camera vector, so camera gradients reach the geometry.
Velocities are convex mixtures of shared bases decoded from the final
motion-token states.

advect() accumulates its offset lazily and materializes centers in one
``mu + dt * velocity`` expression, which makes advection composition
exact in floating point rather than merely close.
"""

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .container import read_bundle, write_bundle
from .numerics import DiffTensor, clamp, gelu, softmax, stack, tensor, zeros

LOG_SCALE_MIN = math.log(1e-6)
LOG_SCALE_MAX = math.log(1e3)

# raw depth logit starts near typical desk-scene range, softplus(3) ~ 3.05 m
DEPTH_BIAS_INIT = 3.0
LOG_SCALE_BIAS_INIT = -2.5


@dataclass(frozen=True)
class HeadConfig:
    dim: int = 64             # token dim from the encoder
    channels: int = 16        # feature channels in both dense heads
    patch_size: int = 8
    feature_stride: int = 2   # gaussian/appearance resolution divisor
    n_motion: int = 8
    height: int = 64
    width: int = 64

    def __post_init__(self):
        for name, v in (("patch_size", self.patch_size),
                        ("feature_stride", self.feature_stride)):
            if v < 1 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two, got {v}")
        if self.feature_stride > self.patch_size:
            raise ValueError("feature stride cannot exceed the patch size")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError("image extent must be divisible by patch size")

    @property
    def grid(self):
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def feature_hw(self):
        return (self.height // self.feature_stride,
                self.width // self.feature_stride)


# -- gaussian set ------------------------------------------------------------

@dataclass
class GaussianSet:
    mu: DiffTensor             # (N, 3) centers at the source timestamp
    log_scale: DiffTensor      # (N, 3) clamped log meters
    quat: DiffTensor           # (N, 4) unit quaternions (w, x, y, z)
    color_logit: DiffTensor    # (N, 3)
    opacity_logit: DiffTensor  # (N,)
    velocity: DiffTensor       # (N, 3) meters per frame step
    t: float                   # source timestamp
    dt: float = 0.0            # accumulated advection offset

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    @property
    def time(self) -> float:
        return self.t + self.dt

    def current_mu(self) -> DiffTensor:
        """Centers at time t + dt, materialized in a single expression."""
        if self.dt == 0.0:
            return self.mu
        return self.mu + self.velocity * self.dt

    def color(self) -> DiffTensor:
        return self.color_logit.sigmoid()

    def opacity(self) -> DiffTensor:
        return self.opacity_logit.sigmoid()

    def scale(self) -> DiffTensor:
        return self.log_scale.exp()


def advect(gaussians: GaussianSet, delta: float) -> GaussianSet:
    """The same set delta frame steps later: mu' = mu + delta * nu.

    All other attributes are shared with the input.  Offsets add up
    before any center is materialized, so advect(advect(g, a), b) and
    advect(g, a + b) produce bit-identical centers.
    """
    return replace(gaussians, dt=gaussians.dt + float(delta))


def write_gaussians(path, g: GaussianSet) -> None:
    write_bundle(path, {
        "mu": g.current_mu().data,
        "log_scale": g.log_scale.data,
        "quat": g.quat.data,
        "color_logit": g.color_logit.data,
        "opacity_logit": g.opacity_logit.data,
        "velocity": g.velocity.data,
        "t": np.asarray(g.time),
    }, {"kind": "gaussians"})


def read_gaussians(path) -> GaussianSet:
    named, _ = read_bundle(path)
    return GaussianSet(
        mu=tensor(named["mu"]),
        log_scale=tensor(named["log_scale"]),
        quat=tensor(named["quat"]),
        color_logit=tensor(named["color_logit"]),
        opacity_logit=tensor(named["opacity_logit"]),
        velocity=tensor(named["velocity"]),
        t=float(named["t"]))


# -- differentiable camera decode -------------------------------------------

def _tan(x: DiffTensor) -> DiffTensor:
    out = DiffTensor(np.tan(x.data), requires_grad=x.requires_grad,
                     _parents=(x,))

    def _bwd():
        if x.requires_grad:
            x._accumulate(out.grad * (1.0 + out.data ** 2))

    out._backward = _bwd
    return out


@dataclass
class DecodedCamera:
    rot: DiffTensor    # (3, 3) world-to-camera rotation
    trans: DiffTensor  # (3,)
    fx: DiffTensor     # 0-d
    fy: DiffTensor     # 0-d
    cx: float
    cy: float
    width: int
    height: int


def camera_from_vector(g: DiffTensor, width: int, height: int) -> DecodedCamera:
    """Decode [quat(4), trans(3), fov_y, fov_x] keeping gradients intact.

    Principal point is centered.  Raises ValueError when the fields
    cannot describe a camera (degenerate quaternion, fov outside (0, pi)).
    """
    if g.shape != (9,):
        raise ValueError(f"camera vector must have shape (9,), got {g.shape}")
    fov = g.data[7:9]
    if not (0.0 < fov[0] < np.pi and 0.0 < fov[1] < np.pi):
        raise ValueError(f"field of view out of (0, pi): {tuple(fov)}")
    if np.linalg.norm(g.data[:4]) < 1e-12:
        raise ValueError("zero-norm quaternion in camera vector")

    q = g[0:4]
    q = q / ((q * q).sum() ** 0.5)
    w, x, y, z = q[0], q[1], q[2], q[3]
    rot = stack([
        stack([1 - (y * y + z * z) * 2, (x * y - w * z) * 2, (x * z + w * y) * 2]),
        stack([(x * y + w * z) * 2, 1 - (x * x + z * z) * 2, (y * z - w * x) * 2]),
        stack([(x * z - w * y) * 2, (y * z + w * x) * 2, 1 - (x * x + y * y) * 2]),
    ], axis=0)
    fy = tensor(0.5 * height) / _tan(g[7] * 0.5)
    fx = tensor(0.5 * width) / _tan(g[8] * 0.5)
    return DecodedCamera(rot=rot, trans=g[4:7], fx=fx, fy=fy,
                         cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                         width=width, height=height)


# -- shared dense decoder ----------------------------------------------------

@lru_cache(maxsize=None)
def _up2_matrix(n: int):
    """(2n, n) bilinear interpolation weights, edges clamped."""
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n - 1)
        hi_c = min(max(lo + 1, 0), n - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


def _upsample2(x: DiffTensor) -> DiffTensor:
    h, w = x.shape[-2], x.shape[-1]
    up_h = tensor(_up2_matrix(h))
    up_w = tensor(_up2_matrix(w).T.copy())
    return (up_h @ x) @ up_w


def _pad_edge(x: DiffTensor, pad: int) -> DiffTensor:
    """Replicate-pad the last two dims; backward folds borders back in."""
    h, w = x.shape[-2], x.shape[-1]
    ys = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    xs = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    key = (Ellipsis, ys[:, None], xs[None, :])
    out = DiffTensor(x.data[key], requires_grad=x.requires_grad, _parents=(x,))

    def _bwd():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            np.add.at(g, key, out.grad)
            x._accumulate(g)

    out._backward = _bwd
    return out


def conv3x3(x: DiffTensor, w: DiffTensor, b: DiffTensor,
            pad_mode: str = "zero") -> DiffTensor:
    """Padded 3x3 convolution; w is (c_out, 9 * c_in), offset-major."""
    c_in, h, wd = x.shape
    xp = x.pad2d(1) if pad_mode == "zero" else _pad_edge(x, 1)
    taps = [xp[:, dy:dy + h, dx:dx + wd]
            for dy in range(3) for dx in range(3)]
    col = stack(taps, axis=0).reshape(9 * c_in, h * wd)
    out = w @ col + b.reshape(-1, 1)
    return out.reshape(w.shape[0], h, wd)


def _dense_decode(tokens, params: dict, prefix: str, stages: int,
                  cfg: HeadConfig) -> DiffTensor:
    """tokens (n_patches, dim) -> (c_out, grid_h * 2^stages, ...)."""
    gh, gw = cfg.grid
    c = cfg.channels
    if not isinstance(tokens, DiffTensor):
        tokens = tensor(tokens)
    if tokens.shape != (gh * gw, cfg.dim):
        raise ValueError(f"expected ({gh * gw}, {cfg.dim}) tokens, "
                         f"got {tokens.shape}")
    f = tokens @ params[prefix + "proj_w"] + params[prefix + "proj_b"]
    f = f.reshape(gh, gw, c).transpose((2, 0, 1))
    for _ in range(stages):
        f = _upsample2(f)
    f = gelu(conv3x3(f, params[prefix + "fuse_w"], params[prefix + "fuse_b"]))
    h, wd = f.shape[-2], f.shape[-1]
    out_w = params[prefix + "out_w"]
    out = out_w @ f.reshape(c, h * wd) + params[prefix + "out_b"].reshape(-1, 1)
    return out.reshape(out_w.shape[0], h, wd)


# -- parameters ---------------------------------------------------------------

def init_head_params(cfg: HeadConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    c, d, m = cfg.channels, cfg.dim, cfg.n_motion

    def w(fan_in, *shape):
        return tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape),
                      requires_grad=True)

    def b(n):
        return tensor(np.zeros(n), requires_grad=True)

    params = {}
    for prefix, out_c in (("fut.", 3), ("gs.", c + 1)):
        params[prefix + "proj_w"] = w(d, d, c)
        params[prefix + "proj_b"] = b(c)
        params[prefix + "fuse_w"] = w(9 * c, c, 9 * c)
        params[prefix + "fuse_b"] = b(c)
        params[prefix + "out_w"] = w(c, out_c, c)
        params[prefix + "out_b"] = b(out_c)
    # sensible starting depth for the gaussian head
    params["gs.out_b"].data[c] = DEPTH_BIAS_INIT

    params["app.conv1_w"] = w(27, c, 27)
    params["app.conv1_b"] = b(c)
    params["app.conv2_w"] = w(9 * c, c, 9 * c)
    params["app.conv2_b"] = b(c)

    n_attr = 11 + m   # 3 log scale, 4 quat, 3 color, 1 opacity, m mixing
    params["attr_w"] = w(c, c, n_attr)
    attr_b = np.zeros(n_attr)
    attr_b[0:3] = LOG_SCALE_BIAS_INIT
    params["attr_b"] = tensor(attr_b, requires_grad=True)

    params["vel_w"] = tensor(rng.normal(0.0, 0.01 / math.sqrt(d), (d, 3)),
                             requires_grad=True)
    params["vel_b"] = b(3)
    return params


# -- head ops -----------------------------------------------------------------

def predict_future(tokens, params: dict, cfg: HeadConfig) -> DiffTensor:
    """Dense (3, H, W) point map at t + delta from one frame's tokens."""
    stages = int(math.log2(cfg.patch_size))
    return _dense_decode(tokens, params, "fut.", stages, cfg)


def appearance_features(image, params: dict, cfg: HeadConfig) -> DiffTensor:
    """(channels, H/stride, W/stride) appearance map from an RGB image."""
    x = image if isinstance(image, DiffTensor) else tensor(image)
    if x.shape != (3, cfg.height, cfg.width):
        raise ValueError(f"expected (3, {cfg.height}, {cfg.width}) image, "
                         f"got {x.shape}")
    f = gelu(conv3x3(x, params["app.conv1_w"], params["app.conv1_b"],
                     pad_mode="edge"))
    s = cfg.feature_stride
    if s > 1:
        c, h, wd = f.shape
        f = f.reshape(c, h // s, s, wd // s, s).mean(axis=(2, 4))
    return conv3x3(f, params["app.conv2_w"], params["app.conv2_b"],
                   pad_mode="edge")


def gaussian_decode(tokens, params: dict, cfg: HeadConfig):
    """(feature map (c, H', W'), strictly positive depth map (H', W'))."""
    stages = int(math.log2(cfg.patch_size // cfg.feature_stride))
    out = _dense_decode(tokens, params, "gs.", stages, cfg)
    c = cfg.channels
    return out[0:c], out[c].softplus()


def fuse(f_app: DiffTensor, f_g: DiffTensor) -> DiffTensor:
    """Sum the appearance and gaussian feature maps."""
    if f_app.shape != f_g.shape:
        raise ValueError(f"feature shape mismatch: {f_app.shape} vs {f_g.shape}")
    return f_app + f_g


def init_gaussians(feats: DiffTensor, depth: DiffTensor, cam_vec: DiffTensor,
                   params: dict, cfg: HeadConfig, t: float = 0.0):
    """One Gaussian per feature pixel, centers unprojected through cam_vec.

    Returns (GaussianSet with zero velocity, mixing logits (N, n_motion));
    attach velocities with decode_velocities.  Raises ValueError when the
    camera vector does not decode.
    """
    cam = camera_from_vector(cam_vec, cfg.width, cfg.height)
    fh, fw = cfg.feature_hw
    if feats.shape != (cfg.channels, fh, fw) or depth.shape != (fh, fw):
        raise ValueError("feature/depth resolution does not match config")
    n = fh * fw
    s = cfg.feature_stride
    off = (s - 1) / 2.0
    uu, vv = np.meshgrid(np.arange(fw) * s + off, np.arange(fh) * s + off)

    d = depth.reshape(n)
    xc = (tensor(uu.ravel()) - cam.cx) / cam.fx * d
    yc = (tensor(vv.ravel()) - cam.cy) / cam.fy * d
    cam_pts = stack([xc, yc, d], axis=0).transpose((1, 0))
    mu = (cam_pts - cam.trans.reshape(1, 3)) @ cam.rot

    flat = feats.reshape(cfg.channels, n).transpose((1, 0))
    attrs = flat @ params["attr_w"] + params["attr_b"]

    log_scale = clamp(attrs[:, 0:3], LOG_SCALE_MIN, LOG_SCALE_MAX)
    q_raw = attrs[:, 3:7] + tensor(np.array([1.0, 0.0, 0.0, 0.0]))
    q_norm = ((q_raw * q_raw).sum(axis=1, keepdims=True) + 1e-20) ** 0.5
    gaussians = GaussianSet(
        mu=mu,
        log_scale=log_scale,
        quat=q_raw / q_norm,
        color_logit=attrs[:, 7:10],
        opacity_logit=attrs[:, 10],
        velocity=zeros((n, 3)),
        t=float(t))
    return gaussians, attrs[:, 11:]


def decode_velocities(mix_logits: DiffTensor, motion_tokens,
                      params: dict) -> DiffTensor:
    """Per-Gaussian velocities as convex mixtures of decoded bases.

    motion_tokens (n_motion, dim) are the final-layer states for the
    frame the Gaussians came from; bases = motion_tokens @ vel_w + vel_b.
    Weights live on the simplex, so every velocity is inside the basis
    convex hull and a single basis passes through exactly.
    """
    if not isinstance(motion_tokens, DiffTensor):
        motion_tokens = tensor(motion_tokens)
    bases = motion_tokens @ params["vel_w"] + params["vel_b"]
    weights = softmax(mix_logits, axis=-1)
    return weights @ bases


def with_velocity(gaussians: GaussianSet, velocity: DiffTensor) -> GaussianSet:
    if velocity.shape != (gaussians.count, 3):
        raise ValueError(f"velocity shape {velocity.shape} does not match "
                         f"{gaussians.count} gaussians")
    return replace(gaussians, velocity=velocity)
