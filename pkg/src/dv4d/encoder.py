"""Patch encoder and the alternating spatial attention stack.

Each image becomes a grid of p x p patch tokens plus one camera token.
The stack alternates attention within a view and attention across all
views of the same frame; it is attention-only (the MLP mixing lives in
the temporal blocks downstream), so zeroing value projections makes a
layer an exact identity.  Positional embeddings are added at stack
entry, not in patchify, which keeps "zero image -> tokens equal the
embedding bias" exact.

All frames are processed independently here; temporal mixing is the
next module's job.  Per-layer patch-token outputs are retained because
the temporal blocks consume one encoder level per layer.
"""

from dataclasses import dataclass

import numpy as np

from .container import read_bundle, write_bundle
from .numerics import DiffTensor, concat, softmax, stack, tensor


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    dim: int = 64
    depth: int = 2
    n_heads: int = 4
    height: int = 64
    width: int = 64
    max_frames: int = 8

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"extents {self.height}x{self.width} not divisible by "
                f"patch {self.patch_size}")
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} not divisible by "
                             f"{self.n_heads} heads")

    @property
    def n_patches(self):
        return (self.height // self.patch_size) * (self.width // self.patch_size)


@dataclass
class TokenSet:
    camera: DiffTensor        # (V, D)
    patches: DiffTensor       # (V, N_p, D)
    layer_patches: list       # depth entries of (V, N_p, D)


def _init_linear(r, n_in, n_out, scale=None):
    s = scale if scale is not None else 1.0 / np.sqrt(n_in)
    return tensor(r.normal(size=(n_in, n_out)) * s, requires_grad=True)


def init_encoder_params(cfg, seed=0):
    """Flat name -> DiffTensor parameter dict for the encoder."""
    r = np.random.default_rng(seed)
    d, p = cfg.dim, cfg.patch_size
    params = {
        "patch_w": _init_linear(r, 3 * p * p, d),
        "patch_b": tensor(r.normal(size=d) * 0.02, requires_grad=True),
        "pos_emb": tensor(r.normal(size=(cfg.n_patches, d)) * 0.02,
                          requires_grad=True),
        "cam_base": tensor(r.normal(size=d) * 0.02, requires_grad=True),
        "cam_reg": tensor(r.normal(size=(cfg.max_frames, d)) * 0.02,
                          requires_grad=True),
    }
    for layer in range(cfg.depth):
        for kind in ("within", "cross"):
            pre = f"aa.{layer}.{kind}."
            params[pre + "ln_g"] = tensor(np.ones(d), requires_grad=True)
            params[pre + "ln_b"] = tensor(np.zeros(d), requires_grad=True)
            for w in ("wq", "wk", "wv", "wo"):
                params[pre + w] = _init_linear(r, d, d)
    return params


def patchify(image, params, cfg):
    """Embed non-overlapping patches of a (3, H, W) image to (N_p, D)."""
    if isinstance(image, DiffTensor):
        img = image
        h, w = image.shape[1:]
    else:
        img = tensor(np.asarray(image))
        h, w = img.shape[1:]
    p = cfg.patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    x = img.reshape(3, gh, p, gw, p)
    x = x.transpose((1, 3, 0, 2, 4)).reshape(gh * gw, 3 * p * p)
    return x @ params["patch_w"] + params["patch_b"]


def _layer_norm_tokens(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2.0).mean(axis=-1, keepdims=True)
    return (x - mu) / (var + eps).sqrt() * g + b


def multihead_self_attention(x, wq, wk, wv, wo, n_heads):
    """Standard scaled dot-product self-attention over (..., N, D)."""
    lead = x.shape[:-2]
    n, d = x.shape[-2], x.shape[-1]
    dh = d // n_heads

    def split(t):
        t = t.reshape(*lead, n, n_heads, dh)
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead),
                                          len(lead) + 2)
        return t.transpose(axes)

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    kt_axes = tuple(range(q.data.ndim - 2)) + (q.data.ndim - 1, q.data.ndim - 2)
    scores = (q @ k.transpose(kt_axes)) * (1.0 / np.sqrt(dh))
    ctx = softmax(scores, axis=-1) @ v
    back_axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead),
                                           len(lead) + 2)
    ctx = ctx.transpose(back_axes).reshape(*lead, n, d)
    return ctx @ wo


def _aa_layer(x, params, prefix, n_heads, cross):
    """One residual attention sublayer over (V, N, D) tokens.

    cross=False: each view attends within itself.
    cross=True: all views' tokens form one sequence.
    """
    g, b = params[prefix + "ln_g"], params[prefix + "ln_b"]
    normed = _layer_norm_tokens(x, g, b)
    if cross:
        v_count, n, d = x.shape
        flat = normed.reshape(1, v_count * n, d)
        att = multihead_self_attention(flat, params[prefix + "wq"],
                                       params[prefix + "wk"],
                                       params[prefix + "wv"],
                                       params[prefix + "wo"], n_heads)
        att = att.reshape(v_count, n, d)
    else:
        att = multihead_self_attention(normed, params[prefix + "wq"],
                                       params[prefix + "wk"],
                                       params[prefix + "wv"],
                                       params[prefix + "wo"], n_heads)
    return x + att


def aa_forward(images, params, cfg, frame_index=0, cross_view=True):
    """Encode all views of one frame.

    images: sequence of V images (3, H, W), arrays or DiffTensors.
    Returns a TokenSet with per-layer patch outputs retained.
    """
    per_view = [patchify(im, params, cfg) for im in images]
    patches = stack(per_view, axis=0) + params["pos_emb"]
    v_count = patches.shape[0]

    reg = params["cam_base"] + params["cam_reg"][frame_index]
    cam = stack([reg] * v_count, axis=0).reshape(v_count, 1, cfg.dim)
    x = concat([cam, patches], axis=1)

    layer_patches = []
    for layer in range(cfg.depth):
        x = _aa_layer(x, params, f"aa.{layer}.within.", cfg.n_heads,
                      cross=False)
        if cross_view:
            x = _aa_layer(x, params, f"aa.{layer}.cross.", cfg.n_heads,
                          cross=True)
        layer_patches.append(x[:, 1:, :])
    return TokenSet(camera=x[:, 0, :], patches=x[:, 1:, :],
                    layer_patches=layer_patches)


def save_encoder_params(path, params):
    write_bundle(path, {k: v.data for k, v in params.items()},
                 {"kind": "encoder"})


def load_encoder_params(path):
    named, _ = read_bundle(path)
    return {k: tensor(v, requires_grad=True) for k, v in named.items()}
