"""Temporal attention over frames with learnable motion tokens.

Each layer prepends M learnable motion-token slots to the patch tokens,
attends across the tau frames independently at every (view, token
position), and applies a LayerNorm + MLP with a residual back to the
layer input.  Temporal position enters as a rotary rotation of Q and K,
so attention logits depend only on frame offsets.

Frame-axis reductions (softmax denominator, attention-value
contraction) sum in ascending value order.  That makes the whole
module bit-exact under frame permutation when the rotary term is
disabled, instead of merely close.

Layer wiring: the first layer reads concat(motion, patch level 1); each
later layer l reads the previous block's output plus a fresh injection
concat(motion_l, level_l + level_{l-1}).  Camera tokens never enter.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import (
    DiffTensor,
    amax_const,
    concat,
    layer_norm,
    mlp_forward,
    stack,
    sum_ordered,
    tensor,
    zeros,
)


@dataclass(frozen=True)
class MtaConfig:
    dim: int = 64
    depth: int = 2        # desk default; the reference setting is 12
    n_heads: int = 4
    n_motion: int = 8
    mlp_ratio: int = 4
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} not divisible by "
                             f"{self.n_heads} heads")
        if (self.dim // self.n_heads) % 2:
            raise ValueError("per-head dim must be even for rotary pairs")


@dataclass
class MtaOutput:
    patches: DiffTensor   # (V, T, N_p, D) temporally enhanced features
    motion: DiffTensor    # (V, T, M, D) final motion-token states
    attention: list       # per layer (V, S, H, T, T) arrays if collected


def init_mta_params(cfg, seed=0):
    r = np.random.default_rng(seed)
    d = cfg.dim
    hidden = cfg.mlp_ratio * d
    params = {}
    for layer in range(cfg.depth):
        pre = f"mta.{layer}."
        params[pre + "motion"] = tensor(
            r.normal(size=(cfg.n_motion, d)) * 0.02, requires_grad=True)
        for w in ("wq", "wk", "wv", "wo"):
            params[pre + w] = tensor(r.normal(size=(d, d)) / np.sqrt(d),
                                     requires_grad=True)
        params[pre + "ln_g"] = tensor(np.ones(d), requires_grad=True)
        params[pre + "ln_b"] = tensor(np.zeros(d), requires_grad=True)
        params[pre + "mlp_w1"] = tensor(r.normal(size=(d, hidden))
                                        / np.sqrt(d), requires_grad=True)
        params[pre + "mlp_b1"] = tensor(np.zeros(hidden), requires_grad=True)
        params[pre + "mlp_w2"] = tensor(r.normal(size=(hidden, d))
                                        / np.sqrt(hidden), requires_grad=True)
        params[pre + "mlp_b2"] = tensor(np.zeros(d), requires_grad=True)
    return params


def mta_input(motion, fp_layer, fp_prev, layer_index):
    """Assemble one layer's injected sequence, (V, T, M + N_p, D).

    layer_index is 1-based: the first layer takes patch features as is,
    later layers take the sum of the current and previous levels.
    """
    if layer_index < 1:
        raise ValueError(f"layer index must be >= 1, got {layer_index}")
    if layer_index == 1:
        if fp_prev is not None:
            raise ValueError("layer 1 takes no previous patch features")
        patches = fp_layer
    else:
        if fp_prev is None:
            raise ValueError(f"layer {layer_index} needs the previous "
                             "level's patch features")
        patches = fp_layer + fp_prev
    v_count, t_count = patches.shape[0], patches.shape[1]
    m, d = motion.shape
    slots = motion.reshape(1, 1, m, d) + zeros((v_count, t_count, m, d))
    return concat([slots, patches], axis=2)


def _rope_angles(t_indices, dim, base):
    j = np.arange(dim // 2, dtype=np.float64)
    theta = base ** (-2.0 * j / dim)
    return np.asarray(t_indices, dtype=np.float64)[..., None] * theta


def _rope_rotate(x, angles):
    """Rotate feature pairs (2j, 2j+1) of x by angles (..., d/2)."""
    cos, sin = np.cos(angles), np.sin(angles)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    re = even * cos - odd * sin
    im = even * sin + odd * cos
    return stack([re, im], axis=-1).reshape(*x.shape)


def rope_temporal(x, t, base=10000.0):
    """Rotary temporal encoding of a (..., d) tensor at frame index t."""
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"feature dim {d} must be even")
    return _rope_rotate(x, _rope_angles(float(t), d, base))


def temporal_attention(state, weights, n_heads, use_rope=True,
                       base=10000.0, return_attn=False):
    """Attend across frames independently per (view, token position).

    state: (V, T, S, D).  Returns the same shape; optionally also the
    attention tensor (V, S, H, T, T) as a plain array.
    """
    v_count, t_count, s_count, d = state.shape
    dh = d // n_heads

    x = state.transpose((0, 2, 1, 3))  # (V, S, T, D)
    q = x @ weights["wq"]
    k = x @ weights["wk"]
    val = x @ weights["wv"]

    def heads(t):
        return t.reshape(v_count, s_count, t_count, n_heads, dh) \
                .transpose((0, 1, 3, 2, 4))

    q, k, val = heads(q), heads(k), heads(val)  # (V, S, H, T, dh)
    if use_rope:
        ang = _rope_angles(np.arange(t_count), dh, base)  # (T, dh/2)
        q = _rope_rotate(q, ang)
        k = _rope_rotate(k, ang)

    logits = (q @ k.transpose((0, 1, 2, 4, 3))) * (1.0 / np.sqrt(dh))
    bad = ~np.isfinite(logits.data)
    if bad.any():
        raise ValueError(f"non-finite attention logit at flat index "
                         f"{int(np.argmax(bad))}")
    shifted = logits - amax_const(logits, axis=-1, keepdims=True)
    e = shifted.exp()
    attn = e / sum_ordered(e, axis=-1, keepdims=True)  # (V, S, H, T, T)

    # contraction over the frame axis in canonical order as well
    prod = attn.reshape(v_count, s_count, n_heads, t_count, t_count, 1) \
        * val.reshape(v_count, s_count, n_heads, 1, t_count, dh)
    ctx = sum_ordered(prod, axis=-2)  # (V, S, H, T, dh)

    merged = ctx.transpose((0, 1, 3, 2, 4)) \
                .reshape(v_count, s_count, t_count, d)
    out = (merged @ weights["wo"]).transpose((0, 2, 1, 3))
    if return_attn:
        return out, attn.data.copy()
    return out


def _layer_weights(params, layer):
    pre = f"mta.{layer}."
    return {k: params[pre + k] for k in
            ("motion", "wq", "wk", "wv", "wo", "ln_g", "ln_b",
             "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")}


def mta_block(state, weights, cfg, use_rope=True, return_attn=False):
    """One temporal layer: MLP(LN(attended)) + state."""
    res = temporal_attention(state, weights, cfg.n_heads, use_rope=use_rope,
                             base=cfg.rope_base, return_attn=return_attn)
    att, attn_arr = res if return_attn else (res, None)
    normed = layer_norm(att, weights["ln_g"], weights["ln_b"])
    mlp = mlp_forward(normed, [(weights["mlp_w1"], weights["mlp_b1"]),
                               (weights["mlp_w2"], weights["mlp_b2"])])
    out = mlp + state
    return (out, attn_arr) if return_attn else out


def mta_forward(tokensets, params, cfg, use_rope=True, collect_attn=False):
    """Run the full stack over one clip's per-frame token sets.

    tokensets: one encoder TokenSet per frame, each carrying per-layer
    patch outputs.  Encoder levels are paired with layers cyclically
    when depths differ.
    """
    aa_depth = len(tokensets[0].layer_patches)

    def level(l):
        per_frame = [ts.layer_patches[(l - 1) % aa_depth] for ts in tokensets]
        return stack(per_frame, axis=1)  # (V, T, N_p, D)

    n_motion = cfg.n_motion
    attn_all = []
    state = mta_input(params["mta.0.motion"], level(1), None, 1)
    for layer in range(cfg.depth):
        weights = _layer_weights(params, layer)
        res = mta_block(state, weights, cfg, use_rope=use_rope,
                        return_attn=collect_attn)
        out, attn_arr = res if collect_attn else (res, None)
        if collect_attn:
            attn_all.append(attn_arr)
        nxt = layer + 2  # 1-based index of the next layer
        if nxt <= cfg.depth:
            inject = mta_input(params[f"mta.{layer + 1}.motion"],
                               level(nxt), level(nxt - 1), nxt)
            state = out + inject
        else:
            state = out
    return MtaOutput(patches=state[:, :, n_motion:, :],
                     motion=state[:, :, :n_motion, :],
                     attention=attn_all)
