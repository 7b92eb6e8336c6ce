"""Training losses for the two-stage schedule.

Masked reductions multiply errors by the mask before any absolute value
or square, so invalid pixels contribute exactly zero to both the value
and the gradient.  abs uses sign(0) = 0, which makes the L1 subgradient
at zero the zero vector.

Geometric losses are normalized by the per-frame median magnitude of
the ground-truth points, which keeps scenes of different scale
comparable without touching the gradient direction.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import DiffTensor, huber, stop_gradient, tensor, zeros


@dataclass(frozen=True)
class LossWeights:
    lambda_temp: float = 0.01
    lambda_gs: float = 0.1
    lambda_dist: float = 0.1
    lambda_flow: float = 0.01


def _coerce(x):
    return x if isinstance(x, DiffTensor) else tensor(np.asarray(x, dtype=np.float64))


def _as_chw(x):
    x = _coerce(x)
    return x.reshape(1, *x.shape) if x.ndim == 2 else x


def _zero():
    return zeros(())


def _masked_l1_mean(pred, gt, valid):
    """Mean over valid pixels of the per-pixel L1 norm (channel sum)."""
    count = int(valid.sum())
    if count == 0:
        return _zero(), 0
    mask = valid.astype(np.float64)
    diff = (pred - gt) * tensor(mask)
    return diff.abs().sum() * (1.0 / count), count


def loss_temp(pred_t, pred_td, gt_t, gt_td, masks):
    """Displacement-consistency loss between two frames.

    Compares predicted displacement (pred_td - pred_t) against the
    ground-truth one over the intersection of all given masks.  Returns
    (loss, empty_flag); an empty intersection yields loss 0 and flags it.
    A constant offset applied to both predicted frames cancels in the
    difference and leaves the loss unchanged.
    """
    valid = None
    for m in masks:
        m = np.asarray(m, dtype=bool)
        valid = m if valid is None else (valid & m)
    if valid is None:
        raise ValueError("at least one mask is required")
    pred_disp = _as_chw(pred_td) - _as_chw(pred_t)
    gt_disp = np.asarray(gt_td, dtype=np.float64) - np.asarray(gt_t, dtype=np.float64)
    if gt_disp.ndim == 2:
        gt_disp = gt_disp[None]
    value, count = _masked_l1_mean(pred_disp, tensor(gt_disp), valid)
    return value, count == 0


def canonicalize_quat_rows(vecs):
    """Flip each 9-vector's quaternion so w >= 0; returns new array/tensor."""
    if isinstance(vecs, DiffTensor):
        # sign decisions come from values, the flip itself stays in-graph
        signs = np.where(vecs.data[..., 0:1] < 0, -1.0, 1.0)
        flip = np.concatenate([np.broadcast_to(signs, vecs.shape[:-1] + (4,)),
                               np.ones(vecs.shape[:-1] + (5,))], axis=-1)
        return vecs * tensor(flip)
    vecs = np.array(vecs, dtype=np.float64)
    neg = vecs[..., 0] < 0
    vecs[neg, 0:4] = -vecs[neg, 0:4]
    return vecs


def loss_cam(pred, gt, delta: float = 0.1):
    """Summed Huber error between predicted and true camera vectors.

    Both sides are quaternion sign-canonicalized (w >= 0) first so the
    double cover of rotations cannot inflate the residual.
    """
    pred = _coerce(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 9:
        raise ValueError(f"camera vectors must match with trailing dim 9, "
                         f"got {pred.shape} vs {gt.shape}")
    residual = canonicalize_quat_rows(pred) - canonicalize_quat_rows(gt)
    return huber(residual, delta)


def loss_geo(pred, gt, valid):
    """Masked L1 on a geometric map plus half the spatial-gradient L1.

    Both terms are divided by the per-frame median ground-truth point
    magnitude over the valid set.  Works for (3, H, W) point maps and
    (H, W) depth maps.  Returns (loss, empty_flag).
    """
    valid = np.asarray(valid, dtype=bool)
    pred = _as_chw(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim == 2:
        gt = gt[None]
    if int(valid.sum()) == 0:
        return _zero(), True
    med = float(np.median(np.linalg.norm(gt[:, valid], axis=0)))
    med = max(med, 1e-8)
    gt_t = tensor(gt)

    term, _ = _masked_l1_mean(pred, gt_t, valid)

    err = pred - gt_t
    dx = err[:, :, 1:] - err[:, :, :-1]
    dy = err[:, 1:, :] - err[:, :-1, :]
    mx = valid[:, 1:] & valid[:, :-1]
    my = valid[1:, :] & valid[:-1, :]
    n_pairs = int(mx.sum()) + int(my.sum())
    if n_pairs:
        gsum = (dx * tensor(mx.astype(np.float64))).abs().sum() \
            + (dy * tensor(my.astype(np.float64))).abs().sum()
        grad_term = gsum * (1.0 / n_pairs)
    else:
        grad_term = _zero()
    return (term + grad_term * 0.5) * (1.0 / med), False


def _masked_mse(pred, gt, valid=None):
    pred = _coerce(pred)
    gt_arr = np.asarray(gt, dtype=np.float64)
    if valid is None:
        d = pred - tensor(gt_arr)
        return (d * d).mean()
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return _zero()
    per = int(np.prod(pred.shape)) // int(np.prod(valid.shape))
    mask = valid.astype(np.float64)
    if valid.shape == pred.shape[:valid.ndim] and valid.ndim < pred.ndim:
        mask = mask.reshape(valid.shape + (1,) * (pred.ndim - valid.ndim))
    d = (pred - tensor(gt_arr)) * tensor(mask)
    return (d * d).sum() * (1.0 / (count * per))


def loss_render(pred_img, gt_img, gs_depth, sup_depth, g_depth, teacher_depth,
                weights: LossWeights, pred_flow=None, gt_flow=None,
                depth_valid=None, dist_valid=None, flow_valid=None):
    """Stage-2 rendering loss with a detached depth teacher.

    total = MSE(image) + lambda_gs * L1(rendered depth, supervision)
          + lambda_dist * L1(head depth, sg(teacher depth))
          + lambda_flow * MSE(flow)

    teacher_depth is stop-gradiented here, so its producers receive
    exactly zero gradient through this loss.  Returns (total, breakdown).
    """
    image = _masked_mse(pred_img, np.asarray(gt_img, dtype=np.float64))

    sup = np.asarray(sup_depth, dtype=np.float64)
    dv = np.ones(sup.shape[-2:], dtype=bool) if depth_valid is None \
        else np.asarray(depth_valid, dtype=bool)
    gs_term, _ = _masked_l1_mean(_as_chw(gs_depth), _as_chw(tensor(sup)), dv)

    teacher = stop_gradient(_coerce(teacher_depth))
    tv = np.ones(teacher.shape[-2:], dtype=bool) if dist_valid is None \
        else np.asarray(dist_valid, dtype=bool)
    dist_term, _ = _masked_l1_mean(_as_chw(g_depth), _as_chw(teacher), tv)

    if pred_flow is None:
        flow_term = _zero()
    else:
        flow_term = _masked_mse(pred_flow, gt_flow, flow_valid)

    total = image + gs_term * weights.lambda_gs \
        + dist_term * weights.lambda_dist + flow_term * weights.lambda_flow
    return total, {"image_mse": image, "gs_depth": gs_term,
                   "distill": dist_term, "flow": flow_term}


def stage1_total(l_cam, l_depth, l_point_t, l_point_delta, l_temp,
                 weights: LossWeights):
    """Camera + depth + both point maps + weighted temporal term."""
    return _coerce(l_cam) + _coerce(l_depth) + _coerce(l_point_t) \
        + _coerce(l_point_delta) + _coerce(l_temp) * weights.lambda_temp


def stage2_total(stage1, render_total):
    """Stage-2 objective: the stage-1 objective plus the render loss."""
    return _coerce(stage1) + _coerce(render_total)
