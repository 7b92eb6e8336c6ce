"""Hand-derived loss values, masking behavior, gradient checks."""

import numpy as np
import pytest

from dv4d.losses import (LossWeights, canonicalize_quat_rows, loss_cam,
                         loss_geo, loss_render, loss_temp, stage1_total,
                         stage2_total)
from dv4d.numerics import grad_check, huber, tensor


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_temp, w.lambda_gs, w.lambda_dist, w.lambda_flow) \
        == (0.01, 0.1, 0.1, 0.01)


def test_huber_hand_case():
    # quadratic branch: 0.5^2 / 2
    assert huber(tensor(np.array([0.5])), 1.0).item() == 0.125


def test_loss_temp_two_point_hand_case():
    gt_t = np.zeros((3, 1, 2))
    gt_td = np.zeros((3, 1, 2))
    gt_td[0, 0, 0] = 1.0   # point 0 moves (1, 0, 0)
    gt_td[1, 0, 1] = 1.0   # point 1 moves (0, 1, 0)
    pred_t = tensor(np.zeros((3, 1, 2)))
    pred_td_arr = np.zeros((3, 1, 2))
    pred_td_arr[0, 0, 0] = 0.6   # error 0.4
    pred_td_arr[1, 0, 1] = 0.4   # error 0.6
    ones = np.ones((1, 2), dtype=bool)
    value, empty = loss_temp(pred_t, tensor(pred_td_arr), gt_t, gt_td,
                             [ones, ones, ones, ones])
    assert not empty
    np.testing.assert_allclose(value.item(), 0.5, atol=1e-12)


def test_loss_temp_constant_offset_invariant():
    rng = np.random.default_rng(0)
    gt_t = rng.normal(size=(3, 4, 4))
    gt_td = rng.normal(size=(3, 4, 4))
    p_t = rng.normal(size=(3, 4, 4))
    p_td = rng.normal(size=(3, 4, 4))
    mask = rng.uniform(size=(4, 4)) > 0.3
    base, _ = loss_temp(tensor(p_t), tensor(p_td), gt_t, gt_td, [mask])
    off = np.array([0.7, -1.3, 0.2])[:, None, None]
    moved, _ = loss_temp(tensor(p_t + off), tensor(p_td + off),
                         gt_t, gt_td, [mask])
    np.testing.assert_allclose(moved.item(), base.item(), atol=1e-12)


def test_loss_temp_empty_intersection():
    m1 = np.zeros((2, 2), dtype=bool)
    m1[0, 0] = True
    m2 = np.zeros((2, 2), dtype=bool)
    m2[1, 1] = True
    value, empty = loss_temp(tensor(np.ones((3, 2, 2))),
                             tensor(np.ones((3, 2, 2))),
                             np.zeros((3, 2, 2)), np.zeros((3, 2, 2)),
                             [m1, m2])
    assert empty and value.item() == 0.0


def test_loss_cam_hand_case():
    # one linear-branch residual: delta * |r| - delta^2 / 2
    gt = np.zeros((1, 9))
    gt[0, 0] = 1.0
    pred = gt.copy()
    pred[0, 4] = 0.5
    value = loss_cam(tensor(pred), gt, delta=0.1)
    np.testing.assert_allclose(value.item(), 0.1 * 0.5 - 0.005, atol=1e-12)


def test_loss_cam_quat_sign_canonicalized():
    gt = np.concatenate([[0.5, -0.5, 0.5, -0.5], [1.0, 2.0, 3.0], [1.0, 0.9]])
    pred = gt.copy()
    pred[0:4] = -pred[0:4]   # same rotation, opposite sign
    value = loss_cam(tensor(pred[None]), gt[None])
    assert value.item() == 0.0


def test_loss_cam_shape_guard():
    with pytest.raises(ValueError):
        loss_cam(tensor(np.zeros((2, 8))), np.zeros((2, 8)))


def test_canonicalize_plain_array():
    v = np.zeros((2, 9))
    v[0, 0] = -0.8
    v[0, 1] = 0.2
    v[1, 0] = 0.3
    out = canonicalize_quat_rows(v)
    assert out[0, 0] == 0.8 and out[0, 1] == -0.2 and out[1, 0] == 0.3


def test_loss_geo_offset_hand_case():
    # constant GT at distance 2, uniform +e on one channel: loss = e / 2
    gt = np.zeros((3, 4, 4))
    gt[2] = 2.0
    e = 0.4
    pred = gt.copy()
    pred[0] += e
    valid = np.ones((4, 4), dtype=bool)
    value, empty = loss_geo(tensor(pred), gt, valid)
    assert not empty
    np.testing.assert_allclose(value.item(), e / 2.0, atol=1e-12)


def test_loss_geo_empty_mask():
    value, empty = loss_geo(tensor(np.ones((3, 2, 2))), np.zeros((3, 2, 2)),
                            np.zeros((2, 2), dtype=bool))
    assert empty and value.item() == 0.0


def test_loss_geo_accepts_depth_maps():
    gt = np.full((4, 4), 3.0)
    pred = gt + 0.3
    value, _ = loss_geo(tensor(pred), gt, np.ones((4, 4), dtype=bool))
    np.testing.assert_allclose(value.item(), 0.3 / 3.0, atol=1e-12)


def test_l1_subgradient_at_zero_is_zero():
    # documented convention: d|x|/dx at x = 0 is 0, not +-1
    gt = np.ones((3, 3, 3))
    pred = tensor(gt.copy(), requires_grad=True)
    value, _ = loss_geo(pred, gt, np.ones((3, 3), dtype=bool))
    value.backward()
    np.testing.assert_array_equal(pred.grad, np.zeros_like(gt))


def test_loss_geo_gradients_fd():
    rng = np.random.default_rng(1)
    gt = rng.normal(size=(3, 4, 4)) + 3.0
    valid = rng.uniform(size=(4, 4)) > 0.2
    x0 = gt + rng.normal(size=(3, 4, 4)) * 0.5

    def f(x):
        value, _ = loss_geo(x, gt, valid)
        return value

    rep = grad_check(f, tensor(x0), tol=1e-4)
    assert rep.passed, str(rep)


def test_loss_temp_gradients_fd():
    rng = np.random.default_rng(2)
    gt_t = rng.normal(size=(3, 4, 4))
    gt_td = rng.normal(size=(3, 4, 4))
    p_t = rng.normal(size=(3, 4, 4))
    mask = rng.uniform(size=(4, 4)) > 0.2

    def f(x):
        value, _ = loss_temp(tensor(p_t), x, gt_t, gt_td, [mask])
        return value

    rep = grad_check(f, tensor(rng.normal(size=(3, 4, 4))), tol=1e-4)
    assert rep.passed, str(rep)


def test_loss_render_breakdown_and_total():
    rng = np.random.default_rng(3)
    w = LossWeights()
    pred_img = tensor(rng.uniform(size=(3, 8, 8)), requires_grad=True)
    gt_img = rng.uniform(size=(3, 8, 8))
    gs_depth = tensor(rng.uniform(1.0, 3.0, (8, 8)), requires_grad=True)
    sup_depth = rng.uniform(1.0, 3.0, (8, 8))
    g_depth = tensor(rng.uniform(1.0, 3.0, (4, 4)), requires_grad=True)
    teacher = tensor(rng.uniform(1.0, 3.0, (4, 4)), requires_grad=True)
    pf = tensor(rng.normal(size=(5, 3)), requires_grad=True)
    gf = rng.normal(size=(5, 3))
    fv = np.array([True, True, False, True, True])

    total, parts = loss_render(pred_img, gt_img, gs_depth, sup_depth,
                               g_depth, teacher, w, pred_flow=pf, gt_flow=gf,
                               flow_valid=fv)
    expect = parts["image_mse"].item() + 0.1 * parts["gs_depth"].item() \
        + 0.1 * parts["distill"].item() + 0.01 * parts["flow"].item()
    np.testing.assert_allclose(total.item(), expect, atol=1e-12)

    total.backward()
    # the detached teacher must receive exactly no gradient
    assert teacher.grad is None
    assert g_depth.grad is not None and np.abs(g_depth.grad).max() > 0
    # invalid flow rows contribute nothing
    np.testing.assert_array_equal(pf.grad[2], np.zeros(3))


def test_loss_render_without_flow():
    rng = np.random.default_rng(4)
    w = LossWeights()
    total, parts = loss_render(tensor(rng.uniform(size=(3, 4, 4))),
                               rng.uniform(size=(3, 4, 4)),
                               tensor(np.full((4, 4), 2.0)),
                               np.full((4, 4), 2.0),
                               tensor(np.full((2, 2), 2.0)),
                               np.full((2, 2), 2.0), w)
    assert parts["flow"].item() == 0.0
    assert parts["gs_depth"].item() == 0.0
    assert parts["distill"].item() == 0.0
    np.testing.assert_allclose(total.item(), parts["image_mse"].item(),
                               atol=1e-15)


def test_stage_totals_hand_cases():
    w = LossWeights()
    s1 = stage1_total(1.0, 1.0, 1.0, 1.0, 1.0, w)
    np.testing.assert_allclose(s1.item(), 4.01, atol=1e-12)
    assert stage2_total(2.0, 3.0).item() == 5.0
