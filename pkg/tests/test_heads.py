"""Dense decoding heads, Gaussian construction, velocities, advection."""

import numpy as np
import pytest

from dv4d.heads import (GaussianSet, HeadConfig, advect, appearance_features,
                        camera_from_vector, decode_velocities, fuse,
                        gaussian_decode, init_gaussians, init_head_params,
                        predict_future, read_gaussians, with_velocity,
                        write_gaussians)
from dv4d.numerics import DiffTensor, grad_check, tensor

CFG = HeadConfig(dim=16, channels=8, patch_size=4, feature_stride=2,
                 n_motion=4, height=16, width=16)


def _params(seed=0):
    return init_head_params(CFG, seed=seed)


def _tokens(rng, cfg=CFG):
    gh, gw = cfg.grid
    return rng.normal(0.0, 1.0, (gh * gw, cfg.dim))


def _identity_cam(cfg=CFG, fov=1.0):
    return tensor(np.array([1.0, 0, 0, 0, 0, 0, 0, fov, fov]))


def test_config_validation():
    with pytest.raises(ValueError):
        HeadConfig(patch_size=3)
    with pytest.raises(ValueError):
        HeadConfig(patch_size=4, feature_stride=8)
    with pytest.raises(ValueError):
        HeadConfig(patch_size=8, height=60, width=64)


def test_predict_future_shape_and_determinism():
    rng = np.random.default_rng(0)
    p = _params()
    toks = _tokens(rng)
    a = predict_future(toks, p, CFG)
    b = predict_future(toks, p, CFG)
    assert a.shape == (3, CFG.height, CFG.width)
    assert np.array_equal(a.data, b.data)


def test_appearance_zero_image_is_constant():
    p = _params()
    out = appearance_features(np.zeros((3, CFG.height, CFG.width)), p, CFG)
    fh, fw = CFG.feature_hw
    assert out.shape == (CFG.channels, fh, fw)
    ref = out.data[:, 0, 0][:, None, None]
    np.testing.assert_array_equal(out.data, np.broadcast_to(ref, out.shape))


def test_appearance_shift_equivariance():
    # shifting the input by one patch shifts the output by patch/stride
    rng = np.random.default_rng(1)
    p = _params()
    img = rng.uniform(0.0, 1.0, (3, CFG.height, CFG.width))
    shift = CFG.patch_size
    img2 = np.zeros_like(img)
    img2[:, :, shift:] = img[:, :, :-shift]
    out = appearance_features(img, p, CFG).data
    out2 = appearance_features(img2, p, CFG).data
    k = shift // CFG.feature_stride
    np.testing.assert_allclose(out2[:, 2:-2, k + 2:-2],
                               out[:, 2:-2, 2:-2 - k], atol=1e-12, rtol=0)


def test_appearance_rejects_wrong_shape():
    with pytest.raises(ValueError):
        appearance_features(np.zeros((3, 8, 8)), _params(), CFG)


def test_gaussian_decode_shapes_and_positive_depth():
    rng = np.random.default_rng(2)
    feats, depth = gaussian_decode(_tokens(rng), _params(), CFG)
    fh, fw = CFG.feature_hw
    assert feats.shape == (CFG.channels, fh, fw)
    assert depth.shape == (fh, fw)
    assert (depth.data > 0).all()


def test_fuse_sum_and_gradient_split():
    rng = np.random.default_rng(3)
    a = tensor(rng.normal(size=(4, 6, 6)), requires_grad=True)
    b = tensor(rng.normal(size=(4, 6, 6)), requires_grad=True)
    out = fuse(a, b)
    np.testing.assert_array_equal(out.data, a.data + b.data)
    out.sum().backward()
    np.testing.assert_array_equal(a.grad, b.grad)
    np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
    with pytest.raises(ValueError):
        fuse(a, tensor(np.zeros((4, 6, 5))))


def test_fuse_zero_gaussian_features_passthrough():
    rng = np.random.default_rng(4)
    a = tensor(rng.normal(size=(4, 6, 6)))
    z = tensor(np.zeros((4, 6, 6)))
    np.testing.assert_array_equal(fuse(a, z).data, a.data)


def _decode_set(rng, cam=None, const_depth=None, zero_feats=False):
    p = _params()
    feats, depth = gaussian_decode(_tokens(rng), p, CFG)
    if zero_feats:
        feats = tensor(np.zeros(feats.shape))
    if const_depth is not None:
        depth = tensor(np.full(depth.shape, const_depth))
    cam = _identity_cam() if cam is None else cam
    g, mix = init_gaussians(feats, depth, cam, p, CFG, t=0.0)
    return g, mix, p


def test_init_gaussians_count_and_rays():
    # every center must sit on its pixel ray at the decoded depth
    rng = np.random.default_rng(5)
    z = 2.0
    g, _, _ = _decode_set(rng, const_depth=z)
    fh, fw = CFG.feature_hw
    assert g.count == fh * fw
    cam = camera_from_vector(_identity_cam(), CFG.width, CFG.height)
    fx, fy = cam.fx.data, cam.fy.data
    s = CFG.feature_stride
    off = (s - 1) / 2.0
    k = 0
    for i in range(fh):
        for j in range(fw):
            u, v = j * s + off, i * s + off
            expect = np.array([(u - cam.cx) / fx * z, (v - cam.cy) / fy * z, z])
            np.testing.assert_allclose(g.mu.data[k], expect, atol=1e-12)
            k += 1


def test_init_gaussians_planar_grid():
    # constant depth through any camera unprojects to an exact plane
    rng = np.random.default_rng(6)
    q = np.array([0.9, 0.1, 0.2, 0.05])
    q = q / np.linalg.norm(q)
    cam_vec = tensor(np.concatenate([q, [0.1, -0.2, 0.3], [0.9, 1.1]]))
    g, _, _ = _decode_set(rng, cam=cam_vec, const_depth=3.0)
    pts = g.mu.data
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    assert sv[-1] < 1e-6


def test_init_gaussians_errors():
    rng = np.random.default_rng(7)
    p = _params()
    feats, depth = gaussian_decode(_tokens(rng), p, CFG)
    bad_fov = tensor(np.array([1.0, 0, 0, 0, 0, 0, 0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        init_gaussians(feats, depth, bad_fov, p, CFG)
    zero_q = tensor(np.array([0.0, 0, 0, 0, 0, 0, 0, 1.0, 1.0]))
    with pytest.raises(ValueError):
        init_gaussians(feats, depth, zero_q, p, CFG)
    with pytest.raises(ValueError):
        init_gaussians(tensor(np.zeros((CFG.channels, 2, 2))), depth,
                       _identity_cam(), p, CFG)


def test_init_gaussians_default_biases():
    # zero features decode to the configured starting attributes
    rng = np.random.default_rng(8)
    g, _, _ = _decode_set(rng, zero_feats=True)
    np.testing.assert_allclose(g.opacity().data, 0.5, atol=0)
    np.testing.assert_allclose(g.scale().data, np.exp(-2.5), rtol=1e-12)
    np.testing.assert_allclose(g.quat.data,
                               np.tile([1.0, 0, 0, 0], (g.count, 1)),
                               atol=1e-12)


def test_quaternions_unit_norm():
    rng = np.random.default_rng(9)
    g, _, _ = _decode_set(rng)
    norms = np.linalg.norm(g.quat.data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)


def test_decode_velocities_zero_bases():
    rng = np.random.default_rng(10)
    g, mix, p = _decode_set(rng)
    p["vel_w"].data[:] = 0.0
    p["vel_b"].data[:] = 0.0
    motion = rng.normal(size=(CFG.n_motion, CFG.dim))
    v = decode_velocities(mix, motion, p)
    np.testing.assert_array_equal(v.data, np.zeros((g.count, 3)))


def test_decode_velocities_single_basis_passthrough():
    cfg1 = HeadConfig(dim=16, channels=8, patch_size=4, feature_stride=2,
                      n_motion=1, height=16, width=16)
    p = init_head_params(cfg1, seed=0)
    rng = np.random.default_rng(11)
    motion = rng.normal(size=(1, cfg1.dim))
    basis = motion @ p["vel_w"].data + p["vel_b"].data
    mix = tensor(rng.normal(size=(5, 1)))
    v = decode_velocities(mix, motion, p)
    np.testing.assert_array_equal(v.data, np.tile(basis, (5, 1)))


def test_decode_velocities_convex_hull():
    rng = np.random.default_rng(12)
    g, mix, p = _decode_set(rng)
    motion = rng.normal(size=(CFG.n_motion, CFG.dim))
    bases = motion @ p["vel_w"].data + p["vel_b"].data
    v = decode_velocities(mix, motion, p)
    lo, hi = bases.min(axis=0), bases.max(axis=0)
    assert (v.data >= lo - 1e-9).all() and (v.data <= hi + 1e-9).all()
    from dv4d.numerics import softmax
    weights = softmax(mix, axis=-1).data
    assert (weights >= 0).all()
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)


def _toy_set(rng, n=6):
    return GaussianSet(
        mu=tensor(rng.normal(size=(n, 3))),
        log_scale=tensor(rng.normal(size=(n, 3)) * 0.1 - 2.0),
        quat=tensor(np.tile([1.0, 0, 0, 0], (n, 1))),
        color_logit=tensor(rng.normal(size=(n, 3))),
        opacity_logit=tensor(rng.normal(size=(n,))),
        velocity=tensor(rng.normal(size=(n, 3))),
        t=1.0)


def test_advect_example():
    g = GaussianSet(mu=tensor(np.zeros((1, 3))),
                    log_scale=tensor(np.zeros((1, 3))),
                    quat=tensor(np.array([[1.0, 0, 0, 0]])),
                    color_logit=tensor(np.zeros((1, 3))),
                    opacity_logit=tensor(np.zeros((1,))),
                    velocity=tensor(np.array([[1.0, 0, 0]])), t=0.0)
    moved = advect(g, 2.0)
    np.testing.assert_array_equal(moved.current_mu().data,
                                  np.array([[2.0, 0, 0]]))
    assert moved.time == 2.0


def test_advect_zero_velocity_bit_identical():
    rng = np.random.default_rng(13)
    g = _toy_set(rng)
    g = with_velocity(g, tensor(np.zeros((g.count, 3))))
    moved = advect(g, 3.5)
    assert np.array_equal(moved.current_mu().data, g.mu.data)


def test_advect_composition_exact():
    rng = np.random.default_rng(14)
    g = _toy_set(rng)
    two = advect(advect(g, 1.25), 2.5)
    one = advect(g, 3.75)
    assert np.array_equal(two.current_mu().data, one.current_mu().data)
    assert two.time == one.time
    # fractional steps are legal and other attributes are shared
    assert two.quat is g.quat and two.log_scale is g.log_scale


def test_with_velocity_shape_guard():
    rng = np.random.default_rng(15)
    g = _toy_set(rng)
    with pytest.raises(ValueError):
        with_velocity(g, tensor(np.zeros((g.count + 1, 3))))


def test_gaussians_serialization_roundtrip(tmp_path):
    rng = np.random.default_rng(16)
    g = _toy_set(rng)
    path = tmp_path / "set.dv4d"
    write_gaussians(path, g)
    back = read_gaussians(path)
    for field in ("mu", "log_scale", "quat", "color_logit",
                  "opacity_logit", "velocity"):
        np.testing.assert_array_equal(getattr(back, field).data,
                                      getattr(g, field).data)
    assert back.t == g.t and back.dt == 0.0

    # advected sets store materialized centers and the shifted timestamp
    moved = advect(g, 2.0)
    write_gaussians(path, moved)
    back = read_gaussians(path)
    np.testing.assert_array_equal(back.mu.data, moved.current_mu().data)
    assert back.t == g.t + 2.0


def test_full_stack_gradients_wrt_tokens():
    rng = np.random.default_rng(17)
    cfg = HeadConfig(dim=8, channels=4, patch_size=4, feature_stride=2,
                     n_motion=2, height=8, width=8)
    p = init_head_params(cfg, seed=1)
    gh, gw = cfg.grid
    toks0 = rng.normal(0.0, 0.5, (gh * gw, cfg.dim))
    motion = rng.normal(size=(cfg.n_motion, cfg.dim))
    cam = tensor(np.array([1.0, 0, 0, 0, 0, 0, 0, 1.0, 1.0]))
    probe = rng.normal(size=(3, cfg.height, cfg.width))

    def loss(toks):
        fut = predict_future(toks, p, cfg)
        feats, depth = gaussian_decode(toks, p, cfg)
        app = appearance_features(probe, p, cfg)
        g, mix = init_gaussians(fuse(app, feats), depth, cam, p, cfg)
        g = with_velocity(g, decode_velocities(mix, motion, p))
        return (fut * fut).sum() + (g.mu * g.mu).sum() + g.scale().sum() \
            + (g.quat * g.quat * 0.5).sum() + g.color().sum() \
            + g.opacity().sum() + (g.velocity * g.velocity).sum()

    report = grad_check(loss, tensor(toks0), tol=1e-4)
    assert report.passed, str(report)


def test_full_stack_gradients_wrt_camera():
    rng = np.random.default_rng(18)
    cfg = HeadConfig(dim=8, channels=4, patch_size=4, feature_stride=2,
                     n_motion=2, height=8, width=8)
    p = init_head_params(cfg, seed=2)
    gh, gw = cfg.grid
    toks = tensor(rng.normal(0.0, 0.5, (gh * gw, cfg.dim)))
    cam0 = np.array([0.95, 0.05, -0.1, 0.02, 0.3, -0.2, 0.1, 1.1, 0.9])

    def loss(cam_vec):
        feats, depth = gaussian_decode(toks, p, cfg)
        g, _ = init_gaussians(feats, depth, cam_vec, p, cfg)
        return (g.mu * g.mu).sum()

    report = grad_check(loss, tensor(cam0), tol=1e-4)
    assert report.passed, str(report)
