"""Projection oracles, compositing closed forms, gradient checks."""

import numpy as np
import pytest

from dv4d.heads import GaussianSet, camera_from_vector
from dv4d.numerics import DiffTensor, grad_check, tensor
from dv4d.rasterizer import (COV_FLOOR, RenderOutput, Splat2D, project_splat,
                             rasterize_splats, render, render_backward,
                             render_scene_file, write_render)


def _cam(size=16, fov=1.0):
    vec = np.array([1.0, 0, 0, 0, 0, 0, 0, fov, fov])
    return camera_from_vector(tensor(vec), size, size)


def _set(mu, log_scale=None, quat=None, color_logit=None, opacity_logit=None,
         velocity=None, t=0.0, grad=False):
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    n = mu.shape[0]

    def mk(v, default):
        arr = default if v is None else np.asarray(v, dtype=np.float64)
        return tensor(arr, requires_grad=grad)

    return GaussianSet(
        mu=tensor(mu, requires_grad=grad),
        log_scale=mk(log_scale, np.full((n, 3), -1.0)),
        quat=mk(quat, np.tile([1.0, 0, 0, 0], (n, 1))),
        color_logit=mk(color_logit, np.zeros((n, 3))),
        opacity_logit=mk(opacity_logit, np.zeros(n)),
        velocity=mk(velocity, np.zeros((n, 3))),
        t=t)


def test_on_axis_projects_to_center():
    cam = _cam()
    s = project_splat(_set([[0.0, 0.0, 2.0]]), cam)
    np.testing.assert_allclose(s.mean2d.data[0], [cam.cx, cam.cy], atol=1e-12)
    assert s.depth.data[0] == 2.0


def test_isotropic_covariance_oracle():
    # small isotropic gaussian on axis: cov2d = (f s / z)^2 I before floor
    cam = _cam()
    z, scale = 3.0, 0.05
    s = project_splat(_set([[0.0, 0.0, z]],
                           log_scale=[[np.log(scale)] * 3]), cam)
    f = cam.fx.data
    expect = (f * scale / z) ** 2 * np.eye(2)
    got = s.cov2d.data[0] - COV_FLOOR * np.eye(2)
    np.testing.assert_allclose(got, expect, atol=1e-6)


def test_behind_camera_culled_not_error():
    g = _set([[0.0, 0.0, 2.0], [0.0, 0.0, -1.0], [0.1, 0.0, 3.0]])
    s = project_splat(g, _cam())
    np.testing.assert_array_equal(s.index, [0, 2])

    empty = project_splat(_set([[0.0, 0.0, -5.0]]), _cam())
    assert empty.index.size == 0


def test_projection_gradients_fd():
    cam = _cam()
    rng = np.random.default_rng(0)
    w_cov = rng.normal(size=(2, 2, 2))
    w_mean = rng.normal(size=(2, 2))
    mu0 = np.array([[0.3, -0.2, 3.0], [-0.4, 0.1, 4.0]])
    ls0 = np.full((2, 3), -1.2)
    q0 = np.array([[0.9, 0.1, -0.2, 0.1], [1.0, 0.05, 0.0, -0.1]])

    def run(mu_t, ls_t, q_t):
        qn = q_t / ((q_t * q_t).sum(axis=1, keepdims=True) ** 0.5)
        g = GaussianSet(mu=mu_t, log_scale=ls_t, quat=qn,
                        color_logit=tensor(np.zeros((2, 3))),
                        opacity_logit=tensor(np.zeros(2)),
                        velocity=tensor(np.zeros((2, 3))), t=0.0)
        s = project_splat(g, cam)
        return (s.cov2d * tensor(w_cov)).sum() + (s.mean2d * tensor(w_mean)).sum()

    checks = [
        grad_check(lambda x: run(x, tensor(ls0), tensor(q0)), tensor(mu0), tol=1e-3),
        grad_check(lambda x: run(tensor(mu0), x, tensor(q0)), tensor(ls0), tol=1e-3),
        grad_check(lambda x: run(tensor(mu0), tensor(ls0), x), tensor(q0), tol=1e-3),
    ]
    for rep in checks:
        assert rep.passed, str(rep)


def test_camera_gradients_fd():
    rng = np.random.default_rng(1)
    w_mean = rng.normal(size=(2, 2))
    mu = tensor(np.array([[0.3, -0.2, 3.0], [-0.4, 0.1, 4.0]]))
    cam0 = np.array([0.95, 0.05, -0.1, 0.02, 0.2, -0.1, 0.05, 1.1, 0.9])

    def run(cv):
        cam = camera_from_vector(cv, 16, 16)
        g = GaussianSet(mu=mu, log_scale=tensor(np.full((2, 3), -1.2)),
                        quat=tensor(np.tile([1.0, 0, 0, 0], (2, 1))),
                        color_logit=tensor(np.zeros((2, 3))),
                        opacity_logit=tensor(np.zeros(2)),
                        velocity=tensor(np.zeros((2, 3))), t=0.0)
        s = project_splat(g, cam)
        return (s.mean2d * tensor(w_mean)).sum() + s.cov2d.sum()

    rep = grad_check(run, tensor(cam0), tol=1e-3)
    assert rep.passed, str(rep)


def _hand_splats(reverse=False):
    # red in front of blue, both dead-center on pixel (3, 3)
    mean = np.array([[3.0, 3.0], [3.0, 3.0]])
    cov = np.tile(np.eye(2), (2, 1, 1))
    dep = np.array([1.0, 2.0])
    col = np.array([[1.0, 0, 0], [0, 0, 1.0]])
    alp = np.array([0.6, 0.5])
    sel = slice(None, None, -1) if reverse else slice(None)
    return Splat2D(mean2d=tensor(mean[sel].copy()),
                   cov2d=tensor(cov[sel].copy()),
                   depth=tensor(dep[sel].copy()),
                   color=tensor(col[sel].copy()),
                   opacity=tensor(alp[sel].copy()),
                   index=np.arange(2))


def test_two_splat_closed_form():
    packed = rasterize_splats(_hand_splats(), 8, 8, np.zeros(3))
    c = packed.data[0:3, 3, 3]
    a = packed.data[3, 3, 3]
    d = packed.data[4, 3, 3]
    # front-to-back: w_red = 0.6, w_blue = 0.5 * (1 - 0.6) = 0.2
    np.testing.assert_allclose(c, [0.6, 0.0, 0.2], atol=1e-9)
    np.testing.assert_allclose(a, 0.8, atol=1e-9)
    np.testing.assert_allclose(d, (0.6 * 1.0 + 0.2 * 2.0) / 0.8, atol=1e-9)


def test_two_splat_sort_invariance_bitwise():
    a = rasterize_splats(_hand_splats(), 8, 8, np.zeros(3))
    b = rasterize_splats(_hand_splats(reverse=True), 8, 8, np.zeros(3))
    assert np.array_equal(a.data, b.data)


def test_single_gaussian_symmetry():
    out = render(_set([[0.0, 0.0, 2.5]], log_scale=[[np.log(0.4)] * 3],
                      opacity_logit=[5.0]), _cam())
    img = out.color.data
    np.testing.assert_allclose(img, img[:, :, ::-1], atol=1e-6)
    np.testing.assert_allclose(img, img[:, ::-1, :], atol=1e-6)


def test_empty_set_renders_background():
    bg = (0.2, 0.4, 0.6)
    out = render(_set([[0.0, 0.0, -3.0]]), _cam(), background=bg)
    np.testing.assert_array_equal(out.alpha.data, np.zeros((16, 16)))
    np.testing.assert_array_equal(out.depth.data, np.zeros((16, 16)))
    for ch, v in enumerate(bg):
        np.testing.assert_array_equal(out.color.data[ch], np.full((16, 16), v))


def test_alpha_range_and_depth_zero_where_empty():
    rng = np.random.default_rng(2)
    n = 10
    g = _set(np.column_stack([rng.uniform(-0.5, 0.5, n),
                              rng.uniform(-0.5, 0.5, n),
                              rng.uniform(2.0, 5.0, n)]),
             opacity_logit=rng.normal(size=n))
    out = render(g, _cam())
    assert (out.alpha.data >= 0).all() and (out.alpha.data <= 1).all()
    np.testing.assert_array_equal(out.depth.data[out.alpha.data == 0], 0.0)


def test_shuffle_input_order_bit_identical():
    rng = np.random.default_rng(3)
    n = 20
    mu = np.column_stack([rng.uniform(-0.6, 0.6, n),
                          rng.uniform(-0.6, 0.6, n),
                          rng.uniform(2.0, 5.0, n) + np.arange(n) * 1e-3])
    col = rng.normal(size=(n, 3))
    alp = rng.normal(size=n)
    perm = rng.permutation(n)
    a = render(_set(mu, color_logit=col, opacity_logit=alp), _cam())
    b = render(_set(mu[perm], color_logit=col[perm], opacity_logit=alp[perm]),
               _cam())
    assert np.array_equal(a.color.data, b.color.data)
    assert np.array_equal(a.alpha.data, b.alpha.data)
    assert np.array_equal(a.depth.data, b.depth.data)


def test_zero_velocity_time_invariant_bitwise():
    rng = np.random.default_rng(4)
    n = 8
    mu = np.column_stack([rng.uniform(-0.5, 0.5, n),
                          rng.uniform(-0.5, 0.5, n),
                          rng.uniform(2.0, 4.0, n)])
    g = _set(mu, opacity_logit=rng.normal(size=n))
    a = render(g, _cam(), t_render=0.0)
    b = render(g, _cam(), t_render=2.5)
    assert np.array_equal(a.color.data, b.color.data)
    assert np.array_equal(a.depth.data, b.depth.data)


def test_velocity_gradient_is_delta_times_center_gradient():
    rng = np.random.default_rng(5)
    g = _set([[0.1, 0.0, 3.0], [-0.2, 0.1, 4.0]],
             velocity=[[0.05, -0.02, 0.0], [0.0, 0.03, 0.01]], grad=True)
    delta = 2.5
    out = render(g, _cam(), t_render=delta)
    w = rng.normal(size=(3, 16, 16))
    (out.color * tensor(w)).sum().backward()
    assert g.mu.grad is not None
    assert np.array_equal(g.velocity.grad, g.mu.grad * delta)


def test_zero_opacity_gaussian_gets_zero_color_gradient():
    g = _set([[0.0, 0.0, 2.0], [0.1, 0.0, 3.0]],
             opacity_logit=[-1000.0, 0.0], grad=True)
    out = render(g, _cam())
    out.color.sum().backward()
    np.testing.assert_array_equal(g.color_logit.grad[0], np.zeros(3))
    assert np.abs(g.color_logit.grad[1]).max() > 0


def test_alpha_monotone_in_opacity():
    base = [[0.0, 0.0, 2.5], [0.2, -0.1, 3.0]]
    lo = render(_set(base, opacity_logit=[0.0, 0.3]), _cam())
    hi = render(_set(base, opacity_logit=[1.0, 0.3]), _cam())
    assert (hi.alpha.data >= lo.alpha.data - 1e-15).all()


def test_end_to_end_gradients_fd_five_gaussians():
    rng = np.random.default_rng(6)
    n = 5
    cam = _cam(16)
    mu0 = np.column_stack([rng.uniform(-0.4, 0.4, n),
                           rng.uniform(-0.4, 0.4, n),
                           np.linspace(2.0, 4.0, n)])
    ls0 = np.full((n, 3), np.log(1.0))
    q0 = rng.normal(size=(n, 4)) * 0.1 + np.array([1.0, 0, 0, 0])
    cl0 = rng.normal(size=(n, 3))
    ol0 = rng.uniform(-0.5, 0.5, n)
    v0 = rng.normal(size=(n, 3)) * 0.02
    wc = rng.normal(size=(3, 16, 16))
    wa = rng.normal(size=(16, 16))
    wd = rng.normal(size=(16, 16))
    delta = 1.5

    fields = dict(mu=mu0, log_scale=ls0, quat=q0, color_logit=cl0,
                  opacity_logit=ol0, velocity=v0)

    def loss_for(name):
        def f(x):
            vals = {k: tensor(v) for k, v in fields.items()}
            vals[name] = x
            qn = vals["quat"]
            qn = qn / ((qn * qn).sum(axis=1, keepdims=True) ** 0.5)
            g = GaussianSet(mu=vals["mu"], log_scale=vals["log_scale"],
                            quat=qn, color_logit=vals["color_logit"],
                            opacity_logit=vals["opacity_logit"],
                            velocity=vals["velocity"], t=0.0)
            out = render(g, cam, t_render=delta)
            return (out.color * tensor(wc)).sum() \
                + (out.alpha * tensor(wa)).sum() \
                + (out.depth * tensor(wd)).sum()
        return f

    for name, x0 in fields.items():
        rep = grad_check(loss_for(name), tensor(x0), tol=1e-3)
        assert rep.passed, f"{name}: {rep}"


def test_end_to_end_camera_gradients_fd():
    rng = np.random.default_rng(7)
    n = 4
    mu = tensor(np.column_stack([rng.uniform(-0.4, 0.4, n),
                                 rng.uniform(-0.4, 0.4, n),
                                 np.linspace(2.0, 4.0, n)]))
    wc = rng.normal(size=(3, 16, 16))
    cam0 = np.array([0.98, 0.02, -0.05, 0.01, 0.1, -0.05, 0.02, 1.05, 0.95])

    def f(cv):
        cam = camera_from_vector(cv, 16, 16)
        g = GaussianSet(mu=mu, log_scale=tensor(np.full((n, 3), 0.0)),
                        quat=tensor(np.tile([1.0, 0, 0, 0], (n, 1))),
                        color_logit=tensor(rng.normal(size=(n, 3)) * 0 + 0.3),
                        opacity_logit=tensor(np.zeros(n)),
                        velocity=tensor(np.zeros((n, 3))), t=0.0)
        return (render(g, cam).color * tensor(wc)).sum()

    rep = grad_check(f, tensor(cam0), tol=1e-3)
    assert rep.passed, str(rep)


def _grads_with_threads(threads):
    rng = np.random.default_rng(8)
    n = 30
    mu = np.column_stack([rng.uniform(-1.0, 1.0, n),
                          rng.uniform(-1.0, 1.0, n),
                          rng.uniform(2.0, 5.0, n)])
    g = _set(mu, color_logit=rng.normal(size=(n, 3)),
             opacity_logit=rng.normal(size=n),
             velocity=rng.normal(size=(n, 3)) * 0.05, grad=True)
    cam = _cam(32)
    out = render(g, cam, t_render=1.0, threads=threads)
    w = np.random.default_rng(9).normal(size=(3, 32, 32))
    render_backward(out, grad_color=w,
                    grad_alpha=np.ones((32, 32)),
                    grad_depth=np.ones((32, 32)))
    return out, {f: getattr(g, f).grad for f in
                 ("mu", "log_scale", "quat", "color_logit",
                  "opacity_logit", "velocity")}


def test_thread_count_bit_invariance():
    out1, g1 = _grads_with_threads(1)
    out4, g4 = _grads_with_threads(4)
    assert np.array_equal(out1.color.data, out4.color.data)
    assert np.array_equal(out1.alpha.data, out4.alpha.data)
    assert np.array_equal(out1.depth.data, out4.depth.data)
    for key in g1:
        assert np.array_equal(g1[key], g4[key]), key


def test_render_backward_requires_a_seed():
    out = render(_set([[0.0, 0.0, 2.0]]), _cam())
    with pytest.raises(ValueError):
        render_backward(out)


def test_scene_file_and_outputs(tmp_path):
    import json

    from dv4d.container import read_bundle
    from dv4d.heads import write_gaussians

    g = _set([[0.0, 0.0, 2.0], [0.3, 0.1, 3.0]],
             color_logit=[[2.0, -2.0, -2.0], [-2.0, -2.0, 2.0]],
             opacity_logit=[2.0, 1.0])
    write_gaussians(tmp_path / "g.dv4d", g)
    scene = {"gaussians": "g.dv4d",
             "camera": {"quat": [1, 0, 0, 0], "trans": [0, 0, 0],
                        "fov_y": 1.0, "fov_x": 1.0, "width": 16, "height": 16},
             "t_render": 0.0, "background": [0.1, 0.1, 0.1]}
    spath = tmp_path / "scene.json"
    spath.write_text(json.dumps(scene))
    out = render_scene_file(spath, tmp_path / "frame")
    assert (tmp_path / "frame.png").exists()
    named, meta = read_bundle(tmp_path / "frame.dv4d")
    np.testing.assert_array_equal(named["color"], out.color.data)
    np.testing.assert_array_equal(named["depth"], out.depth.data)
    np.testing.assert_array_equal(named["alpha"], out.alpha.data)
