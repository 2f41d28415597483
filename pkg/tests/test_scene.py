"""Scene ops: perspective law, box containment sweeps, compositing partition,
SSIM closed forms and symmetry, relighting recovery."""

import numpy as np
import pytest

from advreal import scene
from advreal.errors import DomainError
from advreal.scene import (
    BoundingBox,
    Camera,
    RelightParams,
    apply_relight,
    composite,
    derive_render_params,
    relight_optimize,
    ssim,
    timespace_sample,
)


def gray_bg(size=416, value=0.4):
    return np.full((size, size, 3), value)


# -- timespace sampling -------------------------------------------------------


def test_degenerate_orientation_rejected():
    with pytest.raises(DomainError):
        timespace_sample(gray_bg(), np.random.default_rng(0), v_orient=np.zeros(2))


def test_background_too_small():
    with pytest.raises(DomainError):
        timespace_sample(gray_bg(48), np.random.default_rng(0))


def test_pinhole_height_halves_when_distance_doubles():
    cam = Camera()
    h1 = cam.box_height(1.8)
    h2 = cam.box_height(3.6)
    assert abs(round(h1) - 2 * round(h2)) <= 2  # within a pixel of rounding each


def test_boxes_inside_bounds_over_seeds():
    bg = gray_bg()
    for seed in range(1000):
        draw = timespace_sample(bg, np.random.default_rng(seed))
        for box in (draw.b_human, draw.b_near, draw.b_far):
            assert box.inside(416, 416), (seed, box.as_tuple())
        assert draw.b_near.height > draw.b_human.height > draw.b_far.height


def test_perspective_law_constant_product():
    bg = gray_bg()
    cam = Camera()
    for seed in range(50):
        draw = timespace_sample(bg, np.random.default_rng(seed))
        params = derive_render_params(draw.b_human, draw.v_orient, cam)
        product = draw.b_human.height * params.distance
        assert abs(product - cam.focal * cam.person_height) < cam.focal * cam.person_height * 0.02


def test_avoid_boxes_respected():
    bg = gray_bg()
    avoid = BoundingBox(100, 50, 250, 390)
    from advreal.scene import _boxes_iou

    for seed in range(40):
        draw = timespace_sample(bg, np.random.default_rng(seed), avoid_boxes=(avoid,))
        assert _boxes_iou(draw.b_human, avoid) < 0.5


# -- derive_render_params -----------------------------------------------------


def test_unit_distance_box():
    cam = Camera(focal=100.0, person_height=1.0, image_size=416)
    box = BoundingBox(0, 0, 40, 100)  # height = focal * person_height
    params = derive_render_params(box, np.array([0.0, 1.0]), cam)
    assert abs(params.distance - 1.0) < 1e-12


def test_facing_camera_convention():
    box = BoundingBox(100, 100, 200, 380)
    params = derive_render_params(box, np.array([0.0, 1.0]))
    assert abs(params.azimuth) < 1e-12


def test_zero_height_box_rejected():
    with pytest.raises(DomainError):
        BoundingBox(0, 10, 10, 10)


def test_distance_clamped_with_warning():
    cam = Camera()
    box = BoundingBox(0, 0, 20, 60)  # tiny box -> distance way past 4 m
    with pytest.warns(UserWarning, match="clamped"):
        params = derive_render_params(box, np.array([0.0, 1.0]), cam)
    assert params.distance == 4.0


def test_round_trip_recovers_distance():
    bg = gray_bg()
    cam = Camera()
    for seed in range(30):
        draw = timespace_sample(bg, np.random.default_rng(seed))
        params = derive_render_params(draw.b_human, draw.v_orient, cam)
        # the sampler drew the box from some d*; h = round-off of f*H/d*
        implied_height = cam.box_height(params.distance)
        assert abs(implied_height - draw.b_human.height) / implied_height < 0.05


# -- composite ------------------------------------------------------------------


def test_composite_mask_zero_is_background():
    rng = np.random.default_rng(0)
    r = rng.uniform(0, 1, (8, 8, 3))
    x = rng.uniform(0, 1, (8, 8, 3))
    assert np.allclose(composite(r, np.zeros((8, 8)), x), x)


def test_composite_mask_one_is_render():
    rng = np.random.default_rng(1)
    r = rng.uniform(0, 1, (8, 8, 3))
    x = rng.uniform(0, 1, (8, 8, 3))
    assert np.allclose(composite(r, np.ones((8, 8)), x), r)


def test_composite_checkerboard_matches_pixel_oracle():
    rng = np.random.default_rng(2)
    r = rng.uniform(0, 1, (6, 6, 3))
    x = rng.uniform(0, 1, (6, 6, 3))
    m = np.indices((6, 6)).sum(axis=0) % 2
    out = composite(r, m, x)
    for i in range(6):
        for j in range(6):
            expect = r[i, j] if m[i, j] else x[i, j]
            assert np.allclose(out[i, j], expect)


def test_composite_partition_property():
    rng = np.random.default_rng(3)
    r = rng.uniform(0, 1, (9, 7, 3))
    x = rng.uniform(0, 1, (9, 7, 3))
    m = (rng.random((9, 7)) > 0.5).astype(float)
    lhs = composite(r, m, x) + composite(x, m, r)
    assert np.allclose(lhs, r + x, atol=1e-12)


def test_composite_shape_mismatch():
    with pytest.raises(DomainError):
        composite(np.zeros((4, 4, 3)), np.zeros((4, 4)), np.zeros((5, 5, 3)))


# -- ssim -------------------------------------------------------------------------


def test_ssim_identity():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 1, (32, 32, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetry_and_bounds():
    rng = np.random.default_rng(5)
    a = rng.uniform(0, 1, (24, 30, 3))
    b = rng.uniform(0, 1, (24, 30, 3))
    v1 = ssim(a, b)
    v2 = ssim(b, a)
    assert abs(v1 - v2) < 1e-9
    assert -1.0 <= v1 <= 1.0


def test_ssim_binary_anticorrelation_nonpositive():
    rng = np.random.default_rng(6)
    a = (rng.random((40, 40)) > 0.5).astype(float)
    assert ssim(a, 1.0 - a) <= 0.0


def test_ssim_constant_images_closed_form():
    a = np.full((16, 16), 0.4)
    b = np.full((16, 16), 0.5)
    got = ssim(a, b)
    c1 = 0.01**2
    c2 = 0.03**2
    # zero variance: S = (2 mu1 mu2 + C1) C2 / ((mu1^2 + mu2^2 + C1) C2)
    expect = (2 * 0.4 * 0.5 + c1) / (0.4**2 + 0.5**2 + c1)
    assert got == pytest.approx(expect, abs=1e-12)


def test_ssim_window_size_guard():
    with pytest.raises(DomainError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    a = rng.uniform(0.2, 0.8, (18, 15, 3))
    b = rng.uniform(0.2, 0.8, (18, 15, 3))
    _, g = ssim(a, b, gradient=True)
    eps = 1e-6
    for idx in [(0, 0, 0), (9, 7, 1), (17, 14, 2), (5, 12, 0)]:
        ap = a.copy()
        ap[idx] += eps
        am = a.copy()
        am[idx] -= eps
        fd = (ssim(ap, b) - ssim(am, b)) / (2 * eps)
        assert abs(fd - g[idx]) < 1e-7, idx


# -- relight ----------------------------------------------------------------------


def textured(rng, shape=(48, 40, 3)):
    base = rng.uniform(0.2, 0.8, shape)
    ys = np.linspace(0, 1, shape[0])[:, None, None]
    return np.clip(base * 0.6 + 0.4 * ys, 0.0, 1.0)


def test_relight_identity_stays_near_start():
    rng = np.random.default_rng(8)
    img = textured(rng)
    cfg = RelightParams(iters=40)
    fit = relight_optimize(img, img, cfg)
    assert fit.loss_final <= fit.loss_initial
    assert abs(fit.alpha - 1.0) < 0.05
    assert abs(fit.beta) < 0.03
    assert np.abs(fit.theta).max() < 0.05


def test_relight_recovers_synthetic_ground_truth():
    rng = np.random.default_rng(9)
    img = textured(rng)
    target = np.clip(1.2 * img + 0.05, 0.0, 1.0)
    cfg = RelightParams(iters=100)
    fit = relight_optimize(img, target, cfg)
    assert 1.1 <= fit.alpha <= 1.3
    assert 0.0 <= fit.beta <= 0.1
    assert fit.loss_final <= fit.loss_initial


def test_relight_bounds_clip():
    rng = np.random.default_rng(10)
    img = textured(rng)
    target = np.clip(1.5 * img, 0.0, 1.0)
    cfg = RelightParams(alpha_bounds=(0.9, 1.1), iters=60)
    fit = relight_optimize(img, target, cfg)
    assert fit.alpha == pytest.approx(1.1, abs=1e-12)


def test_relight_never_diverges():
    rng = np.random.default_rng(11)
    for seed in range(5):
        r = np.random.default_rng(seed)
        img = textured(r)
        target = textured(np.random.default_rng(seed + 100))
        fit = relight_optimize(img, target, RelightParams(iters=30))
        assert fit.loss_final <= fit.loss_initial + 1e-12
        assert fit.image.min() >= 0.0 and fit.image.max() <= 1.0


def test_apply_relight_scalar_bias_degradation():
    rng = np.random.default_rng(12)
    img = rng.uniform(0, 1, (6, 6, 3))
    theta = np.array([0.0, 0.0, 0.0, 0.1, 0.1, 0.1])
    out = apply_relight(img, 1.0, 0.0, theta)
    assert np.allclose(out, img + 0.1)


def test_scene_sample_export(tmp_path):
    rng = np.random.default_rng(13)
    bg = gray_bg()
    draw = timespace_sample(bg, rng)
    params = derive_render_params(draw.b_human, draw.v_orient)
    mask = np.zeros((416, 416))
    ys, xs = draw.b_human.slices()
    mask[ys, xs] = 1.0
    sample = scene.SceneSample(
        background=bg, gt_box=draw.b_human, params=params, mask=mask,
        render=np.ones_like(bg) * 0.8, background_slice=scene.crop(bg, draw.b_human),
    )
    sample.validate()
    out = tmp_path / "sample.png"
    scene.save_scene_sample(sample, out, seed=13)
    assert out.exists() and (tmp_path / "sample.png.json").exists()
