import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splatdepth.core import (
    SH_C0,
    SH_C1,
    Camera,
    Gaussian3D,
    SplatSet,
    covariance_from,
    eval_gaussian,
    eval_sh,
    perspective_jacobian,
    project_scene,
    project_splat,
    quat_to_rotmat,
    sh_basis,
)
from splatdepth.errors import (
    BehindCameraError,
    DegenerateCovarianceError,
    DegenerateProjectionError,
    InvalidPrimitiveError,
)
from splatdepth.rasterizer import depth_at
from splatdepth.synthetic import random_camera, random_scene

finite = st.floats(-1.0, 1.0, allow_nan=False)
quats = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 0.1)
pos_scales = arrays(np.float64, 3, elements=st.floats(0.01, 2.0))


def unit(q):
    return q / np.linalg.norm(q)


def pinhole(f=100.0, size=101):
    c = (size - 1) / 2
    return Camera(f, f, c, c, size, size)


# --- primitives -------------------------------------------------------------

@pytest.mark.parametrize(
    "kwargs, match",
    [
        (dict(rotation=[2.0, 0, 0, 0]), "unit"),
        (dict(scales=[0.1, 0.0, 0.1]), "scale"),
        (dict(scales=[0.1, -1.0, 0.1]), "scale"),
        (dict(opacity=0.0), "opacity"),
        (dict(opacity=1.0), "opacity"),
        (dict(center=[np.nan, 0, 0]), "center"),
        (dict(sh=np.zeros((2, 3))), "SH"),
    ],
)
def test_gaussian_invariants_rejected(kwargs, match):
    base = dict(center=[0, 0, 0], rotation=[1, 0, 0, 0], scales=[0.1, 0.1, 0.1], opacity=0.5)
    base.update(kwargs)
    with pytest.raises(InvalidPrimitiveError, match=match):
        Gaussian3D(**base)


def test_splat_set_roundtrip_and_validate(rng):
    s = random_scene(rng, 5, sh_degree=1)
    back = SplatSet.from_gaussians(s.to_gaussians())
    for name in ("centers", "rotations", "scales", "opacities", "sh"):
        np.testing.assert_array_equal(getattr(back, name), getattr(s, name))
    s.opacities[3] = 1.5
    with pytest.raises(InvalidPrimitiveError, match="splat 3"):
        s.validate()


def test_camera_rejects_bad_rotation():
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(10, 10, 5, 5, 10, 10, rotation=np.diag([1.0, 1.0, 1.1]))
    with pytest.raises(ValueError):
        Camera(0, 10, 5, 5, 10, 10)


def test_look_at_conventions():
    cam = Camera.look_at([0, 0, -3], [0, 0, 0], [0, -1, 0], 50.0, width=64, height=48)
    np.testing.assert_allclose(cam.center, [0, 0, -3], atol=1e-15)
    np.testing.assert_allclose(cam.to_camera(np.zeros(3)), [0, 0, 3], atol=1e-15)
    # +y down in camera space: world up (y=-1 here means up is -y) maps to negative camera y
    assert cam.to_camera(np.array([0.0, -1.0, 0.0]))[1] < 0
    assert cam.cx == 31.5 and cam.cy == 23.5


def test_camera_scaled_keeps_pixel_centers():
    cam = pinhole(100.0, 101)
    half = cam.scaled(0.5)
    assert (half.width, half.height) == (50, 50)
    # the image point at the left edge (u = -0.5) stays at the left edge
    assert half.cx == pytest.approx((cam.cx + 0.5) * 0.5 - 0.5)


@given(quats)
def test_rotation_matrix_is_proper(q):
    r = quat_to_rotmat(q)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


@given(quats, pos_scales)
def test_covariance_spectrum_is_squared_scales(q, s):
    cov = covariance_from(unit(q), s)
    np.testing.assert_allclose(cov, cov.T, atol=1e-15)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(s**2), rtol=1e-9, atol=1e-14)


def test_eval_gaussian_has_no_half_factor():
    g = Gaussian3D([1, 2, 3], [1, 0, 0, 0], [0.5, 1.0, 2.0], 0.5)
    assert eval_gaussian(g, [1, 2, 3]) == 1.0
    assert eval_gaussian(g, [1.5, 2, 3]) == pytest.approx(np.exp(-1.0), rel=1e-15)
    assert eval_gaussian(g, [1, 2, 7]) == pytest.approx(np.exp(-4.0), rel=1e-15)


def test_eval_gaussian_degenerate():
    g = Gaussian3D([0, 0, 0], [1, 0, 0, 0], [1e-12, 1.0, 1.0], 0.5)
    with pytest.raises(DegenerateCovarianceError):
        eval_gaussian(g, [0, 0, 0])


def test_eval_sh_degree0_and_clamp():
    rgb = eval_sh(np.array([[1.0, -1.0, -10.0]]), [0, 0, 1])
    np.testing.assert_allclose(rgb, [0.5 + SH_C0, 0.5 - SH_C0, 0.0])


def test_eval_sh_degree1_sign_convention():
    coeffs = np.zeros((4, 3))
    coeffs[3, 0] = 1.0  # -C1 * x term
    np.testing.assert_allclose(eval_sh(coeffs, [1, 0, 0]), [0.5 - SH_C1 + 0.0, 0.5, 0.5], atol=1e-15)
    coeffs = np.zeros((4, 3))
    coeffs[2, 1] = 1.0  # C1 * z
    np.testing.assert_allclose(eval_sh(coeffs, [0, 0, 1]), [0.5, 0.5 + SH_C1, 0.5], atol=1e-15)


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_sh_basis_shape(degree):
    d = unit(np.array([0.3, -0.4, 0.8]))
    assert sh_basis(d, degree).shape == ((degree + 1) ** 2,)


# --- projection -------------------------------------------------------------

@given(arrays(np.float64, 3, elements=st.floats(-1, 1)), st.floats(0.5, 5.0))
def test_jacobian_matches_finite_differences(xy, z):
    cam = pinhole(120.0, 64)
    x = np.array([xy[0], xy[1], z])

    def ray_space(p):
        return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy, np.linalg.norm(p)])

    h = 1e-6
    fd = np.column_stack([(ray_space(x + h * e) - ray_space(x - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(perspective_jacobian(cam, x), fd, rtol=1e-6, atol=1e-6)


def test_jacobian_behind_camera():
    with pytest.raises(BehindCameraError):
        perspective_jacobian(pinhole(), [0, 0, -1.0])


def test_project_axis_aligned_frozen():
    # worked by hand: J = diag(50, 50, 1), Sigma' = diag(25, 100, 0.09), no coupling
    cam = pinhole(100.0, 101)
    g = Gaussian3D([0, 0, 2], [1, 0, 0, 0], [0.1, 0.2, 0.3], 0.5)
    pr = project_splat(cam, g)
    np.testing.assert_allclose(pr.uv_center, [50.0, 50.0])
    assert pr.z_c == 2.0 and pr.t_c == 2.0
    np.testing.assert_allclose(pr.ray_cov, np.diag([25.0, 100.0, 0.09]), atol=1e-13)
    np.testing.assert_allclose(pr.q, [0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(pr.normal, [0.0, 0.0, -1.0], atol=1e-15)
    np.testing.assert_allclose(pr.conic, np.diag([1 / 25.3, 1 / 100.3]), rtol=1e-13)


def test_project_tilted_frozen():
    # disc tilted 45 degrees about the camera y axis, on the optical axis
    cam = pinhole(100.0, 101)
    h = np.sqrt(0.5)
    q = np.array([np.cos(np.pi / 8), 0.0, np.sin(np.pi / 8), 0.0])
    g = Gaussian3D([0, 0, 2], q, [0.2, 0.2, 0.002], 0.5)
    pr = project_splat(cam, g)
    # the disc normal maps to (h, 0, h), so the plane is z = 2 - x; the stored
    # normal is flipped to face the camera
    np.testing.assert_allclose(pr.normal, [-h, 0.0, -h], atol=1e-4)
    assert pr.p[1] == pytest.approx(0.0, abs=1e-12)
    d_right = depth_at(pr, [51.0, 50.0])
    # exact plane depth one pixel right of center: x = 0.01 z, z = 2 / 1.01
    assert d_right == pytest.approx(2.0 / 1.01, rel=2e-4)
    assert d_right == pytest.approx(1.98000399960004, rel=1e-12)


def test_project_behind_and_degenerate():
    cam = pinhole()
    with pytest.raises(BehindCameraError):
        project_splat(cam, Gaussian3D([0, 0, -1], [1, 0, 0, 0], [0.1] * 3, 0.5))
    needle = Gaussian3D([0, 0, 2], [1, 0, 0, 0], [1e-8, 1.0, 1.0], 0.5)
    with pytest.raises(DegenerateProjectionError):
        project_splat(cam, needle)


def test_q_matches_full_inverse(rng):
    s = random_scene(rng, 50)
    cam = random_camera(rng, 64, 64)
    b = project_scene(s, cam)
    for i in np.flatnonzero(b.valid):
        a = b.ray_cov[i, :2, :2]
        q_ref = -np.linalg.solve(a, b.ray_cov[i, :2, 2])
        np.testing.assert_allclose(b.q[i], q_ref, rtol=1e-9, atol=1e-12)


def test_center_depth_identity(rng):
    s = random_scene(rng, 200)
    cam = random_camera(rng, 64, 64)
    b = project_scene(s, cam)
    for i in np.flatnonzero(b.valid):
        assert depth_at(b.splat(i), b.uv[i]) == b.z[i]


def test_culled_splats_are_invalid():
    cam = pinhole()
    s = SplatSet.from_gaussians(
        [Gaussian3D([0, 0, 2], [1, 0, 0, 0], [0.1] * 3, 0.5), Gaussian3D([0, 0, -2], [1, 0, 0, 0], [0.1] * 3, 0.5)]
    )
    b = project_scene(s, cam)
    assert b.valid.tolist() == [True, False]
    assert np.all(np.isfinite(b.q)) and np.all(np.isfinite(b.conic))
