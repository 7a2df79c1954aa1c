import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deepcontext.geometry import (
    CameraIntrinsics,
    DepthImage,
    OrientedBox3,
    PointCloud,
    TriMesh,
    apply_rigid,
    backproject_depth,
    box_iou_3d,
    box_mesh,
    camera_pose,
    desk_camera,
    fit_mesh_to_box,
    invert_rigid,
    mesh_box,
    normalize_yaw,
    read_depth_png,
    read_obj,
    render_mesh_depth,
    sphere_mesh,
    transform_cloud,
    write_depth_png,
    write_obj,
)

CAM = desk_camera()
finite = st.floats(-5, 5, allow_nan=False)


def quad(z, half=10.0):
    v = [[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]]
    return TriMesh(v, [[0, 1, 2], [0, 2, 3]])


def random_box(rng, spread=0.6):
    return OrientedBox3(rng.uniform(-spread, spread, 3), rng.uniform(0.3, 1.5, 3), rng.uniform(0, 2 * math.pi))


def monte_carlo_iou(a, b, n, rng):
    corners = np.concatenate([a.footprint(), b.footprint()])
    lo = np.array([*corners.min(axis=0), min(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2)])
    hi = np.array([*corners.max(axis=0), max(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2)])
    pts = rng.uniform(lo, hi, size=(n, 3))
    ia, ib = a.contains(pts), b.contains(pts)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


# -- back-projection and rendering --------------------------------------------


def test_principal_point_ray():
    cam = CameraIntrinsics(100, 100, 2, 1, 5, 3)
    d = np.zeros((3, 5))
    d[1, 2] = 2.0
    pts = backproject_depth(DepthImage(d), cam).points
    assert pts.shape == (1, 3)
    np.testing.assert_array_equal(pts[0], [0, 0, 2.0])


def test_missing_depth_emits_nothing():
    assert len(backproject_depth(DepthImage.empty(CAM), CAM)) == 0


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        backproject_depth(DepthImage(np.ones((3, 3))), CAM)


def test_empty_mesh_renders_missing():
    d = render_mesh_depth(TriMesh(np.zeros((0, 3))), CAM)
    assert np.all(d.values == 0)


def test_nearer_quad_wins():
    both = TriMesh.concat([quad(2.0), quad(1.0)])
    d = render_mesh_depth(both, CAM).values
    assert np.max(np.abs(d - 1.0)) <= 1e-12


def test_single_triangle_matches_ray_oracle():
    tri = np.array([[-0.4, -0.3, 1.5], [0.5, -0.2, 1.5], [0.0, 0.45, 1.5]])
    d = render_mesh_depth(TriMesh(tri, [[0, 1, 2]]), CAM).values
    covered = d > 0
    assert np.all(np.abs(d[covered] - 1.5) <= 1e-6)
    # ray through each pixel center hits the plane z=1.5 at (x, y); test barycentric containment there
    v, u = np.mgrid[0:CAM.height, 0:CAM.width]
    x = (u - CAM.cx) / CAM.fx * 1.5
    y = (v - CAM.cy) / CAM.fy * 1.5
    a, b, c = tri[:, :2]

    def side(p, q, px, py):
        return (q[0] - p[0]) * (py - p[1]) - (q[1] - p[1]) * (px - p[0])

    s = np.stack([side(a, b, x, y), side(b, c, x, y), side(c, a, x, y)])
    inside = np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)
    assert np.array_equal(inside, covered)


def test_render_backproject_plane_round_trip():
    # a tilted plane n.p = 2 seen by the camera
    n = np.array([0.1, -0.2, 1.0])
    n /= np.linalg.norm(n)
    half = 3.0
    corners = []
    for x, y in [(-half, -half), (half, -half), (half, half), (-half, half)]:
        z = (2 - n[0] * x - n[1] * y) / n[2]
        corners.append([x, y, z])
    d = render_mesh_depth(TriMesh(corners, [[0, 1, 2], [0, 2, 3]]), CAM)
    pts = backproject_depth(d, CAM).points
    assert len(pts) == CAM.width * CAM.height
    assert np.max(np.abs(pts @ n - 2)) <= 1e-6


@given(st.integers(0, 2 ** 31 - 1))
def test_render_backproject_closed_mesh(seed):
    rng = np.random.default_rng(seed)
    box = OrientedBox3(rng.uniform([-0.5, -0.3, 2.5], [0.5, 0.3, 4.0]), rng.uniform(0.3, 1.0, 3), 0.0)
    R = np.eye(3)
    a = rng.uniform(0, 2 * math.pi)
    R[[0, 0, 2, 2], [0, 2, 0, 2]] = [math.cos(a), math.sin(a), -math.sin(a), math.cos(a)]
    mesh = box_mesh(-box.size / 2, box.size / 2)
    verts = mesh.vertices @ R.T + box.center
    d = render_mesh_depth(TriMesh(verts, mesh.triangles), CAM)
    pts = backproject_depth(d, CAM).points
    local = (pts - box.center) @ R
    # distance to the box surface: the largest normalised coordinate sits on a face
    dist = np.min(np.abs(np.abs(local) - box.size / 2), axis=1)
    assert len(pts) > 0 and dist.max() <= 1e-6


def test_camera_pose_looks_along_plus_y():
    T = camera_pose(1.5, 0.0)
    np.testing.assert_allclose(apply_rigid(T, [[0, 0, 1]])[0], [0, 1, 1.5], atol=1e-12)
    np.testing.assert_allclose(invert_rigid(T) @ T, np.eye(4), atol=1e-12)


# -- transforms ---------------------------------------------------------------


def test_transform_identity_and_half_turn():
    c = PointCloud([[1, 0, 0]])
    np.testing.assert_array_equal(transform_cloud(c, 0.0, (0, 0, 0)).points, c.points)
    np.testing.assert_allclose(transform_cloud(c, math.pi, (0, 0, 0)).points, [[-1, 0, 0]], atol=1e-15)


@given(st.floats(-10, 10), st.tuples(finite, finite, finite), st.integers(0, 1000))
def test_transform_inverse_and_isometry(yaw, t, seed):
    pts = np.random.default_rng(seed).normal(size=(20, 3))
    c = PointCloud(pts)
    fwd = transform_cloud(c, yaw, t)
    back = transform_cloud(PointCloud(fwd.points - np.asarray(t)), -yaw, (0, 0, 0))
    assert np.max(np.abs(back.points - pts)) <= 1e-9
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(fwd.points[:, None] - fwd.points[None], axis=-1)
    assert np.max(np.abs(d0 - d1)) <= 1e-9


@given(st.floats(-100, 100))
def test_normalize_yaw_range(y):
    n = normalize_yaw(y)
    assert 0 <= n < 2 * math.pi
    assert abs(math.remainder(n - y, 2 * math.pi)) < 1e-9


# -- fitting ------------------------------------------------------------------


def test_fit_identity_and_anisotropic():
    cube = box_mesh([0, 0, 0], [1, 1, 1])
    fitted = fit_mesh_to_box(cube, OrientedBox3([0, 0, 0], [1, 1, 1]))
    np.testing.assert_allclose(fitted.vertices, cube.vertices - 0.5, atol=1e-15)
    wide = fit_mesh_to_box(cube, OrientedBox3([0, 0, 0], [2, 1, 1]))
    np.testing.assert_allclose(np.ptp(wide.vertices, axis=0), [2, 1, 1])


def test_fit_rejects_flat_mesh():
    flat = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    with pytest.raises(ValueError):
        fit_mesh_to_box(flat, OrientedBox3([0, 0, 0], [1, 1, 1]))


@given(st.integers(0, 2 ** 31 - 1))
def test_fit_then_bounds_reproduces_box(seed):
    rng = np.random.default_rng(seed)
    mesh = TriMesh(rng.normal(size=(30, 3)), rng.integers(0, 30, size=(10, 3)))
    box = OrientedBox3(rng.uniform(-3, 3, 3), rng.uniform(0.1, 3, 3), rng.uniform(0, 2 * math.pi))
    got = mesh_box(fit_mesh_to_box(mesh, box), box.yaw)
    assert np.max(np.abs(got.center - box.center)) <= 1e-9
    assert np.max(np.abs(got.size - box.size)) <= 1e-9


# -- IoU ----------------------------------------------------------------------


def test_iou_examples():
    a = OrientedBox3([0, 0, 0], [1, 1, 1])
    assert box_iou_3d(a, a) == 1.0
    assert box_iou_3d(a, OrientedBox3([5, 0, 0], [1, 1, 1])) == 0.0
    assert abs(box_iou_3d(a, OrientedBox3([0.5, 0, 0], [1, 1, 1])) - 1 / 3) < 1e-12


def test_iou_yaw_period():
    a = OrientedBox3([0.2, 0.1, 0], [1, 2, 1], 0.3)
    b = OrientedBox3([0.2, 0.1, 0], [1, 2, 1], 0.3 + math.pi)
    assert abs(box_iou_3d(a, b) - 1.0) < 1e-12


@given(st.integers(0, 2 ** 31 - 1))
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng), random_box(rng)
    ab, ba = box_iou_3d(a, b), box_iou_3d(b, a)
    assert 0 <= ab <= 1
    assert abs(ab - ba) < 1e-12


def test_iou_against_monte_carlo(rng):
    # a smaller sample of the acceptance check; the full 50 x 1e6 run lives in test_acceptance
    for _ in range(5):
        a, b = random_box(rng), random_box(rng)
        assert abs(box_iou_3d(a, b) - monte_carlo_iou(a, b, 200_000, rng)) < 5e-3


# -- files --------------------------------------------------------------------


def test_depth_png_round_trip(tmp_path, rng):
    d = DepthImage(np.round(rng.uniform(0, 8, (12, 9)), 3))
    write_depth_png(tmp_path / "d.png", d)
    np.testing.assert_allclose(read_depth_png(tmp_path / "d.png").values, d.values, atol=1e-9)


def test_obj_round_trip(tmp_path):
    m = sphere_mesh(0.7, 6, 8)
    write_obj(tmp_path / "s.obj", m)
    back = read_obj(tmp_path / "s.obj")
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-8)
    np.testing.assert_array_equal(back.triangles, m.triangles)


def test_box_validation():
    with pytest.raises(ValueError):
        OrientedBox3([0, 0, 0], [1, 0, 1])
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 0, 0, 4, 4)
