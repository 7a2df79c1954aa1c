"""Depth-camera geometry, point clouds, upright boxes and a z-buffer mesh renderer.

Conventions: the camera frame is x right, y down, z forward. Working frames
("gravity", "template") are z-up and yaw is counterclockwise seen from above.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * np.pi
FRAMES = ("camera", "gravity", "template")


def normalize_yaw(yaw: float) -> float:
    y = float(np.mod(yaw, TWO_PI))
    # np.mod can return exactly 2*pi for tiny negative inputs
    return 0.0 if y >= TWO_PI else y


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rigid(rotation: np.ndarray, translation) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = rotation
    T[:3, 3] = translation
    return T


def apply_rigid(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ T[:3, :3].T + T[:3, 3]


def invert_rigid(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    return rigid(R.T, -R.T @ T[:3, 3])


def camera_pose(height: float, pitch: float, heading: float = 0.0, position_xy=(0.0, 0.0)) -> np.ndarray:
    """world_from_camera for a camera at ``height`` above the floor.

    ``pitch`` < 0 looks down. With heading 0 the optical axis projects onto +y.
    """
    cp, sp = np.cos(pitch), np.sin(pitch)
    x_cam = np.array([1.0, 0.0, 0.0])
    z_cam = np.array([0.0, cp, sp])
    y_cam = np.cross(z_cam, x_cam)
    R = yaw_matrix(heading) @ np.stack([x_cam, y_cam, z_cam], axis=1)
    return rigid(R, [position_xy[0], position_xy[1], height])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


def desk_camera() -> CameraIntrinsics:
    """160x120 sensor with a Kinect-like 57 degree horizontal field of view."""
    return CameraIntrinsics(fx=147.0, fy=147.0, cx=79.5, cy=59.5, width=160, height=120)


@dataclass
class DepthImage:
    """Per-pixel z-depth in meters; 0 marks missing depth."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("depth must be a 2D array")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("depth values must be finite and >= 0")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def empty(cls, cam: CameraIntrinsics) -> "DepthImage":
        return cls(np.zeros((cam.height, cam.width)))


@dataclass
class PointCloud:
    points: np.ndarray
    frame: str = "camera"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class OrientedBox3:
    """Gravity-upright box: center, full extents along its local axes, yaw about +z."""

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not np.all(self.size > 0):
            raise ValueError(f"box size must be positive, got {self.size}")
        if not (np.all(np.isfinite(self.center)) and np.isfinite(self.yaw)):
            raise ValueError("box parameters must be finite")
        self.yaw = normalize_yaw(self.yaw)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def footprint(self) -> np.ndarray:
        """Counterclockwise (4, 2) corners of the horizontal footprint."""
        hx, hy = self.size[0] / 2, self.size[1] / 2
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        R = np.array([[c, -s], [s, c]])
        return local @ R.T + self.center[:2]

    def contains(self, points: np.ndarray, inflate: float = 1.0) -> np.ndarray:
        local = (np.asarray(points, dtype=np.float64) - self.center) @ yaw_matrix(self.yaw)
        half = self.size * inflate / 2
        return np.all(np.abs(local) <= half, axis=-1)

    def transformed(self, yaw: float, translation) -> "OrientedBox3":
        """The box after rotating the frame by ``yaw`` about z, then translating."""
        return OrientedBox3(yaw_matrix(yaw) @ self.center + np.asarray(translation, dtype=np.float64),
                            self.size.copy(), self.yaw + yaw)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "size": self.size.tolist(), "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d: dict) -> "OrientedBox3":
        return cls(d["center"], d["size"], d.get("yaw", 0.0))


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def transformed(self, T: np.ndarray) -> "TriMesh":
        return TriMesh(apply_rigid(T, self.vertices), self.triangles.copy())

    @staticmethod
    def concat(meshes) -> "TriMesh":
        verts, tris, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            offset += len(m.vertices)
        if not verts:
            return TriMesh(np.zeros((0, 3)))
        return TriMesh(np.concatenate(verts), np.concatenate(tris))


def box_mesh(lo, hi) -> TriMesh:
    """Closed axis-aligned cuboid with outward-facing triangles."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]], [hi[0], hi[1], lo[2]], [lo[0], hi[1], lo[2]],
                  [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]], [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]]])
    f = [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
         [1, 2, 6], [1, 6, 5], [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]]
    return TriMesh(v, f)


def cylinder_mesh(radius: float, z0: float, z1: float, segments: int = 16, center=(0.0, 0.0)) -> TriMesh:
    ang = np.linspace(0, TWO_PI, segments, endpoint=False)
    ring = np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(segments, z0)])
    top = np.column_stack([ring, np.full(segments, z1)])
    caps = np.array([[center[0], center[1], z0], [center[0], center[1], z1]])
    v = np.concatenate([bottom, top, caps])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [[i, j, segments + j], [i, segments + j, segments + i], [cb, j, i], [ct, segments + i, segments + j]]
    return TriMesh(v, tris)


def sphere_mesh(radius: float = 1.0, n_lat: int = 12, n_lon: int = 24) -> TriMesh:
    verts = [[0.0, 0.0, radius]]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = TWO_PI * j / n_lon
            verts.append([radius * np.sin(th) * np.cos(ph), radius * np.sin(th) * np.sin(ph), radius * np.cos(th)])
    verts.append([0.0, 0.0, -radius])
    south = len(verts) - 1
    tris = []
    for j in range(n_lon):
        tris.append([0, 1 + j, 1 + (j + 1) % n_lon])
    for i in range(n_lat - 2):
        a, b = 1 + i * n_lon, 1 + (i + 1) * n_lon
        for j in range(n_lon):
            k = (j + 1) % n_lon
            tris += [[a + j, b + j, b + k], [a + j, b + k, a + k]]
    last = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        tris.append([last + j, south, last + (j + 1) % n_lon])
    return TriMesh(np.array(verts), tris)


# -- depth <-> points ---------------------------------------------------------


def _check_dims(depth: DepthImage, cam: CameraIntrinsics) -> None:
    if depth.width != cam.width or depth.height != cam.height:
        raise ValueError(f"depth is {depth.width}x{depth.height} but camera is {cam.width}x{cam.height}")


def backproject_depth(depth: DepthImage, cam: CameraIntrinsics, return_pixels: bool = False):
    _check_dims(depth, cam)
    v, u = np.nonzero(depth.values > 0)
    z = depth.values[v, u]
    pts = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=1)
    cloud = PointCloud(pts, "camera")
    if return_pixels:
        return cloud, (v, u)
    return cloud


def _clip_near(poly: np.ndarray, near: float) -> np.ndarray:
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i - 1], poly[i]
        ina, inb = a[2] >= near, b[2] >= near
        if ina != inb:
            t = (near - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
        if inb:
            out.append(b)
    return np.array(out)


def _raster_triangle(zbuf: np.ndarray, p: np.ndarray, cam: CameraIntrinsics, ids=None, index: int = -1) -> None:
    z = p[:, 2]
    u = cam.fx * p[:, 0] / z + cam.cx
    v = cam.fy * p[:, 1] / z + cam.cy
    area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
    if abs(area) < 1e-12:
        return
    u0, u1 = max(int(np.ceil(u.min())), 0), min(int(np.floor(u.max())), cam.width - 1)
    v0, v1 = max(int(np.ceil(v.min())), 0), min(int(np.floor(v.max())), cam.height - 1)
    if u0 > u1 or v0 > v1:
        return
    uu, vv = np.meshgrid(np.arange(u0, u1 + 1, dtype=np.float64), np.arange(v0, v1 + 1, dtype=np.float64))
    w0 = ((u[1] - uu) * (v[2] - vv) - (u[2] - uu) * (v[1] - vv)) / area
    w1 = ((u[2] - uu) * (v[0] - vv) - (u[0] - uu) * (v[2] - vv)) / area
    w2 = 1.0 - w0 - w1
    eps = -1e-9
    inside = (w0 >= eps) & (w1 >= eps) & (w2 >= eps)
    if not inside.any():
        return
    # 1/z is affine in screen space, so this is perspective-correct
    depth = 1.0 / (w0 / z[0] + w1 / z[1] + w2 / z[2])
    region = zbuf[v0:v1 + 1, u0:u1 + 1]
    if ids is None:
        np.minimum(region, np.where(inside, depth, np.inf), out=region)
        return
    closer = inside & (depth < region)
    region[closer] = depth[closer]
    ids[v0:v1 + 1, u0:u1 + 1][closer] = index


def render_mesh_depth(mesh: TriMesh, cam: CameraIntrinsics, near: float = 1e-3, return_ids: bool = False):
    """Z-buffer rasterization of a camera-frame mesh, sampled at pixel centers.

    With ``return_ids`` also returns the index of the visible triangle per pixel (-1 for none).
    """
    zbuf = np.full((cam.height, cam.width), np.inf)
    ids = np.full((cam.height, cam.width), -1, dtype=np.int64) if return_ids else None
    for t, tri in enumerate(mesh.triangles):
        p = mesh.vertices[tri]
        zs = p[:, 2]
        if np.all(zs < near):
            continue
        if np.any(zs < near):
            poly = _clip_near(p, near)
            for k in range(1, len(poly) - 1):
                _raster_triangle(zbuf, np.stack([poly[0], poly[k], poly[k + 1]]), cam, ids, t)
        else:
            _raster_triangle(zbuf, p, cam, ids, t)
    zbuf[~np.isfinite(zbuf)] = 0.0
    if return_ids:
        return DepthImage(zbuf), ids
    return DepthImage(zbuf)


def transform_cloud(cloud: PointCloud, yaw: float, translation, frame: str | None = None) -> PointCloud:
    pts = cloud.points @ yaw_matrix(yaw).T + np.asarray(translation, dtype=np.float64)
    return PointCloud(pts, frame or cloud.frame)


# -- meshes and boxes ---------------------------------------------------------


def mesh_box(mesh: TriMesh, yaw: float = 0.0) -> OrientedBox3:
    """Tightest box with the given yaw around the mesh vertices."""
    R = yaw_matrix(yaw)
    local = mesh.vertices @ R
    lo, hi = local.min(axis=0), local.max(axis=0)
    return OrientedBox3(R @ ((lo + hi) / 2), hi - lo, yaw)


def fit_mesh_to_box(mesh: TriMesh, box: OrientedBox3) -> TriMesh:
    """Scale the mesh per axis so its bounds fill ``box``, then pose it."""
    if len(mesh.vertices) == 0:
        raise ValueError("cannot fit an empty mesh")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    extent = hi - lo
    if np.any(extent <= 0):
        raise ValueError(f"mesh has zero extent along an axis: {extent}")
    local = (mesh.vertices - (lo + hi) / 2) * (box.size / extent)
    return TriMesh(local @ yaw_matrix(box.yaw).T + box.center, mesh.triangles.copy())


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside the counterclockwise convex ``clip``."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        inp, out = out, []
        for j in range(len(inp)):
            p, q = inp[j - 1], inp[j]
            sp = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])
            sq = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0])
            if sq >= 0:
                if sp < 0:
                    out.append(p + (q - p) * (sp / (sp - sq)))
                out.append(q)
            elif sp >= 0:
                out.append(p + (q - p) * (sp / (sp - sq)))
    return np.array(out).reshape(-1, 2)


def box_intersection_volume(a: OrientedBox3, b: OrientedBox3) -> float:
    za = (a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2)
    zb = (b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2)
    dz = min(za[1], zb[1]) - max(za[0], zb[0])
    if dz <= 0:
        return 0.0
    area = _polygon_area(clip_convex(a.footprint(), b.footprint()))
    return max(area, 0.0) * dz


def box_iou_3d(a: OrientedBox3, b: OrientedBox3) -> float:
    inter = box_intersection_volume(a, b)
    if inter <= 0:
        return 0.0
    return float(min(max(inter / (a.volume + b.volume - inter), 0.0), 1.0))


# -- file formats -------------------------------------------------------------


def write_depth_png(path, depth: DepthImage) -> None:
    from PIL import Image

    mm = np.clip(np.round(depth.values * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(str(path))


def read_depth_png(path) -> DepthImage:
    from PIL import Image

    with Image.open(str(path)) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel depth PNG")
    return DepthImage(arr.astype(np.float64) / 1000.0)


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) != 3:
                raise ValueError(f"{path}: only triangular faces are supported")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")
