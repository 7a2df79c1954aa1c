"""Hybrid training scenes: annotated objects swapped for similar models rendered in place."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    CameraIntrinsics,
    DepthImage,
    OrientedBox3,
    PointCloud,
    TriMesh,
    apply_rigid,
    backproject_depth,
    box_mesh,
    cylinder_mesh,
    fit_mesh_to_box,
    invert_rigid,
    read_obj,
    render_mesh_depth,
    write_obj,
)
from .templates import SceneAnnotation

log = logging.getLogger(__name__)

CLEAR_INFLATION = 1.05


@dataclass
class RepoModel:
    category: str
    mesh: TriMesh
    model_id: str


class ModelRepository:
    def __init__(self, entries=()):
        self.entries: list = []
        for e in entries:
            self.add(e)

    def add(self, entry: RepoModel) -> None:
        if any(e.model_id == entry.model_id for e in self.entries):
            raise ValueError(f"duplicate model id {entry.model_id!r}")
        if len(entry.mesh.triangles) == 0:
            raise ValueError(f"model {entry.model_id!r} has no triangles")
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def categories(self) -> list:
        return sorted({e.category for e in self.entries})

    def of_category(self, category: str) -> list:
        return [e for e in self.entries if e.category == category]

    def get(self, model_id: str) -> RepoModel:
        for e in self.entries:
            if e.model_id == model_id:
                return e
        raise KeyError(model_id)

    @classmethod
    def load_dir(cls, root) -> "ModelRepository":
        """Read ``<root>/<category>/<id>.obj`` files."""
        repo = cls()
        for path in sorted(Path(root).glob("*/*.obj")):
            repo.add(RepoModel(path.parent.name, read_obj(path), f"{path.parent.name}/{path.stem}"))
        return repo

    def save_dir(self, root) -> None:
        for e in self.entries:
            name = e.model_id.split("/")[-1]
            d = Path(root) / e.category
            d.mkdir(parents=True, exist_ok=True)
            write_obj(d / f"{name}.obj", e.mesh)


# -- procedural model library -------------------------------------------------
# Models are authored with x = width, y = depth (front is +y), z = up; fitting
# to an annotation box rescales them, so only proportions matter.


def _parts(*boxes) -> TriMesh:
    return TriMesh.concat([box_mesh(lo, hi) for lo, hi in boxes])


def _legs(x0, x1, y0, y1, z1, t=0.06):
    return [((x, y, 0.0), (x + t, y + t, z1)) for x in (x0, x1 - t) for y in (y0, y1 - t)]


def _primitive_models() -> dict:
    m = {}
    m["bed"] = [
        _parts(((-.5, -.45, 0), (.5, .5, .45)), ((-.5, -.5, 0), (.5, -.45, 1.0))),
        _parts(((-.5, -.45, 0), (.5, .46, .45)), ((-.5, -.5, 0), (.5, -.45, 1.0)), ((-.5, .46, 0), (.5, .5, .6))),
        _parts(((-.5, -.45, 0), (.5, .5, .25)), ((-.45, -.42, .25), (.45, .47, .5)), ((-.5, -.5, 0), (.5, -.45, .85))),
    ]
    m["nightstand"] = [
        _parts(((-.5, -.5, 0), (.5, .5, 1.0))),
        _parts(((-.5, -.5, .25), (.5, .5, 1.0)), *_legs(-.5, .5, -.5, .5, .25, .1)),
        _parts(((-.45, -.45, 0), (.45, .45, .9)), ((-.5, -.5, .9), (.5, .5, 1.0))),
    ]
    m["desk"] = [
        _parts(((-.5, -.5, .93), (.5, .5, 1.0)), *_legs(-.5, .5, -.5, .5, .93, .05)),
        _parts(((-.5, -.5, .93), (.5, .5, 1.0)), ((-.5, -.5, 0), (-.46, .5, .93)), ((.46, -.5, 0), (.5, .5, .93))),
        _parts(((-.5, -.5, .93), (.5, .5, 1.0)), ((-.5, -.5, 0), (-.15, .5, .93)), ((.46, -.5, 0), (.5, .5, .93))),
    ]
    m["chair"] = [
        _parts(((-.5, -.5, .45), (.5, .5, .52)), ((-.5, -.5, .52), (.5, -.4, 1.0)), *_legs(-.5, .5, -.5, .5, .45, .1)),
        _parts(((-.5, -.5, .45), (.5, .5, .52)), ((-.5, -.5, .52), (.5, -.4, .85)), *_legs(-.5, .5, -.5, .5, .45, .12)),
        _parts(((-.5, -.5, 0), (.5, .5, .5)), ((-.5, -.5, .5), (.5, -.35, 1.0))),
    ]
    m["cabinet"] = [
        _parts(((-.5, -.5, 0), (.5, .5, 1.0))),
        _parts(((-.47, -.47, 0), (.47, .47, .1)), ((-.5, -.5, .1), (.5, .5, 1.0))),
        _parts(((-.5, -.5, 0), (.5, .5, .5)), ((-.48, -.48, .5), (.48, .48, 1.0))),
    ]
    m["sofa"] = [
        _parts(((-.5, -.5, 0), (.5, .5, .5)), ((-.5, -.5, .5), (.5, -.25, 1.0)),
               ((-.5, -.25, .5), (-.42, .5, .72)), ((.42, -.25, .5), (.5, .5, .72))),
        _parts(((-.5, -.5, 0), (.5, .5, .5)), ((-.5, -.5, .5), (.5, -.2, 1.0))),
        _parts(((-.5, -.5, .1), (.5, .5, .5)), ((-.5, -.5, .5), (.5, -.3, .9)),
               ((-.5, -.3, .5), (-.4, .5, 1.0)), ((.4, -.3, .5), (.5, .5, 1.0)), *_legs(-.5, .5, -.5, .5, .1, .08)),
    ]
    m["coffee_table"] = [
        _parts(((-.5, -.5, .85), (.5, .5, 1.0)), *_legs(-.5, .5, -.5, .5, .85, .08)),
        _parts(((-.5, -.5, .85), (.5, .5, 1.0)), ((-.45, -.45, .2), (.45, .45, .28)), *_legs(-.5, .5, -.5, .5, .85, .08)),
        _parts(((-.5, -.5, 0), (.5, .5, 1.0))),
    ]
    m["armchair"] = [
        _parts(((-.5, -.5, 0), (.5, .5, .5)), ((-.5, -.5, .5), (.5, -.25, 1.0)),
               ((-.5, -.25, .5), (-.35, .5, .75)), ((.35, -.25, .5), (.5, .5, .75))),
        _parts(((-.5, -.5, .15), (.5, .5, .5)), ((-.5, -.5, .5), (.5, -.3, 1.0)), *_legs(-.5, .5, -.5, .5, .15, .1)),
        _parts(((-.5, -.5, 0), (.5, .5, .45)), ((-.5, -.5, .45), (.5, -.3, .9)),
               ((-.5, -.3, .45), (-.3, .5, 1.0)), ((.3, -.3, .45), (.5, .5, 1.0))),
    ]
    m["table"] = [
        _parts(((-.5, -.5, .93), (.5, .5, 1.0)), *_legs(-.5, .5, -.5, .5, .93, .06)),
        _parts(((-.5, -.5, .93), (.5, .5, 1.0)), ((-.08, -.08, .05), (.08, .08, .93)), ((-.3, -.3, 0), (.3, .3, .05))),
        _parts(((-.5, -.5, .93), (.5, .5, 1.0)), ((-.45, -.3, 0), (-.38, .3, .93)), ((.38, -.3, 0), (.45, .3, .93))),
    ]
    m["clutter"] = [
        _parts(((-.5, -.5, 0), (.5, .5, 1.0))),
        cylinder_mesh(0.5, 0.0, 1.0, segments=12),
        _parts(((-.5, -.5, 0), (.5, .5, .6)), ((-.3, -.3, .6), (.3, .3, 1.0))),
    ]
    return m


def build_primitive_repository() -> ModelRepository:
    repo = ModelRepository()
    for cat, meshes in _primitive_models().items():
        for i, mesh in enumerate(meshes):
            repo.add(RepoModel(cat, mesh, f"{cat}/{cat}_{i:02d}"))
    return repo


# -- retrieval ----------------------------------------------------------------


@dataclass(frozen=True)
class SynthesisConfig:
    shortlist_size: int = 2
    multiplier: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.shortlist_size < 1 or self.multiplier < 1:
            raise ValueError("shortlist_size and multiplier must be >= 1")


def partial_view(mesh: TriMesh, box: OrientedBox3, cam: CameraIntrinsics,
                 world_from_camera: np.ndarray | None = None) -> PointCloud:
    """Points of ``mesh`` fitted into ``box`` that the camera actually sees.

    The cloud is expressed in the frame of ``box``.
    """
    if len(mesh.triangles) == 0:
        return PointCloud(np.zeros((0, 3)), "camera" if world_from_camera is None else "gravity")
    T = np.eye(4) if world_from_camera is None else world_from_camera
    fitted = fit_mesh_to_box(mesh, box)
    depth = render_mesh_depth(fitted.transformed(invert_rigid(T)), cam)
    cloud = backproject_depth(depth, cam)
    if world_from_camera is None:
        return cloud
    return PointCloud(apply_rigid(T, cloud.points), "gravity")


def _nn_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """For each src point, the Euclidean distance to its nearest dst point.

    The tree only proposes candidates; distances are recomputed as
    sqrt(dx*dx + dy*dy + dz*dz) so the result does not depend on the tree's
    internal rounding.
    """
    k = min(4, len(dst))
    idx = cKDTree(dst).query(src, k=k)[1].reshape(len(src), k)
    d = src[:, None, :] - dst[idx]
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]).min(axis=1)


def shape_distance(P: PointCloud, V: PointCloud) -> float:
    """Mean nearest-neighbour distance from P to V plus the same from V to P."""
    p = P.points if isinstance(P, PointCloud) else np.asarray(P, float)
    v = V.points if isinstance(V, PointCloud) else np.asarray(V, float)
    if len(p) == 0 or len(v) == 0:
        raise ValueError("shape_distance is undefined for an empty cloud")
    return math.fsum(_nn_distances(p, v)) / len(p) + math.fsum(_nn_distances(v, p)) / len(v)


def object_points(depth: DepthImage, cam: CameraIntrinsics, world_from_camera: np.ndarray,
                  box: OrientedBox3) -> PointCloud:
    cloud = backproject_depth(depth, cam)
    pts = apply_rigid(world_from_camera, cloud.points)
    return PointCloud(pts[box.contains(pts)], "gravity")


def retrieve_models(object_cloud: PointCloud, box: OrientedBox3, cam: CameraIntrinsics, repo: ModelRepository,
                    category: str, n: int, world_from_camera: np.ndarray | None = None,
                    return_distances: bool = False):
    """Models of ``category`` ranked by shape distance between their partial view and the object."""
    scored = []
    for e in repo.of_category(category):
        view = partial_view(e.mesh, box, cam, world_from_camera)
        d = shape_distance(object_cloud, view) if len(view) and len(object_cloud) else math.inf
        scored.append((d, e.model_id))
    scored.sort(key=lambda t: (t[0], t[1]))
    top = scored[:n]
    if return_distances:
        return top
    return [mid for _, mid in top]


def shortlist_scene(depth: DepthImage, annotation: SceneAnnotation, repo: ModelRepository, n: int) -> list:
    """Per annotated object, the ranked shortlist of replacement model ids ([] when none)."""
    cam, T = annotation.camera, annotation.world_from_camera
    cloud = backproject_depth(depth, cam)
    pts = apply_rigid(T, cloud.points)
    lists = []
    for o in annotation.objects:
        if not repo.of_category(o.category):
            lists.append([])
            continue
        obj = PointCloud(pts[o.box.contains(pts)], "gravity")
        lists.append(retrieve_models(obj, o.box, cam, repo, o.category, n, T) if len(obj) else [])
    return lists


def synthesize_scene(depth: DepthImage, annotation: SceneAnnotation, repo: ModelRepository,
                     cfg: SynthesisConfig, rng_seed: int, shortlists: list | None = None) -> DepthImage:
    """Clear each annotated object's pixels and composite a shortlisted model rendered in its box.

    Pixels whose viewing ray misses every (5% inflated) annotated box are returned unchanged.
    """
    rng = np.random.default_rng(rng_seed)
    cam, T = annotation.camera, annotation.world_from_camera
    if shortlists is None:
        shortlists = shortlist_scene(depth, annotation, repo, cfg.shortlist_size)
    cloud, (v, u) = backproject_depth(depth, cam, return_pixels=True)
    pts = apply_rigid(T, cloud.points)
    out = depth.values.copy()
    placed = []
    for o, ids in zip(annotation.objects, shortlists):
        if not repo.of_category(o.category):
            continue
        if not ids:
            log.warning("no replacement model for %s; left as is", o.category)
            continue
        model = repo.get(ids[int(rng.integers(len(ids)))])
        inside = o.box.contains(pts, inflate=CLEAR_INFLATION)
        out[v[inside], u[inside]] = 0.0
        placed.append(fit_mesh_to_box(model.mesh, o.box))
    if placed:
        rendered = render_mesh_depth(TriMesh.concat(placed).transformed(invert_rigid(T)), cam).values
        take = (rendered > 0) & ((out == 0) | (rendered < out))
        out[take] = rendered[take]
    return DepthImage(out)
