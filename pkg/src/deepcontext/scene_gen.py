"""Procedural annotated depth scenes for the four functional-area templates."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    CameraIntrinsics,
    DepthImage,
    OrientedBox3,
    TriMesh,
    camera_pose,
    desk_camera,
    fit_mesh_to_box,
    invert_rigid,
    render_mesh_depth,
    write_depth_png,
    yaw_matrix,
)
from .hybrid_synth import ModelRepository, build_primitive_repository
from .templates import TEMPLATE_NAMES, SceneAnnotation, SceneObject

log = logging.getLogger(__name__)

WALL_BACKED = ("sleeping_area", "office_area", "lounging_area")


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    template_weights: dict = field(default_factory=lambda: {n: 1.0 for n in TEMPLATE_NAMES})
    room_height: tuple = (2.5, 3.0)
    room_margin: tuple = (0.3, 1.2)
    camera_height: tuple = (1.0, 1.8)
    camera_pitch_deg: tuple = (-30.0, 0.0)
    camera_distance: tuple = (2.2, 3.4)
    # azimuth of the camera around the major object, measured from its front
    wall_view_spread_deg: float = 100.0
    heading_jitter_deg: float = 8.0
    clutter_count: tuple = (0, 3)
    min_major_pixels: int = 150
    min_visible_pixels: int = 25
    max_retries: int = 20
    camera: CameraIntrinsics = field(default_factory=desk_camera)
    seed: int = 0

    def __post_init__(self):
        w = self.template_weights
        if any(v < 0 for v in w.values()) or sum(w.values()) <= 0:
            raise ValueError("template weights must be >= 0 and not all zero")
        for name in ("room_height", "room_margin", "camera_height", "camera_pitch_deg", "camera_distance",
                     "clutter_count"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["camera"] = self.camera.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "camera" in d:
            d["camera"] = CameraIntrinsics.from_dict(d["camera"])
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _u(rng, lo, hi):
    return float(rng.uniform(lo, hi))


def _box(cx, cy, size, yaw=0.0):
    return OrientedBox3((cx, cy, size[2] / 2), size, yaw)


# Each layout returns objects in a room frame where the major object sits at the
# origin facing +y.


def _sleeping(rng):
    W, L, H = _u(rng, 1.4, 1.9), _u(rng, 2.0, 2.2), _u(rng, 0.9, 1.1)
    objs = [("bed", _box(0, 0, (W, L, H)))]
    n = 1 + int(rng.integers(2))
    sides = [-1, 1] if n == 2 else [int(rng.choice([-1, 1]))]
    for s in sides:
        size = (_u(rng, .45, .55), _u(rng, .4, .5), _u(rng, .5, .6))
        x = s * (W / 2 + _u(rng, .03, .12) + size[0] / 2)
        objs.append(("nightstand", _box(x, -L / 2 + size[1] / 2 + _u(rng, 0, .05), size)))
    return objs


def _office(rng):
    W, D, H = _u(rng, 1.2, 1.6), _u(rng, .6, .8), _u(rng, .72, .78)
    objs = [("desk", _box(0, 0, (W, D, H)))]
    size = (_u(rng, .5, .6), _u(rng, .5, .6), _u(rng, .85, 1.0))
    objs.append(("chair", _box(_u(rng, -.15, .15), D / 2 + _u(rng, .2, .4), size, np.pi)))
    if rng.random() < 0.6:
        s = int(rng.choice([-1, 1]))
        size = (_u(rng, .4, .5), _u(rng, .5, .6), _u(rng, .6, .7))
        objs.append(("cabinet", _box(s * (W / 2 + _u(rng, .05, .15) + size[0] / 2), -D / 2 + size[1] / 2, size)))
    return objs


def _lounging(rng):
    W, D, H = _u(rng, 1.8, 2.2), _u(rng, .85, .95), _u(rng, .8, .9)
    objs = [("sofa", _box(0, 0, (W, D, H)))]
    size = (_u(rng, 1.0, 1.2), _u(rng, .5, .6), _u(rng, .4, .45))
    objs.append(("coffee_table", _box(_u(rng, -.1, .1), D / 2 + _u(rng, .4, .55) + size[1] / 2, size)))
    for s in (-1, 1):
        if rng.random() < 0.5:
            a = _u(rng, .75, .9)
            size = (a, a, _u(rng, .8, .9))
            x = s * (W / 2 + _u(rng, .3, .45) + a / 2)
            objs.append(("armchair", _box(x, D / 2 + _u(rng, .35, .6), size, s * np.pi / 2)))
    return objs


def _table_set(rng):
    W, D, H = _u(rng, 1.2, 1.6), _u(rng, .8, .95), _u(rng, .72, .76)
    objs = [("table", _box(0, 0, (W, D, H)))]
    slots = [(sx, sy) for sy in (-1, 1) for sx in (-1, 1)]
    n = 2 + int(rng.integers(3))
    for k in sorted(rng.choice(4, size=n, replace=False)):
        sx, sy = slots[k]
        size = (_u(rng, .45, .55), _u(rng, .45, .55), _u(rng, .85, .95))
        y = sy * (D / 2 + _u(rng, .15, .3))
        objs.append(("chair", _box(sx * W / 4 + _u(rng, -.05, .05), y, size, np.pi if sy > 0 else 0.0)))
    return objs


LAYOUTS = {"sleeping_area": _sleeping, "office_area": _office, "lounging_area": _lounging,
           "table_chair_set": _table_set}


def _footprint_bounds(boxes):
    pts = np.concatenate([b.footprint() for b in boxes])
    return pts.min(axis=0), pts.max(axis=0)


def _quad(a, b, c, d) -> TriMesh:
    return TriMesh(np.array([a, b, c, d], dtype=float), [[0, 1, 2], [0, 2, 3]])


def _room(x0, x1, y0, y1, h):
    T = 0.1
    parts = {
        "floor": (_quad((x0, y0, 0), (x1, y0, 0), (x1, y1, 0), (x0, y1, 0)),
                  OrientedBox3(((x0 + x1) / 2, (y0 + y1) / 2, -T / 2), (x1 - x0, y1 - y0, T))),
        "ceiling": (_quad((x0, y0, h), (x0, y1, h), (x1, y1, h), (x1, y0, h)),
                    OrientedBox3(((x0 + x1) / 2, (y0 + y1) / 2, h + T / 2), (x1 - x0, y1 - y0, T))),
    }
    walls = [
        (_quad((x0, y0, 0), (x0, y0, h), (x1, y0, h), (x1, y0, 0)), OrientedBox3(((x0 + x1) / 2, y0 - T / 2, h / 2), (x1 - x0, T, h))),
        (_quad((x0, y1, 0), (x1, y1, 0), (x1, y1, h), (x0, y1, h)), OrientedBox3(((x0 + x1) / 2, y1 + T / 2, h / 2), (x1 - x0, T, h))),
        (_quad((x0, y0, 0), (x0, y1, 0), (x0, y1, h), (x0, y0, h)), OrientedBox3((x0 - T / 2, (y0 + y1) / 2, h / 2), (T, y1 - y0, h))),
        (_quad((x1, y0, 0), (x1, y0, h), (x1, y1, h), (x1, y1, 0)), OrientedBox3((x1 + T / 2, (y0 + y1) / 2, h / 2), (T, y1 - y0, h))),
    ]
    return parts, walls


def _try_scene(cfg: GeneratorConfig, rng, scene_type: str, repo: ModelRepository):
    objs = LAYOUTS[scene_type](rng)
    # camera around the major object
    if scene_type in WALL_BACKED:
        az = np.deg2rad(_u(rng, -cfg.wall_view_spread_deg, cfg.wall_view_spread_deg))
    else:
        az = _u(rng, -np.pi, np.pi)
    dist = _u(rng, *cfg.camera_distance)
    cam_xy = np.array([-np.sin(az), np.cos(az)]) * dist
    lo, hi = _footprint_bounds([b for _, b in objs])
    lo, hi = np.minimum(lo, cam_xy), np.maximum(hi, cam_xy)
    m = [_u(rng, *cfg.room_margin) for _ in range(4)]
    x0, x1, y1 = lo[0] - m[0], hi[0] + m[1], hi[1] + m[2]
    if scene_type in WALL_BACKED:
        y0 = min(b.center[1] - b.size[1] / 2 for _, b in objs if b.yaw == 0.0) - _u(rng, 0.0, 0.05)
        if cam_xy[1] < y0 + 0.3:
            return None
    else:
        y0 = lo[1] - m[3]
    height = _u(rng, *cfg.room_height)
    # clutter on the floor, clear of furniture and the camera
    clutter = []
    for _ in range(int(rng.integers(cfg.clutter_count[0], cfg.clutter_count[1] + 1))):
        for _attempt in range(10):
            size = (_u(rng, .2, .45), _u(rng, .2, .45), _u(rng, .15, .5))
            c = np.array([_u(rng, x0 + .3, x1 - .3), _u(rng, y0 + .3, y1 - .3)])
            box = _box(c[0], c[1], size, _u(rng, 0, np.pi))
            if np.linalg.norm(c - cam_xy) < 0.8:
                continue
            if any(np.linalg.norm(c - b.center[:2]) < (max(b.size[:2]) + max(size[:2])) / 2 + 0.1
                   for _, b in objs + clutter):
                continue
            clutter.append(("clutter", box))
            break
    # camera frame: look toward the furniture group
    target = np.mean([b.center[:2] for _, b in objs], axis=0)
    view = target - cam_xy
    heading = float(np.arctan2(-view[0], view[1])) + np.deg2rad(rng.normal(0, cfg.heading_jitter_deg))
    pitch = np.deg2rad(_u(rng, *cfg.camera_pitch_deg))
    cam_h = _u(rng, *cfg.camera_height)
    to_world = yaw_matrix(-heading)

    def to_w(box: OrientedBox3) -> OrientedBox3:
        return box.transformed(-heading, -(to_world @ np.array([cam_xy[0], cam_xy[1], 0.0])))

    Twc = camera_pose(cam_h, pitch)
    Tcw = invert_rigid(Twc)
    room_parts, walls = _room(x0, x1, y0, y1, height)
    items = []  # (category, world box or None, mesh in world frame, annotate)
    for cat, b in objs + clutter:
        model = repo.of_category(cat)[int(rng.integers(len(repo.of_category(cat))))]
        wb = to_w(b)
        items.append((cat, wb, fit_mesh_to_box(model.mesh, wb), cat != "clutter"))
    pose_room = np.eye(4)
    pose_room[:3, :3] = to_world
    pose_room[:3, 3] = -(to_world @ np.array([cam_xy[0], cam_xy[1], 0.0]))
    for cat, (mesh, box) in room_parts.items():
        items.append((cat, to_w(box), mesh.transformed(pose_room), True))
    for mesh, box in walls:
        items.append(("wall", to_w(box), mesh.transformed(pose_room), True))
    meshes = [it[2] for it in items]
    owner = np.concatenate([np.full(len(mh.triangles), i) for i, mh in enumerate(meshes)])
    depth, ids = render_mesh_depth(TriMesh.concat(meshes).transformed(Tcw), cfg.camera, return_ids=True)
    counts = np.bincount(owner[ids[ids >= 0]], minlength=len(items))
    if counts[0] < cfg.min_major_pixels:
        return None
    annotated = [SceneObject(cat, box) for i, (cat, box, _, ann) in enumerate(items)
                 if ann and (i == 0 or counts[i] >= cfg.min_visible_pixels)]
    ann = SceneAnnotation(scene_type, annotated, cfg.camera, Twc)
    return depth, ann, meshes


def generate_scene(cfg: GeneratorConfig, seed: int, repo: ModelRepository | None = None,
                   return_meshes: bool = False):
    """One annotated depth scene; identical seeds give identical scenes."""
    repo = repo or _default_repo()
    rng = np.random.default_rng(seed)
    names = sorted(cfg.template_weights)
    w = np.array([cfg.template_weights[n] for n in names], dtype=float)
    scene_type = names[int(rng.choice(len(names), p=w / w.sum()))]
    for _ in range(cfg.max_retries):
        out = _try_scene(cfg, rng, scene_type, repo)
        if out is not None:
            depth, ann, meshes = out
            return (depth, ann, meshes) if return_meshes else (depth, ann)
    raise SceneGenerationError(f"could not place a {scene_type} scene after {cfg.max_retries} tries (seed {seed})")


_REPO = None


def _default_repo() -> ModelRepository:
    global _REPO
    if _REPO is None:
        _REPO = build_primitive_repository()
    return _REPO


def split_assignment(ids, seed: int, fractions=(0.7, 0.1, 0.2)) -> dict:
    """Deterministic train/val/test split: order by a seeded hash, then cut by fraction."""
    ids = list(ids)
    key = {i: hashlib.sha256(f"{seed}:{i}".encode()).hexdigest() for i in ids}
    order = sorted(ids, key=lambda i: key[i])
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    split = {}
    for k, i in enumerate(order):
        split[i] = "train" if k < n_train else "val" if k < n_train + n_val else "test"
    return split


def scene_id(index: int) -> str:
    return f"{index:05d}"


def generate_dataset(cfg: GeneratorConfig, n_scenes: int, out_dir, jobs: int = 1) -> dict:
    """Write ``scenes/<id>_depth.png``, ``scenes/<id>_ann.json`` and ``manifest.json``."""
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    indices = list(range(n_scenes))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_write_one, [cfg] * n_scenes, indices, [str(out)] * n_scenes))
    else:
        results = [_write_one(cfg, i, str(out)) for i in indices]
    ok = [r for r in results if r["ok"]]
    failures = [r for r in results if not r["ok"]]
    split = split_assignment([r["id"] for r in ok], cfg.seed)
    manifest = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "scenes": [{"id": r["id"], "scene_type": r["scene_type"], "split": split[r["id"]],
                    "depth": f"scenes/{r['id']}_depth.png", "annotation": f"scenes/{r['id']}_ann.json"}
                   for r in ok],
        "failures": [{"id": r["id"], "error": r["error"]} for r in failures],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def _write_one(cfg: GeneratorConfig, index: int, out: str) -> dict:
    sid = scene_id(index)
    try:
        depth, ann = generate_scene(cfg, scene_seed(cfg.seed, index))
        write_depth_png(Path(out) / "scenes" / f"{sid}_depth.png", depth)
        ann.save(Path(out) / "scenes" / f"{sid}_ann.json")
    except (SceneGenerationError, OSError) as e:
        log.warning("scene %s failed: %s", sid, e)
        return {"id": sid, "ok": False, "error": str(e)}
    return {"id": sid, "ok": True, "scene_type": ann.scene_type}


def load_scene(root, entry: dict):
    from .geometry import read_depth_png

    root = Path(root)
    return read_depth_png(root / entry["depth"]), SceneAnnotation.load(root / entry["annotation"])
