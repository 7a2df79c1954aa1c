"""Scene templates: anchor sets learned from aligned annotations, and the
conversion of a scene's annotation into per-anchor ground truth."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import CameraIntrinsics, OrientedBox3, yaw_matrix

log = logging.getLogger(__name__)

TEMPLATE_NAMES = ("sleeping_area", "office_area", "lounging_area", "table_chair_set")
MAJOR_CATEGORY = {
    "sleeping_area": "bed",
    "office_area": "desk",
    "lounging_area": "sofa",
    "table_chair_set": "table",
}
# scenes whose layout looks the same after a half turn
SYMMETRIC_TEMPLATES = frozenset({"lounging_area", "table_chair_set"})
LAYOUT_CATEGORIES = ("floor", "ceiling", "wall")
LAYOUT_THICKNESS = 0.1


class AlignmentError(ValueError):
    """The scene has no instance of the template's major category."""


@dataclass
class SceneObject:
    category: str
    box: OrientedBox3


@dataclass
class SceneAnnotation:
    scene_type: str
    objects: list
    camera: CameraIntrinsics
    world_from_camera: np.ndarray

    def to_dict(self) -> dict:
        return {
            "scene_type": self.scene_type,
            "objects": [{"category": o.category, **o.box.to_dict()} for o in self.objects],
            "intrinsics": self.camera.to_dict(),
            "world_from_camera": np.asarray(self.world_from_camera).reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneAnnotation":
        objs = [SceneObject(o["category"], OrientedBox3.from_dict(o)) for o in d["objects"]]
        return cls(d["scene_type"], objs, CameraIntrinsics.from_dict(d["intrinsics"]),
                   np.array(d["world_from_camera"], dtype=np.float64).reshape(4, 4))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SceneAnnotation":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ObjectAnchor:
    id: int
    category: str
    box: OrientedBox3

    @property
    def is_layout(self) -> bool:
        return self.category in LAYOUT_CATEGORIES


@dataclass
class SceneTemplate:
    name: str
    major_category: str
    anchors: list

    @property
    def symmetric(self) -> bool:
        return self.name in SYMMETRIC_TEMPLATES

    def categories(self) -> list:
        return sorted({a.category for a in self.anchors})

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "major_category": self.major_category,
            "anchors": [{"id": a.id, "category": a.category, "center": a.box.center.tolist(),
                         "size": a.box.size.tolist()} for a in self.anchors],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneTemplate":
        anchors = [ObjectAnchor(int(a["id"]), a["category"], OrientedBox3(a["center"], a["size"], 0.0))
                   for a in d["anchors"]]
        return cls(d["name"], d["major_category"], anchors)


def save_templates(path, templates: dict) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in templates.values()], indent=1))


def load_templates(path) -> dict:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return {d["name"]: SceneTemplate.from_dict(d) for d in data}


@dataclass
class TemplateGroundTruth:
    template: str
    align_yaw: float
    align_translation: np.ndarray
    exists: list
    targets: list  # OrientedBox3 in template frame, or None
    matched_object: list = field(default_factory=list)  # annotation index per anchor, or -1
    total_cost: float = 0.0


# -- alignment ----------------------------------------------------------------


def major_object(annotation: SceneAnnotation, major_category: str) -> SceneObject:
    majors = [o for o in annotation.objects if o.category == major_category]
    if not majors:
        raise AlignmentError(f"no {major_category!r} in scene of type {annotation.scene_type!r}")
    # first of the largest on exact volume ties
    return max(majors, key=lambda o: o.box.volume)


def align_to_major(annotation: SceneAnnotation, major_category: str):
    """(yaw, translation) taking the largest major object to the origin with yaw 0."""
    box = major_object(annotation, major_category).box
    yaw = -box.yaw
    translation = -(yaw_matrix(yaw) @ box.center)
    return yaw, translation


def canonical_box(box: OrientedBox3) -> OrientedBox3:
    """Equivalent box description with yaw in [-pi/4, pi/4), swapping x/y extents if needed."""
    yaw = float(np.mod(box.yaw, np.pi))
    size = box.size.copy()
    if np.pi / 4 <= yaw < 3 * np.pi / 4:
        size[[0, 1]] = size[[1, 0]]
        yaw -= np.pi / 2
    elif yaw >= 3 * np.pi / 4:
        yaw -= np.pi
    return OrientedBox3(box.center.copy(), size, yaw)


def signed_yaw(box: OrientedBox3) -> float:
    return box.yaw - 2 * np.pi if box.yaw >= np.pi else box.yaw


def aligned_objects(annotation: SceneAnnotation, yaw: float, translation) -> list:
    return [SceneObject(o.category, canonical_box(o.box.transformed(yaw, translation))) for o in annotation.objects]


# -- clustering ---------------------------------------------------------------


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm from a seeded k-means++ start."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) == 0 or k < 1:
        raise ValueError("kmeans needs points and k >= 1")
    distinct = np.unique(X, axis=0)
    if k >= len(distinct):
        reps = int(np.ceil(k / len(distinct)))
        return np.concatenate([distinct] * reps)[:k]
    rng = np.random.default_rng(seed)
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        centers.append(X[rng.choice(len(X), p=d2 / d2.sum())])
    C = np.array(centers)
    labels = None
    for _ in range(max_iter):
        new = np.argmin(((X[:, None, :] - C[None]) ** 2).sum(-1), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = X[labels == j]
            if len(members):
                C[j] = members.mean(axis=0)
    return C


def _wall_side(box: OrientedBox3) -> tuple:
    axis = 0 if box.size[0] < box.size[1] else 1
    return axis, 1 if box.center[axis] >= 0 else -1


def _layout_anchors(aligned: list) -> list:
    """Mean floor, ceiling and per-side wall slabs, at the fixed layout thickness."""
    out = []
    for cat in ("floor", "ceiling"):
        boxes = [o.box for o in aligned if o.category == cat]
        if boxes:
            center = np.mean([b.center for b in boxes], axis=0)
            size = np.mean([b.size for b in boxes], axis=0)
            size[2] = LAYOUT_THICKNESS
            out.append((cat, OrientedBox3(center, size, 0.0)))
    walls = {}
    for o in aligned:
        if o.category == "wall":
            walls.setdefault(_wall_side(o.box), []).append(o.box)
    for side in sorted(walls):
        boxes = walls[side]
        center = np.mean([b.center for b in boxes], axis=0)
        size = np.mean([b.size for b in boxes], axis=0)
        size[side[0]] = LAYOUT_THICKNESS
        out.append(("wall", OrientedBox3(center, size, 0.0)))
    return out


def learn_template(scenes, k_per_category: dict | None = None, major_category: str | None = None,
                   name: str | None = None, seed: int = 0) -> SceneTemplate:
    scenes = list(scenes)
    if not scenes:
        raise ValueError("learn_template needs at least one scene")
    name = name or scenes[0].scene_type
    if any(s.scene_type != name for s in scenes):
        raise ValueError(f"all scenes must be of type {name!r}")
    major_category = major_category or MAJOR_CATEGORY[name]
    k_per_category = k_per_category or {}
    aligned = []
    for s in scenes:
        yaw, t = align_to_major(s, major_category)
        aligned.extend(aligned_objects(s, yaw, t))
    by_cat, most = {}, {}
    for s in scenes:
        for cat in {o.category for o in s.objects}:
            most[cat] = max(most.get(cat, 0), sum(o.category == cat for o in s.objects))
    for o in aligned:
        if o.category not in LAYOUT_CATEGORIES:
            by_cat.setdefault(o.category, []).append(np.concatenate([o.box.center, o.box.size]))
    anchors = []
    for cat in sorted(by_cat):
        k = 1 if cat == major_category else k_per_category.get(cat, most[cat])
        cents = kmeans(np.array(by_cat[cat]), k, seed=seed)
        for c in sorted(cents.tolist()):
            anchors.append((cat, OrientedBox3(c[:3], c[3:], 0.0)))
    anchors += _layout_anchors(aligned)
    return SceneTemplate(name, major_category, [ObjectAnchor(i, c, b) for i, (c, b) in enumerate(anchors)])


# -- ground truth -------------------------------------------------------------


def match_cost(a: OrientedBox3, b: OrientedBox3) -> float:
    return float(np.linalg.norm(a.center - b.center) + np.linalg.norm(a.size - b.size))


def match_annotation_to_template(annotation: SceneAnnotation, template: SceneTemplate) -> TemplateGroundTruth:
    yaw, t = align_to_major(annotation, template.major_category)
    aligned = aligned_objects(annotation, yaw, t)
    n = len(template.anchors)
    exists, targets, matched = [False] * n, [None] * n, [-1] * n
    total = 0.0
    anchor_cats = set(a.category for a in template.anchors)
    for idx, o in enumerate(aligned):
        if o.category not in anchor_cats:
            log.warning("dropping %s: template %s has no anchor for it", o.category, template.name)
    for cat in sorted(anchor_cats):
        a_idx = [i for i, a in enumerate(template.anchors) if a.category == cat]
        o_idx = [i for i, o in enumerate(aligned) if o.category == cat]
        if not o_idx:
            continue
        cost = np.array([[match_cost(aligned[i].box, template.anchors[j].box) for j in a_idx] for i in o_idx])
        rows, cols = linear_sum_assignment(cost)
        for r, c in zip(rows, cols):
            j = a_idx[c]
            exists[j], targets[j], matched[j] = True, aligned[o_idx[r]].box, o_idx[r]
            total += cost[r, c]
        if len(o_idx) > len(a_idx):
            log.warning("dropping %d unmatched %s object(s)", len(o_idx) - len(a_idx), cat)
    return TemplateGroundTruth(template.name, yaw, np.asarray(t), exists, targets, matched, total)
