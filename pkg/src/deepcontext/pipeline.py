"""Template classifier, alignment networks, the two-pathway context network,
target encoders and staged training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .geometry import (
    CameraIntrinsics,
    DepthImage,
    OrientedBox3,
    apply_rigid,
    backproject_depth,
    normalize_yaw,
    rigid,
    yaw_matrix,
)
from .templates import (
    MAJOR_CATEGORY,
    TEMPLATE_NAMES,
    SceneAnnotation,
    SceneTemplate,
    canonical_box,
    major_object,
    match_annotation_to_template,
)
from .tsdf import GridConfig, TsdfVolume, compute_tsdf, desk_grid

log = logging.getLogger(__name__)

N_BINS = 36
BIN_DEG = 10.0
CELL = 0.5
XY_VALUES = np.arange(11) * CELL - 2.5
Z_VALUES = np.arange(6) * CELL - 1.5
N_CELLS = 726
ACCEPT_THRESHOLD = 0.95
STAGES = ("classify", "rotation", "translation", "context")
PREREQUISITES = {"classify": (), "rotation": ("classify",), "translation": ("classify",), "context": ("classify",)}


class StageOrderError(RuntimeError):
    """A training stage was requested before the weights it starts from exist."""


class GridMismatchError(ValueError):
    pass


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


# -- target encoders ----------------------------------------------------------


def yaw_to_bin(yaw: float) -> int:
    deg = math.degrees(float(yaw))
    return int(math.floor(deg / BIN_DEG + 0.5)) % N_BINS


def bin_to_yaw(b: int) -> float:
    return math.radians(BIN_DEG * (int(b) % N_BINS))


def _lattice_index(v: float, lo: float, n: int) -> int:
    return int(min(max(math.floor((v - lo) / CELL + 0.5), 0), n - 1))


def offset_to_cell(offset) -> int:
    x, y, z = (float(v) for v in offset)
    ix, iy, iz = _lattice_index(x, -2.5, 11), _lattice_index(y, -2.5, 11), _lattice_index(z, -1.5, 6)
    return ix * 66 + iy * 6 + iz


def cell_to_offset(index: int) -> np.ndarray:
    if not 0 <= index < N_CELLS:
        raise ValueError(f"cell index {index} outside [0, {N_CELLS})")
    ix, rest = divmod(int(index), 66)
    iy, iz = divmod(rest, 6)
    return np.array([XY_VALUES[ix], XY_VALUES[iy], Z_VALUES[iz]])


@dataclass(frozen=True)
class BoxOffset:
    """Center shift in units of anchor size, and log size ratio."""

    dcenter: tuple
    dlogsize: tuple

    def as_array(self) -> np.ndarray:
        return np.array(list(self.dcenter) + list(self.dlogsize))

    @classmethod
    def from_array(cls, a) -> "BoxOffset":
        a = np.asarray(a, dtype=np.float64)
        return cls(tuple(a[:3]), tuple(a[3:6]))

    @classmethod
    def encode(cls, anchor: OrientedBox3, target: OrientedBox3) -> "BoxOffset":
        return cls(tuple((target.center - anchor.center) / anchor.size), tuple(np.log(target.size / anchor.size)))

    def decode(self, anchor: OrientedBox3) -> OrientedBox3:
        c = anchor.center + np.asarray(self.dcenter) * anchor.size
        return OrientedBox3(c, anchor.size * np.exp(np.asarray(self.dlogsize)), anchor.yaw)


# -- frames -------------------------------------------------------------------


def reference_center(points: np.ndarray) -> np.ndarray:
    if len(points) == 0:
        raise ValueError("empty point cloud")
    return points.mean(axis=0)


def frame_transform(yaw: float, center, shift=(0.0, 0.0, 0.0)) -> np.ndarray:
    """W -> frame map p -> R(yaw)(p - center) + shift."""
    R = yaw_matrix(yaw)
    return rigid(R, -R @ np.asarray(center, float) + np.asarray(shift, float))


def volume_in_frame(depth: DepthImage, cam: CameraIntrinsics, world_from_camera, frame_from_world,
                    grid: GridConfig) -> TsdfVolume:
    return compute_tsdf(depth, cam, frame_from_world @ world_from_camera, grid)


def scene_grid(grid: GridConfig) -> GridConfig:
    """The grid centered on the origin of the frame it is sampled in."""
    return grid.centered((0.0, 0.0, 0.0))


def context_grid(template: SceneTemplate, grid: GridConfig) -> GridConfig:
    """Grid in the template frame, centered over the object anchors with the floor near the bottom."""
    objs = [a.box for a in template.anchors if not a.is_layout] or [a.box for a in template.anchors]
    lo = np.min([b.center - b.size / 2 for b in objs], axis=0)
    hi = np.max([b.center + b.size / 2 for b in objs], axis=0)
    center = (lo + hi) / 2
    center[2] = lo[2] - 2 * grid.voxel_size + grid.extent[2] / 2
    return grid.centered(center)


# -- networks -----------------------------------------------------------------


@dataclass(frozen=True)
class NetConfig:
    channels: tuple = (16, 32, 64)
    feature: int = 512
    roi_out: int = 6
    roi_channels: int = 32
    context_hidden: int = 128

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class TrunkNet(nn.Module):
    """Three conv/pool/relu blocks and two dense layers to a global feature."""

    def __init__(self, grid: GridConfig, net: NetConfig, rng: np.random.Generator):
        super().__init__()
        if any(d % 8 for d in grid.dims):
            raise ValueError("grid dims must be divisible by 8")
        self.grid, self.net = grid, net
        cin = 1
        for i, c in enumerate(net.channels):
            self.add_conv(f"conv{i + 1}", rng, cin, c)
            cin = c
        flat = cin * int(np.prod(grid.dims)) // 512
        self.add_dense("fc1", rng, flat, net.feature)
        self.add_dense("fc2", rng, net.feature, net.feature)

    def check(self, volumes) -> None:
        for v in volumes:
            if v.config.dims != self.grid.dims or not np.isclose(v.config.voxel_size, self.grid.voxel_size):
                raise GridMismatchError(f"volume grid {v.config.dims}@{v.config.voxel_size} does not match "
                                        f"model grid {self.grid.dims}@{self.grid.voxel_size}")

    def trunk(self, x: nn.Tensor):
        """Global feature [N, F] and the block-3 conv map [N, C, X/4, Y/4, Z/4]."""
        h = nn.relu(nn.maxpool3d(self.conv("conv1", x), 2))
        h = nn.relu(nn.maxpool3d(self.conv("conv2", h), 2))
        spatial = nn.relu(self.conv("conv3", h))
        h = nn.maxpool3d(spatial, 2)
        g = nn.relu(self.dense("fc1", nn.flatten(h)))
        g = nn.relu(self.dense("fc2", g))
        return g, spatial


def _batch(volumes) -> nn.Tensor:
    return nn.Tensor(np.stack([v.values for v in volumes])[:, None].astype(np.float32))


class ClassifierNet(TrunkNet):
    def __init__(self, grid, net, rng, n_classes: int = len(TEMPLATE_NAMES)):
        super().__init__(grid, net, rng)
        self.add_dense("head", rng, net.feature, n_classes)

    def logits(self, x: nn.Tensor) -> nn.Tensor:
        return self.dense("head", self.trunk(x)[0])


class AlignmentNet(TrunkNet):
    """Shared trunk with one classification head per template (rotation bins or lattice cells)."""

    def __init__(self, grid, net, rng, n_out: int, n_templates: int = len(TEMPLATE_NAMES)):
        super().__init__(grid, net, rng)
        self.n_out = n_out
        self.add_dense("head", rng, net.feature, n_out * n_templates)

    def logits(self, x: nn.Tensor, template_index) -> nn.Tensor:
        out = self.dense("head", self.trunk(x)[0])
        t = np.atleast_1d(np.asarray(template_index))
        cols = t[:, None] * self.n_out + np.arange(self.n_out)[None]
        return nn.getitem(out, (np.arange(out.shape[0])[:, None], cols))


class ContextNet(TrunkNet):
    """Scene pathway plus an anchor pathway pooling each anchor region of the block-3 map."""

    def __init__(self, grid, net, rng, template: SceneTemplate):
        super().__init__(grid, net, rng)
        self.template = template
        c3 = net.channels[-1]
        # unpadded first conv: 6^3 -> 4^3, pooled to 2^3, then 2^3 -> 1
        self.add_conv("roi_conv1", rng, c3, net.roi_channels, padding=0)
        self.add_conv("roi_conv2", rng, net.roi_channels, net.roi_channels)
        self.add_dense("ctx_fc", rng, net.roi_channels + net.feature, net.context_hidden)
        self.add_grouped_dense("anchor_out", rng, len(template.anchors), net.context_hidden, 8)
        self.rois, self.flags = self._rois()

    def _rois(self):
        cell = self.grid.voxel_size * 4
        fdims = tuple(d // 4 for d in self.grid.dims)
        origin = np.asarray(self.grid.origin)
        rois, flags = [], []
        for a in self.template.anchors:
            lo = (a.box.center - a.box.size / 2 - origin) / cell
            hi = (a.box.center + a.box.size / 2 - origin) / cell
            rois.append((lo, hi))
            flags.append(nn.roi_outside((lo, hi), fdims))
        return rois, np.array(flags)

    def forward(self, x: nn.Tensor) -> nn.Tensor:
        """Per-anchor outputs [N, A, 8]: two existence logits then six box offsets."""
        g, spatial = self.trunk(x)
        N, A = x.shape[0], len(self.rois)
        pooled = nn.stack([nn.roi_maxpool3d(spatial, r, self.net.roi_out) for r in self.rois], axis=1)
        h = nn.reshape(pooled, (N * A,) + pooled.shape[2:])
        h = nn.relu(nn.maxpool3d(self.conv("roi_conv1", h), 2))
        h = nn.relu(nn.maxpool3d(self.conv("roi_conv2", h), 2))
        local = nn.reshape(h, (N, A, -1))
        feat = nn.concat([local, nn.stack([g] * A, axis=1)], axis=-1)
        h = nn.relu(self.dense("ctx_fc", feat))
        p = self.params["anchor_out"]
        return nn.grouped_dense(h, p["weight"], p["bias"])


# -- inference ----------------------------------------------------------------


@dataclass
class Rejection:
    probabilities: list
    reason: str = "low confidence"

    def to_dict(self) -> dict:
        return {"rejected": True, "reason": self.reason, "probabilities": [float(p) for p in self.probabilities]}


@dataclass
class AnchorParse:
    anchor_id: int
    category: str
    existence: float
    box: OrientedBox3  # gravity frame
    flagged: bool = False


@dataclass
class SceneParse:
    template: str
    probabilities: list
    yaw_bin: int
    cell: int
    reference: np.ndarray
    anchors: list

    @property
    def yaw(self) -> float:
        return bin_to_yaw(self.yaw_bin)

    @property
    def offset(self) -> np.ndarray:
        return cell_to_offset(self.cell)

    @property
    def translation(self) -> np.ndarray:
        """Estimated major-object center in the gravity frame."""
        return np.asarray(self.reference) + yaw_matrix(self.yaw) @ self.offset

    def detections(self, min_score: float = 0.0) -> list:
        return [(a.category, a.box, a.existence) for a in self.anchors if not a.flagged and a.existence >= min_score]

    def to_dict(self) -> dict:
        return {
            "rejected": False,
            "template": self.template,
            "probabilities": [float(p) for p in self.probabilities],
            "alignment": {"yaw_bin": self.yaw_bin, "yaw": self.yaw, "cell": self.cell,
                          "offset": self.offset.tolist(), "reference": np.asarray(self.reference).tolist(),
                          "translation": self.translation.tolist()},
            "anchors": [{"id": a.anchor_id, "category": a.category, "existence": float(a.existence),
                         "flagged": bool(a.flagged), **a.box.to_dict()} for a in self.anchors],
        }


@dataclass
class PipelineModels:
    classifier: ClassifierNet
    rotation: AlignmentNet
    translation: AlignmentNet
    context: dict  # template name -> ContextNet
    grid: GridConfig

    def digests(self) -> dict:
        out = {"classify": self.classifier.digest(), "rotation": self.rotation.digest(),
               "translation": self.translation.digest()}
        out.update({f"context/{k}": v.digest() for k, v in sorted(self.context.items())})
        return out


def classify_template(volume: TsdfVolume, model: ClassifierNet):
    """Softmax over the templates and the accepted name, or None when max p <= threshold."""
    model.check([volume])
    p = nn.softmax(model.logits(_batch([volume])).data[0].astype(np.float64))
    best = int(np.argmax(p))
    return p, (TEMPLATE_NAMES[best] if p[best] > ACCEPT_THRESHOLD else None)


def estimate_rotation(volume: TsdfVolume, model: AlignmentNet, template: str) -> int:
    model.check([volume])
    return int(np.argmax(model.logits(_batch([volume]), TEMPLATE_NAMES.index(template)).data[0]))


def estimate_translation(volume: TsdfVolume, model: AlignmentNet, template: str) -> int:
    model.check([volume])
    return int(np.argmax(model.logits(_batch([volume]), TEMPLATE_NAMES.index(template)).data[0]))


def decode_anchor_outputs(out: np.ndarray, model: ContextNet, to_world=None) -> list:
    """Per-anchor existence probability and decoded box; ``to_world`` is (yaw, translation)."""
    res = []
    for a, row, flag in zip(model.template.anchors, out, model.flags):
        p = 0.0 if flag else float(nn.softmax(row[:2].astype(np.float64))[1])
        box = BoxOffset.from_array(row[2:]).decode(a.box)
        if to_world is not None:
            box = box.transformed(*to_world)
        res.append(AnchorParse(a.id, a.category, p, box, bool(flag)))
    return res


def parse_scene(volume: TsdfVolume, template: SceneTemplate, model: ContextNet, to_world=None) -> list:
    """Anchor-wise existence and boxes for a volume already in the template frame."""
    if model.template.name != template.name:
        raise ValueError(f"context model is for {model.template.name!r}, not {template.name!r}")
    model.check([volume])
    out = model.forward(_batch([volume])).data[0]
    return decode_anchor_outputs(out, model, to_world)


def parse_depth_image(depth: DepthImage, cam: CameraIntrinsics, models: PipelineModels, templates: dict,
                      world_from_camera: np.ndarray):
    """Full pipeline on one depth image; returns a SceneParse or a Rejection."""
    stage = "tsdf"
    try:
        pts = apply_rigid(world_from_camera, backproject_depth(depth, cam).points)
        if len(pts) == 0:
            return Rejection([0.25] * 4, "no valid depth")
        c = reference_center(pts)
        grid = models.grid
        vol = volume_in_frame(depth, cam, world_from_camera, frame_transform(0.0, c), grid)
        stage = "classify"
        probs, name = classify_template(vol, models.classifier)
        if name is None:
            return Rejection(probs.tolist())
        stage = "rotation"
        b = estimate_rotation(vol, models.rotation, name)
        yaw = bin_to_yaw(b)
        stage = "translation"
        vol = volume_in_frame(depth, cam, world_from_camera, frame_transform(-yaw, c), grid)
        cell = estimate_translation(vol, models.translation, name)
        off = cell_to_offset(cell)
        stage = "context"
        template = templates[name]
        net = models.context[name]
        vol = volume_in_frame(depth, cam, world_from_camera, frame_transform(-yaw, c, -off), net.grid)
        to_world = (yaw, c + yaw_matrix(yaw) @ off)
        anchors = parse_scene(vol, template, net, to_world)
    except (ValueError, KeyError, GridMismatchError) as e:
        raise PipelineStageError(stage, e) from e
    return SceneParse(name, probs.tolist(), b, cell, c, anchors)


# -- training -----------------------------------------------------------------


@dataclass
class StageSchedule:
    pretrain_steps: int = 100  # optimizer updates on hybrid data
    finetune_steps: int = 50  # optimizer updates on base scenes
    lr: float = 0.01


@dataclass
class TrainConfig:
    stages: tuple = STAGES
    schedules: dict = field(default_factory=lambda: {s: StageSchedule() for s in STAGES})
    micro_batch: int = 24
    accum: int = 4
    optimizer: str = "sgd"  # or "adam"
    lr_schedule: str = "constant"  # or "cosine", restarted each phase
    momentum: float = 0.9
    weight_decay: float = 0.0
    lam: float = 1.0
    seed: int = 0
    grid: GridConfig = field(default_factory=desk_grid)
    net: NetConfig = field(default_factory=NetConfig)
    rot_jitter_deg: float = 10.0
    trans_jitter_frac: float = 1.0 / 6.0
    context_yaw_noise_deg: float = 5.0
    context_trans_noise: float = 0.25

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        d["grid"] = self.grid.to_dict()
        d["net"] = asdict(self.net)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "stages" in d:
            bad = [s for s in d["stages"] if s not in STAGES]
            if bad:
                raise ValueError(f"unknown stages {bad}")
            d["stages"] = tuple(d["stages"])
        if "schedules" in d:
            d["schedules"] = {k: StageSchedule(**v) for k, v in d["schedules"].items()}
        if "grid" in d:
            d["grid"] = GridConfig.from_dict(d["grid"])
        if "net" in d:
            d["net"] = NetConfig.from_dict(d["net"])
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainingScene:
    """One depth image with the labels every stage needs."""

    depth: DepthImage
    annotation: SceneAnnotation
    template_index: int
    center: np.ndarray
    extent: np.ndarray
    major_yaw: float
    major_center: np.ndarray

    @classmethod
    def build(cls, depth: DepthImage, annotation: SceneAnnotation) -> "TrainingScene":
        pts = apply_rigid(annotation.world_from_camera, backproject_depth(depth, annotation.camera).points)
        if len(pts) == 0:
            raise ValueError("scene has no valid depth")
        major = major_object(annotation, MAJOR_CATEGORY[annotation.scene_type]).box
        return cls(depth, annotation, TEMPLATE_NAMES.index(annotation.scene_type), reference_center(pts),
                   pts.max(axis=0) - pts.min(axis=0), float(major.yaw), major.center.copy())


def _jitter(rng, cfg: TrainConfig, scene: TrainingScene):
    dyaw = math.radians(rng.uniform(-cfg.rot_jitter_deg, cfg.rot_jitter_deg))
    shift = rng.uniform(-1, 1, size=3) * scene.extent * cfg.trans_jitter_frac
    return dyaw, shift


def _classify_example(rng, cfg, s: TrainingScene):
    dyaw, shift = _jitter(rng, cfg, s)
    F = frame_transform(dyaw, s.center, shift)
    return compute_tsdf(s.depth, s.annotation.camera, F @ s.annotation.world_from_camera, scene_grid(cfg.grid)), s.template_index


def _rotation_example(rng, cfg, s: TrainingScene):
    dyaw, shift = _jitter(rng, cfg, s)
    F = frame_transform(dyaw, s.center, shift)
    vol = compute_tsdf(s.depth, s.annotation.camera, F @ s.annotation.world_from_camera, scene_grid(cfg.grid))
    return vol, (s.template_index, yaw_to_bin(s.major_yaw + dyaw))


def _translation_example(rng, cfg, s: TrainingScene):
    dyaw, shift = _jitter(rng, cfg, s)
    yaw = -bin_to_yaw(yaw_to_bin(s.major_yaw)) + dyaw
    F = frame_transform(yaw, s.center, shift)
    vol = compute_tsdf(s.depth, s.annotation.camera, F @ s.annotation.world_from_camera, scene_grid(cfg.grid))
    offset = apply_rigid(F, s.major_center[None])[0]
    return vol, (s.template_index, offset_to_cell(offset))


def context_targets(annotation: SceneAnnotation, template: SceneTemplate, frame_from_world: np.ndarray):
    """Existence labels and encoded offsets per anchor for an annotation seen in a given frame."""
    gt = match_annotation_to_template(annotation, template)
    exists = np.array(gt.exists, dtype=np.int64)
    targets = np.zeros((len(template.anchors), 6))
    R = frame_from_world[:3, :3]
    yaw = math.atan2(R[1, 0], R[0, 0])
    for j, (a, idx) in enumerate(zip(template.anchors, gt.matched_object)):
        if idx < 0:
            continue
        box = canonical_box(annotation.objects[idx].box.transformed(yaw, frame_from_world[:3, 3]))
        targets[j] = BoxOffset.encode(a.box, box).as_array()
    return exists, targets


def _context_frame(rng, cfg, s: TrainingScene, template_noise: bool = True):
    yaw = -s.major_yaw
    noise_yaw = math.radians(rng.uniform(-cfg.context_yaw_noise_deg, cfg.context_yaw_noise_deg)) if template_noise else 0.0
    noise_t = rng.uniform(-1, 1, size=3) * cfg.context_trans_noise if template_noise else np.zeros(3)
    # the template frame puts the major object at the origin
    return frame_transform(yaw + noise_yaw, s.major_center, noise_t)


def _context_example(rng, cfg, s: TrainingScene, net: ContextNet):
    F = _context_frame(rng, cfg, s)
    vol = compute_tsdf(s.depth, s.annotation.camera, F @ s.annotation.world_from_camera, net.grid)
    return vol, context_targets(s.annotation, net.template, F)


def context_loss(out: nn.Tensor, exists: np.ndarray, targets: np.ndarray, flags: np.ndarray, lam: float) -> nn.Tensor:
    """Existence cross-entropy plus lam * smooth-L1 on offsets of existing anchors."""
    N, A, _ = out.shape
    logits = nn.reshape(nn.getitem(out, (slice(None), slice(None), slice(0, 2))), (N * A, 2))
    labels = exists.reshape(-1)
    keep = np.tile(~flags, N).astype(np.float64)
    ce = nn.softmax_cross_entropy(logits, labels, weight=keep)
    reg = nn.getitem(out, (slice(None), slice(None), slice(2, 8)))
    w = (exists * (~flags)[None]).astype(np.float64)[..., None] / N
    return nn.add(ce, nn.scale(nn.smooth_l1(reg, targets, weight=np.broadcast_to(w, reg.shape)), lam))


def _run_stage(net, params, examples, loss_fn, sched: StageSchedule, cfg: TrainConfig, rng, label: str):
    """Minibatch SGD with gradient accumulation; returns the final update's mean loss."""
    if cfg.optimizer == "adam":
        opt = nn.Adam(params, lr=sched.lr, weight_decay=cfg.weight_decay)
    else:
        opt = nn.SGD(params, lr=sched.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    history = []
    for phase, pool, steps in (("pretrain", examples[0], sched.pretrain_steps),
                               ("finetune", examples[1], sched.finetune_steps)):
        if steps and not pool:
            log.warning("%s %s: no data, skipped", label, phase)
            continue
        for step in range(steps):
            if cfg.lr_schedule == "cosine":
                opt.lr = sched.lr * 0.5 * (1 + math.cos(math.pi * step / steps))
            total = 0.0
            for _ in range(cfg.accum):
                idx = rng.integers(len(pool), size=cfg.micro_batch)
                loss = loss_fn([pool[i] for i in idx], rng)
                loss.backward()
                total += loss.item()
            opt.step(cfg.accum)
            history.append(total / cfg.accum)
            if step % 25 == 0 or step == steps - 1:
                log.info("%s %s step %d/%d loss %.4f", label, phase, step + 1, steps, history[-1])
    return history


def train_staged(datasets: dict, config: TrainConfig, templates: dict | None = None,
                 weights: dict | None = None, stages=None) -> dict:
    """Run the requested stages in order; ``weights`` holds states from earlier runs.

    ``datasets`` maps "hybrid" and "base" to lists of TrainingScene.
    Returns a dict with per-stage weight states, loss histories and digests.
    """
    stages = tuple(stages or config.stages)
    weights = dict(weights or {})
    hybrid, base = datasets.get("hybrid", []), datasets.get("base", [])
    histories, digests = {}, {}
    for stage in STAGES:
        if stage not in stages:
            continue
        for pre in PREREQUISITES[stage]:
            if pre not in weights and pre not in stages:
                raise StageOrderError(f"stage {stage!r} needs {pre!r} weights; run {pre!r} first")
        rng = np.random.default_rng([config.seed, STAGES.index(stage)])
        sched = config.schedules[stage]
        if stage == "classify":
            net = ClassifierNet(scene_grid(config.grid), config.net, rng)

            def loss_fn(batch, r, net=net):
                ex = [_classify_example(r, config, s) for s in batch]
                return nn.softmax_cross_entropy(net.logits(_batch([e[0] for e in ex])), [e[1] for e in ex])

            histories[stage] = _run_stage(net, net.parameters(), (hybrid, base), loss_fn, sched, config, rng, stage)
            weights[stage] = net.state()
            digests[stage] = net.digest()
        elif stage in ("rotation", "translation"):
            n_out = N_BINS if stage == "rotation" else N_CELLS
            net = AlignmentNet(scene_grid(config.grid), config.net, rng, n_out)
            net.load_state(_trunk_state(weights["classify"]), strict=False)
            make = _rotation_example if stage == "rotation" else _translation_example

            def loss_fn(batch, r, net=net, make=make):
                ex = [make(r, config, s) for s in batch]
                t = np.array([e[1][0] for e in ex])
                return nn.softmax_cross_entropy(net.logits(_batch([e[0] for e in ex]), t), [e[1][1] for e in ex])

            histories[stage] = _run_stage(net, net.parameters(), (hybrid, base), loss_fn, sched, config, rng, stage)
            weights[stage] = net.state()
            digests[stage] = net.digest()
        else:
            if templates is None:
                raise ValueError("context stage needs templates")
            weights[stage] = {}
            histories[stage] = {}
            for name in TEMPLATE_NAMES:
                if name not in templates:
                    continue
                t_rng = np.random.default_rng([config.seed, STAGES.index(stage), TEMPLATE_NAMES.index(name)])
                net = ContextNet(context_grid(templates[name], config.grid), config.net, t_rng, templates[name])
                net.load_state(_trunk_state(weights["classify"]), strict=False)
                pools = tuple([s for s in p if s.annotation.scene_type == name] for p in (hybrid, base))

                def loss_fn(batch, r, net=net):
                    ex = [_context_example(r, config, s, net) for s in batch]
                    out = net.forward(_batch([e[0] for e in ex]))
                    return context_loss(out, np.stack([e[1][0] for e in ex]), np.stack([e[1][1] for e in ex]),
                                        net.flags, config.lam)

                histories[stage][name] = _run_stage(net, net.parameters(), pools, loss_fn, sched, config, t_rng,
                                                    f"context/{name}")
                weights[stage][name] = net.state()
                digests[f"context/{name}"] = net.digest()
    return {"weights": weights, "histories": histories, "digests": digests}


def _trunk_state(state: dict) -> dict:
    return {k: v for k, v in state.items() if k.split(".")[0] in ("conv1", "conv2", "conv3", "fc1", "fc2")}


def build_models(weights: dict, config: TrainConfig, templates: dict) -> PipelineModels:
    """Networks carrying the given weight states (fresh init for anything missing)."""
    rng = np.random.default_rng(config.seed)
    clf = ClassifierNet(scene_grid(config.grid), config.net, rng)
    rot = AlignmentNet(scene_grid(config.grid), config.net, rng, N_BINS)
    tra = AlignmentNet(scene_grid(config.grid), config.net, rng, N_CELLS)
    for net, key in ((clf, "classify"), (rot, "rotation"), (tra, "translation")):
        if key in weights:
            net.load_state(weights[key])
    ctx = {}
    for name, t in templates.items():
        net = ContextNet(context_grid(t, config.grid), config.net, rng, t)
        if name in weights.get("context", {}):
            net.load_state(weights["context"][name])
        ctx[name] = net
    return PipelineModels(clf, rot, tra, ctx, scene_grid(config.grid))


def save_stage(directory, stage: str, state) -> None:
    d = Path(directory) / stage
    if stage == "context":
        for name, s in state.items():
            nn.save_weights(d / name, s)
    else:
        nn.save_weights(d, state)


def load_stage(directory, stage: str):
    d = Path(directory) / stage
    if not d.exists():
        return None
    if stage == "context":
        return {p.name: nn.load_weights(p) for p in sorted(d.iterdir()) if (p / "manifest.json").exists()}
    if not (d / "manifest.json").exists():
        return None
    return nn.load_weights(d)


def load_models(directory, templates: dict, config: TrainConfig | None = None) -> PipelineModels:
    d = Path(directory)
    if config is None:
        config = TrainConfig.load(d / "train_config.json") if (d / "train_config.json").exists() else TrainConfig()
    weights = {}
    for stage in STAGES:
        s = load_stage(d, stage)
        if s is None:
            raise StageOrderError(f"no {stage!r} weights under {d}")
        weights[stage] = s
    return build_models(weights, config, templates)
