"""Detection AP, layout error, scene-understanding rates, alignment accuracy and an exhaustive ICP-style baseline."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import OrientedBox3, PointCloud, box_iou_3d, normalize_yaw, yaw_matrix
from .templates import LAYOUT_CATEGORIES

IOU_THRESHOLD = 0.25


@dataclass
class Detection:
    category: str
    box: OrientedBox3
    score: float


def _gt_list(objs) -> list:
    return [(o.category, o.box) if hasattr(o, "category") else (o[0], o[1]) for o in objs]


def _check_ids(dets: dict, gts: dict) -> None:
    unknown = sorted(set(dets) - set(gts))
    if unknown:
        raise ValueError(f"detections for unknown scene ids: {unknown[:5]}")


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the PR curve with the all-points interpolated precision envelope."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate_detection(dets: dict, gts: dict, iou_threshold: float = IOU_THRESHOLD, categories=None) -> dict:
    """Per category: AP and the PR curve from greedy score-ordered matching.

    ``dets`` maps scene id to Detection lists, ``gts`` maps scene id to objects
    (anything with ``category`` and ``box``, or (category, box) pairs).
    Categories without ground truth are left out.
    """
    _check_ids(dets, gts)
    gt = {sid: _gt_list(v) for sid, v in gts.items()}
    cats = sorted({c for v in gt.values() for c, _ in v}) if categories is None else list(categories)
    out = {}
    for cat in cats:
        n_gt = sum(c == cat for v in gt.values() for c, _ in v)
        if n_gt == 0:
            continue
        ranked = [(-d.score, sid, k, d) for sid in sorted(dets) for k, d in enumerate(dets[sid]) if d.category == cat]
        ranked.sort(key=lambda r: r[:3])
        used = {sid: np.zeros(len(v), bool) for sid, v in gt.items()}
        tp = np.zeros(len(ranked))
        for i, (_, sid, _, d) in enumerate(ranked):
            best, best_j = iou_threshold, -1
            for j, (c, b) in enumerate(gt[sid]):
                if c != cat or used[sid][j]:
                    continue
                iou = box_iou_3d(d.box, b)
                if iou >= best:
                    best, best_j = iou, j
            if best_j >= 0:
                used[sid][best_j] = True
                tp[i] = 1
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(ranked) + 1) if len(ranked) else np.zeros(0)
        out[cat] = {"ap": average_precision(recall, precision), "recall": recall.tolist(),
                    "precision": precision.tolist(), "n_gt": n_gt, "n_det": len(ranked)}
    return out


def mean_ap(per_category: dict) -> float:
    return float(np.mean([v["ap"] for v in per_category.values()])) if per_category else 0.0


def _plane(box: OrientedBox3):
    """Unit normal (thin axis) and signed offset of a layout slab's mid-plane."""
    axis = int(np.argmin(box.size))
    n = yaw_matrix(box.yaw)[:, axis]
    return n, float(n @ box.center)


def evaluate_layout(preds: dict, gts: dict) -> dict:
    """Mean and median plane-offset error (m) per layout element.

    ``preds``/``gts`` map scene id to (category, box) pairs. A GT element with
    no predicted counterpart counts as missed; an element absent from GT is skipped.
    Walls pair with the predicted wall of parallel normal and nearest offset.
    """
    errors = {c: [] for c in LAYOUT_CATEGORIES}
    missed = {c: 0 for c in LAYOUT_CATEGORIES}
    for sid, objs in gts.items():
        pred = [(c, b) for c, b in _gt_list(preds.get(sid, [])) if c in LAYOUT_CATEGORIES]
        for cat, box in _gt_list(objs):
            if cat not in LAYOUT_CATEGORIES:
                continue
            n, off = _plane(box)
            cands = []
            for pc, pb in pred:
                if pc != cat:
                    continue
                pn, poff = _plane(pb)
                cos = float(pn @ n)
                if abs(cos) >= math.cos(math.pi / 4):
                    cands.append(abs(math.copysign(1, cos) * poff - off))
            if cands:
                errors[cat].append(min(cands))
            else:
                missed[cat] += 1
    out = {}
    for cat in LAYOUT_CATEGORIES:
        e = errors[cat]
        if e or missed[cat]:
            out[cat] = {"mean": float(np.mean(e)) if e else None, "median": float(np.median(e)) if e else None,
                        "count": len(e), "missed": missed[cat]}
    return out


def evaluate_scene_understanding(dets: dict, gts: dict, iou_threshold: float = IOU_THRESHOLD) -> dict:
    """Pg, Rg, Rr from greedy category-agnostic matching of the given detection sets."""
    _check_ids(dets, gts)
    n_det = n_gt = matched_det = matched_gt = label_ok = 0
    for sid in sorted(gts):
        gt = _gt_list(gts[sid])
        ds = sorted(dets.get(sid, []), key=lambda d: -d.score)
        used = np.zeros(len(gt), bool)
        n_det += len(ds)
        n_gt += len(gt)
        for d in ds:
            best, best_j = iou_threshold, -1
            for j, (_, b) in enumerate(gt):
                if used[j]:
                    continue
                iou = box_iou_3d(d.box, b)
                if iou >= best:
                    best, best_j = iou, j
            if best_j >= 0:
                used[best_j] = True
                matched_det += 1
                matched_gt += 1
                label_ok += d.category == gt[best_j][0]
    return {"Pg": matched_det / n_det if n_det else 0.0,
            "Rg": matched_gt / n_gt if n_gt else 0.0,
            "Rr": label_ok / n_gt if n_gt else 0.0}


def yaw_difference(a: float, b: float) -> float:
    return abs(normalize_yaw(a - b + math.pi) - math.pi)


def evaluate_alignment(preds, gts, symmetric, threshold_deg: float = 10.0) -> dict:
    """Rotation accuracy within ``threshold_deg`` (plain and half-turn tolerant) and translation error.

    ``preds``/``gts`` are sequences of (yaw, translation) pairs.
    """
    preds, gts, symmetric = list(preds), list(gts), list(symmetric)
    if not (len(preds) == len(gts) == len(symmetric)):
        raise ValueError("predictions, ground truth and symmetry flags must pair up")
    thr = math.radians(threshold_deg) + 1e-12
    plain = sym = 0
    terr = []
    for (py, pt), (gy, gt), s in zip(preds, gts, symmetric):
        d = yaw_difference(py, gy)
        ok = d <= thr
        plain += ok
        sym += ok or (s and abs(d - math.pi) <= thr)
        terr.append(float(np.linalg.norm(np.asarray(pt, float) - np.asarray(gt, float))))
    n = len(preds)
    return {"n": n, "rotation_acc": plain / n if n else 0.0, "rotation_acc_sym": sym / n if n else 0.0,
            "translation_mean": float(np.mean(terr)) if terr else 0.0,
            "translation_median": float(np.median(terr)) if terr else 0.0}


def _subsample(points: np.ndarray, max_points: int) -> np.ndarray:
    if len(points) <= max_points:
        return points
    return points[np.linspace(0, len(points) - 1, max_points).astype(np.int64)]


def icp_baseline_align(query: PointCloud, training: list, max_points: int = 256):
    """Exhaustive alignment against every training cloud over rotation bins x translation lattice.

    ``training`` holds (cloud, yaw, translation) triples, the last two mapping that
    cloud into its template frame. Returns the composed (yaw, translation) for the
    query together with the best shape distance.
    """
    from .pipeline import N_BINS, N_CELLS, bin_to_yaw, cell_to_offset

    if not training:
        raise ValueError("icp_baseline_align needs a nonempty training set")
    q = _subsample(np.asarray(query.points if isinstance(query, PointCloud) else query, float), max_points)
    if len(q) == 0:
        raise ValueError("empty query cloud")
    cq = q.mean(axis=0)
    offsets = np.array([cell_to_offset(i) for i in range(N_CELLS)])
    order = np.argsort(np.linalg.norm(offsets, axis=1), kind="stable")
    best = (math.inf, None)
    for j, (cloud, tyaw, tt) in enumerate(training):
        t = _subsample(np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud, float), max_points)
        ct = t.mean(axis=0)
        t_tree = cKDTree(t)
        for b in range(N_BINS):
            yaw = bin_to_yaw(b)
            rq = (q - cq) @ yaw_matrix(yaw).T + ct
            rq_tree = cKDTree(rq)
            for k in order:
                o = offsets[k]
                d = t_tree.query(rq + o, k=1)[0].mean() + rq_tree.query(t - o, k=1)[0].mean()
                if d < best[0]:
                    best = (d, (j, yaw, o, cq, ct))
    d, (j, yaw, o, cq, ct) = best
    _, tyaw, tt = training[j]
    # query -> training frame: p -> R(yaw)(p - cq) + ct + o, then the training cloud's alignment
    R0, Rt = yaw_matrix(yaw), yaw_matrix(tyaw)
    shift = ct + o - R0 @ cq
    return float(normalize_yaw(tyaw + yaw)), Rt @ shift + np.asarray(tt, float), float(d)


# -- reports ------------------------------------------------------------------


@dataclass
class EvalReport:
    detection: dict = field(default_factory=dict)
    mean_ap: float = 0.0
    layout: dict = field(default_factory=dict)
    scene_understanding: dict = field(default_factory=dict)
    alignment: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_rounded(self.to_dict()), indent=1, sort_keys=True)

    def to_text(self) -> str:
        rows = [("metric", "value")]
        for cat, v in sorted(self.detection.items()):
            rows.append((f"AP {cat}", f"{v['ap']:.4f}"))
        rows.append(("mAP", f"{self.mean_ap:.4f}"))
        for cat, v in sorted(self.layout.items()):
            if v["mean"] is not None:
                rows.append((f"layout {cat} mean/median (m)", f"{v['mean']:.3f} / {v['median']:.3f}"))
        for k in ("Pg", "Rg", "Rr"):
            if k in self.scene_understanding:
                rows.append((k, f"{self.scene_understanding[k]:.4f}"))
        for k, v in sorted(self.alignment.items()):
            rows.append((f"alignment {k}", f"{v:.4f}" if isinstance(v, float) else str(v)))
        for k, v in sorted(self.extra.items()):
            rows.append((k, f"{v:.4f}" if isinstance(v, float) else str(v)))
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{a.ljust(w)}  {b}" for a, b in rows) + "\n"

    def pr_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["category", "recall", "precision"])
        for cat, v in sorted(self.detection.items()):
            for r, p in zip(v["recall"], v["precision"]):
                wr.writerow([cat, f"{r:.6f}", f"{p:.6f}"])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _rounded(x):
    # fixed precision keeps the JSON byte-stable across platforms' float printing
    if isinstance(x, float):
        return round(x, 10)
    if isinstance(x, dict):
        return {k: _rounded(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_rounded(v) for v in x]
    return x
