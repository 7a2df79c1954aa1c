"""Command-line workflows: gen, synth, learn-templates, train, infer, eval, plot."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("deepcontext")

ENV_DATA = "DEEPCONTEXT_DATA_DIR"


class CommandError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class CommandResult:
    exit_code: int
    reports: list = field(default_factory=list)


def _data_default() -> str:
    return os.environ.get(ENV_DATA, "data")


def _grid(name: str):
    from .tsdf import default_grid, desk_grid

    return default_grid() if name == "paper" else desk_grid()


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CommandError("config", f"cannot read {path}: {e}") from e


def _manifest(data: Path) -> dict:
    p = data / "manifest.json"
    if not p.exists():
        raise CommandError("data", f"no manifest.json under {data}")
    return json.loads(p.read_text())


def _split_entries(manifest: dict, split: str) -> list:
    if split == "all":
        return list(manifest["scenes"])
    if split == "dev":
        return [e for e in manifest["scenes"] if e["split"] in ("train", "val")]
    return [e for e in manifest["scenes"] if e["split"] == split]


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


# -- gen ----------------------------------------------------------------------


def cmd_gen(args) -> CommandResult:
    from .scene_gen import GeneratorConfig, generate_dataset

    cfg = GeneratorConfig.from_dict(_read_json(args.config)) if args.config else GeneratorConfig()
    cfg = GeneratorConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    out = Path(args.out or _data_default())
    manifest = generate_dataset(cfg, args.n, out, jobs=args.jobs)
    print(f"wrote {len(manifest['scenes'])} scenes to {out}")
    if manifest["failures"]:
        for f in manifest["failures"]:
            print(f"error: gen: scene {f['id']}: {f['error']}", file=sys.stderr)
        return CommandResult(1, [str(out / "manifest.json")])
    return CommandResult(0, [str(out / "manifest.json")])


# -- synth --------------------------------------------------------------------


def _synth_one(job):
    from .experiment import quantized
    from .geometry import write_depth_png
    from .hybrid_synth import SynthesisConfig, build_primitive_repository, shortlist_scene, synthesize_scene
    from .scene_gen import load_scene

    data, out, entry, multiplier, shortlist, seed, index = job
    repo = build_primitive_repository()
    depth, ann = load_scene(data, entry)
    lists = shortlist_scene(depth, ann, repo, shortlist)
    cfg = SynthesisConfig(shortlist, multiplier, seed)
    rows = []
    for m in range(multiplier):
        s = int(np.random.SeedSequence([seed, index, m]).generate_state(1)[0])
        img = quantized(synthesize_scene(depth, ann, repo, cfg, s, shortlists=lists))
        rel = f"hybrid/{entry['id']}_{m:02d}_depth.png"
        write_depth_png(Path(out) / rel, img)
        rows.append({"id": f"{entry['id']}_{m:02d}", "source": entry["id"], "depth": rel,
                     "annotation": str(Path(data).resolve() / entry["annotation"]), "split": entry["split"],
                     "scene_type": entry["scene_type"]})
    return rows


def cmd_synth(args) -> CommandResult:
    data = Path(args.data or _data_default())
    out = Path(args.out) if args.out else data
    manifest = _manifest(data)
    entries = _split_entries(manifest, args.split)
    (out / "hybrid").mkdir(parents=True, exist_ok=True)
    jobs = [(str(data), str(out), e, args.multiplier, args.shortlist, args.seed, i) for i, e in enumerate(entries)]
    rows = [r for chunk in _map(_synth_one, jobs, args.jobs) for r in chunk]
    path = out / "hybrid_manifest.json"
    path.write_text(json.dumps({"seed": args.seed, "multiplier": args.multiplier, "scenes": rows}, indent=1))
    print(f"wrote {len(rows)} hybrid images to {out / 'hybrid'}")
    return CommandResult(0, [str(path)])


# -- learn-templates -------------------------------------------------------------


def cmd_learn_templates(args) -> CommandResult:
    from .scene_gen import load_scene
    from .templates import TEMPLATE_NAMES, learn_template, save_templates

    data = Path(args.data or _data_default())
    anns = [load_scene(data, e)[1] for e in _split_entries(_manifest(data), args.split)]
    templates = {}
    for name in TEMPLATE_NAMES:
        group = [a for a in anns if a.scene_type == name]
        if group:
            templates[name] = learn_template(group, seed=args.seed)
    if not templates:
        raise CommandError("learn-templates", "no annotated scenes in the requested split")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_templates(out, templates)
    print(f"learned {len(templates)} templates -> {out}")
    return CommandResult(0, [str(out)])


# -- train ----------------------------------------------------------------------


def _training_scenes(data: Path, split: str, hybrid: Path | None):
    from .geometry import DepthImage, read_depth_png
    from .pipeline import TrainingScene
    from .scene_gen import load_scene
    from .templates import SceneAnnotation

    base = []
    for e in _split_entries(_manifest(data), split):
        d, a = load_scene(data, e)
        base.append(TrainingScene.build(DepthImage(d.values.astype(np.float32)), a))
    hyb = []
    if hybrid is not None:
        m = hybrid / "hybrid_manifest.json"
        if not m.exists():
            raise CommandError("train", f"no hybrid_manifest.json under {hybrid}")
        cache = {}
        for r in json.loads(m.read_text())["scenes"]:
            if split == "dev" and r["split"] not in ("train", "val") or split not in ("dev", "all") and r["split"] != split:
                continue
            ann = cache.setdefault(r["annotation"], SceneAnnotation.load(r["annotation"]))
            d = read_depth_png(hybrid / r["depth"])
            hyb.append(TrainingScene.build(DepthImage(d.values.astype(np.float32)), ann))
    return base, hyb


def cmd_train(args) -> CommandResult:
    from .experiment import desk_train_config
    from .pipeline import STAGES, StageOrderError, TrainConfig, load_stage, save_stage, train_staged
    from .templates import load_templates

    if args.config:
        cfg = TrainConfig.from_dict(_read_json(args.config))
    else:
        cfg = desk_train_config()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.grid:
        over["grid"] = _grid(args.grid).to_dict()
    cfg = TrainConfig.from_dict({**cfg.to_dict(), **over})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    requested = STAGES if args.stage == "all" else (args.stage,)
    weights = {}
    for s in STAGES:
        w = load_stage(out, s)
        if w is not None:
            weights[s] = w
    todo = [s for s in requested if s not in weights or args.stage != "all"]
    try:
        # fail fast on ordering before loading any data
        for s in todo:
            from .pipeline import PREREQUISITES

            for pre in PREREQUISITES[s]:
                if pre not in weights and pre not in todo:
                    raise StageOrderError(f"stage {s!r} needs {pre!r} weights in {out}; run --stage {pre} first")
        if not todo:
            print("all stages already trained")
            return CommandResult(0, [str(out)])
        templates = load_templates(args.templates) if "context" in todo else None
        data = Path(args.data or _data_default())
        base, hyb = _training_scenes(data, args.split, Path(args.hybrid) if args.hybrid else None)
        result = train_staged({"hybrid": hyb, "base": base}, cfg, templates, weights=weights, stages=todo)
    except StageOrderError as e:
        raise CommandError("train", str(e)) from e
    for s in todo:
        save_stage(out, s, result["weights"][s])
    cfg.save(out / "train_config.json")
    digests_path = out / "digests.json"
    old = json.loads(digests_path.read_text()) if digests_path.exists() else {}
    old.update(result["digests"])
    digests_path.write_text(json.dumps(old, indent=1, sort_keys=True))
    print(json.dumps(result["digests"], indent=1, sort_keys=True))
    return CommandResult(0, [str(digests_path)])


# -- infer ----------------------------------------------------------------------


def _pose_for(depth_path: Path, args):
    from .geometry import camera_pose, desk_camera
    from .templates import SceneAnnotation

    ann_path = Path(args.annotation) if getattr(args, "annotation", None) else None
    if ann_path is None:
        guess = depth_path.with_name(depth_path.name.replace("_depth.png", "_ann.json"))
        ann_path = guess if guess.exists() and guess != depth_path else None
    if ann_path is not None:
        ann = SceneAnnotation.load(ann_path)
        return ann.camera, ann.world_from_camera
    return desk_camera(), camera_pose(args.height, math.radians(args.pitch))


def _infer_one(job):
    depth_path, args_d = job
    from .geometry import read_depth_png
    from .pipeline import TrainConfig, load_models, parse_depth_image
    from .templates import load_templates

    args = argparse.Namespace(**args_d)
    templates = load_templates(args.templates)
    models = load_models(args.models, templates)
    cam, pose = _pose_for(Path(depth_path), args)
    parse = parse_depth_image(read_depth_png(depth_path), cam, models, templates, pose)
    return parse.to_dict()


def cmd_infer(args) -> CommandResult:
    from .pipeline import PipelineStageError, StageOrderError

    if bool(args.depth) == bool(args.dir):
        raise CommandError("infer", "give exactly one of --depth or --dir")
    paths = [Path(args.depth)] if args.depth else sorted(Path(args.dir).glob("*_depth.png"))
    if not paths:
        raise CommandError("infer", f"no *_depth.png files under {args.dir}")
    d = {k: v for k, v in vars(args).items() if k != "func"}
    try:
        results = _map(_infer_one, [(str(p), d) for p in paths], args.jobs)
    except (PipelineStageError, StageOrderError, FileNotFoundError) as e:
        stage = getattr(e, "stage", "infer")
        raise CommandError(stage, str(e)) from e
    if args.depth:
        text = json.dumps(results[0], indent=1)
        if args.out:
            Path(args.out).write_text(text)
        print(text)
        return CommandResult(0, [args.out] if args.out else [])
    out = Path(args.out or "parses")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for p, r in zip(paths, results):
        target = out / p.name.replace("_depth.png", "_parse.json")
        target.write_text(json.dumps(r, indent=1))
        written.append(str(target))
    print(f"wrote {len(written)} parses to {out}")
    return CommandResult(0, written)


# -- eval -----------------------------------------------------------------------


def _parse_detections(parse: dict):
    from .evaluation import Detection
    from .geometry import OrientedBox3
    from .templates import LAYOUT_CATEGORIES

    if parse.get("rejected"):
        return [], []
    objs, layout = [], []
    for a in parse["anchors"]:
        if a["flagged"]:
            continue
        box = OrientedBox3.from_dict(a)
        if a["category"] in LAYOUT_CATEGORIES:
            if a["existence"] >= 0.5:
                layout.append((a["category"], box))
        else:
            objs.append(Detection(a["category"], box, a["existence"]))
    return objs, layout


def cmd_eval(args) -> CommandResult:
    from .evaluation import (
        EvalReport,
        evaluate_detection,
        evaluate_layout,
        evaluate_scene_understanding,
        mean_ap,
    )
    from .scene_gen import load_scene
    from .templates import LAYOUT_CATEGORIES

    data = Path(args.data or _data_default())
    entries = _split_entries(_manifest(data), args.split)
    if not entries:
        raise CommandError("eval", f"split {args.split!r} is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.parses:
        parses = {}
        for e in entries:
            p = Path(args.parses) / f"{e['id']}_parse.json"
            if not p.exists():
                raise CommandError("eval", f"missing parse for scene {e['id']}: {p}")
            parses[e["id"]] = json.loads(p.read_text())
        anns = {e["id"]: load_scene(data, e)[1] for e in entries}
        dets, lay, gts, lay_gt = {}, {}, {}, {}
        for sid, parse in parses.items():
            dets[sid], lay[sid] = _parse_detections(parse)
            gts[sid] = [o for o in anns[sid].objects if o.category not in LAYOUT_CATEGORIES]
            lay_gt[sid] = [(o.category, o.box) for o in anns[sid].objects if o.category in LAYOUT_CATEGORIES]
        det = evaluate_detection(dets, gts)
        su = evaluate_scene_understanding({k: [d for d in v if d.score >= 0.5] for k, v in dets.items()}, gts)
        report = EvalReport(detection=det, mean_ap=mean_ap(det), layout=evaluate_layout(lay, lay_gt),
                            scene_understanding=su, extra={"n_test": len(entries)})
    else:
        if not (args.models and args.templates):
            raise CommandError("eval", "give --parses, or --models and --templates")
        from .experiment import evaluate_models
        from .geometry import DepthImage
        from .pipeline import load_models
        from .templates import load_templates

        templates = load_templates(args.templates)
        models = load_models(args.models, templates)
        test = []
        for e in entries:
            d, a = load_scene(data, e)
            test.append((e["id"], DepthImage(d.values.astype(np.float32)), a))
        report = evaluate_models(models, templates, test)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    (out / "pr.csv").write_text(report.pr_csv())
    print(report.to_text())
    return CommandResult(0, [str(out / n) for n in ("report.json", "report.txt", "pr.csv")])


# -- plot -----------------------------------------------------------------------

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
           "#17becf"]


def _color(cat: str, cats: list) -> str:
    return PALETTE[cats.index(cat) % len(PALETTE)]


def topview_svg(pred: list, gt: list, size: int = 480) -> str:
    """Top view of (category, box) lists; ground truth dashed."""
    from .templates import LAYOUT_CATEGORIES

    items = [(c, b, False) for c, b in pred if c not in LAYOUT_CATEGORIES] + \
            [(c, b, True) for c, b in gt if c not in LAYOUT_CATEGORIES]
    cats = sorted({c for c, _, _ in items})
    pts = np.concatenate([b.footprint() for _, b, _ in items]) if items else np.zeros((1, 2))
    lo, hi = pts.min(axis=0) - 0.5, pts.max(axis=0) + 0.5
    scale = size / max(hi - lo)

    def xy(p):
        return (p[0] - lo[0]) * scale, size - (p[1] - lo[1]) * scale

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for c, b, dashed in items:
        poly = " ".join(f"{x:.1f},{y:.1f}" for x, y in (xy(p) for p in b.footprint()))
        dash = ' stroke-dasharray="6,4"' if dashed else ""
        lines.append(f'<polygon points="{poly}" fill="none" stroke="{_color(c, cats)}" stroke-width="2"{dash}>'
                     f"<title>{c}</title></polygon>")
    for i, c in enumerate(cats):
        lines.append(f'<text x="8" y="{16 + 14 * i}" font-size="12" fill="{_color(c, cats)}">{c}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def pr_svg(rows: list, size: int = 360) -> str:
    cats = sorted({r[0] for r in rows})
    m = 30
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>',
             f'<line x1="{m}" y1="{size - m}" x2="{size - m}" y2="{size - m}" stroke="black"/>',
             f'<line x1="{m}" y1="{m}" x2="{m}" y2="{size - m}" stroke="black"/>']
    span = size - 2 * m
    for c in cats:
        pts = [(m + r * span, size - m - p * span) for cat, r, p in rows if cat == c]
        path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
        lines.append(f'<polyline points="{path}" fill="none" stroke="{_color(c, cats)}"><title>{c}</title></polyline>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_plot(args) -> CommandResult:
    from .geometry import OrientedBox3
    from .templates import SceneAnnotation

    if bool(args.parse) == bool(args.pr):
        raise CommandError("plot", "give exactly one of --parse or --pr")
    if args.pr:
        with open(args.pr) as f:
            rows = [(r["category"], float(r["recall"]), float(r["precision"])) for r in csv.DictReader(f)]
        svg = pr_svg(rows)
    else:
        parse = _read_json(args.parse)
        pred = [] if parse.get("rejected") else [(a["category"], OrientedBox3.from_dict(a))
                                                 for a in parse["anchors"] if a["existence"] >= args.min_score]
        gt = [(o.category, o.box) for o in SceneAnnotation.load(args.annotation).objects] if args.annotation else []
        svg = topview_svg(pred, gt)
    Path(args.out).write_text(svg)
    print(f"wrote {args.out}")
    return CommandResult(0, [args.out])


# -- parser ---------------------------------------------------------------------


def _common(p, seed=True, jobs=True, config=True, grid=False):
    if seed:
        p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, help="worker processes; outputs do not depend on it")
    if config:
        p.add_argument("--config", help="JSON file with configuration overrides")
    if grid:
        p.add_argument("--grid", choices=("paper", "desk"), default=None,
                       help="voxel grid: paper (128x128x64 at 5 cm) or desk (32x32x16 at 20 cm)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deepcontext", description="Template-based 3D scene parsing from depth images.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen", help="generate a synthetic annotated dataset")
    p.add_argument("--out", help=f"output directory (default ${ENV_DATA} or ./data)")
    p.add_argument("--n", type=int, default=100, help="number of scenes (default 100)")
    _common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("synth", help="hybrid augmentation: replace annotated objects with repository models")
    p.add_argument("--data", help=f"dataset directory (default ${ENV_DATA} or ./data)")
    p.add_argument("--out", help="output directory (default: the dataset directory)")
    p.add_argument("--split", default="dev", choices=("train", "val", "test", "dev", "all"),
                   help="scenes to augment; dev is train plus val (default dev)")
    p.add_argument("--multiplier", type=int, default=20, help="hybrid images per scene (default 20)")
    p.add_argument("--shortlist", type=int, default=2, help="models kept per object after retrieval (default 2)")
    _common(p, config=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("learn-templates", help="learn the four scene templates from annotations")
    p.add_argument("--data", help=f"dataset directory (default ${ENV_DATA} or ./data)")
    p.add_argument("--split", default="dev", choices=("train", "val", "test", "dev", "all"),
                   help="scenes to learn from (default dev)")
    p.add_argument("--out", default="templates.json", help="output JSON (default templates.json)")
    _common(p, jobs=False, config=False)
    p.set_defaults(func=cmd_learn_templates)

    p = sub.add_parser("train", help="staged training; stages with saved weights are skipped")
    p.add_argument("--data", help=f"dataset directory (default ${ENV_DATA} or ./data)")
    p.add_argument("--hybrid", help="directory holding hybrid_manifest.json (optional)")
    p.add_argument("--templates", default="templates.json", help="templates JSON (needed for the context stage)")
    p.add_argument("--out", default="models", help="weights directory (default models)")
    p.add_argument("--stage", default="all", choices=("all", "classify", "rotation", "translation", "context"),
                   help="run one stage, or all missing stages (default all)")
    p.add_argument("--split", default="dev", choices=("train", "val", "dev", "all"),
                   help="training scenes (default dev)")
    p.add_argument("--seed", type=int, default=None, help="seed for every random choice (default: from config, 0)")
    _common(p, seed=False, jobs=False, grid=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="parse one depth image or a directory of them")
    p.add_argument("--depth", help="16-bit depth PNG in millimetres")
    p.add_argument("--dir", help="directory of *_depth.png files")
    p.add_argument("--models", required=True, help="weights directory written by train")
    p.add_argument("--templates", required=True, help="templates JSON")
    p.add_argument("--annotation", help="annotation JSON supplying intrinsics and camera pose")
    p.add_argument("--height", type=float, default=1.4, help="camera height (m) when no annotation is found")
    p.add_argument("--pitch", type=float, default=-15.0, help="camera pitch (deg) when no annotation is found")
    p.add_argument("--out", help="output JSON file (--depth) or directory (--dir)")
    _common(p, config=False)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate parses or models against ground truth")
    p.add_argument("--data", help=f"dataset directory (default ${ENV_DATA} or ./data)")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "dev", "all"),
                   help="scenes to evaluate (default test)")
    p.add_argument("--parses", help="directory of <id>_parse.json files from infer")
    p.add_argument("--models", help="weights directory (used when --parses is absent)")
    p.add_argument("--templates", help="templates JSON (used when --parses is absent)")
    p.add_argument("--out", default="eval", help="report directory (default eval)")
    _common(p, seed=False, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="SVG of a parse (top view) or of PR curves")
    p.add_argument("--parse", help="parse JSON from infer")
    p.add_argument("--annotation", help="ground-truth annotation drawn dashed")
    p.add_argument("--pr", help="pr.csv from eval")
    p.add_argument("--min-score", type=float, default=0.5, help="existence cutoff for drawn anchors (default 0.5)")
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(func=cmd_plot)
    return ap


def run(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return CommandResult(int(e.code) if e.code is not None else 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CommandError as e:
        print(f"error: [{e.stage}] {e}", file=sys.stderr)
        return CommandResult(1)
    except (OSError, ValueError, KeyError) as e:
        print(f"error: [{args.command}] {e}", file=sys.stderr)
        return CommandResult(1)


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
