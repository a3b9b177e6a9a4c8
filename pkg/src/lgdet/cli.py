"""``lgdet`` command line: gen-data, train, infer, eval, gradcheck, bench, ablate.

Exit codes: 0 success, 2 invalid input or config, 3 gradcheck / oracle failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from threadpoolctl import threadpool_limits

from .config import PRESETS, RunConfig, load_config
from .data import Box3D, PointCloud, Scene, gen_synthetic_scene, height_feature, load_cloud, load_detections, \
    load_scene, save_detections, save_scene
from .metrics import evaluate

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3
MANIFEST = "index.json"


class UsageError(Exception):
    pass


def workers() -> int:
    raw = os.environ.get("POINTDET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"POINTDET_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    if getattr(args, "epochs", None) is not None:
        cfg = RunConfig.model_validate({**cfg.model_dump(), "epochs": args.epochs})
    if any(getattr(args, k, None) is not None for k in ("dpi", "gca", "rpl_blocks")):
        cfg = cfg.with_ablation(args.dpi, args.gca, args.rpl_blocks)
    return cfg


# ---------------------------------------------------------------- data sets

def scene_seed(base: int, i: int) -> int:
    return base * 1_000_003 + i


def _gen_one(job):
    seed, i, scene_cfg, out = job
    scene = gen_synthetic_scene(scene_seed(seed, i), scene_cfg, f"scene_{i:05d}")
    save_scene(scene, Path(out) / f"{scene.scene_id}.json")
    return scene.scene_id


def gen_dataset(out: Path, scenes: int, seed: int, cfg: RunConfig, holdout: int | None = None) -> dict:
    if scenes < 1:
        raise UsageError("--scenes must be positive")
    holdout = round(scenes / 4) if holdout is None else holdout
    if not 0 <= holdout < scenes:
        raise UsageError("--holdout must leave at least one training scene")
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(seed, i, cfg.scenes, str(out)) for i in range(scenes)]
    if workers() > 1:
        with ProcessPoolExecutor(max_workers=workers()) as pool:
            ids = list(pool.map(_gen_one, jobs))
    else:
        ids = [_gen_one(j) for j in jobs]
    manifest = {"seed": seed, "scenes": ids, "train": ids[:scenes - holdout], "holdout": ids[scenes - holdout:],
                "scene_config": cfg.scenes.model_dump(mode="json")}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return manifest


def load_split(data: Path, split: str) -> list[Scene]:
    path = data / MANIFEST
    if not path.exists():
        raise UsageError(f"{data} has no {MANIFEST}; create it with gen-data")
    manifest = json.loads(path.read_text())
    return [load_scene(data / f"{sid}.json") for sid in manifest[split]]


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    m = gen_dataset(Path(args.out), args.scenes, args.seed if args.seed is not None else cfg.seed, cfg, args.holdout)
    print(f"wrote {len(m['scenes'])} scenes ({len(m['train'])} train / {len(m['holdout'])} holdout) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train
    cfg = _config(args)
    data = Path(args.data)
    with threadpool_limits(limits=1):
        result = train(cfg, load_split(data, "train"), load_split(data, "holdout"), args.out,
                       log=None if args.quiet else print)
    if result.holdout is not None:
        print(result.holdout.table())
    return EXIT_OK


def _scene_for_infer(path: Path) -> Scene:
    if path.suffix == ".json":
        return load_scene(path)
    cloud = load_cloud(path)
    if cloud.features is None:
        cloud = PointCloud(cloud.coords, height_feature(cloud.coords))
    return Scene(cloud, [], path.stem).refresh_norm()


def cmd_infer(args) -> int:
    from .train import load_model, predict
    model = load_model(args.ckpt)
    src = Path(args.cloud)
    out = Path(args.out)
    with threadpool_limits(limits=1):
        if src.is_dir():
            scenes = load_split(src, args.split)
            dets = predict(model, scenes)
            out.mkdir(parents=True, exist_ok=True)
            for sid, boxes in dets.items():
                save_detections(boxes, out / f"{sid}.json")
            print(f"wrote detections for {len(dets)} scenes to {out}")
            return EXIT_OK
        scene = _scene_for_infer(src)
        if len(scene.cloud) != model.cfg.num_points:
            raise UsageError(f"cloud has {len(scene.cloud)} points, model expects {model.cfg.num_points}")
        boxes = predict(model, [scene], batch_size=1)[scene.scene_id]
    out.parent.mkdir(parents=True, exist_ok=True)
    save_detections(boxes, out)
    if args.dump_ply:
        write_box_ply(boxes, args.dump_ply)
    print(f"{len(boxes)} detections -> {out}")
    return EXIT_OK


_PALETTE = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240)]
_EDGES = [(0, 1), (1, 3), (3, 2), (2, 0), (4, 5), (5, 7), (7, 6), (6, 4), (0, 4), (1, 5), (2, 6), (3, 7)]


def write_box_ply(boxes: list[Box3D], path: str | Path) -> None:
    """ASCII PLY line set: eight corners and twelve edges per box, colored by class."""
    verts, edges = [], []
    for k, b in enumerate(boxes):
        color = _PALETTE[b.class_id % len(_PALETTE)]
        for c in range(8):
            corner = b.lo + np.array([c >> 2 & 1, c >> 1 & 1, c & 1]) * b.size
            verts.append((*corner, *color))
        edges += [(8 * k + i, 8 * k + j, *color) for i, j in _EDGES]
    lines = ["ply", "format ascii 1.0", f"element vertex {len(verts)}", "property float x", "property float y",
             "property float z", "property uchar red", "property uchar green", "property uchar blue",
             f"element edge {len(edges)}", "property int vertex1", "property int vertex2",
             "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    lines += [f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {bl}" for x, y, z, r, g, bl in verts]
    lines += [" ".join(map(str, e)) for e in edges]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_eval(args) -> int:
    det = Path(args.det)
    gt_dir = Path(args.gt)
    if det.is_dir():
        dets = {p.stem: load_detections(p) for p in sorted(det.glob("*.json"))}
    else:
        dets = {det.stem: load_detections(det)}
    manifest = gt_dir / MANIFEST
    if args.split != "detected" and manifest.exists():
        ids = json.loads(manifest.read_text())[args.split]
    else:
        ids = sorted(dets)
    missing = [sid for sid in dets if not (gt_dir / f"{sid}.json").exists()]
    if missing:
        raise UsageError(f"no ground truth for scenes {missing[:5]}")
    gts = {sid: load_scene(gt_dir / f"{sid}.json").gt_boxes for sid in ids}
    result = evaluate({sid: dets.get(sid, []) for sid in ids}, gts)
    print(f"mAP@0.25 {result.map25:.4f}   mAP@0.5 {result.map50:.4f}   ({len(ids)} scenes)")
    print(result.table())
    out = Path(args.out) if args.out else (det if det.is_dir() else det.parent) / "eval_result.json"
    out.write_text(json.dumps(result.to_dict(), indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run
    results = run(args.module, range(args.instances))
    worst: dict[str, float] = {}
    for r in results:
        worst[r.suite] = max(worst.get(r.suite, 0.0), r.rel_error)
    for suite, err in worst.items():
        print(f"{'PASS' if err < TOLERANCE else 'FAIL'}  {suite:14s} max rel err {err:.2e}")
    bad = [r for r in results if not r.ok]
    for r in bad:
        print(f"  {r.suite} seed {r.seed} {r.tensor}: {r.rel_error:.3e}")
    return EXIT_CHECK if bad else EXIT_OK


def cmd_bench(args) -> int:
    from .bench import OracleMismatch, bench
    try:
        print(bench(args.kernel, args.n, args.trials).line())
    except OracleMismatch as e:
        print(f"oracle check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import format_table, run_ablation
    cfg = _config(args)
    data = Path(args.data)
    with threadpool_limits(limits=1):
        rows = run_ablation(cfg, load_split(data, "train"), load_split(data, "holdout"), range(args.seeds),
                            log=print)
    table = format_table(rows)
    print(table)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_config(p, seed=True):
    p.add_argument("--config", help="JSON run config; merged over the preset")
    p.add_argument("--preset", default="toy", choices=sorted(PRESETS))
    if seed:
        p.add_argument("--seed", type=int)


def _add_ablation(p):
    p.add_argument("--dpi", choices=["on", "off", "self_attention"])
    p.add_argument("--gca", choices=["on", "off"])
    p.add_argument("--rpl-blocks", dest="rpl_blocks", type=int, choices=[0, 1, 2, 3])
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lgdet", description="Point cloud 3D detector: data, training and evaluation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic scenes and a split manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--holdout", type=int, help="scenes held out for evaluation (default: a quarter)")
    _add_config(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated data set")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    _add_config(p)
    _add_ablation(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="detect boxes in a cloud, scene file, or data set directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="holdout", choices=["train", "holdout", "scenes"])
    p.add_argument("--dump-ply", dest="dump_ply")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--det", required=True, help="detections file or directory of <scene_id>.json")
    p.add_argument("--gt", required=True, help="data set directory")
    p.add_argument("--split", default="holdout", choices=["train", "holdout", "scenes", "detected"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", default="all", choices=["all", "encoder", "dpi", "gca", "head"])
    p.add_argument("--instances", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="kernel latency after an oracle check")
    p.add_argument("--kernel", required=True, choices=["fps", "ballquery", "knn"])
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train variants across seeds and tabulate holdout mAP")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--seeds", type=int, default=3)
    _add_config(p, seed=False)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, UsageError, json.JSONDecodeError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
