"""Command-line driver: scene generation, gradient checks, training,
evaluation, gate inspection and report figures.

Every command exits 0 on success and nonzero with a single machine-readable
JSON error line on stderr otherwise. Delimited outputs (.scn/.pred/.csv,
metrics.json) land in --out; `plot` renders PNG figures next to them.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import checks, pipeline, plots, scenesim
from .config import RunConfig
from .metrics import METRIC_KEYS, metrics_document
from .pipeline import Model, evaluate_scenes, gate_bins, train_loop, write_trace


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    return cfg


def _scene_paths(scene_dir: str) -> list:
    paths = sorted(glob.glob(os.path.join(scene_dir, "*.scn")))
    if not paths:
        raise FileNotFoundError(f"no .scn files under {scene_dir}")
    return paths


def cmd_simgen(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    cfg.save(os.path.join(args.out, "config.json"))
    for i in range(args.count):
        scene = scenesim.generate_scene(cfg.sim, seed=cfg.seed + i, scene_id=i)
        scenesim.write_scene(os.path.join(args.out, f"scene_{i:04d}.scn"), scene)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    failures = 0
    for name, report in checks.run_all(seed=args.seed or 0):
        status = "pass" if report.ok else "FAIL"
        print(f"{status} {name} max_rel_err={report.max_rel_error:.3e}")
        if not report.ok:
            failures += 1
            print(report.summary())
    print(f"gradcheck: {failures} failure(s)")
    return 0 if failures == 0 else 1


def cmd_train(args) -> int:
    cfg = _load_config(args)
    paths = _scene_paths(args.scenes)
    os.makedirs(args.out, exist_ok=True)
    cfg.save(os.path.join(args.out, "config.json"))

    def progress(entry):
        if entry["step"] % 25 == 0:
            print(
                f"step {entry['step']:4d} total={entry['total']:9.3f} "
                f"cls={entry['cls']:7.3f} coord={entry['coord']:8.3f} "
                f"traj={entry['trajectory']:8.3f}"
            )

    result = train_loop(cfg, paths, progress=progress, no_lidar=args.no_lidar)
    ckpt = os.path.join(args.out, "checkpoint.npz")
    result.model.save(ckpt)
    write_trace(os.path.join(args.out, "loss_trace.csv"), result.trace)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    model = Model.load(args.checkpoint)
    cfg = model.run_config
    scenes = _scene_paths(args.scenes)
    os.makedirs(args.out, exist_ok=True)
    out = evaluate_scenes(
        model, scenes, no_lidar=args.no_lidar, camera_noise=args.camera_noise
    )
    doc, per_class = metrics_document(
        out.records, cfg.eval.match_threshold, cfg.eval.epa_penalty
    )
    payload = {
        "schema": "metrics/1",
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "checkpoint": os.path.abspath(args.checkpoint),
        "ablation": {"no_lidar": args.no_lidar, "camera_noise": args.camera_noise},
        "metrics": doc,
        "per_class_epa": per_class,
        "mean_gate": out.mean_gate,
        "mean_gate_all_queries": out.mean_gate_all_queries,
        "n_records": len(out.records),
        "n_predictions": len(out.predictions),
    }
    with open(os.path.join(args.out, "metrics.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    scenesim.write_predictions(
        os.path.join(args.out, "predictions.pred"),
        out.predictions,
        meta={"seed": cfg.seed, "config": cfg.to_dict(), "checkpoint": payload["checkpoint"]},
    )
    with open(os.path.join(args.out, "gates.csv"), "w") as f:
        f.write("scene,frame,track,class,score,gate_lidar,lidar_points\n")
        for p in out.predictions:
            f.write(
                f"{p.scene_id},{p.frame},{p.track_id},{p.class_name},"
                f"{p.score:.6f},{p.gate_lidar:.6f},{p.lidar_points}\n"
            )
    for key in METRIC_KEYS:
        print(f"{key}: {doc[key]}")
    return 0


def cmd_gates(args) -> int:
    records, _ = scenesim.read_predictions(args.pred)
    rows = gate_bins(records)
    lines = ["bin,count,mean_gate"]
    for label, count, mean in rows:
        lines.append(f"{label},{count},{'' if mean is None else f'{mean:.6f}'}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gate_bins.csv"), "w") as f:
            f.write(table + "\n")
    return 0


def cmd_plot(args) -> int:
    made = []
    trace_path = os.path.join(args.out, "loss_trace.csv")
    if os.path.exists(trace_path):
        plots.plot_loss_trace(
            pipeline.read_trace(trace_path), os.path.join(args.out, "loss_trace.png")
        )
        made.append("loss_trace.png")
    pred_path = os.path.join(args.out, "predictions.pred")
    if os.path.exists(pred_path):
        records, _ = scenesim.read_predictions(pred_path)
        plots.plot_gate_bins(gate_bins(records), os.path.join(args.out, "gate_bins.png"))
        made.append("gate_bins.png")
        if args.scenes:
            scene_paths = _scene_paths(args.scenes)
            scene = scenesim.read_scene(scene_paths[0])
            preds = [r for r in records if r.scene_id == scene.scene_id]
            plots.plot_scene_bev(
                scene, preds, args.frame, os.path.join(args.out, "scene_bev.png")
            )
            made.append("scene_bev.png")
    if not made:
        raise FileNotFoundError(f"no plottable artifacts under {args.out}")
    print("rendered: " + ", ".join(made))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pnpfusion",
        description="desk-scale camera-LiDAR query fusion: simulate, train, evaluate",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simgen", help="generate synthetic scene files")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simgen)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on scene files")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--no-lidar", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on scene files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-lidar", action="store_true")
    p.add_argument("--camera-noise", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gates", help="bin a prediction file's gate report")
    p.add_argument("--pred", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gates)

    p = sub.add_parser("plot", help="render figures for artifacts in --out")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes")
    p.add_argument("--frame", type=int, default=5)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single machine-readable error line
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
