"""Command line entry points: gen, train, render, eval, oracle-check."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import evaluation as ev
from .rendering import ALL_PASSES, RenderError, render_frame, save_label_maps
from .scene_io import Dataset, NoiseModel, SceneError, write_manifest, write_synthetic_dataset
from .training import TrainConfig, desk_config, load_model, read_loss_log, train

CONFIG_ENV = "LABELTRANSFER_CONFIG"
log = logging.getLogger("labeltransfer")


def _load_train_config(path: str | None) -> TrainConfig:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return desk_config()
    data = json.loads(Path(path).read_text())
    base = desk_config().to_dict()
    base.update({k: v for k, v in data.items() if k not in ("weights", "field")})
    for key in ("weights", "field"):
        base[key] = {**base[key], **data.get(key, {})}
    return TrainConfig.from_dict(base)


def _frame_list(text: str | None, ds: Dataset) -> list[int]:
    if not text:
        return [f.id for f in ds.scene.left_frames()]
    if text == "all":
        return [f.id for f in ds.scene.frames]
    ids = [int(x) for x in text.split(",") if x.strip()]
    known = {f.id for f in ds.scene.frames}
    missing = sorted(set(ids) - known)
    if missing:
        raise SystemExit(f"unknown frame ids: {missing}")
    return ids


def cmd_gen(args) -> int:
    noise = NoiseModel(args.flip_rate, args.region_blobs, args.boundary_jitter)
    stats = write_synthetic_dataset(args.out, seed=args.seed, frames=args.frames, n_primitives=args.primitives,
                                    width=args.width, height=args.height, noise=noise,
                                    depth_range=args.depth_range, depth_dropout=args.depth_dropout)
    print(f"wrote {args.out}: pseudo-label error rate {stats['pseudo_error_rate']:.4f}, "
          f"ambiguous pixels {stats['ambiguous_pixel_fraction']:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_train_config(args.config)
    overrides = {k: v for k, v in (("iterations", args.iterations), ("seed", args.seed)) if v is not None}
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    ds = Dataset.open(args.dataset)
    model = train(ds, cfg, args.run_dir, resume=args.resume, progress=True)
    print(f"model written to {model}")
    return 0


def cmd_render(args) -> int:
    ds = Dataset.open(args.dataset)
    params, cfg = load_model(args.model)
    passes = tuple(p.strip() for p in args.passes.split(",")) if args.passes else ALL_PASSES
    sf = ds.scene.scene_frame()
    for fid in _frame_list(args.frames, ds):
        table = None
        try:
            table = ds.intervals(fid, compute=not args.no_compute_intervals)
        except FileNotFoundError:
            pass
        maps = render_frame(ds.scene.intrinsics, ds.scene.frame(fid), sf, params, cfg, passes, table=table,
                            compute_intervals=not args.no_compute_intervals)
        save_label_maps(maps, args.out, f"{fid:03d}", ds.scene.classes)
    write_manifest(args.out, {"model": str(args.model), "passes": list(passes), "frames": args.frames or "left"},
                   {"kind": "render"})
    print(f"rendered to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from . import plotting

    ds = Dataset.open(args.dataset)
    if not ds.has_gt():
        print(f"error: {args.dataset} has no ground truth to evaluate against", file=sys.stderr)
        return 2
    params, cfg = load_model(args.model)
    report, renders = ev.evaluate_run(ds, params, cfg, _frame_list(args.frames, ds))
    out = Path(args.out)
    ev.write_report(report, out)
    print(report.table())
    figs = out / "figures"
    figs.mkdir(parents=True, exist_ok=True)
    plotting.plot_class_iou(report.semantic.iou, ds.scene.classes.names, figs / "class_iou.png",
                            report.pseudo.iou if report.pseudo else None)
    for fid in report.frames[:: max(1, len(report.frames) // 4)]:
        r = renders[fid]
        plotting.plot_frame_panel(ds.rgb(fid), r.semantic, ds.gt(fid).semantic, r.depth,
                                  ds.scene.classes.num_classes, figs / f"frame_{fid:03d}.png", f"frame {fid}")
    losses = Path(args.model).parent / "losses.csv"
    if losses.exists():
        plotting.plot_losses(read_loss_log(losses), figs / "losses.png")
    if report.mc is None:
        print("warning: no matched points between consecutive frames; mc reported as absent", file=sys.stderr)
    return 0


def cmd_oracle_check(args) -> int:
    from .oracles import run_oracle_checks

    rows = run_oracle_checks(Dataset.open(args.dataset), args.threshold)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="labeltransfer", description="3D-to-2D panoptic label transfer")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write the synthetic dataset")
    g.add_argument("out")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--frames", type=int, default=24, help="stereo pairs")
    g.add_argument("--primitives", type=int, default=6)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=48)
    g.add_argument("--flip-rate", type=float, default=0.15)
    g.add_argument("--region-blobs", type=float, default=0.0)
    g.add_argument("--boundary-jitter", type=float, default=0.0)
    g.add_argument("--depth-range", type=float, default=15.0)
    g.add_argument("--depth-dropout", type=float, default=0.2)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="optimise the fields on a dataset")
    t.add_argument("dataset")
    t.add_argument("run_dir")
    t.add_argument("--config", help=f"JSON training config (default: ${CONFIG_ENV} or the desk config)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render label maps from a trained model")
    r.add_argument("dataset")
    r.add_argument("model")
    r.add_argument("out")
    r.add_argument("--passes", help=f"comma list from {','.join(ALL_PASSES)}")
    r.add_argument("--frames", help="comma list of frame ids, or 'all' (default: left frames)")
    r.add_argument("--no-compute-intervals", action="store_true", help="fail if an interval cache is missing")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score a model against ground truth; writes CSV, table and figures")
    e.add_argument("dataset")
    e.add_argument("model")
    e.add_argument("out")
    e.add_argument("--frames")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle-check", help="compare fast code paths with their reference oracles on a dataset")
    o.add_argument("dataset")
    o.add_argument("--threshold", type=float, default=0.99, help="minimum opaque-limit agreement")
    o.set_defaults(func=cmd_oracle_check)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SceneError, RenderError, ev.EvaluationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
