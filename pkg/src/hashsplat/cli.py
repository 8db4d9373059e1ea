"""``hashsplat`` command line: train, render, eval, info, make-toy."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import dataio
from .gaussians import Camera
from .metrics import MetricReport, psnr, ssim
from .trainer import NonFiniteLoss, Trainer, TrainConfig, preset

log = logging.getLogger("hashsplat")

RUN_KEYS = ("dataset", "out", "preset", "seed")


class UsageError(Exception):
    pass


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a key: value mapping")
    known = set(RUN_KEYS) | {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise UsageError(f"{path}: unknown keys {unknown}")
    return doc


def build_config(args) -> tuple[TrainConfig, dict]:
    doc = load_config_file(args.config) if args.config else {}
    run = {k: doc.pop(k) for k in RUN_KEYS if k in doc}
    for k in ("dataset", "out", "preset", "seed"):
        v = getattr(args, k, None)
        if v is not None:
            run[k] = v
    if run.get("seed") is not None:
        doc["seed"] = int(run["seed"])
    try:
        cfg = preset(run.get("preset", "full"), **doc)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    return cfg, run


def _frames_or_fail(manifest, split):
    frames = manifest.load_frames(split)
    if not frames:
        raise UsageError(f"manifest has no '{split}' frames")
    return frames


def cmd_train(args) -> int:
    cfg, run = build_config(args)
    if not run.get("dataset"):
        raise UsageError("train needs a dataset manifest (positional or 'dataset' in the config)")
    ds = Path(run["dataset"])
    if not ds.exists():
        raise UsageError(f"dataset path does not exist: {ds}")
    out = Path(run.get("out") or "run")
    out.mkdir(parents=True, exist_ok=True)
    manifest = dataio.load_manifest(ds)
    frames = _frames_or_fail(manifest, "train")
    if tuple(manifest.background) != cfg.background:
        cfg.background = tuple(float(c) for c in manifest.background)
    tr = Trainer.create(cfg, [f.camera for f in frames], manifest.load_points(), manifest.aabb)
    iters = args.iters if args.iters is not None else cfg.total_iters
    t0 = time.time()

    def cb(trainer, res):
        if cfg.checkpoint_interval and trainer.iteration % cfg.checkpoint_interval == 0:
            dataio.save_checkpoint(out / f"ckpt_{trainer.iteration:06d}.dspl", dataio.checkpoint_from_trainer(trainer))
        if trainer.iteration % 100 == 0:
            log.info("iter %d loss %.5f points %d", trainer.iteration, res.record["total"], res.n_points)

    try:
        tr.fit(frames, iters=iters, callback=cb)
    except NonFiniteLoss as e:
        dump = out / "nonfinite_dump.json"
        dump.write_text(json.dumps(tr.history[-5:], indent=1))
        print(f"error: {e} (last records in {dump})", file=sys.stderr)
        return 1
    dataio.save_checkpoint(out / "final.dspl", dataio.checkpoint_from_trainer(tr))
    dataio.save_checkpoint(out / "export.dspl", dataio.checkpoint_from_trainer(tr, dataio.PROFILE_EXPORT))
    dataio.write_loss_csv(out / "loss.csv", tr.history)
    if tr.history:
        from .plotting import plot_losses
        plot_losses(tr.history, out / "loss.png")
    p = float(np.mean([psnr(tr.render(f.camera).rgb, f.image) for f in frames]))
    summary = {"iterations": tr.iteration, "points": len(tr.cloud), "train_psnr": p,
               "seconds": time.time() - t0, "checkpoint": str(out / "final.dspl")}
    _emit(summary, args.json)
    return 0


def _emit(obj: dict, as_json: bool):
    if as_json:
        print(json.dumps(obj, indent=1))
    else:
        for k, v in obj.items():
            print(f"{k}: {v}")


def _load_trainer(path) -> Trainer:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return dataio.trainer_from_checkpoint(dataio.load_checkpoint(path))


def _camera_from_args(args, manifest_frame=None) -> Camera:
    if args.camera:
        spec = json.loads(Path(args.camera).read_text()) if Path(args.camera).exists() else json.loads(args.camera)
        w, h = int(spec.get("width", 64)), int(spec.get("height", 64))
        return Camera.look_at(spec["eye"], spec.get("target", [0, 0, 0]), spec.get("up", [0, 0, 1]),
                              float(spec.get("fov_x", np.deg2rad(45))), w, h)
    if manifest_frame is None:
        raise UsageError("render needs --camera or --manifest with --frame")
    return manifest_frame.camera()


def cmd_render(args) -> int:
    if not 0.0 <= args.t <= 1.0:
        raise UsageError(f"t = {args.t} outside [0, 1]")
    tr = _load_trainer(args.checkpoint)
    frame = None
    if args.manifest:
        m = dataio.load_manifest(args.manifest)
        if not 0 <= args.frame < len(m.frames):
            raise UsageError(f"--frame {args.frame} out of range (manifest has {len(m.frames)} frames)")
        frame = m.frames[args.frame]
    cam = _camera_from_args(args, frame).at_time(args.t)
    out = Path(args.out or "render.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    r = tr.render(cam)
    dataio.write_image(out, r.rgb)
    written = [str(out)]
    if args.depth:
        d = depth_to_image(r.depth, r.alpha)
        dpath = out.with_name(out.stem + "_depth.png")
        dataio.write_image(dpath, d)
        np.save(out.with_name(out.stem + "_depth.npy"), r.depth)
        written += [str(dpath), str(out.with_name(out.stem + "_depth.npy"))]
    _emit({"written": written, "t": args.t}, args.json)
    return 0


def depth_to_image(depth, alpha, eps: float = 1e-3) -> np.ndarray:
    """Expected depth normalized to [0, 1] over covered pixels (near = bright)."""
    cov = alpha > eps
    out = np.zeros_like(depth)
    if cov.any():
        lo, hi = depth[cov].min(), depth[cov].max()
        out[cov] = 1.0 - (depth[cov] - lo) / (hi - lo) if hi > lo else 1.0
    return out


def cmd_eval(args) -> int:
    tr = _load_trainer(args.checkpoint)
    m = dataio.load_manifest(args.manifest)
    split = args.split
    frames = _frames_or_fail(m, split)
    rep = MetricReport()
    for f in frames:
        t0 = time.perf_counter()
        img = tr.render(f.camera).rgb
        dt = time.perf_counter() - t0
        s = ssim(img, f.image) if min(img.shape[:2]) >= 11 else float("nan")
        rep.add(f.name, psnr(img, f.image), s, dt)
    out = Path(args.out or "eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        csv.writer(fh).writerows(rep.rows())
    from .plotting import plot_metrics
    plot_metrics(rep, out.with_suffix(".png"))
    _emit({"frames": len(rep.frames), "psnr": rep.psnr, "ssim": rep.ssim, "fps": rep.fps,
           "lpips": "unavailable", "csv": str(out)}, args.json)
    return 0


def cmd_info(args) -> int:
    if args.points is not None:
        rep = dataio.storage_report(n_points=args.points)
    else:
        if not args.checkpoint:
            raise UsageError("info needs a checkpoint or --points N")
        p = Path(args.checkpoint)
        if not p.exists():
            raise UsageError(f"checkpoint not found: {p}")
        ck = dataio.load_checkpoint(p)
        rep = dataio.storage_report(ck)
    if args.json:
        print(json.dumps(rep.as_dict(), indent=1))
    else:
        print("\n".join(rep.lines()))
    return 0


def cmd_make_toy(args) -> int:
    out = Path(args.out or "toy")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"error: cannot create {out}: {e}", file=sys.stderr)
        return 1
    scene = dataio.make_toy_scene(args.seed if args.seed is not None else 0, args.preset or "default")
    path = dataio.write_toy_scene(scene, out)
    _emit({"manifest": str(path), "train_frames": len(scene.train_images),
           "test_frames": len(scene.test_images)}, args.json)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hashsplat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="optimize a scene from a manifest")
    t.add_argument("dataset", nargs="?")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--preset", choices=("full", "toy"))
    t.add_argument("--out")
    t.add_argument("--json", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a checkpoint at (camera, t)")
    r.add_argument("checkpoint")
    r.add_argument("--t", type=float, default=0.0)
    r.add_argument("--camera", help="JSON string or file: {eye, target, up, fov_x, width, height}")
    r.add_argument("--manifest")
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--depth", action="store_true")
    r.add_argument("--out")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR / SSIM / timing over manifest frames")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--out")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("info", help="storage report")
    i.add_argument("checkpoint", nargs="?")
    i.add_argument("--points", type=int, help="report for a hypothetical point count")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_info)

    m = sub.add_parser("make-toy", help="write the procedural toy dataset")
    m.add_argument("--seed", type=int)
    m.add_argument("--preset", choices=sorted(dataio.TOY_PRESETS))
    m.add_argument("--out")
    m.add_argument("--json", action="store_true")
    m.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (dataio.ManifestError, dataio.CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
