"""Command-line entry point.

Subcommands: gen-data, train, render, interpolate, attn-viz, bench, serve.
Every command prints a machine-readable summary (JSON; bench prints CSV) on
stdout.  Exit codes: 0 success, 1 usage error, 2 runtime error.

Options resolve as: command-line flag > config file (--config, JSON keyed by
subcommand) > built-in default.  Unknown config keys are rejected.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np


class UsageError(ValueError):
    pass


# -- option plumbing -----------------------------------------------------------------

COMMAND_DEFAULTS = {
    "gen-data": {"out": "data", "seed": 0, "splats": 500, "size": 64,
                 "frames": 120, "styles": 2},
    "train": {"stage": None, "data": None, "out": "runs", "iterations": None,
              "lr": 5e-3, "seed": 0, "init_from": None, "checkpoint_every": 1000,
              "heldout_every": 10},
    "render": {"checkpoint": None, "manifest": None, "out": "renders",
               "frames": None, "orbit": None, "frame": 0, "emotion": None,
               "style": None},
    "interpolate": {"checkpoint": None, "manifest": None, "out": "interp",
                    "what": "emotion", "pair": None,
                    "alphas": "1,0.75,0.5,0.25,0", "frame": 0},
    "attn-viz": {"checkpoint": None, "manifest": None, "out": "attn",
                 "frame": 0, "layer": "aga", "token": None},
    "bench": {"splats": "1000,4000", "size": 256, "frames": 60, "warmup": 5,
              "seed": 0},
    "serve": {"checkpoint": None, "manifest": None, "port": 8000,
              "host": "127.0.0.1", "idle_timeout": 300.0},
}

STAGE_ITER_DEFAULTS = {"neutral": 3000, "emotion": 3000, "stylization": 2000}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatface", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, **flags):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file keyed by subcommand")
        for flag, (typ, helptext, extra) in flags.items():
            kw = dict(extra or {})
            if typ is not None:
                kw["type"] = typ
            sp.add_argument(f"--{flag}", help=helptext, **kw)
        return sp

    add("gen-data",
        out=(str, "output dataset directory", None),
        seed=(int, "generator seed", None),
        splats=(int, "avatar splat count", None),
        size=(int, "image size (pixels)", None),
        frames=(int, "frames per clip", None),
        styles=(int, "number of styles", None))
    add("train",
        stage=(str, "training stage", {"choices": ["neutral", "emotion",
                                                   "stylization"]}),
        data=(str, "dataset directory from gen-data", None),
        out=(str, "run output directory", None),
        iterations=(int, "optimization iterations", None),
        lr=(float, "Adam learning rate", None),
        seed=(int, "training seed", None),
        **{"init-from": (str, "checkpoint of the previous stage",
                         {"dest": "init_from"}),
           "checkpoint-every": (int, "periodic checkpoint interval",
                                {"dest": "checkpoint_every"}),
           "heldout-every": (int, "hold out every Nth frame",
                             {"dest": "heldout_every"})})
    add("render",
        checkpoint=(str, "trained checkpoint", None),
        manifest=(str, "feature manifest", None),
        out=(str, "output directory", None),
        frames=(str, "frame list 'a,b,c' or range 'a:b' (default all)", None),
        orbit=(int, "render N equal-azimuth views of --frame", None),
        frame=(int, "frame used by --orbit", None),
        emotion=(str, "override emotion label", None),
        style=(str, "style label (stage-3 checkpoints)", None))
    add("interpolate",
        checkpoint=(str, "trained checkpoint", None),
        manifest=(str, "feature manifest", None),
        out=(str, "output directory", None),
        what=(str, "feature to interpolate", {"choices": ["emotion", "style"]}),
        pair=(str, "comma-separated pair of labels", None),
        alphas=(str, "comma-separated weights", None),
        frame=(int, "manifest frame to drive with", None))
    add("attn-viz",
        checkpoint=(str, "trained checkpoint", None),
        manifest=(str, "feature manifest", None),
        out=(str, "output directory", None),
        frame=(int, "manifest frame", None),
        layer=(str, "attention layer", {"choices": ["aga", "ega"]}),
        token=(str, "token label ('audio' sums audio tokens)", None))
    add("bench",
        splats=(str, "comma-separated splat counts", None),
        size=(int, "image size", None),
        frames=(int, "timed frames per configuration", None),
        warmup=(int, "warm-up frames", None),
        seed=(int, "scene seed", None))
    add("serve",
        checkpoint=(str, "default checkpoint for sessions", None),
        manifest=(str, "default manifest for sessions", None),
        port=(int, "listen port", None),
        host=(str, "bind address", None),
        **{"idle-timeout": (float, "session expiry (seconds)",
                            {"dest": "idle_timeout"})})
    return p


def resolve_options(args) -> dict:
    """flag > config file > default, rejecting unknown config keys."""
    command = args.command
    defaults = COMMAND_DEFAULTS[command]
    from_file = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            doc = json.load(f)
        unknown = set(doc) - set(COMMAND_DEFAULTS)
        if unknown:
            raise UsageError(f"config file: unknown sections {sorted(unknown)}")
        section = doc.get(command, {})
        bad = set(section) - set(defaults)
        if bad:
            raise UsageError(
                f"config file, section {command!r}: unknown keys {sorted(bad)}")
        from_file = section
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else from_file.get(key, default)
    return out


def _require(opts, *keys):
    for k in keys:
        if opts[k] is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _emit(summary: dict):
    print(json.dumps(summary, sort_keys=True))


# -- subcommands -----------------------------------------------------------------------

def cmd_gen_data(opts) -> int:
    from .oracle import OracleConfig, generate_dataset

    cfg = OracleConfig(seed=opts["seed"], n_splats=opts["splats"],
                       image_size=opts["size"], frames_per_clip=opts["frames"],
                       n_styles=opts["styles"])
    manifests = generate_dataset(cfg, opts["out"])
    _emit({"command": "gen-data", "out": os.path.abspath(opts["out"]),
           "manifests": {k: os.path.abspath(v) for k, v in manifests.items()},
           "frames_per_clip": cfg.frames_per_clip, "splats": cfg.n_splats})
    return 0


_STAGE_MANIFEST = {"neutral": "manifest_neutral.json",
                   "emotion": "manifest_emotional.json",
                   "stylization": "manifest_stylized.json"}
_STAGE_PREV = {"emotion": "neutral", "stylization": "emotion"}

# checkpoint meta carried from stage to stage
_CARRY_KEYS = ("emotion_vectors", "style_descriptors", "style_labels",
               "landmark_indices", "landmark_weights", "regions", "background")


def cmd_train(opts) -> int:
    from .checkpoint import load_checkpoint, restore_model
    from .features import load_feature_sequence
    from .model import STAGES
    from .training import (StageConfig, bootstrap_model, evaluate, split_frames,
                           train_stage)

    _require(opts, "stage", "data")
    stage = opts["stage"]
    if stage == "neutral":
        if opts["init_from"]:
            raise UsageError("--init-from only applies to later stages")
        model, meta = bootstrap_model(opts["data"])
    else:
        prev_stage = _STAGE_PREV[stage]
        if not opts["init_from"]:
            raise RuntimeError(
                f"stage ordering: train --stage {stage} needs --init-from "
                f"pointing at a stage-{prev_stage} checkpoint")
        prev = load_checkpoint(opts["init_from"])
        if STAGES.index(prev.stage) < STAGES.index(prev_stage):
            raise RuntimeError(
                f"stage ordering: --stage {stage} requires a checkpoint trained "
                f"through {prev_stage!r}, got {prev.stage!r}")
        model = restore_model(prev)
        meta = {k: prev.meta[k] for k in _CARRY_KEYS if k in prev.meta}

    manifest = os.path.join(opts["data"], _STAGE_MANIFEST[stage])
    seq = load_feature_sequence(manifest)
    iterations = (opts["iterations"] if opts["iterations"] is not None
                  else STAGE_ITER_DEFAULTS[stage])
    cfg = StageConfig(stage=stage, iterations=iterations,
                      learning_rate=opts["lr"], seed=opts["seed"],
                      checkpoint_every=opts["checkpoint_every"],
                      heldout_every=opts["heldout_every"])
    os.makedirs(opts["out"], exist_ok=True)
    log_path = os.path.join(opts["out"], f"{stage}_log.csv")
    t0 = time.perf_counter()
    train_stage(model, seq, cfg, meta["landmark_indices"], opts["out"],
                meta=meta, log_path=log_path)
    elapsed = time.perf_counter() - t0

    _, heldout = split_frames(seq, cfg.heldout_every)
    eval_idx = heldout if heldout.size else np.arange(len(seq))
    metrics = evaluate(model, seq, eval_idx, meta["landmark_indices"],
                       background=cfg.background, stage=stage)
    _emit({"command": "train", "stage": stage, "iterations": iterations,
           "checkpoint": os.path.abspath(os.path.join(opts["out"],
                                                      f"{stage}.esgc")),
           "log": os.path.abspath(log_path), "seconds": round(elapsed, 3),
           "heldout_metrics": {k: round(v, 4) for k, v in metrics.items()}})
    return 0


def _parse_frames(spec: str | None, total: int):
    if spec is None:
        return list(range(total))
    if ":" in spec:
        a, b = spec.split(":")
        return list(range(int(a or 0), int(b or total)))
    return [int(v) for v in spec.split(",") if v != ""]


def _orbit_cameras(base, n: int):
    from .camera import orbit_camera
    center = base.center
    radius = float(np.linalg.norm(center))
    elevation = float(np.arcsin(np.clip(center[1] / radius, -1.0, 1.0)))
    return [orbit_camera(2.0 * np.pi * i / n, elevation, radius, (0, 0, 0),
                         base.fx, base.fy, base.cx, base.cy,
                         base.width, base.height) for i in range(n)]


def cmd_render(opts) -> int:
    from .imageio import write_png
    from .inference import InferenceSession
    from .metrics import lmd, psnr, ssim
    from .model import project_landmarks
    from .tensor import Tensor

    _require(opts, "checkpoint", "manifest")
    session = InferenceSession(opts["checkpoint"], opts["manifest"])
    e = None
    if opts["emotion"] is not None:
        session.require_stage("emotion", "emotion override")
        e = session.emotion_vector(opts["emotion"])
    style = None
    if opts["style"] is not None:
        session.require_stage("stylization", "style rendering")
        style = session.style_descriptor(opts["style"])

    out_dir = opts["out"]
    os.makedirs(out_dir, exist_ok=True)
    summary = {"command": "render", "out": os.path.abspath(out_dir)}

    if opts["orbit"]:
        t = opts["frame"]
        cams = _orbit_cameras(session.camera(t), opts["orbit"])
        paths = []
        for i, cam in enumerate(cams):
            out, _ = session.render_frame(t, cam=cam, e=e, style_descriptor=style)
            path = os.path.join(out_dir, f"orbit_{i:03d}.png")
            write_png(path, out.color)
            paths.append(path)
        summary.update({"mode": "orbit", "frame": t, "views": len(paths)})
        _emit(summary)
        return 0

    frames = _parse_frames(opts["frames"], session.frame_count)
    lm_idx = session.meta.get("landmark_indices")
    rows = []
    for t in frames:
        out, res = session.render_frame(t, e=e, style_descriptor=style)
        write_png(os.path.join(out_dir, f"frame_{t:04d}.png"), out.color)
        r = session.seq.records[t]
        target = r.target_image()
        # metrics only make sense against unmodified manifest frames
        if target is not None and e is None and style is None:
            row = {"frame": t, "psnr": psnr(out.color, target),
                   "ssim": ssim(out.color, target)}
            if r.landmarks is not None and lm_idx is not None:
                pred = project_landmarks(Tensor(res.splats.mu.data), lm_idx,
                                         r.cam).data
                row["lmd"] = lmd(pred, r.landmarks[:, :2])
            rows.append(row)

    if rows:
        csv_path = os.path.join(out_dir, "metrics.csv")
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        summary["metrics_csv"] = os.path.abspath(csv_path)
        summary["metrics"] = {
            "PSNR": round(float(np.mean([r["psnr"] for r in rows])), 4),
            "SSIM": round(float(np.mean([r["ssim"] for r in rows])), 4)}
        if "lmd" in rows[0]:
            summary["metrics"]["LMD"] = round(
                float(np.mean([r["lmd"] for r in rows])), 4)
    summary.update({"mode": "frames", "frames": len(frames)})
    _emit(summary)
    return 0


def cmd_interpolate(opts) -> int:
    from .imageio import write_png
    from .inference import InferenceSession

    _require(opts, "checkpoint", "manifest")
    session = InferenceSession(opts["checkpoint"], opts["manifest"])
    what = opts["what"]
    labels = session.emotions if what == "emotion" else session.styles
    session.require_stage("emotion" if what == "emotion" else "stylization",
                          f"{what} interpolation")
    if opts["pair"]:
        a, b = [v.strip() for v in opts["pair"].split(",")]
    else:
        if len(labels) < 2:
            raise RuntimeError(f"need two {what} labels to interpolate, have {labels}")
        a, b = labels[0], labels[1]
    alphas = [float(v) for v in opts["alphas"].split(",")]
    t = opts["frame"]
    os.makedirs(opts["out"], exist_ok=True)

    images, paths = [], []
    for alpha in alphas:
        if what == "emotion":
            out, _ = session.render_frame(
                t, e=session.interpolated_emotion(a, b, alpha))
        else:
            out, _ = session.render_frame(
                t, style_descriptor=session.interpolated_style(a, b, alpha))
        path = os.path.join(opts["out"], f"{what}_{a}_{b}_a{alpha:g}.png")
        write_png(path, out.color)
        images.append(out.color)
        paths.append(os.path.abspath(path))

    ref = images[alphas.index(1.0)] if 1.0 in alphas else images[0]
    dists = [float(np.abs(img - ref).mean()) for img in images]
    _emit({"command": "interpolate", "what": what, "pair": [a, b],
           "alphas": alphas, "frames": paths,
           "mean_abs_distance_from_first_endpoint": [round(d, 6) for d in dists]})
    return 0


def cmd_attn_viz(opts) -> int:
    from .esam import attention_token_weights
    from .imageio import write_png
    from .inference import InferenceSession, render_splats

    _require(opts, "checkpoint", "manifest")
    session = InferenceSession(opts["checkpoint"], opts["manifest"])
    layer = opts["layer"]
    token = opts["token"] or ("audio" if layer == "aga" else "emotion")
    t = opts["frame"]

    out, res = session.render_frame(t, record_attention=True)
    weights = attention_token_weights(res.attention, layer, token)
    peak = float(weights.max())
    norm = weights / peak if peak > 0 else weights
    overlay_out = render_splats(res.splats, session.camera(t),
                                session.background,
                                overlay_values=norm.astype(np.float64))

    os.makedirs(opts["out"], exist_ok=True)
    render_path = os.path.join(opts["out"], f"render_{t:04d}.png")
    overlay_path = os.path.join(opts["out"], f"attn_{layer}_{token}_{t:04d}.png")
    csv_path = os.path.join(opts["out"], f"attn_{layer}_{token}_{t:04d}.csv")
    write_png(render_path, out.color)
    write_png(overlay_path, overlay_out.overlay)
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["splat_index", "weight"])
        for i, v in enumerate(weights):
            w.writerow([i, f"{float(v):.8g}"])

    summary = {"command": "attn-viz", "layer": layer, "token": token, "frame": t,
               "overlay": os.path.abspath(overlay_path),
               "weights_csv": os.path.abspath(csv_path),
               "weight_mean": round(float(weights.mean()), 6),
               "weight_max": round(peak, 6)}
    regions = session.meta.get("regions")
    if regions:
        mouth = np.asarray(regions["mouth"], dtype=int)
        eyes = np.asarray(regions["eyes"], dtype=int)
        rest = np.setdiff1d(np.arange(weights.size),
                            np.concatenate([mouth, eyes]))
        summary["region_means"] = {
            "mouth": round(float(weights[mouth].mean()), 6),
            "eyes": round(float(weights[eyes].mean()), 6),
            "other": round(float(weights[rest].mean()), 6)}
    _emit(summary)
    return 0


def bench_scene(n: int, size: int, seed: int):
    from .camera import CameraModel, look_at
    rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
    mu = rng.uniform(-0.5, 0.5, (n, 3))
    s = rng.uniform(np.log(0.01), np.log(0.05), (n, 3))
    q = rng.normal(0, 1, (n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = rng.normal(0, 0.3, (n, 12))
    alpha_raw = rng.normal(0.0, 1.0, n)
    w = look_at(eye=(0.0, 0.0, 2.2), target=(0.0, 0.0, 0.0))
    cam = CameraModel(w, fx=1.3 * size, fy=1.3 * size, cx=size / 2,
                      cy=size / 2, width=size, height=size)
    return (mu, s, q, sh, alpha_raw), cam


def run_bench(counts, size, frames, warmup, seed):
    from .camera import orbit_camera
    from .rasterizer import rasterize_arrays

    rows = []
    for n in counts:
        arrays, cam = bench_scene(n, size, seed)
        times = []
        for i in range(warmup + frames):
            c = orbit_camera(0.01 * i, 0.0, 2.2, (0, 0, 0), cam.fx, cam.fy,
                             cam.cx, cam.cy, size, size)
            t0 = time.perf_counter()
            rasterize_arrays(*arrays, 1, c, (0.0, 0.0, 0.0))
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
        median_ms = float(np.median(times)) * 1e3
        rows.append({"splats": n, "size": size, "median_ms": median_ms,
                     "fps": 1e3 / median_ms})
    return rows


def cmd_bench(opts) -> int:
    counts = [int(v) for v in str(opts["splats"]).split(",")]
    if opts["frames"] < 50:
        raise UsageError("bench needs --frames >= 50 for a stable median")
    rows = run_bench(counts, opts["size"], opts["frames"], opts["warmup"],
                     opts["seed"])
    w = csv.writer(sys.stdout)
    w.writerow(["splats", "size", "median_ms", "fps"])
    for r in rows:
        w.writerow([r["splats"], r["size"], f"{r['median_ms']:.3f}",
                    f"{r['fps']:.3f}"])
    by_n = {r["splats"]: r["median_ms"] for r in rows}
    for n, ms in by_n.items():
        if 4 * n in by_n and not by_n[4 * n] < 8 * ms:
            raise RuntimeError(
                f"scaling violation: t({4 * n})={by_n[4 * n]:.3f}ms is not "
                f"< 8*t({n})={8 * ms:.3f}ms")
    return 0


def cmd_serve(opts) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(default_checkpoint=opts["checkpoint"],
                     default_manifest=opts["manifest"],
                     idle_timeout=opts["idle_timeout"])
    uvicorn.run(app, host=opts["host"], port=opts["port"], log_level="warning")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "render": cmd_render,
    "interpolate": cmd_interpolate,
    "attn-viz": cmd_attn_viz,
    "bench": cmd_bench,
    "serve": cmd_serve,
}


def apply_thread_cap():
    value = os.environ.get("ESG_THREADS")
    if not value:
        return
    n = int(value)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    apply_thread_cap()
    try:
        opts = resolve_options(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # runtime failures -> exit 2 with a diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
