"""Command-line entry point.

Subcommands: gen-synthetic, gen-priors, train, render, evaluate.
Exit codes: 0 success, 1 usage, 2 data/validation error, 3 numerical
abort. Worker threads come from --threads or DEFIELD_THREADS.
"""

import argparse
import json
import os
import sys

import numpy as np

from defield import backend


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _parse_frames(spec: str, n_frames: int):
    """'a..b' (inclusive) or a single index; 'all' covers the clip."""
    if spec == "all":
        return list(range(1, n_frames + 1))
    if ".." in spec:
        a, b = spec.split("..", 1)
        lo, hi = int(a), int(b)
    else:
        lo = hi = int(spec)
    if lo < 1 or hi < lo:
        raise ValueError(f"bad frame range {spec!r}")
    return list(range(lo, hi + 1))


def cmd_gen_synthetic(args) -> int:
    from defield.synthscene import SCENES, emit_dataset, make_arc_rig

    if args.scene not in SCENES:
        raise ValueError(
            f"unknown scene {args.scene!r}; available: {sorted(SCENES)}"
        )
    scene = SCENES[args.scene](n_frames=args.frames)
    cams = make_arc_rig(n_cameras=args.cameras, image_size=args.size)
    emit_dataset(
        scene, cams, args.out,
        render_samples=args.render_samples,
        prior_offset=args.offset, n_sparse=args.n_sparse,
        dense_stride=args.dense_stride, seed=args.seed,
    )
    print(f"dataset written to {args.out}")
    return 0


def cmd_gen_priors(args) -> int:
    from defield import priors as priors_mod
    from defield.geometry import load_rig
    from defield.renderer import load_depth_f32
    from defield.synthscene import SyntheticScene

    scene_path = os.path.join(args.data, "scene.json")
    with open(scene_path, "r", encoding="utf-8") as f:
        scene = SyntheticScene.from_json(json.load(f))
    cams = load_rig(os.path.join(args.data, "rig.json"))
    depth_maps = {}
    for cam in cams:
        for t in range(1, scene.n_frames + 1):
            base = os.path.join(
                args.data, "depth_gt", f"cam_{cam.index}", f"frame_{t}"
            )
            if os.path.exists(base + ".f32") and \
                    os.path.exists(base + "_acc.f32"):
                depth_maps[(cam.index, t)] = (
                    load_depth_f32(base + ".f32"),
                    load_depth_f32(base + "_acc.f32"),
                )
    sparse, dense = priors_mod.synth_priors(
        scene, cams, offset=args.offset, n_sparse=args.n_sparse,
        dense_stride=args.dense_stride, noise_rate=args.noise,
        noise_px=args.noise_px, seed=args.seed,
        depth_maps=depth_maps or None,
    )
    out = args.out or args.data
    os.makedirs(out, exist_ok=True)
    priors_mod.save_flow_priors(os.path.join(out, "priors_sparse.csv"), sparse)
    priors_mod.save_flow_priors(os.path.join(out, "priors_dense.csv"), dense)
    depth_recs = priors_mod.synth_depth_priors(
        scene, cams, n_points=args.n_sparse, seed=args.seed
    )
    priors_mod.save_depth_priors(
        os.path.join(out, "priors_depth.csv"), depth_recs
    )
    print(f"priors written to {out} "
          f"({len(sparse)} sparse, {len(dense)} dense rows)")
    return 0


def cmd_train(args) -> int:
    from defield.dataset import VideoDataset
    from defield.trainer import TrainConfig, train_loop

    cfg_dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            cfg_dict = json.load(f)
    config = TrainConfig.from_json(cfg_dict)
    if args.iters is not None:
        config.iterations = args.iters
    if args.seed is not None:
        config.seed = args.seed
    if args.batch_rays is not None:
        config.batch_rays = args.batch_rays
    if args.train_cameras:
        config.train_cameras = [
            int(x) for x in args.train_cameras.split(",") if x
        ]
    if args.no_sf:
        config.lambda_sf = 0.0
    if args.no_df:
        config.lambda_df = 0.0
    if args.sd:
        config.lambda_sd = 1.0

    dataset = VideoDataset(args.data)
    last = [0]

    def progress(done, breakdown):
        last[0] = done
        print(f"iter {done}: L_total {breakdown.total:.5f} "
              f"(ph {breakdown.photometric:.5f} sf {breakdown.sparse_flow:.5f} "
              f"df {breakdown.dense_flow:.5f} sd {breakdown.sparse_depth:.5f})",
              flush=True)

    train_loop(dataset, config, out_dir=args.out, progress=progress)
    print(f"run complete; outputs in {args.out}")
    return 0


def cmd_render(args) -> int:
    from defield.geometry import load_rig
    from defield.renderer import (
        RenderOptions, render_image, save_color_png, save_depth_f32,
    )
    from defield.trainer import checkpoint_load

    state = checkpoint_load(args.ckpt)
    cams = load_rig(args.camera)
    frames = _parse_frames(args.frames, state.config.model.n_frames)
    opts = RenderOptions(n_samples=args.samples, mode="uniform", seed=0)
    for cam in cams:
        cam_dir = os.path.join(args.out, f"cam_{cam.index}")
        depth_dir = os.path.join(args.out, "depth", f"cam_{cam.index}")
        os.makedirs(cam_dir, exist_ok=True)
        os.makedirs(depth_dir, exist_ok=True)
        for t in frames:
            rgb, depth, _ = render_image(cam, t, state.fields, opts)
            save_color_png(os.path.join(cam_dir, f"frame_{t}.png"), rgb)
            save_depth_f32(os.path.join(depth_dir, f"frame_{t}.f32"), depth)
    print(f"renders written to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from defield.metrics import evaluate_render_dir, write_report

    report = evaluate_render_dir(args.pred, args.gt)
    csv_path = os.path.splitext(args.out)[0] + "_frames.csv"
    write_report(report, args.out, csv_path)
    print(f"psnr {report.psnr:.3f} ssim {report.ssim:.4f} "
          f"depth_mae {report.depth_mae:.4f} -> {args.out}")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="defield", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: DEFIELD_THREADS or cores)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="emit a synthetic dataset")
    g.add_argument("--scene", default="blob-orbit")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=60)
    g.add_argument("--cameras", type=int, default=3)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--render-samples", type=int, default=256)
    g.add_argument("--offset", type=int, default=10)
    g.add_argument("--n-sparse", type=int, default=24)
    g.add_argument("--dense-stride", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_synthetic)

    g = sub.add_parser("gen-priors", help="regenerate priors for a dataset")
    g.add_argument("--data", required=True)
    g.add_argument("--out", default=None,
                   help="output dir (default: the dataset dir)")
    g.add_argument("--noise", type=float, default=0.0,
                   help="outlier injection rate in [0,1]")
    g.add_argument("--noise-px", type=float, default=20.0)
    g.add_argument("--offset", type=int, default=10)
    g.add_argument("--n-sparse", type=int, default=24)
    g.add_argument("--dense-stride", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_priors)

    g = sub.add_parser("train", help="optimize a model on a dataset")
    g.add_argument("--data", required=True)
    g.add_argument("--config", default=None, help="train.json")
    g.add_argument("--out", required=True)
    g.add_argument("--no-sf", action="store_true",
                   help="disable the sparse flow prior")
    g.add_argument("--no-df", action="store_true",
                   help="disable the dense flow prior")
    g.add_argument("--sd", action="store_true",
                   help="enable the sparse-depth baseline term")
    g.add_argument("--iters", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--batch-rays", type=int, default=None)
    g.add_argument("--train-cameras", default=None,
                   help="comma-separated camera indices")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("render", help="render frames from a checkpoint")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--camera", required=True, help="rig JSON file")
    g.add_argument("--frames", default="all", help="a..b (1-based, inclusive)")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, default=128)
    g.set_defaults(func=cmd_render)

    g = sub.add_parser("evaluate", help="score renders against ground truth")
    g.add_argument("--pred", required=True)
    g.add_argument("--gt", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    from defield.container import ContainerError
    from defield.dataset import DatasetError
    from defield.geometry import GeometryError
    from defield.priors import PriorFormatError
    from defield.renderer import RenderError
    from defield.trainer import NumericalAbort

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("DEFIELD_THREADS", "0") or 0)
    if threads:
        backend.set_num_threads(threads)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (DatasetError, GeometryError, PriorFormatError, RenderError,
            ContainerError, FileNotFoundError, NotADirectoryError,
            json.JSONDecodeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
