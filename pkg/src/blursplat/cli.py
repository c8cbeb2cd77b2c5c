"""Command-line entry points: synth, train, render, eval.

Each subcommand is a thin wrapper over the library modules.  Configuration
precedence for training is flag > config file > built-in default; the config
file is line-oriented ``key = value`` text.  Module errors surface as a
one-line message on stderr and exit status 1; argparse usage errors keep
their conventional exit status 2.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .dataio import (
    atomic_write_text,
    build_run_config,
    format_report,
    load_dataset,
    parse_config_text,
    read_trajectories,
    save_dataset,
    save_png,
    write_report,
    write_trajectories,
)
from .errors import BlurSplatError, DomainError
from .metrics import ate, psnr, ssim, trajectory_from_splines
from .optim import train
from .rasterizer import render_forward
from .scene import init_from_pointcloud, load_checkpoint, save_checkpoint
from .synth import SynthSpec, generate_dataset, generate_scene


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blursplat",
        description="Recover a sharp Gaussian scene and camera motion from blurry images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic blurry dataset")
    p_synth.add_argument("--out", required=True, help="output dataset directory")
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--traj", choices=("linear", "cubic"), default=None,
                         help="ground-truth trajectory kind")
    p_synth.add_argument("--gaussians", type=int, default=None, help="Gaussian count")
    p_synth.add_argument("--images", type=int, default=None, help="number of views")
    p_synth.add_argument("--size", type=int, default=None, help="image side length in pixels")
    p_synth.add_argument("--extent", type=float, default=None, help="scene extent")
    p_synth.add_argument("--rot-deg", type=float, default=None,
                         help="exposure-spanning rotation, degrees")
    p_synth.add_argument("--trans-frac", type=float, default=None,
                         help="exposure-spanning translation, fraction of extent")
    p_synth.add_argument("--accel", type=float, default=None,
                         help="velocity asymmetry for cubic trajectories, [0, 1)")
    p_synth.add_argument("--n-oracle", type=int, default=None,
                         help="virtual images averaged into each blurry frame")

    p_train = sub.add_parser("train", help="optimize scene and trajectories on a dataset")
    p_train.add_argument("--dataset", default=None, help="dataset directory")
    p_train.add_argument("--out", default=None, help="output directory")
    p_train.add_argument("--config", default=None, help="key=value config file")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--n-virtual", type=int, default=None,
                         help="virtual images averaged per training render")
    p_train.add_argument("--traj", choices=("linear", "cubic"), default=None,
                         help="trajectory kind used for optimization")
    p_train.add_argument("--iters", type=int, default=None, help="total iterations")
    p_train.add_argument("--lambda", dest="lambda_dssim", type=float, default=None,
                         help="DSSIM weight in the loss")

    p_render = sub.add_parser("render", help="render images from a checkpoint")
    p_render.add_argument("--checkpoint", required=True)
    p_render.add_argument("--dataset", required=True,
                          help="dataset directory supplying intrinsics and trajectories")
    p_render.add_argument("--out", required=True, help="output directory for PNGs")
    p_render.add_argument("--trajectories", default=None,
                          help="trajectory file overriding the dataset's initial estimates")
    group = p_render.add_mutually_exclusive_group()
    group.add_argument("--u", type=float, default=0.5,
                       help="exposure time in [0, 1] to render at")
    group.add_argument("--mid-exposure", action="store_true",
                       help="render every image at u = 0.5")

    p_eval = sub.add_parser("eval", help="score a checkpoint against ground truth")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True, help="dataset directory with ground truth")
    p_eval.add_argument("--trajectories", default=None,
                        help="estimated trajectory file (defaults to the dataset's initial)")
    p_eval.add_argument("--out", default=None, help="report path (default: stdout)")
    p_eval.add_argument("--ate-mode", choices=("endpoints", "midpoint"),
                        default="endpoints",
                        help="trajectory samples compared: start+end knots or u=0.5")
    return parser


def _cmd_synth(args: argparse.Namespace) -> int:
    overrides = {
        "seed": args.seed,
        "kind": args.traj,
        "gaussian_count": args.gaussians,
        "num_images": args.images,
        "image_size": args.size,
        "extent": args.extent,
        "blur_rot_deg": args.rot_deg,
        "blur_trans_frac": args.trans_frac,
        "accel": args.accel,
        "n_oracle": args.n_oracle,
    }
    spec = SynthSpec(**{k: v for k, v in overrides.items() if v is not None})
    scene = generate_scene(spec)
    dataset = generate_dataset(scene, spec)
    save_dataset(args.out, dataset)
    print(f"wrote dataset with {len(dataset.images)} images to {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    file_values = {}
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as handle:
            file_values = parse_config_text(handle.read(), source=args.config)
    flag_values = {
        "dataset": args.dataset,
        "output": args.out,
        "traj_kind": args.traj,
        "seed": args.seed,
        "n_virtual": args.n_virtual,
        "total_iters": args.iters,
        "lambda_dssim": args.lambda_dssim,
    }
    run = build_run_config(file_values, flag_values)
    if not run.dataset:
        raise DomainError("no dataset directory given (flag --dataset or config key)")
    if not run.output:
        raise DomainError("no output directory given (flag --out or config key)")

    dataset = load_dataset(run.dataset, traj_kind=run.traj_kind)
    scene = init_from_pointcloud(dataset.cloud_positions, dataset.cloud_colors)
    os.makedirs(run.output, exist_ok=True)
    log_lines: list[str] = []

    def log_fn(line: str) -> None:
        log_lines.append(line)
        print(line)

    result = train(dataset.images, dataset.intrinsics, scene, dataset.trajectories,
                   run.train, log_fn=log_fn)
    save_checkpoint(result.scene, result.final_iteration,
                    os.path.join(run.output, "checkpoint.ckpt"))
    write_trajectories(os.path.join(run.output, "traj_est.txt"), result.trajectories)
    atomic_write_text(os.path.join(run.output, "progress.log"),
                      "\n".join(log_lines) + "\n" if log_lines else "")
    print(f"wrote checkpoint and trajectories to {run.output}")
    return 0


def _cmd_render(args: argparse.Namespace) -> int:
    scene, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    trajs = dataset.trajectories
    if args.trajectories is not None:
        trajs = read_trajectories(args.trajectories)
    u = 0.5 if args.mid_exposure else args.u
    if not 0.0 <= u <= 1.0:
        raise DomainError(f"render time u={u} outside [0, 1]")
    os.makedirs(args.out, exist_ok=True)
    background = np.zeros(3)
    for image_id in sorted(trajs):
        if image_id not in dataset.intrinsics:
            raise DomainError(f"no intrinsics for image {image_id}")
        image, _ = render_forward(scene, trajs[image_id].pose_at(u),
                                  dataset.intrinsics[image_id], background)
        save_png(os.path.join(args.out, f"{image_id:05d}.png"), image.pixels)
    print(f"rendered {len(trajs)} images at u={u} to {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    scene, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    trajs = dataset.trajectories
    if args.trajectories is not None:
        trajs = read_trajectories(args.trajectories)
    if dataset.sharp is None:
        raise DomainError(f"dataset {args.dataset} has no sharp ground-truth images")

    background = np.zeros(3)
    per_image: dict[int, dict[str, float]] = {}
    for image_id in sorted(dataset.sharp):
        if image_id not in trajs:
            raise DomainError(f"no trajectory for image {image_id}")
        image, _ = render_forward(scene, trajs[image_id].pose_at(0.5),
                                  dataset.intrinsics[image_id], background)
        per_image[image_id] = {
            "psnr": psnr(image.pixels, dataset.sharp[image_id]),
            "ssim": ssim(image.pixels, dataset.sharp[image_id]),
        }
    aggregates = {
        "psnr_mean": float(np.mean([m["psnr"] for m in per_image.values()])),
        "ssim_mean": float(np.mean([m["ssim"] for m in per_image.values()])),
    }
    if dataset.gt_trajectories is not None:
        est = trajectory_from_splines(trajs, mode=args.ate_mode)
        gt = trajectory_from_splines(dataset.gt_trajectories, mode=args.ate_mode)
        aggregates["ate"] = ate(est, gt)

    if args.out is not None:
        write_report(args.out, per_image, aggregates)
        print(f"wrote report to {args.out}")
    else:
        sys.stdout.write(format_report(per_image, aggregates))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
}


def run_cli(argv: list[str]) -> int:
    """Parse arguments and dispatch; returns the process exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except BlurSplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
