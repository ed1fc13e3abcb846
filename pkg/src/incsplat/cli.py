"""Command-line entry point: synth, reconstruct, render, evaluate, ablate.

Exit codes: 0 success, 2 input error, 3 degraded completion (more than
half of the inserted frames rejected). Every PipelineConfig key is
exposed as a flag of the same name; precedence is CLI > config file >
defaults.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import renderer
from .errors import (BadFormat, InsufficientFrames, LengthMismatch,
                     MissingFile, ShapeMismatch)
from .geometry import Pose, load_trajectory
from .imageio import write_pfm, write_ppm
from .metrics import ate, metrics_report, psnr, rpe, ssim, umeyama_alignment
from .pipeline import HOLDOUT_EVERY, Pipeline, PipelineConfig
from .priors import SyntheticSceneSpec, generate_synthetic, load_dataset
from .scene import SceneModel

INPUT_ERRORS = (BadFormat, MissingFile, ShapeMismatch, InsufficientFrames,
                LengthMismatch, KeyError, ValueError, OSError)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(PipelineConfig):
        parser.add_argument("--" + f.name.replace("_", "-"),
                            dest="cfg_" + f.name, default=None, metavar="V",
                            help=f"config key {f.name}")


def _build_config(args) -> PipelineConfig:
    cfg = (PipelineConfig.from_file(args.config)
           if getattr(args, "config", None) else PipelineConfig())
    overrides = {name: val for name, val in vars(args).items()
                 if name.startswith("cfg_") and val is not None}
    return cfg.apply({k[4:]: v for k, v in overrides.items()})


def _mapped_holdout_pose(frame: int, est: dict, gt: dict) -> Pose:
    """Bring a ground-truth pose into the estimated frame via the
    similarity fitted on the frames both trajectories share."""
    common = sorted(set(est) & set(gt))
    src = np.array([gt[i].t for i in common])
    dst = np.array([est[i].t for i in common])
    s, R, t = umeyama_alignment(src, dst)
    g = gt[frame]
    from .geometry import rotmat_to_quat
    return Pose(rotmat_to_quat(R @ g.R), s * (R @ g.t) + t)


def evaluate_run(dataset, traj: dict, scene: SceneModel,
                 holdout: bool = False, threads: int = 1):
    """Image and trajectory metrics for a finished run.

    With holdout=True the held-out frames {0,8,16,...} are scored by
    rendering from ground-truth poses mapped into the estimated frame;
    otherwise every frame present in the trajectory is scored with its
    estimated pose. Returns (per_frame rows, summary dict).
    """
    gt = dataset.gt_poses
    summary = {"psnr_mean": None, "ssim_mean": None,
               "ate": None, "rpe_t": None, "rpe_r": None}
    if gt is not None:
        common = sorted(set(traj) & set(gt))
        if len(common) < 3:
            raise LengthMismatch(
                f"only {len(common)} frames shared between trajectories")
        est_l = [traj[i] for i in common]
        gt_l = [gt[i] for i in common]
        summary["ate"] = ate(est_l, gt_l)
        summary["rpe_t"], summary["rpe_r"] = rpe(est_l, gt_l)

    if holdout:
        if gt is None:
            raise MissingFile("holdout evaluation needs gt_poses.txt")
        frames = [i for i in range(dataset.n_frames) if i % HOLDOUT_EVERY == 0]
        poses = {i: _mapped_holdout_pose(i, traj, gt) for i in frames}
    else:
        frames = sorted(set(traj) & set(range(dataset.n_frames)))
        poses = {i: traj[i] for i in frames}

    per_frame = []
    for i in frames:
        out = renderer.render(scene, poses[i], n_threads=threads,
                              retain_cache=False)
        img = dataset.frame(i).image
        per_frame.append((i, psnr(out.color, img), ssim(out.color, img)))
    if per_frame:
        summary["psnr_mean"] = float(np.mean([r[1] for r in per_frame]))
        summary["ssim_mean"] = float(np.mean([r[2] for r in per_frame]))
    return per_frame, summary


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    if args.frames <= 0:
        print("synth: --frames must be positive", file=sys.stderr)
        return 2
    spec = (SyntheticSceneSpec.from_file(args.spec) if args.spec
            else SyntheticSceneSpec())
    if args.seed is not None:
        spec.seed = args.seed
    generate_synthetic(spec, args.frames, args.out)
    return 0


def _cmd_reconstruct(args) -> int:
    cfg = _build_config(args)
    dataset = load_dataset(args.data)
    pipe = Pipeline(dataset, cfg)
    pipe.run(verbose=args.verbose)
    pipe.write_outputs(args.out)
    attempted = len(pipe.training_frames()) - cfg.n_init
    if attempted > 0 and len(pipe.rejected) * 2 > attempted:
        return 3
    return 0


def _cmd_render(args) -> int:
    scene = SceneModel.load(args.checkpoint)
    if args.pose is not None:
        vals = [float(v) for v in args.pose.split()]
        if len(vals) != 7:
            raise BadFormat("--pose needs 'qw qx qy qz tx ty tz'")
        pose = Pose.from_array(np.array(vals))
    elif args.frame is not None:
        if args.frame not in scene.poses:
            raise MissingFile(f"checkpoint stores no pose for frame {args.frame}")
        pose = scene.poses[args.frame]
    else:
        print("render: need --pose or --frame", file=sys.stderr)
        return 2
    out = renderer.render(scene, pose, n_threads=args.threads,
                          retain_cache=False)
    write_ppm(args.out, out.color)
    if args.depth:
        write_pfm(Path(args.out).with_suffix(".pfm"), out.depth)
    return 0


def _cmd_evaluate(args) -> int:
    dataset = load_dataset(args.data)
    traj = load_trajectory(args.traj)
    scene = SceneModel.load(args.checkpoint)
    per_frame, summary = evaluate_run(dataset, traj, scene,
                                      holdout=args.holdout,
                                      threads=args.threads)
    report = metrics_report(per_frame, summary)
    if args.out:
        Path(args.out).write_text(report)
    sys.stdout.write(report)
    return 0


_ABLATION_AXES = {
    "components": [
        ("baseline", {}),
        ("no_pose_estimation", {"disable_pose_estimation": True}),
        ("no_global", {"disable_global": True}),
        ("no_local", {"disable_local": True}),
        ("no_refinement", {"disable_refinement": True}),
    ],
    "window": [
        ("window_1", {"window_mode": "1"}),
        ("window_5", {"window_mode": "5"}),
        ("window_all", {"window_mode": "all"}),
        ("window_adaptive", {"window_mode": "adaptive"}),
    ],
    "anchors": [
        ("anchors_per_pixel", {"anchor_mode": "per-pixel"}),
        ("anchors_fixed_voxel", {"anchor_mode": "fixed-voxel"}),
        ("anchors_octree", {"anchor_mode": "octree"}),
    ],
}


def _cmd_ablate(args) -> int:
    if args.axis not in _ABLATION_AXES:
        print(f"ablate: unknown axis {args.axis!r} "
              f"(choose from {sorted(_ABLATION_AXES)})", file=sys.stderr)
        return 2
    dataset = load_dataset(args.data)
    base = _build_config(args)
    rows = []
    for name, overrides in _ABLATION_AXES[args.axis]:
        cfg = PipelineConfig(**{f.name: getattr(base, f.name)
                                for f in fields(PipelineConfig)})
        for k, v in overrides.items():
            setattr(cfg, k, v)
        run_dir = Path(args.out) / name
        pipe = Pipeline(dataset, cfg)
        pipe.run(verbose=args.verbose)
        pipe.write_outputs(run_dir)
        per_frame, summary = evaluate_run(dataset, pipe.trajectory(),
                                          pipe.scene, holdout=cfg.holdout,
                                          threads=cfg.threads)
        (run_dir / "report.txt").write_text(metrics_report(per_frame, summary))
        rows.append((name, summary))
    lines = ["variant,psnr_mean,ssim_mean,ate,rpe_t,rpe_r"]
    for name, s in rows:
        vals = [s[k] for k in ("psnr_mean", "ssim_mean", "ate", "rpe_t", "rpe_r")]
        lines.append(name + "," + ",".join(
            "n/a" if v is None else f"{v:.6f}" for v in vals))
    table = "\n".join(lines) + "\n"
    (Path(args.out) / "comparison.csv").write_text(table)
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="incsplat",
                                description="incremental splat reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--spec", default=None, help="key=value synthetic spec file")
    sp.add_argument("--frames", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=_cmd_synth)

    rp = sub.add_parser("reconstruct", help="run incremental reconstruction")
    rp.add_argument("--data", required=True)
    rp.add_argument("--config", default=None, help="key=value config file")
    rp.add_argument("--out", required=True)
    rp.add_argument("--verbose", action="store_true")
    _add_config_flags(rp)
    rp.set_defaults(func=_cmd_reconstruct)

    np_ = sub.add_parser("render", help="render a checkpoint")
    np_.add_argument("--checkpoint", required=True)
    np_.add_argument("--pose", default=None, help="'qw qx qy qz tx ty tz'")
    np_.add_argument("--frame", type=int, default=None)
    np_.add_argument("--out", required=True, help="output PPM path")
    np_.add_argument("--depth", action="store_true",
                     help="also write a sibling depth PFM")
    np_.add_argument("--threads", type=int, default=1)
    np_.set_defaults(func=_cmd_render)

    ep = sub.add_parser("evaluate", help="score a run against a dataset")
    ep.add_argument("--data", required=True)
    ep.add_argument("--traj", required=True)
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--out", default=None, help="report output path")
    ep.add_argument("--holdout", action="store_true",
                    help="score held-out frames {0,8,16,...}")
    ep.add_argument("--threads", type=int, default=1)
    ep.set_defaults(func=_cmd_evaluate)

    ap = sub.add_parser("ablate", help="run an ablation axis")
    ap.add_argument("--data", required=True)
    ap.add_argument("--axis", required=True,
                    help="components | window | anchors")
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", required=True)
    ap.add_argument("--verbose", action="store_true")
    _add_config_flags(ap)
    ap.set_defaults(func=_cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except INPUT_ERRORS as e:
        print(f"{args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
