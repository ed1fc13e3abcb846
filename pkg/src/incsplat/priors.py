"""Per-frame priors: the on-disk dataset contract and a synthetic oracle.

Dataset layout (all binary formats bit-exact):
    frames/%06d.ppm     color (P6)
    depth/%06d.pfm      prior depth, f32, pre-alignment (per-frame scale free)
    conf/%06d.pfm       confidence in [0,1]
    matches/%06d.csv    x_prev,y_prev,x_cur,y_cur,conf (to frame index-1)
    init_poses.txt      pose text format, first frames only
    intrinsics.txt      fx fy cx cy width height
    gt_poses.txt        optional, for evaluation

The synthetic oracle builds a ground-truth Gaussian scene and orbit
trajectory, renders exact color/depth, samples correspondences from the
true geometry, and injects the declared noise, so every downstream claim
can be verified against known ground truth.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadFormat, MissingFile, ShapeMismatch
from .geometry import (Intrinsics, Pose, load_trajectory, rotmat_to_quat,
                       save_trajectory, unproject_pixels)
from .imageio import read_pfm, read_ppm, write_pfm, write_ppm


@dataclass
class FramePrior:
    index: int
    image: np.ndarray          # (H,W,3) in [0,1]
    prior_depth: np.ndarray    # (H,W)
    confidence: np.ndarray     # (H,W) in [0,1]
    matches: np.ndarray        # (n,5) to frame index-1
    init_pose: Pose = None
    intrinsics: Intrinsics = None


def read_matches_csv(path) -> np.ndarray:
    with open(path) as f:
        header = f.readline().strip()
        if header != "x_prev,y_prev,x_cur,y_cur,conf":
            raise BadFormat(f"{path}: bad match header {header!r}")
        rows = [line.split(",") for line in f if line.strip()]
    if not rows:
        return np.zeros((0, 5))
    return np.array([[float(v) for v in r] for r in rows])


def write_matches_csv(path, matches: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("x_prev,y_prev,x_cur,y_cur,conf\n")
        for m in np.asarray(matches).reshape(-1, 5):
            f.write(",".join(repr(float(v)) for v in m) + "\n")


def read_intrinsics(path) -> Intrinsics:
    vals = Path(path).read_text().split()
    if len(vals) != 6:
        raise BadFormat(f"{path}: expected 'fx fy cx cy width height'")
    return Intrinsics(float(vals[0]), float(vals[1]), float(vals[2]),
                      float(vals[3]), int(vals[4]), int(vals[5]))


class Dataset:
    """Validated view over a dataset directory; frames load on demand."""

    def __init__(self, root):
        self.root = Path(root)
        frames_dir = self.root / "frames"
        if not frames_dir.is_dir():
            raise MissingFile(f"{frames_dir} does not exist")
        indices = sorted(int(p.stem) for p in frames_dir.glob("*.ppm"))
        if not indices:
            raise MissingFile(f"{frames_dir} contains no frames")
        self.n_frames = indices[-1] + 1
        for i in range(self.n_frames):
            if i not in indices:
                raise MissingFile(f"missing frame {i:06d} in {frames_dir}")
            for sub, ext in (("depth", "pfm"), ("conf", "pfm"), ("matches", "csv")):
                p = self.root / sub / f"{i:06d}.{ext}"
                if not p.exists():
                    raise MissingFile(str(p))
        self.intrinsics = read_intrinsics(self.root / "intrinsics.txt")
        ip = self.root / "init_poses.txt"
        self.init_poses = load_trajectory(ip) if ip.exists() else {}
        gp = self.root / "gt_poses.txt"
        self.gt_poses = load_trajectory(gp) if gp.exists() else None

    def frame(self, i: int) -> FramePrior:
        if not (0 <= i < self.n_frames):
            raise MissingFile(f"frame index {i} out of range")
        image = read_ppm(self.root / "frames" / f"{i:06d}.ppm")
        depth = read_pfm(self.root / "depth" / f"{i:06d}.pfm").astype(np.float64)
        conf = read_pfm(self.root / "conf" / f"{i:06d}.pfm").astype(np.float64)
        K = self.intrinsics
        expected = (K.height, K.width)
        for name, arr in (("frames", image[:, :, 0]), ("depth", depth),
                          ("conf", conf)):
            if arr.shape != expected:
                raise ShapeMismatch(
                    f"{name}/{i:06d}: shape {arr.shape}, expected {expected}")
        matches = read_matches_csv(self.root / "matches" / f"{i:06d}.csv")
        return FramePrior(index=i, image=image, prior_depth=depth,
                          confidence=conf, matches=matches,
                          init_pose=self.init_poses.get(i),
                          intrinsics=K if i == 0 else None)

    def frames(self):
        for i in range(self.n_frames):
            yield self.frame(i)


def load_dataset(path) -> Dataset:
    return Dataset(path)


# ---------------------------------------------------------------------------
# synthetic oracle
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    n_primitives: int = 500
    seed: int = 0
    scene_radius: float = 1.5
    orbit_radius: float = 4.0
    orbit_height_wobble: float = 0.15
    width: int = 64
    height: int = 48
    focal: float = 55.0
    scale_min: float = 0.05
    scale_max: float = 0.14
    depth_noise: float = 0.0        # multiplicative sigma on prior depth
    match_noise_px: float = 0.0     # gaussian sigma on current-frame pixels
    outlier_fraction: float = 0.0   # exact fraction of matches resampled
    scale_drift: float = 0.0        # per-frame prior-depth scale in 1 +/- drift
    matches_per_frame: int = 400
    init_pose_count: int = 4

    @classmethod
    def from_file(cls, path) -> "SyntheticSceneSpec":
        spec = cls()
        for line in Path(path).read_text().splitlines():
            line = line.split("#")[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if not hasattr(spec, key):
                raise BadFormat(f"unknown synthetic spec key {key!r}")
            cur = getattr(spec, key)
            setattr(spec, key, type(cur)(val.strip()))
        return spec


@dataclass
class GroundTruthScene:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    trajectory: list[Pose]
    intrinsics: Intrinsics


def _look_at(center: np.ndarray, target: np.ndarray,
             up=np.array([0.0, 1.0, 0.0])) -> Pose:
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)  # camera axes as world columns
    return Pose(rotmat_to_quat(R), center)


def build_ground_truth(spec: SyntheticSceneSpec, n_frames: int) -> GroundTruthScene:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_primitives
    # primitives in a ball, biased to a shell so every view sees structure
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = spec.scene_radius * rng.uniform(0.35, 1.0, n) ** (1 / 3)
    means = direction * radius[:, None]
    quats = rng.normal(size=(n, 4))
    log_scales = np.log(rng.uniform(spec.scale_min, spec.scale_max, (n, 3)))
    # near-opaque primitives give crisp surfaces: blended expected depth
    # then tracks the front surface instead of mixing shells
    opacities = rng.uniform(0.9, 0.99, n)
    colors = rng.uniform(0.08, 0.95, (n, 3))

    K = Intrinsics(spec.focal, spec.focal,
                   (spec.width - 1) / 2.0, (spec.height - 1) / 2.0,
                   spec.width, spec.height)
    traj = []
    for i in range(n_frames):
        theta = 2.0 * np.pi * i / n_frames
        center = np.array([spec.orbit_radius * np.sin(theta),
                           spec.orbit_height_wobble * np.sin(2 * theta),
                           -spec.orbit_radius * np.cos(theta)])
        traj.append(_look_at(center, np.zeros(3)))
    return GroundTruthScene(means, quats, log_scales, opacities, colors,
                            traj, K)


def render_ground_truth(gt: GroundTruthScene, pose: Pose):
    from .renderer import render_raw_gaussians
    out = render_raw_gaussians(gt.means, gt.quats, gt.log_scales,
                               gt.opacities, gt.colors, pose, gt.intrinsics)
    depth = np.where(out.alpha > 0.5, out.depth, 0.0)
    return out.color, depth, out.alpha


def _sample_matches(gt: GroundTruthScene, depth_prev: np.ndarray,
                    depth_cur: np.ndarray, pose_prev: Pose, pose_cur: Pose,
                    spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Project shared ground-truth surface points between consecutive frames."""
    K = gt.intrinsics
    h, w = depth_prev.shape
    step = max(1, int(np.sqrt(w * h / max(spec.matches_per_frame, 1))))
    vv, uu = np.meshgrid(np.arange(0, h, step), np.arange(0, w, step),
                         indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    d = depth_prev[vv, uu]
    ok = d > 0
    uu, vv, d = uu[ok], vv[ok], d[ok]
    pix_prev = np.stack([uu, vv], axis=1).astype(np.float64)
    X = unproject_pixels(pix_prev, d, K, pose_prev)
    pc = (X - pose_cur.t) @ pose_cur.R
    z = pc[:, 2]
    front = z > 1e-6
    zc = np.where(front, z, 1.0)
    uc = K.fx * pc[:, 0] / zc + K.cx
    vc = K.fy * pc[:, 1] / zc + K.cy
    inb = front & (uc >= 0) & (uc <= w - 1) & (vc >= 0) & (vc <= h - 1)
    # visibility in the current frame: the point must be the surface seen
    ur = np.clip(np.round(uc).astype(int), 0, w - 1)
    vr = np.clip(np.round(vc).astype(int), 0, h - 1)
    dc = depth_cur[vr, ur]
    inb &= (dc > 0) & (np.abs(z - dc) < 0.05 * np.maximum(dc, 1e-6))
    pix_prev, uc, vc = pix_prev[inb], uc[inb], vc[inb]

    n = len(uc)
    if n == 0:
        return np.zeros((0, 5))
    if spec.match_noise_px > 0:
        uc = uc + rng.normal(0, spec.match_noise_px, n)
        vc = vc + rng.normal(0, spec.match_noise_px, n)
    n_out = int(np.floor(spec.outlier_fraction * n))
    if n_out > 0:
        which = rng.choice(n, n_out, replace=False)
        uc[which] = rng.uniform(0, w - 1, n_out)
        vc[which] = rng.uniform(0, h - 1, n_out)
    conf = np.ones(n)
    return np.stack([pix_prev[:, 0], pix_prev[:, 1], uc, vc, conf], axis=1)


def generate_synthetic(spec: SyntheticSceneSpec, n_frames: int, out_dir) -> Path:
    """Render a synthetic dataset with ground truth into `out_dir`.

    Deterministic for a fixed spec seed: repeated runs write byte-identical
    directories.
    """
    out = Path(out_dir)
    for sub in ("frames", "depth", "conf", "matches"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    gt = build_ground_truth(spec, n_frames)
    rng = np.random.default_rng(spec.seed + 1)
    K = gt.intrinsics

    depths = []
    for i, pose in enumerate(gt.trajectory):
        color, depth, alpha = render_ground_truth(gt, pose)
        depths.append(depth)
        write_ppm(out / "frames" / f"{i:06d}.ppm", color)
        prior = depth.copy()
        if spec.depth_noise > 0:
            prior *= 1.0 + spec.depth_noise * rng.normal(size=prior.shape)
            prior[depth <= 0] = 0.0
        if spec.scale_drift > 0 and i >= spec.init_pose_count:
            prior *= rng.uniform(1.0 - spec.scale_drift, 1.0 + spec.scale_drift)
        write_pfm(out / "depth" / f"{i:06d}.pfm", prior)
        write_pfm(out / "conf" / f"{i:06d}.pfm", (depth > 0).astype(np.float64))

    for i in range(n_frames):
        if i == 0:
            matches = np.zeros((0, 5))
        else:
            matches = _sample_matches(gt, depths[i - 1], depths[i],
                                      gt.trajectory[i - 1], gt.trajectory[i],
                                      spec, rng)
        write_matches_csv(out / "matches" / f"{i:06d}.csv", matches)

    with open(out / "intrinsics.txt", "w") as f:
        f.write(f"{K.fx} {K.fy} {K.cx} {K.cy} {K.width} {K.height}\n")
    save_trajectory(out / "gt_poses.txt",
                    {i: p for i, p in enumerate(gt.trajectory)})
    n_init = min(spec.init_pose_count, n_frames)
    save_trajectory(out / "init_poses.txt",
                    {i: gt.trajectory[i] for i in range(n_init)})
    return out
