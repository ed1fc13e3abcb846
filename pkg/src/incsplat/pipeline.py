"""Incremental reconstruction pipeline.

Orchestrates the full run: initialization from the first frames' priors,
per-frame insertion (pose tracking, scale alignment, new-region anchor
growth) with visibility-windowed local optimization, periodic global
optimization, and a final refinement pass. The total training loss is

    total = photo + lambda_depth * depth + lambda_reproj * reproj

where photo is the masked squared color error, depth the squared error
against the scale-aligned prior depth, and reproj the squared pixel
reprojection error of the tracked inlier correspondences.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import renderer
from .errors import (BadFormat, FrameRejected, InsufficientFrames,
                     MissingFile, NoOverlap, PnPFailure)
from .geometry import Pose, quat_rotmat_backward, save_trajectory
from .octree import OctreeConfig, form_anchors
from .optim import Adam
from .posetrack import (MIN_PNP_POINTS, PnPConfig, align_depth_scale,
                        detect_new_regions, lift_correspondences,
                        refine_pose_photometric, solve_pnp_ransac)
from .priors import Dataset
from .scene import DecoderParams, SceneModel

HOLDOUT_EVERY = 8   # evaluation protocol: every 8th frame held out


@dataclass
class PipelineConfig:
    n_init: int = 3
    k_local: int = 400
    k_global: int = 900
    k_refine: int = 10000
    tau_iou: float = 0.2
    eps0: float = 0.1
    max_level: int = 6
    kappa: float = 1.0
    tau_split: float = 10.0
    tau_prune: float = 5.0
    # constant thresholds across levels: with the doubling schedule, children
    # of a split cell rarely reach the prune floor at desk-scale densities
    tau_growth: float = 1.0
    lambda_depth: float = 0.1
    lambda_reproj: float = 0.01
    global_every: int = 10
    lr_features: float = 2.5e-3
    lr_offsets: float = 1e-3
    lr_decoder: float = 2e-3
    # pose steps stay small: PnP chaining plus the reprojection anchor carry
    # pose accuracy, and a larger rate lets poses random-walk off them
    lr_poses: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    seed: int = 0
    feature_dim: int = 16
    k_gaussians: int = 4
    hidden_dim: int = 32
    pnp_threshold_px: float = 2.0
    pnp_max_iters: int = 1000
    pnp_min_inliers: int = 12
    pose_refine_iters: int = 100
    pose_refine_lr: float = 2e-3
    # photometric refinement must not move the pose off the PnP inlier
    # consensus by more than this (mean reprojection error slack)
    refine_reproj_slack_px: float = 0.02
    scale_align_alpha: float = 0.9
    occlusion_rel_tol: float = 0.05
    # sub-pixel unprojection grid (points per pixel axis); densifies the
    # cloud so octree cell counts clear the prune floor
    unproject_supersample: int = 2
    prune_opacity: float = 0.005
    prune_patience: int = 300
    threads: int = 1
    holdout: bool = False
    disable_pose_estimation: bool = False
    disable_global: bool = False
    disable_local: bool = False
    disable_refinement: bool = False
    disable_depth_loss: bool = False
    window_mode: str = "adaptive"   # adaptive | 1 | 5 | all
    anchor_mode: str = "octree"     # octree | fixed-voxel | per-pixel

    def apply(self, kv: dict) -> "PipelineConfig":
        types = {f.name: f.type for f in fields(self)}
        for key, val in kv.items():
            if key not in types:
                raise BadFormat(f"unknown config key {key!r}")
            cur = getattr(self, key)
            if isinstance(cur, bool):
                val = str(val).strip().lower() in ("1", "true", "yes", "on")
            else:
                val = type(cur)(val)
            setattr(self, key, val)
        return self

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        kv = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#")[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
        return cls().apply(kv)


@dataclass
class LossBreakdown:
    photo: float
    depth: float
    reproj: float
    total: float
    iteration: int = 0


@dataclass
class FrameData:
    image: np.ndarray
    depth_target: np.ndarray      # scale-aligned prior depth, 0 where invalid
    reproj_X: np.ndarray = None   # (m,3) tracked inlier world points
    reproj_u: np.ndarray = None   # (m,2) their observed pixels


def _reproj_loss_grads(X: np.ndarray, u: np.ndarray, pose: Pose, K):
    """Squared pixel reprojection error and its pose gradients."""
    Wr = pose.R.T
    pc = (X - pose.t) @ pose.R
    z = np.maximum(pc[:, 2], 1e-8)
    ru = K.fx * pc[:, 0] / z + K.cx - u[:, 0]
    rv = K.fy * pc[:, 1] / z + K.cy - u[:, 1]
    loss = float(np.sum(ru * ru + rv * rv))
    dpc = np.zeros_like(pc)
    dpc[:, 0] = 2.0 * ru * K.fx / z
    dpc[:, 1] = 2.0 * rv * K.fy / z
    dpc[:, 2] = -(2.0 * ru * K.fx * pc[:, 0] + 2.0 * rv * K.fy * pc[:, 1]) / (z * z)
    d_t = -(dpc.sum(0) @ Wr)
    d_Wr = dpc.T @ (X - pose.t)
    d_q = quat_rotmat_backward(pose.q, d_Wr.T)
    return loss, d_q, d_t


def select_covisible(frames: list[int], t: int,
                     visible: dict[int, set], tau: float) -> list[int]:
    """Adaptive covisibility window: drop the earliest frames until every
    retained frame has visibility IoU >= tau with frame t. Frame t itself
    is always retained."""
    vis_t = visible[t]

    def iou_ok(f):
        vis_f = visible[f]
        union = len(vis_t | vis_f)
        return (len(vis_t & vis_f) / union if union else 0.0) >= tau

    window = list(frames)
    while len(window) > 1 and not all(f == t or iou_ok(f) for f in window):
        # drop the earliest retained frame (never t itself)
        drop = next(f for f in window if f != t)
        window.remove(drop)
    return window


class Pipeline:
    """Mutable reconstruction state: scene, optimizer, per-frame data."""

    def __init__(self, dataset: Dataset, config: PipelineConfig = None):
        self.dataset = dataset
        self.config = config or PipelineConfig()
        self.scene: SceneModel = None
        self.opt: Adam = None
        self.frame_ids: list[int] = []      # trained frames, insertion order
        self.row_of: dict[int, int] = {}    # frame -> pose row
        self.frame_data: dict[int, FrameData] = {}
        self.extra_poses: dict[int, Pose] = {}  # rejected frames, untrained
        self.rejected: list[int] = []
        self.loss_log: list[tuple] = []
        self.global_iter = 0
        self.last_scale = 1.0
        self.prune_counter = np.zeros(0, dtype=np.int64)
        self._sample_rng = np.random.default_rng(self.config.seed + 2)
        cfg = self.config
        self.octree_config = OctreeConfig(
            eps0=cfg.eps0, max_level=cfg.max_level, kappa=cfg.kappa,
            tau_split_base=cfg.tau_split, tau_prune_base=cfg.tau_prune,
            tau_growth=cfg.tau_growth)

    # -- helpers ------------------------------------------------------------

    def training_frames(self) -> list[int]:
        n = self.dataset.n_frames
        if self.config.holdout:
            return [i for i in range(n) if i % HOLDOUT_EVERY != 0]
        return list(range(n))

    def _pose(self, row: int) -> Pose:
        return Pose.from_array(self.opt.params["poses"][row])

    def pose_of(self, frame: int) -> Pose:
        if frame in self.row_of:
            return self._pose(self.row_of[frame])
        return self.extra_poses[frame]

    def trajectory(self) -> dict[int, Pose]:
        out = {f: self._pose(r) for f, r in self.row_of.items()}
        out.update(self.extra_poses)
        return out

    def _sync_scene_poses(self) -> None:
        for f, r in self.row_of.items():
            self.scene.poses[f] = self._pose(r)
        self.scene.version += 1

    def _unproject_dense(self, depth: np.ndarray, mask: np.ndarray,
                         pose: Pose) -> np.ndarray:
        """Unproject masked depth pixels on a sub-pixel supersampled grid."""
        from .geometry import unproject_pixels
        K = self.dataset.intrinsics
        rr, cc = np.nonzero(mask & (depth > 0))
        if len(rr) == 0:
            return np.zeros((0, 3))
        s = max(1, self.config.unproject_supersample)
        offs = (np.arange(s) + 0.5) / s - 0.5
        pts = []
        d = depth[rr, cc]
        for du in offs:
            for dv in offs:
                pix = np.stack([cc + du, rr + dv], axis=1)
                pts.append(unproject_pixels(pix, d, K, pose))
        return np.concatenate(pts)

    def _form_anchors(self, points: np.ndarray):
        cfg = self.config
        if cfg.anchor_mode == "octree":
            batch = form_anchors(points, self.octree_config)
            return batch.positions, batch.levels
        if cfg.anchor_mode == "fixed-voxel":
            cells = np.unique(np.floor(points / cfg.eps0).astype(np.int64), axis=0)
            return (cells + 0.5) * cfg.eps0, np.zeros(len(cells), dtype=np.uint32)
        if cfg.anchor_mode == "per-pixel":
            lvl = np.full(len(points), cfg.max_level, dtype=np.uint32)
            return points, lvl
        raise ValueError(f"unknown anchor_mode {self.config.anchor_mode!r}")

    def _add_anchors(self, positions: np.ndarray, levels: np.ndarray) -> int:
        if len(positions) == 0:
            return 0
        added = self.scene.add_anchors(positions, levels)
        if added:
            self.opt.grow_rows("features", self.scene.features)
            self.opt.grow_rows("offsets", self.scene.offsets)
            self.prune_counter = np.concatenate(
                [self.prune_counter, np.zeros(added, dtype=np.int64)])
        return added

    def _add_pose_row(self, frame: int, pose: Pose) -> None:
        arr = np.concatenate([self.opt.params["poses"],
                              pose.to_array()[None, :]])
        self.opt.grow_rows("poses", arr)
        self.row_of[frame] = arr.shape[0] - 1
        self.frame_ids.append(frame)

    def _motion_model(self, frame: int) -> Pose:
        ids = self.frame_ids
        last = self._pose(self.row_of[ids[-1]])
        if len(ids) < 2:
            return last
        prev = self._pose(self.row_of[ids[-2]])
        rel = prev.inverse().compose(last)
        steps = max(1, round((frame - ids[-1]) / max(1, ids[-1] - ids[-2])))
        pose = last
        for _ in range(steps):
            pose = pose.compose(rel)
        return pose

    # -- losses and optimization steps --------------------------------------

    def _frame_losses(self, frame: int, pose: Pose, out) -> tuple:
        """Loss terms and upstream image gradients for one rendered frame."""
        cfg = self.config
        fd = self.frame_data[frame]
        # photometric over alpha-valid pixels: alpha > 0, not a coverage
        # threshold, so shrinking coverage cannot hide hard pixels
        mask = out.alpha > 0
        diff = (out.color - fd.image) * mask[:, :, None]
        photo = float(np.sum(diff * diff))
        dcol = 2.0 * diff
        depth_l, ddep = 0.0, None
        if not cfg.disable_depth_loss and fd.depth_target is not None:
            dmask = (out.alpha > 0.5) & (fd.depth_target > 0) & (out.depth > 0)
            ddiff = (out.depth - fd.depth_target) * dmask
            depth_l = float(np.sum(ddiff * ddiff))
            ddep = 2.0 * cfg.lambda_depth * ddiff
        reproj, rq, rt = 0.0, np.zeros(4), np.zeros(3)
        if fd.reproj_X is not None and len(fd.reproj_X):
            reproj, rq, rt = _reproj_loss_grads(
                fd.reproj_X, fd.reproj_u, pose, self.dataset.intrinsics)
        total = photo + cfg.lambda_depth * depth_l + cfg.lambda_reproj * reproj
        return photo, depth_l, reproj, total, dcol, ddep, rq, rt

    def compute_losses(self, frames: list[int]) -> LossBreakdown:
        """Eq-style loss breakdown summed over the given frames (no step)."""
        photo = depth = reproj = total = 0.0
        for f in frames:
            pose = self._pose(self.row_of[f])
            out = renderer.render(self.scene, pose, n_threads=self.config.threads,
                                  retain_cache=False)
            p, d, r, t, *_ = self._frame_losses(f, pose, out)
            photo, depth, reproj, total = photo + p, depth + d, reproj + r, total + t
        return LossBreakdown(photo, depth, reproj, total, self.global_iter)

    def _step(self, frame: int, stage: str, anchor_mask: np.ndarray = None,
              pose_rows: np.ndarray = None, lr_scale: float = 1.0) -> LossBreakdown:
        """One optimizer step on the loss of a single frame."""
        cfg = self.config
        row = self.row_of[frame]
        pose = self._pose(row)
        out = renderer.render(self.scene, pose, n_threads=cfg.threads)
        photo, depth_l, reproj, total, dcol, ddep, rq, rt = \
            self._frame_losses(frame, pose, out)
        g = renderer.render_backward(self.scene, out, dcol, ddep)

        n = self.scene.num_anchors
        fg = np.zeros((n, self.scene.features.shape[1]))
        og = np.zeros((n, self.scene.k, 3))
        if len(g.anchor_idx):
            fg[g.anchor_idx] = g.features
            og[g.anchor_idx] = g.offsets
        pg = np.zeros_like(self.opt.params["poses"])
        pg[row, :4] = g.pose_q + cfg.lambda_reproj * rq
        pg[row, 4:] = g.pose_t + cfg.lambda_reproj * rt

        grads = {"features": fg, "offsets": og, "poses": pg}
        grads.update(g.decoder)
        masks = {"poses": pose_rows}
        if anchor_mask is not None:
            masks["features"] = anchor_mask
            masks["offsets"] = anchor_mask
        self.opt.step(grads, lr_scale=lr_scale, row_masks=masks)

        # renormalize optimized pose quaternions
        p = self.opt.params["poses"]
        rows = np.nonzero(pose_rows)[0] if pose_rows is not None else range(len(p))
        for r in rows:
            p[r, :4] /= np.linalg.norm(p[r, :4])

        # opacity-based pruning bookkeeping for the anchors decoded this step
        dg = out.cache.decoded
        if dg is not None:
            mean_op = dg.opacities.reshape(len(dg.anchor_idx), dg.k).mean(1)
            low = mean_op < cfg.prune_opacity
            self.prune_counter[dg.anchor_idx[low]] += 1
            self.prune_counter[dg.anchor_idx[~low]] = 0

        self.global_iter += 1
        self.loss_log.append((self.global_iter, stage, frame,
                              photo, depth_l, reproj, total))
        return LossBreakdown(photo, depth_l, reproj, total, self.global_iter)

    def _prune(self) -> None:
        cfg = self.config
        idx = np.nonzero(self.prune_counter >= cfg.prune_patience)[0]
        if len(idx) == 0 or len(idx) >= self.scene.num_anchors:
            return
        keep = np.ones(self.scene.num_anchors, dtype=bool)
        keep[idx] = False
        self.scene.remove_anchors(idx)
        self.opt.drop_rows("features", keep, self.scene.features)
        self.opt.drop_rows("offsets", keep, self.scene.offsets)
        self.prune_counter = self.prune_counter[keep]

    def _pose_rows_mask(self, frames: list[int]) -> np.ndarray:
        mask = np.zeros(len(self.opt.params["poses"]), dtype=bool)
        for f in frames:
            mask[self.row_of[f]] = True
        # frames with provided poses are calibration input and stay fixed;
        # this pins the full 7-DoF gauge (one frozen pose leaves scale free)
        for f in self.frame_ids[:self.config.n_init]:
            mask[self.row_of[f]] = False
        mask[0] = False  # first frame is the gauge anchor regardless
        if self.config.disable_pose_estimation:
            mask[:] = False
        return mask

    # -- stages -------------------------------------------------------------

    def initialize(self) -> None:
        cfg = self.config
        frames = self.training_frames()
        if len(frames) < cfg.n_init:
            raise InsufficientFrames(
                f"{len(frames)} trainable frames, need {cfg.n_init}")
        init_ids = frames[:cfg.n_init]
        K = self.dataset.intrinsics
        rng = np.random.default_rng(cfg.seed)
        decoder = DecoderParams.create(cfg.feature_dim, cfg.k_gaussians,
                                       cfg.hidden_dim, rng)
        self.scene = SceneModel(K, decoder, cfg.eps0, cfg.kappa, seed=cfg.seed)

        lrs = {"features": cfg.lr_features, "offsets": cfg.lr_offsets,
               "poses": cfg.lr_poses}
        for name in decoder.TENSOR_NAMES:
            lrs[name] = cfg.lr_decoder
        params = {"features": self.scene.features, "offsets": self.scene.offsets,
                  "poses": np.zeros((0, 7))}
        params.update(decoder.tensors())
        self.opt = Adam(params, lrs, beta1=cfg.beta1, beta2=cfg.beta2,
                        eps=cfg.adam_eps)

        clouds = []
        for i in init_ids:
            prior = self.dataset.frame(i)
            if prior.init_pose is None:
                raise MissingFile(f"init_poses.txt has no pose for frame {i}")
            valid = (prior.confidence > 0.5) & (prior.prior_depth > 0)
            depth = np.where(valid, prior.prior_depth, 0.0)
            clouds.append(self._unproject_dense(depth, valid, prior.init_pose))
            self.frame_data[i] = FrameData(image=prior.image, depth_target=depth)
            self._add_pose_row(i, prior.init_pose)
        cloud = np.concatenate(clouds) if clouds else np.zeros((0, 3))
        if len(cloud) == 0:
            raise InsufficientFrames("initial priors contain no valid points")
        pos, lvl = self._form_anchors(cloud)
        self._add_anchors(pos, lvl)
        if self.scene.num_anchors == 0:
            raise InsufficientFrames("octree pruned away the entire init cloud")

    def select_window(self, t: int) -> list[int]:
        cfg = self.config
        frames = list(self.frame_ids)
        if cfg.window_mode == "1":
            return [t]
        if cfg.window_mode == "5":
            return frames[-5:]
        if cfg.window_mode == "all":
            return frames
        vis = {f: set(self.scene.gather_visible(
            self._pose(self.row_of[f])).tolist()) for f in frames}
        return select_covisible(frames, t, vis, cfg.tau_iou)

    def local_optimize(self, t: int, window: list[int], iters: int) -> None:
        """Optimize anchors in frame t's frustum, the decoder, and the
        window poses, round-robin over the window frames."""
        anchor_mask = np.zeros(self.scene.num_anchors, dtype=bool)
        anchor_mask[self.scene.gather_visible(self._pose(self.row_of[t]))] = True
        pose_rows = self._pose_rows_mask(window)
        for i in range(iters):
            self._step(window[i % len(window)], "local",
                       anchor_mask=anchor_mask, pose_rows=pose_rows)

    def global_optimize(self, iters: int) -> None:
        """Optimize everything over all processed frames, one uniformly
        sampled frame per step; the first frame's pose stays fixed."""
        pose_rows = self._pose_rows_mask(self.frame_ids)
        for _ in range(iters):
            f = self.frame_ids[self._sample_rng.integers(len(self.frame_ids))]
            self._step(f, "global", pose_rows=pose_rows)
        self._prune()

    def refine(self, iters: int) -> None:
        """Final pass over all frames with cosine learning-rate decay to 0.1x."""
        pose_rows = self._pose_rows_mask(self.frame_ids)
        for i in range(iters):
            scale = 0.55 + 0.45 * np.cos(np.pi * i / max(iters - 1, 1))
            f = self.frame_ids[self._sample_rng.integers(len(self.frame_ids))]
            self._step(f, "refine", pose_rows=pose_rows, lr_scale=scale)
        self._prune()

    def _try_pnp(self, matches: np.ndarray, lift_depth: np.ndarray,
                 lift_alpha: np.ndarray, pose_prev: Pose, seed: int):
        K = self.dataset.intrinsics
        X, u = lift_correspondences(matches, lift_depth, lift_alpha,
                                    pose_prev, K)
        cfg = self.config
        pnp = PnPConfig(threshold_px=cfg.pnp_threshold_px,
                        max_iters=cfg.pnp_max_iters,
                        min_inliers=cfg.pnp_min_inliers, seed=seed)
        res = solve_pnp_ransac(X, u, K, pnp)
        return res.pose, X[res.inliers], u[res.inliers]

    def _mean_reproj_px(self, pose: Pose, X: np.ndarray,
                        u: np.ndarray) -> float:
        loss, _, _ = _reproj_loss_grads(X, u, pose, self.dataset.intrinsics)
        return float(np.sqrt(loss / max(len(X), 1)))

    def _scale_from_points(self, X: np.ndarray, u: np.ndarray, pose: Pose,
                           prior_depth: np.ndarray, conf_ok: np.ndarray):
        """Per-frame depth scale from tracked points: ratio of each inlier's
        depth in the new camera to the frame's prior depth at its pixel.
        Unbiased where rendered-depth alignment is biased short, so the
        scale chain does not compound."""
        K = self.dataset.intrinsics
        z = ((X - pose.t) @ pose.R)[:, 2]
        col = np.clip(np.round(u[:, 0]).astype(int), 0, K.width - 1)
        row = np.clip(np.round(u[:, 1]).astype(int), 0, K.height - 1)
        d = prior_depth[row, col]
        ok = (d > 0) & conf_ok[row, col] & (z > 0)
        if ok.sum() < 10:
            return None
        return float(np.median(z[ok] / d[ok]))

    def _track(self, f: int, prev: int, pose_prev: Pose, prev_render,
               prior_f) -> tuple:
        """PnP-chain from the last trained frame to frame f through the
        priors of any skipped frames in between (their matches and depth
        only; their images stay unseen). Returns (pose, inlier world
        points, inlier pixels, scale, aligned depth target for f).

        A failure on the direct hop triggers the global re-optimize +
        retry fallback and raises FrameRejected if that also fails; a
        failure on a bridge hop raises PnPFailure for the caller's
        motion-model path.
        """
        cfg = self.config
        direct = (prev == f - 1)
        pose = pose_prev
        target = self.frame_data[prev].depth_target
        lift_depth = np.where(target > 0, target, prev_render.depth)
        lift_alpha = prev_render.alpha
        X = u = None
        scale = None
        for g in range(prev + 1, f + 1):
            prior_g = prior_f if g == f else self.dataset.frame(g)
            if len(prior_g.matches) < MIN_PNP_POINTS:
                raise PnPFailure(f"frame {g}: too few matches")
            try:
                pose_g, X, u = self._try_pnp(prior_g.matches, lift_depth,
                                             lift_alpha, pose, cfg.seed + g)
            except PnPFailure:
                if not direct:
                    raise
                # fallback: re-optimize everything globally, retry once
                if not cfg.disable_global:
                    self.global_optimize(cfg.k_global)
                pose = self._pose(self.row_of[prev])
                rr = renderer.render(self.scene, pose, n_threads=cfg.threads,
                                     retain_cache=False)
                lift_depth = np.where(target > 0, target, rr.depth)
                lift_alpha = rr.alpha
                try:
                    pose_g, X, u = self._try_pnp(
                        prior_g.matches, lift_depth, lift_alpha, pose,
                        cfg.seed + g + 7919)
                except PnPFailure as e:
                    raise FrameRejected(f"frame {f}: PnP failed twice ({e})")
            conf_ok = prior_g.confidence > 0.5
            s = self._scale_from_points(X, u, pose_g, prior_g.prior_depth,
                                        conf_ok)
            if s is None:
                s = self.last_scale
            scale = s
            target = np.where(conf_ok & (prior_g.prior_depth > 0),
                              s * prior_g.prior_depth, 0.0)
            pose = pose_g
            lift_depth = target
            lift_alpha = np.ones_like(target)
        return pose, X, u, scale, target

    def insert_frame(self, f: int) -> None:
        cfg = self.config
        prior = self.dataset.frame(f)
        prev = self.frame_ids[-1]
        pose_prev = self._pose(self.row_of[prev])
        prev_render = renderer.render(self.scene, pose_prev,
                                      n_threads=cfg.threads, retain_cache=False)
        guess = self._motion_model(f)
        reproj_X = reproj_u = None
        s = depth_scaled = None

        if cfg.disable_pose_estimation:
            pose_t = guess
        else:
            try:
                pose_t, reproj_X, reproj_u, s, depth_scaled = self._track(
                    f, prev, pose_prev, prev_render, prior)
            except PnPFailure:
                # a broken bridge hop is not this frame's fault: fall back
                # to the motion model and let refinement take over
                pose_t = guess
            refined = refine_pose_photometric(
                self.scene, pose_t, prior.image,
                iters=cfg.pose_refine_iters, lr=cfg.pose_refine_lr)
            # refinement chases the photometric term against an imperfect
            # model; a genuine polish stays sub-pixel on the PnP inliers,
            # so reject moves that break the reprojection consensus
            if reproj_X is not None and len(reproj_X):
                r0 = self._mean_reproj_px(pose_t, reproj_X, reproj_u)
                r1 = self._mean_reproj_px(refined, reproj_X, reproj_u)
                if r1 <= r0 + cfg.refine_reproj_slack_px:
                    pose_t = refined
            else:
                pose_t = refined

        K = self.dataset.intrinsics
        conf_ok = prior.confidence > 0.5
        if depth_scaled is None:
            # no tracked points: align the prior against rendered depth on
            # well-covered pixels (low-alpha fringes are biased short)
            cur_render = renderer.render(self.scene, pose_t,
                                         n_threads=cfg.threads,
                                         retain_cache=False)
            d_rendered = np.where(cur_render.alpha > cfg.scale_align_alpha,
                                  cur_render.depth, 0.0)
            try:
                s = align_depth_scale(d_rendered, prior.prior_depth,
                                      valid=conf_ok)
            except NoOverlap:
                s = self.last_scale
            depth_scaled = np.where(conf_ok, s * prior.prior_depth, 0.0)

        prev_depth = np.where(prev_render.alpha > 0.5, prev_render.depth, 0.0)
        mask = detect_new_regions(prev_depth, pose_prev, pose_t, depth_scaled,
                                  K, rel_tol=cfg.occlusion_rel_tol)
        points = self._unproject_dense(depth_scaled, mask, pose_t)
        if len(points):
            pos, lvl = self._form_anchors(points)
            self._add_anchors(pos, lvl)

        self.frame_data[f] = FrameData(image=prior.image,
                                       depth_target=depth_scaled,
                                       reproj_X=reproj_X, reproj_u=reproj_u)
        self._add_pose_row(f, pose_t)
        self.last_scale = s
        if not cfg.disable_local:
            window = self.select_window(f)
            self.local_optimize(f, window, cfg.k_local)
        self._prune()

    # -- full run -----------------------------------------------------------

    def run(self, verbose: bool = False) -> None:
        cfg = self.config
        self.initialize()
        if not cfg.disable_global:
            self.global_optimize(cfg.k_global)
        frames = self.training_frames()
        inserted = 0
        for f in frames[cfg.n_init:]:
            try:
                self.insert_frame(f)
            except FrameRejected as e:
                self.rejected.append(f)
                self.extra_poses[f] = self._motion_model(f)
                if verbose:
                    print(f"rejected: {e}", file=sys.stderr)
            inserted += 1
            if verbose:
                print(f"frame {f}: {self.scene.num_anchors} anchors",
                      file=sys.stderr)
            if inserted % cfg.global_every == 0 and not cfg.disable_global:
                self.global_optimize(cfg.k_global)
        if not cfg.disable_refinement:
            self.refine(cfg.k_refine)
        self._sync_scene_poses()

    def write_outputs(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self._sync_scene_poses()
        self.scene.save(out / "checkpoint.bin")
        save_trajectory(out / "traj_est.txt", self.trajectory())
        with open(out / "losses.csv", "w") as fh:
            fh.write("iter,stage,frame,photo,depth,reproj,total\n")
            for it, stage, frame, p, d, r, t in self.loss_log:
                fh.write(f"{it},{stage},{frame},{p:.9g},{d:.9g},{r:.9g},{t:.9g}\n")


def reconstruct(dataset: Dataset, config: PipelineConfig = None,
                out_dir=None, verbose: bool = False) -> Pipeline:
    """Run the full incremental reconstruction; optionally write outputs."""
    pipe = Pipeline(dataset, config)
    pipe.run(verbose=verbose)
    if out_dir is not None:
        pipe.write_outputs(out_dir)
    return pipe
