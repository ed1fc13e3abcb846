"""Anchor-based scene representation.

Anchors live on octree cells and carry a learnable feature and per-anchor
offsets; each is decoded per view into k renderable Gaussians by a small
two-layer MLP (one softplus hidden layer, per-quantity output heads).
Learnable tensors (features, offsets, decoder weights) are stored float32
so the checkpoint round-trips bit-exactly; all math is done in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadFormat, DimensionMismatch
from .geometry import (Covariance3, Intrinsics, Pose, quats_rotmats_backward,
                       quats_to_rotmats)

CHECKPOINT_MAGIC = b"LSPL"
CHECKPOINT_VERSION = 1

# first four vertices of a unit tetrahedron, scaled to sit inside the voxel
_TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]],
                  dtype=np.float64) / np.sqrt(3.0)

SCALE_FLOOR_FACTOR = 1e-4   # decoded scale clamp: [1e-4*l_v, 10*l_v]
SCALE_CEIL_FACTOR = 10.0
SCALE_BASE_FACTOR = 0.5     # zero decoder output decodes scale = 0.5*l_v


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class DecoderParams:
    """Weights of the per-anchor Gaussian decoder.

    Input is concat(feature, camera distance, unit view direction); heads
    produce opacity, color, rotation quaternion, and log-scale for each of
    the k Gaussians.
    """

    W1: np.ndarray
    b1: np.ndarray
    W_op: np.ndarray
    b_op: np.ndarray
    W_col: np.ndarray
    b_col: np.ndarray
    W_rot: np.ndarray
    b_rot: np.ndarray
    W_scl: np.ndarray
    b_scl: np.ndarray

    TENSOR_NAMES = ("W1", "b1", "W_op", "b_op", "W_col", "b_col",
                    "W_rot", "b_rot", "W_scl", "b_scl")

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[0] - 4

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def k(self) -> int:
        return self.W_op.shape[1]

    @staticmethod
    def create(feature_dim: int, k: int, hidden: int, rng: np.random.Generator,
               init_std: float = 0.1, opacity_bias: float = -2.0) -> "DecoderParams":
        d_in = feature_dim + 4

        def w(shape):
            return (rng.normal(0.0, init_std, shape)).astype(np.float32)

        return DecoderParams(
            W1=w((d_in, hidden)), b1=np.zeros(hidden, np.float32),
            W_op=w((hidden, k)),
            b_op=np.full(k, opacity_bias, np.float32),
            W_col=w((hidden, 3 * k)), b_col=np.zeros(3 * k, np.float32),
            W_rot=w((hidden, 4 * k)), b_rot=np.zeros(4 * k, np.float32),
            W_scl=w((hidden, 3 * k)), b_scl=np.zeros(3 * k, np.float32),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.TENSOR_NAMES}

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {n: np.zeros(getattr(self, n).shape) for n in self.TENSOR_NAMES}


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    covariance: Covariance3
    opacity: float
    color: np.ndarray
    parent_anchor: int


@dataclass
class DecodedGaussians:
    """Flat per-view Gaussian attributes for a set of anchors, plus the
    intermediates needed by the backward pass.

    Arrays are flattened anchor-major: gaussian g of anchor a sits at
    row a*k + g.
    """

    anchor_idx: np.ndarray      # (A,) indices into the scene
    means: np.ndarray           # (A*k, 3)
    quats: np.ndarray           # (A*k, 4) raw (pre-normalization)
    log_scales: np.ndarray      # (A*k, 3)
    opacities: np.ndarray       # (A*k,)
    colors: np.ndarray          # (A*k, 3)
    k: int
    # caches
    h0: np.ndarray = None
    sig_z1: np.ndarray = None
    h1: np.ndarray = None
    dist: np.ndarray = None
    direction: np.ndarray = None
    scale_in_range: np.ndarray = None
    camera_center: np.ndarray = None


@dataclass
class DecodeGrads:
    features: np.ndarray        # (A, F) rows aligned with anchor_idx
    offsets: np.ndarray         # (A, k, 3)
    decoder: dict[str, np.ndarray]
    camera_center: np.ndarray   # (3,)


class SceneModel:
    """Anchors + decoder + per-frame poses; the single mutable pipeline state.

    Mutations bump `version` so renderer caches can detect staleness.
    Single-writer: callers must not mutate concurrently with renders.
    """

    def __init__(self, intrinsics: Intrinsics, decoder: DecoderParams,
                 eps0: float, kappa: float = 1.0, seed: int = 0):
        self.intrinsics = intrinsics
        self.decoder = decoder
        self.eps0 = float(eps0)
        self.kappa = float(kappa)
        self.k = decoder.k
        F = decoder.feature_dim
        self.positions = np.zeros((0, 3))
        self.levels = np.zeros(0, dtype=np.uint32)
        self.scales = np.zeros(0)
        self.features = np.zeros((0, F), dtype=np.float32)
        self.offsets = np.zeros((0, self.k, 3), dtype=np.float32)
        self.poses: dict[int, Pose] = {}
        self._cells: dict[int, dict[tuple, int]] = {}  # level -> cell -> anchor idx
        self._rng = np.random.default_rng(seed)
        self.version = 0

    # -- basic accessors ----------------------------------------------------

    @property
    def num_anchors(self) -> int:
        return len(self.positions)

    def eps_at(self, level: int) -> float:
        return self.eps0 / (2.0 ** int(level))

    def set_pose(self, frame: int, pose: Pose) -> None:
        self.poses[frame] = pose
        self.version += 1

    # -- anchor insertion ---------------------------------------------------

    def _cell_of(self, pos: np.ndarray, level: int) -> tuple:
        eps = self.eps_at(level)
        return tuple(int(v) for v in np.floor(pos / eps))

    def _overlaps_existing(self, pos: np.ndarray, level: int) -> bool:
        """True if an existing anchor lies within 0.5*eps(level) of pos."""
        r = 0.5 * self.eps_at(level)
        for lvl, cells in self._cells.items():
            if not cells:
                continue
            eps = self.eps_at(lvl)
            base = np.floor(pos / eps).astype(int)
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        key = (base[0] + dx, base[1] + dy, base[2] + dz)
                        idx = cells.get(key)
                        if idx is not None and np.linalg.norm(self.positions[idx] - pos) < r:
                            return True
        return False

    def add_anchors(self, positions: np.ndarray, levels: np.ndarray) -> int:
        """Insert anchors, discarding spatial duplicates; returns count added.

        Duplicate rule: same (cell, level) key as an existing anchor, or
        position within half the new anchor's voxel of any existing anchor.
        """
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        levels = np.asarray(levels, dtype=np.uint32).reshape(-1)
        keep_pos, keep_lvl = [], []
        pending: set[tuple] = set()
        for p, lvl in zip(positions, levels):
            key = (int(lvl),) + self._cell_of(p, int(lvl))
            if key in pending:
                continue
            if self._cells.get(int(lvl), {}).get(key[1:]) is not None:
                continue
            if self._overlaps_existing(p, int(lvl)):
                continue
            pending.add(key)
            keep_pos.append(p)
            keep_lvl.append(lvl)
        n = len(keep_pos)
        if n == 0:
            return 0
        base = self.num_anchors
        new_pos = np.array(keep_pos)
        new_lvl = np.array(keep_lvl, dtype=np.uint32)
        new_scale = self.kappa * self.eps0 / (2.0 ** new_lvl.astype(np.float64))
        F = self.features.shape[1]
        new_feat = self._rng.uniform(-0.01, 0.01, (n, F)).astype(np.float32)
        new_off = np.tile(0.5 * _TETRA[None, :, :], (n, 1, 1))[:, :self.k].astype(np.float32)
        if self.k > 4:
            extra = self._rng.uniform(-0.5, 0.5, (n, self.k - 4, 3)).astype(np.float32)
            new_off = np.concatenate([new_off, extra], axis=1)
        self.positions = np.concatenate([self.positions, new_pos])
        self.levels = np.concatenate([self.levels, new_lvl])
        self.scales = np.concatenate([self.scales, new_scale])
        self.features = np.concatenate([self.features, new_feat])
        self.offsets = np.concatenate([self.offsets, new_off])
        for i, (p, lvl) in enumerate(zip(new_pos, new_lvl)):
            self._cells.setdefault(int(lvl), {})[self._cell_of(p, int(lvl))] = base + i
        self.version += 1
        return n

    def remove_anchors(self, idx: np.ndarray) -> None:
        """Drop the given anchor rows (used by opacity-based pruning)."""
        idx = np.asarray(idx, dtype=int)
        if len(idx) == 0:
            return
        keep = np.ones(self.num_anchors, dtype=bool)
        keep[idx] = False
        self.positions = self.positions[keep]
        self.levels = self.levels[keep]
        self.scales = self.scales[keep]
        self.features = self.features[keep]
        self.offsets = self.offsets[keep]
        self._rebuild_cells()
        self.version += 1

    def _rebuild_cells(self) -> None:
        self._cells = {}
        for i, (p, lvl) in enumerate(zip(self.positions, self.levels)):
            self._cells.setdefault(int(lvl), {})[self._cell_of(p, int(lvl))] = i

    # -- visibility ---------------------------------------------------------

    def gather_visible(self, pose: Pose, near: float = 1e-4) -> np.ndarray:
        """Indices of anchors projecting inside the image, with a world-space
        margin of 2*l_v around the frame."""
        if self.num_anchors == 0:
            return np.zeros(0, dtype=int)
        K = self.intrinsics
        pc = (self.positions - pose.t) @ pose.R
        z = pc[:, 2]
        ok = z > near
        zs = np.where(ok, z, 1.0)
        u = K.fx * pc[:, 0] / zs + K.cx
        v = K.fy * pc[:, 1] / zs + K.cy
        mu = 2.0 * self.scales * K.fx / zs
        mv = 2.0 * self.scales * K.fy / zs
        ok &= (u >= -mu) & (u <= K.width - 1 + mu)
        ok &= (v >= -mv) & (v <= K.height - 1 + mv)
        return np.nonzero(ok)[0]

    # -- decoding -----------------------------------------------------------

    def decode(self, anchor_idx: np.ndarray, camera_center: np.ndarray) -> DecodedGaussians:
        """Decode k Gaussians per anchor for a view at camera_center."""
        dec = self.decoder
        idx = np.asarray(anchor_idx, dtype=int)
        A, k = len(idx), self.k
        F = dec.feature_dim
        if self.features.shape[1] != F:
            raise DimensionMismatch(
                f"feature dim {self.features.shape[1]} != decoder input {F}")
        pos = self.positions[idx]
        lv = self.scales[idx]
        feat = self.features[idx].astype(np.float64)
        offs = self.offsets[idx].astype(np.float64)
        c = np.asarray(camera_center, dtype=np.float64)

        delta = c[None, :] - pos
        dist = np.maximum(np.linalg.norm(delta, axis=1), 1e-12)
        direction = delta / dist[:, None]
        h0 = np.concatenate([feat, dist[:, None], direction], axis=1)

        W1 = dec.W1.astype(np.float64)
        z1 = h0 @ W1 + dec.b1.astype(np.float64)
        h1 = _softplus(z1)
        sig_z1 = _sigmoid(z1)

        op_raw = h1 @ dec.W_op.astype(np.float64) + dec.b_op.astype(np.float64)
        col_raw = h1 @ dec.W_col.astype(np.float64) + dec.b_col.astype(np.float64)
        rot_raw = h1 @ dec.W_rot.astype(np.float64) + dec.b_rot.astype(np.float64)
        scl_raw = h1 @ dec.W_scl.astype(np.float64) + dec.b_scl.astype(np.float64)

        opac = _sigmoid(op_raw).reshape(A * k)
        colors = _sigmoid(col_raw).reshape(A * k, 3)
        quats = rot_raw.reshape(A, k, 4) + np.array([1.0, 0, 0, 0])
        base = np.log(SCALE_BASE_FACTOR * lv)
        lo = np.log(SCALE_FLOOR_FACTOR * lv)
        hi = np.log(SCALE_CEIL_FACTOR * lv)
        raw_ls = scl_raw.reshape(A, k, 3) + base[:, None, None]
        log_scales = np.clip(raw_ls, lo[:, None, None], hi[:, None, None])
        in_range = (raw_ls > lo[:, None, None]) & (raw_ls < hi[:, None, None])

        means = pos[:, None, :] + offs * lv[:, None, None]

        return DecodedGaussians(
            anchor_idx=idx,
            means=means.reshape(A * k, 3),
            quats=quats.reshape(A * k, 4),
            log_scales=log_scales.reshape(A * k, 3),
            opacities=opac,
            colors=colors,
            k=k,
            h0=h0, sig_z1=sig_z1, h1=h1,
            dist=dist, direction=direction,
            scale_in_range=in_range.reshape(A * k, 3),
            camera_center=c,
        )

    def decode_backward(self, dg: DecodedGaussians,
                        d_means: np.ndarray, d_opac: np.ndarray,
                        d_colors: np.ndarray, d_quats: np.ndarray,
                        d_log_scales: np.ndarray) -> DecodeGrads:
        """Chain per-Gaussian gradients back to features, offsets, decoder
        weights, and the camera center (the view-dependent decoder inputs)."""
        dec = self.decoder
        idx = dg.anchor_idx
        A, k = len(idx), dg.k
        F = dec.feature_dim
        lv = self.scales[idx]

        d_off = d_means.reshape(A, k, 3) * lv[:, None, None]

        op = dg.opacities.reshape(A, k)
        d_op_raw = (d_opac.reshape(A, k) * op * (1.0 - op))
        col = dg.colors.reshape(A, k, 3)
        d_col_raw = (d_colors.reshape(A, k, 3) * col * (1.0 - col)).reshape(A, 3 * k)
        d_rot_raw = d_quats.reshape(A, 4 * k)
        d_scl_raw = (d_log_scales * dg.scale_in_range).reshape(A, 3 * k)

        h1 = dg.h1
        d_h1 = (d_op_raw @ dec.W_op.T.astype(np.float64)
                + d_col_raw @ dec.W_col.T.astype(np.float64)
                + d_rot_raw @ dec.W_rot.T.astype(np.float64)
                + d_scl_raw @ dec.W_scl.T.astype(np.float64))
        d_z1 = d_h1 * dg.sig_z1
        d_h0 = d_z1 @ dec.W1.T.astype(np.float64)

        dgrads = {
            "W1": dg.h0.T @ d_z1, "b1": d_z1.sum(0),
            "W_op": h1.T @ d_op_raw, "b_op": d_op_raw.sum(0),
            "W_col": h1.T @ d_col_raw, "b_col": d_col_raw.sum(0),
            "W_rot": h1.T @ d_rot_raw, "b_rot": d_rot_raw.sum(0),
            "W_scl": h1.T @ d_scl_raw, "b_scl": d_scl_raw.sum(0),
        }

        d_feat = d_h0[:, :F]
        d_dist = d_h0[:, F]
        d_dir = d_h0[:, F + 1:]
        # delta = c - pos, dist = |delta|, dir = delta/dist
        dirs = dg.direction
        d_delta = (d_dist[:, None] * dirs
                   + (d_dir - dirs * np.sum(dirs * d_dir, axis=1, keepdims=True))
                   / dg.dist[:, None])
        d_center = d_delta.sum(0)

        return DecodeGrads(features=d_feat, offsets=d_off,
                           decoder=dgrads, camera_center=d_center)

    def decode_anchor(self, anchor: int, camera_center: np.ndarray) -> list[GaussianPrimitive]:
        """Single-anchor decode into GaussianPrimitive values."""
        dg = self.decode(np.array([anchor]), camera_center)
        out = []
        for g in range(dg.k):
            out.append(GaussianPrimitive(
                mean=dg.means[g].copy(),
                covariance=Covariance3(dg.quats[g].copy(), dg.log_scales[g].copy()),
                opacity=float(dg.opacities[g]),
                color=dg.colors[g].copy(),
                parent_anchor=anchor,
            ))
        return out

    # -- checkpoint I/O -----------------------------------------------------

    def save(self, path) -> None:
        dec = self.decoder
        with open(path, "wb") as f:
            F, k, hidden = dec.feature_dim, dec.k, dec.hidden_dim
            frames = sorted(self.poses)
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<6I", CHECKPOINT_VERSION, self.num_anchors,
                                F, k, hidden, len(frames)))
            K = self.intrinsics
            f.write(struct.pack("<4d2I", K.fx, K.fy, K.cx, K.cy, K.width, K.height))
            f.write(struct.pack("<2d", self.eps0, self.kappa))
            for i in range(self.num_anchors):
                f.write(struct.pack("<3d", *self.positions[i]))
                f.write(struct.pack("<Id", int(self.levels[i]), float(self.scales[i])))
                f.write(self.features[i].astype("<f4").tobytes())
                f.write(self.offsets[i].astype("<f4").tobytes())
            for name in dec.TENSOR_NAMES:
                f.write(np.ascontiguousarray(getattr(dec, name), dtype="<f4").tobytes())
            f.write(np.array(frames, dtype="<u4").tobytes())
            for fr in frames:
                f.write(self.poses[fr].to_array().astype("<f8").tobytes())

    @staticmethod
    def load(path) -> "SceneModel":
        with open(path, "rb") as f:
            if f.read(4) != CHECKPOINT_MAGIC:
                raise BadFormat(f"{path}: bad checkpoint magic")
            version, n, F, k, hidden, n_poses = struct.unpack("<6I", f.read(24))
            if version != CHECKPOINT_VERSION:
                raise BadFormat(f"{path}: unsupported checkpoint version {version}")
            fx, fy, cx, cy, w, h = struct.unpack("<4d2I", f.read(40))
            eps0, kappa = struct.unpack("<2d", f.read(16))
            K = Intrinsics(fx, fy, cx, cy, w, h)
            d_in = F + 4
            dec = DecoderParams(
                W1=np.zeros((d_in, hidden), np.float32), b1=np.zeros(hidden, np.float32),
                W_op=np.zeros((hidden, k), np.float32), b_op=np.zeros(k, np.float32),
                W_col=np.zeros((hidden, 3 * k), np.float32), b_col=np.zeros(3 * k, np.float32),
                W_rot=np.zeros((hidden, 4 * k), np.float32), b_rot=np.zeros(4 * k, np.float32),
                W_scl=np.zeros((hidden, 3 * k), np.float32), b_scl=np.zeros(3 * k, np.float32),
            )
            scene = SceneModel(K, dec, eps0, kappa)
            scene.positions = np.zeros((n, 3))
            scene.levels = np.zeros(n, dtype=np.uint32)
            scene.scales = np.zeros(n)
            scene.features = np.zeros((n, F), np.float32)
            scene.offsets = np.zeros((n, k, 3), np.float32)
            for i in range(n):
                scene.positions[i] = struct.unpack("<3d", f.read(24))
                lvl, sc = struct.unpack("<Id", f.read(12))
                scene.levels[i] = lvl
                scene.scales[i] = sc
                scene.features[i] = np.frombuffer(f.read(4 * F), dtype="<f4")
                scene.offsets[i] = np.frombuffer(f.read(12 * k), dtype="<f4").reshape(k, 3)
            for name in dec.TENSOR_NAMES:
                arr = getattr(dec, name)
                data = np.frombuffer(f.read(4 * arr.size), dtype="<f4")
                setattr(dec, name, data.reshape(arr.shape).copy())
            frames = np.frombuffer(f.read(4 * n_poses), dtype="<u4")
            for fr in frames:
                a = np.frombuffer(f.read(56), dtype="<f8")
                scene.poses[int(fr)] = Pose.from_array(a)
        scene._rebuild_cells()
        return scene
