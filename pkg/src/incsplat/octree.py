"""Density-guided adaptive octree anchor formation.

Point clouds are voxelized at a base resolution; cells whose point count
reaches the split threshold subdivide into 8 children (halving the voxel
size per level), low-count cells are pruned, and each surviving leaf emits
one anchor at its cell center with a scale proportional to its voxel size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivideByZero


@dataclass
class OctreeConfig:
    eps0: float = 0.1
    max_level: int = 6
    kappa: float = 1.0
    tau_split_base: float = 10.0
    tau_prune_base: float = 5.0
    # thresholds grow with depth; the growth factor per level is a choice
    tau_growth: float = 2.0

    def tau_split(self, level: int) -> float:
        return self.tau_split_base * self.tau_growth ** level

    def tau_prune(self, level: int) -> float:
        return self.tau_prune_base * self.tau_growth ** level


@dataclass
class AnchorBatch:
    """Anchors emitted by form_anchors, ordered by (level, cell key)."""

    positions: np.ndarray   # (N,3) cell centers
    levels: np.ndarray      # (N,) uint32
    scales: np.ndarray      # (N,) kappa * eps0 / 2^level

    def __len__(self) -> int:
        return len(self.positions)


def voxelize(points: np.ndarray, eps: float) -> dict[tuple, int]:
    """Assign each point to its floor-division cell; returns cell -> count."""
    if eps <= 0:
        raise ValueError("voxel size must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return {}
    cells = np.floor(points / eps).astype(np.int64)
    uniq, counts = np.unique(cells, axis=0, return_counts=True)
    return {tuple(c): int(n) for c, n in zip(uniq, counts)}


def form_anchors(points: np.ndarray, config: OctreeConfig) -> AnchorBatch:
    """Split dense cells, prune sparse ones, emit one anchor per leaf.

    A cell at level l splits when its count >= tau_split(l) and l < L;
    a leaf survives only if its count >= tau_prune(l). Output ordering is
    canonical (level, cell key) so the result is permutation invariant.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out_pos, out_lvl, out_scale = [], [], []
    active = points
    for level in range(config.max_level + 1):
        if len(active) == 0:
            break
        eps = config.eps0 / (2.0 ** level)
        cells = np.floor(active / eps).astype(np.int64)
        uniq, inverse, counts = np.unique(cells, axis=0, return_inverse=True,
                                          return_counts=True)
        split_mask = (counts >= config.tau_split(level)) & (level < config.max_level)
        leaf_mask = ~split_mask & (counts >= config.tau_prune(level))

        leaf_cells = uniq[leaf_mask]
        order = np.lexsort((leaf_cells[:, 2], leaf_cells[:, 1], leaf_cells[:, 0])) \
            if len(leaf_cells) else np.zeros(0, dtype=int)
        for c in leaf_cells[order]:
            out_pos.append((c + 0.5) * eps)
            out_lvl.append(level)
            out_scale.append(config.kappa * eps)

        active = active[split_mask[inverse]]

    return AnchorBatch(
        positions=np.array(out_pos).reshape(-1, 3),
        levels=np.array(out_lvl, dtype=np.uint32),
        scales=np.array(out_scale, dtype=np.float64),
    )


def compression_report(dense_count: int, anchor_count: int) -> dict:
    if anchor_count == 0:
        raise DivideByZero("no anchors to report compression against")
    return {
        "dense_points": int(dense_count),
        "anchors": int(anchor_count),
        "ratio": dense_count / anchor_count,
    }
