from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mesh import TriangleMesh, build_index, closest_points, inside_mask

# physical deformation = stored value * DEFORM_SCALE * h
DEFORM_SCALE = 0.5
# truncation band, in grid spacings
TRUNCATION_CELLS = 3.0


@dataclass(frozen=True)
class GridSpec:
    """K^3 lattice spanning [-1, 1]^3; point (u, v, w) sits at -1 + (u, v, w) * h."""

    resolution: int

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError(f"grid resolution must be >= 8, got {self.resolution}")

    @property
    def spacing(self) -> float:
        return 2.0 / (self.resolution - 1)

    @property
    def truncation(self) -> float:
        return TRUNCATION_CELLS * self.spacing

    def positions(self) -> np.ndarray:
        axis = -1.0 + np.arange(self.resolution) * self.spacing
        u, v, w = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([u, v, w], axis=-1)


@dataclass
class TsdfDefTensor:
    """K x K x K x 4 tensor: normalized TSDF (channel 0) plus grid deformation (1-3)."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        k = self.grid.resolution
        if self.data.shape != (k, k, k, 4):
            raise ValueError(f"expected data of shape {(k, k, k, 4)}, got {self.data.shape}")

    @property
    def tsdf(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def deformation(self) -> np.ndarray:
        return self.data[..., 1:]

    def deformed_positions(self) -> np.ndarray:
        offset = DEFORM_SCALE * self.grid.spacing * self.data[..., 1:].astype(np.float64)
        return self.grid.positions() + offset

    def copy(self) -> "TsdfDefTensor":
        return TsdfDefTensor(self.grid, self.data.copy())


def init_tsdf_def(mesh: TriangleMesh, grid: GridSpec) -> TsdfDefTensor:
    """Truncated signed distance of ``mesh`` sampled on ``grid``; zero deformation.

    Distances are clamped to +-3h and divided by 3h, negative inside. The
    mesh must be closed for the sign to mean anything.
    """
    index = build_index(mesh)
    pts = grid.positions().reshape(-1, 3)
    band = grid.truncation
    dist, _, _ = closest_points(index, pts, max_distance=band)
    inside = inside_mask(index, pts)
    sdf = np.where(inside, -np.minimum(dist, band), np.minimum(dist, band))
    k = grid.resolution
    data = np.zeros((k, k, k, 4))
    data[..., 0] = (sdf / band).reshape(k, k, k)
    return TsdfDefTensor(grid, data)
