"""Orthographic depth/silhouette rendering and the image-space reconstruction error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numba
import numpy as np

from ..mesh import TriangleMesh

# camera plane sits this far behind the origin along the view direction,
# outside the [-1, 1]^3 cube, so every visible depth is positive
CAMERA_DISTANCE = 2.0


@dataclass(frozen=True)
class ViewSpec:
    direction: Tuple[float, float, float]
    up: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    height: int = 256
    width: int = 256

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        u = np.asarray(self.up, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9 or abs(np.linalg.norm(u) - 1.0) > 1e-9:
            raise ValueError("view direction and up must be unit vectors")
        if abs(d @ u) > 1e-9:
            raise ValueError("view direction must be perpendicular to up")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("image size must be positive")

    def basis(self) -> np.ndarray:
        """Rows: image-right, image-up, forward."""
        f = np.asarray(self.direction, dtype=np.float64)
        up = np.asarray(self.up, dtype=np.float64)
        right = np.cross(f, up)
        return np.stack([right, up, f])


def default_views(size: int = 256, azimuths_deg: Sequence[float] = (0.0, 90.0, 180.0, 270.0)):
    """Horizontal ring of cameras looking at the origin."""
    views = []
    for az in azimuths_deg:
        a = np.deg2rad(az)
        d = (-float(np.sin(a)), 0.0, -float(np.cos(a)))
        views.append(ViewSpec(direction=d, height=size, width=size))
    return views


@dataclass
class RenderPair:
    depth: np.ndarray
    silhouette: np.ndarray


@numba.njit(cache=True)
def _raster(xy, z, faces, height, width, depth):
    px = 2.0 / width
    py = 2.0 / height
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0 = xy[i0, 0], xy[i0, 1]
        x1, y1 = xy[i1, 0], xy[i1, 1]
        x2, y2 = xy[i2, 0], xy[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        # pixel column j has center x = -1 + (j + 0.5) px; row i has y = 1 - (i + 0.5) py
        xmin = min(x0, x1, x2)
        xmax = max(x0, x1, x2)
        ymin = min(y0, y1, y2)
        ymax = max(y0, y1, y2)
        j0 = max(0, int(np.ceil((xmin + 1.0) / px - 0.5)))
        j1 = min(width - 1, int(np.floor((xmax + 1.0) / px - 0.5)))
        i0r = max(0, int(np.ceil((1.0 - ymax) / py - 0.5)))
        i1r = min(height - 1, int(np.floor((1.0 - ymin) / py - 0.5)))
        inv = 1.0 / area
        for i in range(i0r, i1r + 1):
            cy = 1.0 - (i + 0.5) * py
            for j in range(j0, j1 + 1):
                cx = -1.0 + (j + 0.5) * px
                w0 = ((x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)) * inv
                w1 = ((x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)) * inv
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                d = w0 * z[i0] + w1 * z[i1] + w2 * z[i2]
                if depth[i, j] == 0.0 or d < depth[i, j]:
                    depth[i, j] = d


def render(mesh: TriangleMesh, view: ViewSpec) -> RenderPair:
    """Z-buffer the mesh orthographically over the [-1, 1]^2 window."""
    depth = np.zeros((view.height, view.width))
    if mesh.n_faces:
        cam = mesh.vertices @ view.basis().T
        xy = np.ascontiguousarray(cam[:, :2])
        z = cam[:, 2] + CAMERA_DISTANCE
        _raster(xy, z, np.ascontiguousarray(mesh.faces), view.height, view.width, depth)
    return RenderPair(depth=depth, silhouette=depth > 0.0)


def recon_error(
    mesh_a: TriangleMesh,
    mesh_b: TriangleMesh,
    views: Sequence[ViewSpec],
    lambda_rec: float = 10.0,
) -> Tuple[float, float, float]:
    """Silhouette error, silhouette-masked depth error and their weighted sum.

    ``mesh_b`` plays the reference role: depth differences only count on its
    silhouette.
    """
    if not views:
        raise ValueError("at least one view is required")
    e_m = 0.0
    e_d = 0.0
    for view in views:
        ra = render(mesh_a, view)
        rb = render(mesh_b, view)
        e_m += float(np.abs(ra.silhouette.astype(np.float64) - rb.silhouette).sum())
        e_d += float(np.abs((ra.depth - rb.depth) * rb.silhouette).sum())
    return e_m, e_d, e_m + lambda_rec * e_d
