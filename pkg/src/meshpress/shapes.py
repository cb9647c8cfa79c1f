"""Analytic primitives used as a small, reproducible benchmark set.

Each primitive is a signed distance function; meshes are extracted with
marching cubes on a fine lattice, so they are closed and consistently
oriented.
"""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from .mesh import TriangleMesh
from .rgr.dmc import dmc_extract
from .rgr.grid import GridSpec, TsdfDefTensor

Sdf = Callable[[np.ndarray], np.ndarray]


def sphere(radius=0.5, center=(0.0, 0.0, 0.0)) -> Sdf:
    c = np.asarray(center)
    return lambda p: np.linalg.norm(p - c, axis=-1) - radius


def box(half=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0)) -> Sdf:
    hb, c = np.asarray(half), np.asarray(center)

    def f(p):
        q = np.abs(p - c) - hb
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    return f


def torus(major=0.55, minor=0.2) -> Sdf:
    def f(p):
        ring = np.sqrt(p[..., 0] ** 2 + p[..., 2] ** 2) - major
        return np.sqrt(ring**2 + p[..., 1] ** 2) - minor

    return f


def capsule(a=(-0.45, 0.0, 0.0), b=(0.45, 0.0, 0.0), radius=0.3) -> Sdf:
    a, b = np.asarray(a, float), np.asarray(b, float)
    ab = b - a

    def f(p):
        t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
        return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1) - radius

    return f


def union(*fs: Sdf) -> Sdf:
    return lambda p: np.minimum.reduce([f(p) for f in fs])


def mesh_from_sdf(sdf: Sdf, resolution: int = 80) -> TriangleMesh:
    grid = GridSpec(resolution)
    data = np.zeros((resolution,) * 3 + (4,))
    data[..., 0] = np.clip(sdf(grid.positions()) / grid.truncation, -1.0, 1.0)
    return dmc_extract(TsdfDefTensor(grid, data))


def desk_set() -> Dict[str, Sdf]:
    """Eight primitives: four basic solids and four unions, all inside [-0.9, 0.9]^3."""
    return {
        "s0_sphere": sphere(0.6),
        "s1_torus": torus(0.55, 0.2),
        "s2_box": box((0.6, 0.45, 0.35)),
        "s3_capsule": capsule(radius=0.3),
        "s4_sphere_box": union(sphere(0.4, (0.3, 0.2, 0.0)), box((0.35, 0.35, 0.35), (-0.35, -0.2, 0.0))),
        "s5_torus_capsule": union(torus(0.5, 0.15), capsule((0, -0.6, 0), (0, 0.6, 0), 0.2)),
        "s6_two_spheres": union(sphere(0.4, (-0.35, 0.0, 0.0)), sphere(0.35, (0.4, 0.1, 0.1))),
        "s7_box_capsule": union(box((0.5, 0.15, 0.5)), capsule((0, -0.5, 0), (0, 0.6, 0), 0.25)),
    }


def rotate_z(sdf: Sdf, angle: float) -> Sdf:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return lambda p: sdf(p @ rot)


def thin_plate(thickness: float = 0.06, tilt: float = 0.3) -> Sdf:
    """Tilted slab about one K=32 cell thick, for the deformation ablation.

    The tilt matters: an axis-aligned slab has a linear SDF across the
    lattice, which plain marching cubes already reproduces exactly.
    """
    return rotate_z(box((0.7, thickness / 2, 0.6)), tilt)
