"""Surface distortion metrics and rate-distortion records.

All metrics compare two point samplings. Nearest neighbours come from a
kd-tree; the brute-force path is used for tiny inputs and by the tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .mesh import SurfaceSamples, TriangleMesh, sample_surface

BRUTE_FORCE_BELOW = 1000
DEFAULT_EVAL_POINTS = 100_000
F_THRESHOLDS = (0.005, 0.01)


class MetricsError(ValueError):
    pass


def _points(s) -> np.ndarray:
    pts = s.points if isinstance(s, SurfaceSamples) else np.asarray(s, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise MetricsError("metrics need a non-empty (n, 3) point set")
    return pts


def nearest(src: np.ndarray, dst: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distance from each ``src`` point to its nearest ``dst`` point, and that index."""
    if max(len(src), len(dst)) < BRUTE_FORCE_BELOW:
        d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=-1)
        idx = d2.argmin(axis=1)
        return np.sqrt(d2[np.arange(len(src)), idx]), idx
    dist, idx = cKDTree(dst).query(src, k=1)
    return dist, idx


def chamfer_distance(a, b) -> float:
    pa, pb = _points(a), _points(b)
    return 0.5 * float(nearest(pa, pb)[0].mean()) + 0.5 * float(nearest(pb, pa)[0].mean())


def normal_consistency(a: SurfaceSamples, b: SurfaceSamples) -> float:
    pa, pb = _points(a), _points(b)
    _, ia = nearest(pa, pb)
    _, ib = nearest(pb, pa)
    na = np.abs(np.einsum("ij,ij->i", a.normals, b.normals[ia]))
    nb = np.abs(np.einsum("ij,ij->i", b.normals, a.normals[ib]))
    return float(np.clip(0.5 * na.mean() + 0.5 * nb.mean(), 0.0, 1.0))


def precision_recall(rec, gt, eps: float) -> Tuple[float, float]:
    """(precision, recall) in the orientation used by the metric definition.

    Recall is the fraction of reconstruction points within ``eps`` of the
    ground truth; precision the fraction of ground-truth points within
    ``eps`` of the reconstruction. F is symmetric in the two.
    """
    if not eps > 0:
        raise MetricsError("F-score threshold must be positive")
    pr, pg = _points(rec), _points(gt)
    recall = float((nearest(pr, pg)[0] < eps).mean())
    precision = float((nearest(pg, pr)[0] < eps).mean())
    return precision, recall


def f_score(rec, gt, eps: float) -> float:
    p, r = precision_recall(rec, gt, eps)
    if p + r == 0.0:
        return 0.0
    return 2.0 * p * r / (p + r)


@dataclass(frozen=True)
class MetricsRecord:
    cd: float
    nc: float
    f1_005: float
    f1_01: float

    def __post_init__(self):
        vals = (self.cd, self.nc, self.f1_005, self.f1_01)
        if not all(np.isfinite(v) for v in vals):
            raise MetricsError("metrics must be finite")
        if self.cd < 0 or not all(0.0 <= v <= 1.0 for v in vals[1:]):
            raise MetricsError("metric out of range")

    def row(self) -> List[float]:
        return [self.cd, self.nc, self.f1_005, self.f1_01]


def evaluate_samples(rec: SurfaceSamples, gt: SurfaceSamples) -> MetricsRecord:
    return MetricsRecord(
        cd=chamfer_distance(rec, gt),
        nc=normal_consistency(rec, gt),
        f1_005=f_score(rec, gt, F_THRESHOLDS[0]),
        f1_01=f_score(rec, gt, F_THRESHOLDS[1]),
    )


def evaluate_pair(
    recon: TriangleMesh, gt: TriangleMesh, n_eval: int = DEFAULT_EVAL_POINTS, seed: int = 0
) -> MetricsRecord:
    """Sample both surfaces with ``n_eval`` points and compute every metric.

    Both meshes are sampled with the same seed, so identical meshes give
    identical samples (CD 0, F-scores 1).
    """
    rec_s = sample_surface(recon, n_eval, seed)
    gt_s = sample_surface(gt, n_eval, seed)
    return evaluate_samples(rec_s, gt_s)


@dataclass(frozen=True)
class RdPoint:
    label: str
    ratio: float
    metrics: MetricsRecord

    def __post_init__(self):
        if not self.ratio > 0:
            raise MetricsError("compression ratio must be positive")


RD_HEADER = ["label", "ratio", "cd", "nc", "f1_005", "f1_01"]
SHAPE_HEADER = ["label", "shape_id", "cd", "nc", "f1_005", "f1_01"]


def emit_rd(points: Sequence[RdPoint], path) -> None:
    if not points:
        raise MetricsError("no rate-distortion points to write")
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RD_HEADER)
        for p in sorted(points, key=lambda p: p.ratio):
            w.writerow([p.label, repr(p.ratio)] + [repr(v) for v in p.metrics.row()])


def read_rd(path) -> List[RdPoint]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        RdPoint(r["label"], float(r["ratio"]),
                MetricsRecord(float(r["cd"]), float(r["nc"]), float(r["f1_005"]), float(r["f1_01"])))
        for r in rows
    ]


def emit_shape_metrics(label: str, records: Iterable[Tuple[str, MetricsRecord]], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SHAPE_HEADER)
        for shape_id, rec in records:
            w.writerow([label, shape_id] + [repr(v) for v in rec.row()])
