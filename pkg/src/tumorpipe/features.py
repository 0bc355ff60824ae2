"""Radiomic features from a whole-tumor mask: 3D shape and first-order intensity.

Definitions follow the PyRadiomics shape and first-order classes. Mesh
quantities use a marching-cubes surface at iso-level 0.5 on the zero-padded
mask, in mm via the voxel spacing.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist
from skimage.measure import marching_cubes

log = logging.getLogger(__name__)

SHAPE_FEATURES = (
    "VoxelVolume",
    "MeshVolume",
    "SurfaceArea",
    "SurfaceVolumeRatio",
    "Sphericity",
    "Maximum3DDiameter",
    "Maximum2DDiameterSlice",
    "Maximum2DDiameterColumn",
    "Maximum2DDiameterRow",
    "MajorAxisLength",
    "MinorAxisLength",
    "LeastAxisLength",
    "Elongation",
    "Flatness",
)

FIRST_ORDER_FEATURES = (
    "Energy",
    "TotalEnergy",
    "Entropy",
    "Minimum",
    "10Percentile",
    "90Percentile",
    "Maximum",
    "Mean",
    "Median",
    "InterquartileRange",
    "Range",
    "MeanAbsoluteDeviation",
    "RobustMeanAbsoluteDeviation",
    "RootMeanSquared",
    "Skewness",
    "Kurtosis",
    "Variance",
    "Uniformity",
)


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    case_id: str
    names: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.names) != len(self.values):
            raise FeatureError(f"{self.case_id}: {len(self.names)} names vs {len(self.values)} values")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values))


def _max_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    if len(points) > 64:
        try:
            points = points[ConvexHull(points).vertices]
        except QhullError:
            pass  # degenerate (coplanar/collinear) sets fall back to brute force
    return float(pdist(points).max())


def _max_planar_distance(verts: np.ndarray, axis: int) -> float:
    keep = [i for i in range(3) if i != axis]
    key = np.round(verts[:, axis], 6)
    best = 0.0
    for value in np.unique(key):
        pts = verts[key == value][:, keep]
        best = max(best, _max_distance(pts))
    return best


def mesh_geometry(mask: np.ndarray, spacing: Sequence[float]) -> tuple[float, float, np.ndarray]:
    """Marching-cubes mesh volume (mm^3), surface area (mm^2) and vertices (mm)."""
    padded = np.pad(mask.astype(np.float32), 1)
    verts, faces, _, _ = marching_cubes(padded, level=0.5, spacing=tuple(float(s) for s in spacing))
    tri = verts[faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum()
    # signed tetrahedra against the origin; abs() makes it orientation-agnostic
    volume = abs(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)
    return float(volume), float(area), verts


def extract_shape_features(wt_mask, spacing: Sequence[float], case_id: str = "") -> FeatureVector:
    """14 shape descriptors of a binary mask, in mm units."""
    mask = np.asarray(getattr(wt_mask, "data", wt_mask)).astype(bool)
    if not mask.any():
        raise FeatureError(f"{case_id or 'mask'}: empty mask, shape features undefined")
    spacing = np.asarray(spacing, dtype=float)
    n = int(mask.sum())
    voxel_volume = n * float(np.prod(spacing))
    mesh_volume, area, verts = mesh_geometry(mask, spacing)

    coords = np.argwhere(mask) * spacing
    if n > 1:
        eig = np.sort(np.linalg.eigvalsh(np.cov(coords, rowvar=False, bias=True)))
        eig = np.clip(eig, 0.0, None)
    else:
        eig = np.zeros(3)
    least, minor, major = eig
    feats = {
        "VoxelVolume": voxel_volume,
        "MeshVolume": mesh_volume,
        "SurfaceArea": area,
        "SurfaceVolumeRatio": area / mesh_volume,
        "Sphericity": (36 * math.pi * mesh_volume**2) ** (1 / 3) / area,
        "Maximum3DDiameter": _max_distance(verts),
        "Maximum2DDiameterSlice": _max_planar_distance(verts, axis=2),
        "Maximum2DDiameterColumn": _max_planar_distance(verts, axis=1),
        "Maximum2DDiameterRow": _max_planar_distance(verts, axis=0),
        "MajorAxisLength": 4 * math.sqrt(major),
        "MinorAxisLength": 4 * math.sqrt(minor),
        "LeastAxisLength": 4 * math.sqrt(least),
        # single-voxel / degenerate shapes: ratios fall back to 0
        "Elongation": math.sqrt(minor / major) if major > 0 else 0.0,
        "Flatness": math.sqrt(least / major) if major > 0 else 0.0,
    }
    return FeatureVector(case_id, SHAPE_FEATURES, tuple(float(feats[k]) for k in SHAPE_FEATURES))


def extract_first_order_features(
    image,
    wt_mask,
    bin_width: float = 25.0,
    spacing: Sequence[float] | None = None,
    case_id: str = "",
    prefix: str = "",
) -> FeatureVector:
    """18 first-order statistics of the intensities under ``wt_mask``.

    Skewness and kurtosis of a constant region are reported as 0.
    """
    img = np.asarray(getattr(image, "data", image), dtype=float)
    mask = np.asarray(getattr(wt_mask, "data", wt_mask)).astype(bool)
    if img.shape != mask.shape:
        raise FeatureError(f"{case_id}: image {img.shape} and mask {mask.shape} differ")
    if not mask.any():
        raise FeatureError(f"{case_id or 'mask'}: empty mask, first-order features undefined")
    if spacing is None:
        spacing = getattr(image, "spacing", (1.0, 1.0, 1.0))
    x = img[mask]
    n = x.size
    mean = x.mean()
    dev = x - mean
    m2 = np.mean(dev**2)
    m3 = np.mean(dev**3)
    m4 = np.mean(dev**4)
    constant = m2 <= 1e-12 * max(1.0, mean**2)
    if constant:
        log.debug("%s: constant intensities, skewness/kurtosis set to 0", case_id)
    p10, p25, p50, p75, p90 = np.percentile(x, [10, 25, 50, 75, 90])
    robust = x[(x >= p10) & (x <= p90)]

    bins = np.floor(x / bin_width) - np.floor(x.min() / bin_width)
    _, counts = np.unique(bins, return_counts=True)
    p = counts / n
    energy = float(np.sum(x**2))
    feats = {
        "Energy": energy,
        "TotalEnergy": energy * float(np.prod(spacing)),
        "Entropy": float(-np.sum(p * np.log2(p))),
        "Minimum": x.min(),
        "10Percentile": p10,
        "90Percentile": p90,
        "Maximum": x.max(),
        "Mean": mean,
        "Median": p50,
        "InterquartileRange": p75 - p25,
        "Range": x.max() - x.min(),
        "MeanAbsoluteDeviation": np.mean(np.abs(dev)),
        "RobustMeanAbsoluteDeviation": np.mean(np.abs(robust - robust.mean())),
        "RootMeanSquared": math.sqrt(energy / n),
        "Skewness": 0.0 if constant else m3 / m2**1.5,
        "Kurtosis": 0.0 if constant else m4 / m2**2,
        "Variance": m2,
        "Uniformity": float(np.sum(p**2)),
    }
    return FeatureVector(
        case_id,
        tuple(prefix + k for k in FIRST_ORDER_FEATURES),
        tuple(float(feats[k]) for k in FIRST_ORDER_FEATURES),
    )


def merge_features(*vectors: FeatureVector) -> FeatureVector:
    """Union by name; later vectors win on collisions (logged)."""
    if not vectors:
        raise ValueError("nothing to merge")
    case_id = vectors[0].case_id
    merged: dict[str, float] = {}
    for v in vectors:
        if v.case_id != case_id:
            raise FeatureError(f"merging features of {case_id} and {v.case_id}")
        clash = set(merged) & set(v.names)
        if clash:
            log.warning("%s: %d features overridden by later source (e.g. %s)", case_id, len(clash), sorted(clash)[0])
        merged.update(v.as_dict())
    return FeatureVector(case_id, tuple(merged), tuple(merged.values()))


def ingest_features_csv(path: str | Path) -> list[FeatureVector]:
    """Read ``case_id`` plus numeric feature columns. NaN or blank cells are errors.

    Lines starting with ``#`` are comments.
    """
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if not header or header[0] != "case_id":
            raise FeatureError(f"{path}: first column must be case_id")
        names = tuple(header[1:])
        if len(set(names)) != len(names):
            raise FeatureError(f"{path}: duplicate feature columns")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FeatureError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            case_id, cells = row[0], row[1:]
            values = []
            for name, cell in zip(names, cells):
                try:
                    v = float(cell)
                except ValueError:
                    raise FeatureError(f"{path}: case {case_id}, column {name}: not a number ({cell!r})") from None
                if not math.isfinite(v):
                    raise FeatureError(f"{path}: case {case_id}, column {name}: non-finite value")
                values.append(v)
            out.append(FeatureVector(case_id, names, tuple(values)))
    return out


def write_features_csv(vectors: Sequence[FeatureVector], path: str | Path, comment: str = "") -> None:
    if not vectors:
        raise ValueError("no feature vectors to write")
    names = vectors[0].names
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(("case_id",) + names)
        for v in vectors:
            if v.names != names:
                raise FeatureError(f"{v.case_id}: feature names differ from the first row")
            w.writerow((v.case_id,) + tuple(repr(x) for x in v.values))
