"""Global and lesion-wise segmentation metrics.

Surfaces are border voxels: foreground voxels with at least one
6-neighbour in the background or on the edge of the volume. All distances
are exact Euclidean distances in mm. Every computation is cropped to the
bounding box of the inputs (plus a one-voxel margin), which leaves results
unchanged because surfaces never reach the margin.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .taskspec import TaskSpec, region_array
from .volio import LABEL, Volume, check_geometry

HD95_UNDEFINED = math.inf
"""Sentinel returned by :func:`boundary_hd95` when exactly one mask is empty."""
SENTINEL_TEXT = "undefined-penalty"

METRIC_NAMES = ("lw_dice", "lw_nsd", "dice_global", "nsd_global", "hd95")
HIGHER_BETTER = "higher-better"
LOWER_BETTER = "lower-better"
DIRECTIONS = {
    "lw_dice": HIGHER_BETTER,
    "lw_nsd": HIGHER_BETTER,
    "dice_global": HIGHER_BETTER,
    "nsd_global": HIGHER_BETTER,
    "hd95": LOWER_BETTER,
}
_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}
# guards the tau comparison against last-bit differences between distance routes
_DIST_EPS = 1e-9


class GeometryMismatchError(ValueError):
    pass


def _structure(connectivity: int) -> np.ndarray:
    try:
        return ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])
    except KeyError:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}") from None


def _as_bool(a) -> np.ndarray:
    return np.asarray(a.data if isinstance(a, Volume) else a).astype(bool, copy=False)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise GeometryMismatchError(f"dims differ: {a.shape} vs {b.shape}")


def _bbox(mask: np.ndarray, margin: int = 0) -> tuple[slice, ...] | None:
    if not mask.any():
        return None
    out = []
    for ax in range(3):
        other = tuple(i for i in range(3) if i != ax)
        hit = np.flatnonzero(mask.any(axis=other))
        out.append(slice(max(hit[0] - margin, 0), min(hit[-1] + 1 + margin, mask.shape[ax])))
    return tuple(out)


# ---------------------------------------------------------------------------
# connected components and dilation


@dataclass(frozen=True)
class ComponentLabels:
    labels: np.ndarray
    n_components: int
    voxel_counts: tuple[int, ...]
    connectivity: int


def connected_components(mask, connectivity: int = 26) -> ComponentLabels:
    """Label components; ids ascend with each component's first voxel in x-fastest order."""
    arr = _as_bool(mask)
    # ndimage scans C-order; on the transposed view that is x-fastest
    lab_t, n = ndimage.label(arr.T, structure=_structure(connectivity))
    flat = lab_t.ravel()
    if n:
        nz = flat[np.flatnonzero(flat)]
        ids, first = np.unique(nz, return_index=True)
        order = ids[np.argsort(first, kind="stable")]
        lut = np.zeros(n + 1, dtype=np.int32)
        lut[order] = np.arange(1, n + 1, dtype=np.int32)
        if not np.array_equal(order, ids):
            lab_t = lut[lab_t]
        counts = np.bincount(lab_t.ravel(), minlength=n + 1)[1:]
    else:
        counts = np.zeros(0, dtype=np.int64)
    labels = np.ascontiguousarray(lab_t.T).astype(np.int32, copy=False)
    return ComponentLabels(labels, int(n), tuple(int(c) for c in counts), connectivity)


def dilate_mask(mask, radius_voxels: int):
    """Chebyshev (cube) dilation. Accepts arrays or Volumes and returns the same type."""
    if radius_voxels < 0:
        raise ValueError("radius must be >= 0")
    arr = _as_bool(mask)
    out = arr.copy()
    if radius_voxels > 0:
        box = _bbox(arr, margin=radius_voxels)
        if box is not None:
            out[box] = ndimage.maximum_filter(arr[box].view(np.uint8), size=2 * radius_voxels + 1, mode="constant", cval=0) > 0
    if isinstance(mask, Volume):
        return mask.with_data(out)
    return out


# ---------------------------------------------------------------------------
# overlap and surface distances


def overlap_dice(a, b) -> float:
    a, b = _as_bool(a), _as_bool(b)
    _same_shape(a, b)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


def border_voxels(mask: np.ndarray) -> np.ndarray:
    eroded = ndimage.binary_erosion(mask, structure=_structure(6), border_value=0)
    return mask & ~eroded


def surface_distances(a, b, spacing: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Directed distances (mm) from each border voxel of ``a`` to ``b``'s border, and back.

    Both masks must be nonempty.
    """
    a, b = _as_bool(a), _as_bool(b)
    _same_shape(a, b)
    box = _bbox(a | b, margin=1)
    if box is None or not a.any() or not b.any():
        raise ValueError("surface_distances needs two nonempty masks")
    ba, bb = border_voxels(a[box]), border_voxels(b[box])
    spacing = tuple(float(s) for s in spacing)
    dt_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    dt_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    return dt_b[ba], dt_a[bb]


def boundary_nsd(a, b, spacing: Sequence[float], tau: float = 1.0) -> float:
    if tau <= 0:
        raise ValueError("tau must be > 0")
    a, b = _as_bool(a), _as_bool(b)
    _same_shape(a, b)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 1.0
    if ea or eb:
        return 0.0
    d_ab, d_ba = surface_distances(a, b, spacing)
    hits = int((d_ab <= tau + _DIST_EPS).sum()) + int((d_ba <= tau + _DIST_EPS).sum())
    return hits / (d_ab.size + d_ba.size)


def boundary_hd95(a, b, spacing: Sequence[float]) -> float:
    """95th percentile of pooled symmetric border distances; inf if exactly one mask is empty."""
    a, b = _as_bool(a), _as_bool(b)
    _same_shape(a, b)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return HD95_UNDEFINED
    d_ab, d_ba = surface_distances(a, b, spacing)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


# ---------------------------------------------------------------------------
# lesion-wise protocol


@dataclass(frozen=True)
class LesionMatching:
    ref_lesions: tuple[int, ...]
    matched_pred: dict[int, frozenset[int]]
    unmatched_pred: frozenset[int]
    dilation_radius_voxels: int
    ref_components: ComponentLabels = field(repr=False)
    pred_components: ComponentLabels = field(repr=False)


def match_lesions(ref_mask, pred_mask, connectivity: int = 26, dilation_radius: int = 3) -> LesionMatching:
    """Assign each predicted component to the dilated reference lesion it overlaps most."""
    ref, pred = _as_bool(ref_mask), _as_bool(pred_mask)
    _same_shape(ref, pred)
    rc = connected_components(ref, connectivity)
    pc = connected_components(pred, connectivity)
    # overlap[i, j]: voxels of pred component j+1 inside dilated ref lesion i+1
    overlap = np.zeros((rc.n_components, pc.n_components), dtype=np.int64)
    if rc.n_components and pc.n_components:
        objects = ndimage.find_objects(rc.labels)
        for i, sl in enumerate(objects):
            box = tuple(
                slice(max(s.start - dilation_radius, 0), min(s.stop + dilation_radius, n))
                for s, n in zip(sl, ref.shape)
            )
            lesion = rc.labels[box] == i + 1
            if dilation_radius:
                lesion = ndimage.maximum_filter(lesion.view(np.uint8), size=2 * dilation_radius + 1, mode="constant", cval=0) > 0
            hits = pc.labels[box][lesion]
            overlap[i] = np.bincount(hits, minlength=pc.n_components + 1)[1:]
    matched: dict[int, set[int]] = {i + 1: set() for i in range(rc.n_components)}
    unmatched = set()
    for j in range(pc.n_components):
        col = overlap[:, j] if rc.n_components else np.zeros(0)
        if col.size and col.max() > 0:
            matched[int(np.argmax(col)) + 1].add(j + 1)  # argmax keeps the lowest id on ties
        else:
            unmatched.add(j + 1)
    return LesionMatching(
        ref_lesions=tuple(range(1, rc.n_components + 1)),
        matched_pred={k: frozenset(v) for k, v in matched.items()},
        unmatched_pred=frozenset(unmatched),
        dilation_radius_voxels=dilation_radius,
        ref_components=rc,
        pred_components=pc,
    )


def lesion_scores(
    ref_mask,
    pred_mask,
    spacing: Sequence[float],
    metrics: Iterable[str] = ("dice", "nsd"),
    tau: float = 1.0,
    connectivity: int = 26,
    dilation_radius: int = 3,
    min_lesion_voxels: int = 0,
) -> dict[str, float]:
    """Lesion-wise mean of each requested metric (``dice`` and/or ``nsd``).

    Each reference lesion is scored against the union of its matched
    predicted components; every unmatched predicted component adds a 0.
    Lesions and false-positive components below ``min_lesion_voxels`` are
    left out of the mean.
    """
    metrics = tuple(metrics)
    ref, pred = _as_bool(ref_mask), _as_bool(pred_mask)
    _same_shape(ref, pred)
    m = match_lesions(ref, pred, connectivity, dilation_radius)
    rc, pc = m.ref_components, m.pred_components
    scores: dict[str, list[float]] = {k: [] for k in metrics}
    ref_objs = ndimage.find_objects(rc.labels)
    pred_objs = ndimage.find_objects(pc.labels) if pc.n_components else []
    for lesion in m.ref_lesions:
        if rc.voxel_counts[lesion - 1] < min_lesion_voxels:
            continue
        comps = sorted(m.matched_pred[lesion])
        sl = ref_objs[lesion - 1]
        lo = [s.start for s in sl]
        hi = [s.stop for s in sl]
        for j in comps:
            for ax, s in enumerate(pred_objs[j - 1]):
                lo[ax] = min(lo[ax], s.start)
                hi[ax] = max(hi[ax], s.stop)
        box = tuple(slice(max(l - 1, 0), min(h + 1, n)) for l, h, n in zip(lo, hi, ref.shape))
        r = rc.labels[box] == lesion
        p = np.isin(pc.labels[box], comps) if comps else np.zeros_like(r)
        for k in metrics:
            if k == "dice":
                scores[k].append(overlap_dice(r, p))
            elif k == "nsd":
                scores[k].append(boundary_nsd(r, p, spacing, tau))
            else:
                raise ValueError(f"unknown lesion-wise metric {k!r}")
    n_fp = sum(1 for j in m.unmatched_pred if pc.voxel_counts[j - 1] >= min_lesion_voxels)
    out = {}
    for k in metrics:
        vals = scores[k] + [0.0] * n_fp
        out[k] = float(np.mean(vals)) if vals else 1.0
    return out


def lesion_wise_metric(
    ref_mask,
    pred_mask,
    metric: str,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    tau: float = 1.0,
    connectivity: int = 26,
    dilation_radius: int = 3,
    min_lesion_voxels: int = 0,
) -> float:
    return lesion_scores(
        ref_mask, pred_mask, spacing, (metric,), tau, connectivity, dilation_radius, min_lesion_voxels
    )[metric]


# ---------------------------------------------------------------------------
# case evaluation and tables


@dataclass(frozen=True)
class MetricParams:
    metrics: tuple[str, ...] = METRIC_NAMES
    tau: float = 1.0
    connectivity: int = 26
    dilation_radius: int = 3
    min_lesion_voxels: int = 0

    def __post_init__(self) -> None:
        unknown = set(self.metrics) - set(METRIC_NAMES)
        if unknown:
            raise ValueError(f"unknown metrics {sorted(unknown)}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        _structure(self.connectivity)

    def to_json(self) -> dict:
        return {
            "metrics": list(self.metrics),
            "tau": self.tau,
            "connectivity": self.connectivity,
            "dilation_radius": self.dilation_radius,
            "min_lesion_voxels": self.min_lesion_voxels,
        }


def region_metrics(ref: np.ndarray, pred: np.ndarray, spacing, params: MetricParams) -> dict[str, float]:
    """All configured metrics for one pair of binary region masks."""
    out: dict[str, float] = {}
    lw = [k for k in ("dice", "nsd") if f"lw_{k}" in params.metrics]
    if lw:
        s = lesion_scores(
            ref, pred, spacing, lw, params.tau, params.connectivity, params.dilation_radius, params.min_lesion_voxels
        )
        out.update({f"lw_{k}": v for k, v in s.items()})
    if "dice_global" in params.metrics:
        out["dice_global"] = overlap_dice(ref, pred)
    if "nsd_global" in params.metrics:
        out["nsd_global"] = boundary_nsd(ref, pred, spacing, params.tau)
    if "hd95" in params.metrics:
        out["hd95"] = boundary_hd95(ref, pred, spacing)
    return {k: out[k] for k in params.metrics}


@dataclass(frozen=True)
class MetricRow:
    case_id: str
    candidate_id: str
    region: str
    metric: str
    value: float


def evaluate_case(
    ref: Volume,
    pred: Volume,
    spec: TaskSpec,
    params: MetricParams | None = None,
    case_id: str = "case",
    candidate_id: str = "candidate",
) -> list[MetricRow]:
    params = params or MetricParams()
    if ref.kind != LABEL or pred.kind != LABEL:
        raise ValueError("evaluate_case needs label volumes")
    geo = check_geometry([ref, pred])
    if not geo.consistent:
        raise GeometryMismatchError(f"case {case_id}: " + "; ".join(geo.messages))
    rows = []
    for region in spec.region_names:
        vals = region_metrics(region_array(ref.data, region, spec), region_array(pred.data, region, spec), ref.spacing, params)
        rows.extend(MetricRow(case_id, candidate_id, region, k, v) for k, v in vals.items())
    return rows


class CachedEvaluator:
    """Evaluates predictions against fixed references, memoizing per region mask.

    Post-processing searches re-score many near-identical volumes; a region
    whose predicted mask did not change is served from the cache.
    """

    def __init__(self, spec: TaskSpec, params: MetricParams):
        self.spec = spec
        self.params = params
        self._refs: dict[str, tuple[Volume, dict[str, np.ndarray]]] = {}
        self._cache: dict[tuple[str, str, bytes], dict[str, float]] = {}

    def add_reference(self, case_id: str, ref: Volume) -> None:
        masks = {r: region_array(ref.data, r, self.spec) for r in self.spec.region_names}
        self._refs[case_id] = (ref, masks)

    def evaluate(self, case_id: str, pred: np.ndarray, candidate_id: str = "candidate") -> list[MetricRow]:
        ref, masks = self._refs[case_id]
        if pred.shape != ref.dims:
            raise GeometryMismatchError(f"case {case_id}: dims differ {pred.shape} vs {ref.dims}")
        rows = []
        for region in self.spec.region_names:
            p = region_array(pred, region, self.spec)
            key = (case_id, region, hashlib.blake2b(np.packbits(p).tobytes(), digest_size=16).digest())
            vals = self._cache.get(key)
            if vals is None:
                vals = region_metrics(masks[region], p, ref.spacing, self.params)
                self._cache[key] = vals
            rows.extend(MetricRow(case_id, candidate_id, region, k, v) for k, v in vals.items())
        return rows


def _fmt(v: float) -> str:
    return SENTINEL_TEXT if not math.isfinite(v) else repr(float(v))


def _parse(s) -> float:
    if s is None or s == SENTINEL_TEXT:
        return HD95_UNDEFINED
    return float(s)


@dataclass
class MetricTable:
    """Long-format metric rows for one or more candidates."""

    rows: list[MetricRow] = field(default_factory=list)

    COLUMNS = ("case_id", "candidate_id", "region", "metric", "value")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def candidates(self) -> list[str]:
        return sorted({r.candidate_id for r in self.rows})

    @property
    def cases(self) -> list[str]:
        return sorted({r.case_id for r in self.rows})

    def for_candidate(self, candidate_id: str) -> "MetricTable":
        return MetricTable([r for r in self.rows if r.candidate_id == candidate_id])

    def renamed(self, candidate_id: str) -> "MetricTable":
        return MetricTable([MetricRow(r.case_id, candidate_id, r.region, r.metric, r.value) for r in self.rows])

    def cells(self) -> dict[tuple[str, str, str], float]:
        out = {}
        for r in self.rows:
            key = (r.case_id, r.region, r.metric)
            if key in out:
                raise ValueError(f"duplicate row for {key} ({r.candidate_id})")
            out[key] = r.value
        return out

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r.case_id, r.candidate_id, r.region, r.metric, _fmt(r.value)])

    def to_json(self, path: str | Path, provenance: dict | None = None) -> None:
        """Write rows as JSON; with ``provenance`` the file is ``{"provenance", "rows"}``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload: list | dict = [
            {
                "case_id": r.case_id,
                "candidate_id": r.candidate_id,
                "region": r.region,
                "metric": r.metric,
                "value": r.value if math.isfinite(r.value) else None,
            }
            for r in self.rows
        ]
        if provenance is not None:
            payload = {"provenance": provenance, "rows": payload}
        path.write_text(json.dumps(payload, indent=0) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "MetricTable":
        path = Path(path)
        if path.suffix.lower() == ".json":
            payload = json.loads(path.read_text())
            if isinstance(payload, dict):
                payload = payload["rows"]
            return cls([MetricRow(d["case_id"], d["candidate_id"], d["region"], d["metric"], _parse(d["value"])) for d in payload])
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != cls.COLUMNS:
                raise ValueError(f"{path}: expected columns {cls.COLUMNS}, got {reader.fieldnames}")
            return cls([MetricRow(d["case_id"], d["candidate_id"], d["region"], d["metric"], _parse(d["value"])) for d in reader])
