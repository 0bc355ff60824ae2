"""Cluster-adaptive post-processing.

Two learned steps, applied in this order:

* small-component removal: per (cluster, label), connected components of
  that label smaller than a voxel threshold become background;
* label redefinition: per (cluster, x -> y) rule, when the predicted
  volume of label x over the whole-tumor volume is below a ratio
  threshold, every x voxel becomes y.

Thresholds come from grid searches scored by the rank objective: every grid
value is one candidate, ranked against the others on the cell's cases.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .features import FeatureError, FeatureVector, extract_first_order_features, extract_shape_features, merge_features
from .metrics import DIRECTIONS, METRIC_NAMES, CachedEvaluator, MetricParams, MetricTable, connected_components
from .ranker import compute_rank_scores
from .stratify import StratifierModel, nearest_cluster
from .taskspec import TaskSpec, region_array
from .volio import Volume

log = logging.getLogger(__name__)

CC_GRID = tuple(range(0, 501, 25))
RATIO_GRID = tuple(round(0.01 * i, 2) for i in range(26))
RANK_METRICS = ("lw_dice", "lw_nsd")


# ---------------------------------------------------------------------------
# policy


@dataclass(frozen=True)
class RedefRule:
    cluster: int
    label_x: str
    label_y: str
    ratio_threshold: float


@dataclass
class PPPolicy:
    cc_thresholds: dict[tuple[int, str], int] = field(default_factory=dict)
    redef_rules: list[RedefRule] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "cc_thresholds": [
                {"cluster": c, "label": lbl, "min_voxels": t} for (c, lbl), t in sorted(self.cc_thresholds.items())
            ],
            "redef_rules": [
                {"cluster": r.cluster, "label_x": r.label_x, "label_y": r.label_y, "ratio_threshold": r.ratio_threshold}
                for r in self.redef_rules
            ],
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PPPolicy":
        return cls(
            cc_thresholds={(int(e["cluster"]), e["label"]): int(e["min_voxels"]) for e in d.get("cc_thresholds", [])},
            redef_rules=[
                RedefRule(int(e["cluster"]), e["label_x"], e["label_y"], float(e["ratio_threshold"]))
                for e in d.get("redef_rules", [])
            ],
            provenance=d.get("provenance", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PPPolicy":
        return cls.from_json(json.loads(Path(path).read_text()))

    def clusters(self) -> set[int]:
        return {c for c, _ in self.cc_thresholds} | {r.cluster for r in self.redef_rules}


# ---------------------------------------------------------------------------
# transforms


def filter_components(labels: np.ndarray, code: int, min_voxels: int, connectivity: int = 26) -> np.ndarray:
    """Set components of ``code`` with fewer than ``min_voxels`` voxels to background."""
    if min_voxels < 0:
        raise ValueError("min_voxels must be >= 0")
    labels = np.asarray(labels)
    if min_voxels == 0:
        return labels
    mask = labels == code
    if not mask.any():
        return labels
    cc = connected_components(mask, connectivity)
    small = np.flatnonzero(np.asarray(cc.voxel_counts) < min_voxels) + 1
    if not small.size:
        return labels
    out = labels.copy()
    out[np.isin(cc.labels, small)] = 0
    return out


def filter_label_volume(pred: Volume, label: str, min_voxels: int, spec: TaskSpec, connectivity: int = 26) -> Volume:
    return pred.with_data(filter_components(pred.data, spec.base_labels[label], min_voxels, connectivity))


def label_ratio(labels: np.ndarray, code: int, spec: TaskSpec) -> float | None:
    """Volume of ``code`` over predicted whole-tumor volume (None if WT is empty)."""
    wt = int(region_array(labels, spec.wt_region, spec).sum())
    if wt == 0:
        return None
    return int((labels == code).sum()) / wt


def redefine_label(labels: np.ndarray, code_x: int, code_y: int, threshold: float, spec: TaskSpec) -> np.ndarray:
    """Relabel every ``code_x`` voxel to ``code_y`` when its WT ratio is strictly below ``threshold``."""
    labels = np.asarray(labels)
    if threshold <= 0:
        return labels
    ratio = label_ratio(labels, code_x, spec)
    if ratio is None or ratio >= threshold or ratio == 0:
        return labels
    out = labels.copy()
    out[labels == code_x] = code_y
    return out


def apply_policy(
    pred: Volume, cluster: int, policy: PPPolicy, spec: TaskSpec, connectivity: int = 26
) -> tuple[Volume, list[str]]:
    """Run the cluster's component filters (label order) then its redefinition rules.

    Returns the processed volume and a log of the steps that changed voxels.
    """
    data = np.asarray(pred.data)
    applied = []
    if cluster not in policy.clusters():
        log.warning("no post-processing entries for cluster %s; prediction left unchanged", cluster)
    for label in spec.label_names:
        t = policy.cc_thresholds.get((cluster, label), 0)
        new = filter_components(data, spec.base_labels[label], t, connectivity)
        if new is not data and not np.array_equal(new, data):
            applied.append(f"cc:{label}<{t}")
        data = new
    for rule in policy.redef_rules:
        if rule.cluster != cluster:
            continue
        new = redefine_label(data, spec.base_labels[rule.label_x], spec.base_labels[rule.label_y], rule.ratio_threshold, spec)
        if new is not data:
            applied.append(f"redef:{rule.label_x}->{rule.label_y}<{rule.ratio_threshold}")
        data = new
    return pred.with_data(data), applied


# ---------------------------------------------------------------------------
# clustering of predictions


def prediction_features(
    pred: Volume, images: Mapping[str, Volume], spec: TaskSpec, case_id: str, bin_width: float = 25.0
) -> FeatureVector:
    """Same feature set as the training stratifier, from a (predicted or reference) label map."""
    wt = region_array(pred.data, spec.wt_region, spec)
    parts = [extract_shape_features(wt, pred.spacing, case_id)]
    for seq in sorted(images):
        parts.append(
            extract_first_order_features(images[seq], wt, bin_width, images[seq].spacing, case_id, prefix=f"{seq}_")
        )
    return merge_features(*parts)


def recluster_predictions(
    preds: Mapping[str, Volume],
    images: Mapping[str, Mapping[str, Volume]],
    stratifier: StratifierModel,
    spec: TaskSpec,
    extra_features: Mapping[str, FeatureVector] | None = None,
    bin_width: float = 25.0,
) -> dict[str, int]:
    """Nearest training cluster for each prediction; empty predictions fall back to cluster 0."""
    out = {}
    for case_id in sorted(preds):
        try:
            fv = prediction_features(preds[case_id], images.get(case_id, {}), spec, case_id, bin_width)
        except FeatureError:
            log.warning("case %s: empty prediction, assigned fallback cluster 0", case_id)
            out[case_id] = 0
            continue
        if extra_features and case_id in extra_features:
            fv = merge_features(fv, extra_features[case_id])
        out[case_id] = nearest_cluster(stratifier, fv)
    return out


# ---------------------------------------------------------------------------
# confusion


@dataclass(frozen=True)
class LabelConfusion:
    names: tuple[str, ...]  # "BG" then base labels
    support: np.ndarray  # raw counts, rows = reference, cols = predicted
    matrix: np.ndarray  # row-normalized
    empty_rows: tuple[str, ...]

    def to_csv(self, path: str | Path, comment: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["reference\\predicted", *self.names])
            for name, row in zip(self.names, self.matrix):
                w.writerow([name, *(f"{v:.6f}" for v in row)])

    def to_json(self) -> dict:
        return {
            "names": list(self.names),
            "matrix": self.matrix.tolist(),
            "support": self.support.tolist(),
            "empty_rows": list(self.empty_rows),
        }


def label_confusion(pairs: Sequence[tuple[Volume, Volume]], spec: TaskSpec) -> LabelConfusion:
    codes = [0, *spec.codes]
    names = ("BG", *spec.label_names)
    n = len(codes)
    lut = np.full(max(codes) + 1, -1, dtype=np.int64)
    lut[codes] = np.arange(n)
    counts = np.zeros((n, n), dtype=np.int64)
    for ref, pred in pairs:
        if ref.dims != pred.dims:
            raise ValueError(f"dims differ: {ref.dims} vs {pred.dims}")
        r = lut[np.asarray(ref.data).ravel()]
        p = lut[np.asarray(pred.data).ravel()]
        if (r < 0).any() or (p < 0).any():
            raise ValueError("undeclared label code in confusion input")
        counts += np.bincount(r * n + p, minlength=n * n).reshape(n, n)
    rows = counts.sum(axis=1, keepdims=True)
    matrix = np.divide(counts, rows, out=np.zeros((n, n)), where=rows > 0)
    empty = tuple(names[i] for i in range(n) if rows[i, 0] == 0)
    return LabelConfusion(names, counts, matrix, empty)


def select_confusion_pairs(cm: LabelConfusion, min_offdiag: float = 0.10) -> list[tuple[str, str]]:
    """Redefinition candidates ``(x, y)``: predicted x that is frequently reference y.

    An entry ``cm[y][x]`` (reference y predicted as x) at or above
    ``min_offdiag`` yields the corrective rule x -> y. Background is never
    involved on either side. Ordered by descending confusion mass.
    """
    found = []
    for i, ref_name in enumerate(cm.names):
        for j, pred_name in enumerate(cm.names):
            if i == j or i == 0 or j == 0:
                continue
            mass = float(cm.matrix[i, j])
            if mass >= min_offdiag:
                found.append((mass, pred_name, ref_name))
    found.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [(x, y) for _, x, y in found]


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class TrainingCase:
    case_id: str
    reference: Volume
    prediction: Volume
    cluster: int


class _Objective:
    """Scores alternative corpora of predicted label arrays by rank F (or mean metric)."""

    def __init__(self, spec: TaskSpec, params: MetricParams, rank_metrics: Sequence[str], objective: str = "rank"):
        self.spec = spec
        self.params = params
        self.rank_metrics = tuple(rank_metrics)
        self.objective = objective
        needed = set(self.rank_metrics) | {"lw_dice"}
        eval_params = replace(params, metrics=tuple(m for m in METRIC_NAMES if m in needed))
        self.evaluator = CachedEvaluator(spec, eval_params)
        self._refs: set[str] = set()

    def table(self, cases: Sequence[TrainingCase], arrays: Sequence[np.ndarray], candidate: str) -> MetricTable:
        rows = []
        for c, arr in zip(cases, arrays):
            if c.case_id not in self._refs:
                self.evaluator.add_reference(c.case_id, c.reference)
                self._refs.add(c.case_id)
            rows.extend(r for r in self.evaluator.evaluate(c.case_id, arr, candidate) if r.metric in self.rank_metrics)
        return MetricTable(rows)

    def scores(self, tables: Mapping[str, MetricTable]) -> dict[str, float]:
        """Lower is better for both objectives."""
        if self.objective == "rank":
            return {s.candidate_id: s.F for s in compute_rank_scores(tables, DIRECTIONS, metrics=self.rank_metrics)}
        if self.objective == "mean_lw_dice":
            out = {}
            for name, t in tables.items():
                vals = [r.value for r in t.rows if r.metric == "lw_dice"]
                out[name] = -float(np.mean(vals))
            return out
        raise ValueError(f"unknown objective {self.objective!r}")


def _grid_search(
    objective: _Objective,
    cases: Sequence[TrainingCase],
    current: Sequence[np.ndarray],
    grid: Sequence,
    transform: Callable[[np.ndarray, object], np.ndarray],
) -> tuple[object, dict, list[np.ndarray]]:
    """Evaluate every grid value as a candidate; smallest best value wins ties."""
    variants: dict = {}
    tables: dict[str, MetricTable] = {}
    names = []
    for g in grid:
        arrays = [transform(a, g) for a in current]
        name = f"{len(names):04d}"
        names.append(name)
        variants[name] = (g, arrays)
        tables[name] = objective.table(cases, arrays, name)
    scores = objective.scores(tables)
    best_name = names[0]
    for name in names[1:]:
        if scores[name] < scores[best_name]:
            best_name = name
    g, arrays = variants[best_name]
    return g, {str(variants[n][0]): scores[n] for n in names}, arrays


def _clusters(cases: Sequence[TrainingCase]) -> list[int]:
    return sorted({c.cluster for c in cases})


def optimize_cc(
    cases: Sequence[TrainingCase],
    spec: TaskSpec,
    grid: Sequence[int] = CC_GRID,
    params: MetricParams | None = None,
    rank_metrics: Sequence[str] = RANK_METRICS,
    objective: str = "rank",
    _objective: _Objective | None = None,
) -> tuple[dict[tuple[int, str], int], dict, list[np.ndarray]]:
    """Per-cluster, per-label component-size thresholds.

    Labels are optimized one after another in declared order, each with the
    earlier labels' chosen thresholds already applied. Returns thresholds,
    per-cell grid scores, and the filtered prediction arrays (case order).
    """
    params = params or MetricParams()
    obj = _objective or _Objective(spec, params, rank_metrics, objective)
    grid = sorted(set(int(g) for g in grid))
    if grid[0] != 0:
        grid = [0, *grid]  # identity must stay reachable
    current = [np.asarray(c.prediction.data) for c in cases]
    thresholds: dict[tuple[int, str], int] = {}
    cell_scores: dict = {}
    for cluster in _clusters(cases):
        idx = [i for i, c in enumerate(cases) if c.cluster == cluster]
        sub = [cases[i] for i in idx]
        for label in spec.label_names:
            code = spec.base_labels[label]
            arrays = [current[i] for i in idx]
            # components are computed once per case, then thresholds just select sets
            cc = [connected_components(a == code, params.connectivity) for a in arrays]
            sizes = [np.asarray(c.voxel_counts) for c in cc]
            memo: dict[tuple[int, tuple[int, ...]], np.ndarray] = {}

            def transform(a: np.ndarray, t, _arrays=arrays, _cc=cc, _sizes=sizes, _memo=memo) -> np.ndarray:
                k = next(i for i, x in enumerate(_arrays) if x is a)
                small = tuple(np.flatnonzero(_sizes[k] < t) + 1)
                key = (k, small)
                if key not in _memo:
                    if not small:
                        _memo[key] = a
                    else:
                        out = a.copy()
                        out[np.isin(_cc[k].labels, small)] = 0
                        _memo[key] = out
                return _memo[key]

            best, scores, filtered = _grid_search(obj, sub, arrays, grid, transform)
            thresholds[(cluster, label)] = int(best)
            cell_scores[f"{cluster}:{label}"] = scores
            for i, arr in zip(idx, filtered):
                current[i] = arr
    return thresholds, cell_scores, current


def optimize_redef(
    cases: Sequence[TrainingCase],
    pairs: Sequence[tuple[str, str]],
    spec: TaskSpec,
    ratio_grid: Sequence[float] = RATIO_GRID,
    params: MetricParams | None = None,
    rank_metrics: Sequence[str] = RANK_METRICS,
    objective: str = "rank",
    _objective: _Objective | None = None,
) -> tuple[list[RedefRule], dict, list[np.ndarray]]:
    """Per-cluster ratio thresholds for each ``(x, y)`` redefinition pair.

    Pairs are searched in the given order, each on the output of the
    previous ones. Only rules with a threshold above 0 are returned.
    """
    params = params or MetricParams()
    obj = _objective or _Objective(spec, params, rank_metrics, objective)
    grid = sorted(set(float(g) for g in ratio_grid))
    if grid[0] != 0.0:
        grid = [0.0, *grid]
    current = [np.asarray(c.prediction.data) for c in cases]
    rules: list[RedefRule] = []
    cell_scores: dict = {}
    for cluster in _clusters(cases):
        idx = [i for i, c in enumerate(cases) if c.cluster == cluster]
        sub = [cases[i] for i in idx]
        for x, y in pairs:
            cx, cy = spec.base_labels[x], spec.base_labels[y]
            arrays = [current[i] for i in idx]
            memo: dict[tuple[int, bool], np.ndarray] = {}
            ratios = [label_ratio(a, cx, spec) for a in arrays]

            def transform(a: np.ndarray, t, _arrays=arrays, _memo=memo, _ratios=ratios, _cx=cx, _cy=cy) -> np.ndarray:
                k = next(i for i, z in enumerate(_arrays) if z is a)
                r = _ratios[k]
                hit = r is not None and 0 < r < t
                key = (k, hit)
                if key not in _memo:
                    if hit:
                        out = a.copy()
                        out[a == _cx] = _cy
                        _memo[key] = out
                    else:
                        _memo[key] = a
                return _memo[key]

            best, scores, out = _grid_search(obj, sub, arrays, grid, transform)
            cell_scores[f"{cluster}:{x}->{y}"] = scores
            if best > 0:
                rules.append(RedefRule(cluster, x, y, float(best)))
            for i, arr in zip(idx, out):
                current[i] = arr
    return rules, cell_scores, current


def corpus_tables(
    cases: Sequence[TrainingCase],
    corpora: Mapping[str, Sequence[np.ndarray]],
    spec: TaskSpec,
    params: MetricParams,
    rank_metrics: Sequence[str] = RANK_METRICS,
    _objective: _Objective | None = None,
) -> tuple[dict[str, MetricTable], _Objective]:
    obj = _objective or _Objective(spec, params, rank_metrics)
    return {name: obj.table(cases, arrays, name) for name, arrays in corpora.items()}, obj


def learn_policy(
    cases: Sequence[TrainingCase],
    spec: TaskSpec,
    params: MetricParams | None = None,
    cc_grid: Sequence[int] = CC_GRID,
    ratio_grid: Sequence[float] = RATIO_GRID,
    min_offdiag: float = 0.10,
    rank_metrics: Sequence[str] = RANK_METRICS,
    objective: str = "rank",
    seed: int | None = None,
) -> tuple[PPPolicy, LabelConfusion]:
    """PP1 search, confusion analysis, PP2 search; provenance records F before/after.

    The before/after F is the two-candidate rank of the untouched predictions
    against the policy's output over the whole training corpus.
    """
    params = params or MetricParams()
    obj = _Objective(spec, params, rank_metrics, objective)
    cc, cc_scores, after_cc = optimize_cc(cases, spec, cc_grid, params, rank_metrics, objective, _objective=obj)
    pp1_cases = [
        TrainingCase(c.case_id, c.reference, c.prediction.with_data(a), c.cluster) for c, a in zip(cases, after_cc)
    ]
    cm = label_confusion([(c.reference, c.prediction) for c in pp1_cases], spec)
    pairs = select_confusion_pairs(cm, min_offdiag)
    rules: list[RedefRule] = []
    redef_scores: dict = {}
    final = after_cc
    if pairs:
        rules, redef_scores, final = optimize_redef(
            pp1_cases, pairs, spec, ratio_grid, params, rank_metrics, objective, _objective=obj
        )
    before = [np.asarray(c.prediction.data) for c in cases]
    tables = {"before": obj.table(cases, before, "before"), "after": obj.table(cases, final, "after")}
    F = {s.candidate_id: s.F for s in compute_rank_scores(tables, DIRECTIONS, metrics=rank_metrics)}
    means = {
        name: {
            region: float(np.mean([r.value for r in t.rows if r.region == region and r.metric == "lw_dice"]))
            for region in spec.region_names
        }
        for name, t in tables.items()
        if "lw_dice" in rank_metrics
    }
    policy = PPPolicy(
        cc_thresholds=cc,
        redef_rules=rules,
        provenance={
            "objective": objective,
            "rank_metrics": list(rank_metrics),
            "metric_params": params.to_json(),
            "cc_grid": list(sorted(set(int(g) for g in cc_grid) | {0})),
            "ratio_grid": list(sorted(set(float(g) for g in ratio_grid) | {0.0})),
            "min_offdiag": min_offdiag,
            "confusion_pairs": [list(p) for p in pairs],
            "clusters": _clusters(cases),
            "n_cases": len(cases),
            "case_clusters": {c.case_id: c.cluster for c in cases},
            "F_before": F["before"],
            "F_after": F["after"],
            "mean_lw_dice_before": means.get("before", {}),
            "mean_lw_dice_after": means.get("after", {}),
            "cc_cell_scores": cc_scores,
            "redef_cell_scores": redef_scores,
            "seed": seed,
        },
    )
    return policy, cm


def replay_F(policy: PPPolicy, cases: Sequence[TrainingCase], spec: TaskSpec) -> tuple[float, float]:
    """Re-apply a saved policy to its training corpus and recompute (F_before, F_after)."""
    prov = policy.provenance
    mp = dict(prov.get("metric_params", {}))
    if "metrics" in mp:
        mp["metrics"] = tuple(mp["metrics"])
    params = MetricParams(**mp)
    metrics = list(prov.get("rank_metrics", RANK_METRICS))
    after = [np.asarray(apply_policy(c.prediction, c.cluster, policy, spec, params.connectivity)[0].data) for c in cases]
    before = [np.asarray(c.prediction.data) for c in cases]
    tables, _ = corpus_tables(cases, {"before": before, "after": after}, spec, params, metrics)
    F = {s.candidate_id: s.F for s in compute_rank_scores(tables, DIRECTIONS, metrics=metrics)}
    return F["before"], F["after"]


def write_threshold_summary(policy: PPPolicy, path: str | Path, comment: str = "") -> None:
    """Flat CSV of learned thresholds (one row per cluster and rule)."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["step", "cluster", "label", "target", "threshold"])
        for (c, lbl), t in sorted(policy.cc_thresholds.items()):
            w.writerow(["cc_filter", c, lbl, "", t])
        for r in policy.redef_rules:
            w.writerow(["label_redef", r.cluster, r.label_x, r.label_y, r.ratio_threshold])
