"""Case-wise rank aggregation of metric tables into one score per candidate.

For every (case, region, metric) cell the competing candidates are ranked
1..n (1 = best, ties share the mean of their positions). A candidate's
per-case rank is the mean over its (region, metric) cells and its score
``F`` is the mean of those over cases. Lower is better.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .metrics import DIRECTIONS, HIGHER_BETTER, LOWER_BETTER, MetricTable


class RankGridError(ValueError):
    """Candidates do not share an identical (case, region, metric) grid."""


@dataclass(frozen=True)
class RankScore:
    candidate_id: str
    F: float
    per_case_mean_rank: dict[str, float]
    n_candidates: int
    n_cases: int
    n_metric_region_pairs: int


def _cell_ranks(values: np.ndarray, direction: str) -> np.ndarray:
    """Rank one cell; non-finite values (sentinels) tie for last place."""
    finite = np.isfinite(values)
    keyed = -values if direction == HIGHER_BETTER else values.copy()
    worst = np.nanmax(np.where(finite, keyed, np.nan)) + 1.0 if finite.any() else 0.0
    keyed[~finite] = worst
    return rankdata(keyed, method="average")


def rank_matrix(
    tables: Mapping[str, MetricTable],
    directions: Mapping[str, str] | None = None,
    weights: Mapping[tuple[str, str], float] | Mapping[str, float] | None = None,
    metrics: Sequence[str] | None = None,
):
    """Return ``(candidates, cases, per_case_ranks[n_cand, n_case], n_pairs)``.

    ``weights`` may be keyed by metric name or by ``(region, metric)``;
    missing keys weigh 1.
    """
    directions = dict(DIRECTIONS if directions is None else directions)
    candidates = sorted(tables)
    if len(candidates) < 2:
        raise ValueError("ranking needs at least 2 candidates")
    grids = {}
    for c in candidates:
        cells = tables[c].cells()
        if metrics is not None:
            cells = {k: v for k, v in cells.items() if k[2] in metrics}
        grids[c] = cells
    keys = sorted(grids[candidates[0]])
    keyset = set(keys)
    for c in candidates[1:]:
        if set(grids[c]) != keyset:
            diff = sorted(keyset.symmetric_difference(grids[c]))[:5]
            raise RankGridError(f"candidate {c} covers a different grid (e.g. {diff})")
    if not keys:
        raise RankGridError("empty metric grid")
    for k in keys:
        if k[2] not in directions:
            raise ValueError(f"no direction declared for metric {k[2]!r}")
        if directions[k[2]] not in (HIGHER_BETTER, LOWER_BETTER):
            raise ValueError(f"bad direction {directions[k[2]]!r}")

    cases = sorted({k[0] for k in keys})
    case_idx = {c: i for i, c in enumerate(cases)}
    values = np.array([[grids[c][k] for k in keys] for c in candidates], dtype=float)
    rank_sum = np.zeros((len(candidates), len(cases)))
    weight_sum = np.zeros(len(cases))
    pairs = set()
    for j, (case, region, metric) in enumerate(keys):
        w = 1.0
        if weights:
            w = float(weights.get((region, metric), weights.get(metric, 1.0)))  # type: ignore[arg-type]
        ranks = _cell_ranks(values[:, j], directions[metric])
        rank_sum[:, case_idx[case]] += w * ranks
        weight_sum[case_idx[case]] += w
        pairs.add((region, metric))
    return candidates, cases, rank_sum / weight_sum, len(pairs)


def compute_rank_scores(
    tables: Mapping[str, MetricTable],
    directions: Mapping[str, str] | None = None,
    weights: Mapping | None = None,
    metrics: Sequence[str] | None = None,
) -> list[RankScore]:
    """Score each candidate table; result follows sorted candidate ids."""
    candidates, cases, per_case, n_pairs = rank_matrix(tables, directions, weights, metrics)
    out = []
    for i, c in enumerate(candidates):
        out.append(
            RankScore(
                candidate_id=c,
                F=float(per_case[i].mean()),
                per_case_mean_rank={case: float(per_case[i, k]) for k, case in enumerate(cases)},
                n_candidates=len(candidates),
                n_cases=len(cases),
                n_metric_region_pairs=n_pairs,
            )
        )
    return out


@dataclass
class RankReport:
    order: list[str]
    scores: dict[str, float]
    ties: list[list[str]]
    per_case: dict[str, dict[str, float]]
    per_case_rank_std: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "order": self.order,
            "F": self.scores,
            "ties": self.ties,
            "per_case_rank": self.per_case,
            "per_case_rank_std": self.per_case_rank_std,
        }

    def to_text(self) -> str:
        width = max(len(c) for c in self.order)
        lines = [f"{'rank':>4}  {'candidate':<{width}}  {'F':>8}  {'case-rank std':>13}"]
        tied = {c for group in self.ties for c in group}
        for pos, c in enumerate(self.order, start=1):
            flag = "  (tie)" if c in tied else ""
            lines.append(f"{pos:>4}  {c:<{width}}  {self.scores[c]:8.4f}  {self.per_case_rank_std[c]:13.4f}{flag}")
        return "\n".join(lines)


def rank_report(scores: Sequence[RankScore]) -> RankReport:
    """Order candidates by ascending F, ties broken by candidate id and flagged."""
    ordered = sorted(scores, key=lambda s: (s.F, s.candidate_id))
    groups: dict[float, list[str]] = {}
    for s in ordered:
        groups.setdefault(s.F, []).append(s.candidate_id)
    return RankReport(
        order=[s.candidate_id for s in ordered],
        scores={s.candidate_id: s.F for s in ordered},
        ties=[g for g in groups.values() if len(g) > 1],
        per_case={s.candidate_id: dict(s.per_case_mean_rank) for s in ordered},
        per_case_rank_std={
            s.candidate_id: float(np.std(list(s.per_case_mean_rank.values()))) if s.per_case_mean_rank else math.nan
            for s in ordered
        },
    )
