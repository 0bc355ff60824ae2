"""Summary report over every stage artifact: one JSON document plus a text rendering."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..metrics import DIRECTIONS, MetricTable
from ..ranker import compute_rank_scores, rank_report
from .stages import Run, StageResult, _common_grid, read_tables

_STATS = {
    "type": "object",
    "required": ["mean", "median", "n", "n_undefined"],
    "properties": {
        "mean": {"type": ["number", "null"]},
        "median": {"type": ["number", "null"]},
        "n": {"type": "integer", "minimum": 0},
        "n_undefined": {"type": "integer", "minimum": 0},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["provenance", "metric_convention", "stage_F", "regions", "missing"],
    "properties": {
        "provenance": {
            "type": "object",
            "required": ["config_hash", "seed"],
            "properties": {"config_hash": {"type": "string"}, "seed": {"type": "integer"}},
        },
        "metric_convention": {"enum": ["lesion-wise", "global"]},
        "candidate_F": {"type": "object", "additionalProperties": {"type": "number"}},
        "stage_F": {
            "type": "object",
            "required": ["F", "order", "n_cases"],
            "properties": {
                "F": {"type": "object", "additionalProperties": {"type": "number"}},
                "order": {"type": "array", "items": {"type": "string"}},
                "n_cases": {"type": "integer"},
                "per_case_rank_std": {"type": "object", "additionalProperties": {"type": "number"}},
                "ties": {"type": "array", "items": {"type": "array", "items": {"type": "string"}}},
            },
        },
        "regions": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": {"type": "object", "additionalProperties": _STATS},
            },
        },
        "stratifier": {"type": ["object", "null"]},
        "weights": {"type": ["object", "null"]},
        "policy": {
            "type": ["object", "null"],
            "properties": {
                "cc_thresholds": {"type": "array"},
                "redef_rules": {"type": "array"},
                "F_before": {"type": "number"},
                "F_after": {"type": "number"},
            },
        },
        "confusion": {
            "type": ["object", "null"],
            "properties": {"names": {"type": "array"}, "matrix": {"type": "array", "items": {"type": "array"}}},
        },
        "missing": {"type": "array", "items": {"type": "string"}},
    },
}


def _stats(values: list[float]) -> dict:
    finite = [v for v in values if math.isfinite(v)]
    return {
        "mean": float(np.mean(finite)) if finite else None,
        "median": float(np.median(finite)) if finite else None,
        "n": len(finite),
        "n_undefined": len(values) - len(finite),
    }


def region_summary(table: MetricTable) -> dict[str, dict[str, dict]]:
    """``{region: {metric: stats}}`` over all cases of one table."""
    groups: dict[tuple[str, str], list[float]] = {}
    for r in table.rows:
        groups.setdefault((r.region, r.metric), []).append(r.value)
    out: dict[str, dict[str, dict]] = {}
    for (region, metric), vals in groups.items():
        out.setdefault(region, {})[metric] = _stats(vals)
    return out


def _strip(d: dict) -> dict:
    return {k: v for k, v in d.items() if k != "provenance"}


def build_report(run: Run) -> tuple[dict, list[str]]:
    out = run.out
    missing: list[str] = []

    def load(name: str) -> dict | None:
        p = out / name
        if not p.exists():
            missing.append(name)
            return None
        return json.loads(p.read_text())

    tables = {f"candidate:{k}": t for k, t in read_tables(out / "tables" / "candidates").items()}
    if not tables:
        missing.append("tables/candidates/*.json")
    for stage in ("fused", "final"):
        p = out / "tables" / "stages" / f"{stage}.json"
        if p.exists():
            tables[stage] = MetricTable.read(p)
        else:
            missing.append(f"tables/stages/{stage}.json")

    stage_F: dict = {"F": {}, "order": [], "n_cases": 0}
    if len(tables) >= 2:
        renamed = {k: t.renamed(k) for k, t in tables.items()}
        common, _ = _common_grid(renamed)
        scores = compute_rank_scores(common, DIRECTIONS, metrics=run.config.rank_metrics)
        rr = rank_report(scores)
        stage_F = {
            "F": rr.scores,
            "order": rr.order,
            "n_cases": scores[0].n_cases,
            # F gaps can be tiny with few candidates; the spread shows how stable the order is
            "per_case_rank_std": rr.per_case_rank_std,
            "ties": rr.ties,
        }

    rank = load("rank.json")
    strat = load("stratifier.json")
    weights = load("weights.json") if run.config.fusion.mode == "weighted" else None
    policy = load("policy.json")
    confusion = load("confusion.json")

    stratifier = None
    if strat is not None:
        folds = strat.get("fold_of_case", {})
        clusters = strat.get("cluster_of_case", {})
        stratifier = {
            "k": strat["k"],
            "silhouette": strat["silhouette"],
            "n_components": strat["n_components"],
            "kept_variance": float(sum(strat["explained_variance_ratio"][: strat["n_components"]])),
            "cluster_sizes": {str(c): list(clusters.values()).count(c) for c in sorted(set(clusters.values()))},
            "fold_sizes": {str(f): list(folds.values()).count(f) for f in sorted(set(folds.values()))},
        }
    report = {
        "provenance": run.provenance,
        "metric_convention": run.config.metric_convention,
        "candidate_F": rank["F"] if rank else {},
        "stage_F": stage_F,
        "regions": {name: region_summary(t) for name, t in tables.items()},
        "stratifier": stratifier,
        "weights": _strip(weights) if weights else None,
        "policy": None,
        "confusion": _strip(confusion) if confusion else None,
        "missing": sorted(missing),
    }
    if policy is not None:
        prov = policy.get("provenance", {})
        report["policy"] = {
            "cc_thresholds": policy["cc_thresholds"],
            "redef_rules": policy["redef_rules"],
            "F_before": prov.get("F_before"),
            "F_after": prov.get("F_after"),
        }
    return report, sorted(missing)


def _fmt(v) -> str:
    return "   -  " if v is None else f"{v:6.3f}"


def render_text(report: dict) -> str:
    lines = [f"# tumorpipe report  cfg={report['provenance']['config_hash']} seed={report['provenance']['seed']}"]
    convention = report["metric_convention"]
    dice, nsd = ("lw_dice", "lw_nsd") if convention == "lesion-wise" else ("dice_global", "nsd_global")
    lines.append(f"metric convention: {convention}")
    sf = report["stage_F"]
    if sf["order"]:
        lines.append("")
        lines.append(f"rank score F over {sf['n_cases']} cases (lower is better), with per-case rank std")
        lines += [f"  {name:<16} {sf['F'][name]:.4f}  {sf['per_case_rank_std'][name]:.4f}" for name in sf["order"]]
        if sf["ties"]:
            lines.append("  tied: " + "; ".join(", ".join(g) for g in sf["ties"]))
    regions = sorted({r for summary in report["regions"].values() for r in summary})
    for metric in (dice, nsd):
        lines.append("")
        lines.append(f"{metric} mean / median per region")
        lines.append("  " + f"{'':<16}" + "".join(f"{r:>16}" for r in regions))
        for name, summary in report["regions"].items():
            cells = []
            for r in regions:
                s = summary.get(r, {}).get(metric)
                cells.append(f"{_fmt(s and s['mean'])}/{_fmt(s and s['median'])}".rjust(16))
            lines.append(f"  {name:<16}" + "".join(cells))
    st = report.get("stratifier")
    if st:
        lines.append("")
        lines.append(
            f"stratifier: k={st['k']} silhouette={st['silhouette']:.3f} components={st['n_components']} "
            f"kept variance={st['kept_variance']:.3f}"
        )
        lines.append(f"  cluster sizes {st['cluster_sizes']}  fold sizes {st['fold_sizes']}")
    if report.get("weights"):
        w = report["weights"]["weights"]
        lines.append("")
        lines.append("ensemble weights: " + "  ".join(f"{k}={v:.3f}" for k, v in sorted(w.items())))
    pol = report.get("policy")
    if pol:
        lines.append("")
        lines.append(f"post-processing (F before {pol['F_before']:.4f}, after {pol['F_after']:.4f})")
        labels = sorted({e["label"] for e in pol["cc_thresholds"]})
        clusters = sorted({e["cluster"] for e in pol["cc_thresholds"]})
        grid = {(e["cluster"], e["label"]): e["min_voxels"] for e in pol["cc_thresholds"]}
        lines.append("  min component size  " + "".join(f"{lbl:>8}" for lbl in labels))
        for c in clusters:
            lines.append(f"  cluster {c:<11} " + "".join(f"{grid.get((c, lbl), 0):>8}" for lbl in labels))
        for r in pol["redef_rules"]:
            lines.append(f"  cluster {r['cluster']}: {r['label_x']} -> {r['label_y']} when {r['label_x']}/WT < {r['ratio_threshold']}")
    cm = report.get("confusion")
    if cm:
        lines.append("")
        lines.append("confusion (rows reference, columns predicted)")
        lines.append("  " + f"{'':<6}" + "".join(f"{n:>7}" for n in cm["names"]))
        for name, row in zip(cm["names"], cm["matrix"]):
            lines.append(f"  {name:<6}" + "".join(f"{v:7.3f}" for v in row))
    if report["missing"]:
        lines.append("")
        lines.append("missing artifacts: " + ", ".join(report["missing"]))
    return "\n".join(lines) + "\n"


def cmd_report(run: Run) -> StageResult:
    result = StageResult("report")
    report, missing = build_report(run)
    run.path("report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    run.path("report.txt").write_text(render_text(report))
    result.failures.update({m: "artifact missing" for m in missing})
    result.outputs += ["report.json", "report.txt"]
    return result


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
