"""Pipeline stages. Each reads and writes plain files under the output directory.

Layout of ``out/``::

    features.csv  stratifier.json  manifest.json  cluster_separation.csv    split
    tables/candidates/<id>.json                                             evaluate
    rank.json  rank.txt                                                     rank
    weights.json  fused/<case>.nii.gz  tables/stages/fused.json             fuse
    policy.json  confusion.{csv,json}  thresholds.csv  pp_clusters.json     optimize-pp
    final/<case>.nii.gz  apply_log.json  tables/stages/final.json           apply
    report.json  report.txt                                                 report

Per-case work goes through :func:`map_cases`; one failing case is recorded
and the stage continues, reporting exit code 1 at the end.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..features import FeatureVector, ingest_features_csv, merge_features, write_features_csv
from ..fusion import (
    EnsembleWeights,
    ProbStack,
    average_folds,
    decode,
    ensemble_weights,
    load_stack,
    one_hot,
    staple_fuse,
    weighted_fuse,
)
from ..metrics import DIRECTIONS, MetricTable, evaluate_case
from ..postprocess import (
    PPPolicy,
    TrainingCase,
    apply_policy,
    learn_policy,
    prediction_features,
    write_threshold_summary,
)
from ..ranker import compute_rank_scores, rank_report
from ..stratify import StratifierModel, StratifyError, assign_folds, cluster_separation, fit_stratifier, nearest_cluster
from ..taskspec import TaskSpec
from ..volio import (
    INTENSITY,
    LABEL,
    CaseManifest,
    Volume,
    load_manifest,
    load_volume,
    save_label_volume,
    save_manifest,
)
from .config import ConfigError, PipelineConfig

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


class StageError(RuntimeError):
    """A stage cannot run at all (missing upstream artifact or bad input)."""


@dataclass
class StageResult:
    stage: str
    failures: dict[str, str] = field(default_factory=dict)  # case or artifact -> message
    outputs: list[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.failures else EXIT_OK


@dataclass
class Run:
    """Shared context of one pipeline invocation."""

    config: PipelineConfig
    out: Path
    manifest_path: Path | None = None

    def __post_init__(self) -> None:
        self.out = Path(self.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.spec: TaskSpec = self.config.task_spec()
        self.provenance = self.config.provenance()
        self.stamp = self.config.stamp()

    def cases(self) -> list[CaseManifest]:
        if self.manifest_path is None:
            raise ConfigError("this stage needs --manifest")
        try:
            return load_manifest(self.manifest_path, check_paths=False)
        except FileNotFoundError as exc:
            raise ConfigError(f"manifest not found: {self.manifest_path}") from exc
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{self.manifest_path}: {exc}") from exc

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, payload: dict, *parts: str) -> Path:
        p = self.path(*parts)
        p.write_text(json.dumps({"provenance": self.provenance, **payload}, indent=1, sort_keys=True) + "\n")
        return p

    def read_json(self, *parts: str, stage: str) -> dict:
        p = self.out.joinpath(*parts)
        if not p.exists():
            raise StageError(f"{p} not found; run '{stage}' first")
        return json.loads(p.read_text())


def map_cases(fn: Callable, items: Sequence, jobs: int) -> list:
    """``[fn(x) for x in items]``, in a process pool when ``jobs > 1``; order is kept."""
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _guard(fn: Callable, case: CaseManifest, **kwargs):
    """Run per-case work, turning an exception into ``(case_id, None, message)``."""
    try:
        return case.case_id, fn(case, **kwargs), None
    except Exception as exc:  # noqa: BLE001 - one bad case must not abort the corpus
        return case.case_id, None, f"{type(exc).__name__}: {exc}"


def _collect(results, result: StageResult) -> dict:
    out = {}
    for case_id, value, err in results:
        if err is not None:
            log.error("case %s: %s", case_id, err)
            result.failures[case_id] = err
        else:
            out[case_id] = value
    return out


def _images(case: CaseManifest) -> dict[str, Volume]:
    return {seq: load_volume(p, INTENSITY) for seq, p in sorted(case.image_paths.items())}


def _reference(case: CaseManifest, spec: TaskSpec) -> Volume:
    if case.reference_path is None:
        raise StageError("no reference in manifest")
    return load_volume(case.reference_path, LABEL, allowed_labels=spec.codes)


def _is_stack(path: Path) -> bool:
    return path.suffix.lower() == ".json"


def _candidate_stack(path: Path, spec: TaskSpec) -> ProbStack:
    """Fold-averaged probability stack, or a one-hot stack for a label file."""
    if _is_stack(path):
        return average_folds(load_stack(path))
    return one_hot(load_volume(path, LABEL, allowed_labels=spec.codes), spec)


def _candidate_labels(path: Path, spec: TaskSpec) -> Volume:
    return decode(_candidate_stack(path, spec), spec)


def _staple_raters(path: Path, spec: TaskSpec) -> list[Volume]:
    """Every fold of a stack is its own rater; a label file is one rater."""
    if _is_stack(path):
        return [decode(s, spec) for s in load_stack(path)]
    return [load_volume(path, LABEL, allowed_labels=spec.codes)]


# ---------------------------------------------------------------------------
# split


def _case_features(case: CaseManifest, spec: TaskSpec, bin_width: float) -> FeatureVector:
    return prediction_features(_reference(case, spec), _images(case), spec, case.case_id, bin_width)


def _external_features(cfg: PipelineConfig) -> dict[str, FeatureVector]:
    if not cfg.stratify.features_csv:
        return {}
    return {fv.case_id: fv for fv in ingest_features_csv(cfg.stratify.features_csv)}


def cmd_split(run: Run) -> StageResult:
    """Radiomic features -> stratifier -> cluster-stratified folds."""
    result = StageResult("split")
    cfg = run.config
    cases = run.cases()
    work = partial(_guard, _case_features, spec=run.spec, bin_width=cfg.stratify.bin_width)
    feats = _collect(map_cases(work, cases, cfg.n_jobs), result)
    external = _external_features(cfg)
    vectors = []
    for c in cases:
        if c.case_id not in feats:
            continue
        fv = feats[c.case_id]
        if external:
            if c.case_id not in external:
                result.failures[c.case_id] = "missing from stratify.features_csv"
                continue
            fv = merge_features(fv, external[c.case_id])
        vectors.append(fv)
    k_max = min(cfg.stratify.k_max, len(vectors) - 1)
    if k_max < cfg.stratify.k_min:
        raise StageError(f"{len(vectors)} usable cases cannot support k >= {cfg.stratify.k_min}")
    try:
        model = fit_stratifier(vectors, range(cfg.stratify.k_min, k_max + 1), cfg.stratify.variance_target, cfg.seed)
    except StratifyError as exc:
        raise StageError(str(exc)) from exc
    model = assign_folds(model, cfg.stratify.n_folds, cfg.seed)

    write_features_csv(vectors, run.path("features.csv"), comment=run.stamp)
    run.write_json(model.to_json(), "stratifier.json")
    sep = cluster_separation(vectors, model)
    with open(run.path("cluster_separation.csv"), "w") as fh:
        fh.write(f"# {run.stamp}\nfeature,anova_f\n")
        fh.writelines(f"{name},{stat!r}\n" for name, stat in sep)
    for c in cases:
        c.fold = model.fold_of_case.get(c.case_id)
        c.cluster = model.cluster_of_case.get(c.case_id)
    save_manifest(cases, run.path("manifest.json"), extra={"provenance": run.provenance})
    result.outputs += ["features.csv", "stratifier.json", "cluster_separation.csv", "manifest.json"]
    log.info("split: k=%d silhouette=%.3f components=%d", model.k, model.silhouette, model.n_components)
    return result


# ---------------------------------------------------------------------------
# evaluate


def _evaluate_candidate(case: CaseManifest, candidate: str, spec: TaskSpec, params) -> list:
    if candidate not in case.candidate_paths:
        raise StageError(f"no prediction for candidate {candidate}")
    ref = _reference(case, spec)
    pred = _candidate_labels(case.candidate_paths[candidate], spec)
    return evaluate_case(ref, pred, spec, params, case.case_id, candidate)


def cmd_evaluate(run: Run, candidates: Sequence[str] | None = None) -> StageResult:
    """One metric table per candidate; failed (case, candidate) pairs are skipped and reported."""
    result = StageResult("evaluate")
    cases = run.cases()
    names = sorted(candidates or {k for c in cases for k in c.candidate_paths})
    if not names:
        raise ConfigError("manifest lists no candidates")
    for name in names:
        work = partial(_guard, _evaluate_candidate, candidate=name, spec=run.spec, params=run.config.metrics)
        sub = StageResult("evaluate")
        rows = _collect(map_cases(work, cases, run.config.n_jobs), sub)
        result.failures.update({f"{cid}/{name}": msg for cid, msg in sub.failures.items()})
        table = MetricTable([r for c in cases if c.case_id in rows for r in rows[c.case_id]])
        table.to_json(run.path("tables", "candidates", f"{name}.json"), provenance=run.provenance)
        result.outputs.append(f"tables/candidates/{name}.json")
    return result


# ---------------------------------------------------------------------------
# rank


def _common_grid(tables: dict[str, MetricTable]) -> tuple[dict[str, MetricTable], list[str]]:
    """Restrict every table to the cases all candidates were evaluated on."""
    common = set.intersection(*(set(t.cases) for t in tables.values()))
    dropped = sorted(set.union(*(set(t.cases) for t in tables.values())) - common)
    if dropped:
        log.warning("ranking on %d common cases; dropped %s", len(common), dropped)
    return {k: MetricTable([r for r in t.rows if r.case_id in common]) for k, t in tables.items()}, dropped


def read_tables(directory: Path) -> dict[str, MetricTable]:
    return {p.stem: MetricTable.read(p) for p in sorted(directory.glob("*.json"))}


def cmd_rank(run: Run) -> StageResult:
    result = StageResult("rank")
    tables = read_tables(run.out / "tables" / "candidates")
    if len(tables) < 2:
        raise StageError("ranking needs tables for at least 2 candidates; run 'evaluate' first")
    tables, dropped = _common_grid(tables)
    scores = compute_rank_scores(tables, DIRECTIONS, metrics=run.config.rank_metrics)
    report = rank_report(scores)
    run.write_json(
        {
            "F": {s.candidate_id: s.F for s in scores},
            "rank_metrics": list(run.config.rank_metrics),
            "dropped_cases": dropped,
            "report": report.to_json(),
        },
        "rank.json",
    )
    run.path("rank.txt").write_text(f"# {run.stamp}\n" + report.to_text() + "\n")
    result.outputs += ["rank.json", "rank.txt"]
    if dropped:
        result.failures.update({c: "not evaluated for every candidate" for c in dropped})
    return result


# ---------------------------------------------------------------------------
# fuse


def _fuse_case(case: CaseManifest, spec: TaskSpec, cfg: PipelineConfig, weights: EnsembleWeights | None):
    """Fused label volume for one case, plus a small log entry."""
    paths = case.candidate_paths
    if not paths:
        raise StageError("no candidate predictions")
    if len(paths) == 1:
        (path,) = paths.values()
        return _candidate_labels(path, spec), {"mode": "single"}
    if cfg.fusion.mode == "weighted":
        assert weights is not None
        missing = set(weights.weights) - set(paths)
        if missing:
            raise StageError(f"missing predictions for {sorted(missing)}")
        stacks = {name: _candidate_stack(paths[name], spec) for name in weights.weights}
        return decode(weighted_fuse(stacks, weights), spec), {"mode": "weighted"}
    raters = [v for name in sorted(paths) for v in _staple_raters(paths[name], spec)]
    fused, traces = staple_fuse(raters, spec, cfg.fusion.staple_max_iters, cfg.fusion.staple_tol)
    info = {
        "mode": "staple",
        "raters": len(raters),
        "labels": {t.label: {"iterations": t.iterations, "converged": t.converged} for t in traces},
    }
    return fused, info


def _load_weights(run: Run) -> EnsembleWeights | None:
    if run.config.fusion.mode != "weighted":
        return None
    p = run.out / "weights.json"
    if not p.exists():
        raise StageError(f"{p} not found; run 'fuse' first")
    return EnsembleWeights.from_json(json.loads(p.read_text()))


def _fuse_job(case: CaseManifest, spec, cfg, weights, fused_dir: Path, stamp: str):
    vol, info = _fuse_case(case, spec, cfg, weights)
    save_label_volume(vol, fused_dir / f"{case.case_id}.nii.gz", description=stamp)
    return info


def _stage_table(run: Run, cases: Sequence[CaseManifest], directory: str, name: str, result: StageResult) -> None:
    """Evaluate stage outputs against references, when every case has one."""
    with_ref = [c for c in cases if c.reference_path is not None and (run.out / directory / f"{c.case_id}.nii.gz").exists()]
    if not with_ref:
        return
    staged = [
        CaseManifest(c.case_id, c.reference_path, candidate_paths={name: run.out / directory / f"{c.case_id}.nii.gz"})
        for c in with_ref
    ]
    work = partial(_guard, _evaluate_candidate, candidate=name, spec=run.spec, params=run.config.metrics)
    rows = _collect(map_cases(work, staged, run.config.n_jobs), result)
    MetricTable([r for c in staged if c.case_id in rows for r in rows[c.case_id]]).to_json(
        run.path("tables", "stages", f"{name}.json"), provenance=run.provenance
    )


def cmd_fuse(run: Run, mode: str | None = None) -> StageResult:
    result = StageResult("fuse")
    cfg = run.config
    if mode is not None:
        if mode not in ("weighted", "staple"):
            raise ConfigError(f"unknown fusion mode {mode!r}")
        cfg = replace(cfg, fusion=replace(cfg.fusion, mode=mode))
    cases = run.cases()
    weights = None
    if cfg.fusion.mode == "weighted":
        names = sorted({k for c in cases for k in c.candidate_paths})
        if len(names) > 1:
            rank = run.read_json("rank.json", stage="rank")
            F = rank["F"]
            missing = set(names) - set(F)
            if missing:
                raise StageError(f"rank.json has no F for {sorted(missing)}; re-run 'rank'")
            weights = ensemble_weights({n: F[n] for n in names}, cfg.fusion.normalize)
            run.write_json(weights.to_json(), "weights.json")
            result.outputs.append("weights.json")
    work = partial(_guard, _fuse_job, spec=run.spec, cfg=cfg, weights=weights, fused_dir=run.out / "fused", stamp=run.stamp)
    (run.out / "fused").mkdir(exist_ok=True)
    info = _collect(map_cases(work, cases, cfg.n_jobs), result)
    run.write_json({"mode": cfg.fusion.mode, "cases": info}, "fuse_log.json")
    _stage_table(run, cases, "fused", "fused", result)
    result.outputs += ["fused/", "fuse_log.json"]
    return result


# ---------------------------------------------------------------------------
# optimize-pp


def _load_stratifier(run: Run) -> StratifierModel:
    return StratifierModel.from_json(run.read_json("stratifier.json", stage="split"))


def _prediction_cluster(pred: Volume, images: dict[str, Volume], model: StratifierModel, spec: TaskSpec,
                        case_id: str, bin_width: float, external: FeatureVector | None) -> tuple[int, bool]:
    """Nearest training cluster of a prediction; ``(0, True)`` for an empty one."""
    if not np.isin(pred.data, spec.codes).any():
        return 0, True
    fv = prediction_features(pred, images, spec, case_id, bin_width)
    if external is not None:
        fv = merge_features(fv, external)
    return nearest_cluster(model, fv), False


def _pp_case(case: CaseManifest, run_out: Path, spec, model, bin_width, external):
    ref = _reference(case, spec)
    fused = load_volume(run_out / "fused" / f"{case.case_id}.nii.gz", LABEL, allowed_labels=spec.codes)
    cluster, fallback = _prediction_cluster(
        fused, _images(case), model, spec, case.case_id, bin_width, external.get(case.case_id)
    )
    return TrainingCase(case.case_id, ref, fused, cluster), fallback


def cmd_optimize_pp(run: Run) -> StageResult:
    result = StageResult("optimize-pp")
    cfg = run.config
    model = _load_stratifier(run)
    cases = run.cases()
    external = _external_features(cfg)
    work = partial(_guard, _pp_case, run_out=run.out, spec=run.spec, model=model,
                   bin_width=cfg.stratify.bin_width, external=external)
    got = _collect(map_cases(work, cases, cfg.n_jobs), result)
    training = [got[c.case_id][0] for c in cases if c.case_id in got]
    fallbacks = sorted(cid for cid, (_, fb) in got.items() if fb)
    for cid in fallbacks:
        log.warning("case %s: empty fused prediction, fallback cluster 0", cid)
    if not training:
        raise StageError("no usable training cases for post-processing")
    policy, cm = learn_policy(
        training,
        run.spec,
        cfg.metrics,
        cfg.pp.cc_grid,
        cfg.pp.ratio_grid,
        cfg.pp.min_offdiag,
        cfg.pp.rank_metrics,
        cfg.pp.objective,
        seed=cfg.seed,
    )
    policy.provenance.update(run.provenance)
    policy.save(run.path("policy.json"))
    cm.to_csv(run.path("confusion.csv"), comment=run.stamp)
    run.write_json(cm.to_json(), "confusion.json")
    write_threshold_summary(policy, run.path("thresholds.csv"), comment=run.stamp)
    run.write_json({"clusters": {t.case_id: t.cluster for t in training}, "fallback": fallbacks}, "pp_clusters.json")
    result.outputs += ["policy.json", "confusion.csv", "confusion.json", "thresholds.csv", "pp_clusters.json"]
    return result


# ---------------------------------------------------------------------------
# apply


def _apply_case(case: CaseManifest, spec, cfg, weights, model, policy, external, final_dir: Path, stamp: str):
    fused, _ = _fuse_case(case, spec, cfg, weights)
    cluster, fallback = _prediction_cluster(
        fused, _images(case), model, spec, case.case_id, cfg.stratify.bin_width, external.get(case.case_id)
    )
    out, steps = apply_policy(fused, cluster, policy, spec, cfg.metrics.connectivity)
    save_label_volume(out, final_dir / f"{case.case_id}.nii.gz", description=stamp)
    return {"cluster": cluster, "fallback_cluster": fallback, "steps": steps}


def cmd_apply(run: Run) -> StageResult:
    """Fuse, assign the nearest cluster and apply its learned post-processing."""
    result = StageResult("apply")
    cfg = run.config
    model = _load_stratifier(run)
    p = run.out / "policy.json"
    if not p.exists():
        raise StageError(f"{p} not found; run 'optimize-pp' first")
    policy = PPPolicy.load(p)
    cases = run.cases()
    needs_weights = any(len(c.candidate_paths) > 1 for c in cases)
    weights = _load_weights(run) if needs_weights else None
    (run.out / "final").mkdir(exist_ok=True)
    work = partial(_guard, _apply_case, spec=run.spec, cfg=cfg, weights=weights, model=model, policy=policy,
                   external=_external_features(cfg), final_dir=run.out / "final", stamp=run.stamp)
    log_entries = _collect(map_cases(work, cases, cfg.n_jobs), result)
    run.write_json({"cases": log_entries, "failures": result.failures}, "apply_log.json")
    _stage_table(run, cases, "final", "final", result)
    result.outputs += ["final/", "apply_log.json"]
    return result
