"""Radiomic stratification: standardize, PCA, silhouette-selected k-means, folds."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import f_oneway
from sklearn.metrics import silhouette_score

from .features import FeatureVector

log = logging.getLogger(__name__)

KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-6
EIGEN_TOL = 1e-10


class StratifyError(ValueError):
    pass


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: tuple[float, ...]  # objective after every assignment step of the winning restart


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(x) - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=float)


def _assign(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(x)), labels]


def kmeans(
    x: np.ndarray,
    k: int,
    seed: int = 0,
    n_init: int = KMEANS_RESTARTS,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts.

    Stops when the objective improves by less than ``tol`` relative.
    """
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    best: KMeansResult | None = None
    for _ in range(n_init):
        centers = _kmeans_pp(x, k, rng)
        labels, d2 = _assign(x, centers)
        history = [float(d2.sum())]
        for _ in range(max_iter):
            new = centers.copy()
            for j in range(k):
                members = labels == j
                if members.any():
                    new[j] = x[members].mean(axis=0)
                # empty clusters keep their centre; the objective cannot rise
            centers = new
            labels, d2 = _assign(x, centers)
            history.append(float(d2.sum()))
            prev, cur = history[-2], history[-1]
            if prev - cur <= tol * max(prev, 1e-300):
                break
        if best is None or history[-1] < best.inertia:
            best = KMeansResult(centers, labels, history[-1], tuple(history))
    assert best is not None
    return best


@dataclass
class StratifierModel:
    feature_names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    components: np.ndarray  # (n_components, n_features)
    explained_variance_ratio: np.ndarray  # for every eigen-direction, descending
    n_components: int
    centroids: np.ndarray  # (k, n_components)
    k: int
    silhouette: float
    seed: int
    case_ids: tuple[str, ...] = ()
    cluster_of_case: dict[str, int] = field(default_factory=dict)
    fold_of_case: dict[str, int] = field(default_factory=dict)
    silhouette_by_k: dict[int, float] = field(default_factory=dict)
    dropped_features: tuple[str, ...] = ()
    variance_target: float = 0.90
    kmeans_params: dict = field(
        default_factory=lambda: {"restarts": KMEANS_RESTARTS, "max_iter": KMEANS_MAX_ITER, "tol": KMEANS_TOL}
    )

    @property
    def kept_variance(self) -> float:
        return float(self.explained_variance_ratio[: self.n_components].sum())

    def project(self, raw: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(raw) - self.mean) / self.std
        return z @ self.components.T

    def to_json(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "components": self.components.tolist(),
            "explained_variance_ratio": self.explained_variance_ratio.tolist(),
            "n_components": self.n_components,
            "centroids": self.centroids.tolist(),
            "k": self.k,
            "silhouette": self.silhouette,
            "silhouette_by_k": {str(k): v for k, v in self.silhouette_by_k.items()},
            "seed": self.seed,
            "case_ids": list(self.case_ids),
            "cluster_of_case": self.cluster_of_case,
            "fold_of_case": self.fold_of_case,
            "dropped_features": list(self.dropped_features),
            "variance_target": self.variance_target,
            "kmeans": self.kmeans_params,
        }

    @classmethod
    def from_json(cls, d: dict) -> "StratifierModel":
        return cls(
            feature_names=tuple(d["feature_names"]),
            mean=np.array(d["mean"], dtype=float),
            std=np.array(d["std"], dtype=float),
            components=np.array(d["components"], dtype=float).reshape(d["n_components"], len(d["feature_names"])),
            explained_variance_ratio=np.array(d["explained_variance_ratio"], dtype=float),
            n_components=int(d["n_components"]),
            centroids=np.array(d["centroids"], dtype=float).reshape(d["k"], d["n_components"]),
            k=int(d["k"]),
            silhouette=float(d["silhouette"]),
            seed=int(d["seed"]),
            case_ids=tuple(d.get("case_ids", ())),
            cluster_of_case={k: int(v) for k, v in d.get("cluster_of_case", {}).items()},
            fold_of_case={k: int(v) for k, v in d.get("fold_of_case", {}).items()},
            silhouette_by_k={int(k): float(v) for k, v in d.get("silhouette_by_k", {}).items()},
            dropped_features=tuple(d.get("dropped_features", ())),
            variance_target=float(d.get("variance_target", 0.9)),
            kmeans_params=dict(d.get("kmeans", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "StratifierModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def feature_matrix(features: Sequence[FeatureVector], names: Sequence[str] | None = None) -> np.ndarray:
    names = tuple(names or features[0].names)
    rows = []
    for fv in features:
        d = fv.as_dict()
        missing = [n for n in names if n not in d]
        if missing:
            raise StratifyError(f"case {fv.case_id}: missing feature {missing[0]!r}")
        rows.append([d[n] for n in names])
    return np.array(rows, dtype=float)


def pca(z: np.ndarray, variance_target: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Eigen-decompose the covariance of standardized data.

    Returns ``(components, explained_ratio, m)`` with components sorted by
    decreasing variance and ``m`` the smallest count reaching the target.
    """
    cov = np.cov(z, rowvar=False, bias=True)
    cov = np.atleast_2d(cov)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    evals[evals < EIGEN_TOL * max(evals[0], EIGEN_TOL)] = 0.0
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(evecs.shape[1])])
    evecs = evecs * np.where(signs == 0, 1.0, signs)
    ratio = evals / evals.sum()
    cum = np.cumsum(ratio)
    rank = int((evals > 0).sum())
    m = int(np.searchsorted(cum, variance_target - EIGEN_TOL) + 1)
    m = max(1, min(m, rank))
    return evecs.T, ratio, m


def fit_stratifier(
    features: Sequence[FeatureVector],
    k_range: Sequence[int] = range(2, 9),
    variance_target: float = 0.90,
    seed: int = 0,
) -> StratifierModel:
    """Fit standardization, PCA and the silhouette-best k-means clustering."""
    if not features:
        raise StratifyError("no feature vectors")
    names = features[0].names
    x = feature_matrix(features, names)
    n = len(x)
    ks = sorted({k for k in k_range if 2 <= k <= n - 1})
    if not ks:
        raise StratifyError(f"k_range {list(k_range)} empty after clamping to [2, {n - 1}]")
    if n < max(ks) + 1:
        raise StratifyError(f"need at least {max(ks) + 1} cases, got {n}")
    if not 0 < variance_target <= 1:
        raise StratifyError("variance_target must be in (0, 1]")

    mean, std = x.mean(axis=0), x.std(axis=0)
    keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
    dropped = tuple(nm for nm, k in zip(names, keep) if not k)
    if dropped:
        log.info("dropping %d constant features: %s", len(dropped), ", ".join(dropped))
    if not keep.any():
        raise StratifyError("every feature is constant")
    names = tuple(nm for nm, k in zip(names, keep) if k)
    x, mean, std = x[:, keep], mean[keep], std[keep]
    z = (x - mean) / std
    comps, ratio, m = pca(z, variance_target)
    proj = z @ comps[:m].T

    results: dict[int, tuple[float, KMeansResult]] = {}
    for k in ks:
        km = kmeans(proj, k, seed=seed)
        if len(np.unique(km.labels)) < 2:
            sil = -1.0
        else:
            sil = float(silhouette_score(proj, km.labels, metric="euclidean"))
        results[k] = (sil, km)
        log.debug("k=%d silhouette=%.4f inertia=%.4g", k, sil, km.inertia)
    best_k = max(ks, key=lambda k: (results[k][0], -k))
    sil, km = results[best_k]
    case_ids = tuple(fv.case_id for fv in features)
    return StratifierModel(
        feature_names=names,
        mean=mean,
        std=std,
        components=comps[:m],
        explained_variance_ratio=ratio,
        n_components=m,
        centroids=km.centroids,
        k=best_k,
        silhouette=sil,
        seed=seed,
        case_ids=case_ids,
        cluster_of_case={c: int(l) for c, l in zip(case_ids, km.labels)},
        silhouette_by_k={k: v[0] for k, v in results.items()},
        dropped_features=dropped,
        variance_target=variance_target,
    )


def assign_folds(model: StratifierModel, n_folds: int = 5, seed: int | None = None) -> StratifierModel:
    """Shuffle each cluster and deal its cases round-robin into folds.

    The dealing position carries over between clusters so the global fold
    sizes stay balanced as well.
    """
    rng = np.random.default_rng(model.seed if seed is None else seed)
    folds: dict[str, int] = {}
    start = 0
    for cluster in range(model.k):
        members = [c for c in model.case_ids if model.cluster_of_case[c] == cluster]
        order = rng.permutation(len(members))
        for pos, idx in enumerate(order):
            folds[members[idx]] = (start + pos) % n_folds
        start = (start + len(members)) % n_folds
    return replace(model, fold_of_case=folds)


def nearest_cluster(model: StratifierModel, features: FeatureVector) -> int:
    d = features.as_dict()
    for name in model.feature_names:
        if name not in d:
            raise StratifyError(f"case {features.case_id}: missing feature {name!r}")
    raw = np.array([d[n] for n in model.feature_names], dtype=float)
    p = model.project(raw)[0]
    dist = ((model.centroids - p) ** 2).sum(axis=1)
    return int(np.argmin(dist))  # first minimum -> lowest id on ties


def cluster_separation(features: Sequence[FeatureVector], model: StratifierModel) -> list[tuple[str, float]]:
    """One-way ANOVA F-statistic of every kept feature across clusters, descending."""
    x = feature_matrix(features, model.feature_names)
    labels = np.array([model.cluster_of_case[f.case_id] for f in features])
    groups = [labels == c for c in range(model.k) if (labels == c).sum() > 0]
    out = []
    for j, name in enumerate(model.feature_names):
        if len(groups) < 2:
            out.append((name, 0.0))
            continue
        with np.errstate(all="ignore"):
            stat = f_oneway(*(x[g, j] for g in groups)).statistic
        out.append((name, float(stat) if np.isfinite(stat) else 0.0))
    return sorted(out, key=lambda t: (-t[1], t[0]))
