"""Probability averaging, rank-weighted model fusion and STAPLE label fusion."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .taskspec import TaskSpec
from .volio import LABEL, PROBABILITY, Affine, Volume, check_geometry, load_volume, save_float_volume

log = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-4


class FusionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ProbStack:
    """Per-class probabilities, ``probs[c]`` for ``class_codes[c]`` (code 0 = background)."""

    probs: np.ndarray  # (n_classes, X, Y, Z) float
    class_codes: tuple[int, ...]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: Affine = field(default_factory=Affine)

    def __post_init__(self) -> None:
        if self.probs.ndim != 4 or self.probs.shape[0] != len(self.class_codes):
            raise FusionError(f"probs shape {self.probs.shape} does not match {len(self.class_codes)} classes")
        if self.class_codes[0] != 0:
            raise FusionError("class 0 (background) must come first")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.probs.shape[1:])  # type: ignore[return-value]

    def volume(self, c: int) -> Volume:
        return Volume(self.probs[c], self.spacing, PROBABILITY, self.affine)

    def _compatible(self, other: "ProbStack") -> None:
        if other.class_codes != self.class_codes:
            raise FusionError(f"class sets differ: {self.class_codes} vs {other.class_codes}")
        geo = check_geometry([self.volume(0), other.volume(0)])
        if not geo.consistent:
            raise FusionError("geometry mismatch: " + "; ".join(geo.messages))


def normalize(probs: np.ndarray) -> np.ndarray:
    """Renormalize per voxel; all-zero voxels become pure background."""
    total = probs.sum(axis=0, keepdims=True)
    out = np.divide(probs, total, out=np.zeros_like(probs), where=total > 0)
    out[0][total[0] <= 0] = 1.0
    return out


def one_hot(labels: Volume, spec: TaskSpec) -> ProbStack:
    """Expand a label volume to a one-hot stack over background + base labels."""
    codes = (0, *spec.codes)
    probs = np.stack([labels.data == c for c in codes]).astype(np.float32)
    return ProbStack(probs, codes, labels.spacing, labels.affine)


def average_folds(stacks: Sequence[ProbStack]) -> ProbStack:
    if not stacks:
        raise FusionError("average_folds needs at least one stack")
    first = stacks[0]
    if len(stacks) == 1:
        return first
    acc = np.zeros(first.probs.shape, dtype=np.float64)
    for s in stacks:
        first._compatible(s)
        acc += s.probs
    acc /= len(stacks)
    return ProbStack(normalize(acc).astype(np.float32), first.class_codes, first.spacing, first.affine)


@dataclass(frozen=True)
class EnsembleWeights:
    weights: dict[str, float]
    raw: dict[str, float]
    source_F: dict[str, float]
    normalized: bool

    def to_json(self) -> dict:
        return {"weights": self.weights, "raw": self.raw, "F": self.source_F, "normalized": self.normalized}

    @classmethod
    def from_json(cls, d: dict) -> "EnsembleWeights":
        return cls(dict(d["weights"]), dict(d["raw"]), dict(d["F"]), bool(d["normalized"]))


def ensemble_weights(F: Mapping[str, float], normalize: bool = True) -> EnsembleWeights:
    """Weight of model i: sum of the other models' F over the sum of all F.

    Raw weights add up to n-1; ``normalize`` divides them by that sum.
    """
    if len(F) < 2:
        raise FusionError("ensemble_weights needs at least 2 candidates")
    bad = {k: v for k, v in F.items() if not (v > 0 and math.isfinite(v))}
    if bad:
        raise FusionError(f"F scores must be positive and finite: {bad}")
    total = math.fsum(F.values())
    raw = {k: (total - v) / total for k, v in F.items()}
    if normalize:
        s = math.fsum(raw.values())
        weights = {k: v / s for k, v in raw.items()}
    else:
        weights = dict(raw)
    return EnsembleWeights(weights, raw, dict(F), normalize)


def weighted_fuse(stacks: Mapping[str, ProbStack], w: EnsembleWeights) -> ProbStack:
    """Convex combination of candidate stacks with the normalized weights."""
    if set(stacks) != set(w.weights):
        raise FusionError(f"candidates {sorted(stacks)} do not match weights {sorted(w.weights)}")
    total = math.fsum(w.weights.values())
    names = sorted(stacks)
    first = stacks[names[0]]
    acc = np.zeros(first.probs.shape, dtype=np.float64)
    for name in names:
        first._compatible(stacks[name])
        acc += (w.weights[name] / total) * stacks[name].probs
    return ProbStack(acc.astype(np.float32), first.class_codes, first.spacing, first.affine)


def decode(stack: ProbStack, spec: TaskSpec | None = None) -> Volume:
    """Per-voxel argmax; background wins any tie it takes part in, else the lowest code."""
    codes = np.array(stack.class_codes)
    if spec is not None and set(stack.class_codes[1:]) - set(spec.codes):
        raise FusionError(f"stack classes {stack.class_codes} not declared by task {spec.name}")
    order = np.argsort(codes, kind="stable")  # argmax returns the first max -> lowest code
    idx = np.argmax(stack.probs[order], axis=0)
    labels = codes[order][idx]
    dtype = np.uint8 if codes.max() < 256 else np.int16
    return Volume(labels.astype(dtype), stack.spacing, LABEL, stack.affine)


# ---------------------------------------------------------------------------
# STAPLE


@dataclass
class StapleTrace:
    label: str
    iterations: int
    converged: bool
    log_likelihood: list[float]
    sensitivity: list[float]
    specificity: list[float]
    prior: float


_P_CLIP = 1e-12
_POST_EPS = 1e-12  # a posterior within rounding of the threshold does not claim the voxel


def _loglik_parts(d: np.ndarray, p: np.ndarray, q: np.ndarray, prior: float) -> tuple[np.ndarray, np.ndarray]:
    """log P(decisions, truth=1) and log P(decisions, truth=0) per voxel."""
    lp, l1p = np.log(p), np.log1p(-p)
    lq, l1q = np.log(q), np.log1p(-q)
    log_fg = math.log(prior) + d.T @ (lp - l1p) + l1p.sum()
    log_bg = math.log1p(-prior) + d.T @ (l1q - lq) + lq.sum()
    return log_fg, log_bg


def staple_binary(
    decisions: np.ndarray,
    max_iters: int = 100,
    tol: float = 1e-7,
    init: float = 0.99999,
    label: str = "",
) -> tuple[np.ndarray, StapleTrace]:
    """Binary STAPLE over raters' decisions ``(n_raters, n_voxels)``.

    Returns the posterior foreground probability per voxel. The prior is
    the mean foreground rate over all raters (fixed during EM).
    """
    d = np.asarray(decisions, dtype=np.float64)
    r = d.shape[0]
    prior = float(d.mean())
    prior = min(max(prior, _P_CLIP), 1 - _P_CLIP)
    p = np.full(r, init)
    q = np.full(r, init)
    trace = StapleTrace(label, 0, False, [], [], [], prior)
    w = np.zeros(d.shape[1])
    for it in range(1, max_iters + 1):
        log_fg, log_bg = _loglik_parts(d, p, q, prior)
        ll = np.logaddexp(log_fg, log_bg)
        trace.log_likelihood.append(float(ll.sum()))
        w = np.exp(log_fg - ll)
        sw, sb = w.sum(), (1 - w).sum()
        p_new = (d @ w) / sw if sw > 0 else p
        q_new = ((1 - d) @ (1 - w)) / sb if sb > 0 else q
        p_new = np.clip(p_new, _P_CLIP, 1 - _P_CLIP)
        q_new = np.clip(q_new, _P_CLIP, 1 - _P_CLIP)
        delta = float(np.max(np.abs(p_new - p)) + np.max(np.abs(q_new - q)))
        p, q = p_new, q_new
        trace.iterations = it
        if delta < tol:
            trace.converged = True
            break
    log_fg, log_bg = _loglik_parts(d, p, q, prior)
    ll = np.logaddexp(log_fg, log_bg)
    trace.log_likelihood.append(float(ll.sum()))
    w = np.exp(log_fg - ll)
    trace.sensitivity = p.tolist()
    trace.specificity = q.tolist()
    return w, trace


def staple_fuse(
    candidates: Sequence[Volume],
    spec: TaskSpec,
    max_iters: int = 100,
    tol: float = 1e-7,
    threshold: float = 0.5,
) -> tuple[Volume, list[StapleTrace]]:
    """Per-base-label binary STAPLE, recomposed into one label volume.

    A voxel is claimed by a label when its posterior exceeds ``threshold``;
    when several labels claim a voxel the largest posterior margin wins
    (lowest code on exact ties). Unclaimed voxels are background.
    """
    if len(candidates) < 2:
        raise FusionError("staple_fuse needs at least 2 candidates")
    geo = check_geometry(list(candidates))
    if not geo.consistent:
        raise FusionError("geometry mismatch: " + "; ".join(geo.messages))
    ref = candidates[0]
    flat = np.stack([np.asarray(c.data).ravel() for c in candidates])
    codes = sorted(spec.codes)
    margin = np.full((len(codes), flat.shape[1]), -np.inf)
    traces = []
    for i, code in enumerate(codes):
        dec = flat == code
        if not dec.any():
            continue
        # voxels where no rater votes carry no information beyond the prior;
        # they are still included so the likelihood is over the full image
        post, trace = staple_binary(dec, max_iters, tol, label=spec.label_of_code(code))
        traces.append(trace)
        margin[i] = np.where(post > threshold + _POST_EPS, post - threshold, -np.inf)
    best = np.argmax(margin, axis=0)
    claimed = np.isfinite(margin[best, np.arange(flat.shape[1])])
    out = np.where(claimed, np.array(codes)[best], 0).reshape(ref.dims)
    return Volume(out.astype(np.uint8 if max(codes) < 256 else np.int16), ref.spacing, LABEL, ref.affine), traces


# ---------------------------------------------------------------------------
# stacks on disk


def load_stack(descriptor: str | Path) -> list[ProbStack]:
    """Read a stack descriptor JSON; returns one stack per fold.

    ``{"class_codes": [0, 1, ...], "folds": [[bg.nii.gz, c1.nii.gz, ...], ...]}``
    or a single fold given as ``"files": [...]``. Paths resolve relative to
    the descriptor.
    """
    descriptor = Path(descriptor)
    d = json.loads(descriptor.read_text())
    codes = tuple(int(c) for c in d["class_codes"])
    folds = d.get("folds") or [d["files"]]
    stacks = []
    for files in folds:
        if len(files) != len(codes):
            raise FusionError(f"{descriptor}: {len(files)} files for {len(codes)} classes")
        vols = [load_volume(descriptor.parent / f, PROBABILITY) for f in files]
        geo = check_geometry(vols)
        if not geo.consistent:
            raise FusionError(f"{descriptor}: " + "; ".join(geo.messages))
        probs = np.stack([v.data for v in vols])
        stacks.append(ProbStack(probs, codes, vols[0].spacing, vols[0].affine))
    return stacks


def save_stack(stacks: Sequence[ProbStack], descriptor: str | Path, stem: str = "prob") -> None:
    descriptor = Path(descriptor)
    descriptor.parent.mkdir(parents=True, exist_ok=True)
    folds = []
    for f, s in enumerate(stacks):
        files = []
        for c, code in enumerate(s.class_codes):
            name = f"{stem}_f{f}_c{code}.nii.gz"
            save_float_volume(s.volume(c), descriptor.parent / name)
            files.append(name)
        folds.append(files)
    descriptor.write_text(json.dumps({"class_codes": list(stacks[0].class_codes), "folds": folds}, indent=1) + "\n")
