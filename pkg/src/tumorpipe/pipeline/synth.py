"""Synthetic PED-schema corpus: phantom tumours, images and imperfect candidates.

Three tumour phenotypes give the radiomic clustering something to find:

* diffuse: wide oedema, thin enhancing rim, small necrotic core;
* compact: little oedema around a large enhancing mass;
* cystic: a fluid-filled cyst inside an enhancing wall.

Candidates degrade the reference with controlled error modes. Specks
(isolated enhancing blobs of 5-20 voxels) and label swaps (a small necrotic
core called enhancing) are systematic per case, the way image artefacts
fool every model alike. Boundary jitter differs per candidate and fold.
Candidate ``m1`` is the most accurate and ``m3`` the least.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..fusion import ProbStack, save_stack
from ..taskspec import TaskSpec, builtin_task
from ..volio import INTENSITY, CaseManifest, Volume, save_label_volume, save_manifest, save_volume

log = logging.getLogger(__name__)

SEQUENCES = ("t1", "t1c", "t2", "flair")
PHENOTYPES = ("diffuse", "compact", "cystic")

# mean intensity per (sequence, tissue); tissues: background, ET, NET, CC, ED
_TISSUE_MEANS = {
    "t1": (400, 450, 300, 200, 350),
    "t1c": (400, 900, 320, 200, 380),
    "t2": (500, 650, 700, 1100, 900),
    "flair": (450, 600, 650, 300, 1000),
}


@dataclass(frozen=True)
class CandidateErrors:
    """Per-candidate error strengths."""

    jitter: float  # probability of eroding/dilating each case's boundary by one voxel
    shift: int  # maximum whole-map shift in voxels
    blur: float  # gaussian sigma used to soften one-hot maps into probabilities


CANDIDATES = {
    "m1": CandidateErrors(jitter=0.2, shift=0, blur=0.6),
    "m2": CandidateErrors(jitter=0.5, shift=1, blur=0.8),
    "m3": CandidateErrors(jitter=0.8, shift=1, blur=1.0),
}


def _ellipsoid(shape, center, radii) -> np.ndarray:
    g = np.indices(shape, dtype=np.float32)
    return sum(((g[i] - center[i]) / radii[i]) ** 2 for i in range(3)) <= 1.0


def phantom(shape, phenotype: str, spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """One reference label map of the given phenotype."""
    lab = np.zeros(shape, np.uint8)
    size = np.array(shape, float)
    center = size / 2 + rng.uniform(-0.08, 0.08, 3) * size
    aniso = rng.uniform(0.85, 1.15, 3)
    scale = min(shape) / 64.0
    code = spec.base_labels
    if phenotype == "diffuse":
        r_ed, r_et, r_core = rng.uniform(18, 21) * scale, rng.uniform(8, 9.5) * scale, rng.uniform(2.5, 3.3) * scale
        core = "NET"
    elif phenotype == "compact":
        r_ed, r_et, r_core = rng.uniform(12, 13.5) * scale, rng.uniform(9.5, 11) * scale, rng.uniform(3, 4) * scale
        core = "NET"
    else:
        r_ed, r_et, r_core = rng.uniform(14, 16) * scale, rng.uniform(10, 11.5) * scale, rng.uniform(7, 8.5) * scale
        core = "CC"
    lab[_ellipsoid(shape, center, r_ed * aniso)] = code["ED"]
    lab[_ellipsoid(shape, center, r_et * aniso)] = code["ET"]
    inner = _ellipsoid(shape, center + rng.uniform(-1, 1, 3) * scale, r_core * aniso)
    lab[inner] = code[core]
    if phenotype == "cystic":
        lab[_ellipsoid(shape, center + r_et * 0.45, np.full(3, 2.2 * scale))] = code["NET"]
    return lab


def image(labels: np.ndarray, seq: str, spec: TaskSpec, phenotype: str, rng: np.random.Generator) -> np.ndarray:
    means = _TISSUE_MEANS[seq]
    codes = (0, *(spec.base_labels[k] for k in ("ET", "NET", "CC", "ED")))
    img = np.zeros(labels.shape, np.float32)
    for c, m in zip(codes, means):
        img[labels == c] = m
    shift = {"diffuse": 0.0, "compact": 60.0, "cystic": -60.0}[phenotype]
    img[labels > 0] += shift
    img = ndimage.gaussian_filter(img, 0.8) + rng.normal(0, 25, labels.shape).astype(np.float32)
    return np.round(img).astype(np.int16)


def _speck_mask(ref: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Isolated 5-20 voxel blobs at least 5 voxels from tumour and from each other."""
    out = np.zeros(ref.shape, bool)
    forbidden = ndimage.binary_dilation(ref > 0, iterations=5)
    shape = np.array(ref.shape)
    placed = tries = 0
    while placed < n and tries < 1000:
        tries += 1
        size = int(rng.integers(5, 21))
        corner = rng.integers(3, shape - 6)
        blob = np.zeros((3, 3, 3), bool)
        blob.ravel()[rng.permutation(27)[:size]] = True
        lab, k = ndimage.label(blob, structure=np.ones((3, 3, 3)))
        if k != 1:
            continue  # keep each speck a single 26-connected component
        window = tuple(slice(int(a), int(a) + 3) for a in corner)
        guard = tuple(slice(max(int(a) - 5, 0), int(a) + 8) for a in corner)
        if forbidden[guard].any() or out[guard].any():
            continue
        out[window] |= blob
        placed += 1
    return out


def _jitter(labels: np.ndarray, err: CandidateErrors, rng: np.random.Generator) -> np.ndarray:
    out = labels.copy()
    if err.shift:
        axis = int(rng.integers(3))
        out = np.roll(out, int(rng.integers(-err.shift, err.shift + 1)), axis=axis)
    if rng.random() < err.jitter:
        wt = out > 0
        if rng.random() < 0.5:
            grown = ndimage.binary_dilation(wt) & ~wt
            nearest = ndimage.grey_dilation(out, size=(3, 3, 3))
            out[grown] = nearest[grown]
        else:
            out[wt & ~ndimage.binary_erosion(wt)] = 0
    return out


def _soft(labels: np.ndarray, codes: tuple[int, ...], sigma: float) -> np.ndarray:
    probs = np.stack([ndimage.gaussian_filter((labels == c).astype(np.float32), sigma, truncate=2.0) for c in codes])
    probs /= probs.sum(axis=0, keepdims=True)
    return probs.astype(np.float32)


def generate_corpus(
    out: str | Path,
    n_cases: int = 30,
    size: int = 64,
    n_folds: int = 2,
    seed: int = 0,
    candidates: dict[str, CandidateErrors] | None = None,
    spec: TaskSpec | None = None,
) -> Path:
    """Write images, references, candidate probability stacks and ``manifest.json``.

    Returns the manifest path. Output is a pure function of the arguments.
    """
    out = Path(out)
    spec = spec or builtin_task("PED")
    candidates = candidates or CANDIDATES
    shape = (size, size, size)
    codes = (0, *spec.codes)
    cases = []
    for i in range(n_cases):
        case_id = f"case{i:03d}"
        case_rng = np.random.default_rng([seed, i])
        phenotype = PHENOTYPES[i % len(PHENOTYPES)]
        ref = phantom(shape, phenotype, spec, case_rng)
        ref_path = out / "references" / f"{case_id}.nii.gz"
        save_label_volume(Volume(ref), ref_path)
        images = {}
        for seq in SEQUENCES:
            p = out / "images" / f"{case_id}_{seq}.nii.gz"
            save_volume(Volume(image(ref, seq, spec, phenotype, case_rng), kind=INTENSITY), p)
            images[seq] = p

        # systematic errors shared by every candidate
        base = ref.copy()
        if case_rng.random() < 0.5:
            base[_speck_mask(ref, int(case_rng.integers(1, 4)), case_rng)] = spec.base_labels["ET"]
        if phenotype == "diffuse" and case_rng.random() < 0.6:
            base[ref == spec.base_labels["NET"]] = spec.base_labels["ET"]

        cand_paths = {}
        for k, name in enumerate(sorted(candidates)):
            err = candidates[name]
            cand_rng = np.random.default_rng([seed, i, k + 1])
            folds = []
            for _ in range(n_folds):
                pred = _jitter(base, err, cand_rng)
                folds.append(ProbStack(_soft(pred, codes, err.blur), codes))
            descriptor = out / "candidates" / name / case_id / "stack.json"
            save_stack(folds, descriptor, stem=case_id)
            cand_paths[name] = descriptor
        cases.append(CaseManifest(case_id, ref_path, images, cand_paths))
        log.info("synth %s (%s)", case_id, phenotype)
    manifest = out / "manifest.json"
    save_manifest(cases, manifest, extra={"generator": {"n_cases": n_cases, "size": size, "n_folds": n_folds, "seed": seed}})
    return manifest
