"""Label schemas for each segmentation task and region-mask materialization."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .volio import LABEL, Volume

BUILTIN_TASKS = ("PED", "MEN", "MEN-RT", "MET")


class TaskConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """Base labels (name -> on-disk code) and composite regions.

    ``regions`` keeps declaration order; it drives metric table and report
    ordering everywhere downstream.
    """

    name: str
    base_labels: dict[str, int]
    regions: tuple[tuple[str, frozenset[str]], ...]
    wt_region: str

    def __post_init__(self) -> None:
        codes = list(self.base_labels.values())
        if len(set(codes)) != len(codes):
            raise TaskConfigError(f"{self.name}: duplicate label codes {codes}")
        if any(c <= 0 for c in codes):
            raise TaskConfigError(f"{self.name}: label codes must be > 0")
        seen = set()
        for rname, members in self.regions:
            if rname in seen:
                raise TaskConfigError(f"{self.name}: region {rname} declared twice")
            seen.add(rname)
            if not members:
                raise TaskConfigError(f"{self.name}: region {rname} is empty")
            unknown = set(members) - set(self.base_labels)
            if unknown:
                raise TaskConfigError(f"{self.name}: region {rname} uses undeclared labels {sorted(unknown)}")
        if self.wt_region not in seen:
            raise TaskConfigError(f"{self.name}: whole-tumor region {self.wt_region!r} not declared")

    @property
    def label_names(self) -> list[str]:
        return list(self.base_labels)

    @property
    def codes(self) -> list[int]:
        return list(self.base_labels.values())

    @property
    def region_names(self) -> list[str]:
        return [r for r, _ in self.regions]

    def region_labels(self, region: str) -> frozenset[str]:
        for rname, members in self.regions:
            if rname == region:
                return members
        raise KeyError(f"region {region!r} not declared in task {self.name}")

    def region_codes(self, region: str) -> list[int]:
        return sorted(self.base_labels[lbl] for lbl in self.region_labels(region))

    def label_of_code(self, code: int) -> str:
        for name, c in self.base_labels.items():
            if c == code:
                return name
        raise KeyError(code)

    def regions_containing(self, label: str) -> list[str]:
        return [r for r, members in self.regions if label in members]

    def to_json(self) -> dict:
        return {
            "labels": dict(self.base_labels),
            "regions": [[r, sorted(m, key=self.label_names.index)] for r, m in self.regions],
            "wt_region": self.wt_region,
        }


def _from_json(name: str, payload: dict) -> TaskSpec:
    try:
        return TaskSpec(
            name=name,
            base_labels={str(k): int(v) for k, v in payload["labels"].items()},
            regions=tuple((str(r), frozenset(m)) for r, m in payload["regions"]),
            wt_region=str(payload["wt_region"]),
        )
    except (KeyError, TypeError) as exc:
        raise TaskConfigError(f"task {name}: malformed definition ({exc})") from exc


def load_task_file(path: str | Path) -> dict[str, TaskSpec]:
    """Read a task file: ``{task_name: {labels, regions, wt_region}}``."""
    payload = json.loads(Path(path).read_text())
    return {name: _from_json(name, body) for name, body in payload.items()}


def builtin_task(name: str, task_file: str | Path | None = None) -> TaskSpec:
    if task_file is not None:
        specs = load_task_file(task_file)
    else:
        text = resources.files("tumorpipe").joinpath("data/tasks.json").read_text()
        specs = {n: _from_json(n, body) for n, body in json.loads(text).items()}
    if name not in specs:
        raise TaskConfigError(f"unknown task {name!r}; known: {sorted(specs)}")
    return specs[name]


def resolve_task(ref: str | dict, task_file: str | Path | None = None) -> TaskSpec:
    """Accept a builtin name or an inline ``{"name", "labels", ...}`` mapping."""
    if isinstance(ref, dict):
        return _from_json(ref.get("name", "custom"), ref)
    return builtin_task(ref, task_file)


def region_array(labels: np.ndarray, region: str, spec: TaskSpec) -> np.ndarray:
    """Boolean array: voxel code belongs to the region's label set."""
    codes = spec.region_codes(region)
    if len(codes) == 1:
        return labels == codes[0]
    return np.isin(labels, codes)


def region_mask(v: Volume, region: str, spec: TaskSpec) -> Volume:
    if v.kind != LABEL:
        raise ValueError("region_mask needs a label volume")
    return v.with_data(region_array(v.data, region, spec))
