"""Pipeline configuration: a JSON document mapped onto frozen dataclasses.

Every field has a default, so ``{}`` is a valid config. Unknown keys are
rejected to catch typos early. The config hash covers everything that can
change an output (``out`` and ``jobs`` are excluded; the seed is recorded
separately).
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .. import __version__
from ..metrics import DIRECTIONS, MetricParams
from ..postprocess import CC_GRID, RANK_METRICS, RATIO_GRID
from ..taskspec import TaskConfigError, TaskSpec, resolve_task


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 2)."""


@dataclass(frozen=True)
class StratifyConfig:
    k_min: int = 2
    k_max: int = 8
    variance_target: float = 0.90
    n_folds: int = 5
    bin_width: float = 25.0
    features_csv: str | None = None  # externally computed features, merged by name


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "weighted"  # or "staple"
    normalize: bool = True
    staple_max_iters: int = 100
    staple_tol: float = 1e-7


@dataclass(frozen=True)
class PPConfig:
    cc_grid: tuple[int, ...] = CC_GRID
    ratio_grid: tuple[float, ...] = RATIO_GRID
    min_offdiag: float = 0.10
    objective: str = "rank"  # or "mean_lw_dice"
    rank_metrics: tuple[str, ...] = RANK_METRICS


@dataclass(frozen=True)
class PipelineConfig:
    task: str | dict = "PED"
    task_file: str | None = None
    metrics: MetricParams = field(default_factory=MetricParams)
    rank_metrics: tuple[str, ...] = ("lw_dice", "lw_nsd")
    stratify: StratifyConfig = field(default_factory=StratifyConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    pp: PPConfig = field(default_factory=PPConfig)
    # how the report labels Dice columns; corpora differ, so it is always explicit
    metric_convention: str = "lesion-wise"
    seed: int = 0
    jobs: int | None = None
    out: str = "out"

    def __post_init__(self) -> None:
        m = self.metrics
        if not (m.tau > 0 and math.isfinite(m.tau)):
            raise ConfigError(f"metrics.tau must be > 0, got {m.tau}")
        for name in (*self.rank_metrics, *self.pp.rank_metrics):
            if name not in DIRECTIONS:
                raise ConfigError(f"unknown rank metric {name!r}; known: {sorted(DIRECTIONS)}")
        missing = set(self.rank_metrics) - set(m.metrics)
        if missing:
            raise ConfigError(f"rank_metrics {sorted(missing)} are not in metrics.metrics")
        s = self.stratify
        if not 2 <= s.k_min <= s.k_max:
            raise ConfigError(f"stratify needs 2 <= k_min <= k_max, got {s.k_min}..{s.k_max}")
        if not 0 < s.variance_target <= 1:
            raise ConfigError("stratify.variance_target must be in (0, 1]")
        if s.n_folds < 2:
            raise ConfigError("stratify.n_folds must be >= 2")
        if s.bin_width <= 0:
            raise ConfigError("stratify.bin_width must be > 0")
        if s.features_csv and not Path(s.features_csv).exists():
            raise ConfigError(f"stratify.features_csv not found: {s.features_csv}")
        if self.task_file and not Path(self.task_file).exists():
            raise ConfigError(f"task_file not found: {self.task_file}")
        if self.fusion.mode not in ("weighted", "staple"):
            raise ConfigError(f"fusion.mode must be 'weighted' or 'staple', got {self.fusion.mode!r}")
        if self.pp.objective not in ("rank", "mean_lw_dice"):
            raise ConfigError(f"pp.objective must be 'rank' or 'mean_lw_dice', got {self.pp.objective!r}")
        if any(g < 0 for g in self.pp.cc_grid) or any(not 0 <= t <= 1 for t in self.pp.ratio_grid):
            raise ConfigError("pp grids must be >= 0 (cc) and within [0, 1] (ratio)")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.metric_convention not in ("lesion-wise", "global"):
            raise ConfigError("metric_convention must be 'lesion-wise' or 'global'")
        self.task_spec()  # fail fast on a bad task reference

    def task_spec(self) -> TaskSpec:
        try:
            return resolve_task(self.task, self.task_file)
        except TaskConfigError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def n_jobs(self) -> int:
        return self.jobs or os.cpu_count() or 1

    def to_json(self) -> dict:
        d = asdict(self)
        d["metrics"] = self.metrics.to_json()
        return d

    def config_hash(self) -> str:
        d = self.to_json()
        for volatile in ("out", "jobs", "seed"):
            d.pop(volatile)
        d["task"] = self.task_spec().to_json() | {"name": self.task_spec().name}
        d.pop("task_file")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed, "version": __version__}

    def stamp(self) -> str:
        """Short provenance text for file headers."""
        return f"tumorpipe cfg={self.config_hash()} seed={self.seed}"


def _build(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected an object, got {type(payload).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(payload) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in payload.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(payload: dict, base_dir: str | Path | None = None) -> PipelineConfig:
    """Build a config; relative file paths resolve against ``base_dir``."""
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    payload = dict(payload)
    nested = {"metrics": MetricParams, "stratify": StratifyConfig, "fusion": FusionConfig, "pp": PPConfig}
    for key, cls in nested.items():
        if key in payload:
            payload[key] = _build(cls, payload[key], key)
    if base_dir is not None:
        base = Path(base_dir)
        if payload.get("task_file"):
            payload["task_file"] = str(base / payload["task_file"])
        strat = payload.get("stratify")
        if strat is not None and strat.features_csv:
            payload["stratify"] = replace(strat, features_csv=str(base / strat.features_csv))
    return _build(PipelineConfig, payload, "config")


def load_config(path: str | Path | None, **overrides) -> PipelineConfig:
    """Read a JSON config (or defaults when ``path`` is None) and apply non-None overrides."""
    payload: dict = {}
    base = None
    if path is not None:
        path = Path(path)
        try:
            payload = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        base = path.parent
    cfg = config_from_dict(payload, base)
    changes = {k: v for k, v in overrides.items() if v is not None}
    if changes:
        try:
            cfg = replace(cfg, **changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg
