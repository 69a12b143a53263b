"""Pipeline configuration: YAML file, CLI overrides, validation."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .preprocess import DEFAULT_BOUNDS

# reference cohort size that the default min_cluster_size of 100 refers to
REFERENCE_COHORT = 95_825
REFERENCE_MIN_CLUSTER_SIZE = 100


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


@dataclass
class PathsSection:
    admissions: str | None = None
    vitals: str | None = None
    out: str = "out"


@dataclass
class SynthSection:
    n_admissions: int = 20_000
    missing_rate: float = 0.0
    short_stay_rate: float = 0.0
    include_minor_limited: bool = False


@dataclass
class PreprocessSection:
    clip_eps: float = 1e-3
    scale_after_logit: bool = False
    bounds: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_BOUNDS.items()})


@dataclass
class UmapSection:
    n_neighbors: int = 15
    min_dist: float = 0.1
    spread: float = 1.0
    n_epochs: int = 500
    negative_sample_rate: int = 5
    initial_lr: float = 1.0
    repulsion_strength: float = 1.0


@dataclass
class HdbscanSection:
    # None scales 100 by cohort size relative to the reference cohort
    min_cluster_size: int | None = None
    min_samples: int | None = None
    allow_single_cluster: bool = False


@dataclass
class ExplainSection:
    n_samples: int = 25_000
    mutation_sd_scale: float = 0.3
    tree_max_depth: int = 4
    min_leaf: int = 50


@dataclass
class ReportSection:
    icd10_threshold: float = 2.0
    per_cluster: int = 10
    plots: bool = False


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    paths: PathsSection = field(default_factory=PathsSection)
    synth: SynthSection = field(default_factory=SynthSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    umap: UmapSection = field(default_factory=UmapSection)
    hdbscan: HdbscanSection = field(default_factory=HdbscanSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    report: ReportSection = field(default_factory=ReportSection)

    # ---- serialisation ------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "PipelineConfig":
        return _build(cls, data or {}, "")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "PipelineConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("<root>", f"unreadable YAML: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError("<root>", "config file must hold a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_yaml(Path(path).read_text())

    def hash(self) -> str:
        """Digest of everything except file locations."""
        data = self.to_dict()
        data.pop("paths")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # ---- derived values -------------------------------------------------

    def min_cluster_size_for(self, n: int) -> int:
        if self.hdbscan.min_cluster_size is not None:
            return self.hdbscan.min_cluster_size
        return max(5, int(round(REFERENCE_MIN_CLUSTER_SIZE * n / REFERENCE_COHORT)))

    @property
    def deterministic(self) -> bool:
        return self.threads == 1

    # ---- validation -----------------------------------------------------

    def validate(self) -> "PipelineConfig":
        def need(ok: bool, name: str, message: str):
            if not ok:
                raise ConfigError(name, message)

        need(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be a non-negative integer")
        need(isinstance(self.threads, int) and self.threads >= 1, "threads", "must be >= 1")
        need(bool(self.paths.out), "paths.out", "must be non-empty")
        need((self.paths.admissions is None) == (self.paths.vitals is None), "paths.vitals",
             "admissions and vitals paths must be given together")

        s = self.synth
        need(s.n_admissions >= 1, "synth.n_admissions", "must be >= 1")
        need(0 <= s.missing_rate < 1, "synth.missing_rate", "must lie in [0, 1)")
        need(0 <= s.short_stay_rate < 1, "synth.short_stay_rate", "must lie in [0, 1)")
        need(s.missing_rate + s.short_stay_rate < 1, "synth.short_stay_rate",
             "defect rates must sum to less than 1")

        p = self.preprocess
        need(0 < p.clip_eps < 0.5, "preprocess.clip_eps", "must lie in (0, 0.5)")
        for name in ("sats", "resp_rate", "consciousness"):
            b = p.bounds.get(name)
            need(b is not None and len(b) == 2, f"preprocess.bounds.{name}", "needs [lower, upper]")
            need(b[1] > b[0], f"preprocess.bounds.{name}", "upper must exceed lower")

        u = self.umap
        need(u.n_neighbors >= 2, "umap.n_neighbors", "must be >= 2")
        need(u.min_dist > 0, "umap.min_dist", "must be > 0")
        need(u.spread > 0, "umap.spread", "must be > 0")
        need(u.min_dist <= u.spread, "umap.min_dist", "must not exceed umap.spread")
        need(u.n_epochs >= 0, "umap.n_epochs", "must be >= 0")
        need(u.negative_sample_rate >= 0, "umap.negative_sample_rate", "must be >= 0")
        need(u.initial_lr > 0, "umap.initial_lr", "must be > 0")
        need(u.repulsion_strength >= 0, "umap.repulsion_strength", "must be >= 0")

        h = self.hdbscan
        need(h.min_cluster_size is None or h.min_cluster_size >= 2, "hdbscan.min_cluster_size", "must be >= 2")
        need(h.min_samples is None or h.min_samples >= 1, "hdbscan.min_samples", "must be >= 1")

        e = self.explain
        need(e.n_samples >= 1, "explain.n_samples", "must be >= 1")
        need(0 < e.mutation_sd_scale <= 1, "explain.mutation_sd_scale", "must lie in (0, 1]")
        need(e.tree_max_depth >= 0, "explain.tree_max_depth", "must be >= 0")
        need(e.min_leaf >= 1, "explain.min_leaf", "must be >= 1")

        r = self.report
        need(0 <= r.icd10_threshold <= 100, "report.icd10_threshold", "must lie in [0, 100]")
        need(r.per_cluster >= 1, "report.per_cluster", "must be >= 1")
        return self

    def check_cohort_size(self, n: int) -> None:
        """Checks that depend on the number of admissions."""
        if self.umap.n_neighbors >= n:
            raise ConfigError("umap.n_neighbors", f"must be < number of admissions ({n})")
        mcs = self.min_cluster_size_for(n)
        ms = self.hdbscan.min_samples if self.hdbscan.min_samples is not None else mcs
        if ms > n - 1:
            field_name = "hdbscan.min_samples" if self.hdbscan.min_samples is not None else "hdbscan.min_cluster_size"
            raise ConfigError(field_name, f"min_samples {ms} must be <= n - 1 ({n - 1})")


def _coerce(value, annotation: str, name: str):
    kinds = {part.strip() for part in annotation.split("|")}
    if value is None:
        if "None" in kinds:
            return None
        raise ConfigError(name, "may not be null")
    if "bool" in kinds:
        if isinstance(value, bool):
            return value
        raise ConfigError(name, f"expected a boolean, got {value!r}")
    if "int" in kinds:
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return int(value)
    if "float" in kinds:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(name, f"expected a finite number, got {value!r}")
        return float(value)
    if "str" in kinds:
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if "dict" in kinds:
        if not isinstance(value, dict):
            raise ConfigError(name, f"expected a mapping, got {value!r}")
        out = {}
        for k, v in value.items():
            if not isinstance(v, (list, tuple)) or len(v) != 2:
                raise ConfigError(f"{name}.{k}", "expected [lower, upper]")
            out[k] = [_coerce(x, "float", f"{name}.{k}") for x in v]
        return out
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}{key}", "unknown field")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        default = f.default if f.default_factory is MISSING else f.default_factory()
        if is_dataclass(default):
            kwargs[name] = _build(type(default), data[name] or {}, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(data[name], str(f.type), f"{prefix}{name}")
    return cls(**kwargs)


def set_field(config: PipelineConfig, dotted: str, value) -> None:
    """Assign a dotted field such as ``umap.n_neighbors``, with coercion."""
    *parents, leaf = dotted.split(".")
    obj = config
    for part in parents:
        obj = getattr(obj, part)
    f = {x.name: x for x in fields(obj)}[leaf]
    setattr(obj, leaf, _coerce(value, str(f.type), dotted))
