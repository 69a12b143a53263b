"""Vitals -> feature matrix.

Temperature, systolic BP and heart rate are z-scored; SATS, respiratory
rate and consciousness go through a bounded logit. Column order is fixed
by ``FEATURES``.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .ingest import Cohort

log = logging.getLogger(__name__)

FEATURES = ["temperature", "sbp", "heart_rate", "sats", "resp_rate", "consciousness"]
SCALED = FEATURES[:3]
LOGIT = FEATURES[3:]

DEFAULT_BOUNDS = {
    "sats": (0.0, 100.0),
    "resp_rate": (0.0, 60.0),
    "consciousness": (0.0, 1.0),
}


class DegenerateColumnWarning(UserWarning):
    pass


@dataclass
class ScalerParams:
    means: dict[str, float]
    sds: dict[str, float]
    bounds: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    clip_eps: float = 1e-3
    # z-score the logit columns as well (off by default)
    scale_after_logit: bool = False
    logit_means: dict[str, float] = field(default_factory=dict)
    logit_sds: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 0.5:
            raise ValueError(f"clip_eps must lie in (0, 0.5), got {self.clip_eps}")
        for name, (lo, hi) in self.bounds.items():
            if not hi > lo:
                raise ValueError(f"logit bounds for {name} need upper > lower")
        self.bounds = {k: tuple(map(float, v)) for k, v in self.bounds.items()}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScalerParams":
        data = json.loads(text)
        data["bounds"] = {k: tuple(v) for k, v in data["bounds"].items()}
        return cls(**data)


@dataclass
class FeatureMatrix:
    row_ids: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.row_ids):
            raise ValueError("values must be n x d and aligned with row_ids")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite entries")

    def __len__(self) -> int:
        return len(self.row_ids)

    def take(self, order) -> "FeatureMatrix":
        order = np.asarray(order)
        return FeatureMatrix([self.row_ids[i] for i in order], self.values[order])

    def to_csv(self) -> str:
        lines = ["admission_id," + ",".join(FEATURES)]
        for rid, row in zip(self.row_ids, self.values):
            lines.append(rid + "," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "FeatureMatrix":
        lines = text.strip().splitlines()
        if lines[0].split(",") != ["admission_id"] + FEATURES:
            raise ValueError("unexpected feature matrix header")
        ids, rows = [], []
        for line in lines[1:]:
            rid, *vals = line.split(",")
            ids.append(rid)
            rows.append([float(v) for v in vals])
        return cls(ids, np.array(rows, dtype=np.float64).reshape(len(ids), len(FEATURES)))


def standard_scale(column) -> tuple[np.ndarray, float, float]:
    """Z-score with the population sd. A constant column maps to zeros."""
    x = np.asarray(column, dtype=np.float64)
    if x.size == 0:
        raise ValueError("standard_scale needs a non-empty column")
    mean = float(x.mean())
    sd = float(x.std(ddof=0))
    if sd == 0.0 or not np.isfinite(sd):
        warnings.warn("constant column scaled to zeros", DegenerateColumnWarning, stacklevel=2)
        return np.zeros_like(x), mean, 0.0
    return (x - mean) / sd, mean, sd


def logit_transform(value, lower: float, upper: float, clip_eps: float = 1e-3):
    """ln(p / (1 - p)) for p = (value - lower) / (upper - lower), p clipped
    to [clip_eps, 1 - clip_eps]. Works elementwise on arrays."""
    if not upper > lower:
        raise ValueError("upper must exceed lower")
    p = (np.asarray(value, dtype=np.float64) - lower) / (upper - lower)
    p = np.clip(p, clip_eps, 1.0 - clip_eps)
    out = np.log(p / (1.0 - p))
    return float(out) if out.ndim == 0 else out


def inverse_logit(z, lower: float, upper: float):
    p = 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))
    return lower + p * (upper - lower)


def raw_vitals(cohort: Cohort) -> np.ndarray:
    """n x 6 raw vitals in FEATURES order; consciousness encoded 0/1."""
    out = np.empty((len(cohort), len(FEATURES)), dtype=np.float64)
    for i, (_, vs) in enumerate(cohort.records):
        out[i] = (vs.temperature, vs.sbp, vs.heart_rate, vs.sats, vs.resp_rate,
                  1.0 if vs.limited else 0.0)
    return out


def transform(raw: np.ndarray, params: ScalerParams) -> np.ndarray:
    """Apply fitted params to raw vitals (n x 6, FEATURES order)."""
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty_like(raw)
    for j, name in enumerate(FEATURES):
        if name in SCALED:
            sd = params.sds[name]
            out[:, j] = 0.0 if sd == 0.0 else (raw[:, j] - params.means[name]) / sd
        else:
            lo, hi = params.bounds[name]
            out[:, j] = logit_transform(raw[:, j], lo, hi, params.clip_eps)
            if params.scale_after_logit:
                sd = params.logit_sds[name]
                out[:, j] = 0.0 if sd == 0.0 else (out[:, j] - params.logit_means[name]) / sd
    return out


def inverse_transform(values: np.ndarray, params: ScalerParams) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    for j, name in enumerate(FEATURES):
        col = values[:, j]
        if name in SCALED:
            out[:, j] = col * params.sds[name] + params.means[name]
        else:
            if params.scale_after_logit:
                col = col * params.logit_sds[name] + params.logit_means[name]
            lo, hi = params.bounds[name]
            out[:, j] = inverse_logit(col, lo, hi)
    return out


def assemble_matrix(
    cohort: Cohort,
    bounds: dict[str, tuple[float, float]] | None = None,
    clip_eps: float = 1e-3,
    scale_after_logit: bool = False,
) -> tuple[FeatureMatrix, ScalerParams]:
    if len(cohort) == 0:
        raise ValueError("assemble_matrix needs a non-empty cohort")
    raw = raw_vitals(cohort)
    bounds = dict(DEFAULT_BOUNDS if bounds is None else bounds)

    means, sds = {}, {}
    for j, name in enumerate(SCALED):
        _, means[name], sds[name] = standard_scale(raw[:, j])

    logit_means, logit_sds = {}, {}
    if scale_after_logit:
        for j, name in enumerate(FEATURES):
            if name in LOGIT:
                lo, hi = bounds[name]
                z = logit_transform(raw[:, j], lo, hi, clip_eps)
                _, logit_means[name], logit_sds[name] = standard_scale(z)

    params = ScalerParams(means, sds, bounds, clip_eps, scale_after_logit, logit_means, logit_sds)
    return FeatureMatrix(cohort.admission_ids, transform(raw, params)), params
