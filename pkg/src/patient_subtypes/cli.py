"""Command line pipeline: synth -> ingest -> embed -> cluster -> explain -> report.

Each stage reads its predecessor's artifacts from the output root and
records input/output digests in ``manifest.json``. Wall-clock timings go to
``timings.json`` so the manifest itself stays reproducible.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import report as rpt
from .config import ConfigError, PipelineConfig, set_field
from .hdbscan_cluster import ClusterLabels, HdbscanConfig, cluster
from .ingest import (cohort_summary, cohort_to_csv, filter_cohort, load_cohort,
                     parse_admissions)
from .preprocess import FeatureMatrix, assemble_matrix
from .surrogate import ExplainerConfig, explain_all_clusters, explanations_csv, explanations_json, trees_json
from .synth import default_paper_spec, degrade_cohort, generate_cohort
from .umap_embed import Embedding2D, UmapConfig, embed

log = logging.getLogger("patient_subtypes")

STAGES = ["synth", "ingest", "embed", "cluster", "explain", "report"]
EXIT_FAILURE = 1
EXIT_MISSING = 2
EXIT_CONFIG = 3

# flag -> dotted config field
FLAG_FIELDS = {
    "seed": "seed",
    "threads": "threads",
    "out": "paths.out",
    "admissions": "paths.admissions",
    "vitals": "paths.vitals",
    "n_admissions": "synth.n_admissions",
    "missing_rate": "synth.missing_rate",
    "short_stay_rate": "synth.short_stay_rate",
    "n_neighbors": "umap.n_neighbors",
    "min_dist": "umap.min_dist",
    "n_epochs": "umap.n_epochs",
    "min_cluster_size": "hdbscan.min_cluster_size",
    "min_samples": "hdbscan.min_samples",
    "n_samples": "explain.n_samples",
    "threshold": "report.icd10_threshold",
    "per_cluster": "report.per_cluster",
}


class MissingArtifact(RuntimeError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"stage {stage!r} needs {path}; run the preceding stage first")
        self.stage = stage
        self.path = path


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Output layout under one root directory."""

    def __init__(self, root):
        self.root = Path(root)

    def dir(self, stage_dir: str) -> Path:
        d = self.root / stage_dir
        d.mkdir(parents=True, exist_ok=True)
        return d

    def path(self, rel: str) -> Path:
        return self.root / rel

    def rel(self, path: Path) -> str:
        path = Path(path)
        try:
            return path.resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return str(path)

    def require(self, stage: str, *rels: str) -> list[Path]:
        paths = [self.path(r) for r in rels]
        for p in paths:
            if not p.is_file():
                raise MissingArtifact(stage, p)
        return paths

    def _load_json(self, name: str) -> dict:
        p = self.root / name
        return json.loads(p.read_text()) if p.is_file() else {}

    def record(self, stage: str, config: PipelineConfig, inputs: list[Path], outputs: list[Path],
               seconds: float) -> None:
        manifest = self._load_json("manifest.json")
        manifest.setdefault("stages", {})[stage] = {
            "stage": stage,
            "config_hash": config.hash(),
            "seed": config.seed,
            "inputs": {self.rel(p): sha256_file(p) for p in inputs},
            "outputs": {self.rel(p): sha256_file(p) for p in outputs},
        }
        manifest["config_hash"] = config.hash()
        (self.root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        timings = self._load_json("timings.json")
        timings[stage] = round(seconds, 3)
        (self.root / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _clear(d: Path, *patterns: str) -> None:
    """Drop per-cluster files left by an earlier run with other clusters."""
    for pattern in patterns:
        for p in d.glob(pattern):
            p.unlink()


def _json(path: Path, payload) -> Path:
    rpt.write_json(path, payload)
    return path


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def run_synth(config: PipelineConfig, ws: Workspace):
    s = config.synth
    spec = default_paper_spec(s.n_admissions, seed=config.seed, include_minor_limited=s.include_minor_limited)
    adm, vit, planted = generate_cohort(spec)
    adm, vit, manifest = degrade_cohort(adm, vit, s.missing_rate, s.short_stay_rate, seed=config.seed)
    d = ws.dir("synth")
    outputs = [
        _write(d / "admissions.csv", adm),
        _write(d / "vitals.csv", vit),
        _write(d / "planted_labels.csv", planted),
        _json(d / "degradation.json", manifest.to_dict()),
    ]
    return [], outputs


def _input_csvs(config: PipelineConfig, ws: Workspace) -> list[Path]:
    if config.paths.admissions is not None:
        paths = [Path(config.paths.admissions), Path(config.paths.vitals)]
        for p in paths:
            if not p.is_file():
                raise MissingArtifact("ingest", p)
        return paths
    return ws.require("ingest", "synth/admissions.csv", "synth/vitals.csv")


def run_ingest(config: PipelineConfig, ws: Workspace):
    inputs = _input_csvs(config, ws)
    records, vitals, rejects = parse_admissions(inputs[0].read_text(), inputs[1].read_text())
    cohort = filter_cohort(records, vitals)
    config.check_cohort_size(len(cohort))
    p = config.preprocess
    features, scaler = assemble_matrix(cohort, {k: tuple(v) for k, v in p.bounds.items()}, p.clip_eps,
                                       p.scale_after_logit)
    adm_csv, vit_csv = cohort_to_csv(cohort)
    d = ws.dir("cohort")
    reject_lines = ["source,line,reason"] + [f'{r.source},{r.line},"{r.reason}"' for r in rejects]
    outputs = [
        _write(d / "admissions.csv", adm_csv),
        _write(d / "vitals.csv", vit_csv),
        _json(d / "filter_log.json", {**cohort.filter_log, "parse_rejects": len(rejects),
                                      "n_admissions": len(cohort)}),
        _write(d / "rejects.csv", "\n".join(reject_lines) + "\n"),
        _json(d / "summary.json", cohort_summary(cohort)),
        _write(d / "features.csv", features.to_csv()),
        _write(d / "scaler.json", scaler.to_json() + "\n"),
    ]
    log.info("ingest: %d admissions kept, filter log %s", len(cohort), cohort.filter_log)
    return inputs, outputs


def run_embed(config: PipelineConfig, ws: Workspace):
    inputs = ws.require("embed", "cohort/features.csv", "cohort/scaler.json")
    features = FeatureMatrix.from_csv(inputs[0].read_text())
    config.check_cohort_size(len(features))
    u = config.umap
    ucfg = UmapConfig(n_neighbors=u.n_neighbors, min_dist=u.min_dist, spread=u.spread, n_epochs=u.n_epochs,
                      negative_sample_rate=u.negative_sample_rate, initial_lr=u.initial_lr,
                      repulsion_strength=u.repulsion_strength, seed=config.seed,
                      deterministic=config.deterministic)
    model = embed(features, ucfg)
    d = ws.dir("embedding")
    outputs = [
        _write(d / "embedding.csv", model.embedding.to_csv()),
        _write(d / "model.json", model.state_json(scaler_ref="cohort/scaler.json") + "\n"),
    ]
    return inputs, outputs


def run_cluster(config: PipelineConfig, ws: Workspace):
    inputs = ws.require("cluster", "embedding/embedding.csv")
    emb = Embedding2D.from_csv(inputs[0].read_text())
    config.check_cohort_size(len(emb.row_ids))
    hcfg = HdbscanConfig(min_cluster_size=config.min_cluster_size_for(len(emb.row_ids)),
                         min_samples=config.hdbscan.min_samples,
                         allow_single_cluster=config.hdbscan.allow_single_cluster, seed=config.seed)
    result = cluster(emb, hcfg)
    labels = result.labels
    if labels.n_clusters == 0:
        log.warning("clustering found no clusters; every point is noise")
    d = ws.dir("clusters")
    outputs = [
        _write(d / "labels.csv", labels.to_csv()),
        _write(d / "condensed_tree.json", result.tree.to_json() + "\n"),
        _json(d / "summary.json", {
            "n_clusters": labels.n_clusters,
            "sizes": labels.sizes(),
            "noise_share": labels.noise_share(),
            "min_cluster_size": hcfg.min_cluster_size,
            "min_samples": hcfg.effective_min_samples,
            "mst_total_weight": result.mst.total_weight(),
        }),
    ]
    return inputs, outputs


def run_explain(config: PipelineConfig, ws: Workspace):
    inputs = ws.require("explain", "cohort/features.csv", "clusters/labels.csv", "embedding/embedding.csv")
    features = FeatureMatrix.from_csv(inputs[0].read_text())
    labels = ClusterLabels.from_csv(inputs[1].read_text())
    emb = Embedding2D.from_csv(inputs[2].read_text())
    coords = dict(zip(emb.row_ids, emb.coords))
    if list(labels.row_ids) != list(features.row_ids):
        raise ValueError("cluster labels are not aligned with the feature matrix")
    e = config.explain
    ecfg = ExplainerConfig(n_samples=e.n_samples, mutation_sd_scale=e.mutation_sd_scale,
                           tree_max_depth=e.tree_max_depth, min_leaf=e.min_leaf, seed=config.seed)
    d = ws.dir("explanations")
    _clear(d, "samples_*.npy", "sample_labels_*.npy", "anchors_*.csv")
    if labels.n_clusters == 0:
        log.warning("no clusters to explain")
        explanations = {}
    else:
        explanations = explain_all_clusters(features, labels, ecfg)
    outputs = [
        _write(d / "importances.json", explanations_json(explanations) + "\n"),
        _write(d / "importances.csv", explanations_csv(explanations)),
        _write(d / "trees.json", trees_json(explanations) + "\n"),
    ]
    for k, ex in sorted(explanations.items()):
        if ex.samples is None:
            continue
        np.save(d / f"samples_{k}.npy", ex.samples)
        np.save(d / f"sample_labels_{k}.npy", ex.sample_labels.astype(np.int8))
        # embedding position of each sample's nearest cohort row, for eyeballing the samples
        ids = [features.row_ids[i] for i in ex.anchors]
        xy = np.array([coords[i] for i in ids])
        anchors = pd.DataFrame({"sample": np.arange(len(ids)), "anchor_admission_id": ids,
                                "x": xy[:, 0], "y": xy[:, 1]})
        outputs += [d / f"samples_{k}.npy", d / f"sample_labels_{k}.npy",
                    _write(d / f"anchors_{k}.csv", anchors.to_csv(index=False))]
    return inputs, outputs


def run_report(config: PipelineConfig, ws: Workspace):
    inputs = ws.require("report", "cohort/admissions.csv", "cohort/vitals.csv", "cohort/filter_log.json",
                        "embedding/embedding.csv", "clusters/labels.csv")
    filter_log = json.loads(inputs[2].read_text())
    cohort = load_cohort(inputs[0].read_text(), inputs[1].read_text(),
                         {k: filter_log[k] for k in ("short_stay", "no_vitals_24h")})
    emb = Embedding2D.from_csv(inputs[3].read_text())
    labels = ClusterLabels.from_csv(inputs[4].read_text())
    r = config.report
    d = ws.dir("report")
    _clear(d, "sample_pack_*.json", "*.png")

    summaries = rpt.summarize_clusters(cohort, labels)
    diffs = rpt.percent_diff_table(cohort, labels)
    heat = rpt.icd10_heatmap(cohort, labels, r.icd10_threshold)
    overlays = rpt.export_overlays(cohort, emb, labels)
    packs = rpt.sample_for_clinicians(cohort, labels, r.per_cluster, config.seed, emb, summaries)

    diff_frame = rpt.pd.DataFrame([rpt.asdict(x) for x in diffs])
    outputs = [
        _write(d / "cluster_summary.csv", rpt.summaries_frame(summaries).to_csv(index=False)),
        _write(d / "percent_diff.csv", diff_frame.to_csv(index=False)),
        _write(d / "icd10_heatmap.csv", heat.to_csv()),
        _write(d / "overlays.csv", overlays.to_csv(index=False)),
    ]
    for k, pack in packs.items():
        outputs.append(_json(d / f"sample_pack_{k}.json", pack))
    if r.plots:
        rpt.plot_overlays(overlays, d / "embedding.png")
        outputs.append(d / "embedding.png")
        if len(diff_frame):
            rpt.plot_percent_diff(diff_frame, d / "percent_diff.png")
            outputs.append(d / "percent_diff.png")
    index = {
        "config_hash": config.hash(),
        "seeds": {"global": config.seed, "umap": config.seed, "hdbscan": config.seed,
                  "explain": config.seed, "sample_packs": config.seed},
        "inputs": {ws.rel(p): sha256_file(p) for p in inputs},
        "artifacts": sorted(p.name for p in outputs),
    }
    outputs.append(_json(d / "index.json", index))
    return inputs, outputs


RUNNERS = {
    "synth": run_synth,
    "ingest": run_ingest,
    "embed": run_embed,
    "cluster": run_cluster,
    "explain": run_explain,
    "report": run_report,
}


def run_stage(stage: str, config: PipelineConfig, ws: Workspace) -> None:
    t0 = time.perf_counter()
    log.info("stage %s", stage)
    inputs, outputs = RUNNERS[stage](config, ws)
    ws.record(stage, config, inputs, outputs, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patient-subtypes",
                                     description="Unsupervised subtyping of admission vitals.")
    parser.add_argument("stage", choices=STAGES + ["all"], help="stage to run, or all of them in order")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--out", help="output root (default: $PIPELINE_OUT or ./out)")
    parser.add_argument("--admissions", help="admissions CSV (default: synthetic cohort)")
    parser.add_argument("--vitals", help="vitals CSV (default: synthetic cohort)")
    parser.add_argument("--n-admissions", type=int, dest="n_admissions")
    parser.add_argument("--missing-rate", type=float, dest="missing_rate")
    parser.add_argument("--short-stay-rate", type=float, dest="short_stay_rate")
    parser.add_argument("--n-neighbors", type=int, dest="n_neighbors")
    parser.add_argument("--min-dist", type=float, dest="min_dist")
    parser.add_argument("--n-epochs", type=int, dest="n_epochs")
    parser.add_argument("--min-cluster-size", type=int, dest="min_cluster_size")
    parser.add_argument("--min-samples", type=int, dest="min_samples")
    parser.add_argument("--n-samples", type=int, dest="n_samples")
    parser.add_argument("--threshold", type=float, help="ICD10 heatmap retention threshold (percent)")
    parser.add_argument("--per-cluster", type=int, dest="per_cluster")
    parser.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace, environ=os.environ) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.out is None and not (args.config and _file_sets_out(args.config)) and environ.get("PIPELINE_OUT"):
        config.paths.out = environ["PIPELINE_OUT"]
    for flag, dotted in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            set_field(config, dotted, value)
    return config.validate()


def _file_sets_out(path) -> bool:
    import yaml

    data = yaml.safe_load(Path(path).read_text()) or {}
    return "out" in (data.get("paths") or {})


def _set_threads(n: int) -> None:
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _error(code: int, kind: str, message: str, **extra) -> int:
    record = {"status": "error", "exit_code": code, "kind": kind, "message": message, **extra}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.filterwarnings("ignore", module="numba")
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        return _error(EXIT_CONFIG, "config", exc.message, field=exc.field)
    except OSError as exc:
        return _error(EXIT_MISSING, "missing_config", str(exc), path=str(args.config))
    if args.dump_config:
        sys.stdout.write(config.to_yaml())
        return 0

    _set_threads(config.threads)
    ws = Workspace(config.paths.out)
    ws.root.mkdir(parents=True, exist_ok=True)
    _write(ws.root / "config.yaml", config.to_yaml())
    stages = STAGES if args.stage == "all" else [args.stage]
    stage = stages[0]
    try:
        for stage in stages:
            run_stage(stage, config, ws)
    except ConfigError as exc:
        return _error(EXIT_CONFIG, "config", exc.message, field=exc.field, stage=stage)
    except MissingArtifact as exc:
        return _error(EXIT_MISSING, "missing_artifact", str(exc), stage=exc.stage, path=str(exc.path))
    except Exception as exc:  # reported as a record rather than a traceback
        log.debug("stage %s failed", stage, exc_info=True)
        return _error(EXIT_FAILURE, type(exc).__name__, str(exc), stage=stage)
    return 0


if __name__ == "__main__":
    sys.exit(main())
