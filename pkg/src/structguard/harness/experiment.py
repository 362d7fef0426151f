"""End-to-end experiment orchestration and the run report.

Pipeline: generate or load data, hold out a seeded test slice, pretrain (or
load) the model, freeze the pre-unlearning snapshot, build anchors, generate
surrogate probes, run the configured unlearning method, evaluate everything,
and persist a JSON report plus a per-step trace CSV.

Reports are deterministic given the config (sorted keys, repr-exact floats);
only the ``wall_times`` section varies between identical runs. Every report
is validated against ``REPORT_SCHEMA`` before it is written.

Pretraining is cached in-process per (data, model) configuration so sweeps
over methods and splits reuse one pretrained snapshot, mirroring how a single
pretrained network serves every unlearning request.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from .. import rng
from ..anchor import AnchorSet, gen_synthetic_anchors, load_anchors, visual_prototype_anchors
from ..datakit import LabeledDataset, load_dataset_csv, gen_gaussian_clusters, split_forget, split_forget_classes
from ..model import (
    Dims,
    ModelParams,
    Snapshot,
    flatten_block,
    init_model,
    load_checkpoint,
    pretrain,
    snapshot,
)
from ..probe import ProbeSet, gen_probes, probe_success_rate
from ..unlearn import (
    StructureMonitor,
    UnlearnTrace,
    run_adv,
    run_fisher,
    run_l2ul,
    run_neggrad,
    run_oracle,
    run_rawp,
    run_structguard,
)
from . import metrics
from .config import ExperimentConfig, config_to_dict

REPORT_SCHEMA_VERSION = 1

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": [
        "schema_version",
        "config",
        "method",
        "seeds",
        "metrics",
        "collapse",
        "consistency",
        "confusion_matrix",
        "retrieval",
        "anchor_profiles",
        "probe_success_rate",
        "checksums",
        "audit",
        "trace_steps",
        "wall_times",
    ],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "config": {"type": "object"},
        "method": {"type": "string"},
        "seeds": {"type": "object"},
        "metrics": {
            "type": "object",
            "required": [
                "a_test",
                "a_r",
                "a_f",
                "deletion_score",
                "a_test_projected",
                "a_r_projected",
                "a_f_projected",
            ],
            "additionalProperties": False,
            "properties": {
                "a_test": {"type": "number", "minimum": 0, "maximum": 100},
                "a_r": {"type": "number", "minimum": 0, "maximum": 100},
                "a_f": {"type": "number", "minimum": 0, "maximum": 100},
                "deletion_score": {"type": "number", "minimum": 0, "maximum": 100},
                "a_test_projected": {"type": "number", "minimum": 0, "maximum": 100},
                "a_r_projected": {"type": "number", "minimum": 0, "maximum": 100},
                "a_f_projected": {"type": "number", "minimum": 0, "maximum": 100},
            },
        },
        "collapse": {
            "type": "object",
            "required": ["trajectory", "mean"],
            "properties": {
                "trajectory": {"type": "array", "items": {"type": "number"}},
                "mean": {"type": "number"},
            },
        },
        "consistency": {
            "type": "object",
            "required": ["samples", "histogram", "median"],
        },
        "confusion_matrix": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "integer"}},
        },
        "retrieval": {
            "type": "object",
            "required": ["retain_query", "forget_query"],
        },
        "anchor_profiles": {"type": "array"},
        "probe_success_rate": {"type": "number", "minimum": 0, "maximum": 1},
        "checksums": {"type": "object"},
        "audit": {
            "type": "object",
            "required": ["retain_reads_during_unlearn"],
        },
        "trace_steps": {"type": "integer", "minimum": 1},
        "wall_times": {"type": "object"},
    },
}


class UnknownMethodError(ValueError):
    pass


def _params_checksum(params: ModelParams) -> str:
    flat = np.concatenate(
        [flatten_block(params.psi), flatten_block(params.omega), flatten_block([params.phi])]
    )
    return hashlib.sha256(flat.tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# data and pretraining (cached per config)
# ---------------------------------------------------------------------------

_PRETRAIN_CACHE: dict[str, tuple[LabeledDataset, LabeledDataset, LabeledDataset, Snapshot]] = {}


def _load_or_generate(cfg: ExperimentConfig) -> LabeledDataset:
    if cfg.data.path is not None:
        return load_dataset_csv(cfg.data.path)
    d = cfg.data
    return gen_gaussian_clusters(d.b, d.n_per_class, d.d_in, d.spread, d.seed)


def prepare_environment(
    cfg: ExperimentConfig,
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset, Snapshot]:
    """Returns (full, test, train, pretrained snapshot), cached per config."""
    key = json.dumps(
        {"data": config_to_dict(cfg)["data"], "model": config_to_dict(cfg)["model"]},
        sort_keys=True,
    )
    if key in _PRETRAIN_CACHE:
        return _PRETRAIN_CACHE[key]
    full = _load_or_generate(cfg)
    test_k = max(1, round(cfg.data.test_fraction * full.n))
    holdout = split_forget(full, test_k, rng.derive_seed(cfg.data.seed, 7))
    test, train = holdout.forget, holdout.retain

    m = cfg.model
    if m.checkpoint is not None:
        trained = load_checkpoint(m.checkpoint)
    else:
        dims = Dims(d_in=train.d_in, hidden=m.hidden, d=m.d, b=train.class_count)
        params = init_model(dims, m.init_seed)
        trained = pretrain(
            params, train, m.pretrain_epochs, m.pretrain_lr, m.init_seed, m.pretrain_batch
        )
    snap = snapshot(trained, "ori")
    _PRETRAIN_CACHE[key] = (full, test, train, snap)
    return _PRETRAIN_CACHE[key]


def build_anchors(cfg: ExperimentConfig, snap: Snapshot, retain: LabeledDataset) -> AnchorSet:
    a = cfg.anchors
    if a.mode == "file":
        return load_anchors(a.path)
    if a.mode == "prototype":
        return visual_prototype_anchors(snap, retain)
    return gen_synthetic_anchors(retain.class_count, snap.dims.d, a.seed, a.mode)


def dispatch_method(
    cfg: ExperimentConfig,
    snap: Snapshot,
    forget: LabeledDataset,
    retain: LabeledDataset,
    probes: ProbeSet,
    anchors: AnchorSet,
    monitor: StructureMonitor,
) -> tuple[ModelParams, UnlearnTrace]:
    u = cfg.unlearn
    ucfg = u.to_unlearn_config()
    base = snap.params
    if u.method == "structguard":
        return run_structguard(base, snap, forget, probes, anchors, ucfg, monitor)
    if u.method == "neggrad":
        return run_neggrad(base, forget, ucfg, monitor)
    if u.method == "fisher":
        return run_fisher(base, forget, ucfg, monitor)
    if u.method == "rawp":
        return run_rawp(base, forget, ucfg, monitor)
    if u.method == "adv":
        return run_adv(base, snap, forget, probes, ucfg, monitor)
    if u.method == "l2ul":
        return run_l2ul(base, snap, forget, probes, ucfg, monitor)
    if u.method == "oracle":
        fresh = init_model(snap.dims, u.oracle_init_seed)
        return run_oracle(fresh, retain, forget, ucfg, monitor)
    raise UnknownMethodError(f"unknown method {u.method!r}")


# ---------------------------------------------------------------------------
# the full pipeline
# ---------------------------------------------------------------------------


def execute_run(cfg: ExperimentConfig) -> tuple[dict, UnlearnTrace]:
    """Run the configured experiment and return (report dict, trace)."""
    times: dict[str, float] = {}
    t_total = time.perf_counter()

    t0 = time.perf_counter()
    _, test, train, snap = prepare_environment(cfg)
    times["pretrain"] = time.perf_counter() - t0

    u = cfg.unlearn
    if u.class_mode:
        split = split_forget_classes(train, u.class_fraction, u.split_seed)
    else:
        split = split_forget(train, u.k, u.split_seed)
    forget, retain = split.forget, split.retain

    anchors = build_anchors(cfg, snap, retain)
    anchors_checksum = anchors.checksum()
    snapshot_checksum = _params_checksum(snap.params)

    t0 = time.perf_counter()
    p = cfg.probes
    probes = gen_probes(
        snap, forget, p.n_adv, p.steps, p.step_size, p.radius, p.seed, p.clamp
    )
    success = probe_success_rate(snap, probes)
    times["probes"] = time.perf_counter() - t0

    monitor = StructureMonitor.build(snap, probes, anchors)

    reads_before = retain.access_count
    t0 = time.perf_counter()
    unlearned, trace = dispatch_method(cfg, snap, forget, retain, probes, anchors, monitor)
    times["unlearn"] = time.perf_counter() - t0
    retain_reads = retain.access_count - reads_before

    # metrics
    a_test = metrics.accuracy(unlearned, test, "direct")
    a_r = metrics.accuracy(unlearned, retain, "direct")
    a_f = metrics.accuracy(unlearned, forget, "direct")
    confusion = metrics.confusion_matrix(unlearned, forget)
    assert abs(confusion.trace() / forget.n * 100.0 - a_f) < 1e-9

    cosines = metrics.representation_consistency(snap, unlearned, retain)
    hist = metrics.consistency_histogram(cosines, cfg.eval.consistency_bins)

    # retrieval: a seeded query slice of the retention set against the rest,
    # then the forget set against the same gallery
    e = cfg.eval
    q_count = min(e.retrieval_query_count, retain.n - max(e.retrieval_ks) - 1)
    q_count = max(1, q_count)
    q_split = split_forget(retain, q_count, e.retrieval_seed)
    retain_retrieval = metrics.retrieval_eval(
        unlearned, q_split.forget, q_split.retain, list(e.retrieval_ks)
    )
    forget_retrieval = metrics.retrieval_eval(
        unlearned, forget, q_split.retain, list(e.retrieval_ks)
    )

    profiles = []
    profile_x, _ = retain.peek()
    for i in range(min(e.profile_instances, retain.n)):
        prof = metrics.anchor_profile(unlearned, snap, profile_x[i], anchors, e.profile_top_n)
        profiles.append(prof.as_dict())

    times["total"] = time.perf_counter() - t_total

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": config_to_dict(cfg),
        "method": u.method,
        "seeds": {
            "data": cfg.data.seed,
            "model_init": cfg.model.init_seed,
            "anchors": cfg.anchors.seed,
            "probes": cfg.probes.seed,
            "split": u.split_seed,
            "unlearn": u.seed,
        },
        "metrics": {
            "a_test": a_test,
            "a_r": a_r,
            "a_f": a_f,
            "deletion_score": 100.0 - a_f,
            "a_test_projected": metrics.accuracy(unlearned, test, "projected"),
            "a_r_projected": metrics.accuracy(unlearned, retain, "projected"),
            "a_f_projected": metrics.accuracy(unlearned, forget, "projected"),
        },
        "collapse": {
            "trajectory": [float(v) for v in trace.collapse_series()],
            "mean": trace.mean_collapse(),
        },
        "consistency": {
            "samples": [float(v) for v in cosines],
            "histogram": hist,
            "median": float(np.median(cosines)),
        },
        "confusion_matrix": [[int(v) for v in row] for row in confusion],
        "retrieval": {
            "retain_query": _retrieval_dict(retain_retrieval),
            "forget_query": _retrieval_dict(forget_retrieval),
        },
        "anchor_profiles": profiles,
        "probe_success_rate": success,
        "checksums": {
            "anchors": anchors_checksum,
            "anchors_after": anchors.checksum(),
            "snapshot": snapshot_checksum,
            "snapshot_after": _params_checksum(snap.params),
        },
        "audit": {"retain_reads_during_unlearn": retain_reads},
        "trace_steps": trace.steps_run,
        "wall_times": times,
    }
    if report["checksums"]["anchors"] != report["checksums"]["anchors_after"]:
        raise RuntimeError("anchor matrix changed during the run")
    if report["checksums"]["snapshot"] != report["checksums"]["snapshot_after"]:
        raise RuntimeError("pre-unlearning snapshot changed during the run")
    jsonschema.validate(report, REPORT_SCHEMA)
    return report, trace


def _retrieval_dict(result: dict) -> dict:
    return {
        "recall_at": {str(k): v for k, v in result["recall_at"].items()},
        "map": result["map"],
    }


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Execute and persist report.json plus trace.csv under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report, trace = execute_run(cfg)
    write_report(report, out / "report.json")
    trace.to_csv(out / "trace.csv")
    return report


def write_report(report: dict, path) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")


def strip_wall_times(report: dict) -> dict:
    """Copy of a report without its timing fields, for byte-level comparison."""
    out = json.loads(json.dumps(report))
    out.pop("wall_times", None)
    return out
