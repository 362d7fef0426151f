"""Command-line interface for the unlearning benchmark.

Subcommands cover each pipeline stage plus end-to-end runs::

    structguard gen-data   --config c.json --out dir     dataset CSV
    structguard split      --config c.json --out dir     forget/retain CSVs
    structguard pretrain   --config c.json --out dir     model checkpoint
    structguard gen-anchors --config c.json --out dir    anchor JSON
    structguard gen-probes --config c.json --out dir     probe CSV
    structguard unlearn    --config c.json --out dir     checkpoint + trace
    structguard eval       --config c.json --out dir     metrics JSON
    structguard report     --config c.json --out dir     full run report
    structguard sweep      --config c.json --out dir     grid tables

``--seed`` overrides the split/probe/run seeds like one sweep cell would.
Exit codes: 0 success, 2 configuration error, 3 runtime or divergence error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..anchor import save_anchors
from ..datakit import ParseError, save_dataset_csv, split_forget, split_forget_classes
from ..model import DivergenceError, save_checkpoint
from ..probe import gen_probes, probe_success_rate, save_probes_csv
from . import metrics
from .config import ConfigError, default_config, config_to_dict, load_config
from .experiment import (
    build_anchors,
    dispatch_method,
    execute_run,
    prepare_environment,
    run_experiment,
    write_report,
)
from ..unlearn import StructureMonitor
from .sweep import cell_config, run_sweep, write_sweep_artifacts

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="structguard",
        description="Structure-preserving machine unlearning benchmark",
    )
    parser.add_argument("--config", type=str, default=None, help="config JSON path")
    parser.add_argument("--seed", type=int, default=None, help="override run seeds")
    parser.add_argument("--out", type=str, default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (
        "gen-data",
        "split",
        "pretrain",
        "gen-anchors",
        "gen-probes",
        "unlearn",
        "eval",
        "sweep",
        "report",
    ):
        sub.add_parser(name)
    sub.add_parser("print-config")
    return parser


def _load(args) -> "ExperimentConfig":
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cell_config(cfg, cfg.unlearn.method, cfg.unlearn.k, args.seed)
    return cfg


def _split_of(cfg, train):
    u = cfg.unlearn
    if u.class_mode:
        return split_forget_classes(train, u.class_fraction, u.split_seed)
    return split_forget(train, u.k, u.split_seed)


def _run(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "print-config":
        print(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
        return EXIT_OK

    if args.command == "gen-data":
        full, test, train, _ = _materialize_data(cfg)
        save_dataset_csv(full, out / "dataset.csv")
        save_dataset_csv(test, out / "test.csv")
        save_dataset_csv(train, out / "train.csv")
        print(f"wrote {full.n} samples ({train.n} train / {test.n} test) to {out}")
        return EXIT_OK

    if args.command == "split":
        _, _, train, _ = prepare_environment(cfg)
        split = _split_of(cfg, train)
        save_dataset_csv(split.forget, out / "forget.csv")
        save_dataset_csv(split.retain, out / "retain.csv")
        print(f"wrote forget ({split.forget.n}) and retain ({split.retain.n}) to {out}")
        return EXIT_OK

    if args.command == "pretrain":
        _, test, train, snap = prepare_environment(cfg)
        save_checkpoint(snap.params, out / "pretrained.json")
        acc = metrics.accuracy(snap, train, "direct")
        print(f"pretrained model: train accuracy {acc:.2f}%, checkpoint in {out}")
        return EXIT_OK

    if args.command == "gen-anchors":
        _, _, train, snap = prepare_environment(cfg)
        split = _split_of(cfg, train)
        anchors = build_anchors(cfg, snap, split.retain)
        save_anchors(anchors, out / "anchors.json")
        print(f"wrote {anchors.b}x{anchors.d} {anchors.source} anchors to {out}")
        return EXIT_OK

    if args.command == "gen-probes":
        _, _, train, snap = prepare_environment(cfg)
        split = _split_of(cfg, train)
        p = cfg.probes
        probes = gen_probes(
            snap, split.forget, p.n_adv, p.steps, p.step_size, p.radius, p.seed, p.clamp
        )
        save_probes_csv(probes, out / "probes.csv")
        rate = probe_success_rate(snap, probes)
        print(f"wrote {probes.count} probes (target rate {rate:.1%}) to {out}")
        return EXIT_OK

    if args.command == "unlearn":
        _, _, train, snap = prepare_environment(cfg)
        split = _split_of(cfg, train)
        anchors = build_anchors(cfg, snap, split.retain)
        p = cfg.probes
        probes = gen_probes(
            snap, split.forget, p.n_adv, p.steps, p.step_size, p.radius, p.seed, p.clamp
        )
        monitor = StructureMonitor.build(snap, probes, anchors)
        unlearned, trace = dispatch_method(
            cfg, snap, split.forget, split.retain, probes, anchors, monitor
        )
        save_checkpoint(unlearned, out / "unlearned.json")
        trace.to_csv(out / "trace.csv")
        print(f"{cfg.unlearn.method}: {trace.steps_run} steps, artifacts in {out}")
        return EXIT_OK

    if args.command == "eval":
        report, _ = execute_run(cfg)
        write_report(report, out / "report.json")
        m = report["metrics"]
        print(
            f"{report['method']}: A_test {m['a_test']:.2f} A_r {m['a_r']:.2f} "
            f"deletion {m['deletion_score']:.2f}"
        )
        return EXIT_OK

    if args.command == "report":
        report = run_experiment(cfg, out)
        m = report["metrics"]
        print(
            f"{report['method']}: A_test {m['a_test']:.2f} A_r {m['a_r']:.2f} "
            f"deletion {m['deletion_score']:.2f} -> {out / 'report.json'}"
        )
        return EXIT_OK

    if args.command == "sweep":
        result = run_sweep(cfg)
        write_sweep_artifacts(result, out)
        done = sum(1 for c in result.cells if c.report is not None)
        print(f"sweep: {done}/{len(result.cells)} cells completed, tables in {out}")
        return EXIT_OK

    raise AssertionError(f"unhandled command {args.command}")


def _materialize_data(cfg):
    return prepare_environment(cfg)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, FileNotFoundError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures map to a dedicated exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
