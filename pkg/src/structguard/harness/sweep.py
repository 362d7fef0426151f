"""Sweeps over methods, split sizes, seeds, and analysis axes.

Each grid cell is one full experiment; the master seed of a cell fans out
into independent split/probe/optimizer streams. Cells aggregate into a table
(mean and unbiased stddev per metric over seeds) plus a per-run scatter file
pairing mean structural collapse with the retention-deletion gap, which makes
the collapse-vs-trade-off correlation a one-line check downstream.

Optional axes: alignment-loss variants, single-toggle ablations (zeroing one
loss weight), and anchor construction modes. Failed cells are recorded with
their error instead of aborting the sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..rng import derive_seed
from .config import ABLATIONS, ExperimentConfig
from .experiment import execute_run


@dataclass(frozen=True)
class CellKey:
    method: str
    k: int
    variant: str
    ablation: str
    anchor_mode: str


@dataclass
class CellResult:
    key: CellKey
    seed: int
    report: dict | None
    error: str | None = None


@dataclass
class SweepResult:
    cells: list[CellResult] = field(default_factory=list)

    def group(self) -> dict[CellKey, list[dict]]:
        grouped: dict[CellKey, list[dict]] = {}
        for cell in self.cells:
            if cell.report is not None:
                grouped.setdefault(cell.key, []).append(cell.report)
        return grouped

    def failed(self) -> list[CellResult]:
        return [c for c in self.cells if c.error is not None]


def _ablation_weights(base: tuple[float, ...], name: str) -> tuple[float, ...]:
    w = list(base)
    if name == "no_align":
        w[2] = 0.0
    elif name == "no_reg":
        w[3] = 0.0
    elif name == "no_cr":
        w[4] = 0.0
    elif name != "full":
        raise ValueError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
    return tuple(w)


def cell_config(
    base: ExperimentConfig,
    method: str,
    k: int,
    seed: int,
    variant: str | None = None,
    ablation: str | None = None,
    anchor_mode: str | None = None,
) -> ExperimentConfig:
    """Per-cell config: the master seed drives split, probe, and run streams."""
    unlearn = replace(
        base.unlearn,
        method=method,
        k=k,
        split_seed=seed,
        seed=derive_seed(seed, 2),
        align_variant=variant if variant is not None else base.unlearn.align_variant,
        weights=_ablation_weights(base.unlearn.weights, ablation or "full"),
    )
    probes = replace(base.probes, seed=derive_seed(seed, 1))
    anchors = base.anchors
    if anchor_mode is not None:
        anchors = replace(base.anchors, mode=anchor_mode)
    return replace(base, unlearn=unlearn, probes=probes, anchors=anchors)


def run_sweep(base: ExperimentConfig) -> SweepResult:
    s = base.sweep
    variants = s.align_variants or (base.unlearn.align_variant,)
    ablations = s.ablations or ("full",)
    anchor_modes = s.anchor_modes or (base.anchors.mode,)
    result = SweepResult()
    for method in s.methods:
        for k in s.k_values:
            for variant in variants:
                for ablation in ablations:
                    for anchor_mode in anchor_modes:
                        key = CellKey(method, k, variant, ablation, anchor_mode)
                        for seed in s.seeds:
                            cfg = cell_config(
                                base, method, k, seed, variant, ablation, anchor_mode
                            )
                            try:
                                report, _ = execute_run(cfg)
                                result.cells.append(CellResult(key, seed, report))
                            except Exception as exc:  # cell failure must not kill the grid
                                result.cells.append(
                                    CellResult(key, seed, None, f"{type(exc).__name__}: {exc}")
                                )
    return result


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


TABLE_HEADER = (
    "method,k,variant,ablation,anchor_mode,n_seeds,"
    "a_test_mean,a_test_std,a_r_mean,a_r_std,deletion_mean,deletion_std,"
    "collapse_mean,collapse_std,gap_mean,gap_std"
)


def _gap(report: dict) -> float:
    # retention-deletion gap: A_r minus what survives of the forget set
    return report["metrics"]["a_r"] - report["metrics"]["a_f"]


def table_rows(result: SweepResult) -> list[dict]:
    rows = []
    for key, reports in result.group().items():
        a_test = _mean_std([r["metrics"]["a_test"] for r in reports])
        a_r = _mean_std([r["metrics"]["a_r"] for r in reports])
        deletion = _mean_std([r["metrics"]["deletion_score"] for r in reports])
        collapse = _mean_std([r["collapse"]["mean"] for r in reports])
        gap = _mean_std([_gap(r) for r in reports])
        rows.append(
            {
                "method": key.method,
                "k": key.k,
                "variant": key.variant,
                "ablation": key.ablation,
                "anchor_mode": key.anchor_mode,
                "n_seeds": len(reports),
                "a_test_mean": a_test[0],
                "a_test_std": a_test[1],
                "a_r_mean": a_r[0],
                "a_r_std": a_r[1],
                "deletion_mean": deletion[0],
                "deletion_std": deletion[1],
                "collapse_mean": collapse[0],
                "collapse_std": collapse[1],
                "gap_mean": gap[0],
                "gap_std": gap[1],
            }
        )
    rows.sort(key=lambda r: (r["method"], r["k"], r["variant"], r["ablation"], r["anchor_mode"]))
    return rows


def write_sweep_artifacts(result: SweepResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    lines = [TABLE_HEADER]
    for row in table_rows(result):
        lines.append(
            ",".join(
                [
                    row["method"],
                    str(row["k"]),
                    row["variant"],
                    row["ablation"],
                    row["anchor_mode"],
                    str(row["n_seeds"]),
                    *(
                        repr(row[c])
                        for c in (
                            "a_test_mean",
                            "a_test_std",
                            "a_r_mean",
                            "a_r_std",
                            "deletion_mean",
                            "deletion_std",
                            "collapse_mean",
                            "collapse_std",
                            "gap_mean",
                            "gap_std",
                        )
                    ),
                ]
            )
        )
    (out / "table.csv").write_text("\n".join(lines) + "\n")

    scatter = ["method,k,variant,ablation,anchor_mode,seed,mean_collapse,gap"]
    for cell in result.cells:
        if cell.report is None:
            continue
        scatter.append(
            ",".join(
                [
                    cell.key.method,
                    str(cell.key.k),
                    cell.key.variant,
                    cell.key.ablation,
                    cell.key.anchor_mode,
                    str(cell.seed),
                    repr(cell.report["collapse"]["mean"]),
                    repr(_gap(cell.report)),
                ]
            )
        )
    (out / "collapse_tradeoff.csv").write_text("\n".join(scatter) + "\n")

    failures = ["method,k,variant,ablation,anchor_mode,seed,error"]
    for cell in result.failed():
        failures.append(
            ",".join(
                [
                    cell.key.method,
                    str(cell.key.k),
                    cell.key.variant,
                    cell.key.ablation,
                    cell.key.anchor_mode,
                    str(cell.seed),
                    '"' + (cell.error or "").replace('"', "'") + '"',
                ]
            )
        )
    if len(failures) > 1:
        (out / "failed_cells.csv").write_text("\n".join(failures) + "\n")


def collapse_gap_correlation(result: SweepResult) -> float:
    """Pearson correlation between per-run mean collapse and the gap."""
    xs, ys = [], []
    for cell in result.cells:
        if cell.report is None:
            continue
        xs.append(cell.report["collapse"]["mean"])
        ys.append(_gap(cell.report))
    if len(xs) < 2:
        return float("nan")
    return float(np.corrcoef(np.asarray(xs), np.asarray(ys))[0, 1])
