"""Unlearning algorithms: the structure-preserving method and five baselines.

Every run owns a private copy of the incoming model (callers' parameters are
never mutated), descends by plain fixed-step gradient descent, records a
per-step trace (loss terms, forget accuracy on the direct path, structural
collapse when a monitor is supplied), and stops early once the forget set has
been fully misclassified for a configured number of consecutive steps.

Methods and their objectives:

* ``structguard`` - weighted sum of deletion (negative direct-path CE on the
  forget set), retention (projected-path CE on the surrogate probes),
  structure alignment against the frozen pre-unlearning structure,
  importance-weighted extractor regularization, and an elastic-net penalty
  on the classifier; trains extractor, projector, and classifier.
* ``neggrad``  - gradient ascent on the forget cross-entropy.
* ``fisher``   - damps parameters by a diagonal Fisher proxy on the forget set.
* ``rawp``     - repeated norm-clipped ascent perturbations of the weights.
* ``adv``      - ascent on the forget set plus direct-path CE on the probes.
* ``l2ul``     - the adv objective plus a forget-sensitivity-weighted
  quadratic anchor on the extractor.
* ``oracle``   - retrains from fresh initialization with positive gradients
  on the retention set and negative gradients on the forget set; the only
  method allowed to read the retention data.

Only datasets consumed through ``LabeledDataset.batch`` count as reads, which
is what the harness audits.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .anchor import AnchorSet
from .datakit import LabeledDataset
from .model import (
    DivergenceError,
    ModelParams,
    Snapshot,
    TapedParams,
    features,
    logits_direct,
    logits_direct_t,
    logits_projected_t,
    param_arrays,
    projected_features_t,
)
from .probe import ProbeSet
from .rng import Xoshiro256
from .structloss import (
    ImportanceVector,
    align_loss,
    align_loss_variant,
    reg_loss_t,
    snapshot_structure,
    structural_collapse,
    structural_importance_fast,
    structure_t,
)

METHODS = ("structguard", "neggrad", "fisher", "rawp", "adv", "l2ul", "oracle")


class ConfigMismatchError(ValueError):
    """Run inputs are inconsistent (e.g. anchor dimension vs model width)."""


@dataclass(frozen=True)
class LossWeights:
    w_del: float = 1.0
    w_ret: float = 1.0
    w_align: float = 1.0
    w_reg: float = 1.0
    w_cr: float = 1.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "structguard"
    steps: int = 400
    lr: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    elastic_net: tuple[float, float] = (1e-3, 1e-3)
    align_axis: str = "per_probe_row"
    align_variant: str = "CS"
    importance_refresh: int = 1
    stop_when_forgotten: bool = True
    patience: int = 5
    seed: int = 0
    fisher_lambda: float = 1.0
    batch_size: int | None = 1
    projector_warmup: int = 60

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not np.isfinite(self.lr) or self.lr < 0:
            raise ValueError("lr must be finite and nonnegative")
        if any(v < 0 for v in self.elastic_net):
            raise ValueError("elastic_net penalties must be nonnegative")
        if self.align_axis not in ("per_probe_row", "per_anchor_column"):
            raise ValueError(f"unknown align_axis {self.align_axis!r}")
        if self.align_variant not in ("CS", "MSE", "KL", "WD", "MMD"):
            raise ValueError(f"unknown align_variant {self.align_variant!r}")
        if self.importance_refresh < 1:
            raise ValueError("importance_refresh must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.fisher_lambda < 0:
            raise ValueError("fisher_lambda must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or None for full batch")
        if self.projector_warmup < 0:
            raise ValueError("projector_warmup must be nonnegative")


@dataclass
class TraceRow:
    step: int
    total: float
    loss_del: float
    loss_ret: float
    loss_align: float
    loss_reg: float
    loss_cr: float
    forget_accuracy: float
    collapse: float
    wall_time: float


@dataclass
class UnlearnTrace:
    method: str
    rows: list[TraceRow] = field(default_factory=list)

    @property
    def steps_run(self) -> int:
        return len(self.rows)

    def collapse_series(self) -> list[float]:
        return [r.collapse for r in self.rows]

    def mean_collapse(self) -> float:
        vals = [r.collapse for r in self.rows if np.isfinite(r.collapse)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self, path) -> None:
        header = (
            "step,total,loss_del,loss_ret,loss_align,loss_reg,loss_cr,"
            "forget_accuracy,collapse,wall_time"
        )
        lines = [header]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        str(r.step),
                        repr(r.total),
                        repr(r.loss_del),
                        repr(r.loss_ret),
                        repr(r.loss_align),
                        repr(r.loss_reg),
                        repr(r.loss_cr),
                        repr(r.forget_accuracy),
                        repr(r.collapse),
                        repr(r.wall_time),
                    ]
                )
            )
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class StructureMonitor:
    """Method-agnostic collapse probe: drift of the plain (projector-free)
    probe-anchor structure away from its pre-unlearning state."""

    anchors: AnchorSet
    probe_inputs: np.ndarray
    s_ori: np.ndarray

    @classmethod
    def build(cls, snap: Snapshot, probes: ProbeSet, anchors: AnchorSet) -> "StructureMonitor":
        return cls(
            anchors=anchors,
            probe_inputs=probes.inputs,
            s_ori=snapshot_structure(snap, probes.inputs, anchors),
        )

    def collapse(self, params: ModelParams) -> float:
        current = features(params, self.probe_inputs) @ self.anchors.matrix.T
        return structural_collapse(self.s_ori, current)


def elastic_net(phi: tuple[np.ndarray, np.ndarray], l1: float, l2: float) -> float:
    """l1 * sum|phi| + (l2/2) * sum phi^2 over classifier weights and bias."""
    flat = np.concatenate([phi[0].ravel(), phi[1].ravel()])
    return float(l1 * np.abs(flat).sum() + 0.5 * l2 * (flat * flat).sum())


def _elastic_net_t(
    phi: tuple[dc.Tensor, dc.Tensor],
    l1: float,
    l2: float,
    anchor_phi: tuple[np.ndarray, np.ndarray] | None = None,
) -> dc.Tensor:
    """Taped elastic net on the classifier, optionally anchored.

    With ``anchor_phi`` the penalty applies to the update (phi - phi_ori),
    which is what stabilizes the classifier during unlearning: a raw-weight
    penalty only shrinks toward zero and cannot stop the classifier from
    rotating away from the frozen extractor's geometry.
    """
    w, b = phi
    pairs = ((w, None), (b, None)) if anchor_phi is None else zip((w, b), anchor_phi)
    total: dc.Tensor | None = None
    for t, ref in pairs:
        diff = t if ref is None else dc.sub(t, dc.Tensor(ref))
        abs_term = dc.scale(dc.reduce_sum(dc.absolute(diff)), l1)
        sq_term = dc.scale(dc.reduce_sum(dc.square(diff)), 0.5 * l2)
        piece = dc.add(abs_term, sq_term)
        total = piece if total is None else dc.add(total, piece)
    assert total is not None
    return total


def _forget_accuracy(params: ModelParams, x_f: np.ndarray, y_f: np.ndarray) -> float:
    pred = logits_direct(params, x_f).argmax(axis=1)
    return float((pred == y_f).mean()) * 100.0


TERM_NAMES = ("del", "ret", "align", "reg", "cr")


def _live_indices(work: ModelParams, x_f: np.ndarray, y_f: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Subset of ``idx`` whose samples the current model still classifies
    correctly. The deletion objective only ascends on these: once a sample is
    misclassified the criterion is met and pushing it further just inflates
    the weight scale until the remaining samples' gradients underflow."""
    pred = logits_direct(work, x_f[idx]).argmax(axis=1)
    return idx[pred == y_f[idx]]


def _del_term(work: ModelParams, tp: TapedParams, x_f, y_f, idx) -> dc.Tensor | None:
    live = _live_indices(work, x_f, y_f, idx)
    if live.size == 0:
        return None
    return dc.scale(
        dc.cross_entropy_logits(logits_direct_t(tp, dc.Tensor(x_f[live])), y_f[live]), -1.0
    )

# build_loss callbacks receive the taped parameters, the 1-based step index,
# and this step's forget-sample indices, returning the weighted total and the
# raw value of each term
LossBuilder = Callable[[TapedParams, int, np.ndarray], tuple[dc.Tensor, dict[str, float]]]


class _ForgetCycler(object):
    """Seeded minibatch stream over forget indices.

    The forget cross-entropy is streamed sample-by-sample (by default) instead
    of averaged over the whole forget set: a full-batch mean saturates into a
    single-class promotion pattern whose own-class samples never flip, while
    per-sample steps keep attacking each sample's own margin until every one
    is misclassified.
    """

    def __init__(self, n: int, batch_size: int | None, seed: int):
        self.n = n
        self.batch = n if batch_size is None else min(batch_size, n)
        self.rng = Xoshiro256(seed)
        self.order: list[int] = []

    def next_indices(self) -> np.ndarray:
        if self.batch >= self.n:
            return np.arange(self.n)
        if len(self.order) < self.batch:
            fresh = list(range(self.n))
            self.rng.shuffle(fresh)
            self.order.extend(fresh)
        idx = self.order[: self.batch]
        del self.order[: self.batch]
        return np.asarray(idx, dtype=np.int64)


def _combine(terms: list[tuple[float, dc.Tensor]]) -> dc.Tensor:
    """Weighted sum that skips zero weights and avoids redundant scaling, so a
    single-term objective is the exact same computation as a bare loss.
    An empty list yields a constant zero (no update)."""
    total: dc.Tensor | None = None
    for w, t in terms:
        if w == 0.0:
            continue
        wt = t if w == 1.0 else dc.scale(t, w)
        total = wt if total is None else dc.add(total, wt)
    return total if total is not None else dc.Tensor(0.0)


def _descend(
    work: ModelParams,
    cfg: UnlearnConfig,
    method: str,
    blocks: tuple[str, ...],
    build_loss: LossBuilder,
    forget_xy: tuple[np.ndarray, np.ndarray],
    monitor: StructureMonitor | None,
) -> UnlearnTrace:
    x_f, y_f = forget_xy
    trace = UnlearnTrace(method=method)
    streak = 0
    cycler = _ForgetCycler(x_f.shape[0], cfg.batch_size, cfg.seed)
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        idx = cycler.next_indices()
        tp = TapedParams.wrap(work)
        with dc.GradientTape() as tape:
            total, term_vals = build_loss(tp, step, idx)
        total_val = total.item()
        if not np.isfinite(total_val):
            raise DivergenceError(f"{method}: loss became non-finite at step {step}")
        grads = dc.backward(tape, total, tp.trainables(blocks))
        # fixed-length steps: lr is the step size along the normalized joint
        # gradient, which keeps unbounded ascent terms from compounding into
        # overflow before the misclassification criterion is met
        g_norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if g_norm > 0.0:
            factor = cfg.lr / g_norm
            for arr, g in zip(param_arrays(work, blocks), grads):
                arr -= factor * g
        acc_f = _forget_accuracy(work, x_f, y_f)
        col = monitor.collapse(work) if monitor is not None else float("nan")
        trace.rows.append(
            TraceRow(
                step=step,
                total=total_val,
                loss_del=term_vals.get("del", 0.0),
                loss_ret=term_vals.get("ret", 0.0),
                loss_align=term_vals.get("align", 0.0),
                loss_reg=term_vals.get("reg", 0.0),
                loss_cr=term_vals.get("cr", 0.0),
                forget_accuracy=acc_f,
                collapse=col,
                wall_time=time.perf_counter() - t0,
            )
        )
        if cfg.stop_when_forgotten:
            streak = streak + 1 if acc_f == 0.0 else 0
            if streak >= cfg.patience:
                break
    return trace


def run_structguard(
    model: ModelParams,
    snap: Snapshot,
    forget: LabeledDataset,
    probes: ProbeSet,
    anchors: AnchorSet,
    cfg: UnlearnConfig,
    monitor: StructureMonitor | None = None,
) -> tuple[ModelParams, UnlearnTrace]:
    if anchors.d != model.dims.d:
        raise ConfigMismatchError(
            f"anchor dimension {anchors.d} != embedding dimension {model.dims.d}"
        )
    work = model.copy()
    w = cfg.loss_weights
    x_f, y_f = forget.batch()
    x_s, y_s = probes.inputs, probes.targets

    needs_structure = w.w_align > 0.0 or w.w_reg > 0.0
    s_ori = snapshot_structure(snap, x_s, anchors) if needs_structure else None
    importance: ImportanceVector | None = None

    # Projector warmup: the projector starts from random weights, so its
    # retention/alignment gradients initially say nothing about structure and
    # would drag the extractor along under joint fixed-length steps. Fitting
    # omega alone first (extractor and classifier frozen) recreates the scale
    # separation a large pretrained backbone gives these terms for free.
    if probes.count and cfg.projector_warmup > 0 and (w.w_ret > 0.0 or w.w_align > 0.0):
        for _ in range(cfg.projector_warmup):
            tp = TapedParams.wrap(work)
            with dc.GradientTape() as tape:
                warm_terms: list[tuple[float, dc.Tensor]] = []
                if w.w_ret > 0.0:
                    warm_terms.append(
                        (w.w_ret, dc.cross_entropy_logits(logits_projected_t(tp, dc.Tensor(x_s)), y_s))
                    )
                if w.w_align > 0.0:
                    s_warm = structure_t(projected_features_t(tp, dc.Tensor(x_s)), anchors)
                    base_align = s_ori if s_ori is not None else snapshot_structure(snap, x_s, anchors)
                    if cfg.align_variant == "CS":
                        warm_terms.append((w.w_align, align_loss(base_align, s_warm, cfg.align_axis)))
                    else:
                        warm_terms.append((w.w_align, align_loss_variant(cfg.align_variant, base_align, s_warm)))
                warm_total = _combine(warm_terms)
            grads = dc.backward(tape, warm_total, tp.block("omega"))
            g_norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
            if g_norm > 0.0:
                factor = cfg.lr / g_norm
                for arr, g in zip(param_arrays(work, ("omega",)), grads):
                    arr -= factor * g

    def build(tp: TapedParams, step: int, idx: np.ndarray) -> tuple[dc.Tensor, dict[str, float]]:
        nonlocal importance
        terms: list[tuple[float, dc.Tensor]] = []
        vals: dict[str, float] = {}
        if w.w_del > 0.0:
            t_del = _del_term(work, tp, x_f, y_f, idx)
            if t_del is not None:
                terms.append((w.w_del, t_del))
                vals["del"] = t_del.item()
        if w.w_ret > 0.0 and probes.count:
            t_ret = dc.cross_entropy_logits(logits_projected_t(tp, dc.Tensor(x_s)), y_s)
            terms.append((w.w_ret, t_ret))
            vals["ret"] = t_ret.item()
        if w.w_align > 0.0 and probes.count:
            s_unl = structure_t(projected_features_t(tp, dc.Tensor(x_s)), anchors)
            if cfg.align_variant == "CS":
                t_align = align_loss(s_ori, s_unl, cfg.align_axis)
            else:
                t_align = align_loss_variant(cfg.align_variant, s_ori, s_unl)
            terms.append((w.w_align, t_align))
            vals["align"] = t_align.item()
        if w.w_reg > 0.0 and probes.count:
            if importance is None or (step - 1) % cfg.importance_refresh == 0:
                importance = structural_importance_fast(work, probes, anchors, s_ori)
            t_reg = reg_loss_t(tp, snap, importance)
            terms.append((w.w_reg, t_reg))
            vals["reg"] = t_reg.item()
        if w.w_cr > 0.0:
            t_cr = _elastic_net_t(tp.phi, *cfg.elastic_net, anchor_phi=snap.params.phi)
            terms.append((w.w_cr, t_cr))
            vals["cr"] = t_cr.item()
        return _combine(terms), vals

    trace = _descend(work, cfg, "structguard", ("psi", "omega", "phi"), build, (x_f, y_f), monitor)
    return work, trace


def run_neggrad(
    model: ModelParams,
    forget: LabeledDataset,
    cfg: UnlearnConfig,
    monitor: StructureMonitor | None = None,
) -> tuple[ModelParams, UnlearnTrace]:
    work = model.copy()
    x_f, y_f = forget.batch()

    def build(tp: TapedParams, step: int, idx: np.ndarray):
        t_del = _del_term(work, tp, x_f, y_f, idx)
        if t_del is None:
            return _combine([]), {}
        return _combine([(1.0, t_del)]), {"del": t_del.item()}

    trace = _descend(work, cfg, "neggrad", ("psi", "phi"), build, (x_f, y_f), monitor)
    return work, trace


def run_adv(
    model: ModelParams,
    snap: Snapshot,
    forget: LabeledDataset,
    probes: ProbeSet,
    cfg: UnlearnConfig,
    monitor: StructureMonitor | None = None,
) -> tuple[ModelParams, UnlearnTrace]:
    work = model.copy()
    x_f, y_f = forget.batch()

    def build(tp: TapedParams, step: int, idx: np.ndarray):
        terms = []
        vals = {}
        t_del = _del_term(work, tp, x_f, y_f, idx)
        if t_del is not None:
            terms.append((1.0, t_del))
            vals["del"] = t_del.item()
        if probes.count:
            t_ret = dc.cross_entropy_logits(
                logits_direct_t(tp, dc.Tensor(probes.inputs)), probes.targets
            )
            terms.append((1.0, t_ret))
            vals["ret"] = t_ret.item()
        return _combine(terms), vals

    trace = _descend(work, cfg, "adv", ("psi", "phi"), build, (x_f, y_f), monitor)
    return work, trace


def forget_sensitivity(params_or_snap, forget: LabeledDataset) -> ImportanceVector:
    """Mean absolute per-sample gradient of forget CE per extractor parameter."""
    source = params_or_snap.params if isinstance(params_or_snap, Snapshot) else params_or_snap
    x_f, y_f = forget.peek()
    acc: np.ndarray | None = None
    for i in range(x_f.shape[0]):
        tp = TapedParams.wrap(source)
        with dc.GradientTape() as tape:
            loss = dc.cross_entropy_logits(
                logits_direct_t(tp, dc.Tensor(x_f[i : i + 1])), y_f[i : i + 1]
            )
        grads = dc.backward(tape, loss, tp.block("psi"))
        flat = np.abs(np.concatenate([g.ravel() for g in grads]))
        acc = flat if acc is None else acc + flat
    assert acc is not None
    return ImportanceVector(acc / x_f.shape[0], x_f.shape[0])


def run_l2ul(
    model: ModelParams,
    snap: Snapshot,
    forget: LabeledDataset,
    probes: ProbeSet,
    cfg: UnlearnConfig,
    monitor: StructureMonitor | None = None,
) -> tuple[ModelParams, UnlearnTrace]:
    work = model.copy()
    x_f, y_f = forget.batch()
    # forget-sensitivity importance, fixed at the pretrained weights: this
    # anchors parameters sensitive to the forget set rather than parameters
    # critical for structure
    sensitivity = forget_sensitivity(snap, forget)

    def build(tp: TapedParams, step: int, idx: np.ndarray):
        terms = []
        vals = {}
        t_del = _del_term(work, tp, x_f, y_f, idx)
        if t_del is not None:
            terms.append((1.0, t_del))
            vals["del"] = t_del.item()
        if probes.count:
            t_ret = dc.cross_entropy_logits(
                logits_direct_t(tp, dc.Tensor(probes.inputs)), probes.targets
            )
            terms.append((1.0, t_ret))
            vals["ret"] = t_ret.item()
        t_reg = reg_loss_t(tp, snap, sensitivity)
        terms.append((1.0, t_reg))
        vals["reg"] = t_reg.item()
        return _combine(terms), vals

    trace = _descend(work, cfg, "l2ul", ("psi", "phi"), build, (x_f, y_f), monitor)
    return work, trace


def run_oracle(
    model_init: ModelParams,
    retain: LabeledDataset,
    forget: LabeledDataset,
    cfg: UnlearnConfig,
    monitor: StructureMonitor | None = None,
) -> tuple[ModelParams, UnlearnTrace]:
    """Retraining reference; the only method that reads the retention set."""
    work = model_init.copy()
    x_r, y_r = retain.batch()
    x_f, y_f = forget.batch()

    def build(tp: TapedParams, step: int, idx: np.ndarray):
        t_ret = dc.cross_entropy_logits(logits_direct_t(tp, dc.Tensor(x_r)), y_r)
        terms = [(1.0, t_ret)]
        vals = {"ret": t_ret.item()}
        t_del = _del_term(work, tp, x_f, y_f, idx)
        if t_del is not None:
            terms.append((1.0, t_del))
            vals["del"] = t_del.item()
        return _combine(terms), vals

    trace = _descend(work, cfg, "oracle", ("psi", "phi"), build, (x_f, y_f), monitor)
    return work, trace


def run_fisher(
    model: ModelParams,
    forget: LabeledDataset,
    cfg: UnlearnConfig,
    monitor: StructureMonitor | None = None,
) -> tuple[ModelParams, UnlearnTrace]:
    """Multiplicative damping by a diagonal Fisher proxy on the forget set.

    F_i is the mean squared per-sample gradient of the forget cross-entropy;
    each repetition rescales parameters by 1 / (1 + lambda * F_i / max F).
    """
    work = model.copy()
    x_f, y_f = forget.batch()
    lam = cfg.fisher_lambda
    trace = UnlearnTrace(method="fisher")
    streak = 0
    blocks = ("psi", "phi")
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        arrays = param_arrays(work, blocks)
        fisher = [np.zeros_like(a) for a in arrays]
        for i in range(x_f.shape[0]):
            tp = TapedParams.wrap(work)
            with dc.GradientTape() as tape:
                loss = dc.cross_entropy_logits(
                    logits_direct_t(tp, dc.Tensor(x_f[i : i + 1])), y_f[i : i + 1]
                )
            grads = dc.backward(tape, loss, tp.trainables(blocks))
            for acc, g in zip(fisher, grads):
                acc += g * g
        n = x_f.shape[0]
        fisher = [f / n for f in fisher]
        f_max = max(float(f.max()) for f in fisher) if fisher else 0.0
        if lam > 0.0 and f_max > 0.0:
            for arr, f in zip(arrays, fisher):
                arr /= 1.0 + lam * f / f_max
        acc_f = _forget_accuracy(work, x_f, y_f)
        col = monitor.collapse(work) if monitor is not None else float("nan")
        trace.rows.append(
            TraceRow(step, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, acc_f, col, time.perf_counter() - t0)
        )
        if cfg.stop_when_forgotten:
            streak = streak + 1 if acc_f == 0.0 else 0
            if streak >= cfg.patience:
                break
    return work, trace


def run_rawp(
    model: ModelParams,
    forget: LabeledDataset,
    cfg: UnlearnConfig,
    monitor: StructureMonitor | None = None,
) -> tuple[ModelParams, UnlearnTrace]:
    """Accumulated ascent perturbations clipped to lr * ||theta|| in L2 per step."""
    work = model.copy()
    x_f, y_f = forget.batch()
    trace = UnlearnTrace(method="rawp")
    streak = 0
    blocks = ("psi", "phi")
    cycler = _ForgetCycler(x_f.shape[0], cfg.batch_size, cfg.seed)
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        idx = cycler.next_indices()
        live = _live_indices(work, x_f, y_f, idx)
        tp = TapedParams.wrap(work)
        with dc.GradientTape() as tape:
            if live.size:
                ce = dc.cross_entropy_logits(logits_direct_t(tp, dc.Tensor(x_f[live])), y_f[live])
            else:
                ce = dc.Tensor(0.0)
        ce_val = ce.item()
        if not np.isfinite(ce_val):
            raise DivergenceError(f"rawp: loss became non-finite at step {step}")
        grads = dc.backward(tape, ce, tp.trainables(blocks))
        arrays = param_arrays(work, blocks)
        theta_norm = float(np.sqrt(sum(float((a * a).sum()) for a in arrays)))
        g_norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        bound = cfg.lr * theta_norm
        # weight-perturbation style: the ascent step always sits at the clip
        # radius, a fraction of the current weight norm
        factor = 0.0 if g_norm == 0.0 else bound / g_norm
        for arr, g in zip(arrays, grads):
            arr += factor * g
        acc_f = _forget_accuracy(work, x_f, y_f)
        col = monitor.collapse(work) if monitor is not None else float("nan")
        trace.rows.append(
            TraceRow(step, -ce_val, -ce_val, 0.0, 0.0, 0.0, 0.0, acc_f, col, time.perf_counter() - t0)
        )
        if cfg.stop_when_forgotten:
            streak = streak + 1 if acc_f == 0.0 else 0
            if streak >= cfg.patience:
                break
    return work, trace
