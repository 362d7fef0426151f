"""Structure matrices and the structure-preserving loss family.

Structure is the affinity matrix S between unit probe embeddings and unit
anchors, S = V . A^T, so every entry is a cosine in [-1, 1]. The
pre-unlearning structure S_ori is computed once from the frozen snapshot's
plain (projector-free) embeddings and treated as a constant everywhere; the
evolving structure S_unl routes through the projector.

The alignment loss compares the two matrices row-by-row by default: the
negative mean cosine over probe rows, which decomposes exactly into one term
per probe - the decomposition the structural-importance weights require. A
per-anchor-column reading is available by configuration, along with four
alternative divergences (MSE, KL, sorted-1d-Wasserstein, RBF-MMD) that all
vanish when the structures coincide.

Structural importance averages, per extractor parameter, the absolute
gradient of each probe's own alignment term. Two implementations are
provided: a reference loop that differentiates one probe at a time on the
tape, and a vectorised path exploiting that per-probe parameter gradients of
an affine layer are rank-one (|input| outer |delta|), which makes the mean of
absolute gradients a single batched product. The two agree to float
round-off and the tests pin that.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .anchor import AnchorSet
from .model import (
    ModelParams,
    Snapshot,
    TapedParams,
    features,
    forward_trace,
    param_sq_delta,
    projected_features_t,
    psi_size,
)
from .probe import ProbeSet

ALIGN_AXES = ("per_probe_row", "per_anchor_column")
ALIGN_VARIANTS = ("CS", "MSE", "KL", "WD", "MMD")
_ENTRY_TOL = 1e-9


class LengthMismatchError(ValueError):
    """An importance vector does not match the extractor parameter count."""


@dataclass
class StructureMatrix:
    """Probe-anchor affinities with provenance ('ori' or 'unl')."""

    S: np.ndarray
    provenance: str

    def __post_init__(self):
        s = np.ascontiguousarray(self.S, dtype=np.float64)
        if s.ndim != 2:
            raise dc.ShapeMismatchError("structure must be a matrix")
        if s.size and (np.abs(s) > 1.0 + _ENTRY_TOL).any():
            raise ValueError("structure entries must be cosines in [-1, 1]")
        s.flags.writeable = False
        self.S = s

    @property
    def probe_count(self) -> int:
        return self.S.shape[0]

    @property
    def anchor_count(self) -> int:
        return self.S.shape[1]


@dataclass
class ImportanceVector:
    """Nonnegative structural importance per extractor parameter."""

    values: np.ndarray
    probe_count: int

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("importance must be a flat vector")
        if v.size and v.min() < 0:
            raise ValueError("importance entries must be nonnegative")
        v.flags.writeable = False
        self.values = v


def compute_structure(v: np.ndarray, anchors: AnchorSet, provenance: str) -> StructureMatrix:
    """S = V . A^T for unit-row embeddings V."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != anchors.d:
        raise dc.ShapeMismatchError(
            f"embedding width {v.shape} does not match anchor dimension {anchors.d}"
        )
    return StructureMatrix(v @ anchors.matrix.T, provenance)


def structure_t(v: dc.Tensor, anchors: AnchorSet) -> dc.Tensor:
    """Taped structure product; the anchor matrix enters as a constant."""
    return dc.matmul(v, dc.Tensor(anchors.matrix.T.copy()))


def snapshot_structure(snap: Snapshot, probe_inputs: np.ndarray, anchors: AnchorSet) -> np.ndarray:
    """S_ori: snapshot embeddings (no projector) against the anchors."""
    return compute_structure(features(snap, probe_inputs), anchors, "ori").S


def _as_structure_array(s) -> np.ndarray:
    if isinstance(s, StructureMatrix):
        return s.S
    if isinstance(s, dc.Tensor):
        return s.data
    return np.asarray(s, dtype=np.float64)


def align_loss(s_ori, s_unl, axis: str = "per_probe_row") -> dc.Tensor:
    """Negative mean cosine between matched rows (or columns) of S_ori and S_unl.

    S_ori participates as a constant: gradients flow through S_unl only.
    """
    if axis not in ALIGN_AXES:
        raise ValueError(f"axis must be one of {ALIGN_AXES}, got {axis!r}")
    ori = dc.Tensor(_as_structure_array(s_ori))
    unl = s_unl if isinstance(s_unl, dc.Tensor) else dc.Tensor(_as_structure_array(s_unl))
    if ori.data.shape != unl.data.shape:
        raise dc.ShapeMismatchError(
            f"structure shapes differ: {ori.data.shape} vs {unl.data.shape}"
        )
    if axis == "per_anchor_column":
        ori = dc.Tensor(ori.data.T.copy())
        unl = dc.transpose(unl)
    return dc.scale(dc.reduce_mean(dc.row_cosine(ori, unl)), -1.0)


def align_loss_variant(kind: str, s_ori, s_unl) -> dc.Tensor:
    """Alternative alignment measures; each is exactly 0 at S_unl = S_ori
    (CS reaches its minimum -1 there instead)."""
    if kind not in ALIGN_VARIANTS:
        raise ValueError(f"kind must be one of {ALIGN_VARIANTS}, got {kind!r}")
    ori = _as_structure_array(s_ori)
    unl = s_unl if isinstance(s_unl, dc.Tensor) else dc.Tensor(_as_structure_array(s_unl))
    if ori.shape != unl.data.shape:
        raise dc.ShapeMismatchError(
            f"structure shapes differ: {ori.shape} vs {unl.data.shape}"
        )
    if kind == "CS":
        return align_loss(ori, unl, "per_probe_row")
    if kind == "MSE":
        return dc.reduce_mean(dc.square(dc.sub(unl, dc.Tensor(ori))))
    if kind == "KL":
        # mean over probes of KL(softmax(ori row) || softmax(unl row))
        p = dc.softmax_rows(ori)
        log_p = np.log(p)
        log_q = dc.row_log_softmax(unl)
        n = ori.shape[0]
        per_entry = dc.mul(dc.Tensor(p), dc.sub(dc.Tensor(log_p), log_q))
        return dc.scale(dc.reduce_sum(per_entry), 1.0 / n)
    if kind == "WD":
        # mean over probes of the 1-d W1 distance between sorted row entries
        sorted_ori = np.sort(ori, axis=1)
        return dc.reduce_mean(dc.absolute(dc.sub(dc.row_sort(unl), dc.Tensor(sorted_ori))))
    # MMD: biased RBF estimate with the median-distance bandwidth of S_ori rows
    bw = median_pairwise_distance(ori)
    return dc.rbf_mmd2(dc.Tensor(ori), unl, bw)


def median_pairwise_distance(rows: np.ndarray, floor: float = 1e-6) -> float:
    """Median Euclidean distance between distinct row pairs, floored away from 0."""
    n = rows.shape[0]
    if n < 2:
        return floor
    sq = (
        (rows * rows).sum(axis=1)[:, None]
        + (rows * rows).sum(axis=1)[None, :]
        - 2.0 * (rows @ rows.T)
    )
    iu = np.triu_indices(n, k=1)
    dists = np.sqrt(np.maximum(sq[iu], 0.0))
    return max(float(np.median(dists)), floor)


def per_probe_align_loss(
    m,
    snap: Snapshot | None,
    x_s: np.ndarray,
    anchors: AnchorSet,
    s_ori_row: np.ndarray | None = None,
) -> float:
    """One probe's own alignment term: -cos(S_ori row, S_unl row).

    ``s_ori_row`` is normally precomputed from the snapshot; when omitted it
    is derived from ``snap`` on the spot. The mean of these terms over a probe
    set equals the batch ``align_loss`` with the per-probe-row axis.
    """
    x_s = np.atleast_2d(np.asarray(x_s, dtype=np.float64))
    if s_ori_row is None:
        if snap is None:
            raise ValueError("either a snapshot or a precomputed s_ori_row is required")
        s_ori_row = snapshot_structure(snap, x_s, anchors)[0]
    s_ori_row = np.asarray(s_ori_row, dtype=np.float64)
    if s_ori_row.shape != (anchors.b,):
        raise dc.ShapeMismatchError(
            f"s_ori_row must have one entry per anchor, got {s_ori_row.shape}"
        )
    tp = TapedParams.wrap(m.params if isinstance(m, Snapshot) else m)
    s_unl = structure_t(projected_features_t(tp, dc.Tensor(x_s)), anchors)
    loss = dc.scale(
        dc.reduce_mean(dc.row_cosine(dc.Tensor(s_ori_row[None, :]), s_unl)), -1.0
    )
    return loss.item()


def structural_importance(
    params: ModelParams,
    probes: ProbeSet,
    anchors: AnchorSet,
    s_ori: np.ndarray,
) -> ImportanceVector:
    """Reference implementation: one taped backward per probe.

    I_i = mean over probes of |d(per-probe alignment)/d psi_i|, gradients
    taken at the current extractor parameters and routed through the
    projector, in canonical extractor flattening order.
    """
    s_ori = np.asarray(s_ori, dtype=np.float64)
    n_s = probes.count
    acc = np.zeros(psi_size(params))
    for i in range(n_s):
        x_row = probes.inputs[i : i + 1]
        tp = TapedParams.wrap(params)
        with dc.GradientTape() as tape:
            s_unl = structure_t(projected_features_t(tp, dc.Tensor(x_row)), anchors)
            loss = dc.scale(
                dc.reduce_mean(dc.row_cosine(dc.Tensor(s_ori[i : i + 1]), s_unl)), -1.0
            )
        grads = dc.backward(tape, loss, tp.block("psi"))
        acc += np.abs(np.concatenate([g.ravel() for g in grads]))
    return ImportanceVector(acc / max(n_s, 1), n_s)


def structural_importance_fast(
    params: ModelParams,
    probes: ProbeSet,
    anchors: AnchorSet,
    s_ori: np.ndarray,
) -> ImportanceVector:
    """Vectorised importance, exactly equal to the reference loop.

    Each probe's loss touches only its own row, so activation gradients stay
    per-row through the whole chain, and a per-probe affine weight gradient
    is the rank-one product input x delta. |input_i * delta_j| factorises as
    |input_i| * |delta_j|, so the mean absolute gradient is |X|^T |Delta| / N
    in one batched product per layer.
    """
    s_ori = np.asarray(s_ori, dtype=np.float64)
    n_s = probes.count
    trace = forward_trace(params, probes.inputs)
    u2 = trace["omega_out"]
    v = dc.l2_normalize_rows_raw(u2)
    s_unl = v @ anchors.matrix.T

    # upstream of each probe's own loss: d(-cos)/d s_unl row, one row each
    g_rows = np.full(n_s, -1.0)
    _, g_s = dc.row_cosine_vjp(s_ori, s_unl, g_rows)
    g_v = g_s @ anchors.matrix
    g_u2 = dc.l2_normalize_rows_vjp(u2, g_v)

    (w1, _), (w2, _) = params.omega
    g_r1 = g_u2 @ w2.T
    g_u1 = g_r1 * (trace["omega_pre1"] > 0.0)
    g_h = g_u1 @ w1.T

    pieces = []
    deltas = g_h
    layer_grads = []
    last = len(params.psi) - 1
    for layer_idx in range(last, -1, -1):
        z = trace["psi_pre"][layer_idx]
        g_z = deltas * (z > 0.0) if layer_idx < last else deltas
        layer_grads.append((layer_idx, g_z))
        deltas = g_z @ params.psi[layer_idx][0].T
    layer_grads.sort(key=lambda t: t[0])
    for layer_idx, g_z in layer_grads:
        a_in = trace["psi_inputs"][layer_idx]
        i_w = np.abs(a_in).T @ np.abs(g_z) / n_s
        i_b = np.abs(g_z).mean(axis=0)
        pieces.append(i_w.ravel())
        pieces.append(i_b)
    return ImportanceVector(np.concatenate(pieces), n_s)


def reg_loss(params: ModelParams, snap: Snapshot, importance: ImportanceVector) -> float:
    """0.5 * sum_i I_i (psi_i - psi_ori_i)^2, with I a fixed constant."""
    sq = param_sq_delta(params, snap)
    if importance.values.shape != sq.shape:
        raise LengthMismatchError(
            f"importance length {importance.values.size} != extractor size {sq.size}"
        )
    return float(0.5 * (importance.values * sq).sum())


def reg_loss_t(tp: TapedParams, snap: Snapshot, importance: ImportanceVector) -> dc.Tensor:
    """Taped regularization term, differentiable through the live extractor."""
    expected = sum(w.size + b.size for w, b in snap.params.psi)
    if importance.values.size != expected:
        raise LengthMismatchError(
            f"importance length {importance.values.size} != extractor size {expected}"
        )
    total: dc.Tensor | None = None
    pos = 0
    for (w_t, b_t), (w_ori, b_ori) in zip(tp.psi, snap.params.psi):
        for live, frozen in ((w_t, w_ori), (b_t, b_ori)):
            i_slice = importance.values[pos : pos + frozen.size].reshape(frozen.shape)
            pos += frozen.size
            term = dc.reduce_sum(
                dc.mul(dc.Tensor(i_slice), dc.square(dc.sub(live, dc.Tensor(frozen))))
            )
            total = term if total is None else dc.add(total, term)
    assert total is not None
    return dc.scale(total, 0.5)


def structural_collapse(s_a, s_b) -> float:
    """Mean absolute affinity drift between two structure matrices."""
    a = _as_structure_array(s_a)
    b = _as_structure_array(s_b)
    if a.shape != b.shape:
        raise dc.ShapeMismatchError(f"structure shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


# ---------------------------------------------------------------------------
# persistence for diagnostic plots
# ---------------------------------------------------------------------------


def save_structure_csv(s: StructureMatrix, path) -> None:
    lines = [f"# structure provenance={s.provenance} n={s.probe_count} b={s.anchor_count}"]
    for row in s.S:
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def save_importance_csv(importance: ImportanceVector, path) -> None:
    lines = [f"# importance probes={importance.probe_count} size={importance.values.size}"]
    lines.extend(repr(float(v)) for v in importance.values)
    Path(path).write_text("\n".join(lines) + "\n")
