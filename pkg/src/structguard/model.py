"""The extractor/projector/classifier model family and its pretraining loop.

The deployed model is classifier(extractor(x)) on raw extractor output; the
projector is an auxiliary d->d bridge (two affine layers with a relu between)
used only by the retention/alignment machinery. Feature embeddings are the
row-normalized extractor output; the classifier consumes the unnormalized
output.

Parameters are plain float64 arrays grouped into three blocks:

* ``psi``   - extractor: one (W, b) pair per layer, relu between layers,
  signed affine output
* ``omega`` - projector: exactly two (W, b) pairs, relu between them
* ``phi``   - classifier: a single (W, b) pair

The canonical flattening of a block lists each layer's W in row-major order
followed by its bias; this order is shared by checkpoints, parameter deltas,
and the structural-importance vector.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .datakit import LabeledDataset
from .rng import Xoshiro256

CHECKPOINT_VERSION = 1


class InvalidDimsError(ValueError):
    """The dimension chain is not a valid model signature."""


class StructureMismatchError(ValueError):
    """Two parameter sets do not share the same layer structure."""


class DivergenceError(RuntimeError):
    """A training loss became non-finite."""


@dataclass(frozen=True)
class Dims:
    d_in: int
    hidden: tuple[int, ...]
    d: int
    b: int

    def __post_init__(self):
        sizes = (self.d_in, *self.hidden, self.d, self.b)
        if any(int(s) <= 0 for s in sizes):
            raise InvalidDimsError(f"all dimensions must be positive, got {sizes}")

    def extractor_chain(self) -> list[tuple[int, int]]:
        widths = [self.d_in, *self.hidden, self.d]
        return list(zip(widths[:-1], widths[1:]))


Layer = tuple[np.ndarray, np.ndarray]


@dataclass
class ModelParams:
    dims: Dims
    psi: list[Layer]
    omega: list[Layer]
    phi: Layer

    def copy(self) -> "ModelParams":
        clone = copy.deepcopy(self)
        for w, bb in [*clone.psi, *clone.omega, clone.phi]:
            w.flags.writeable = True
            bb.flags.writeable = True
        return clone


@dataclass
class Snapshot:
    """A frozen deep copy of model parameters, tagged for provenance."""

    params: ModelParams
    tag: str

    def __post_init__(self):
        self.params = copy.deepcopy(self.params)
        for w, b in [*self.params.psi, *self.params.omega, self.params.phi]:
            w.flags.writeable = False
            b.flags.writeable = False

    @property
    def dims(self) -> Dims:
        return self.params.dims


def snapshot(params: ModelParams, tag: str) -> Snapshot:
    return Snapshot(params, tag)


def _params_of(m) -> ModelParams:
    return m.params if isinstance(m, Snapshot) else m


def init_model(dims: Dims, seed: int) -> ModelParams:
    """Seeded uniform init in (-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer."""
    rng = Xoshiro256(seed)

    def layer(fan_in: int, fan_out: int) -> Layer:
        s = 1.0 / np.sqrt(fan_in)
        w = (rng.uniforms(fan_in * fan_out) * 2.0 - 1.0).reshape(fan_in, fan_out) * s
        b = (rng.uniforms(fan_out) * 2.0 - 1.0) * s
        return w, b

    psi = [layer(fi, fo) for fi, fo in dims.extractor_chain()]
    omega = [layer(dims.d, dims.d), layer(dims.d, dims.d)]
    phi = layer(dims.d, dims.b)
    return ModelParams(dims=dims, psi=psi, omega=omega, phi=phi)


# ---------------------------------------------------------------------------
# taped forward passes (shared by the numpy-facing API and the unlearn loops)
# ---------------------------------------------------------------------------


@dataclass
class TapedParams:
    """Tensor views over a model's arrays, rebuilt once per optimization step."""

    psi: list[tuple[dc.Tensor, dc.Tensor]]
    omega: list[tuple[dc.Tensor, dc.Tensor]]
    phi: tuple[dc.Tensor, dc.Tensor]

    @classmethod
    def wrap(cls, params: ModelParams) -> "TapedParams":
        return cls(
            psi=[(dc.Tensor(w), dc.Tensor(b)) for w, b in params.psi],
            omega=[(dc.Tensor(w), dc.Tensor(b)) for w, b in params.omega],
            phi=(dc.Tensor(params.phi[0]), dc.Tensor(params.phi[1])),
        )

    def block(self, name: str) -> list[dc.Tensor]:
        if name == "psi":
            pairs = self.psi
        elif name == "omega":
            pairs = self.omega
        elif name == "phi":
            pairs = [self.phi]
        else:
            raise ValueError(f"unknown block {name!r}")
        out: list[dc.Tensor] = []
        for w, b in pairs:
            out.extend((w, b))
        return out

    def trainables(self, blocks: tuple[str, ...]) -> list[dc.Tensor]:
        out: list[dc.Tensor] = []
        for name in blocks:
            out.extend(self.block(name))
        return out


def param_arrays(params: ModelParams, blocks: tuple[str, ...]) -> list[np.ndarray]:
    """Arrays in the same order as TapedParams.trainables(blocks)."""
    out: list[np.ndarray] = []
    for name in blocks:
        if name == "psi":
            pairs = params.psi
        elif name == "omega":
            pairs = params.omega
        elif name == "phi":
            pairs = [params.phi]
        else:
            raise ValueError(f"unknown block {name!r}")
        for w, b in pairs:
            out.extend((w, b))
    return out


def extract_t(tp: TapedParams, x: dc.Tensor) -> dc.Tensor:
    # relu between layers; the final embedding layer stays affine so features
    # are signed
    h = x
    for i, (w, b) in enumerate(tp.psi):
        h = dc.add(dc.matmul(h, w), b)
        if i < len(tp.psi) - 1:
            h = dc.relu(h)
    return h


def project_t(tp: TapedParams, h: dc.Tensor) -> dc.Tensor:
    (w1, b1), (w2, b2) = tp.omega
    mid = dc.relu(dc.add(dc.matmul(h, w1), b1))
    return dc.add(dc.matmul(mid, w2), b2)


def features_t(tp: TapedParams, x: dc.Tensor) -> dc.Tensor:
    return dc.l2_normalize_rows(extract_t(tp, x))


def projected_features_t(tp: TapedParams, x: dc.Tensor) -> dc.Tensor:
    return dc.l2_normalize_rows(project_t(tp, extract_t(tp, x)))


def logits_direct_t(tp: TapedParams, x: dc.Tensor) -> dc.Tensor:
    w, b = tp.phi
    return dc.add(dc.matmul(extract_t(tp, x), w), b)


def logits_projected_t(tp: TapedParams, x: dc.Tensor) -> dc.Tensor:
    w, b = tp.phi
    return dc.add(dc.matmul(project_t(tp, extract_t(tp, x)), w), b)


# ---------------------------------------------------------------------------
# numpy-facing API
# ---------------------------------------------------------------------------


def _as_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.dims.d_in:
        raise dc.ShapeMismatchError(
            f"input width {x.shape} does not match d_in={params.dims.d_in}"
        )
    return x


def features(m, x: np.ndarray) -> np.ndarray:
    """Row-normalized extractor embeddings (no projector)."""
    params = _params_of(m)
    tp = TapedParams.wrap(params)
    return features_t(tp, dc.Tensor(_as_batch(params, x))).data


def projected_features(m, x: np.ndarray) -> np.ndarray:
    """Row-normalized projector output."""
    params = _params_of(m)
    tp = TapedParams.wrap(params)
    return projected_features_t(tp, dc.Tensor(_as_batch(params, x))).data


def logits_direct(m, x: np.ndarray) -> np.ndarray:
    params = _params_of(m)
    tp = TapedParams.wrap(params)
    return logits_direct_t(tp, dc.Tensor(_as_batch(params, x))).data


def logits_projected(m, x: np.ndarray) -> np.ndarray:
    params = _params_of(m)
    tp = TapedParams.wrap(params)
    return logits_projected_t(tp, dc.Tensor(_as_batch(params, x))).data


def forward_trace(m, x: np.ndarray) -> dict:
    """Per-layer forward values needed by the vectorised importance path.

    Returns extractor layer inputs and pre-activations, the projector's
    pre-activations, and the projector output (pre-normalization).
    """
    params = _params_of(m)
    x = _as_batch(params, x)
    psi_inputs = []
    psi_pre = []
    h = x
    last = len(params.psi) - 1
    for i, (w, b) in enumerate(params.psi):
        psi_inputs.append(h)
        z = h @ w + b
        psi_pre.append(z)
        h = np.where(z > 0.0, z, 0.0) if i < last else z
    (w1, b1), (w2, b2) = params.omega
    u1 = h @ w1 + b1
    r1 = np.where(u1 > 0.0, u1, 0.0)
    u2 = r1 @ w2 + b2
    return {
        "psi_inputs": psi_inputs,
        "psi_pre": psi_pre,
        "extracted": h,
        "omega_pre1": u1,
        "omega_mid": r1,
        "omega_out": u2,
    }


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain(
    params: ModelParams,
    data: LabeledDataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int | None = None,
) -> ModelParams:
    """Gradient descent on direct-path cross-entropy; returns trained copy.

    Full-batch by default; a batch size turns on seeded-shuffle mini-batching.
    The input parameters are left untouched.
    """
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    if lr <= 0:
        raise ValueError("lr must be positive")
    work = params.copy()
    rng = Xoshiro256(seed)
    x_all, y_all = data.batch()
    n = x_all.shape[0]
    for _ in range(epochs):
        if batch_size is None or batch_size >= n:
            batches = [(x_all, y_all)]
        else:
            order = list(range(n))
            rng.shuffle(order)
            idx = np.asarray(order)
            batches = [
                (x_all[idx[i : i + batch_size]], y_all[idx[i : i + batch_size]])
                for i in range(0, n, batch_size)
            ]
        for xb, yb in batches:
            tp = TapedParams.wrap(work)
            with dc.GradientTape() as tape:
                loss = dc.cross_entropy_logits(logits_direct_t(tp, dc.Tensor(xb)), yb)
            if not np.isfinite(loss.item()):
                raise DivergenceError("pretraining loss became non-finite")
            trainables = tp.trainables(("psi", "phi"))
            grads = dc.backward(tape, loss, trainables)
            for arr, g in zip(param_arrays(work, ("psi", "phi")), grads):
                arr -= lr * g
    return work


# ---------------------------------------------------------------------------
# parameter bookkeeping
# ---------------------------------------------------------------------------


def flatten_block(pairs: list[Layer]) -> np.ndarray:
    pieces = []
    for w, b in pairs:
        pieces.append(np.ascontiguousarray(w).ravel())
        pieces.append(np.ascontiguousarray(b).ravel())
    return np.concatenate(pieces) if pieces else np.zeros(0)


def flatten_psi(m) -> np.ndarray:
    return flatten_block(_params_of(m).psi)


def psi_size(m) -> int:
    return int(flatten_psi(m).size)


def _check_same_structure(a: ModelParams, b: ModelParams) -> None:
    if a.dims != b.dims:
        raise StructureMismatchError(f"dims differ: {a.dims} vs {b.dims}")
    for (wa, ba), (wb, bb) in zip(
        [*a.psi, *a.omega, a.phi], [*b.psi, *b.omega, b.phi]
    ):
        if wa.shape != wb.shape or ba.shape != bb.shape:
            raise StructureMismatchError("layer shapes differ")


def param_sq_delta(params: ModelParams, snap: Snapshot) -> np.ndarray:
    """(psi - psi_ori)^2 in canonical extractor flattening order."""
    _check_same_structure(params, snap.params)
    delta = flatten_psi(params) - flatten_psi(snap)
    return delta * delta


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "dims": {
            "d_in": params.dims.d_in,
            "hidden": list(params.dims.hidden),
            "d": params.dims.d,
            "b": params.dims.b,
        },
        "psi": [float(v) for v in flatten_block(params.psi)],
        "omega": [float(v) for v in flatten_block(params.omega)],
        "phi": [float(v) for v in flatten_block([params.phi])],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def _unflatten(flat: np.ndarray, shapes: list[tuple[tuple[int, int], tuple[int]]]) -> list[Layer]:
    layers = []
    pos = 0
    for w_shape, b_shape in shapes:
        w_size = w_shape[0] * w_shape[1]
        w = flat[pos : pos + w_size].reshape(w_shape).copy()
        pos += w_size
        b = flat[pos : pos + b_shape[0]].copy()
        pos += b_shape[0]
        layers.append((w, b))
    if pos != flat.size:
        raise StructureMismatchError("flattened block length does not match dims")
    return layers


def load_checkpoint(path) -> ModelParams:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    dd = payload["dims"]
    dims = Dims(d_in=dd["d_in"], hidden=tuple(dd["hidden"]), d=dd["d"], b=dd["b"])
    psi_shapes = [((fi, fo), (fo,)) for fi, fo in dims.extractor_chain()]
    omega_shapes = [((dims.d, dims.d), (dims.d,))] * 2
    phi_shapes = [((dims.d, dims.b), (dims.b,))]
    psi = _unflatten(np.asarray(payload["psi"], dtype=np.float64), psi_shapes)
    omega = _unflatten(np.asarray(payload["omega"], dtype=np.float64), omega_shapes)
    phi = _unflatten(np.asarray(payload["phi"], dtype=np.float64), phi_shapes)[0]
    return ModelParams(dims=dims, psi=psi, omega=omega, phi=phi)
