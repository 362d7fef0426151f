"""Dense float64 tensors with taped reverse-mode differentiation.

The operation set is closed and minimal: exactly what the package's losses
decompose into (matrix product, affine pieces, relu, row normalization, row
cosine, softmax cross-entropy, a few elementwise maps and reductions, and
three specialised row losses). Every operation carries a hand-written
vector-Jacobian product, and ``finite_diff_grad`` provides the independent
central-difference oracle the test-suite uses to certify each of them.

Recording model: while a :class:`GradientTape` is active (``with`` block),
every operation appends a node to it. ``backward`` replays the nodes in
reverse, accumulating gradients for any requested leaf tensors. Without an
active tape the same functions are plain numpy computations.

All denominators in normalization/cosine paths are guarded by ``EPS`` and the
guard is part of the differentiated function (exact quotient-rule Jacobians,
no stop-gradients).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

EPS = 1e-12


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonScalarOutputError(ValueError):
    """backward() was asked to differentiate a non-scalar value."""


class Tensor(object):
    """A dense float64 array participating in taped computations."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # Small operator sugar; everything routes through the module ops so that
    # taping stays in one place.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeNode(object):
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple, output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class GradientTape(object):
    """Ordered record of operations, consumed by :func:`backward`.

    Nodes are appended in execution order, so the record is topologically
    sorted by construction: every input of a node was produced (or was a
    leaf) before the node itself.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "GradientTape":
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _pop_tape(self)

    def produced(self, t: Tensor) -> bool:
        """True if ``t`` is the output of some recorded operation."""
        return any(node.output is t for node in self.nodes)

    def gradient(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        return backward(self, output, wrt)


_TAPE_STACK: list[GradientTape] = []


def _push_tape(tape: GradientTape) -> None:
    _TAPE_STACK.append(tape)


def _pop_tape(tape: GradientTape) -> None:
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise RuntimeError("GradientTape exited out of order")
    _TAPE_STACK.pop()


def _record(op: str, inputs: tuple, output: Tensor, vjp: Callable) -> None:
    if _TAPE_STACK:
        _TAPE_STACK[-1].nodes.append(TapeNode(op, inputs, output, vjp))


def backward(tape: GradientTape, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``output`` for each tensor in ``wrt``.

    Gradients have the shapes of their tensors; tensors with no path to the
    output receive zeros.
    """
    if output.size != 1:
        raise NonScalarOutputError(
            f"backward requires a scalar output, got shape {output.shape}"
        )
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        for tensor, g in zip(node.inputs, node.vjp(g_out)):
            if g is None:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------------------
# elementwise / broadcast helpers
# ---------------------------------------------------------------------------


def _broadcast_check(a: np.ndarray, b: np.ndarray, op: str) -> None:
    """Allow equal shapes, a row vector against a matrix, or a scalar."""
    if a.shape == b.shape:
        return
    if b.ndim == 0 or a.ndim == 0:
        return
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    raise ShapeMismatchError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # row vector broadcast over matrix rows
    return g.sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "add")
    out = Tensor(a.data + b.data)

    def vjp(g):
        return (_reduce_to_shape(g, a.data.shape), _reduce_to_shape(g, b.data.shape))

    _record("add", (a, b), out, vjp)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "sub")
    out = Tensor(a.data - b.data)

    def vjp(g):
        return (_reduce_to_shape(g, a.data.shape), -_reduce_to_shape(g, b.data.shape))

    _record("sub", (a, b), out, vjp)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeMismatchError(
            f"mul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (
            _reduce_to_shape(g * b.data, a.data.shape),
            _reduce_to_shape(g * a.data, b.data.shape),
        )

    _record("mul", (a, b), out, vjp)
    return out


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    _record("scale", (a,), out, lambda g: (g * c,))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0))
    _record("relu", (a,), out, lambda g: (g * mask,))
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)
    _record("square", (a,), out, lambda g: (g * 2.0 * a.data,))
    return out


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    _record("abs", (a,), out, lambda g: (g * np.sign(a.data),))
    return out


def reduce_sum(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum())
    _record("sum", (a,), out, lambda g: (np.full_like(a.data, float(g)),))
    return out


def reduce_mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = Tensor(a.data.mean())
    _record("mean", (a,), out, lambda g: (np.full_like(a.data, float(g) / n),))
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a matrix, got {a.data.shape}")
    out = Tensor(a.data.T.copy())

    def vjp(g):
        return (g.T,)

    _record("transpose", (a,), out, vjp)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(
            f"matmul expects matrices, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions differ, {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return (g @ b.data.T, a.data.T @ g)

    _record("matmul", (a, b), out, vjp)
    return out


# ---------------------------------------------------------------------------
# row-structured operations (shared raw vjp helpers are reused by the
# vectorised importance path in structloss)
# ---------------------------------------------------------------------------


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt((x * x).sum(axis=1))


def l2_normalize_rows_raw(x: np.ndarray, eps: float = EPS) -> np.ndarray:
    denom = np.maximum(_row_norms(x), eps)
    return x / denom[:, None]


def l2_normalize_rows_vjp(x: np.ndarray, g: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Exact quotient-rule Jacobian of row normalization applied to ``g``.

    Where the row norm falls below ``eps`` the denominator is the constant
    ``eps``, so the Jacobian degenerates to I/eps.
    """
    norms = _row_norms(x)
    denom = np.maximum(norms, eps)
    gx = g / denom[:, None]
    live = norms >= eps
    dot = (x * g).sum(axis=1)
    corr = np.where(live, dot / (denom**3), 0.0)
    return gx - x * corr[:, None]


def l2_normalize_rows(a, eps: float = EPS) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"l2_normalize_rows expects a matrix, got {a.data.shape}")
    out = Tensor(l2_normalize_rows_raw(a.data, eps))
    _record(
        "l2_normalize_rows",
        (a,),
        out,
        lambda g: (l2_normalize_rows_vjp(a.data, g, eps),),
    )
    return out


def row_cosine_raw(a: np.ndarray, b: np.ndarray, eps: float = EPS) -> np.ndarray:
    denom = np.maximum(_row_norms(a) * _row_norms(b), eps)
    return (a * b).sum(axis=1) / denom


def row_cosine_vjp(
    a: np.ndarray, b: np.ndarray, g: np.ndarray, eps: float = EPS
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cosine Jacobians applied to a per-row upstream scalar ``g``."""
    na = _row_norms(a)
    nb = _row_norms(b)
    prod = na * nb
    denom = np.maximum(prod, eps)
    dot = (a * b).sum(axis=1)
    live = prod >= eps
    # d cos / da = b/denom - dot * a / (na^2 * denom); guarded rows keep the
    # constant-eps denominator and drop the norm-variation term.
    corr_a = np.where(live, dot / (np.maximum(na, eps) ** 2 * denom), 0.0)
    corr_b = np.where(live, dot / (np.maximum(nb, eps) ** 2 * denom), 0.0)
    ga = (b / denom[:, None] - a * corr_a[:, None]) * g[:, None]
    gb = (a / denom[:, None] - b * corr_b[:, None]) * g[:, None]
    return ga, gb


def row_cosine(a, b, eps: float = EPS) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeMismatchError(
            f"row_cosine expects equal matrices, got {a.data.shape} and {b.data.shape}"
        )
    out = Tensor(row_cosine_raw(a.data, b.data, eps))
    _record(
        "row_cosine",
        (a, b),
        out,
        lambda g: row_cosine_vjp(a.data, b.data, g, eps),
    )
    return out


class LabelRangeError(ValueError):
    """A class label lies outside [0, number of logit columns)."""


def _check_labels(labels: np.ndarray, b: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ShapeMismatchError("labels must be a vector")
    if labels.size and (labels.min() < 0 or labels.max() >= b):
        raise LabelRangeError(f"labels must lie in [0, {b})")
    return labels


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Numerically stable row softmax (max-subtraction)."""
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean negative log-softmax probability of the true labels."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeMismatchError(f"logits must be a matrix, got {logits.data.shape}")
    n, b = logits.data.shape
    labels = _check_labels(labels, b)
    if labels.shape[0] != n:
        raise ShapeMismatchError("label count must match the logit row count")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    losses = logsumexp - shifted[np.arange(n), labels]
    out = Tensor(losses.mean())

    def vjp(g):
        p = softmax_rows(z)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    _record("cross_entropy_logits", (logits,), out, vjp)
    return out


def row_log_softmax(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"row_log_softmax expects a matrix, got {a.data.shape}")
    z = a.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = Tensor(shifted - logsumexp)

    def vjp(g):
        p = softmax_rows(z)
        return (g - p * g.sum(axis=1, keepdims=True),)

    _record("row_log_softmax", (a,), out, vjp)
    return out


def row_sort(a) -> Tensor:
    """Sort each row ascending; gradients flow back through the permutation."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"row_sort expects a matrix, got {a.data.shape}")
    order = np.argsort(a.data, axis=1, kind="stable")
    out = Tensor(np.take_along_axis(a.data, order, axis=1))

    def vjp(g):
        gx = np.empty_like(g)
        np.put_along_axis(gx, order, g, axis=1)
        return (gx,)

    _record("row_sort", (a,), out, vjp)
    return out


def _rbf_kernel(x: np.ndarray, y: np.ndarray, sigma: float) -> np.ndarray:
    sq = (
        (x * x).sum(axis=1)[:, None]
        + (y * y).sum(axis=1)[None, :]
        - 2.0 * (x @ y.T)
    )
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * sigma * sigma))


def rbf_mmd2(x, y, bandwidth: float) -> Tensor:
    """Biased squared MMD between the row sets of ``x`` and ``y``.

    Uses an RBF kernel with the given bandwidth; identical row sets give
    exactly zero. Differentiable in both arguments.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.data.ndim != 2 or y.data.ndim != 2 or x.data.shape[1] != y.data.shape[1]:
        raise ShapeMismatchError(
            f"rbf_mmd2 expects matrices with equal width, got {x.data.shape} and {y.data.shape}"
        )
    sigma = float(bandwidth)
    if sigma <= 0.0:
        raise ValueError("bandwidth must be positive")
    xv, yv = x.data, y.data
    n, m = xv.shape[0], yv.shape[0]
    kxx = _rbf_kernel(xv, xv, sigma)
    kyy = _rbf_kernel(yv, yv, sigma)
    kxy = _rbf_kernel(xv, yv, sigma)
    out = Tensor(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())

    def vjp(g):
        c = float(g) / (sigma * sigma)
        # d/du of exp(-|u-w|^2 / 2s^2) = -k * (u - w) / s^2, summed over pairs
        gx = (-2.0 / (n * n)) * (xv * kxx.sum(axis=1)[:, None] - kxx @ xv)
        gx += (2.0 / (n * m)) * (xv * kxy.sum(axis=1)[:, None] - kxy @ yv)
        gy = (-2.0 / (m * m)) * (yv * kyy.sum(axis=1)[:, None] - kyy @ yv)
        gy += (2.0 / (n * m)) * (yv * kxy.sum(axis=0)[:, None] - kxy.T @ xv)
        return (gx * c, gy * c)

    _record("rbf_mmd2", (x, y), out, vjp)
    return out


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    base = x.copy()
    for i in range(x.size):
        xp = base.copy().ravel()
        xm = base.copy().ravel()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp.reshape(x.shape)))
        fm = float(f(xm.reshape(x.shape)))
        flat[i] = (fp - fm) / (2.0 * h)
    return grad
