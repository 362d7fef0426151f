"""Surrogate probe sets: forget inputs pushed toward other classes.

Since the retention set is off limits during unlearning, retention-like
instances are manufactured by running a targeted signed-gradient attack
against the frozen pretrained snapshot: each forget input is pushed toward a
target class (uniform over the other classes) by iterated gradient steps on
the input, projected into an L-infinity ball around its origin after every
step. Probes are generated once, in canonical (origin, replica) order, and
stay fixed for the whole run.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .datakit import LabeledDataset, ParseError
from .model import Snapshot, TapedParams, logits_direct, logits_direct_t
from .rng import Xoshiro256


class DegenerateClassesError(ValueError):
    """Probe targets require at least two classes."""


@dataclass(frozen=True)
class AttackMeta:
    n_adv: int
    steps: int
    step_size: float
    radius: float
    norm_kind: str
    seed: int


@dataclass
class ProbeSet:
    """N_f x n_adv attacked inputs with their target labels and origins."""

    inputs: np.ndarray
    targets: np.ndarray
    origins: np.ndarray
    class_count: int
    meta: AttackMeta

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.int64)
        self.origins = np.ascontiguousarray(self.origins, dtype=np.int64)
        n = self.inputs.shape[0]
        if self.targets.shape != (n,) or self.origins.shape != (n,):
            raise ValueError("targets and origins must align with inputs")
        self.inputs.flags.writeable = False
        self.targets.flags.writeable = False
        self.origins.flags.writeable = False

    @property
    def count(self) -> int:
        return self.inputs.shape[0]


def _draw_targets(rng: Xoshiro256, own_label: int, b: int, n_adv: int) -> list[int]:
    pool = [c for c in range(b) if c != own_label]
    if n_adv <= len(pool):
        rng.shuffle(pool)
        return pool[:n_adv]
    return [pool[rng.randbelow(len(pool))] for _ in range(n_adv)]


def gen_probes(
    snap: Snapshot,
    forget: LabeledDataset,
    n_adv: int,
    steps: int,
    step_size: float,
    radius: float,
    seed: int,
    clamp: tuple[float, float] | None = None,
) -> ProbeSet:
    """Targeted PGD against the snapshot; returns N_f * n_adv probes.

    Every probe minimizes the snapshot's cross-entropy toward its target
    class with signed-gradient steps, clipped into the L-infinity ball of
    ``radius`` around its origin after each step. ``clamp`` optionally bounds
    coordinates to a data domain (off by default: synthetic features are
    unbounded).
    """
    if n_adv < 1:
        raise ValueError("n_adv must be at least 1")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    b = forget.class_count
    if b < 2:
        raise DegenerateClassesError("probe targets need at least 2 classes")

    rng = Xoshiro256(seed)
    x_f, y_f = forget.peek()
    n_f = x_f.shape[0]
    origins = np.repeat(np.arange(n_f), n_adv)
    targets = np.zeros(n_f * n_adv, dtype=np.int64)
    for i in range(n_f):
        targets[i * n_adv : (i + 1) * n_adv] = _draw_targets(rng, int(y_f[i]), b, n_adv)

    x0 = x_f[origins]
    lo, hi = x0 - radius, x0 + radius
    x = x0.copy()
    for _ in range(steps):
        xt = dc.Tensor(x)
        tp = TapedParams.wrap(snap.params)
        with dc.GradientTape() as tape:
            loss = dc.cross_entropy_logits(logits_direct_t(tp, xt), targets)
        (grad,) = dc.backward(tape, loss, [xt])
        x = x - step_size * np.sign(grad)
        x = np.clip(x, lo, hi)
        if clamp is not None:
            x = np.clip(x, clamp[0], clamp[1])

    meta = AttackMeta(
        n_adv=n_adv,
        steps=steps,
        step_size=step_size,
        radius=radius,
        norm_kind="linf",
        seed=seed,
    )
    return ProbeSet(x, targets, origins, b, meta)


def probe_success_rate(snap: Snapshot, probes: ProbeSet) -> float:
    """Fraction of probes the snapshot classifies as their target."""
    if probes.count == 0:
        return 0.0
    pred = logits_direct(snap, probes.inputs).argmax(axis=1)
    return float((pred == probes.targets).mean())


# ---------------------------------------------------------------------------
# persistence: dataset CSV plus origin/target columns and an attack header
# ---------------------------------------------------------------------------


def save_probes_csv(probes: ProbeSet, path) -> None:
    m = probes.meta
    lines = [
        f"# n={probes.count} d={probes.inputs.shape[1]} b={probes.class_count}",
        (
            f"# attack n_adv={m.n_adv} steps={m.steps} step_size={m.step_size!r} "
            f"radius={m.radius!r} norm={m.norm_kind} seed={m.seed}"
        ),
    ]
    for row, origin, target in zip(probes.inputs, probes.origins, probes.targets):
        values = ",".join(repr(float(v)) for v in row)
        lines.append(f"{int(target)},{values},{int(origin)},{int(target)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_probes_csv(path) -> ProbeSet:
    path = Path(path)
    raw = path.read_text().splitlines()
    if len(raw) < 2:
        raise ParseError(1, "probe file needs a size header and an attack header")
    import re

    m = re.match(r"^#\s*n=(\d+)\s+d=(\d+)\s+b=(\d+)\s*$", raw[0])
    if not m:
        raise ParseError(1, "expected header '# n=<N> d=<d> b=<b>'")
    n, d, b = (int(g) for g in m.groups())
    am = re.match(
        r"^#\s*attack n_adv=(\d+) steps=(\d+) step_size=(\S+) radius=(\S+) "
        r"norm=(\S+) seed=(-?\d+)\s*$",
        raw[1],
    )
    if not am:
        raise ParseError(2, "expected attack metadata header")
    meta = AttackMeta(
        n_adv=int(am.group(1)),
        steps=int(am.group(2)),
        step_size=float(am.group(3)),
        radius=float(am.group(4)),
        norm_kind=am.group(5),
        seed=int(am.group(6)),
    )
    inputs = np.zeros((n, d))
    targets = np.zeros(n, dtype=np.int64)
    origins = np.zeros(n, dtype=np.int64)
    row = 0
    for lineno, line in enumerate(raw[2:], start=3):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != d + 3:
            raise ParseError(lineno, f"expected {d + 3} fields, got {len(parts)}")
        try:
            label = int(parts[0])
            values = [float(p) for p in parts[1 : d + 1]]
            origin = int(parts[d + 1])
            target = int(parts[d + 2])
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from exc
        if label != target:
            raise ParseError(lineno, "label column must equal the target column")
        if row >= n:
            raise ParseError(lineno, f"more than the declared {n} rows")
        inputs[row] = values
        targets[row] = target
        origins[row] = origin
        row += 1
    if row != n:
        raise ParseError(len(raw), f"expected {n} rows, found {row}")
    return ProbeSet(inputs, targets, origins, b, meta)
