"""Fixed per-class anchor vectors: file ingestion, synthetic generation,
and visual prototypes averaged from retention embeddings.

Anchors are unit rows of a b x d matrix and never change once built; runs
record a checksum so fixedness is auditable. Encoder provenance arrives as
opaque metadata only - no embedding model is ever invoked here.

Anchor file format (JSON)::

    {
      "version": 1,
      "b": <classes>, "d": <dimension>,
      "rows": [[...d reals...], ...],
      "class_ids": [..],          # optional, one per row; rows sharing an id
                                  # are averaged then renormalized
      "class_names": [..],        # optional, b strings
      "attributes": [..],         # optional, b strings of attribute text
      "source_note": "..."        # optional free text
    }

Rows may arrive unnormalized; the loader renormalizes. Zero rows are
rejected outright - a zero anchor carries no semantics.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datakit import LabeledDataset
from .model import Snapshot, features
from .rng import Xoshiro256

ANCHOR_FORMAT_VERSION = 1
_UNIT_TOL = 1e-10


class AnchorFileError(ValueError):
    """The anchor file is malformed."""


class DimensionInconsistencyError(AnchorFileError):
    """Anchor rows do not share a single dimension."""


class ZeroRowError(AnchorFileError):
    """An anchor row (or class average) has zero norm."""


class MissingClassError(ValueError):
    """Prototype construction found classes with no retention samples."""

    def __init__(self, missing: list[int]):
        super().__init__(f"no retention samples for classes {missing}")
        self.missing = missing


@dataclass
class AnchorSet:
    """b unit-norm anchor rows of dimension d, one semantic point per class."""

    matrix: np.ndarray
    source: str
    class_names: tuple[str, ...] | None = None
    attributes: tuple[str, ...] | None = None
    source_note: str | None = None

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 2:
            raise ValueError("anchor matrix must have at least 2 rows")
        norms = np.linalg.norm(m, axis=1)
        if (norms < _UNIT_TOL).any():
            raise ZeroRowError("anchor rows must be nonzero")
        m = m / norms[:, None]
        m.flags.writeable = False
        self.matrix = m

    @property
    def b(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def checksum(self) -> str:
        return hashlib.sha256(self.matrix.tobytes()).hexdigest()


def gen_synthetic_anchors(b: int, d: int, seed: int, mode: str = "orthonormal") -> AnchorSet:
    """Seeded synthetic anchors.

    ``orthonormal`` Gram-Schmidts seeded Gaussian rows (requires d >= b) so
    anchors are pairwise orthogonal; ``random_unit`` just normalizes
    independent Gaussian rows.
    """
    if b < 2:
        raise ValueError("b must be at least 2")
    if mode not in ("orthonormal", "random_unit"):
        raise ValueError(f"unknown anchor mode {mode!r}")
    if mode == "orthonormal" and d < b:
        raise ValueError(f"orthonormal anchors need d >= b, got d={d} b={b}")
    rng = Xoshiro256(seed)
    rows = np.zeros((b, d))
    for c in range(b):
        while True:
            v = rng.normals(d)
            if mode == "orthonormal":
                for prev in rows[:c]:
                    v = v - np.dot(v, prev) * prev
            norm = float(np.linalg.norm(v))
            if norm > 1e-8:
                rows[c] = v / norm
                break
    return AnchorSet(rows, source="synthetic")


def visual_prototype_anchors(snap: Snapshot, retain: LabeledDataset) -> AnchorSet:
    """Per-class mean of retention embeddings under the frozen snapshot."""
    b = retain.class_count
    x, y = retain.peek()
    emb = features(snap, x)
    missing = [c for c in range(b) if not (y == c).any()]
    if missing:
        raise MissingClassError(missing)
    rows = np.zeros((b, emb.shape[1]))
    for c in range(b):
        rows[c] = emb[y == c].mean(axis=0)
    return AnchorSet(rows, source="prototype")


def save_anchors(anchors: AnchorSet, path) -> None:
    payload = {
        "version": ANCHOR_FORMAT_VERSION,
        "b": anchors.b,
        "d": anchors.d,
        "rows": [[float(v) for v in row] for row in anchors.matrix],
    }
    if anchors.class_names is not None:
        payload["class_names"] = list(anchors.class_names)
    if anchors.attributes is not None:
        payload["attributes"] = list(anchors.attributes)
    if anchors.source_note is not None:
        payload["source_note"] = anchors.source_note
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_anchors(path) -> AnchorSet:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnchorFileError(f"not valid JSON: {exc}") from exc
    for key in ("version", "b", "d", "rows"):
        if key not in payload:
            raise AnchorFileError(f"missing field {key!r}")
    if payload["version"] != ANCHOR_FORMAT_VERSION:
        raise AnchorFileError(f"unsupported version {payload['version']!r}")
    b, d = int(payload["b"]), int(payload["d"])
    rows = payload["rows"]
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise DimensionInconsistencyError(f"mixed row widths {sorted(widths)}")
    if widths and widths != {d}:
        raise DimensionInconsistencyError(
            f"rows have width {widths.pop()}, header says d={d}"
        )
    raw = np.asarray(rows, dtype=np.float64)
    if raw.ndim != 2:
        raise AnchorFileError("rows must form a matrix")

    class_ids = payload.get("class_ids")
    if class_ids is not None:
        if len(class_ids) != raw.shape[0]:
            raise AnchorFileError("class_ids must have one entry per row")
        ids = [int(c) for c in class_ids]
        if sorted(set(ids)) != list(range(b)):
            raise AnchorFileError(f"class_ids must cover 0..{b - 1}")
        grouped = np.zeros((b, raw.shape[1]))
        for c in range(b):
            members = raw[[i for i, cid in enumerate(ids) if cid == c]]
            grouped[c] = members.mean(axis=0)
        raw = grouped
    elif raw.shape[0] != b:
        raise AnchorFileError(f"expected {b} rows, found {raw.shape[0]}")

    norms = np.linalg.norm(raw, axis=1)
    if (norms < _UNIT_TOL).any():
        raise ZeroRowError("zero anchor rows are not allowed")
    names = payload.get("class_names")
    attrs = payload.get("attributes")
    return AnchorSet(
        raw,
        source="file",
        class_names=tuple(names) if names else None,
        attributes=tuple(attrs) if attrs else None,
        source_note=payload.get("source_note"),
    )
