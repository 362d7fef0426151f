"""Evaluation metrics: accuracies, representation consistency, confusion
matrices, embedding retrieval, and anchor affinity profiles.

All accuracies are percentages; argmax ties break toward the lowest class
index (numpy argmax semantics), which keeps evaluation deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..anchor import AnchorSet
from ..datakit import LabeledDataset
from ..model import features, logits_direct, logits_projected


class EmptyDatasetError(ValueError):
    """A metric was asked to evaluate an empty dataset."""


class InvalidKError(ValueError):
    """A retrieval cutoff exceeds the gallery size or is not positive."""


def accuracy(m, data: LabeledDataset, path: str = "direct") -> float:
    """Percentage of argmax predictions matching the labels."""
    if data.n == 0:
        raise EmptyDatasetError("cannot compute accuracy on an empty dataset")
    x, y = data.peek()
    if path == "direct":
        logits = logits_direct(m, x)
    elif path == "projected":
        logits = logits_projected(m, x)
    else:
        raise ValueError(f"path must be 'direct' or 'projected', got {path!r}")
    return float((logits.argmax(axis=1) == y).mean()) * 100.0


def representation_consistency(snap, m, data: LabeledDataset) -> np.ndarray:
    """Per-sample cosine between snapshot and current embeddings of the same input."""
    if data.n == 0:
        raise EmptyDatasetError("cannot compute consistency on an empty dataset")
    x, _ = data.peek()
    before = features(snap, x)
    after = features(m, x)
    num = (before * after).sum(axis=1)
    denom = np.maximum(
        np.linalg.norm(before, axis=1) * np.linalg.norm(after, axis=1), 1e-12
    )
    return num / denom


def consistency_histogram(cosines: np.ndarray, bins: int = 20) -> dict:
    counts, edges = np.histogram(cosines, bins=bins, range=(-1.0, 1.0))
    return {"bin_edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def confusion_matrix(m, forget: LabeledDataset) -> np.ndarray:
    """counts[true][predicted] over the forget set, direct path."""
    if forget.n == 0:
        raise EmptyDatasetError("cannot build a confusion matrix from an empty set")
    x, y = forget.peek()
    pred = logits_direct(m, x).argmax(axis=1)
    b = forget.class_count
    counts = np.zeros((b, b), dtype=np.int64)
    for t, p in zip(y, pred):
        counts[t, p] += 1
    return counts


def retrieval_eval(
    m, queries: LabeledDataset, gallery: LabeledDataset, ks: list[int]
) -> dict:
    """Recall@k and mean average precision for same-class retrieval.

    Gallery items are ranked per query by embedding cosine (descending,
    stable ties). A query with no relevant gallery item contributes zero
    average precision.
    """
    if not ks or any(k < 1 for k in ks):
        raise InvalidKError("retrieval cutoffs must be positive")
    if max(ks) >= gallery.n:
        raise InvalidKError(
            f"gallery size {gallery.n} must exceed the largest cutoff {max(ks)}"
        )
    qx, qy = queries.peek()
    gx, gy = gallery.peek()
    q_emb = features(m, qx)
    g_emb = features(m, gx)
    sims = q_emb @ g_emb.T  # rows are unit vectors, so this is cosine
    order = np.argsort(-sims, axis=1, kind="stable")
    ranked_labels = gy[order]
    relevant = ranked_labels == qy[:, None]

    recall_at = {}
    for k in ks:
        recall_at[int(k)] = float(relevant[:, :k].any(axis=1).mean()) * 100.0

    ap_values = []
    for row in relevant:
        total_rel = int(row.sum())
        if total_rel == 0:
            ap_values.append(0.0)
            continue
        hits = np.cumsum(row)
        ranks = np.arange(1, row.size + 1)
        precision_at_hits = hits[row] / ranks[row]
        ap_values.append(float(precision_at_hits.sum() / total_rel))
    return {"recall_at": recall_at, "map": float(np.mean(ap_values)) * 100.0}


@dataclass
class AnchorProfile:
    """Per-anchor affinities of one instance before and after unlearning."""

    original: list[float]
    current: list[float]
    top_anchors: list[int]

    def as_dict(self) -> dict:
        return {
            "original": self.original,
            "current": self.current,
            "top_anchors": self.top_anchors,
        }


def anchor_profile(m, snap, x: np.ndarray, anchors: AnchorSet, top_n: int) -> AnchorProfile:
    """Affinity rows of one instance under the snapshot and the current model."""
    if top_n < 1 or top_n > anchors.b:
        raise ValueError(f"top_n must lie in [1, {anchors.b}]")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ori = (features(snap, x) @ anchors.matrix.T)[0]
    cur = (features(m, x) @ anchors.matrix.T)[0]
    top = np.argsort(-cur, kind="stable")[:top_n]
    return AnchorProfile(
        original=[float(v) for v in ori],
        current=[float(v) for v in cur],
        top_anchors=[int(i) for i in top],
    )
