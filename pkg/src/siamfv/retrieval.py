"""Baseline aggregators, exact distance ranking, and average-precision
evaluation.

Ranking is brute-force and exact (desk scale); ties are broken by item id
ascending so orders are total and reproducible. On unit vectors, ascending
Euclidean order equals descending cosine order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SiamFvError
from .fv import as_descriptor_set

UNIT_NORM_TOL = 1e-8


@dataclass(frozen=True)
class GalleryIndex:
    """Immutable evaluation gallery.

    Attributes:
        ids: Item identifiers, one per row of vectors.
        vectors: (N, m) matrix of unit L2 vectors.
        dataset_tags: Per-item dataset tag (or None), for cross-dataset
            bookkeeping.
        relevance: query id -> set of relevant item ids.
        ignore: query id -> set of ids excluded from both the ranking and
            the AP numerator (the query lists itself here to be skipped).
    """

    ids: list
    vectors: np.ndarray
    dataset_tags: list = field(default_factory=list)
    relevance: dict = field(default_factory=dict)
    ignore: dict = field(default_factory=dict)

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.ids):
            raise ValueError("vectors must be (N, m) with one id per row")
        norms = np.linalg.norm(vectors, axis=1)
        if vectors.shape[0] and np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError("gallery vectors must be unit length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("gallery ids must be unique")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(
            self,
            "dataset_tags",
            list(self.dataset_tags) if self.dataset_tags else [None] * len(self.ids),
        )

    def vector_of(self, item_id: str) -> np.ndarray:
        try:
            return self.vectors[self.ids.index(item_id)]
        except ValueError:
            raise KeyError(f"unknown gallery item {item_id!r}") from None


def baseline_pool(descriptors, mode: str) -> np.ndarray:
    """Elementwise sum- or max-pooling over descriptors, L2-normalized.

    Raises:
        SiamFvError: "degenerate pooled vector" when pooling yields zero.
    """
    descriptors = as_descriptor_set(descriptors)
    if mode == "sum":
        pooled = descriptors.data.sum(axis=0)
    elif mode == "max":
        pooled = descriptors.data.max(axis=0)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    norm = np.linalg.norm(pooled)
    if norm <= 0.0:
        raise SiamFvError("degenerate pooled vector")
    return pooled / norm


def rank(query_vector, gallery: GalleryIndex, exclude=frozenset()) -> list:
    """Gallery ids by ascending Euclidean distance to the query.

    Distances are computed directly on the difference vectors; the order is
    total, with exact-distance ties broken by id ascending. Items in
    `exclude` are dropped from the ranking.
    """
    query = np.asarray(query_vector, dtype=np.float64).reshape(-1)
    if len(gallery.ids) == 0:
        return []
    if query.size != gallery.vectors.shape[1]:
        raise ValueError("query dimension does not match the gallery")
    dists = np.linalg.norm(gallery.vectors - query[None, :], axis=1)
    order = sorted(
        (i for i, gid in enumerate(gallery.ids) if gid not in exclude),
        key=lambda i: (dists[i], gallery.ids[i]),
    )
    return [gallery.ids[i] for i in order]


def average_precision(ranked, relevant, ignore=frozenset()) -> float:
    """Non-interpolated average precision of one ranked list.

    AP = (1/|relevant|) * sum over relevant hits of precision-at-hit.
    Relevant items missing from the ranking count as never retrieved.
    Ignored ids are removed from the ranking and from the relevant set.

    Raises:
        SiamFvError: "undefined AP" when the relevant set is empty.
    """
    relevant = {r for r in relevant if r not in ignore}
    if not relevant:
        raise SiamFvError("undefined AP")
    filtered = [rid for rid in ranked if rid not in ignore]
    if not filtered:
        return 0.0
    hits = np.fromiter((rid in relevant for rid in filtered), dtype=bool)
    cum_hits = np.cumsum(hits)
    precision = cum_hits / np.arange(1, len(filtered) + 1)
    return float(precision[hits].sum() / len(relevant))


def mean_average_precision(queries, gallery: GalleryIndex) -> float:
    """Unweighted mean AP over (query id, ranked list) pairs.

    Relevance and ignore sets come from the gallery.
    """
    if not queries:
        raise SiamFvError("no queries")
    total = 0.0
    for qid, ranked in queries:
        total += average_precision(
            ranked, gallery.relevance[qid], gallery.ignore.get(qid, frozenset())
        )
    return total / len(queries)


def evaluate_gallery(gallery: GalleryIndex) -> dict:
    """Rank and score every query in the gallery.

    Returns {"map": float, "num_queries": int,
    "per_query": [{"id", "ap", "num_relevant"}]} with queries in manifest
    order.
    """
    per_query = []
    pairs = []
    for qid in gallery.relevance:
        ignore = gallery.ignore.get(qid, frozenset())
        ranked = rank(gallery.vector_of(qid), gallery, exclude=ignore)
        pairs.append((qid, ranked))
        ap = average_precision(ranked, gallery.relevance[qid], ignore)
        per_query.append(
            {
                "id": qid,
                "ap": ap,
                "num_relevant": len(gallery.relevance[qid] - set(ignore)),
            }
        )
    return {
        "map": mean_average_precision(pairs, gallery),
        "num_queries": len(per_query),
        "per_query": per_query,
    }


def leave_one_out_map(ids, class_labels, vectors, dataset_tags=None) -> float:
    """mAP where every item queries all others; same class means relevant.

    Items whose class has no other member are skipped (their AP is
    undefined).
    """
    ids = list(ids)
    labels = list(class_labels)
    by_class = {}
    for gid, cls in zip(ids, labels):
        by_class.setdefault(cls, set()).add(gid)
    relevance, ignore = {}, {}
    for gid, cls in zip(ids, labels):
        rel = by_class[cls] - {gid}
        if rel:
            relevance[gid] = rel
            ignore[gid] = {gid}
    gallery = GalleryIndex(
        ids=ids,
        vectors=np.asarray(vectors, dtype=np.float64),
        dataset_tags=list(dataset_tags) if dataset_tags else [],
        relevance=relevance,
        ignore=ignore,
    )
    return evaluate_gallery(gallery)["map"]
