"""Binary file formats and JSON manifests.

Formats (all little-endian):
  FVD1  descriptor/vector file: magic "FVD1", u32 T, u32 d, u32 reserved=0,
        then T*d float32 values, row-major. Vectors are stored as T=1 files.
  FVG1  mixture model: magic "FVG1", u32 C, u32 d, then weights (C float64),
        means (C*d float64, cluster-major), stddevs (C*d float64).
  FVP1  projection model: magic "FVP1", method byte (0=pca, 1=lda), u32 D,
        u32 m, then mean (D float64), basis (D*m float64, column-major),
        whitening scales (m float64).

Relative paths inside any manifest are resolved against the manifest's
directory. JSON artifacts are written with sorted keys so outputs are
byte-reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SiamFvError
from .fv import GmmModel

_METHOD_BYTES = {"pca": 0, "lda": 1}
_METHOD_NAMES = {v: k for k, v in _METHOD_BYTES.items()}


def write_descriptors(path, data) -> None:
    """Write a (T, d) array as an FVD1 file (float32 on disk)."""
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim == 1:
        data = data[None, :]
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        raise ValueError("descriptor data must be a non-empty (T, d) matrix")
    with open(path, "wb") as fh:
        fh.write(b"FVD1")
        fh.write(struct.pack("<III", data.shape[0], data.shape[1], 0))
        fh.write(data.astype("<f4").tobytes())


def read_descriptors(path) -> np.ndarray:
    """Read an FVD1 file, widening to float64. Returns a (T, d) array."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != b"FVD1":
        raise SiamFvError(f"not an FVD1 file: {path}")
    count, dim, reserved = struct.unpack("<III", blob[4:16])
    if reserved != 0:
        raise SiamFvError(f"bad FVD1 reserved field: {path}")
    expected = 16 + 4 * count * dim
    if count < 1 or dim < 1 or len(blob) != expected:
        raise SiamFvError(f"truncated FVD1 file: {path}")
    data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(count, dim)
    return data.astype(np.float64)


def write_gmm(path, gmm: GmmModel) -> None:
    with open(path, "wb") as fh:
        fh.write(b"FVG1")
        fh.write(struct.pack("<II", gmm.num_clusters, gmm.dim))
        fh.write(gmm.weights.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(gmm.means, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(gmm.stddevs, dtype="<f8").tobytes())


def read_gmm(path, posterior_mode: str = "plain") -> GmmModel:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != b"FVG1":
        raise SiamFvError(f"not an FVG1 file: {path}")
    num_clusters, dim = struct.unpack("<II", blob[4:12])
    expected = 12 + 8 * (num_clusters + 2 * num_clusters * dim)
    if num_clusters < 1 or dim < 1 or len(blob) != expected:
        raise SiamFvError(f"truncated FVG1 file: {path}")
    off = 12
    weights = np.frombuffer(blob, dtype="<f8", offset=off, count=num_clusters)
    off += 8 * num_clusters
    means = np.frombuffer(blob, dtype="<f8", offset=off, count=num_clusters * dim)
    off += 8 * num_clusters * dim
    stddevs = np.frombuffer(blob, dtype="<f8", offset=off, count=num_clusters * dim)
    return GmmModel(
        weights=weights,
        means=means.reshape(num_clusters, dim),
        stddevs=stddevs.reshape(num_clusters, dim),
        posterior_mode=posterior_mode,
    )


def write_projection(path, model) -> None:
    method = _METHOD_BYTES.get(model.method)
    if method is None:
        raise ValueError(f"unknown projection method {model.method!r}")
    full_dim, reduced = model.basis.shape
    with open(path, "wb") as fh:
        fh.write(b"FVP1")
        fh.write(struct.pack("<BII", method, full_dim, reduced))
        fh.write(model.mean.astype("<f8").tobytes())
        fh.write(np.asfortranarray(model.basis, dtype="<f8").tobytes(order="F"))
        fh.write(model.whitening_scales.astype("<f8").tobytes())


def read_projection(path):
    from .projection import ProjectionModel

    blob = Path(path).read_bytes()
    if len(blob) < 13 or blob[:4] != b"FVP1":
        raise SiamFvError(f"not an FVP1 file: {path}")
    method_byte, full_dim, reduced = struct.unpack("<BII", blob[4:13])
    if method_byte not in _METHOD_NAMES:
        raise SiamFvError(f"bad FVP1 method byte: {path}")
    expected = 13 + 8 * (full_dim + full_dim * reduced + reduced)
    if len(blob) != expected:
        raise SiamFvError(f"truncated FVP1 file: {path}")
    off = 13
    mean = np.frombuffer(blob, dtype="<f8", offset=off, count=full_dim)
    off += 8 * full_dim
    basis = np.frombuffer(blob, dtype="<f8", offset=off, count=full_dim * reduced)
    basis = basis.reshape(full_dim, reduced, order="F")
    off += 8 * full_dim * reduced
    scales = np.frombuffer(blob, dtype="<f8", offset=off, count=reduced)
    return ProjectionModel(
        method=_METHOD_NAMES[method_byte],
        mean=mean.copy(),
        basis=basis.copy(),
        whitening_scales=scales.copy(),
    )


def save_json(obj, path) -> None:
    """Deterministic JSON writer (sorted keys, trailing newline)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def append_jsonl(obj, path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestItem:
    """One training/encoding item with its loaded (T, d) array.

    kind is "descriptors" when the array feeds the aggregation layer
    directly, or "raw_patches" when it must first pass through a backbone.
    """

    item_id: str
    class_label: str
    kind: str
    data: np.ndarray


@dataclass(frozen=True)
class TrainingManifest:
    items: list
    eval_items: list
    dataset_tag: str | None = None


def _load_item(entry, base: Path) -> ManifestItem:
    if "descriptor_path" in entry:
        kind, rel = "descriptors", entry["descriptor_path"]
    elif "raw_patch_path" in entry:
        kind, rel = "raw_patches", entry["raw_patch_path"]
    else:
        raise SiamFvError(f"manifest item {entry.get('id')!r} has no data path")
    return ManifestItem(
        item_id=str(entry["id"]),
        class_label=str(entry.get("class_label", "")),
        kind=kind,
        data=read_descriptors(base / rel),
    )


def load_training_manifest(path) -> TrainingManifest:
    """Load a training manifest and every referenced data file.

    Schema: {"dataset_tag"?, "items": [{"id", "class_label",
    "descriptor_path" | "raw_patch_path"}], "eval_items"?: [...]}.
    Duplicate ids or missing files fail here, before any computation starts.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "items" not in doc:
        raise SiamFvError(f"bad training manifest: {path}")
    base = path.parent
    items = [_load_item(e, base) for e in doc["items"]]
    eval_items = [_load_item(e, base) for e in doc.get("eval_items", [])]
    if not items:
        raise SiamFvError("manifest lists no items")
    seen = set()
    for item in items + eval_items:
        if item.item_id in seen:
            raise SiamFvError(f"duplicate item id {item.item_id!r}")
        seen.add(item.item_id)
    dims = {item.data.shape[1] for item in items + eval_items}
    if len(dims) != 1:
        raise SiamFvError("manifest items disagree on descriptor dimension")
    return TrainingManifest(
        items=items, eval_items=eval_items, dataset_tag=doc.get("dataset_tag")
    )


def load_gallery(path):
    """Load a gallery manifest into a GalleryIndex.

    Schema: {"items": [{"id", "vector_path" | "descriptor_path",
    "dataset_tag"?}], "queries": [{"id", "relevant": [...], "ignore"?: [...]}]}.
    Vector files are single-row FVD1 files; they are widened to float64 and
    renormalized to exact unit length (float32 storage drifts the norm by
    ~1e-7, beyond the index's 1e-8 invariant).
    """
    from .retrieval import GalleryIndex

    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    base = path.parent
    ids, vectors, tags = [], [], []
    for entry in doc.get("items", []):
        rel = entry.get("vector_path") or entry.get("descriptor_path")
        if rel is None:
            raise SiamFvError(f"gallery item {entry.get('id')!r} has no vector path")
        vec = read_descriptors(base / rel)
        if vec.shape[0] != 1:
            raise SiamFvError(f"gallery vector file must have T=1: {rel}")
        vec = vec[0]
        norm = np.linalg.norm(vec)
        if abs(norm - 1.0) > 1e-3:
            raise SiamFvError(f"gallery vector is not unit length: {entry.get('id')!r}")
        ids.append(str(entry["id"]))
        vectors.append(vec / norm)
        tags.append(entry.get("dataset_tag"))
    relevance, ignore = {}, {}
    for q in doc.get("queries", []):
        qid = str(q["id"])
        relevance[qid] = set(map(str, q.get("relevant", [])))
        ignore[qid] = set(map(str, q.get("ignore", [])))
    return GalleryIndex(
        ids=ids,
        vectors=np.asarray(vectors, dtype=np.float64),
        dataset_tags=tags,
        relevance=relevance,
        ignore=ignore,
    )
