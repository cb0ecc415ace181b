"""Synthetic labeled descriptor datasets.

Each class is a mixture of Gaussians: every descriptor is the sum of a
shared nuisance-cluster center (drawn with item-specific usage frequencies),
a class-specific offset, and anisotropic noise. The cluster structure and
the loud noise live in the first half of the dimensions while the class
signal sits in the quieter second half, so unsupervised fitting latches onto
structure a trained linear backbone can learn to suppress; supervised
training therefore has real headroom over the unsupervised initialization.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import save_json, write_descriptors

NUISANCE_CLUSTERS = 6
CENTER_SCALE = 2.0     # magnitude of the shared nuisance centers (first half)
OFFSET_SCALE = 0.55    # magnitude of the per-class offsets (second half)
NOISE_SCALE = 0.30     # per-descriptor isotropic noise
USAGE_ALPHA = 4.0      # Dirichlet concentration of per-item cluster usage
SHIFT_SCALE = 2.5      # magnitude of the item-level nuisance shift
SHIFT_PROB = 0.6       # fraction of items carrying the shift


@dataclass(frozen=True)
class SynthItem:
    item_id: str
    class_label: str
    patches: np.ndarray  # (T, d) raw patch vectors


@dataclass(frozen=True)
class SynthDataset:
    train_items: list
    eval_items: list
    dataset_tag: str
    dim: int


def generate(classes: int, items_per_class: int, descriptors_per_item: int,
             dim: int, seed: int, eval_per_class: int | None = None,
             tag: str | None = None) -> SynthDataset:
    """Generate a labeled dataset of raw patch sets.

    Args:
        classes: Number of classes.
        items_per_class: Training items per class.
        descriptors_per_item: Patches per item (T).
        dim: Patch dimension (d); must be >= 2 so the nuisance and class
            subspaces are distinct.
        seed: Generator seed; identical seeds reproduce identical data.
        eval_per_class: Held-out items per class; defaults to
            max(2, items_per_class // 4).
        tag: Dataset tag; defaults to "synth-s<seed>".
    """
    if min(classes, items_per_class, descriptors_per_item) < 1 or dim < 2:
        raise ValueError("need classes, items, descriptors >= 1 and dim >= 2")
    if eval_per_class is None:
        eval_per_class = max(2, items_per_class // 4)
    rng = np.random.default_rng(seed)
    half = dim // 2

    centers = np.zeros((NUISANCE_CLUSTERS, dim))
    centers[:, :half] = CENTER_SCALE * rng.standard_normal((NUISANCE_CLUSTERS, half))
    offsets = np.zeros((classes, dim))
    offsets[:, half:] = OFFSET_SCALE * rng.standard_normal((classes, dim - half))

    def make_item(cls: int, item_id: str) -> SynthItem:
        usage = rng.dirichlet(np.full(NUISANCE_CLUSTERS, USAGE_ALPHA))
        picks = rng.choice(NUISANCE_CLUSTERS, size=descriptors_per_item, p=usage)
        # Half the items carry a large nuisance-plane displacement shared by
        # all their descriptors; it corrupts rankings until the model learns
        # to discount that plane.
        shift = np.zeros(dim)
        if rng.random() < SHIFT_PROB:
            direction = rng.standard_normal(half)
            shift[:half] = SHIFT_SCALE * direction / np.linalg.norm(direction)
        patches = (
            centers[picks]
            + offsets[cls][None, :]
            + shift[None, :]
            + NOISE_SCALE * rng.standard_normal((descriptors_per_item, dim))
        )
        return SynthItem(item_id=item_id, class_label=f"c{cls:03d}", patches=patches)

    train_items, eval_items = [], []
    for cls in range(classes):
        for n in range(items_per_class):
            train_items.append(make_item(cls, f"c{cls:03d}_i{n:03d}"))
        for n in range(eval_per_class):
            eval_items.append(make_item(cls, f"c{cls:03d}_e{n:03d}"))
    return SynthDataset(
        train_items=train_items,
        eval_items=eval_items,
        dataset_tag=tag if tag is not None else f"synth-s{seed}",
        dim=dim,
    )


def write_dataset(dataset: SynthDataset, out_dir) -> dict:
    """Write patch files plus the training and gallery manifests.

    Layout under out_dir: descriptors/<id>.fvd for every item,
    manifest.json (training manifest with the eval split), and gallery.json
    whose vector paths point at vectors/<id>.fvd, the conventional target of
    the encode step over the eval items.

    Returns the paths written, keyed "manifest" and "gallery".
    """
    out_dir = Path(out_dir)
    desc_dir = out_dir / "descriptors"
    desc_dir.mkdir(parents=True, exist_ok=True)

    def entry(item: SynthItem) -> dict:
        write_descriptors(desc_dir / f"{item.item_id}.fvd", item.patches)
        return {
            "id": item.item_id,
            "class_label": item.class_label,
            "raw_patch_path": f"descriptors/{item.item_id}.fvd",
        }

    manifest = {
        "dataset_tag": dataset.dataset_tag,
        "items": [entry(it) for it in dataset.train_items],
        "eval_items": [entry(it) for it in dataset.eval_items],
    }
    manifest_path = out_dir / "manifest.json"
    save_json(manifest, manifest_path)

    by_class: dict = {}
    for item in dataset.eval_items:
        by_class.setdefault(item.class_label, []).append(item.item_id)
    gallery = {
        "items": [
            {
                "id": item.item_id,
                "vector_path": f"vectors/{item.item_id}.fvd",
                "dataset_tag": dataset.dataset_tag,
            }
            for item in dataset.eval_items
        ],
        "queries": [
            {
                "id": item.item_id,
                "relevant": sorted(set(by_class[item.class_label]) - {item.item_id}),
                "ignore": [item.item_id],
            }
            for item in dataset.eval_items
        ],
    }
    gallery_path = out_dir / "gallery.json"
    save_json(gallery, gallery_path)
    return {"manifest": str(manifest_path), "gallery": str(gallery_path)}
