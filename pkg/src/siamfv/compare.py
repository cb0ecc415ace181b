"""Aggregator comparison harness.

Benchmarks the Fisher-vector encoder against sum- and max-pooling on a
synthetic dataset, at several whitened-PCA dimensions, and emits a
methods-by-dimensions report (JSON + CSV + figure). The projection is
always fitted on a dataset generated independently of the evaluation
gallery; the harness asserts this by dataset tag before projecting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .em import EmConfig, em_fit
from .errors import SiamFvError
from .fv import fv_encode
from .projection import fit_pca_whiten, project, truncated
from .report import write_comparison_report
from .retrieval import baseline_pool, leave_one_out_map
from .synth import generate

METHODS = ("fv", "sum", "max")


@dataclass(frozen=True)
class CompareConfig:
    """Benchmark sizes.

    The descriptor dimension is chosen so every requested reduction is
    realizable for every method: sum/max vectors have dimension `dim` and
    Fisher vectors `num_clusters * dim`, so with the defaults (512, 8) even
    the largest standard reduction (512) fits, and the projection-fit
    dataset has more items than the widest reduction.
    """

    dims: tuple = (128, 256, 512)
    dim: int = 512
    num_clusters: int = 8
    descriptors_per_item: int = 32
    fit_classes: int = 30
    fit_items_per_class: int = 18
    eval_classes: int = 12
    eval_items_per_class: int = 12
    em_subsample: int = 4000
    em_max_iters: int = 40


def _encode_matrix(items, method: str, gmm) -> np.ndarray:
    if method == "fv":
        return np.stack([fv_encode(it.patches, gmm).normalized for it in items])
    return np.stack([baseline_pool(it.patches, method) for it in items])


def run_aggregator_comparison(out_dir, seed: int, cfg: CompareConfig | None = None) -> dict:
    """Run the benchmark and write comparison.{json,csv,png} under out_dir.

    Deterministic for a fixed seed: dataset generation, the EM fit, the
    projection fits and the rankings all derive from it.
    """
    cfg = cfg or CompareConfig()
    if max(cfg.dims) >= cfg.fit_classes * cfg.fit_items_per_class:
        raise ValueError("projection-fit dataset is smaller than the widest reduction")

    fit_data = generate(
        cfg.fit_classes, cfg.fit_items_per_class, cfg.descriptors_per_item,
        cfg.dim, seed=seed, eval_per_class=0, tag=f"synth-fit-s{seed}",
    )
    eval_data = generate(
        cfg.eval_classes, cfg.eval_items_per_class, cfg.descriptors_per_item,
        cfg.dim, seed=seed + 1000003, eval_per_class=0, tag=f"synth-eval-s{seed}",
    )

    rng = np.random.default_rng(seed)
    pooled = np.concatenate([it.patches for it in fit_data.train_items])
    if pooled.shape[0] > cfg.em_subsample:
        pooled = pooled[rng.choice(pooled.shape[0], cfg.em_subsample, replace=False)]
    gmm = em_fit(pooled, EmConfig(num_clusters=cfg.num_clusters,
                                  max_iters=cfg.em_max_iters, seed=seed))

    eval_ids = [it.item_id for it in eval_data.train_items]
    eval_labels = [it.class_label for it in eval_data.train_items]
    rows = []
    for method in METHODS:
        fit_matrix = _encode_matrix(fit_data.train_items, method, gmm)
        eval_matrix = _encode_matrix(eval_data.train_items, method, gmm)
        widest = min(max(cfg.dims), fit_matrix.shape[1])
        base_model = fit_pca_whiten(fit_matrix, widest,
                                    dataset_tag=fit_data.dataset_tag)
        if base_model.fit_dataset_tag == eval_data.dataset_tag:
            raise SiamFvError("projection fit dataset overlaps the evaluation gallery")
        for dim in cfg.dims:
            if dim > base_model.output_dim:
                rows.append({"method": method, "dim": dim, "map": None})
                continue
            model = truncated(base_model, dim)
            projected = np.stack([project(v, model) for v in eval_matrix])
            rows.append({
                "method": method,
                "dim": dim,
                "map": leave_one_out_map(eval_ids, eval_labels, projected),
            })

    report = {
        "seed": seed,
        "dims": list(cfg.dims),
        "descriptor_dim": cfg.dim,
        "num_clusters": cfg.num_clusters,
        "fit_dataset": fit_data.dataset_tag,
        "eval_dataset": eval_data.dataset_tag,
        "rows": rows,
    }
    write_comparison_report(report, out_dir)
    return report
