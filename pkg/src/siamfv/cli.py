"""Command-line entry point.

Subcommands: init-gmm, train, encode, gradcheck, project, eval, synth.
Exit codes: 0 success, 1 domain error (one machine-parsable JSON line on
stderr), 2 usage error. Every subcommand accepts --seed and is
byte-reproducible for a fixed value; --threads caps the numeric libraries'
internal parallelism (set before they are imported, which is why all
implementation imports below live inside the handlers).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

GRADCHECK_TOLERANCE = 1e-6
_FAMILY_ORDER = ("omega", "mu", "sigma", "x", "normalized_chain", "loss", "backbone")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="siamfv",
        description="Trainable Fisher-vector aggregation: fitting, training, "
        "encoding, projection and retrieval evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
        p.add_argument("--threads", type=int, default=None,
                       help="cap internal parallelism (default: machine)")

    p = sub.add_parser("init-gmm", help="fit the mixture on pooled descriptors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--subsample", type=int, default=200000,
                   help="max pooled descriptors used for the fit")
    common(p)

    p = sub.add_parser("train", help="contrastive Siamese training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gmm", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--margin", type=float, default=0.8)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--momentum", type=float, default=0.5)
    p.add_argument("--weight-decay", type=float, default=0.0005)
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", default=None, help="initial backbone JSON")
    p.add_argument("--iters-per-epoch", type=int, default=6000)
    p.add_argument("--remine-every", type=int, default=2000)
    p.add_argument("--pairs-per-mine", type=int, default=2000)
    p.add_argument("--negatives-per-pair", type=int, default=5)
    common(p)

    p = sub.add_parser("encode", help="encode manifest items to unit vectors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gmm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pool", choices=["fv", "sum", "max"], default="fv")
    p.add_argument("--backbone", default=None, help="backbone JSON for raw patches")
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient certification")
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--step", type=float, default=1e-6, help="relative step")
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.add_argument("--out", default=None, help="also write the JSON report here")
    common(p)

    p = sub.add_parser("project", help="fit or apply a whitened reduction")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--fit", choices=["pca", "lda"])
    group.add_argument("--apply", metavar="FVP1")
    p.add_argument("--vectors", required=True, help="vectors.json index")
    p.add_argument("--dim", type=int, choices=[128, 256, 512], default=512)
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("eval", help="rank and score a gallery manifest")
    p.add_argument("--gallery", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    common(p)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--items-per-class", type=int, required=True)
    p.add_argument("--descriptors-per-item", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--out", required=True)
    common(p)

    return parser


def _set_threads(threads):
    if threads is None:
        return
    if threads < 1:
        raise ValueError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def _load_backbone(path):
    from .training import BackboneModel

    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return BackboneModel(weight=doc["weight"], bias=doc["bias"])


def _save_backbone(backbone, path):
    from .io import save_json

    save_json(
        {"weight": backbone.weight.tolist(), "bias": backbone.bias.tolist()}, path
    )


def _load_vector_index(path):
    """Read a vectors.json index; returns (ids, labels, tags, matrix)."""
    import numpy as np

    from .errors import SiamFvError
    from .io import read_descriptors

    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    ids, labels, tags, vectors = [], [], [], []
    for entry in doc.get("items", []):
        ids.append(str(entry["id"]))
        labels.append(entry.get("class_label"))
        tags.append(entry.get("dataset_tag"))
        vec = read_descriptors(path.parent / entry["vector_path"])
        if vec.shape[0] != 1:
            raise SiamFvError(f"vector file must have T=1: {entry['vector_path']}")
        vectors.append(vec[0])
    if not ids:
        raise SiamFvError(f"vector index lists no items: {path}")
    return ids, labels, tags, np.stack(vectors)


def _write_vector_index(out_dir, ids, labels, tags, matrix):
    from .io import save_json, write_descriptors

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = []
    for i, item_id in enumerate(ids):
        write_descriptors(out_dir / f"{item_id}.fvd", matrix[i][None, :])
        entry = {"id": item_id, "vector_path": f"{item_id}.fvd"}
        if labels[i] is not None:
            entry["class_label"] = labels[i]
        if tags[i] is not None:
            entry["dataset_tag"] = tags[i]
        items.append(entry)
    save_json({"items": items}, out_dir / "vectors.json")


def cmd_init_gmm(args) -> int:
    import numpy as np

    from .em import EmConfig, em_fit
    from .io import load_training_manifest, write_gmm

    manifest = load_training_manifest(args.manifest)
    pooled = np.concatenate([item.data for item in manifest.items])
    if pooled.shape[0] > args.subsample:
        rng = np.random.default_rng(args.seed)
        pooled = pooled[rng.choice(pooled.shape[0], args.subsample, replace=False)]
    cfg = EmConfig(num_clusters=args.clusters, max_iters=args.max_iters,
                   tol=args.tol, seed=args.seed)
    model = em_fit(pooled, cfg)
    write_gmm(args.out, model)
    print(f"fitted {args.clusters} clusters on {pooled.shape[0]} descriptors "
          f"-> {args.out}")
    return 0


def cmd_train(args) -> int:
    from .io import load_training_manifest, read_gmm, write_gmm
    from .report import save_loss_curve
    from .training import TrainConfig, train

    manifest = load_training_manifest(args.manifest)
    gmm = read_gmm(args.gmm)
    backbone = _load_backbone(args.backbone) if args.backbone else None
    cfg = TrainConfig(
        margin=args.margin,
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        pairs_per_mine=args.pairs_per_mine,
        negatives_per_pair=args.negatives_per_pair,
        remine_every=args.remine_every,
        iterations_per_epoch=args.iters_per_epoch,
        seed=args.seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    if metrics_path.exists():
        metrics_path.unlink()
    result = train(manifest, cfg, gmm, backbone,
                   metrics_path=metrics_path, log=print)
    write_gmm(out_dir / "gmm.fvg", result.gmm)
    _save_backbone(result.backbone, out_dir / "backbone.json")
    save_loss_curve(result.metrics, out_dir / "loss_curve.png")
    print(f"wrote model and metrics under {out_dir}")
    return 0


def cmd_encode(args) -> int:
    import numpy as np

    from .fv import LocalDescriptorSet, fv_encode
    from .io import load_training_manifest, read_gmm
    from .retrieval import baseline_pool
    from .training import BackboneModel, backbone_forward

    manifest = load_training_manifest(args.manifest)
    gmm = read_gmm(args.gmm)
    backbone = _load_backbone(args.backbone) if args.backbone else None
    ids, labels, tags, rows = [], [], [], []
    for item in list(manifest.items) + list(manifest.eval_items):
        if item.kind == "raw_patches":
            bb = backbone or BackboneModel.identity(item.data.shape[1])
            descriptors = backbone_forward(item.data, bb)
        else:
            descriptors = LocalDescriptorSet(item.data)
        if args.pool == "fv":
            vec = fv_encode(descriptors, gmm).normalized
        else:
            vec = baseline_pool(descriptors, args.pool)
        ids.append(item.item_id)
        labels.append(item.class_label)
        tags.append(manifest.dataset_tag)
        rows.append(vec)
    _write_vector_index(args.out, ids, labels, tags, np.stack(rows))
    print(f"encoded {len(ids)} items ({args.pool}) -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .training import full_gradient_check

    report = full_gradient_check(args.clusters, args.dim, args.count,
                                 seed=args.seed, h=args.step)
    print(f"{'family':<18} max_rel_error")
    for family in _FAMILY_ORDER:
        if family in report.per_family_errors:
            print(f"{family:<18} {report.per_family_errors[family]:.3e}")
    print(f"max relative error: {report.max_rel_error:.3e} "
          f"(worst parameter: {report.worst_parameter})")
    print(json.dumps(report.to_dict(), sort_keys=True))
    if args.out:
        from .io import save_json

        save_json(report.to_dict(), args.out)
    return 0 if report.max_rel_error <= args.tolerance else 1


def cmd_project(args) -> int:
    import numpy as np

    from .io import read_projection, write_projection
    from .projection import fit_lda_whiten, fit_pca_whiten, project

    ids, labels, tags, matrix = _load_vector_index(args.vectors)
    if args.fit:
        from .errors import SiamFvError

        if args.dim > matrix.shape[1]:
            raise SiamFvError(
                f"cannot reduce {matrix.shape[1]}-dim vectors to {args.dim}"
            )
        tag_set = {t for t in tags if t is not None}
        tag = tag_set.pop() if len(tag_set) == 1 else None
        if args.fit == "pca":
            model = fit_pca_whiten(matrix, args.dim, dataset_tag=tag)
        else:
            if any(lab is None for lab in labels):
                from .errors import SiamFvError

                raise SiamFvError("LDA requires class labels in the vector index")
            model = fit_lda_whiten(matrix, labels, args.dim, dataset_tag=tag)
        write_projection(args.out, model)
        print(f"fitted {args.fit} ({matrix.shape[1]} -> {args.dim}) -> {args.out}")
        return 0
    model = read_projection(args.apply)
    projected = np.stack([project(v, model) for v in matrix])
    _write_vector_index(args.out, ids, labels, tags, projected)
    print(f"projected {len(ids)} vectors to {model.output_dim}D -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .io import load_gallery
    from .report import write_eval_report
    from .retrieval import evaluate_gallery

    gallery = load_gallery(args.gallery)
    report = evaluate_gallery(gallery)
    paths = write_eval_report(report, args.out)
    print(f"mAP = {report['map']:.4f} over {report['num_queries']} queries "
          f"-> {paths['json']}")
    return 0


def cmd_synth(args) -> int:
    from .synth import generate, write_dataset

    dataset = generate(args.classes, args.items_per_class,
                       args.descriptors_per_item, args.dim, seed=args.seed)
    paths = write_dataset(dataset, args.out)
    print(f"wrote {len(dataset.train_items)} train / {len(dataset.eval_items)} "
          f"eval items -> {paths['manifest']}")
    return 0


_HANDLERS = {
    "init-gmm": cmd_init_gmm,
    "train": cmd_train,
    "encode": cmd_encode,
    "gradcheck": cmd_gradcheck,
    "project": cmd_project,
    "eval": cmd_eval,
    "synth": cmd_synth,
}


def dispatch(argv) -> int:
    args = _build_parser().parse_args(argv)
    _set_threads(args.threads)
    from .errors import SiamFvError

    try:
        return _HANDLERS[args.command](args)
    except (SiamFvError, OSError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1


def main(argv=None) -> int:
    code = dispatch(sys.argv[1:] if argv is None else argv)
    sys.exit(code)
