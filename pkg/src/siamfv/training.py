"""Siamese contrastive training of the aggregation layer.

Two parameter-sharing branches encode a pair of items; the contrastive loss
pulls matching pairs together and pushes non-matching pairs beyond a margin.
Gradients flow through the normalized encoder into the mixture parameters
and, via the descriptor Jacobian, into a small affine backbone applied
patch-wise below the aggregation layer. Hard negatives are re-mined
periodically from the current embedding.

Label convention: 1 means matching, 0 means non-matching (the squared-
distance term of the loss applies to matching pairs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SiamFvError
from .fv import (
    STD_FLOOR,
    FisherVector,
    GmmModel,
    LocalDescriptorSet,
    _fv_raw_arrays,
    fv_encode,
)
from .gradients import (
    FvGradients,
    GradCheckReport,
    _block_error,
    _noise_floor,
    central_differences,
    finite_diff_check,
    fv_grads,
    merge_reports,
    normalized_chain,
)
from .retrieval import leave_one_out_map

WEIGHT_CLAMP = 1e-6  # mixture weights are clamped here before renormalizing
_SIMPLEX_DRIFT = 1e-12


@dataclass(frozen=True)
class LabeledPair:
    """A training pair; label 1 = matching, 0 = non-matching."""

    left: str
    right: str
    label: int

    def __post_init__(self):
        if self.left == self.right:
            raise ValueError("pair must reference two distinct items")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


@dataclass(frozen=True)
class MiningTuple:
    """A query, its match, and the mined closest non-matching items."""

    query: str
    positive: str
    negatives: tuple

    def __post_init__(self):
        negatives = tuple(self.negatives)
        if len(set(negatives)) != len(negatives):
            raise ValueError("negatives must be pairwise distinct")
        object.__setattr__(self, "negatives", negatives)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the contrastive training loop."""

    margin: float = 0.8
    learning_rate: float = 0.001
    momentum: float = 0.5
    weight_decay: float = 0.0005
    epochs: int = 30
    pairs_per_mine: int = 2000
    negatives_per_pair: int = 5
    remine_every: int = 2000
    iterations_per_epoch: int = 6000
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0.0 or self.learning_rate < 0.0 or self.epochs < 1:
            raise ValueError("need margin > 0, learning_rate >= 0, epochs >= 1")
        if min(self.pairs_per_mine, self.negatives_per_pair, self.remine_every,
               self.iterations_per_epoch) < 1:
            raise ValueError("mining and iteration counts must be >= 1")


@dataclass(frozen=True)
class BackboneModel:
    """Affine map applied independently to each raw patch vector."""

    weight: np.ndarray  # (d_raw, d)
    bias: np.ndarray    # (d,)

    def __post_init__(self):
        weight = np.array(self.weight, dtype=np.float64)
        bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if weight.ndim != 2 or weight.shape[1] != bias.size:
            raise ValueError("backbone weight must be (d_raw, d) with a length-d bias")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise ValueError("backbone parameters must be finite")
        weight.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @classmethod
    def identity(cls, dim: int) -> "BackboneModel":
        return cls(weight=np.eye(dim), bias=np.zeros(dim))


@dataclass(frozen=True)
class SiameseModel:
    """The shared parameters of both branches."""

    gmm: GmmModel
    backbone: BackboneModel


@dataclass
class TrainResult:
    gmm: GmmModel
    backbone: BackboneModel
    metrics: list


@dataclass(frozen=True)
class LossGradients:
    """Gradients of one pair's loss for every shared parameter and input."""

    omega: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    x: np.ndarray | None
    x_prime: np.ndarray | None
    distance: float


def _unit(vec) -> np.ndarray:
    if isinstance(vec, FisherVector):
        return vec.normalized
    return np.asarray(vec, dtype=np.float64).reshape(-1)


def contrastive_loss(z, z_prime, label: int, margin: float) -> float:
    """Pair loss on normalized vectors.

    L = 1/2 * Y * D^2 + 1/2 * (1 - Y) * max(0, margin - D)^2 with D the
    Euclidean distance and Y = 1 for matching pairs. Symmetric in its two
    branches.
    """
    if margin <= 0.0:
        raise ValueError("margin must be positive")
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    a, b = _unit(z), _unit(z_prime)
    if a.size != b.size:
        raise ValueError("branch vectors must have equal length")
    dist = float(np.linalg.norm(a - b))
    return 0.5 * label * dist**2 + 0.5 * (1 - label) * max(0.0, margin - dist) ** 2


def loss_backward(z, z_prime, label: int, margin: float,
                  grads: FvGradients, grads_prime: FvGradients) -> LossGradients:
    """Back-propagate the pair loss into every parameter family.

    `grads` / `grads_prime` must be normalized-chain Jacobians for each
    branch. Both branches share the mixture parameters, so those gradients
    combine the two Jacobians; descriptor gradients stay per-branch. At the
    hinge kink (D == margin) the subgradient 0 is used, and at D == 0 the
    non-matching term's direction is undefined so its gradient is taken as 0.
    """
    a, b = _unit(z), _unit(z_prime)
    diff = a - b
    dist = float(np.linalg.norm(diff))
    if label == 1:
        coeff = 1.0
    else:
        gap = margin - dist
        coeff = -(gap / dist) if (gap > 0.0 and dist > 0.0) else 0.0
    g = coeff * diff

    def shared(jac, jac_p):
        flat = jac.reshape(-1, g.size) @ g - jac_p.reshape(-1, g.size) @ g
        return flat.reshape(jac.shape[:-2])

    def branch(jac, sign):
        if jac is None:
            return None
        return sign * (jac.reshape(-1, g.size) @ g).reshape(jac.shape[:-2])

    num_clusters = grads.d_omega.shape[0]
    return LossGradients(
        omega=shared(grads.d_omega, grads_prime.d_omega).reshape(num_clusters),
        mu=shared(grads.d_mu, grads_prime.d_mu),
        sigma=shared(grads.d_sigma, grads_prime.d_sigma),
        x=branch(grads.d_x, 1.0),
        x_prime=branch(grads_prime.d_x, -1.0),
        distance=dist,
    )


def backbone_forward(raw_patches, backbone: BackboneModel) -> LocalDescriptorSet:
    """Affine map per patch: descriptors = patches @ weight + bias."""
    raw = np.asarray(raw_patches, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != backbone.weight.shape[0]:
        raise ValueError("raw patch dimension does not match the backbone")
    return LocalDescriptorSet(raw @ backbone.weight + backbone.bias)


def backbone_backward(raw_patches, backbone: BackboneModel, upstream):
    """Exact transpose map of upstream descriptor gradients.

    Returns:
        (weight_grads, bias_grads) matching the backbone parameter shapes.
    """
    raw = np.asarray(raw_patches, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if raw.shape[0] != upstream.shape[0] or upstream.shape[1] != backbone.bias.size:
        raise ValueError("upstream gradient shape does not match")
    if raw.shape[1] != backbone.weight.shape[0]:
        raise ValueError("raw patch dimension does not match the backbone")
    return raw.T @ upstream, upstream.sum(axis=0)


def sgd_step(params: dict, grads: dict, velocity: dict, cfg: TrainConfig):
    """One momentum-SGD update with weight decay.

    v <- momentum * v - lr * (g + weight_decay * p); p <- p + v. Afterwards
    the "weights" entry (if present) is clamped to >= WEIGHT_CLAMP and
    renormalized onto the simplex, and "stddevs" is floored at STD_FLOOR;
    both projections are skipped when already satisfied so a zero update
    leaves parameters bitwise unchanged. Non-finite gradients skip the whole
    update and return the inputs untouched.
    """
    for g in grads.values():
        if g is not None and not np.all(np.isfinite(g)):
            return params, velocity
    new_params, new_velocity = {}, {}
    for key, p in params.items():
        g = grads.get(key)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        v = velocity[key]
        v = cfg.momentum * v - cfg.learning_rate * (g + cfg.weight_decay * p)
        p = p + v
        new_velocity[key] = v
        new_params[key] = p
    if "weights" in new_params:
        w = new_params["weights"]
        if np.any(w < WEIGHT_CLAMP) or abs(float(w.sum()) - 1.0) > _SIMPLEX_DRIFT:
            w = np.maximum(w, WEIGHT_CLAMP)
            new_params["weights"] = w / w.sum()
    if "stddevs" in new_params:
        s = new_params["stddevs"]
        if np.any(s < STD_FLOOR):
            new_params["stddevs"] = np.maximum(s, STD_FLOOR)
    return new_params, new_velocity


# ---------------------------------------------------------------------------
# Mining and the training loop
# ---------------------------------------------------------------------------


def _encode_item(item, model: SiameseModel) -> FisherVector:
    if item.kind == "raw_patches":
        descriptors = backbone_forward(item.data, model.backbone)
    else:
        descriptors = LocalDescriptorSet(item.data)
    return fv_encode(descriptors, model.gmm)


def _matching_pairs(items):
    by_class = {}
    for idx, item in enumerate(items):
        by_class.setdefault(item.class_label, []).append(idx)
    pairs = []
    for cls in sorted(by_class):
        members = sorted(by_class[cls], key=lambda i: items[i].item_id)
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                pairs.append((members[a], members[b]))
    return pairs


def mine_tuples(train_items, current_model: SiameseModel, cfg: TrainConfig, rng) -> list:
    """Sample matching pairs and mine the closest non-matching items.

    For each of cfg.pairs_per_mine uniformly sampled matching pairs, the
    cfg.negatives_per_pair non-matching items closest to the query (current
    embedding, Euclidean distance, ties by item id) form the tuple.

    Raises:
        SiamFvError: "corpus too small" when any query class has fewer than
            cfg.negatives_per_pair non-matching items.
    """
    items = list(train_items)
    vectors = np.stack([_encode_item(it, current_model).normalized for it in items])
    labels = [it.class_label for it in items]
    ids = [it.item_id for it in items]
    counts = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    for lab, num in counts.items():
        # only classes that can appear as queries need enough negatives
        if num >= 2 and len(items) - num < cfg.negatives_per_pair:
            raise SiamFvError("corpus too small")

    pairs = _matching_pairs(items)
    if not pairs:
        raise SiamFvError("corpus has no matching pairs")
    replace = len(pairs) < cfg.pairs_per_mine
    chosen = rng.choice(len(pairs), size=cfg.pairs_per_mine, replace=replace)

    tuples = []
    for pair_idx in chosen:
        qi, pi = pairs[pair_idx]
        dists = np.linalg.norm(vectors - vectors[qi][None, :], axis=1)
        candidates = [i for i in range(len(items)) if labels[i] != labels[qi]]
        candidates.sort(key=lambda i: (dists[i], ids[i]))
        negatives = tuple(ids[i] for i in candidates[: cfg.negatives_per_pair])
        tuples.append(MiningTuple(query=ids[qi], positive=ids[pi], negatives=negatives))
    return tuples


def expand_tuples(tuples) -> list:
    """Flatten mined tuples into labeled pairs (1 matching + N non-matching each)."""
    pairs = []
    for tup in tuples:
        pairs.append(LabeledPair(tup.query, tup.positive, 1))
        for neg in tup.negatives:
            pairs.append(LabeledPair(tup.query, neg, 0))
    return pairs


def _pair_gradients(item_a, item_b, model: SiameseModel, label, margin):
    """Loss, parameter gradients and backbone gradients for one pair."""
    raw_a = item_a.data if item_a.kind == "raw_patches" else None
    raw_b = item_b.data if item_b.kind == "raw_patches" else None
    xa = backbone_forward(raw_a, model.backbone) if raw_a is not None else LocalDescriptorSet(item_a.data)
    xb = backbone_forward(raw_b, model.backbone) if raw_b is not None else LocalDescriptorSet(item_b.data)
    za = fv_encode(xa, model.gmm)
    zb = fv_encode(xb, model.gmm)
    loss = contrastive_loss(za, zb, label, margin)

    dist = float(np.linalg.norm(za.normalized - zb.normalized))
    active = (label == 1 and dist > 0.0) or (label == 0 and 0.0 < dist < margin)
    shapes = {
        "weights": model.gmm.weights.shape,
        "means": model.gmm.means.shape,
        "stddevs": model.gmm.stddevs.shape,
        "backbone_weight": model.backbone.weight.shape,
        "backbone_bias": model.backbone.bias.shape,
    }
    if not active:
        return loss, {key: np.zeros(shape) for key, shape in shapes.items()}

    ga = normalized_chain(za.raw, fv_grads(xa, model.gmm))
    gb = normalized_chain(zb.raw, fv_grads(xb, model.gmm))
    lb = loss_backward(za, zb, label, margin, ga, gb)
    grads = {
        "weights": lb.omega,
        "means": lb.mu,
        "stddevs": lb.sigma,
        "backbone_weight": np.zeros(shapes["backbone_weight"]),
        "backbone_bias": np.zeros(shapes["backbone_bias"]),
    }
    if raw_a is not None:
        dw, db = backbone_backward(raw_a, model.backbone, lb.x)
        grads["backbone_weight"] += dw
        grads["backbone_bias"] += db
    if raw_b is not None:
        dw, db = backbone_backward(raw_b, model.backbone, lb.x_prime)
        grads["backbone_weight"] += dw
        grads["backbone_bias"] += db
    return loss, grads


def _eval_map(eval_items, model: SiameseModel) -> float:
    vectors = np.stack([_encode_item(it, model).normalized for it in eval_items])
    return leave_one_out_map(
        [it.item_id for it in eval_items],
        [it.class_label for it in eval_items],
        vectors,
    )


def train(manifest, cfg: TrainConfig, gmm: GmmModel,
          backbone: BackboneModel | None = None,
          metrics_path=None, log=None) -> TrainResult:
    """Run the full contrastive training loop.

    Each epoch consists of cfg.iterations_per_epoch single-pair iterations;
    tuples are re-mined every cfg.remine_every iterations from the current
    embedding and consumed in a shuffled order. Per-epoch records
    {"epoch", "mean_loss", "map_eval"?} are returned (and appended to
    metrics_path as JSON lines when given); a leading epoch-0 record carries
    the pre-training mAP when the manifest has an eval split.

    Args:
        manifest: Loaded TrainingManifest.
        cfg: Hyperparameters; cfg.seed fixes mining, pair order, everything.
        gmm: Initial mixture (normally an EM fit).
        backbone: Initial affine backbone; identity when omitted.
        metrics_path: Optional JSONL path for the metrics log.
        log: Optional callable for one-line progress messages.
    """
    from .io import append_jsonl

    items = list(manifest.items)
    if not items:
        raise SiamFvError("manifest lists no items")
    by_id = {it.item_id: it for it in items}
    raw_dims = {it.data.shape[1] for it in items if it.kind == "raw_patches"}
    if backbone is None:
        backbone = BackboneModel.identity(gmm.dim)
    if raw_dims and raw_dims != {backbone.weight.shape[0]}:
        raise SiamFvError("raw patch dimension does not match the backbone")
    desc_dims = {it.data.shape[1] for it in items if it.kind == "descriptors"}
    if desc_dims and desc_dims != {gmm.dim}:
        raise SiamFvError("descriptor dimension does not match the model")
    if backbone.bias.size != gmm.dim:
        raise SiamFvError("backbone output dimension does not match the model")

    rng = np.random.default_rng(cfg.seed)
    params = {
        "weights": gmm.weights.copy(),
        "means": gmm.means.copy(),
        "stddevs": gmm.stddevs.copy(),
        "backbone_weight": backbone.weight.copy(),
        "backbone_bias": backbone.bias.copy(),
    }
    velocity = {key: np.zeros_like(val) for key, val in params.items()}

    def current() -> SiameseModel:
        return SiameseModel(
            gmm=GmmModel(params["weights"], params["means"], params["stddevs"],
                         posterior_mode=gmm.posterior_mode),
            backbone=BackboneModel(params["backbone_weight"], params["backbone_bias"]),
        )

    metrics = []

    def record(entry):
        metrics.append(entry)
        if metrics_path is not None:
            append_jsonl(entry, metrics_path)
        if log is not None:
            loss = entry["mean_loss"]
            line = f"epoch {entry['epoch']}: loss={'-' if loss is None else format(loss, '.6f')}"
            if "map_eval" in entry:
                line += f" map={entry['map_eval']:.4f}"
            log(line)

    if manifest.eval_items:
        record({"epoch": 0, "mean_loss": None, "map_eval": _eval_map(manifest.eval_items, current())})

    pair_order: list = []
    ptr = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        skipped = 0
        for it in range(cfg.iterations_per_epoch):
            if ((epoch - 1) * cfg.iterations_per_epoch + it) % cfg.remine_every == 0:
                model = current()
                tuples = mine_tuples(items, model, cfg, rng)
                pairs = expand_tuples(tuples)
                pair_order = [pairs[i] for i in rng.permutation(len(pairs))]
                ptr = 0
            pair = pair_order[ptr % len(pair_order)]
            ptr += 1
            model = current()
            loss, grads = _pair_gradients(
                by_id[pair.left], by_id[pair.right], model, pair.label, cfg.margin
            )
            if not math.isfinite(loss) or any(
                not np.all(np.isfinite(g)) for g in grads.values()
            ):
                skipped += 1
                continue
            losses.append(loss)
            params, velocity = sgd_step(params, grads, velocity, cfg)
        entry = {"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else None}
        if skipped and log is not None:
            log(f"epoch {epoch}: skipped {skipped} non-finite iterations")
        if manifest.eval_items:
            entry["map_eval"] = _eval_map(manifest.eval_items, current())
        record(entry)

    final = current()
    return TrainResult(gmm=final.gmm, backbone=final.backbone, metrics=metrics)


# ---------------------------------------------------------------------------
# End-to-end gradient certification (loss and backbone families)
# ---------------------------------------------------------------------------


def random_check_instance(num_clusters: int, dim: int, count: int, seed: int):
    """A well-conditioned random instance for finite-difference runs.

    Component means stay within a fraction of the descriptor spread so soft
    assignments never saturate; that keeps every Jacobian block comfortably
    above finite-difference noise.
    """
    rng = np.random.default_rng(seed)
    means = 0.25 * rng.standard_normal((num_clusters, dim))
    stddevs = rng.uniform(0.9, 1.1, size=(num_clusters, dim))
    weights = rng.dirichlet(np.full(num_clusters, 5.0))
    weights = (weights + 0.02) / (1.0 + 0.02 * num_clusters)
    gmm = GmmModel(weights=weights, means=means, stddevs=stddevs)
    backbone = BackboneModel(
        weight=np.eye(dim) + 0.05 * rng.standard_normal((dim, dim)),
        bias=0.02 * rng.standard_normal(dim),
    )
    patches_a = 0.9 * rng.standard_normal((count, dim))
    patches_b = 0.9 * rng.standard_normal((count, dim))
    return gmm, backbone, patches_a, patches_b


def _loss_values(weights, means, stddevs, xa, xb, margin, mode):
    ra = _fv_raw_arrays(xa, weights, means, stddevs, mode)
    rb = _fv_raw_arrays(xb, weights, means, stddevs, mode)
    diff = ra / np.linalg.norm(ra) - rb / np.linalg.norm(rb)
    dist = np.linalg.norm(diff)
    return np.array([0.5 * dist**2, 0.5 * max(0.0, margin - dist) ** 2])


def loss_finite_diff_check(gmm: GmmModel, backbone: BackboneModel,
                           patches_a, patches_b, h: float = 1e-6) -> GradCheckReport:
    """Certify the end-to-end loss gradients against central differences.

    Families "loss" (mixture parameters and both branches' descriptors) and
    "backbone" (affine weights and bias) are each checked in two scenarios:
    a matching pair and a non-matching pair whose margin is set to 1.4x the
    observed distance, keeping the hinge active and away from its kink.
    """
    mode = gmm.posterior_mode
    weights, means, stddevs = gmm.weights, gmm.means, gmm.stddevs
    num_clusters, dim = gmm.num_clusters, gmm.dim
    xa = backbone_forward(patches_a, backbone)
    xb = backbone_forward(patches_b, backbone)
    za = fv_encode(xa, gmm)
    zb = fv_encode(xb, gmm)
    dist = float(np.linalg.norm(za.normalized - zb.normalized))
    # With C*d == 1 the normalized output is a locally constant sign and the
    # pair distance can be exactly 0; the floor keeps the hinge well-defined
    # (all gradients are identically zero there, on both sides of the check).
    margin = max(1.4 * dist, 0.5)

    ga = normalized_chain(za.raw, fv_grads(xa, gmm))
    gb = normalized_chain(zb.raw, fv_grads(xb, gmm))
    analytic_loss, analytic_backbone = [], []
    for label in (1, 0):
        lb = loss_backward(za, zb, label, margin, ga, gb)
        analytic_loss.append(
            np.concatenate([lb.omega.ravel(), lb.mu.ravel(), lb.sigma.ravel(),
                            lb.x.ravel(), lb.x_prime.ravel()])
        )
        dw_a, db_a = backbone_backward(patches_a, backbone, lb.x)
        dw_b, db_b = backbone_backward(patches_b, backbone, lb.x_prime)
        analytic_backbone.append(
            np.concatenate([(dw_a + dw_b).ravel(), (db_a + db_b).ravel()])
        )

    xa_data, xb_data = xa.data, xb.data

    blocks = {
        "omega": (weights, lambda th: _loss_values(th, means, stddevs, xa_data, xb_data, margin, mode)),
        "mu": (means, lambda th: _loss_values(weights, th.reshape(num_clusters, dim), stddevs, xa_data, xb_data, margin, mode)),
        "sigma": (stddevs, lambda th: _loss_values(weights, means, th.reshape(num_clusters, dim), xa_data, xb_data, margin, mode)),
        "x": (xa_data, lambda th: _loss_values(weights, means, stddevs, th.reshape(xa_data.shape), xb_data, margin, mode)),
        "x_prime": (xb_data, lambda th: _loss_values(weights, means, stddevs, xa_data, th.reshape(xb_data.shape), margin, mode)),
    }
    numeric_cols = {}
    for name, (theta, func) in blocks.items():
        numeric_cols[name] = central_differences(func, theta, h)  # (P, 2)
    numeric_loss = [
        np.concatenate([numeric_cols[n][:, i] for n in blocks]) for i in (0, 1)
    ]

    def backbone_values(weight_flat, bias):
        weight = weight_flat.reshape(backbone.weight.shape)
        da = np.asarray(patches_a) @ weight + bias
        db_ = np.asarray(patches_b) @ weight + bias
        return _loss_values(weights, means, stddevs, da, db_, margin, mode)

    num_w = central_differences(lambda th: backbone_values(th, backbone.bias),
                                backbone.weight, h)
    num_b = central_differences(lambda th: backbone_values(backbone.weight.ravel(), th),
                                backbone.bias, h)
    numeric_backbone = [np.concatenate([num_w[:, i], num_b[:, i]]) for i in (0, 1)]

    noise = _noise_floor(h)
    loss_err = max(
        _block_error(analytic_loss[i], numeric_loss[i], noise) for i in (0, 1)
    )
    backbone_err = max(
        _block_error(analytic_backbone[i], numeric_backbone[i], noise) for i in (0, 1)
    )

    def labels(prefix, shapes):
        out = []
        for name, shape in shapes:
            out += [
                f"{prefix}:{name}[" + ",".join(map(str, idx)) + "]"
                for idx in np.ndindex(*shape)
            ]
        return out

    loss_labels = labels("loss", [
        ("omega", weights.shape), ("mu", means.shape), ("sigma", stddevs.shape),
        ("x", xa_data.shape), ("x_prime", xb_data.shape),
    ])
    backbone_labels = labels("backbone", [
        ("weight", backbone.weight.shape), ("bias", backbone.bias.shape),
    ])
    worst, worst_gap = "", -1.0
    for lab_list, ana, num in (
        (loss_labels, analytic_loss, numeric_loss),
        (backbone_labels, analytic_backbone, numeric_backbone),
    ):
        for i in (0, 1):
            gaps = np.abs(ana[i] - num[i])
            j = int(np.argmax(gaps))
            if gaps[j] > worst_gap:
                worst, worst_gap = lab_list[j], float(gaps[j])
    return GradCheckReport(
        max_rel_error=max(loss_err, backbone_err),
        worst_parameter=worst,
        per_family_errors={"loss": loss_err, "backbone": backbone_err},
    )


def full_gradient_check(num_clusters: int, dim: int, count: int, seed: int,
                        h: float = 1e-6) -> GradCheckReport:
    """Run every certification family on one random instance.

    Covers the raw Jacobians (omega, mu, sigma, x), the normalized chain,
    the end-to-end loss, and the backbone weights.
    """
    gmm, backbone, patches_a, patches_b = random_check_instance(
        num_clusters, dim, count, seed
    )
    encode_report = finite_diff_check(backbone_forward(patches_a, backbone), gmm, h=h)
    loss_report = loss_finite_diff_check(gmm, backbone, patches_a, patches_b, h=h)
    return merge_reports(encode_report, loss_report)
