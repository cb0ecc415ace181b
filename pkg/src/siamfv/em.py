"""Unsupervised EM fitting of the diagonal GMM used to initialize the
aggregation layer.

Fitting always uses the standard weighted responsibilities (priors and
normalization constants included) regardless of the model's inference-time
posterior mode: initialization quality is all that matters here and the
trainer immediately takes over. Descriptor rows are put into a canonical
lexicographic order before seeding, so the fit is invariant to input order
for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import SiamFvError
from .fv import GmmModel

_COLLAPSE_FRACTION = 1e-10  # responsibility mass below this * T reseeds a cluster


@dataclass(frozen=True)
class EmConfig:
    """Fit settings.

    Attributes:
        num_clusters: Component count C.
        max_iters: Iteration cap.
        tol: Relative log-likelihood improvement below which the fit stops.
        seed: Seed for k-means++-style initialization.
        variance_floor: Lower bound applied to every stddev entry.
    """

    num_clusters: int
    max_iters: int = 100
    tol: float = 1e-6
    seed: int = 0
    variance_floor: float = 1e-3

    def __post_init__(self):
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if self.max_iters < 1 or self.tol <= 0.0:
            raise ValueError("max_iters must be >= 1 and tol > 0")


def _log_densities(data, weights, means, stddevs):
    """log(w_j) + log N(x_t; mu_j, diag sigma_j^2), shape (T, C)."""
    inv_var = 1.0 / stddevs**2
    # ||(x - mu)/sigma||^2 expanded so the T x C matrix comes from matmuls.
    quad = (
        data**2 @ inv_var.T
        - 2.0 * (data @ (means * inv_var).T)
        + np.sum(means**2 * inv_var, axis=1)[None, :]
    )
    log_norm = -0.5 * np.sum(np.log(2.0 * np.pi * stddevs**2), axis=1)
    return np.log(weights)[None, :] + log_norm[None, :] - 0.5 * quad


def log_likelihood(descriptors, gmm: GmmModel) -> float:
    """Total log-likelihood (nats) of descriptors under the mixture."""
    data = np.asarray(descriptors, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != gmm.dim:
        raise ValueError("descriptors must be (T, d) with d matching the model")
    lp = _log_densities(data, gmm.weights, gmm.means, gmm.stddevs)
    return float(np.sum(logsumexp(lp, axis=1)))


def _kmeanspp_centers(data, num_clusters, rng):
    """Seed centers: first uniform, then proportional to squared distance."""
    count = data.shape[0]
    centers = np.empty((num_clusters, data.shape[1]))
    centers[0] = data[rng.integers(count)]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for j in range(1, num_clusters):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = data[rng.integers(count)]
            continue
        centers[j] = data[rng.choice(count, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((data - centers[j]) ** 2, axis=1))
    return centers


def em_fit_trace(descriptors, cfg: EmConfig):
    """EM fit returning the model and the per-iteration log-likelihoods.

    Raises:
        SiamFvError: "insufficient data" when T < C.
    """
    data = np.array(np.asarray(descriptors, dtype=np.float64), order="C")
    if data.ndim != 2:
        raise ValueError("descriptors must be a (T, d) matrix")
    if not np.all(np.isfinite(data)):
        raise ValueError("descriptor entries must be finite")
    count = data.shape[0]
    if count < cfg.num_clusters:
        raise SiamFvError("insufficient data")

    # Canonical row order: makes the whole fit independent of input order.
    order = np.lexsort(data.T[::-1])
    data = data[order]

    rng = np.random.default_rng(cfg.seed)
    num_clusters = cfg.num_clusters
    means = _kmeanspp_centers(data, num_clusters, rng)
    global_std = np.maximum(data.std(axis=0), cfg.variance_floor)
    stddevs = np.tile(global_std, (num_clusters, 1))
    weights = np.full(num_clusters, 1.0 / num_clusters)

    trace = []
    prev_ll = -np.inf
    for _ in range(cfg.max_iters):
        lp = _log_densities(data, weights, means, stddevs)
        row_norm = logsumexp(lp, axis=1, keepdims=True)
        ll = float(row_norm.sum())
        trace.append(ll)
        resp = np.exp(lp - row_norm)

        mass = resp.sum(axis=0)
        collapsed = np.flatnonzero(mass < _COLLAPSE_FRACTION * count)
        if collapsed.size:
            # Reseed each dead cluster from the worst-covered point.
            for j in collapsed:
                gaps = np.min(
                    np.sum((data[:, None, :] - means[None, :, :]) ** 2, axis=2), axis=1
                )
                means[j] = data[int(np.argmax(gaps))]
                stddevs[j] = global_std
                mass[j] = 1.0
            weights = mass / mass.sum()
            prev_ll = -np.inf
            continue

        weights = mass / count
        means = (resp.T @ data) / mass[:, None]
        sq = (resp.T @ data**2) / mass[:, None] - means**2
        stddevs = np.maximum(np.sqrt(np.maximum(sq, 0.0)), cfg.variance_floor)

        if ll - prev_ll < cfg.tol * max(1.0, abs(prev_ll)) and np.isfinite(prev_ll):
            break
        prev_ll = ll

    model = GmmModel(weights=weights / weights.sum(), means=means, stddevs=stddevs)
    return model, np.asarray(trace)


def em_fit(descriptors, cfg: EmConfig) -> GmmModel:
    """EM fit of a diagonal GMM (see em_fit_trace for details)."""
    model, _ = em_fit_trace(descriptors, cfg)
    return model
