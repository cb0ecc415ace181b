"""Fisher-vector aggregation layer: data model and forward pass.

A diagonal-covariance GMM acts as a probabilistic vocabulary over local
descriptors. Encoding a descriptor set proceeds in three steps: soft-assign
every descriptor to the mixture components, aggregate the per-component
scaled residuals (cluster-major layout), and L2-normalize the concatenated
vector. All arithmetic is float64; descriptors serialized on disk are
float32 and widened on load.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import SiamFvError

# Lower bound enforced on every stddev entry, at construction and after
# every parameter update.
STD_FLOOR = 1e-3
# Mixture weights must sum to one within this tolerance.
SIMPLEX_TOL = 1e-12
# Raw Fisher vectors with an L2 norm at or below this are degenerate.
DEGENERATE_NORM = 1e-30

# "plain": softmax over the pure Mahalanobis exponents, no priors and no
# per-component normalization constants. "weighted": standard GMM
# responsibilities including priors and normalizers.
POSTERIOR_MODES = ("plain", "weighted")


@dataclass(frozen=True)
class GmmModel:
    """Diagonal-covariance Gaussian mixture.

    Attributes:
        weights: Mixture priors, shape (C,), strictly positive, sum to 1
            within SIMPLEX_TOL.
        means: Component means, shape (C, d).
        stddevs: Component standard deviations, shape (C, d), every entry
            >= STD_FLOOR.
        posterior_mode: One of POSTERIOR_MODES; controls how descriptors are
            soft-assigned (see module docstring). Default "plain".
    """

    weights: np.ndarray
    means: np.ndarray
    stddevs: np.ndarray
    posterior_mode: str = "plain"

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64)
        means = np.array(self.means, dtype=np.float64)
        stddevs = np.array(self.stddevs, dtype=np.float64)
        if self.posterior_mode not in POSTERIOR_MODES:
            raise ValueError(f"unknown posterior mode {self.posterior_mode!r}")
        if weights.ndim != 1 or weights.size < 1:
            raise ValueError("weights must be a length-C vector with C >= 1")
        if means.ndim != 2 or means.shape[0] != weights.size or means.shape[1] < 1:
            raise ValueError("means must have shape (C, d) with d >= 1")
        if stddevs.shape != means.shape:
            raise ValueError("stddevs must match the shape of means")
        for arr in (weights, means, stddevs):
            if not np.all(np.isfinite(arr)):
                raise ValueError("GMM parameters must be finite")
        if np.any(weights <= 0.0) or abs(float(weights.sum()) - 1.0) > SIMPLEX_TOL:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(stddevs < STD_FLOOR):
            raise ValueError(f"stddev entries must be >= {STD_FLOOR}")
        for arr in (weights, means, stddevs):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stddevs", stddevs)

    @property
    def num_clusters(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class LocalDescriptorSet:
    """The T local descriptors (rows) of one item, shape (T, d)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("descriptor data must be a (T, d) matrix")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise SiamFvError("empty input")
        if not np.all(np.isfinite(data)):
            raise ValueError("descriptor entries must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FisherVector:
    """A length C*d global descriptor with its unnormalized precursor.

    normalized == raw / norm elementwise, and norm is the Euclidean norm of
    raw; `normalized` therefore has unit L2 norm.
    """

    raw: np.ndarray
    normalized: np.ndarray
    norm: float

    def __post_init__(self):
        raw = np.array(self.raw, dtype=np.float64)
        normalized = np.array(self.normalized, dtype=np.float64)
        raw.setflags(write=False)
        normalized.setflags(write=False)
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "normalized", normalized)
        object.__setattr__(self, "norm", float(self.norm))


@dataclass(frozen=True)
class AssignmentMatrix:
    """Soft-assignment probabilities, shape (T, C); rows sum to 1."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("assignment matrix must be (T, C)")
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ValueError("assignment entries must lie in [0, 1]")
        if np.any(np.abs(values.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise ValueError("assignment rows must sum to 1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def as_descriptor_set(descriptors) -> LocalDescriptorSet:
    """Coerce an (T, d) array to LocalDescriptorSet; passes instances through."""
    if isinstance(descriptors, LocalDescriptorSet):
        return descriptors
    return LocalDescriptorSet(np.asarray(descriptors, dtype=np.float64))


def _log_assignments(data, weights, means, stddevs, mode):
    """Log soft-assignments and scaled residuals for raw parameter arrays.

    Computed in the log domain; the max is subtracted inside logsumexp so far
    descriptors cannot underflow the row normalization.

    Returns:
        (log_tau, z): log_tau has shape (T, C); z = (x - mu) / sigma has
        shape (T, C, d).
    """
    z = (data[:, None, :] - means[None, :, :]) / stddevs[None, :, :]
    q = -0.5 * np.einsum("tjk,tjk->tj", z, z)
    if mode == "weighted":
        log_norm = np.log(weights) - 0.5 * np.sum(np.log(2.0 * np.pi * stddevs**2), axis=1)
        q = q + log_norm[None, :]
    return q - logsumexp(q, axis=1, keepdims=True), z


def _fv_raw_arrays(data, weights, means, stddevs, mode):
    """Unnormalized Fisher vector from raw parameter arrays (no validation).

    zeta[j, k] = 1 / (T * sqrt(w_j)) * sum_t tau_tj * (x_tk - mu_jk) / sigma_jk,
    flattened cluster-major. This is the shared kernel behind the public ops
    and the finite-difference harness (which perturbs parameters off the
    simplex and must bypass model validation).
    """
    log_tau, z = _log_assignments(data, weights, means, stddevs, mode)
    tau = np.exp(log_tau)
    scale = 1.0 / (data.shape[0] * np.sqrt(weights))
    zeta = scale[:, None] * np.einsum("tj,tjk->jk", tau, z)
    return zeta.reshape(-1)


def _check_dims(descriptors: LocalDescriptorSet, gmm: GmmModel):
    if descriptors.dim != gmm.dim:
        raise ValueError(
            f"descriptor dim {descriptors.dim} does not match model dim {gmm.dim}"
        )


def posterior(x, gmm: GmmModel) -> np.ndarray:
    """Soft-assignment row for a single descriptor.

    Args:
        x: Descriptor of length gmm.dim.
        gmm: Mixture model.

    Returns:
        Length-C probability vector summing to 1.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != gmm.dim:
        raise ValueError(f"descriptor dim {x.size} does not match model dim {gmm.dim}")
    log_tau, _ = _log_assignments(
        x[None, :], gmm.weights, gmm.means, gmm.stddevs, gmm.posterior_mode
    )
    return np.exp(log_tau[0])


def assignments(descriptors, gmm: GmmModel) -> AssignmentMatrix:
    """Soft-assignment matrix for a whole descriptor set."""
    descriptors = as_descriptor_set(descriptors)
    _check_dims(descriptors, gmm)
    log_tau, _ = _log_assignments(
        descriptors.data, gmm.weights, gmm.means, gmm.stddevs, gmm.posterior_mode
    )
    return AssignmentMatrix(np.exp(log_tau))


def fv_unnormalized(descriptors, gmm: GmmModel) -> np.ndarray:
    """Raw Fisher vector: per-cluster aggregated scaled residuals.

    Args:
        descriptors: (T, d) array or LocalDescriptorSet.
        gmm: Mixture model with matching dim.

    Returns:
        Length C*d vector, cluster-major (cluster outer, dimension inner).
    """
    descriptors = as_descriptor_set(descriptors)
    _check_dims(descriptors, gmm)
    return _fv_raw_arrays(
        descriptors.data, gmm.weights, gmm.means, gmm.stddevs, gmm.posterior_mode
    )


def fv_normalize(raw) -> FisherVector:
    """L2-normalize a raw Fisher vector.

    Raises:
        SiamFvError: if the raw vector is degenerate (norm <= DEGENERATE_NORM).
    """
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(raw))
    if norm <= DEGENERATE_NORM:
        raise SiamFvError("degenerate Fisher vector")
    return FisherVector(raw=raw, normalized=raw / norm, norm=norm)


def fv_encode(descriptors, gmm: GmmModel) -> FisherVector:
    """Full forward pass: aggregate then normalize. Deterministic."""
    return fv_normalize(fv_unnormalized(descriptors, gmm))


def floor_parameters(weights, means, stddevs, weight_floor: float = 1e-6):
    """Project parameters back to the valid set after an update.

    Weights are clamped to >= weight_floor and renormalized onto the simplex;
    stddevs are floored at STD_FLOOR. Means pass through.
    """
    w = np.maximum(np.asarray(weights, dtype=np.float64), weight_floor)
    w = w / w.sum()
    s = np.maximum(np.asarray(stddevs, dtype=np.float64), STD_FLOOR)
    return w, np.asarray(means, dtype=np.float64), s
