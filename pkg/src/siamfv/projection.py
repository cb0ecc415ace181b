"""Dimensionality reduction with whitening: unsupervised (PCA) and
supervised (LDA).

Covariances use the population convention (divide by N). Basis vectors carry
a deterministic sign (largest-magnitude component positive) so fitted models
are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import SiamFvError
from .fv import FisherVector

EIG_EPS = 1e-10  # regularizer added to eigenvalues before inverse square root


@dataclass(frozen=True)
class ProjectionModel:
    """Linear reduction D -> m: center, project onto basis, scale.

    Attributes:
        method: "pca" or "lda".
        mean: Length-D centering vector.
        basis: (D, m) matrix; columns orthonormal for PCA.
        whitening_scales: Length-m positive scales (inverse square roots of
            eigenvalues for PCA, of within-class variances for LDA).
        fit_dataset_tag: Bookkeeping tag of the dataset the model was fitted
            on; not serialized. Lets harnesses assert that projection
            training never saw the evaluation gallery.
    """

    method: str
    mean: np.ndarray
    basis: np.ndarray
    whitening_scales: np.ndarray
    fit_dataset_tag: str | None = None

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        basis = np.array(self.basis, dtype=np.float64)
        scales = np.array(self.whitening_scales, dtype=np.float64).reshape(-1)
        if basis.ndim != 2 or basis.shape[0] != mean.size or basis.shape[1] != scales.size:
            raise ValueError("inconsistent projection shapes")
        if basis.shape[1] > basis.shape[0]:
            raise ValueError("reduced dimension exceeds input dimension")
        if np.any(scales <= 0.0):
            raise ValueError("whitening scales must be strictly positive")
        for arr in (mean, basis, scales):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "whitening_scales", scales)

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[1]


def _fix_signs(basis):
    """Flip columns so each one's largest-magnitude component is positive."""
    flip = basis[np.abs(basis).argmax(axis=0), np.arange(basis.shape[1])] < 0.0
    basis[:, flip] *= -1.0
    return basis


def fit_pca_whiten(fvs, reduced_dim: int, dataset_tag: str | None = None) -> ProjectionModel:
    """Fit a whitened PCA model on an (N, D) matrix of vectors.

    The basis spans the top reduced_dim principal directions and the scales
    are 1/sqrt(eigenvalue + EIG_EPS), so projected-and-scaled training data
    has identity covariance.

    Raises:
        SiamFvError: "insufficient rank" when the data cannot support
            reduced_dim directions; also when N <= reduced_dim.
    """
    fvs = np.asarray(fvs, dtype=np.float64)
    if fvs.ndim != 2:
        raise ValueError("expected an (N, D) matrix")
    n, full_dim = fvs.shape
    if not (0 < reduced_dim <= full_dim):
        raise ValueError("reduced dimension must lie in [1, D]")
    if n <= reduced_dim:
        raise SiamFvError("insufficient rank")
    mean = fvs.mean(axis=0)
    centered = fvs - mean
    # Economy SVD instead of forming the D x D covariance: same eigenpairs.
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    eigvals = svals**2 / n
    if eigvals[0] <= 0.0 or eigvals[reduced_dim - 1] <= eigvals[0] * 1e-12:
        raise SiamFvError("insufficient rank")
    basis = _fix_signs(vt[:reduced_dim].T.copy())
    scales = 1.0 / np.sqrt(eigvals[:reduced_dim] + EIG_EPS)
    return ProjectionModel(
        method="pca",
        mean=mean,
        basis=basis,
        whitening_scales=scales,
        fit_dataset_tag=dataset_tag,
    )


def fit_lda_whiten(fvs, class_labels, reduced_dim: int, dataset_tag: str | None = None) -> ProjectionModel:
    """Fit a whitened Fisher-discriminant model.

    Maximizes between-class over within-class scatter via the generalized
    eigenproblem; whitening scales come from the within-class covariance
    along each (unit-normalized) discriminant direction.

    Raises:
        SiamFvError: "LDA rank bound exceeded" when reduced_dim > classes - 1.
    """
    fvs = np.asarray(fvs, dtype=np.float64)
    labels = np.asarray(class_labels)
    if fvs.ndim != 2 or labels.shape[0] != fvs.shape[0]:
        raise ValueError("expected (N, D) vectors with one label per row")
    n, full_dim = fvs.shape
    classes = np.unique(labels)
    if reduced_dim > classes.size - 1:
        raise SiamFvError("LDA rank bound exceeded")
    if not (0 < reduced_dim <= full_dim):
        raise ValueError("reduced dimension must lie in [1, D]")
    mean = fvs.mean(axis=0)
    within = np.zeros((full_dim, full_dim))
    between = np.zeros((full_dim, full_dim))
    for cls in classes:
        rows = fvs[labels == cls]
        cls_mean = rows.mean(axis=0)
        centered = rows - cls_mean
        within += centered.T @ centered
        offset = cls_mean - mean
        between += rows.shape[0] * np.outer(offset, offset)
    within /= n
    between /= n
    reg = EIG_EPS * max(np.trace(within) / full_dim, 1.0)
    eigvals, eigvecs = scipy.linalg.eigh(between, within + reg * np.eye(full_dim))
    order = np.argsort(eigvals)[::-1][:reduced_dim]
    basis = eigvecs[:, order]
    basis = basis / np.linalg.norm(basis, axis=0, keepdims=True)
    basis = _fix_signs(basis)
    scales = 1.0 / np.sqrt(np.einsum("dm,de,em->m", basis, within, basis) + EIG_EPS)
    return ProjectionModel(
        method="lda",
        mean=mean,
        basis=basis,
        whitening_scales=scales,
        fit_dataset_tag=dataset_tag,
    )


def whiten_transform(vectors, model: ProjectionModel) -> np.ndarray:
    """Center, project and scale without the final re-normalization."""
    vectors = np.asarray(vectors, dtype=np.float64)
    single = vectors.ndim == 1
    mat = vectors[None, :] if single else vectors
    if mat.shape[1] != model.input_dim:
        raise ValueError(
            f"vector dim {mat.shape[1]} does not match model dim {model.input_dim}"
        )
    out = (mat - model.mean) @ model.basis * model.whitening_scales
    return out[0] if single else out


def project(vector, model: ProjectionModel) -> np.ndarray:
    """Reduce one vector and re-normalize it to unit L2 length.

    Accepts a FisherVector (its normalized form is projected) or a plain
    length-D array.

    Raises:
        SiamFvError: "degenerate projection" when the projected vector is zero.
    """
    if isinstance(vector, FisherVector):
        vector = vector.normalized
    out = whiten_transform(np.asarray(vector, dtype=np.float64).reshape(-1), model)
    norm = np.linalg.norm(out)
    if norm <= 0.0:
        raise SiamFvError("degenerate projection")
    return out / norm


def truncated(model: ProjectionModel, reduced_dim: int) -> ProjectionModel:
    """Restrict a fitted model to its leading reduced_dim directions."""
    if not (0 < reduced_dim <= model.output_dim):
        raise ValueError("cannot truncate beyond the fitted dimension")
    return ProjectionModel(
        method=model.method,
        mean=model.mean,
        basis=model.basis[:, :reduced_dim],
        whitening_scales=model.whitening_scales[:reduced_dim],
        fit_dataset_tag=model.fit_dataset_tag,
    )
