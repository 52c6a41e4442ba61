"""PCA on penultimate features via cyclic Jacobi eigendecomposition.

The covariance is a small symmetric matrix (64x64), where cyclic Jacobi is
simple, deterministic, and accurate: sweep all upper-triangle pairs, rotate
away each off-diagonal element, repeat until the off-diagonal mass is
negligible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import UsageError


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) sorted by non-increasing eigenvalue;
    eigenvectors are the columns. Signs are fixed so each vector's largest
    absolute component is positive.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise UsageError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    if not np.allclose(a, a.T, atol=1e-10):
        raise UsageError("jacobi_eigh needs a symmetric matrix")
    m = a.copy()
    v = np.eye(n)
    scale = max(float(np.abs(m).max()), 1.0)
    for _ in range(max_sweeps):
        off = np.sqrt(max((m ** 2).sum() - (np.diag(m) ** 2).sum(), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if abs(apq) <= 1e-30 * scale:
                    continue
                theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * m[:, p] - s * m[:, q]
                rot_q = s * m[:, p] + c * m[:, q]
                m[:, p], m[:, q] = rot_p, rot_q
                rot_p = c * m[p, :] - s * m[q, :]
                rot_q = s * m[p, :] + c * m[q, :]
                m[p, :], m[q, :] = rot_p, rot_q
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    evals = np.diag(m).copy()
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    vecs = v[:, order]
    for j in range(n):
        k = int(np.abs(vecs[:, j]).argmax())
        if vecs[k, j] < 0.0:
            vecs[:, j] = -vecs[:, j]
    return evals, vecs


@dataclass(frozen=True)
class PcaProjection:
    """Mean and top-2 principal axes of a feature cloud, plus eigenvalues."""

    mean: np.ndarray
    components: np.ndarray   # (d, 2), orthonormal columns
    eigenvalues: np.ndarray  # all d, non-increasing

    def project(self, feats: np.ndarray) -> np.ndarray:
        return (np.asarray(feats) - self.mean) @ self.components


def fit_pca(feats: np.ndarray) -> PcaProjection:
    """Fit the 2-D projection on (n, d) features, n >= 3."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 3:
        raise UsageError("PCA needs at least 3 feature rows")
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / (feats.shape[0] - 1)
    evals, vecs = jacobi_eigh(cov)
    return PcaProjection(mean=mean, components=vecs[:, :2], eigenvalues=evals)
