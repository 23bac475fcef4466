"""Deterministic linear algebra, seeded randomness, and small statistics helpers.

All arithmetic is 64-bit. Arrays are plain numpy ndarrays; shape checks are
the caller-facing contract, dtype coercion happens at the boundary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, CorrelationUndefinedError, NumericDomainError


@dataclass(frozen=True)
class RngStream:
    """A (seed, stream_id) pair that deterministically names one draw sequence.

    Identical pairs give bit-identical sequences across runs and platforms.
    Concurrent consumers must each use their own stream_id.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id))))

    def child(self, offset: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + offset)


def named_stream(seed: int, name: str) -> RngStream:
    """Derive a stream id from a module/purpose name, stable across platforms."""
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return RngStream(seed, int.from_bytes(digest, "little") >> 1)


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator, or an int seed."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise ContractError(f"cannot interpret {type(rng).__name__} as an RNG")


def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray],
                         x: np.ndarray,
                         h: float | None = None) -> np.ndarray:
    """Central-difference Jacobian of f at x, entry (i, j) = df_i/dx_j.

    Default step balances truncation against rounding for float64:
    h = 1e-4 * max(1, ||x||_inf).
    """
    x = np.asarray(x, dtype=np.float64)
    if h is None:
        h = 1e-4 * max(1.0, float(np.max(np.abs(x))) if x.size else 1.0)
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        fp = np.asarray(f(x + e), dtype=np.float64)
        fm = np.asarray(f(x - e), dtype=np.float64)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericDomainError("function returned non-finite values near x")
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)


def spectral_norm(m: np.ndarray, tol: float = 1e-10, max_iter: int = 1000) -> float:
    """Largest singular value via power iteration on M^T M."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NumericDomainError("matrix has non-finite entries")
    if m.size == 0 or not m.any():
        return 0.0
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0x5EC7)))
    v = rng.standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = m @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # v landed in the null space; redraw
            v = rng.standard_normal(m.shape[1])
            v /= np.linalg.norm(v)
            continue
        v_new = m.T @ w
        nv = np.linalg.norm(v_new)
        if nv == 0.0:
            return float(nw)
        v = v_new / nv
        sigma_new = nw
        if sigma > 0 and abs(sigma_new - sigma) <= tol * sigma:
            return float(np.linalg.norm(m @ v))
        sigma = sigma_new
    return float(np.linalg.norm(m @ v))


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean squared difference over all entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Sample Pearson correlation of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ContractError("pearson needs two equal-length vectors with n >= 2")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da ** 2).sum() * (db ** 2).sum())
    if denom == 0.0:
        raise CorrelationUndefinedError("zero-variance input")
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0))


def pca_axes(points: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Top-k principal axes (d x k) and all eigenvalues of the sample covariance.

    Axes are sign-fixed: the largest-magnitude loading of each axis is positive.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] <= 2:
        raise ContractError("pca needs a 2-D point matrix with n > 2")
    centered = pts - pts.mean(axis=0, keepdims=True)
    # eigh on the covariance keeps axes deterministic (no SVD sign wobble)
    cov = centered.T @ centered / (pts.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    axes = eigvecs[:, order[:k]]
    for j in range(axes.shape[1]):
        i = int(np.argmax(np.abs(axes[:, j])))
        if axes[i, j] < 0:
            axes[:, j] = -axes[:, j]
    return axes, eigvals


def pca_project(points: np.ndarray, k: int = 2) -> np.ndarray:
    """Project mean-centered points onto their top-k principal axes."""
    pts = np.asarray(points, dtype=np.float64)
    axes, _ = pca_axes(pts, k)
    centered = pts - pts.mean(axis=0, keepdims=True)
    return centered @ axes
