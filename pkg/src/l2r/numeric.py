"""Dense linear algebra helpers, seeded randomness and a two-component PCA.

Vectors and matrices are plain float64 numpy arrays. Every public operation
checks shapes up front and refuses to return non-finite values.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass

import numpy as np

PCA_MAX_ITER = 1000
PCA_TOL = 1e-10


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def ensure_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} produced non-finite values")
    return arr


class Rng:
    """Seeded PCG64 stream with labelled, independent sub-streams.

    A label such as ``"harness/batches"`` is hashed part by part with CRC32
    into the SeedSequence spawn key, so ``Rng(7).split("a")`` always yields
    the same stream regardless of what else was drawn from the parent.
    """

    def __init__(self, seed: int, label: str = ""):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.label = label
        key = tuple(zlib.crc32(part.encode("utf-8")) for part in label.split("/") if part)
        seq = np.random.SeedSequence(self.seed, spawn_key=key)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def split(self, label: str) -> "Rng":
        full = f"{self.label}/{label}" if self.label else label
        return Rng(self.seed, full)

    def normal(self, size=None, scale: float = 1.0):
        return self.generator.normal(0.0, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, label={self.label!r})"


def matvec(m, v) -> np.ndarray:
    """Row-vector product ``v @ m`` for ``m`` of shape (len(v), cols).

    Matches the ``x W`` convention used for router weights: the
    vector indexes the matrix rows.
    """
    m = as_matrix(m, "matrix")
    v = as_vector(v, "vector")
    if v.shape[0] != m.shape[0]:
        raise ValueError(
            f"dimension mismatch: vector has length {v.shape[0]}, "
            f"matrix is {m.shape[0]}x{m.shape[1]}"
        )
    return ensure_finite(v @ m, "matvec")


def rmsnorm(x, gain, eps: float) -> np.ndarray:
    """``x * gain / sqrt(mean(x**2) + eps)`` along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape[-1:] != x.shape[-1:]:
        raise ValueError(f"gain length {gain.shape[-1:]} does not match input length {x.shape[-1:]}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    ms = np.mean(x * x, axis=-1, keepdims=True) + eps
    # eps=0 on an all-zero row: the row stays zero.
    rms = np.sqrt(np.where(ms > 0, ms, 1.0))
    return ensure_finite(x * gain / rms, "rmsnorm")


def sample_unit_sphere(rng: Rng, r: int, n: int | None = None) -> np.ndarray:
    """Isotropic direction(s) on the unit sphere in R^r (Gaussian, then normalise).

    Returns shape (r,) when ``n`` is None, else (n, r).
    """
    if r < 1:
        raise ValueError(f"sphere dimension must be >= 1, got {r}")
    shape = (r,) if n is None else (n, r)
    while True:
        g = rng.normal(size=shape)
        norms = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.all(norms > 1e-300):
            return g / norms


@dataclass(frozen=True)
class PCAResult:
    projection: np.ndarray  # (n, 2)
    components: np.ndarray  # (2, D), orthonormal rows
    eigenvalues: np.ndarray  # (2,)
    degenerate: bool = False


def _power_iteration(c: np.ndarray, start: np.ndarray, basis: list[np.ndarray]) -> tuple[np.ndarray, float]:
    v = start.copy()
    for b in basis:
        v -= (v @ b) * b
    v /= np.linalg.norm(v)
    for _ in range(PCA_MAX_ITER):
        w = c @ v
        for b in basis:
            w -= (w @ b) * b
        nrm = np.linalg.norm(w)
        if nrm < 1e-300:
            break
        w /= nrm
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < PCA_TOL
        v = w
        if done:
            break
    return v, float(v @ c @ v)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def pca2(points) -> PCAResult:
    """Project mean-centred points onto the top two covariance eigenvectors.

    Eigenvectors come from power iteration with deflation. Each eigenvector is
    signed so its largest-magnitude coordinate is positive. A zero covariance
    yields an all-zero projection with ``degenerate=True`` and a warning.
    """
    x = as_matrix(points, "points")
    n, dim = x.shape
    if n < 3:
        raise ValueError(f"pca2 needs at least 3 points, got {n}")
    if dim < 2:
        raise ValueError(f"pca2 needs dimension >= 2, got {dim}")
    centred = x - x.mean(axis=0)
    # residue of the mean subtraction on identical points counts as zero spread
    spread_floor = 64 * np.finfo(np.float64).eps * float(np.max(np.abs(x)))
    if float(np.max(np.abs(centred))) <= spread_floor:
        centred = np.zeros_like(centred)
    cov = centred.T @ centred / n
    if not np.any(cov):
        warnings.warn("pca2: covariance has rank 0, returning zero projection", RuntimeWarning, stacklevel=2)
        comps = np.eye(2, dim)
        return PCAResult(np.zeros((n, 2)), comps, np.zeros(2), degenerate=True)

    start = Rng(0, "numeric/pca2").normal(size=dim)
    v1, lam1 = _power_iteration(cov, start, [])
    start2 = Rng(0, "numeric/pca2/second").normal(size=dim)
    v2, lam2 = _power_iteration(cov, start2, [v1])
    v2 -= (v2 @ v1) * v1
    v2 /= np.linalg.norm(v2)
    if lam2 > lam1:
        # near-degenerate spectra can leave the pair unordered at max_iter
        v1, v2, lam1, lam2 = v2, v1, lam2, lam1
    comps = np.stack([_fix_sign(v1), _fix_sign(v2)])
    proj = centred @ comps.T
    return PCAResult(ensure_finite(proj, "pca2"), comps, np.array([lam1, lam2]))
