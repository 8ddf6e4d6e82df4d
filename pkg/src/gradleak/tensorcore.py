"""Dense float64 linear algebra helpers and seeded random streams.

Vectors are 1-D ``numpy.float64`` arrays and matrices are 2-D row-major
arrays; the helpers here only add the shape/finiteness contracts the rest
of the package relies on.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "SeededRng",
    "as_vector",
    "dot",
    "l2_norm",
    "rand_unit_vector",
    "matvec",
    "matvec_t",
    "sym_eigen_dense",
]


class SeededRng:
    """A reproducible random stream keyed by ``(master_seed, stream_id...)``.

    Backed by the counter-based Philox generator, so a stream's output
    depends only on its key, never on how many other streams exist or in
    which order they are consumed.

    >>> a = SeededRng(7).child(3, 1).normal(size=2)
    >>> b = SeededRng(7, (3, 1)).normal(size=2)
    >>> bool((a == b).all())
    True
    """

    def __init__(self, master_seed: int, stream_id=()):
        if isinstance(stream_id, (int, np.integer)):
            stream_id = (int(stream_id),)
        self.master_seed = int(master_seed)
        self.stream_id = tuple(int(s) for s in stream_id)
        if self.master_seed < 0 or any(s < 0 for s in self.stream_id):
            raise ContractError("seeds and stream ids must be non-negative")
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, *ids: int) -> "SeededRng":
        """Derive an independent stream by extending the key."""
        return SeededRng(self.master_seed, self.stream_id + tuple(ids))

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n: int):
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def __repr__(self):
        return f"SeededRng(master_seed={self.master_seed}, stream_id={self.stream_id})"


def as_vector(a, name="vector") -> np.ndarray:
    """Return ``a`` as a finite 1-D float64 array."""
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ContractError(f"{name} contains non-finite entries")
    return v


def dot(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    return float(a @ b)


def l2_norm(a) -> float:
    a = as_vector(a)
    # hypot-style scaling keeps huge/tiny vectors finite
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale == 0.0:
        return 0.0
    s = a / scale
    return float(scale * math.sqrt(s @ s))


def rand_unit_vector(rng: SeededRng, d: int) -> np.ndarray:
    """Standard-normal draw normalized to unit length."""
    if d < 1:
        raise ContractError("d must be >= 1")
    while True:
        v = rng.normal(d)
        n = l2_norm(v)
        if n > 0.0:
            return v / n


def _as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"matrix must be 2-D, got shape {m.shape}")
    return m


def matvec(m, v) -> np.ndarray:
    m = _as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.size:
        raise DimensionError(f"cannot multiply {m.shape} by vector of length {v.size}")
    return m @ v


def matvec_t(m, v) -> np.ndarray:
    m = _as_matrix(m)
    v = as_vector(v)
    if m.shape[0] != v.size:
        raise DimensionError(f"cannot multiply {m.shape}^T by vector of length {v.size}")
    return m.T @ v


def sym_eigen_dense(h, max_sweeps: int = 100):
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order and eigenvectors stored as columns.
    """
    a = _as_matrix(h).copy()
    n, m = a.shape
    if n != m:
        raise ContractError(f"matrix must be square, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("matrix contains non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * scale:
        raise ContractError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    fro = float(np.sqrt(np.sum(a * a)))

    for _ in range(max_sweeps):
        off = math.sqrt(2.0) * float(np.linalg.norm(np.triu(a, 1)))
        if off <= 1e-15 * fro or fro == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                # hypot avoids overflowing tau**2 when apq is negligible
                t = math.copysign(1.0, tau) / (abs(tau) + math.hypot(1.0, tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]
