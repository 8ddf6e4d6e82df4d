"""Loss-aware vulnerability proxies.

The Hessian of the gradient-matching loss at the ground truth image is

* L2:      ``J^T J``
* cosine:  ``J^T (I - u u^T) J / |g*|^2`` with ``u = g*/|g*|``

where ``J`` is the Jacobian of the weight gradient with respect to the
input.  Neither matrix is formed on the hot path: ``J v`` is a central
difference of the gradient map along ``v`` and ``J^T u`` is a
coordinate-wise central difference of the scalar ``x -> g(x).u``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .errors import ContractError, DimensionError
from .gradmatch import GradLossKind, GradTarget, fd_points, gradient_map
from .smallnet import Sample, Weights, grad_weights
from .tensorcore import SeededRng, as_vector, l2_norm, rand_unit_vector

log = logging.getLogger(__name__)

__all__ = [
    "HvpOperator",
    "MatrixOperator",
    "EigenEstimate",
    "ProxyParams",
    "ProxyRecord",
    "PROXY_NAMES",
    "max_eigen_power",
    "min_eigen_deflate",
    "max_rayleigh_random",
    "grad_norm_proxy",
    "fusion_geomean",
    "dense_hessian_oracle",
    "compute_proxies",
]

PROXY_NAMES = ("grad_norm", "l2_max", "l2_min", "cos_max", "cos_min", "fusion")


class HvpOperator:
    """Matrix-free Hessian of the gradient-matching loss at ``x_star``."""

    def __init__(self, kind, gmap, x_star, target: GradTarget,
                 fd_step=1e-4, fd_step_outer=1e-4):
        self.kind = GradLossKind.parse(kind)
        self.gmap = gmap
        self.x_star = as_vector(x_star, "x_star")
        self.target = target
        if fd_step <= 0 or fd_step_outer <= 0:
            raise ContractError("finite-difference steps must be positive")
        self.fd_step = float(fd_step)
        self.fd_step_outer = float(fd_step_outer)

    @classmethod
    def from_model(cls, kind, w: Weights, sample: Sample, target=None, **kw):
        target = target if target is not None else GradTarget.from_sample(w, sample)
        return cls(kind, gradient_map(w, sample.y), sample.x, target, **kw)

    @property
    def dimension(self) -> int:
        return self.x_star.size

    def _check(self, v):
        v = as_vector(v, "v")
        if v.size != self.dimension:
            raise DimensionError(f"expected a vector of length {self.dimension}")
        return v

    def jvp(self, v) -> np.ndarray:
        """Central-difference estimate of ``J v``.

        The step is taken along the unit direction and the result rescaled,
        so the probe distance is always ``fd_step``.
        """
        v = self._check(v)
        nv = l2_norm(v)
        if nv == 0.0:
            return np.zeros(self.target.g_star.size)
        h = self.fd_step
        u = v / nv
        g = self.gmap.grad(np.stack([self.x_star + h * u, self.x_star - h * u]))
        return (g[0] - g[1]) * (nv / (2.0 * h))

    def jacobian(self) -> np.ndarray:
        """Dense ``J`` (n x d), one central difference per input coordinate."""
        d, h = self.dimension, self.fd_step
        g = self.gmap.grad(fd_points(self.x_star, h))
        return ((g[:d] - g[d:]) / (2.0 * h)).T

    def project(self, u) -> np.ndarray:
        """Apply the middle factor: identity for L2, ``P/|g*|^2`` for cosine."""
        if self.kind is GradLossKind.L2:
            return u
        unit = self.target.unit
        return (u - unit * (unit @ u)) / (self.target.norm**2)

    def jt_vec(self, u) -> np.ndarray:
        """Central-difference estimate of ``J^T u``."""
        d, h = self.dimension, self.fd_step_outer
        s = self.gmap.dot(fd_points(self.x_star, h), u)
        return (s[:d] - s[d:]) / (2.0 * h)

    def hvp(self, v) -> np.ndarray:
        return self.jt_vec(self.project(self.jvp(v)))

    def rayleigh(self, v) -> float:
        """``v^T H v / v^T v`` evaluated as a squared norm of ``J v``."""
        v = self._check(v)
        nv2 = float(v @ v)
        if nv2 == 0.0:
            raise ContractError("Rayleigh quotient of the zero vector")
        jv = self.jvp(v)
        if self.kind is GradLossKind.L2:
            return float(jv @ jv) / nv2
        unit = self.target.unit
        pj = jv - unit * (unit @ jv)
        return float(pj @ pj) / (self.target.norm**2 * nv2)

    def as_linear_operator(self) -> LinearOperator:
        d = self.dimension
        return LinearOperator((d, d), matvec=self.hvp, dtype=np.float64)


class MatrixOperator:
    """A dense symmetric matrix exposed through the operator interface."""

    def __init__(self, h):
        self.h = np.asarray(h, dtype=np.float64)
        if self.h.ndim != 2 or self.h.shape[0] != self.h.shape[1]:
            raise DimensionError("operator matrix must be square")

    @property
    def dimension(self) -> int:
        return self.h.shape[0]

    def hvp(self, v):
        return self.h @ v

    def rayleigh(self, v) -> float:
        v = np.asarray(v, dtype=np.float64)
        return float(v @ self.h @ v) / float(v @ v)


@dataclass
class EigenEstimate:
    value: float
    raw: float
    residual: float
    iters: int
    converged: bool
    vector: np.ndarray = field(repr=False, default=None)


def _power(apply, v, max_iters, tol, scale=abs):
    """Plain power iteration from unit vector ``v``.

    Stops when the Rayleigh quotient changes by less than ``tol * scale(q)``
    (``q`` the current quotient) or the residual already meets that bound.
    Returns ``(rayleigh, v, residual, iters, stopped)``; ``stopped`` is
    False when the iteration budget ran out first.
    """
    lam_prev = None
    lam, res = 0.0, math.inf
    for it in range(1, max_iters + 1):
        w = apply(v)
        lam = float(v @ w)
        res = l2_norm(w - lam * v)
        ref = tol * scale(lam)
        wn = l2_norm(w)
        if wn == 0.0:
            return 0.0, v, 0.0, it, True
        if res <= ref or (lam_prev is not None and abs(lam - lam_prev) <= ref):
            return lam, v, res, it, True
        v = w / wn
        lam_prev = lam
    return lam, v, res, max_iters, False


def _rayleigh(op, v):
    if hasattr(op, "rayleigh"):
        return op.rayleigh(v)
    return float(v @ op.hvp(v)) / float(v @ v)


def max_eigen_power(op, max_iters=500, tol=1e-9, rng=None) -> EigenEstimate:
    """Largest eigenvalue of a PSD operator by power iteration.

    Starts from a seeded random unit vector.  If a fixed probe direction
    (the normalized all-ones vector) has a larger Rayleigh quotient than the
    converged value, the start was nearly orthogonal to the top eigenspace
    and the iteration is restarted once from the probe.
    """
    if max_iters < 1 or tol <= 0:
        raise ContractError("need max_iters >= 1 and tol > 0")
    rng = rng if rng is not None else SeededRng(0)
    d = op.dimension
    lam, v, res, iters, stopped = _power(op.hvp, rand_unit_vector(rng, d), max_iters, tol)
    value = _rayleigh(op, v)
    probe = np.full(d, 1.0 / math.sqrt(d))
    if _rayleigh(op, probe) > value * (1.0 + 1e-6) + 1e-300:
        log.info("power iteration restarted from the fixed probe vector")
        lam2, v2, res2, it2, stopped2 = _power(op.hvp, probe, max_iters, tol)
        value2 = _rayleigh(op, v2)
        iters += it2
        if value2 > value:
            value, v, res, stopped = value2, v2, res2, stopped2
    return EigenEstimate(value, value, res, iters, stopped, v)


def min_eigen_deflate(op, lambda_max, max_iters=500, tol=1e-9, rng=None,
                      clamp=True) -> EigenEstimate:
    """Smallest eigenvalue of a PSD operator via ``lambda_max I - H``.

    The returned value is ``lambda_max`` minus the top eigenvalue of the
    shifted operator, clamped below at zero; the unclamped estimate is kept
    in ``raw``.
    """
    if max_iters < 1 or tol <= 0:
        raise ContractError("need max_iters >= 1 and tol > 0")
    if lambda_max < 0:
        raise ContractError("lambda_max of a PSD operator cannot be negative")
    rng = rng if rng is not None else SeededRng(0)
    d = op.dimension

    def shifted(v):
        return lambda_max * v - op.hvp(v)

    # converge relative to the minimum being estimated, not to lambda_max,
    # with a floor so a (near-)singular operator still terminates
    floor = math.sqrt(tol) * abs(lambda_max) + 1e-300

    def scale(q):
        return max(lambda_max - q, floor)

    _, v, res, iters, stopped = _power(shifted, rand_unit_vector(rng, d), max_iters, tol, scale)
    shifted_top = lambda_max - _rayleigh(op, v)
    raw = lambda_max - shifted_top
    if raw < 0:
        log.debug("negative minimum eigenvalue %.3e clamped to 0", raw)
    value = max(raw, 0.0) if clamp else raw
    return EigenEstimate(value, raw, res, iters, stopped, v)


def max_rayleigh_random(op, trials, rng=None) -> float:
    """Best Rayleigh quotient over independent random unit vectors.

    A lower bound on the largest eigenvalue (the randomized cross-check).
    """
    rng = rng if rng is not None else SeededRng(0)
    return max(_rayleigh(op, rand_unit_vector(rng, op.dimension)) for _ in range(trials))


def grad_norm_proxy(w: Weights, s: Sample) -> float:
    return l2_norm(grad_weights(w, s))


def fusion_geomean(l2_max, cos_min) -> float:
    """Geometric mean of the L2 maximum and cosine minimum eigenvalues."""
    if l2_max < 0 or cos_min < 0:
        raise ContractError("fusion needs non-negative eigenvalues")
    return math.sqrt(l2_max * cos_min)


def dense_hessian_oracle(op: HvpOperator, method="jacobian", symmetrize=True):
    """Explicit ``d x d`` Hessian for small ``d``.

    ``method="jacobian"`` assembles ``J^T M J`` from a dense Jacobian;
    ``method="hvp"`` stacks ``hvp(e_i)`` columns (carries the
    finite-difference asymmetry).
    """
    d = op.dimension
    if d > 256:
        raise ContractError("dense oracle is limited to d <= 256")
    if method == "jacobian":
        J = op.jacobian()
        if op.kind is GradLossKind.L2:
            H = J.T @ J
        else:
            unit = op.target.unit
            PJ = J - np.outer(unit, unit @ J)
            H = (PJ.T @ PJ) / op.target.norm**2
    elif method == "hvp":
        H = np.column_stack([op.hvp(e) for e in np.eye(d)])
    else:
        raise ContractError(f"unknown oracle method {method!r}")
    return 0.5 * (H + H.T) if symmetrize else H


@dataclass(frozen=True)
class ProxyParams:
    max_iters: int = 500
    tol: float = 1e-9
    fd_step: float = 1e-4
    fd_step_outer: float = 1e-4
    seed: int = 0


@dataclass
class ProxyRecord:
    sample_id: int
    grad_norm: float
    l2_max: float
    l2_min: float
    cos_max: float
    cos_min: float
    fusion: float
    diagnostics: dict = field(default_factory=dict)

    def values(self):
        return {name: getattr(self, name) for name in PROXY_NAMES}


def compute_proxies(w: Weights, sample: Sample, sample_id=0,
                    params: ProxyParams = ProxyParams(), rng=None) -> ProxyRecord:
    """All six proxies for one sample; depends only on ``(w, x*, y*)``.

    Power-iteration start vectors come from ``rng`` (default
    ``SeededRng(params.seed).child(sample_id)``).
    """
    target = GradTarget.from_sample(w, sample)
    if rng is None:
        rng = SeededRng(params.seed).child(int(sample_id))
    out, diag = {}, {}
    for k_idx, kind in enumerate((GradLossKind.L2, GradLossKind.COSINE)):
        op = HvpOperator.from_model(kind, w, sample, target,
                                    fd_step=params.fd_step,
                                    fd_step_outer=params.fd_step_outer)
        top = max_eigen_power(op, params.max_iters, params.tol, rng.child(k_idx, 0))
        bottom = min_eigen_deflate(op, top.value, params.max_iters, params.tol,
                                   rng.child(k_idx, 1))
        out[f"{kind.value}_max"] = top.value
        out[f"{kind.value}_min"] = bottom.value
        for tag, est in (("max", top), ("min", bottom)):
            est_d = asdict(est)
            est_d.pop("vector")
            diag[f"{kind.value}_{tag}"] = est_d
    return ProxyRecord(
        sample_id=int(sample_id),
        grad_norm=target.norm,
        fusion=fusion_geomean(out["l2_max"], out["cos_min"]),
        diagnostics=diag,
        **out,
    )
