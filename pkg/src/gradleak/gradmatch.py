"""Gradient-matching losses, the total-variation prior and the attack objective."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateGradientError, DimensionError
from .smallnet import NetGradientMap, Sample, Weights, grad_weights
from .tensorcore import as_vector, l2_norm

__all__ = [
    "GradLossKind",
    "GradTarget",
    "ImageShape",
    "AffineGradientMap",
    "gradient_map",
    "gm_loss",
    "gm_loss_batch",
    "gm_grad_wrt_g",
    "tv_loss",
    "tv_grad",
    "attack_objective",
    "attack_objective_grad",
]


class GradLossKind(str, enum.Enum):
    L2 = "l2"
    COSINE = "cos"

    @classmethod
    def parse(cls, value) -> "GradLossKind":
        if isinstance(value, cls):
            return value
        aliases = {"l2": cls.L2, "cos": cls.COSINE, "cosine": cls.COSINE}
        try:
            return aliases[str(value).strip().lower()]
        except KeyError:
            raise ContractError(f"unknown gradient loss kind {value!r}") from None


@dataclass(frozen=True)
class GradTarget:
    """The shared gradient ``g*`` with its cached norm."""

    g_star: np.ndarray = field(repr=False)
    norm: float = field(init=False)

    def __post_init__(self):
        g = as_vector(self.g_star, "target gradient").copy()
        g.flags.writeable = False
        object.__setattr__(self, "g_star", g)
        nrm = l2_norm(g)
        if nrm == 0.0:
            raise DegenerateGradientError("target gradient has zero norm")
        object.__setattr__(self, "norm", nrm)

    @property
    def unit(self) -> np.ndarray:
        return self.g_star / self.norm

    @classmethod
    def from_sample(cls, w: Weights, s: Sample) -> "GradTarget":
        return cls(grad_weights(w, s))


@dataclass(frozen=True)
class ImageShape:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ContractError("TV needs images of at least 2x2")

    @property
    def size(self) -> int:
        return self.height * self.width

    @classmethod
    def square(cls, d: int) -> "ImageShape":
        side = math.isqrt(d)
        if side * side != d:
            raise ContractError(f"{d} pixels do not form a square image")
        return cls(side, side)


class AffineGradientMap:
    """``g(x) = A x + b``: a stand-in gradient map with a known Jacobian."""

    def __init__(self, A, b=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.n, self.d = self.A.shape
        self.b = np.zeros(self.n) if b is None else as_vector(b, "offset")

    def grad(self, X):
        return np.asarray(X, dtype=np.float64) @ self.A.T + self.b

    def dot(self, X, u):
        return np.atleast_2d(self.grad(X)) @ np.asarray(u, dtype=np.float64)

    def sqnorm(self, X):
        g = np.atleast_2d(self.grad(X))
        return np.einsum("bi,bi->b", g, g)

    def dot_sqnorm(self, X, u):
        g = np.atleast_2d(self.grad(X))
        return g @ np.asarray(u, dtype=np.float64), np.einsum("bi,bi->b", g, g)


def gradient_map(model, y=None):
    """Wrap ``Weights`` (plus label) as a gradient map; pass maps through."""
    if isinstance(model, Weights):
        if y is None:
            raise ContractError("a label is required to build a gradient map")
        return NetGradientMap(model, y)
    return model


def _check_g(g, t: GradTarget):
    g = as_vector(g, "gradient")
    if g.size != t.g_star.size:
        raise DimensionError(f"gradient length {g.size} != target length {t.g_star.size}")
    return g


def gm_loss(kind, g, t: GradTarget) -> float:
    """L2: squared distance.  Cosine: one minus cosine similarity."""
    kind = GradLossKind.parse(kind)
    g = _check_g(g, t)
    if kind is GradLossKind.L2:
        diff = g - t.g_star
        return float(diff @ diff)
    gn = l2_norm(g)
    if gn == 0.0:
        raise DegenerateGradientError("cosine distance undefined for a zero gradient")
    cos = float(g @ t.g_star) / (gn * t.norm)
    return 1.0 - min(1.0, max(-1.0, cos))


def gm_grad_wrt_g(kind, g, t: GradTarget) -> np.ndarray:
    kind = GradLossKind.parse(kind)
    g = _check_g(g, t)
    if kind is GradLossKind.L2:
        return 2.0 * (g - t.g_star)
    gn = l2_norm(g)
    if gn == 0.0:
        raise DegenerateGradientError("cosine distance undefined for a zero gradient")
    g_hat = g / gn
    u = t.unit
    return -(u - g_hat * (g_hat @ u)) / gn


def gm_loss_batch(kind, gmap, X, t: GradTarget) -> np.ndarray:
    """Gradient-matching loss at every row of ``X`` without materializing gradients.

    The L2 value is expanded as ``|g|^2 - 2 g.g* + |g*|^2`` and is not
    clamped, so tiny values can come out slightly negative.
    """
    kind = GradLossKind.parse(kind)
    dots, sq = gmap.dot_sqnorm(np.atleast_2d(X), t.g_star)
    if kind is GradLossKind.L2:
        return sq - 2.0 * dots + t.norm * t.norm
    if np.any(sq <= 0.0):
        raise DegenerateGradientError("cosine distance undefined for a zero gradient")
    return 1.0 - dots / (np.sqrt(sq) * t.norm)


def _image(x, shape: ImageShape):
    x = as_vector(x, "image")
    if x.size != shape.size:
        raise DimensionError(f"image of {x.size} pixels does not match {shape}")
    return x.reshape(shape.height, shape.width)


def tv_loss(x, shape: ImageShape, eps: float = 1e-6) -> float:
    """Smoothed anisotropic total variation over neighbor pairs."""
    img = _image(x, shape)
    dh = np.diff(img, axis=1)
    dv = np.diff(img, axis=0)
    return float(np.sqrt(dh * dh + eps * eps).sum() + np.sqrt(dv * dv + eps * eps).sum())


def tv_grad(x, shape: ImageShape, eps: float = 1e-6) -> np.ndarray:
    img = _image(x, shape)
    grad = np.zeros_like(img)
    dh = np.diff(img, axis=1)
    gh = dh / np.sqrt(dh * dh + eps * eps)
    grad[:, 1:] += gh
    grad[:, :-1] -= gh
    dv = np.diff(img, axis=0)
    gv = dv / np.sqrt(dv * dv + eps * eps)
    grad[1:, :] += gv
    grad[:-1, :] -= gv
    return grad.ravel()


def attack_objective(model, x, y, kind, t: GradTarget, alpha_tv=0.0, shape=None,
                     tv_eps=1e-6) -> float:
    """Value of ``gm_loss(g(x)) + alpha_tv * TV(x)``."""
    gmap = gradient_map(model, y)
    value = float(gm_loss_batch(kind, gmap, as_vector(x, "x")[None, :], t)[0])
    if alpha_tv:
        value += alpha_tv * tv_loss(x, shape, tv_eps)
    return value


def fd_points(x, fd_step):
    """``2d`` central-difference probes: rows ``x + h e_i`` then ``x - h e_i``."""
    d = x.size
    step = fd_step * np.eye(d)
    return np.concatenate([x + step, x - step])


def attack_objective_grad(model, x, y, kind, t: GradTarget, alpha_tv=0.0,
                          shape=None, fd_step=1e-4, tv_eps=1e-6,
                          return_loss=False):
    """Gradient in ``x`` of the attack objective with the label held fixed.

    The gradient-matching part uses coordinate-wise central differences of
    ``x -> gm_loss(g(x), g*)``.  With ``return_loss=True`` also returns the
    gradient-matching loss at ``x`` (evaluated in the same batch).
    """
    kind = GradLossKind.parse(kind)
    x = as_vector(x, "x")
    gmap = gradient_map(model, y)
    probes = np.concatenate([fd_points(x, fd_step), x[None, :]])
    losses = gm_loss_batch(kind, gmap, probes, t)
    d = x.size
    grad = (losses[:d] - losses[d : 2 * d]) / (2.0 * fd_step)
    if alpha_tv:
        if shape is None:
            raise ContractError("an ImageShape is required when alpha_tv > 0")
        grad = grad + alpha_tv * tv_grad(x, shape, tv_eps)
    if not np.all(np.isfinite(grad)):
        raise DegenerateGradientError("attack objective gradient is not finite")
    if return_loss:
        return grad, float(losses[-1])
    return grad
