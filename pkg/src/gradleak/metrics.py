"""Image similarity scores and Spearman rank correlation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, InsufficientDataError
from .gradmatch import ImageShape
from .tensorcore import as_vector

__all__ = [
    "SimilarityScores",
    "mse",
    "psnr",
    "ssim",
    "similarity_scores",
    "rank_average",
    "spearman",
]

PSNR_CAP = 100.0


def _pair(a, b):
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    diff = a - b
    return float(diff @ diff) / a.size


def psnr(a, b, max_val=1.0, cap=PSNR_CAP) -> float:
    err = mse(a, b)
    if err == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(max_val * max_val / err))


def ssim(a, b, shape: ImageShape, k1=0.01, k2=0.03, dynamic_range=1.0,
         window="global", win_size=8) -> float:
    """Mean SSIM over windows.

    ``window="global"`` uses the whole image as a single window;
    ``window="sliding"`` averages over every ``win_size`` x ``win_size``
    window at stride 1.  Statistics use population (1/N) moments.
    """
    a, b = _pair(a, b)
    if a.size != shape.size:
        raise DimensionError(f"{a.size} pixels do not match {shape}")
    A = a.reshape(shape.height, shape.width)
    B = b.reshape(shape.height, shape.width)
    if window == "global":
        wa, wb = A[None, :, :], B[None, :, :]
    elif window == "sliding":
        if win_size > shape.height or win_size > shape.width:
            raise ContractError(f"window {win_size} larger than image {shape}")
        wa = sliding_window_view(A, (win_size, win_size)).reshape(-1, win_size, win_size)
        wb = sliding_window_view(B, (win_size, win_size)).reshape(-1, win_size, win_size)
    else:
        raise ContractError(f"unknown SSIM window {window!r}")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    mu_a = wa.mean(axis=(1, 2))
    mu_b = wb.mean(axis=(1, 2))
    da = wa - mu_a[:, None, None]
    db = wb - mu_b[:, None, None]
    var_a = (da * da).mean(axis=(1, 2))
    var_b = (db * db).mean(axis=(1, 2))
    cov = (da * db).mean(axis=(1, 2))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    if np.array_equal(a, b):
        return 1.0
    return float(np.mean(num / den))


@dataclass(frozen=True)
class SimilarityScores:
    mse: float
    psnr: float
    ssim: float


def similarity_scores(x_rec, x_true, shape: ImageShape) -> SimilarityScores:
    """MSE/PSNR/SSIM; global SSIM window up to 8x8 images, sliding 8x8 beyond."""
    window = "global" if shape.height <= 8 and shape.width <= 8 else "sliding"
    return SimilarityScores(
        mse=mse(x_rec, x_true),
        psnr=psnr(x_rec, x_true),
        ssim=ssim(x_rec, x_true, shape, window=window),
    )


def rank_average(a) -> np.ndarray:
    """1-based ranks in increasing order; tied values share their mean rank."""
    a = as_vector(a)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(a.size)
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, sorted_a[1:] != sorted_a[:-1]])
    ends = np.r_[starts[1:], a.size]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return ranks


def spearman(a, b) -> float:
    """Pearson correlation of the average-rank vectors of ``a`` and ``b``."""
    a, b = _pair(a, b)
    if a.size < 2:
        raise InsufficientDataError("Spearman correlation needs at least 2 items")
    ra = rank_average(a)
    rb = rank_average(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        raise InsufficientDataError("correlation undefined for a constant input")
    return max(-1.0, min(1.0, float(ra @ rb) / den))
