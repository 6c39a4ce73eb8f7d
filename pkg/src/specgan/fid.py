"""Fréchet distance between Gaussian fits of two feature sets."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from specgan.errors import NumericalError, ShapeError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FidResult:
    value: float
    mean_term: float
    trace_term: float
    mu_r: np.ndarray
    mu_g: np.ndarray
    n_real: int
    n_gen: int

    def __float__(self):
        return self.value


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def trace_sqrt_product(cov_r: np.ndarray, cov_g: np.ndarray) -> float:
    """``Tr((C_r C_g)^(1/2))`` through the symmetric form ``sqrt(C_r) C_g sqrt(C_r)``.

    The product of two PSD matrices is similar to that symmetric PSD
    matrix, so both share eigenvalues; eigenvalues pushed slightly
    negative by rounding are clamped to zero.
    """
    try:
        root_r = _psd_sqrt(cov_r)
        inner = root_r @ cov_g @ root_r
        eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "eigendecomposition failed while computing the covariance square root",
            {"cond_r": float(np.linalg.cond(cov_r)), "cond_g": float(np.linalg.cond(cov_g))},
        ) from exc
    if not np.all(np.isfinite(eig)):
        raise NumericalError(
            "non-finite eigenvalues in the covariance square root",
            {"cond_r": float(np.linalg.cond(cov_r)), "cond_g": float(np.linalg.cond(cov_g))},
        )
    scale = max(np.abs(eig).max(initial=0.0), 1e-300)
    if eig.min(initial=0.0) < -1e-10 * scale:
        logger.warning("clamping negative eigenvalue %.3e of the covariance product to 0", eig.min())
    return float(np.sqrt(np.clip(eig, 0.0, None)).sum())


def _check_features(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} features must be (N, d), got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValidationError(f"{name} features need at least 2 rows, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} features contain non-finite values")
    return x


def compute_fid(real_features, gen_features) -> FidResult:
    """``||mu_r - mu_g||^2 + Tr(C_r + C_g - 2 (C_r C_g)^(1/2))`` with unbiased covariances."""
    real = _check_features(real_features, "real")
    gen = _check_features(gen_features, "generated")
    if real.shape[1] != gen.shape[1]:
        raise ShapeError(f"feature dimensions differ: {real.shape[1]} vs {gen.shape[1]}")
    mu_r, mu_g = real.mean(axis=0), gen.mean(axis=0)
    cov_r = np.atleast_2d(np.cov(real, rowvar=False))
    cov_g = np.atleast_2d(np.cov(gen, rowvar=False))
    mean_term = float(np.sum((mu_r - mu_g) ** 2))
    trace_term = float(np.trace(cov_r) + np.trace(cov_g) - 2.0 * trace_sqrt_product(cov_r, cov_g))
    norm = max(np.linalg.norm(cov_r), np.linalg.norm(cov_g))
    if trace_term < 0:
        if -trace_term > 1e-6 * max(norm, 1.0):
            raise NumericalError("trace term is significantly negative", {"trace_term": trace_term, "cov_norm": norm})
        if -trace_term > 1e-12 * max(norm, 1.0):
            logger.warning("clamping slightly negative FID trace term %.3e to 0", trace_term)
        trace_term = 0.0
    return FidResult(mean_term + trace_term, mean_term, trace_term, mu_r, mu_g, real.shape[0], gen.shape[0])
