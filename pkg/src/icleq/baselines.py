"""Genie-aided LMMSE equalizer and the zero (context-free) predictor."""

from __future__ import annotations

import numpy as np

from .numerics import ContractViolation, as_complex_matrix, solve_hpd


def lmmse_estimate(H, y, sigma2: float) -> np.ndarray:
    """``(2 sigma2 I + H^H H)^{-1} H^H y`` with the channel assumed known.

    The quantizer is ignored. For ``m1 = 2`` and unit-energy inputs the
    factor 2 matches the per-entry input variance 1/2, making this the exact
    linear MMSE filter for Gaussian inputs.
    """
    if sigma2 < 0:
        raise ContractViolation(f"sigma2 must be >= 0, got {sigma2}")
    H = as_complex_matrix(H, "H")
    y = np.asarray(y, dtype=np.complex128)
    if y.ndim != 1 or y.shape[0] != H.shape[0]:
        raise ContractViolation(f"y shape {y.shape} does not match H {H.shape}")
    Hh = H.conj().T
    gram = 2.0 * sigma2 * np.eye(H.shape[1]) + Hh @ H
    # exact Hermitian symmetry; rounding in H^H H can leave ~1e-17 skew
    gram = 0.5 * (gram + gram.conj().T)
    return solve_hpd(gram, Hh @ y)


def zero_predictor(m1: int) -> np.ndarray:
    return np.zeros(m1, dtype=np.complex128)


def lmmse_batch(H: np.ndarray, y: np.ndarray, sigma2) -> np.ndarray:
    """Row-wise :func:`lmmse_estimate` for ``H`` (n, m2, m1) and ``y`` (n, m2)."""
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (H.shape[0],))
    return np.stack([lmmse_estimate(Hi, yi, float(s)) for Hi, yi, s in zip(H, y, sigma2)])
