"""Complex linear algebra and seeded sampling shared by the whole package."""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack

HERMITIAN_TOL = 1e-10


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, symmetry, range)."""


class SingularityError(np.linalg.LinAlgError):
    """Factorization failed; ``pivot`` is the 0-based index of the failing pivot."""

    def __init__(self, pivot: int, msg: str | None = None):
        self.pivot = pivot
        super().__init__(msg or f"matrix is not positive definite (pivot {pivot})")


def make_rng(seed: int, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, *index)``.

    Streams for different index tuples are statistically independent, so a
    parallel worker handling task ``j`` can call ``make_rng(seed, j)`` without
    coordinating with anyone else.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(i) for i in index]])
    return np.random.Generator(np.random.PCG64(ss))


def as_complex_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ContractViolation(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolation(f"{name} has non-finite entries")
    return a


def solve_hpd(A, B) -> np.ndarray:
    """Solve ``A X = B`` for Hermitian positive-definite ``A``.

    Parameters
    ----------
    A : array_like, shape (n, n)
        Hermitian positive-definite; checked to within 1e-10 entrywise.
    B : array_like, shape (n,) or (n, m)

    Returns
    -------
    X : ndarray, complex128, same shape as ``B``

    Raises
    ------
    ContractViolation
        If ``A`` is not square/Hermitian or the shapes disagree.
    SingularityError
        If the Cholesky factorization breaks down.
    """
    A = as_complex_matrix(A, "A")
    vector_rhs = np.ndim(B) == 1
    B = as_complex_matrix(B, "B")
    n = A.shape[0]
    if A.shape != (n, n):
        raise ContractViolation(f"A must be square, got {A.shape}")
    if B.shape[0] != n:
        raise ContractViolation(f"B has {B.shape[0]} rows, A is {n}x{n}")
    asym = np.max(np.abs(A - A.conj().T))
    if asym > HERMITIAN_TOL:
        raise ContractViolation(f"A is not Hermitian (max |A - A^H| = {asym:.3e})")

    c, info = lapack.zpotrf(A, lower=True, clean=True)
    if info > 0:
        raise SingularityError(info - 1)
    if info < 0:
        raise ContractViolation(f"zpotrf rejected argument {-info}")
    # rank-deficient input can survive the factorization with a rounding-level pivot
    pivots = np.abs(np.diag(c)) ** 2
    floor = n * np.finfo(float).eps * max(np.max(np.abs(np.diag(A))), np.finfo(float).tiny)
    tiny = np.flatnonzero(pivots <= floor)
    if tiny.size:
        raise SingularityError(int(tiny[0]))
    X, info = lapack.zpotrs(c, B, lower=True)
    if info != 0:
        raise ContractViolation(f"zpotrs rejected argument {-info}")
    return X[:, 0] if vector_rhs else X


def sample_cgauss(rng: np.random.Generator, rows: int, cols: int | None = None,
                  var: float = 1.0, size: tuple[int, ...] = ()) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples with per-entry variance ``var``.

    ``size`` prepends batch dimensions; with ``cols=None`` the trailing shape
    is ``(rows,)``.
    """
    if var < 0:
        raise ContractViolation(f"variance must be nonnegative, got {var}")
    shape = tuple(size) + ((rows,) if cols is None else (rows, cols))
    if var == 0:
        return np.zeros(shape, dtype=np.complex128)
    scale = np.sqrt(var / 2.0)
    z = rng.standard_normal(shape + (2,))
    return scale * (z[..., 0] + 1j * z[..., 1])
