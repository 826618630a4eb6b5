"""Dense complex matrix helpers.

Matrices are plain ``numpy.ndarray`` objects of dtype ``complex128``. Every
constructor in this module returns a fresh, read-only array so that values can
be shared freely between workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EigenSolverError, ResourceCapError, ValidationError

DEFAULT_TOL = 1e-10
DEFAULT_CLUSTER_TOL = 1e-8
# gaps at or below this are always merged: eigh round-off on unit-scale input
CLUSTER_NOISE_FLOOR = 1e-13
MAX_KRON_DIM = 1 << 16


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.complex128, copy=True)
    out.setflags(write=False)
    return out


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D complex array (read-only copy)."""
    m = np.asarray(a, dtype=np.complex128)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValidationError(f"{name}: expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{name}: entries must be finite")
    return _frozen(m)


def _square(a, name: str) -> np.ndarray:
    m = as_matrix(a, name)
    if m.shape[0] != m.shape[1]:
        raise ValidationError(f"{name}: expected a square matrix, got shape {m.shape}")
    return m


def dagger(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose."""
    return np.conj(np.asarray(a)).T


def operator_norm(a: np.ndarray) -> float:
    """Largest singular value."""
    return float(np.linalg.norm(np.asarray(a), 2))


def residual_norm(a: np.ndarray) -> float:
    """Frobenius norm, a cheap upper bound on the operator norm used for invariant checks."""
    return float(np.linalg.norm(np.asarray(a)))


def trace_norm(a: np.ndarray) -> float:
    """Sum of singular values."""
    return float(np.sum(np.linalg.svd(np.asarray(a), compute_uv=False)))


def kron(a: np.ndarray, b: np.ndarray, max_dim: int = MAX_KRON_DIM) -> np.ndarray:
    """Kronecker product ``(A⊗B)[(i,k),(j,l)] = A[i,j]·B[k,l]``.

    Raises:
        ResourceCapError: if either output dimension would exceed ``max_dim``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    rows, cols = a.shape[0] * b.shape[0], a.shape[1] * b.shape[1]
    if rows > max_dim or cols > max_dim:
        raise ResourceCapError(f"kron output {rows}x{cols} exceeds cap {max_dim}")
    return np.kron(a, b).astype(np.complex128, copy=False)


def hermiticity_residual(a: np.ndarray) -> float:
    a = np.asarray(a)
    return operator_norm(a - dagger(a))


def as_unitary(a, tol: float = DEFAULT_TOL, name: str = "unitary") -> np.ndarray:
    """Validated unitary: ``‖U†U − 1‖_op ≤ tol``."""
    u = _square(a, name)
    res = operator_norm(dagger(u) @ u - np.eye(u.shape[0]))
    if res > tol:
        raise ValidationError(f"{name}: not unitary (‖U†U−1‖ = {res:.3e} > {tol:.1e})")
    return u


def as_density(a, tol: float = DEFAULT_TOL, name: str = "density matrix") -> np.ndarray:
    """Validated density matrix: Hermitian, unit trace, eigenvalues ≥ −tol."""
    rho = _square(a, name)
    herm = hermiticity_residual(rho)
    if herm > tol:
        raise ValidationError(f"{name}: not Hermitian (residual {herm:.3e})")
    tr = np.trace(rho)
    if abs(tr - 1.0) > tol:
        raise ValidationError(f"{name}: trace {tr.real:.12g} != 1")
    lo = float(np.linalg.eigvalsh(0.5 * (rho + dagger(rho)))[0])
    if lo < -tol:
        raise ValidationError(f"{name}: negative eigenvalue {lo:.3e}")
    return rho


def as_projection(a, tol: float = DEFAULT_TOL, name: str = "projection") -> np.ndarray:
    """Validated orthogonal projection: ``P = P† = P²``."""
    p = _square(a, name)
    res = max(hermiticity_residual(p), operator_norm(p @ p - p))
    if res > tol:
        raise ValidationError(f"{name}: not an orthogonal projection (residual {res:.3e})")
    return p


def projection_rank(p: np.ndarray) -> int:
    return int(round(np.trace(p).real))


def projector(vectors: np.ndarray) -> np.ndarray:
    """Projection onto the span of orthonormal columns ``vectors``."""
    v = np.asarray(vectors, dtype=np.complex128)
    if v.ndim == 1:
        v = v[:, None]
    return _frozen(v @ dagger(v))


@dataclass(frozen=True)
class SpectralDecomposition:
    """Clustered spectral decomposition ``A = Σ_r q_r Π_r``.

    ``eigenvalues`` are strictly descending cluster values (the mean of the
    merged raw eigenvalues); ``projections`` are the matching spectral
    projections. ``cluster_residual`` is ``‖A − Σ q_r Π_r‖_F`` (bounding the
    operator norm), which is only
    non-negligible when raw eigenvalues closer than ``cluster_tol`` but not
    numerically identical were merged.
    """

    eigenvalues: tuple[float, ...]
    projections: tuple[np.ndarray, ...]
    ranks: tuple[int, ...]
    cluster_tol: float
    cluster_residual: float

    def __len__(self) -> int:
        return len(self.eigenvalues)

    def reconstruct(self) -> np.ndarray:
        dim = self.projections[0].shape[0]
        out = np.zeros((dim, dim), dtype=np.complex128)
        for q, p in zip(self.eigenvalues, self.projections):
            out += q * p
        return out

    def weighted_trace(self) -> float:
        return float(sum(q * r for q, r in zip(self.eigenvalues, self.ranks)))


def cluster_eigenvalues(
    values: Sequence[float], tol: float, floor: float = CLUSTER_NOISE_FLOOR
) -> list[list[int]]:
    """Group indices of descending ``values``.

    Neighbours ``a ≥ b`` share a group when ``a − b ≤ max(tol·max(|a|, |b|), floor)``.
    The gap test is relative so that a small but genuine eigenvalue (say
    ``3e-10`` next to ``0``) is not averaged away; for unit-trace states this
    is never looser than an absolute ``tol``.
    """
    groups: list[list[int]] = []
    for i, v in enumerate(values):
        if groups and values[i - 1] - v <= max(tol * max(abs(values[i - 1]), abs(v)), floor):
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def hermitian_eigendecompose(
    a,
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
    herm_tol: float = DEFAULT_TOL,
) -> SpectralDecomposition:
    """Spectral decomposition of a Hermitian matrix with eigenvalue clustering.

    Eigenvalues are sorted in descending order and a new cluster is opened
    whenever the gap to the previous eigenvalue exceeds ``cluster_tol`` times
    the larger magnitude (see :func:`cluster_eigenvalues`). Each
    cluster yields one projection whose rank is the cluster multiplicity.

    Raises:
        ValidationError: if ``a`` is not Hermitian within ``herm_tol`` or
            ``cluster_tol`` is not positive.
        EigenSolverError: if LAPACK fails or its factorisation residual
            exceeds ``herm_tol`` (relative to ``max(1, ‖A‖)``).
    """
    if not cluster_tol > 0:
        raise ValidationError("cluster_tol must be positive")
    m = _square(a, "hermitian matrix")
    herm = residual_norm(m - dagger(m))
    if herm > herm_tol:
        raise ValidationError(f"matrix is not Hermitian (residual {herm:.3e} > {herm_tol:.1e})")
    h = 0.5 * (m + dagger(m))
    try:
        w, v = np.linalg.eigh(h)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise EigenSolverError("eigh convergence", float("inf"), herm_tol, str(exc)) from exc
    scale = max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    residual = residual_norm(h - (v * w) @ dagger(v))
    if residual > herm_tol * scale:
        raise EigenSolverError("eigendecomposition residual", residual, herm_tol * scale)

    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    wl = w.tolist()
    groups = cluster_eigenvalues(wl, cluster_tol)

    values, projs, ranks = [], [], []
    approx = np.zeros_like(h)
    for g in groups:
        q = sum(wl[i] for i in g) / len(g)
        p = projector(v[:, g])
        values.append(q)
        projs.append(p)
        ranks.append(len(g))
        approx += q * p
    return SpectralDecomposition(
        eigenvalues=tuple(values),
        projections=tuple(projs),
        ranks=tuple(ranks),
        cluster_tol=cluster_tol,
        cluster_residual=residual_norm(h - approx),
    )


def partial_trace_first(rho: np.ndarray, d1: int, d2: int) -> np.ndarray:
    """Trace out the first tensor factor of an operator on ``C^d1 ⊗ C^d2``."""
    r = np.asarray(rho).reshape(d1, d2, d1, d2)
    return np.einsum("ajak->jk", r)


def matrix_power(a: np.ndarray, n: int) -> np.ndarray:
    """Integer power; negative powers use the inverse (adjoint for unitaries)."""
    a = np.asarray(a, dtype=np.complex128)
    if n >= 0:
        return np.linalg.matrix_power(a, n)
    return np.linalg.matrix_power(np.linalg.inv(a), -n)


# random instances --------------------------------------------------------


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random unitary via QR of a complex Ginibre matrix."""
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    q = q * (d / np.abs(d))
    return _frozen(q)


def random_hermitian(dim: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    return _frozen(0.5 * (z + dagger(z)))


def random_density(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Random density matrix ``GG†/tr(GG†)`` with ``G`` of shape ``dim × rank``."""
    k = dim if rank is None else rank
    g = rng.standard_normal((dim, k)) + 1j * rng.standard_normal((dim, k))
    rho = g @ dagger(g)
    return _frozen(rho / np.trace(rho).real)


def random_anti_hermitian(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Anti-Hermitian matrix with operator norm exactly 1."""
    h = random_hermitian(dim, rng)
    return _frozen(1j * h / operator_norm(h))
