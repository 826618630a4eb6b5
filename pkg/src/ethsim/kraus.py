"""Kraus operators of an atom/field interaction unitary.

The interaction ``U`` acts on ``C^N ⊗ C^M`` with the field factor first, so the
composite index ``(α, i)`` maps to ``α·M + i``. Field basis vectors are the
standard basis of ``C^N`` and slot 0 is the vacuum. Indices are 0-based here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .matcore import DEFAULT_TOL, as_unitary, dagger, operator_norm


@dataclass(frozen=True)
class KrausFamily:
    """Kraus operators ``L[α, ℓ]`` (each ``M × M``) extracted from a unitary.

    ``ops`` has shape ``(N, N, M, M)`` and is read-only. For fixed input field
    index ``ℓ`` the operators ``ops[:, ℓ]`` form a trace-preserving family.
    """

    field_dim: int
    atom_dim: int
    ops: np.ndarray

    def __post_init__(self):
        n, m = self.field_dim, self.atom_dim
        if self.ops.shape != (n, n, m, m):
            raise ValidationError(f"Kraus array shape {self.ops.shape} != {(n, n, m, m)}")

    def for_input(self, ell: int) -> np.ndarray:
        """The ``N`` operators ``{L[α, ell]}_α`` as an ``(N, M, M)`` array."""
        if not 0 <= ell < self.field_dim:
            raise ValidationError(f"field index {ell} out of range 0..{self.field_dim - 1}")
        return self.ops[:, ell]


def kraus_from_unitary(u, field_dim: int, atom_dim: int, tol: float = DEFAULT_TOL) -> KrausFamily:
    """Block-extract ``L[α, ℓ][i, j] = U[(α, i), (ℓ, j)]``.

    Raises:
        ValidationError: on a dimension mismatch or if ``U`` is not unitary.
    """
    u = np.asarray(u)
    dim = field_dim * atom_dim
    if u.shape != (dim, dim):
        raise ValidationError(
            f"interaction unitary has shape {u.shape}, expected {(dim, dim)} for N={field_dim}, M={atom_dim}"
        )
    u = as_unitary(u, tol, name="interaction unitary")
    ops = u.reshape(field_dim, atom_dim, field_dim, atom_dim).transpose(0, 2, 1, 3).copy()
    ops.setflags(write=False)
    return KrausFamily(field_dim, atom_dim, ops)


def verify_sum_rule(family: KrausFamily) -> np.ndarray:
    """Per-input residuals ``‖Σ_α L[α,ℓ]† L[α,ℓ] − 1‖_op`` for every ℓ."""
    eye = np.eye(family.atom_dim)
    out = np.empty(family.field_dim)
    for ell in range(family.field_dim):
        ls = family.ops[:, ell]
        s = np.einsum("aji,ajk->ik", ls.conj(), ls)
        out[ell] = operator_norm(s - eye)
    return out


def apply_single_kraus(family: KrausFamily, ell: int, v: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """One step of the atom channel: ``Σ_α V L[α,ℓ] ρ L[α,ℓ]† V†``."""
    ls = family.for_input(ell)
    rho = np.asarray(rho)
    if rho.shape != (family.atom_dim, family.atom_dim):
        raise ValidationError(f"state has shape {rho.shape}, expected atom dimension {family.atom_dim}")
    vl = np.einsum("ij,ajk->aik", v, ls)
    out = np.einsum("aij,jk,alk->il", vl, rho, vl.conj())
    return 0.5 * (out + dagger(out))
