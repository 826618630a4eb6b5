"""Pre-collapse evolution of the atom and its dense tensor-chain oracle.

Two independent routes compute the same expectation values:

* the reduced route (:func:`chain_pre_collapse`, :func:`heisenberg_expectation`)
  only ever touches ``M × M`` atom matrices and the Kraus operators;
* the oracle route (:class:`TruncatedChain`, :func:`tensor_oracle_expectation`)
  keeps every field slice that has interacted with the atom and applies the
  slice interactions ``U_j = (1⊗V^{1−j}) U (1⊗V^{j−1})`` as dense operators.

Conventions: in one step the interaction ``U`` acts first and the free atom
propagator ``V`` second, and step ``j`` (1-based) consumes field index
``k[j−1]``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ResourceCapError, ValidationError
from .kraus import KrausFamily, apply_single_kraus
from .matcore import dagger, kron, matrix_power

DEFAULT_ORACLE_CAP = 4096

CONVENTIONS = {
    "interaction_order": "U then V",
    "field_index_per_step": "step j consumes k[j-1]",
    "index_origin": "field slots 0-based (slot 0 = vacuum); branch labels 1-based in outputs",
    "tensor_ordering": "field first",
}


def oracle_cap() -> int:
    """Dimension cap for dense oracle chains (env ``ETHSIM_MAX_DIM``)."""
    raw = os.environ.get("ETHSIM_MAX_DIM")
    if not raw:
        return DEFAULT_ORACLE_CAP
    try:
        return int(raw)
    except ValueError as exc:
        raise ValidationError(f"ETHSIM_MAX_DIM must be an integer, got {raw!r}") from exc


@dataclass(frozen=True)
class FieldSequence:
    """Field basis labels ``k_j`` for slots ``0 .. horizon−1``.

    Slots at or beyond ``len(entries)`` are vacuum. ``horizon`` bounds how many
    steps may be taken and defaults to ``len(entries)``.
    """

    entries: tuple[int, ...]
    field_dim: int
    horizon: int = -1

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(int(k) for k in self.entries))
        if self.horizon < 0:
            object.__setattr__(self, "horizon", len(self.entries))
        for j, k in enumerate(self.entries):
            if not 0 <= k < self.field_dim:
                raise ValidationError(f"field index k[{j}]={k} out of range 0..{self.field_dim - 1}")

    @classmethod
    def vacuum(cls, field_dim: int, horizon: int) -> "FieldSequence":
        return cls((), field_dim, horizon)

    def __getitem__(self, j: int) -> int:
        if j < 0:
            raise IndexError(j)
        return self.entries[j] if j < len(self.entries) else 0

    def shifted(self, n: int) -> "FieldSequence":
        return FieldSequence(self.entries[n:], self.field_dim, max(self.horizon - n, 0))

    def window(self, start: int, stop: int) -> list[int]:
        return [self[j] for j in range(start, stop)]


@dataclass(frozen=True)
class SliceObservable:
    """Product field observable ``⊗_j F_j`` on slots ``[start, start+len(factors))``.

    Slots outside the support carry the identity.
    """

    start: int
    factors: tuple[np.ndarray, ...] = field(default_factory=tuple)

    @classmethod
    def identity(cls) -> "SliceObservable":
        return cls(0, ())

    @property
    def stop(self) -> int:
        return self.start + len(self.factors)

    def basis_value(self, labels: Sequence[int]) -> complex:
        """``⟨Φ, F Φ⟩`` for the product basis vector with the given slot labels."""
        val = 1.0 + 0.0j
        for f, k in zip(self.factors, labels):
            val *= complex(np.asarray(f)[k, k])
        return val


def _check_steps(fseq: FieldSequence, n: int) -> None:
    if n < 0:
        raise ValidationError("number of steps must be non-negative")
    if n > fseq.horizon:
        raise ValidationError(f"{n} steps exceed field-sequence horizon {fseq.horizon}")


def step_pre_collapse(rho: np.ndarray, k_prev: int, family: KrausFamily, v: np.ndarray) -> np.ndarray:
    """One step of the quantum Markov chain, ``Ω̂_n = Σ_α V L[α,k] Ω L[α,k]† V†``."""
    return apply_single_kraus(family, k_prev, v, rho)


def chain_pre_collapse(
    rho0: np.ndarray, fseq: FieldSequence, family: KrausFamily, v: np.ndarray, n: int
) -> np.ndarray:
    """Compose ``n`` pre-collapse steps; step ``j`` consumes ``k[j−1]``."""
    _check_steps(fseq, n)
    rho = np.array(rho0, dtype=np.complex128)
    for j in range(n):
        rho = step_pre_collapse(rho, fseq[j], family, v)
    return rho


def heisenberg_expectation(
    obs: SliceObservable,
    c: np.ndarray,
    rho0: np.ndarray,
    fseq: FieldSequence,
    family: KrausFamily,
    v: np.ndarray,
    n: int,
) -> complex:
    """Expectation of ``Γ^{−n}(F⊗C)Γ^n`` in the initial state ``P_k ⊗ Ω_0``.

    Equals the field factor ``⟨Φ_{σⁿ(k)}, F Φ_{σⁿ(k)}⟩`` times
    ``tr(Ω̂_n C)`` with ``Ω̂_n`` the pre-collapse chain state.
    """
    rho_n = chain_pre_collapse(rho0, fseq, family, v, n)
    labels = fseq.window(n + obs.start, n + obs.stop)
    return obs.basis_value(labels) * complex(np.trace(rho_n @ np.asarray(c)))


class TruncatedChain:
    """Purified state of ``S`` field slices plus the atom.

    The amplitude array has shape ``(N,)*S + (M, M)``; the last axis is a
    purifying ancilla, so the full density matrix is ``ΨΨ†`` with ``Ψ`` the
    ``(N^S·M) × M`` reshaping. Operators are applied in the interaction frame
    that strips the free propagator ``Γ_0^n`` (field shift and ``V``).
    """

    def __init__(self, labels: Sequence[int], field_dim: int, rho0: np.ndarray, max_dim: int | None = None):
        rho0 = np.asarray(rho0, dtype=np.complex128)
        self.field_dim = field_dim
        self.atom_dim = rho0.shape[0]
        self.slices = len(labels)
        cap = oracle_cap() if max_dim is None else max_dim
        dim = field_dim**self.slices * self.atom_dim
        if dim > cap:
            raise ResourceCapError(f"oracle chain dimension {dim} exceeds cap {cap} (ETHSIM_MAX_DIM)")
        w, vecs = np.linalg.eigh(0.5 * (rho0 + dagger(rho0)))
        root = (vecs * np.sqrt(np.clip(w, 0.0, None))) @ dagger(vecs)
        field_vec = np.zeros((field_dim,) * self.slices, dtype=np.complex128)
        field_vec[tuple(labels)] = 1.0
        self.psi = np.multiply.outer(field_vec, root)

    @property
    def dimension(self) -> int:
        return self.field_dim**self.slices * self.atom_dim

    def _apply(self, op: np.ndarray, slot: int | None) -> np.ndarray:
        """Return ``op`` applied to (slot, atom) or to the atom alone."""
        s = self.slices
        if slot is None:
            return np.einsum("ij,...jb->...ib", op, self.psi)
        n, m = self.field_dim, self.atom_dim
        t = np.moveaxis(self.psi, (slot, s), (0, 1))
        shape = t.shape
        t = (np.asarray(op) @ t.reshape(n * m, -1)).reshape(shape)
        return np.moveaxis(t, (0, 1), (slot, s))

    def apply_interaction(self, j: int, u: np.ndarray, v: np.ndarray) -> None:
        """Apply ``U_j`` (1-based ``j``): ``U`` on slice ``j−1`` conjugated by ``V^{j−1}`` on the atom."""
        eye = np.eye(self.field_dim)
        w = kron(eye, matrix_power(v, 1 - j)) @ np.asarray(u) @ kron(eye, matrix_power(v, j - 1))
        self.psi = self._apply(w, j - 1)

    def apply_atom(self, op: np.ndarray) -> None:
        self.psi = self._apply(np.asarray(op), None)

    def apply_field(self, op: np.ndarray, slot: int) -> None:
        self.psi = np.moveaxis(np.tensordot(np.asarray(op), self.psi, axes=([1], [slot])), 0, slot)

    def norm_squared(self) -> float:
        return float(np.vdot(self.psi, self.psi).real)

    def expectation(self, obs: SliceObservable, shift: int, c: np.ndarray) -> complex:
        """``tr(ΨΨ† · (F shifted by `shift`) ⊗ C)``."""
        phi = self.psi
        for i, f in enumerate(obs.factors):
            slot = obs.start + shift + i
            phi = np.moveaxis(np.tensordot(np.asarray(f), phi, axes=([1], [slot])), 0, slot)
        phi = np.einsum("ij,...jb->...ib", np.asarray(c), phi)
        return complex(np.vdot(self.psi, phi))

    def reduced_atom(self) -> np.ndarray:
        m = self.atom_dim
        p = self.psi.reshape(-1, m, m)
        return np.einsum("fib,fjb->ij", p, p.conj())

    def density(self) -> np.ndarray:
        """Full density matrix on ``(C^N)^{⊗S} ⊗ C^M`` (small chains only)."""
        p = self.psi.reshape(-1, self.atom_dim)
        return p @ dagger(p)


def tensor_oracle_expectation(
    obs: SliceObservable,
    c: np.ndarray,
    rho0: np.ndarray,
    fseq: FieldSequence,
    u: np.ndarray,
    v: np.ndarray,
    n: int,
    max_dim: int | None = None,
) -> complex:
    """Dense-chain evaluation of ``ω(Γ^{−n}(F⊗C)Γ^n)``; never touches Kraus operators.

    Uses ``Γ^n = Γ_0^n U(n)`` with ``U(n) = U_n ⋯ U_1``: the chain is evolved by
    the slice interactions and the observable is evaluated in the frame where
    ``Γ_0^{−n}(F⊗C)Γ_0^n = (F shifted by n) ⊗ V^{−n} C V^n``.
    """
    _check_steps(fseq, n)
    slices = max(n, n + obs.stop)
    chain = TruncatedChain(fseq.window(0, slices), fseq.field_dim, rho0, max_dim=max_dim)
    for j in range(1, n + 1):
        chain.apply_interaction(j, u, v)
    c_frame = matrix_power(v, -n) @ np.asarray(c) @ matrix_power(v, n)
    return chain.expectation(obs, n, c_frame)
