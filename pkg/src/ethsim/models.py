"""Concrete interaction models and the experiments built on them.

All models share the measurement-operator form ``U = Σ_m T^(m) ⊗ Q_m``: each
projection ``Q_m`` of a partition of unity on the atom selects a unitary
``T^(m)`` acting on the emitted field slice. The overlap ("G") matrix
``g^{ℓm} = ⟨T^(m)φ_k, T^(ℓ)φ_k⟩`` controls the regime: all-ones is unitary
atom evolution, the identity is full dephasing in the ``Q`` basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .collapse import collapse_from_pre, trajectory_rng
from .errors import InvariantError, ValidationError
from .evolve import step_pre_collapse
from .kraus import KrausFamily, kraus_from_unitary
from .matcore import (
    DEFAULT_TOL,
    as_projection,
    as_unitary,
    dagger,
    kron,
    operator_norm,
    projector,
    random_anti_hermitian,
    random_unitary,
)


@dataclass(frozen=True)
class MeasurementModel:
    """``U = Σ_m T^(m) ⊗ Q_m`` together with the free atom propagator ``V``."""

    field_unitaries: tuple[np.ndarray, ...]
    partition: tuple[np.ndarray, ...]
    v: np.ndarray
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        if len(self.field_unitaries) != len(self.partition):
            raise ValidationError(
                f"{len(self.field_unitaries)} field unitaries for {len(self.partition)} projections"
            )
        if not self.partition:
            raise ValidationError("partition of unity is empty")
        n = self.field_unitaries[0].shape[0]
        m = self.partition[0].shape[0]
        ts = tuple(as_unitary(t, self.tol, f"T[{i}]") for i, t in enumerate(self.field_unitaries))
        qs = tuple(as_projection(q, self.tol, f"Q[{i}]") for i, q in enumerate(self.partition))
        for i, t in enumerate(ts):
            if t.shape != (n, n):
                raise ValidationError(f"T[{i}] has shape {t.shape}, expected {(n, n)}")
        for i, q in enumerate(qs):
            if q.shape != (m, m):
                raise ValidationError(f"Q[{i}] has shape {q.shape}, expected {(m, m)}")
        for i in range(len(qs)):
            for j in range(i + 1, len(qs)):
                if operator_norm(qs[i] @ qs[j]) > self.tol:
                    raise ValidationError(f"Q[{i}] and Q[{j}] are not orthogonal")
        total = sum(qs)
        if operator_norm(total - np.eye(m)) > self.tol:
            raise ValidationError("projections Q do not sum to the identity")
        v = as_unitary(self.v, self.tol, "V")
        if v.shape != (m, m):
            raise ValidationError(f"V has shape {v.shape}, expected {(m, m)}")
        object.__setattr__(self, "field_unitaries", ts)
        object.__setattr__(self, "partition", qs)
        object.__setattr__(self, "v", v)

    @property
    def field_dim(self) -> int:
        return self.field_unitaries[0].shape[0]

    @property
    def atom_dim(self) -> int:
        return self.partition[0].shape[0]

    @property
    def n_outcomes(self) -> int:
        return len(self.partition)

    def unitary(self) -> np.ndarray:
        return build_measurement_unitary(self)

    def kraus(self) -> KrausFamily:
        return kraus_from_unitary(self.unitary(), self.field_dim, self.atom_dim, self.tol)


def build_measurement_unitary(model: MeasurementModel) -> np.ndarray:
    """``U = Σ_m T^(m) ⊗ Q_m`` on ``C^N ⊗ C^M`` (field first)."""
    u = sum(kron(t, q) for t, q in zip(model.field_unitaries, model.partition))
    return as_unitary(u, model.tol, "measurement unitary")


def kraus_from_model(model: MeasurementModel, ell: int) -> np.ndarray:
    """Closed form ``L[α, ℓ] = Σ_m ⟨φ_α, T^(m) φ_ℓ⟩ Q_m`` as an ``(N, M, M)`` array."""
    coeffs = np.array([t[:, ell] for t in model.field_unitaries])  # (L, N)
    return np.einsum("ma,mij->aij", coeffs, np.array(model.partition))


@dataclass(frozen=True)
class GMatrix:
    """Overlap matrix ``G[ℓ, m] = ⟨T^(m)φ_k, T^(ℓ)φ_k⟩`` and its diagonalisation.

    ``eigenvalues`` are descending and ``D[:, r]`` is the eigenvector of
    ``eigenvalues[r]``, so that ``G = D diag(γ) D†``.
    """

    slot_label: int
    g: np.ndarray
    eigenvalues: np.ndarray
    d: np.ndarray

    def check(self, field_dim: int, tol: float = 1e-10) -> None:
        """Verify Hermiticity, unit diagonal, PSD, trace and forced null space."""
        size = self.g.shape[0]
        checks = {
            "G hermitian": operator_norm(self.g - dagger(self.g)),
            "G unit diagonal": float(np.max(np.abs(np.diag(self.g) - 1.0))),
            "G positive semidefinite": max(0.0, -float(self.eigenvalues[-1])),
            "G eigenvalue sum": abs(float(np.sum(self.eigenvalues)) - size),
        }
        for name, res in checks.items():
            if res > tol:
                raise InvariantError(name, res, tol)
        if size > field_dim:
            small = int(np.sum(np.abs(self.eigenvalues) <= tol))
            if small < size - field_dim:
                raise InvariantError(
                    "G null space", float(sorted(np.abs(self.eigenvalues))[size - field_dim - 1]), tol,
                    f"expected at least {size - field_dim} vanishing eigenvalues",
                )


def _diagonalise(g: np.ndarray, label: int) -> GMatrix:
    w, d = np.linalg.eigh(0.5 * (g + dagger(g)))
    order = np.argsort(-w, kind="stable")
    return GMatrix(label, g, w[order], d[:, order])


def g_matrix_at(model: MeasurementModel, k: int) -> GMatrix:
    """Overlap matrix for a pure field slice in basis state ``φ_k``."""
    if not 0 <= k < model.field_dim:
        raise ValidationError(f"field index {k} out of range 0..{model.field_dim - 1}")
    imgs = np.array([t[:, k] for t in model.field_unitaries])  # row m = T^(m) φ_k
    g = imgs @ imgs.conj().T
    return _diagonalise(g, k)


def double_sum_step(g: np.ndarray, partition: Sequence[np.ndarray], v: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``Σ_{ℓ,m} g^{ℓm} V Q_ℓ Ω Q_m V†``."""
    qs = np.array(partition)
    inner = np.einsum("lm,lij,jk,mkn->in", g, qs, rho, qs)
    return v @ inner @ dagger(v)


def diagonal_form_step(gm: GMatrix, partition: Sequence[np.ndarray], v: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``Σ_r γ_r V K_r Ω K_r† V†`` with ``K_r = Σ_m D[m, r] Q_m``."""
    qs = np.array(partition)
    ks = np.einsum("mr,mij->rij", gm.d, qs)
    out = np.einsum("r,rij,jk,rlk->il", gm.eigenvalues, ks, rho, ks.conj())
    return v @ out @ dagger(v)


@dataclass(frozen=True)
class StepViaG:
    double_sum: np.ndarray
    diagonal_form: np.ndarray
    kraus_path: np.ndarray

    def discrepancies(self) -> dict[str, float]:
        return {
            "double_sum_vs_diagonal": operator_norm(self.double_sum - self.diagonal_form),
            "double_sum_vs_kraus": operator_norm(self.double_sum - self.kraus_path),
            "diagonal_vs_kraus": operator_norm(self.diagonal_form - self.kraus_path),
        }

    @property
    def state(self) -> np.ndarray:
        return self.double_sum


def step_via_g(model: MeasurementModel, rho: np.ndarray, k_prev: int, family: KrausFamily | None = None) -> StepViaG:
    """One pre-collapse step computed three ways (double sum, diagonal form, Kraus)."""
    gm = g_matrix_at(model, k_prev)
    family = model.kraus() if family is None else family
    return StepViaG(
        double_sum=double_sum_step(gm.g, model.partition, model.v, rho),
        diagonal_form=diagonal_form_step(gm, model.partition, model.v, rho),
        kraus_path=step_pre_collapse(rho, k_prev, family, model.v),
    )


# regimes -------------------------------------------------------------------


def standard_partition(atom_dim: int, blocks: Sequence[Sequence[int]] | None = None) -> tuple[np.ndarray, ...]:
    """Diagonal partition of unity; ``blocks`` lists basis indices per projection."""
    if blocks is None:
        blocks = [[i] for i in range(atom_dim)]
    eye = np.eye(atom_dim)
    return tuple(projector(eye[:, list(b)]) for b in blocks)


def weak_coupling_model(
    field_dim: int,
    partition: Sequence[np.ndarray],
    v: np.ndarray,
    eps: float,
    generators: Sequence[np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
) -> MeasurementModel:
    """``T^(m) = exp(ε σ^(m))`` with anti-Hermitian ``σ^(m)``, ``‖σ^(m)‖ ≤ 1``.

    ``generators`` may be arbitrary matrices ``τ^(m)`` of norm at most one;
    their anti-Hermitian parts are used. Otherwise they are drawn from ``rng``.
    """
    if not 0.0 <= eps < 1.0:
        raise ValidationError(f"weak coupling needs 0 <= eps < 1, got {eps}")
    n_out = len(partition)
    if generators is None:
        rng = np.random.default_rng() if rng is None else rng
        sigmas = [random_anti_hermitian(field_dim, rng) for _ in range(n_out)]
    else:
        if len(generators) != n_out:
            raise ValidationError(f"{len(generators)} generators for {n_out} projections")
        sigmas = []
        for i, tau in enumerate(generators):
            tau = np.asarray(tau, dtype=np.complex128)
            if operator_norm(tau) > 1.0 + 1e-12:
                raise ValidationError(f"generator tau[{i}] has norm > 1")
            sigmas.append(0.5 * (tau - dagger(tau)))
    ts = tuple(expm(eps * s) for s in sigmas)
    return MeasurementModel(ts, tuple(partition), v)


@dataclass
class WeakSweep:
    eps: np.ndarray
    deviations: np.ndarray

    @property
    def slope(self) -> float:
        """Least-squares slope of ``log deviation`` against ``log ε``."""
        return float(np.polyfit(np.log(self.eps), np.log(self.deviations), 1)[0])


def weak_coupling_sweep(
    field_dim: int,
    partition: Sequence[np.ndarray],
    v: np.ndarray,
    rho: np.ndarray,
    eps_values: Sequence[float],
    rng: np.random.Generator,
    field_index: int = 0,
) -> WeakSweep:
    """``‖Ω̂_1 − VΩV†‖_op`` for each ``ε`` with one fixed set of generators."""
    sigmas = [random_anti_hermitian(field_dim, rng) for _ in partition]
    rho = np.asarray(rho, dtype=np.complex128)
    free = v @ rho @ dagger(v)
    devs = []
    for eps in eps_values:
        model = weak_coupling_model(field_dim, partition, v, eps, generators=sigmas)
        pre = step_pre_collapse(rho, field_index, model.kraus(), model.v)
        devs.append(operator_norm(pre - free))
    return WeakSweep(np.asarray(eps_values, dtype=float), np.asarray(devs))


def _swap_permutation(dim: int, a: int, b: int) -> np.ndarray:
    p = np.eye(dim, dtype=np.complex128)
    p[[a, b]] = p[[b, a]]
    return p


def strong_coupling_model(
    field_dim: int,
    v: np.ndarray,
    eps: float,
    rng: np.random.Generator,
    basis: np.ndarray | None = None,
) -> MeasurementModel:
    """Rank-one partition ``Q_m = |ψ_m⟩⟨ψ_m|`` with nearly orthogonal field images.

    ``T^(m) = W P_m exp(ε σ^(m))`` where ``W`` is Haar random and ``P_m``
    swaps ``φ_0`` and ``φ_m``, so the vectors ``T^(m) φ_0`` are orthonormal
    at ``ε = 0`` and ``g_0 = 1 + O(ε)``. Requires ``N ≥ M``.
    """
    m = np.asarray(v).shape[0]
    if field_dim < m:
        raise ValidationError(f"strong coupling needs N >= M (got N={field_dim}, M={m})")
    if not 0.0 <= eps < 1.0:
        raise ValidationError(f"strong coupling needs 0 <= eps < 1, got {eps}")
    basis = np.eye(m, dtype=np.complex128) if basis is None else np.asarray(basis, dtype=np.complex128)
    w = random_unitary(field_dim, rng)
    ts = tuple(
        w @ _swap_permutation(field_dim, 0, i) @ expm(eps * random_anti_hermitian(field_dim, rng))
        for i in range(m)
    )
    qs = tuple(projector(basis[:, i]) for i in range(m))
    return MeasurementModel(ts, qs, v)


@dataclass(frozen=True)
class ClassicalChain:
    """Markov chain with ``P[ℓ, m]`` = probability of ``m → ℓ`` (columns sum to one)."""

    transition: np.ndarray
    distribution: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        mu = np.asarray(self.distribution, dtype=float)
        if np.any(p < -1e-15):
            raise ValidationError("transition matrix has negative entries")
        if mu.shape != (p.shape[0],) or np.any(mu < -1e-15) or abs(mu.sum() - 1.0) > 1e-12:
            raise ValidationError("distribution must be a probability vector")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "distribution", mu)

    def doubly_stochastic_residual(self) -> float:
        p = self.transition
        return float(max(np.max(np.abs(p.sum(axis=0) - 1)), np.max(np.abs(p.sum(axis=1) - 1))))

    def step(self, mu: np.ndarray | None = None) -> np.ndarray:
        """``μ_n(ℓ) = Σ_m P(ℓ, m) μ_{n−1}(m)``."""
        mu = self.distribution if mu is None else mu
        return self.transition @ mu

    def distributions(self, n: int) -> np.ndarray:
        """Rows ``μ_0 … μ_n``."""
        out = [self.distribution]
        for _ in range(n):
            out.append(self.step(out[-1]))
        return np.array(out)


def classical_transition(v: np.ndarray, basis: np.ndarray, distribution=None, tol: float = DEFAULT_TOL) -> ClassicalChain:
    """``P(ℓ, m) = |⟨ψ_ℓ, V ψ_m⟩|²`` for the orthonormal columns ``ψ`` of ``basis``."""
    b = np.asarray(basis, dtype=np.complex128)
    if operator_norm(dagger(b) @ b - np.eye(b.shape[1])) > tol or b.shape[0] != b.shape[1]:
        raise ValidationError("basis is not orthonormal and complete")
    p = np.abs(dagger(b) @ np.asarray(v) @ b) ** 2
    m = b.shape[1]
    mu = np.full(m, 1.0 / m) if distribution is None else np.asarray(distribution, dtype=float)
    return ClassicalChain(p, mu)


@dataclass
class StrongCouplingResult:
    """Outcome of :func:`strong_coupling_compare`.

    ``occupation[n]`` is the empirical label histogram after step ``n+1`` and
    ``predicted[n]`` the classical distribution it is compared with.
    """

    tv_distances: np.ndarray
    occupation: np.ndarray
    predicted: np.ndarray
    transitions: np.ndarray
    ambiguous: int
    trials: int
    chain: ClassicalChain
    labels: np.ndarray = field(repr=False)


def classify_rank_one(rho: np.ndarray, frame: Sequence[np.ndarray], threshold: float = 0.1) -> int:
    """Index of the nearest projector in ``frame`` (operator norm); −1 if all are farther than ``threshold``."""
    # both are Hermitian, so the operator norm is the largest |eigenvalue|
    dists = [float(np.max(np.abs(np.linalg.eigvalsh(rho - p)))) for p in frame]
    best = int(np.argmin(dists))
    return best if dists[best] <= threshold else -1


def strong_coupling_compare(
    model: MeasurementModel,
    basis: np.ndarray,
    initial_distribution: Sequence[float],
    steps: int,
    trials: int,
    seed: int,
    threshold: float = 0.1,
    field_index: int = 0,
) -> StrongCouplingResult:
    """Compare collapse trajectories with the classical chain ``P = |⟨ψ_ℓ,Vψ_m⟩|²``.

    The initial atom state is ``Σ_m μ_0(m) |ψ_m⟩⟨ψ_m|``. Since ``V`` acts after
    the dephasing slice, the post-collapse state after step ``n`` is close to
    ``V|ψ_ℓ⟩⟨ψ_ℓ|V†``; its label ``ℓ`` is read off against that rotated frame
    and compared with ``μ_{n−1}`` from the classical recursion.
    """
    mu0 = np.asarray(initial_distribution, dtype=float)
    chain = classical_transition(model.v, basis, mu0)
    b = np.asarray(basis, dtype=np.complex128)
    frame = [model.v @ projector(b[:, i]) @ dagger(model.v) for i in range(b.shape[1])]
    rho0 = (b * mu0) @ dagger(b)
    family = model.kraus()
    m = b.shape[1]
    labels = np.full((trials, steps), -1, dtype=int)
    for t in range(trials):
        rng = trajectory_rng(seed, t)
        rho = rho0
        for n in range(steps):
            pre = step_pre_collapse(rho, field_index, family, model.v)
            st = collapse_from_pre(pre, rng, n + 1, field_index)
            rho = st.post_collapse
            labels[t, n] = classify_rank_one(rho, frame, threshold)
    occupation = np.zeros((steps, m))
    for n in range(steps):
        valid = labels[:, n][labels[:, n] >= 0]
        occupation[n] = np.bincount(valid, minlength=m) / trials
    predicted = chain.distributions(max(steps - 1, 0))[:steps]
    tv = 0.5 * np.abs(occupation - predicted).sum(axis=1) if steps else np.zeros(0)
    transitions = np.zeros((m, m), dtype=int)  # transitions[ℓ, m]: label m then ℓ
    for n in range(1, steps):
        a, bb = labels[:, n - 1], labels[:, n]
        ok = (a >= 0) & (bb >= 0)
        np.add.at(transitions, (bb[ok], a[ok]), 1)
    return StrongCouplingResult(
        tv_distances=tv,
        occupation=occupation,
        predicted=predicted,
        transitions=transitions,
        ambiguous=int(np.sum(labels < 0)),
        trials=trials,
        chain=chain,
        labels=labels,
    )


# detector -------------------------------------------------------------------


@dataclass(frozen=True)
class DetectorScenario:
    """Atom space ``h^w ⊕ h^s`` with a slow leak from ``h^w`` into ``h^s``.

    ``Q_1..Q_J`` live in ``h^w`` (first ``weak_dim`` basis vectors) and are
    almost uncoupled (``G`` block all-ones); ``Q_{J+1}..Q_L`` are the rank-one
    basis projections of ``h^s`` and strongly coupled (``G`` block identity).
    ``V = V_0 exp(δ A)`` with ``V_0 = V_w ⊕ 1`` and ``A`` mixing the two
    blocks, so ``‖V − V_0‖ ≤ δ``.
    """

    model: MeasurementModel
    weak_dim: int
    split: int
    delta: float
    eps: float
    v0: np.ndarray

    @property
    def strong_projection(self) -> np.ndarray:
        m = self.model.atom_dim
        d = np.zeros(m)
        d[self.weak_dim:] = 1.0
        return np.diag(d).astype(np.complex128)

    def g_perturbation(self, k: int = 0) -> float:
        """``‖G(k) − G_0‖_op``."""
        g = g_matrix_at(self.model, k).g
        j, size = self.split, self.model.n_outcomes
        g0 = np.eye(size, dtype=np.complex128)
        g0[:j, :j] = 1.0
        return operator_norm(g - g0)

    def dv_norm(self) -> float:
        return operator_norm(self.model.v - self.v0)


def detector_scenario(
    field_dim: int,
    weak_dim: int,
    strong_dim: int,
    split: int,
    delta: float,
    eps: float,
    rng: np.random.Generator,
) -> DetectorScenario:
    """Build a detector model; the weak block is split into ``split`` projections."""
    m = weak_dim + strong_dim
    if not 1 <= split <= weak_dim:
        raise ValidationError(f"split J={split} must be in 1..{weak_dim}")
    if strong_dim < 1:
        raise ValidationError("strong subspace must be non-empty")
    if field_dim < strong_dim + 1:
        raise ValidationError(f"detector needs N >= {strong_dim + 1}")
    if delta < 0 or eps < 0:
        raise ValidationError("delta and eps must be non-negative")
    blocks = [list(b) for b in np.array_split(np.arange(weak_dim), split)]
    blocks += [[weak_dim + i] for i in range(strong_dim)]
    qs = standard_partition(m, blocks)
    n_out = len(qs)
    scale = eps / (2.0 * n_out)  # keeps ‖G − G_0‖ ≤ eps
    ts = []
    for i in range(n_out):
        gen = expm(scale * random_anti_hermitian(field_dim, rng))
        if i < split:
            ts.append(gen)
        else:
            ts.append(_swap_permutation(field_dim, 0, i - split + 1) @ gen)

    v0 = np.eye(m, dtype=np.complex128)
    v0[:weak_dim, :weak_dim] = random_unitary(weak_dim, rng)
    b = random_unitary(max(weak_dim, strong_dim), rng)[:strong_dim, :weak_dim]
    b = b / max(operator_norm(b), 1e-300)
    a = np.zeros((m, m), dtype=np.complex128)
    a[weak_dim:, :weak_dim] = b
    a[:weak_dim, weak_dim:] = -dagger(b)
    v = v0 @ expm(delta * a)
    model = MeasurementModel(tuple(ts), qs, v)
    sc = DetectorScenario(model, weak_dim, split, delta, eps, v0)
    if sc.dv_norm() > delta + 1e-12:
        raise InvariantError("‖ΔV‖ ≤ δ", sc.dv_norm(), delta)
    if sc.g_perturbation() > eps + 1e-12:
        raise InvariantError("‖ΔG‖ ≤ ε", sc.g_perturbation(), eps)
    return sc


@dataclass
class ClickResult:
    """Per-trajectory click times (``None`` when censored) and post-click dwell."""

    click_times: list[int | None]
    dwell_times: list[int | None]
    dwell_censored: list[bool]
    horizon: int
    threshold: float

    @property
    def clicks(self) -> list[int]:
        return [t for t in self.click_times if t is not None]

    @property
    def censored(self) -> int:
        return sum(t is None for t in self.click_times)

    def median_click_time(self) -> float:
        """Median over all trajectories, censored ones counted as ``> horizon``."""
        vals = sorted(self.horizon + 1 if t is None else t for t in self.click_times)
        if not vals:
            return math.nan
        return float(np.median(vals))

    def dwell_fraction(self, min_steps: float) -> float:
        """Fraction of clicked trajectories whose dwell lasted at least ``min_steps``.

        Dwell runs cut off by the horizon before ``min_steps`` are undecided and
        excluded from the denominator.
        """
        ok = total = 0
        for d, cens in zip(self.dwell_times, self.dwell_censored):
            if d is None:
                continue
            if d >= min_steps:
                ok += 1
                total += 1
            elif not cens:
                total += 1
        return ok / total if total else math.nan


def detector_click_experiment(
    scenario: DetectorScenario,
    trials: int,
    seed: int,
    horizon: int,
    rho0: np.ndarray | None = None,
    click_threshold: float = 0.5,
    dwell_tol: float = 0.1,
    dwell_window: int | None = None,
) -> ClickResult:
    """Run collapse trajectories from ``h^w`` and record when the detector clicks.

    A click is the first step whose post-collapse state has
    ``tr(Ω_n Π_s) > click_threshold``. After a click the dwell time counts the
    consecutive steps whose state keeps ``tr(Ω Q_m) ≥ 1 − dwell_tol`` for the
    strong projection ``Q_m`` occupied at the click. Simulation of a trajectory
    stops once the dwell run ends or ``dwell_window`` post-click steps elapse.
    """
    model = scenario.model
    if rho0 is None:
        rho0 = np.zeros((model.atom_dim,) * 2, dtype=np.complex128)
        rho0[0, 0] = 1.0
    ps = scenario.strong_projection
    if abs(np.trace(rho0 @ ps)) > 1e-12:
        raise ValidationError("initial state must be supported in the weakly coupled subspace")
    strong_qs = model.partition[scenario.split:]
    family = model.kraus()
    clicks: list[int | None] = []
    dwells: list[int | None] = []
    dwell_cens: list[bool] = []
    for t in range(trials):
        rng = trajectory_rng(seed, t)
        rho = np.asarray(rho0, dtype=np.complex128)
        click = None
        which = -1
        dwell = 0
        cut = False
        n = 0
        while n < horizon:
            n += 1
            pre = step_pre_collapse(rho, 0, family, model.v)
            rho = collapse_from_pre(pre, rng, n, 0).post_collapse
            if click is None:
                if np.trace(rho @ ps).real > click_threshold:
                    click = n
                    overlaps = [np.trace(rho @ q).real for q in strong_qs]
                    which = int(np.argmax(overlaps))
                    dwell = 1 if overlaps[which] >= 1 - dwell_tol else 0
                    if dwell == 0:
                        break
            else:
                if np.trace(rho @ strong_qs[which]).real >= 1 - dwell_tol:
                    dwell += 1
                    if dwell_window is not None and dwell >= dwell_window:
                        break
                else:
                    break
        else:
            cut = click is not None
        clicks.append(click)
        dwells.append(dwell if click is not None else None)
        dwell_cens.append(cut)
    return ClickResult(clicks, dwells, dwell_cens, horizon, click_threshold)


# thermal environment ---------------------------------------------------------


@dataclass(frozen=True)
class ThermalEnvironment:
    """Per-slice field density ``Φ = Σ_k p_k P_k / tr P_k`` with ``p_1 > … > p_K > 0``."""

    projections: tuple[np.ndarray, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        ps = tuple(as_projection(p, DEFAULT_TOL, f"P[{i}]") for i, p in enumerate(self.projections))
        w = tuple(float(x) for x in self.weights)
        if len(ps) != len(w) or not ps:
            raise ValidationError("need one weight per projection")
        if any(x <= 0 for x in w) or any(w[i] <= w[i + 1] for i in range(len(w) - 1)):
            raise ValidationError("weights must be strictly decreasing and positive")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ValidationError("weights must sum to one")
        for i in range(len(ps)):
            for j in range(i + 1, len(ps)):
                if operator_norm(ps[i] @ ps[j]) > DEFAULT_TOL:
                    raise ValidationError(f"P[{i}] and P[{j}] are not orthogonal")
        object.__setattr__(self, "projections", ps)
        object.__setattr__(self, "weights", w)

    def density(self) -> np.ndarray:
        return sum(w * p / np.trace(p).real for w, p in zip(self.weights, self.projections))


def thermal_environment(field_dim: int, weights: Sequence[float], ranks: Sequence[int]) -> ThermalEnvironment:
    """Consecutive diagonal blocks of the given ranks, starting at ``φ_0``."""
    if sum(ranks) > field_dim:
        raise ValidationError(f"ranks {list(ranks)} exceed field dimension {field_dim}")
    blocks, start = [], 0
    eye = np.eye(field_dim)
    for r in ranks:
        blocks.append(projector(eye[:, start:start + r]))
        start += r
    return ThermalEnvironment(tuple(blocks), tuple(weights))


def sample_field_block(env: ThermalEnvironment, rng: np.random.Generator) -> int:
    """Draw ``k`` with probability ``p_k`` (single uniform, inverse CDF)."""
    u = rng.random()
    acc = 0.0
    for k, p in enumerate(env.weights):
        acc += p
        if u < acc:
            return k
    return len(env.weights) - 1


def thermal_g_matrix(model: MeasurementModel, p: np.ndarray) -> GMatrix:
    """``g^{ℓm} = tr(T^(ℓ) P (T^(m))†) / tr P`` for a field-slice projection ``P``."""
    ts = np.array(model.field_unitaries)
    g = np.einsum("lab,bc,mac->lm", ts, p, ts.conj()) / np.trace(p).real
    gm = _diagonalise(g, -1)
    herm = operator_norm(g - dagger(g))
    if herm > 1e-12:
        raise InvariantError("thermal G hermitian", herm, 1e-12)
    return gm


def thermal_step(
    env: ThermalEnvironment, model: MeasurementModel, rho: np.ndarray, rng: np.random.Generator
) -> tuple[int, np.ndarray]:
    """Sample the slice block ``k`` and evolve ``Ω`` with the randomised overlap matrix."""
    k = sample_field_block(env, rng)
    gm = thermal_g_matrix(model, env.projections[k])
    return k, double_sum_step(gm.g, model.partition, model.v, np.asarray(rho))


def thermal_average_step(env: ThermalEnvironment, model: MeasurementModel, rho: np.ndarray) -> np.ndarray:
    """Expected pre-collapse state ``Σ_k p_k · (step with block k)``."""
    out = np.zeros_like(np.asarray(rho, dtype=np.complex128))
    for w, p in zip(env.weights, env.projections):
        out = out + w * double_sum_step(thermal_g_matrix(model, p).g, model.partition, model.v, rho)
    return out
