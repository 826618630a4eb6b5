"""Collapse law: actual events, Born sampling and stochastic trajectories.

On a full matrix algebra the center of the centralizer of a faithful state is
generated by the spectral projections of its density matrix, so the actual
event of a state is its clustered spectral decomposition. A collapse replaces
``Ω̂`` by ``Π_r / tr Π_r`` with probability ``q_r · tr Π_r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantError, ValidationError
from .evolve import FieldSequence, step_pre_collapse
from .kraus import KrausFamily
from .matcore import DEFAULT_CLUSTER_TOL, hermitian_eigendecompose, residual_norm

ZERO_BRANCH_TOL = 1e-14
MIXTURE_TOL = 1e-12


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for trajectory ``index`` of an ensemble."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ActualEvent:
    """Spectral projections of a state with their Born probabilities.

    Branches are listed by descending eigenvalue. Branches whose Born weight
    fell below the zero threshold are removed and listed in ``dropped`` as
    ``(eigenvalue, rank, probability)`` triples.
    """

    eigenvalues: tuple[float, ...]
    projections: tuple[np.ndarray, ...]
    ranks: tuple[int, ...]
    probabilities: tuple[float, ...]
    dropped: tuple[tuple[float, int, float], ...] = ()
    cluster_residual: float = 0.0

    def __len__(self) -> int:
        return len(self.projections)

    def sampling_order(self) -> list[int]:
        # stable sort keeps descending-eigenvalue order among equal probabilities
        return sorted(range(len(self.probabilities)), key=lambda r: -self.probabilities[r])

    def collapsed_state(self, r: int) -> np.ndarray:
        return self.projections[r] / self.ranks[r]

    def mixture(self) -> np.ndarray:
        """``Σ_r prob(r) · Π_r / rank(Π_r)``."""
        out = np.zeros_like(self.projections[0])
        for p, r in zip(self.probabilities, range(len(self))):
            out = out + p * self.collapsed_state(r)
        return out


def center_of_centralizer(
    rho: np.ndarray,
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
    zero_tol: float = ZERO_BRANCH_TOL,
) -> ActualEvent:
    """Actual event of the density matrix ``rho``."""
    dec = hermitian_eigendecompose(rho, cluster_tol)
    kept, dropped = [], []
    for q, p, k in zip(dec.eigenvalues, dec.projections, dec.ranks):
        prob = q * k
        if prob < zero_tol:
            dropped.append((q, k, prob))
        else:
            kept.append((q, p, k, prob))
    if not kept:
        raise ValidationError("state has no branch with positive Born probability")
    total = sum(x[3] for x in kept)
    if abs(total - 1.0) > 1e-10:
        raise InvariantError("Born probabilities sum to one", abs(total - 1.0), 1e-10)
    return ActualEvent(
        eigenvalues=tuple(x[0] for x in kept),
        projections=tuple(x[1] for x in kept),
        ranks=tuple(x[2] for x in kept),
        probabilities=tuple(x[3] for x in kept),
        dropped=tuple(dropped),
        cluster_residual=dec.cluster_residual,
    )


def born_sample(event: ActualEvent, rng: np.random.Generator) -> tuple[int, float]:
    """Draw one branch by inverse CDF over descending probabilities.

    Exactly one uniform variate is consumed per call, including single-branch
    events, so streams stay aligned across scenarios.
    """
    u = rng.random()
    order = event.sampling_order()
    total = sum(event.probabilities)
    acc = 0.0
    for r in order:
        acc += event.probabilities[r] / total
        if u < acc:
            return r, event.probabilities[r]
    r = order[-1]
    return r, event.probabilities[r]


@dataclass(frozen=True)
class TrajectoryStep:
    step: int
    field_index: int
    pre_collapse: np.ndarray
    event_size: int
    branch: int
    born_probability: float
    post_collapse: np.ndarray
    eigenvalues: tuple[float, ...]
    probabilities: tuple[float, ...]
    dropped_mass: float
    mixture_residual: float


@dataclass
class Trajectory:
    seed: int
    index: int
    steps: list[TrajectoryStep] = field(default_factory=list)
    log_probability: float = 0.0

    @property
    def probability(self) -> float:
        return math.exp(self.log_probability)

    def branches(self) -> tuple[int, ...]:
        return tuple(s.branch for s in self.steps)


def collapse_from_pre(
    pre: np.ndarray,
    rng: np.random.Generator,
    step: int = 0,
    field_index: int = 0,
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
    mixture_tol: float = MIXTURE_TOL,
) -> TrajectoryStep:
    """Apply the collapse law to an already evolved state ``Ω̂``."""
    event = center_of_centralizer(pre, cluster_tol)
    residual = residual_norm(event.mixture() - pre)  # Frobenius ≥ operator norm
    if residual > mixture_tol:
        raise InvariantError("mixture identity", residual, mixture_tol, f"step {step}")
    r, prob = born_sample(event, rng)
    return TrajectoryStep(
        step=step,
        field_index=field_index,
        pre_collapse=pre,
        event_size=len(event),
        branch=r,
        born_probability=prob,
        post_collapse=event.collapsed_state(r),
        eigenvalues=event.eigenvalues,
        probabilities=event.probabilities,
        dropped_mass=float(sum(d[2] for d in event.dropped)),
        mixture_residual=residual,
    )


def collapse_step(
    rho_prev: np.ndarray,
    k_prev: int,
    family: KrausFamily,
    v: np.ndarray,
    rng: np.random.Generator,
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
    step: int = 1,
    mixture_tol: float = MIXTURE_TOL,
) -> TrajectoryStep:
    """Evolve one step, compute the actual event, sample and collapse."""
    pre = step_pre_collapse(rho_prev, k_prev, family, v)
    return collapse_from_pre(pre, rng, step, k_prev, cluster_tol, mixture_tol)


def run_trajectory(
    rho0: np.ndarray,
    fseq: FieldSequence,
    family: KrausFamily,
    v: np.ndarray,
    steps: int,
    seed: int,
    index: int = 0,
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
    mixture_tol: float = MIXTURE_TOL,
) -> Trajectory:
    """Sample one history of ``steps`` collapse steps from ``Ω_0``.

    The random stream is ``trajectory_rng(seed, index)``, so identical inputs
    give bitwise-identical trajectories.
    """
    if steps > fseq.horizon:
        raise ValidationError(f"{steps} steps exceed field-sequence horizon {fseq.horizon}")
    rng = trajectory_rng(seed, index)
    traj = Trajectory(seed=seed, index=index)
    rho = np.asarray(rho0, dtype=np.complex128)
    for n in range(1, steps + 1):
        st = collapse_step(rho, fseq[n - 1], family, v, rng, cluster_tol, n, mixture_tol)
        traj.steps.append(st)
        traj.log_probability += math.log(st.born_probability)
        rho = st.post_collapse
    return traj
