"""Histories: arrows between effective states, history trees and their measure.

An effective state is an atom density matrix together with a cursor into the
field sequence (the field part is the untouched tail ``Φ_{σⁿ(k)}``). Each arrow
evolves one step and collapses onto one spectral projection of the evolved
state, so a history is a branch sequence and its probability is the product of
conditional Born weights along the path. :func:`history_probability_oracle`
computes the same number as ``ω(H†H)`` on a dense field chain.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .collapse import center_of_centralizer
from .errors import InvariantError, ResourceCapError, ValidationError
from .evolve import FieldSequence, TruncatedChain, step_pre_collapse
from .kraus import KrausFamily
from .matcore import DEFAULT_CLUSTER_TOL, matrix_power

DEFAULT_PRUNE = 1e-9
DEFAULT_NODE_CAP = 200_000


@dataclass(frozen=True)
class EffectiveState:
    atom: np.ndarray
    cursor: int = 0

    def fingerprint(self, decimals: int = 10) -> str:
        """Short hash of the rounded atom matrix, stable across runs."""
        a = np.round(np.asarray(self.atom), decimals) + 0.0  # folds -0.0 into 0.0
        data = np.ascontiguousarray(np.stack([a.real, a.imag])).tobytes()
        return hashlib.sha256(data).hexdigest()[:16]


@dataclass(frozen=True)
class Arrow:
    branch: int
    successor: EffectiveState
    probability: float
    projection: np.ndarray


def arrows_from(
    state: EffectiveState,
    fseq: FieldSequence,
    family: KrausFamily,
    v: np.ndarray,
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
) -> list[Arrow]:
    """All arrows leaving ``state``: one per positive-weight branch of the evolved state."""
    if state.cursor >= fseq.horizon:
        raise ValidationError(f"cursor {state.cursor} at or beyond horizon {fseq.horizon}")
    pre = step_pre_collapse(state.atom, fseq[state.cursor], family, v)
    event = center_of_centralizer(pre, cluster_tol)
    return [
        Arrow(r, EffectiveState(event.collapsed_state(r), state.cursor + 1), event.probabilities[r], event.projections[r])
        for r in range(len(event))
    ]


@dataclass(frozen=True)
class HistoryNode:
    index: int
    parent: int  # -1 for the root
    depth: int
    branch: int  # -1 for the root
    conditional_probability: float
    probability: float
    state: EffectiveState
    pruned_child_mass: float = 0.0
    children: tuple[int, ...] = ()


@dataclass
class HistoryTree:
    nodes: list[HistoryNode]
    depth: int
    pruned_mass: list[float] = field(default_factory=list)  # cumulative pruned mass per depth
    prune_below: float = 0.0

    @property
    def root(self) -> HistoryNode:
        return self.nodes[0]

    def at_depth(self, d: int) -> list[HistoryNode]:
        return [n for n in self.nodes if n.depth == d]

    def leaves(self) -> list[HistoryNode]:
        return self.at_depth(self.depth)

    def path(self, node: HistoryNode) -> tuple[int, ...]:
        out = []
        while node.parent >= 0:
            out.append(node.branch)
            node = self.nodes[node.parent]
        return tuple(reversed(out))

    def leaf_distribution(self) -> dict[tuple[int, ...], float]:
        return {self.path(n): n.probability for n in self.leaves()}

    def mass_balance(self) -> list[float]:
        """``|retained + pruned − 1|`` at every depth."""
        return [
            abs(sum(n.probability for n in self.at_depth(d)) + self.pruned_mass[d] - 1.0)
            for d in range(self.depth + 1)
        ]

    def to_json(self) -> dict:
        return {
            "depth": self.depth,
            "prune_below": self.prune_below,
            "pruned_mass": list(self.pruned_mass),
            "nodes": [
                {
                    "index": n.index,
                    "parent": n.parent,
                    "depth": n.depth,
                    "branch": n.branch + 1 if n.branch >= 0 else None,
                    "conditional_probability": n.conditional_probability,
                    "probability": n.probability,
                    "cursor": n.state.cursor,
                    "fingerprint": n.state.fingerprint(),
                    "pruned_child_mass": n.pruned_child_mass,
                }
                for n in self.nodes
            ],
        }


def enumerate_tree(
    root: EffectiveState,
    fseq: FieldSequence,
    family: KrausFamily,
    v: np.ndarray,
    depth: int,
    prune_below: float = DEFAULT_PRUNE,
    max_nodes: int = DEFAULT_NODE_CAP,
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
) -> HistoryTree:
    """Breadth-first expansion of all histories up to ``depth``.

    Children whose cumulative probability is below ``prune_below`` are not
    kept; their mass is added to the parent's ``pruned_child_mass`` and to the
    per-depth pruned totals.
    """
    if depth < 0:
        raise ValidationError("depth must be non-negative")
    if root.cursor + depth > fseq.horizon:
        raise ValidationError(f"depth {depth} from cursor {root.cursor} exceeds horizon {fseq.horizon}")
    nodes: list[HistoryNode] = [HistoryNode(0, -1, 0, -1, 1.0, 1.0, root)]
    pruned = [0.0] * (depth + 1)
    queue = deque([0])
    while queue:
        i = queue.popleft()
        node = nodes[i]
        if node.depth == depth:
            continue
        kids, lost = [], 0.0
        for arrow in arrows_from(node.state, fseq, family, v, cluster_tol):
            p = node.probability * arrow.probability
            if p < prune_below:
                lost += p
                continue
            if len(nodes) >= max_nodes:
                raise ResourceCapError(f"history tree exceeds node cap {max_nodes}")
            child = HistoryNode(len(nodes), i, node.depth + 1, arrow.branch, arrow.probability, p, arrow.successor)
            nodes.append(child)
            kids.append(child.index)
            queue.append(child.index)
        nodes[i] = replace(node, pruned_child_mass=lost, children=tuple(kids))
        for d in range(node.depth + 1, depth + 1):
            pruned[d] += lost
    return HistoryTree(nodes, depth, pruned, prune_below)


def check_consistency(tree: HistoryTree) -> float:
    """Largest ``|Σ children + pruned − parent|`` over internal nodes (0 for depth 0)."""
    worst = 0.0
    for n in tree.nodes:
        if n.depth >= tree.depth:
            continue
        s = sum(tree.nodes[c].probability for c in n.children) + n.pruned_child_mass
        worst = max(worst, abs(s - n.probability))
    return worst


def _path_states(root, fseq, family, v, branches, cluster_tol):
    """Yield ``(pre-collapse state, projection or None, conditional probability)`` per step."""
    rho = np.asarray(root.atom, dtype=np.complex128)
    cursor = root.cursor
    for j, b in enumerate(branches):
        pre = step_pre_collapse(rho, fseq[cursor + j], family, v)
        if b is None:
            yield pre, None, 1.0
            rho = pre
            continue
        event = center_of_centralizer(pre, cluster_tol)
        if not 0 <= b < len(event):
            raise ValidationError(f"branch {b} at step {j + 1} not among {len(event)} available branches")
        yield pre, event.projections[b], event.probabilities[b]
        rho = event.collapsed_state(b)


def history_probability(
    root: EffectiveState,
    fseq: FieldSequence,
    family: KrausFamily,
    v: np.ndarray,
    branches: Sequence[int | None],
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
) -> float:
    """Product of conditional Born probabilities along ``branches``.

    A ``None`` entry stands for the identity projection: no collapse at that
    step and a factor of one.
    """
    if root.cursor + len(branches) > fseq.horizon:
        raise ValidationError("branch sequence runs past the field horizon")
    p = 1.0
    for _, _, cond in _path_states(root, fseq, family, v, branches, cluster_tol):
        p *= cond
    return p


def history_probability_oracle(
    root: EffectiveState,
    fseq: FieldSequence,
    u: np.ndarray,
    family: KrausFamily,
    v: np.ndarray,
    branches: Sequence[int | None],
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
    max_dim: int | None = None,
) -> float:
    """``ω(H†H)`` for the history operator of ``branches`` on a dense field chain.

    The projections are the spectral projections selected along the path (the
    history is defined by them), but the probability itself is the squared
    norm of ``π̃_r U_r ⋯ π̃_1 U_1 Ψ_0`` where ``π̃_j = V^{−j} Π_j V^j`` acts on
    the atom in the interaction frame.
    """
    tail = fseq.shifted(root.cursor)
    r = len(branches)
    projections = [p for _, p, _ in _path_states(root, fseq, family, v, branches, cluster_tol)]
    chain = TruncatedChain(tail.window(0, r), fseq.field_dim, root.atom, max_dim=max_dim)
    for j in range(1, r + 1):
        chain.apply_interaction(j, u, v)
        pj = projections[j - 1]
        if pj is not None:
            chain.apply_atom(matrix_power(v, -j) @ pj @ matrix_power(v, j))
    return chain.norm_squared()


def history_probability_checked(
    root: EffectiveState,
    fseq: FieldSequence,
    u: np.ndarray,
    family: KrausFamily,
    v: np.ndarray,
    branches: Sequence[int | None],
    tol: float = 1e-9,
    cluster_tol: float = DEFAULT_CLUSTER_TOL,
) -> tuple[float, float]:
    """Both routes; raises :class:`InvariantError` when they differ by more than ``tol``."""
    a = history_probability(root, fseq, family, v, branches, cluster_tol)
    b = history_probability_oracle(root, fseq, u, family, v, branches, cluster_tol)
    if abs(a - b) > tol:
        raise InvariantError("history path product equals ω(H†H)", abs(a - b), tol)
    return a, b
