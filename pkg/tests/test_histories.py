import numpy as np
import pytest

from ethsim.errors import InvariantError, ResourceCapError, ValidationError
from ethsim.evolve import FieldSequence
from ethsim.histories import (
    EffectiveState,
    arrows_from,
    check_consistency,
    enumerate_tree,
    history_probability,
    history_probability_checked,
    history_probability_oracle,
)
from ethsim.kraus import kraus_from_unitary
from ethsim.matcore import random_density, random_unitary


def instance(rng, n=2, m=2, horizon=4):
    u = random_unitary(n * m, rng)
    v = random_unitary(m, rng)
    fseq = FieldSequence(tuple(int(x) for x in rng.integers(0, n, size=horizon)), n)
    return u, v, fseq, kraus_from_unitary(u, n, m)


def test_arrow_probabilities_sum_to_one(rng):
    u, v, fseq, fam = instance(rng)
    arrows = arrows_from(EffectiveState(random_density(2, rng)), fseq, fam, v)
    assert sum(a.probability for a in arrows) == pytest.approx(1.0, abs=1e-12)
    assert all(a.successor.cursor == 1 for a in arrows)
    with pytest.raises(ValidationError):
        arrows_from(EffectiveState(np.eye(2) / 2, 4), fseq, fam, v)


def test_depth_zero_tree(rng):
    u, v, fseq, fam = instance(rng)
    tree = enumerate_tree(EffectiveState(np.eye(2) / 2), fseq, fam, v, 0)
    assert len(tree.nodes) == 1
    assert tree.leaf_distribution() == {(): 1.0}
    assert check_consistency(tree) == 0.0


def test_identity_interaction_single_path(rng):
    v = random_unitary(2, rng)
    fam = kraus_from_unitary(np.eye(4), 2, 2)
    psi = random_unitary(2, rng)[:, 0]
    tree = enumerate_tree(EffectiveState(np.outer(psi, psi.conj())), FieldSequence.vacuum(2, 3), fam, v, 3)
    assert len(tree.leaves()) == 1
    assert tree.leaves()[0].probability == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_tree_consistency_and_leaf_mass(seed):
    rng = np.random.default_rng(seed)
    u, v, fseq, fam = instance(rng, 2, 3, 3)
    tree = enumerate_tree(EffectiveState(random_density(3, rng)), fseq, fam, v, 3)
    assert check_consistency(tree) <= 1e-10
    assert max(tree.mass_balance()) <= 1e-10
    assert sum(tree.leaf_distribution().values()) == pytest.approx(1.0, abs=1e-10)


def test_pruning_accounts_mass(rng):
    u, v, fseq, fam = instance(rng, 2, 3, 3)
    root = EffectiveState(random_density(3, rng))
    full = enumerate_tree(root, fseq, fam, v, 3, prune_below=0.0)
    cut = enumerate_tree(root, fseq, fam, v, 3, prune_below=0.05)
    assert len(cut.nodes) < len(full.nodes)
    assert check_consistency(cut) <= 1e-10
    assert max(cut.mass_balance()) <= 1e-10
    assert cut.pruned_mass[3] > 0


def test_tree_limits(rng):
    u, v, fseq, fam = instance(rng, 2, 3, 3)
    root = EffectiveState(random_density(3, rng))
    with pytest.raises(ValidationError):
        enumerate_tree(root, fseq, fam, v, 4)
    with pytest.raises(ResourceCapError):
        enumerate_tree(root, fseq, fam, v, 3, max_nodes=5)


def test_path_product_matches_leaf(rng):
    u, v, fseq, fam = instance(rng, 2, 2, 3)
    root = EffectiveState(random_density(2, rng))
    tree = enumerate_tree(root, fseq, fam, v, 3, prune_below=0.0)
    for path, p in tree.leaf_distribution().items():
        assert history_probability(root, fseq, fam, v, path) == pytest.approx(p, abs=1e-14)


@pytest.mark.parametrize("n,m", [(2, 2), (2, 3), (3, 2)])
def test_oracle_agrees_with_path_product(n, m, rng):
    for _ in range(3):
        u, v, fseq, fam = instance(rng, n, m, 3)
        root = EffectiveState(random_density(m, rng))
        tree = enumerate_tree(root, fseq, fam, v, 3, prune_below=0.0)
        for path in tree.leaf_distribution():
            a, b = history_probability_checked(root, fseq, u, fam, v, path)
            assert abs(a - b) <= 1e-9


def test_identity_projection_entries(rng):
    u, v, fseq, fam = instance(rng, 2, 2, 3)
    root = EffectiveState(random_density(2, rng))
    assert history_probability(root, fseq, fam, v, [None, None]) == 1.0
    assert history_probability_oracle(root, fseq, u, fam, v, [None, None]) == pytest.approx(1.0, abs=1e-12)
    # marginalising over the last step leaves the two-step probability
    p2 = history_probability(root, fseq, fam, v, [0, None])
    total = sum(history_probability(root, fseq, fam, v, [0, r]) for r in range(len(arrows_from(arrows_from(root, fseq, fam, v)[0].successor, fseq, fam, v))))
    assert p2 == pytest.approx(total, abs=1e-12)
    assert history_probability_oracle(root, fseq, u, fam, v, [0, None]) == pytest.approx(p2, abs=1e-9)


def test_bad_branch_and_mismatch(rng):
    u, v, fseq, fam = instance(rng, 2, 2, 3)
    root = EffectiveState(random_density(2, rng))
    with pytest.raises(ValidationError):
        history_probability(root, fseq, fam, v, [7])
    with pytest.raises(ValidationError):
        history_probability(root, fseq, fam, v, [0, 0, 0, 0])
    other = random_unitary(4, rng)
    with pytest.raises(InvariantError):
        history_probability_checked(root, fseq, other, fam, v, [0, 0], tol=1e-15)


def test_fingerprint_stable(rng):
    a = random_density(2, rng)
    s = EffectiveState(a)
    assert s.fingerprint() == EffectiveState(a.copy()).fingerprint()
    assert s.fingerprint() != EffectiveState(np.eye(2) / 2).fingerprint()
    assert EffectiveState(np.array([[-0.0, 0], [0, 1]])).fingerprint() == EffectiveState(np.diag([0.0, 1])).fingerprint()


def test_tree_json(rng):
    u, v, fseq, fam = instance(rng)
    tree = enumerate_tree(EffectiveState(np.eye(2) / 2), fseq, fam, v, 2)
    js = tree.to_json()
    assert js["nodes"][0]["branch"] is None
    assert all(n["branch"] >= 1 for n in js["nodes"][1:])
    assert len(js["nodes"]) == len(tree.nodes)
