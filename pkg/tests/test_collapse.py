import numpy as np
import pytest

from ethsim.collapse import (
    born_sample,
    center_of_centralizer,
    collapse_from_pre,
    collapse_step,
    run_trajectory,
    trajectory_rng,
)
from ethsim.errors import InvariantError, ValidationError
from ethsim.evolve import FieldSequence, chain_pre_collapse, step_pre_collapse
from ethsim.kraus import kraus_from_unitary
from ethsim.matcore import dagger, operator_norm, projector, random_density, random_unitary
from ethsim.models import standard_partition, strong_coupling_model, weak_coupling_model


def test_maximally_mixed_is_trivial_event():
    ev = center_of_centralizer(np.eye(3) / 3)
    assert len(ev) == 1
    assert ev.probabilities[0] == pytest.approx(1.0)
    np.testing.assert_allclose(ev.projections[0], np.eye(3), atol=1e-14)


def test_nondegenerate_diagonal():
    ev = center_of_centralizer(np.diag([0.7, 0.3]))
    np.testing.assert_allclose(ev.projections[0], np.diag([1, 0]), atol=1e-15)
    np.testing.assert_allclose(ev.projections[1], np.diag([0, 1]), atol=1e-15)
    assert ev.probabilities == pytest.approx((0.7, 0.3))


def test_near_degenerate_merge_commutes(rng):
    w = np.array([0.5, 0.5 - 1e-12, 0.0, 0.0])
    w[2] = 1 - w[:2].sum()
    u = random_unitary(4, rng)
    rho = u @ np.diag(w) @ dagger(u)
    ev = center_of_centralizer(rho, 1e-8)
    assert ev.ranks[0] == 2
    assert ev.probabilities[0] == pytest.approx(1 - 1e-12, abs=1e-12)
    for p in ev.projections:
        assert operator_norm(p @ rho - rho @ p) <= 1e-10


def test_zero_branches_dropped():
    ev = center_of_centralizer(np.diag([0.6, 0.4, 0.0]))
    assert len(ev) == 2
    assert len(ev.dropped) == 1
    assert ev.dropped[0][2] < 1e-14


def test_single_branch_sample():
    ev = center_of_centralizer(projector(np.array([1.0, 0.0])))
    r, p = born_sample(ev, np.random.default_rng(0))
    assert (r, p) == (0, 1.0)


def test_one_uniform_per_draw():
    ev = center_of_centralizer(np.diag([0.5, 0.3, 0.2]))
    a = np.random.default_rng(5)
    b = np.random.default_rng(5)
    born_sample(ev, a)
    b.random()
    assert a.random() == b.random()


def test_born_frequencies():
    ev = center_of_centralizer(np.diag([0.5, 0.3, 0.2]))
    rng = trajectory_rng(42, 0)
    draws = 100_000
    counts = np.bincount([born_sample(ev, rng)[0] for _ in range(draws)], minlength=3)
    for c, p in zip(counts, (0.5, 0.3, 0.2)):
        assert abs(c - draws * p) <= 3 * np.sqrt(draws * p * (1 - p))


def test_tie_break_by_eigenvalue():
    # eigenvalue 0.5 (rank 1) and 0.25 (rank 2) both carry probability 0.5
    ev = center_of_centralizer(np.diag([0.5, 0.25, 0.25]))
    assert ev.probabilities == pytest.approx((0.5, 0.5))
    assert ev.sampling_order() == [0, 1]


def test_seeded_determinism():
    ev = center_of_centralizer(np.diag([0.4, 0.35, 0.25]))
    draw = lambda seed, index: [born_sample(ev, r)[0] for r in [trajectory_rng(seed, index)] for _ in range(50)]
    assert draw(42, 0) == draw(42, 0)
    assert draw(42, 0) != draw(42, 1)


def test_unitary_step_is_deterministic(rng):
    v = random_unitary(3, rng)
    psi = random_unitary(3, rng)[:, 0]
    rho = projector(psi)
    fam = kraus_from_unitary(np.eye(6), 2, 3)
    st = collapse_step(rho, 0, fam, v, rng)
    assert st.event_size == 1
    np.testing.assert_allclose(st.post_collapse, v @ rho @ dagger(v), atol=1e-12)


def test_mixture_identity(rng):
    for _ in range(50):
        fam = kraus_from_unitary(random_unitary(6, rng), 2, 3)
        pre = step_pre_collapse(random_density(3, rng), 1, fam, random_unitary(3, rng))
        ev = center_of_centralizer(pre)
        mix = sum(p * ev.collapsed_state(r) for r, p in enumerate(ev.probabilities))
        assert operator_norm(mix - pre) <= 1e-12


def test_mixture_violation_named(rng):
    fam = kraus_from_unitary(random_unitary(4, rng), 2, 2)
    pre = step_pre_collapse(random_density(2, rng), 0, fam, np.eye(2))
    with pytest.raises(InvariantError, match="mixture identity"):
        collapse_from_pre(pre, rng, mixture_tol=1e-300)


def test_rank_bounded_by_support(rng):
    fam = kraus_from_unitary(random_unitary(8, rng), 2, 4)
    rho = random_density(4, rng, rank=1)
    for n in range(10):
        pre = step_pre_collapse(rho, 0, fam, np.eye(4))
        st = collapse_from_pre(pre, rng, n + 1)
        support = int(np.sum(np.linalg.eigvalsh(pre) > 1e-14))
        assert np.linalg.matrix_rank(st.post_collapse, tol=1e-10) <= support
        rho = st.post_collapse


def test_strong_coupling_collapses_onto_rotated_basis(rng):
    v = random_unitary(2, rng)
    model = strong_coupling_model(2, v, 1e-8, rng)
    fam = model.kraus()
    frame = [v @ q @ dagger(v) for q in model.partition]
    rho = model.partition[0]
    for n in range(20):
        st = collapse_step(rho, 0, fam, model.v, rng, step=n + 1)
        rho = st.post_collapse
        assert min(operator_norm(rho - p) for p in frame) <= 1e-6


def test_empty_trajectory(rng):
    fam = kraus_from_unitary(random_unitary(4, rng), 2, 2)
    t = run_trajectory(np.eye(2) / 2, FieldSequence.vacuum(2, 0), fam, np.eye(2), 0, seed=1)
    assert t.steps == []
    assert t.log_probability == 0.0
    with pytest.raises(ValidationError):
        run_trajectory(np.eye(2) / 2, FieldSequence.vacuum(2, 2), fam, np.eye(2), 3, seed=1)


def test_zero_coupling_reproduces_unitary(rng):
    v = random_unitary(3, rng)
    model = weak_coupling_model(2, standard_partition(3), v, 0.0, rng=rng)
    psi = random_unitary(3, rng)[:, 0]
    rho0 = projector(psi)
    t = run_trajectory(rho0, FieldSequence.vacuum(2, 8), model.kraus(), v, 8, seed=3)
    for n, st in enumerate(t.steps, start=1):
        assert st.event_size == 1
        np.testing.assert_allclose(st.post_collapse, np.linalg.matrix_power(v, n) @ rho0 @ dagger(np.linalg.matrix_power(v, n)), atol=1e-10)
    assert t.probability == pytest.approx(1.0)


def test_trajectory_records_and_determinism(rng):
    u = random_unitary(6, rng)
    v = random_unitary(3, rng)
    fam = kraus_from_unitary(u, 2, 3)
    fseq = FieldSequence((0, 1, 1, 0, 1), 2)
    a = run_trajectory(np.eye(3) / 3, fseq, fam, v, 5, seed=9, index=4)
    b = run_trajectory(np.eye(3) / 3, fseq, fam, v, 5, seed=9, index=4)
    assert a.branches() == b.branches()
    assert a.log_probability == b.log_probability
    assert 0 < a.probability <= 1
    assert [s.field_index for s in a.steps] == [0, 1, 1, 0, 1]
    for s in a.steps:
        assert np.trace(s.post_collapse).real == pytest.approx(1.0, abs=1e-12)


def test_ensemble_mean_matches_chain(rng):
    n, m, steps, trials = 2, 2, 4, 2000
    u = random_unitary(n * m, rng)
    v = random_unitary(m, rng)
    fam = kraus_from_unitary(u, n, m)
    fseq = FieldSequence((1, 0, 1, 0), n)
    rho0 = random_density(m, rng)
    mean = sum(run_trajectory(rho0, fseq, fam, v, steps, seed=11, index=t).steps[-1].post_collapse for t in range(trials)) / trials
    target = chain_pre_collapse(rho0, fseq, fam, v, steps)
    assert np.max(np.abs(mean - target)) <= 3 / np.sqrt(trials)


def test_first_step_branch_frequencies(rng):
    fam = kraus_from_unitary(random_unitary(6, rng), 2, 3)
    v = random_unitary(3, rng)
    rho0 = random_density(3, rng)
    ev = center_of_centralizer(step_pre_collapse(rho0, 0, fam, v))
    trials = 10_000
    counts = np.zeros(len(ev))
    for t in range(trials):
        r, _ = born_sample(ev, trajectory_rng(77, t))
        counts[r] += 1
    for c, p in zip(counts, ev.probabilities):
        assert abs(c - trials * p) <= 3 * np.sqrt(trials * p * (1 - p))
