import numpy as np
import pytest

from ethsim.errors import ResourceCapError, ValidationError
from ethsim.evolve import (
    FieldSequence,
    SliceObservable,
    TruncatedChain,
    chain_pre_collapse,
    heisenberg_expectation,
    step_pre_collapse,
    tensor_oracle_expectation,
)
from ethsim.kraus import kraus_from_unitary
from ethsim.matcore import dagger, matrix_power, random_density, random_hermitian, random_unitary


def random_instance(rng, n, m, horizon):
    u = random_unitary(n * m, rng)
    v = random_unitary(m, rng)
    rho = random_density(m, rng)
    fseq = FieldSequence(tuple(rng.integers(0, n, size=horizon)), n)
    return u, v, rho, fseq, kraus_from_unitary(u, n, m)


def test_identity_interaction_step(rng):
    v = random_unitary(2, rng)
    rho = random_density(2, rng)
    fam = kraus_from_unitary(np.eye(4), 2, 2)
    np.testing.assert_allclose(step_pre_collapse(rho, 0, fam, v), v @ rho @ dagger(v), atol=1e-14)


def test_zero_steps_unchanged(rng):
    u, v, rho, fseq, fam = random_instance(rng, 2, 2, 3)
    np.testing.assert_array_equal(chain_pre_collapse(rho, fseq, fam, v, 0), rho)


def test_closed_system_limit(rng):
    v = random_unitary(3, rng)
    rho = random_density(3, rng)
    fam = kraus_from_unitary(np.eye(6), 2, 3)
    fseq = FieldSequence.vacuum(2, 7)
    out = chain_pre_collapse(rho, fseq, fam, v, 7)
    np.testing.assert_allclose(out, matrix_power(v, 7) @ rho @ matrix_power(v, -7), atol=1e-12)


def test_horizon_enforced(rng):
    u, v, rho, fseq, fam = random_instance(rng, 2, 2, 3)
    with pytest.raises(ValidationError):
        chain_pre_collapse(rho, fseq, fam, v, 4)
    with pytest.raises(ValidationError):
        FieldSequence((0, 2), 2)


def test_field_sequence_shift():
    f = FieldSequence((1, 2, 0, 1), 3)
    assert f.shifted(2).entries == (0, 1)
    assert f.shifted(2).horizon == 2
    assert f[10] == 0
    assert f.window(2, 6) == [0, 1, 0, 0]


def test_semigroup(rng):
    u, v, rho, fseq, fam = random_instance(rng, 3, 2, 6)
    whole = chain_pre_collapse(rho, fseq, fam, v, 6)
    half = chain_pre_collapse(rho, fseq, fam, v, 2)
    np.testing.assert_allclose(chain_pre_collapse(half, fseq.shifted(2), fam, v, 4), whole, atol=1e-12)


def test_trace_and_positivity_along_chain(rng):
    u, v, rho, fseq, fam = random_instance(rng, 3, 3, 40)
    for n in range(40):
        rho = step_pre_collapse(rho, fseq[n], fam, v)
        assert abs(np.trace(rho).real - 1) <= 1e-12 * (n + 1)
        assert np.linalg.eigvalsh(rho).min() >= -1e-10


def test_normalisation(rng):
    u, v, rho, fseq, fam = random_instance(rng, 2, 3, 3)
    val = heisenberg_expectation(SliceObservable.identity(), np.eye(3), rho, fseq, fam, v, 3)
    assert val == pytest.approx(1.0, abs=1e-12)


def test_diagonal_field_factor(rng):
    u, v, rho, _, fam = random_instance(rng, 3, 2, 1)
    fseq = FieldSequence.vacuum(3, 4)
    d = np.array([0.3, -1.2, 2.0])
    c = random_hermitian(2, rng)
    obs = SliceObservable(0, (np.diag(d),))
    val = heisenberg_expectation(obs, c, rho, fseq, fam, v, 1)
    expected = d[0] * np.trace(step_pre_collapse(rho, 0, fam, v) @ c)
    assert val == pytest.approx(expected, abs=1e-14)


def test_factorisation(rng):
    u, v, rho, fseq, fam = random_instance(rng, 3, 2, 5)
    f = SliceObservable(1, (np.diag(rng.normal(size=3)), np.diag(rng.normal(size=3))))
    c = random_hermitian(2, rng)
    both = heisenberg_expectation(f, c, rho, fseq, fam, v, 2)
    field_only = heisenberg_expectation(f, np.eye(2), rho, fseq, fam, v, 2)
    atom_only = heisenberg_expectation(SliceObservable.identity(), c, rho, fseq, fam, v, 2)
    assert both == pytest.approx(field_only * atom_only, abs=1e-12)


def test_oracle_identity_interaction(rng):
    # U = 1: the observable is only shifted and conjugated
    n, m = 2, 2
    v = random_unitary(m, rng)
    rho = random_density(m, rng)
    fseq = FieldSequence((1, 0, 1, 1), n)
    f = np.diag([0.25, 4.0])
    c = random_hermitian(m, rng)
    val = tensor_oracle_expectation(SliceObservable(0, (f,)), c, rho, fseq, np.eye(n * m), v, 2)
    expected = f[fseq[2], fseq[2]] * np.trace(matrix_power(v, 2) @ rho @ matrix_power(v, -2) @ c)
    assert val == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("n,m", [(2, 2), (2, 3), (3, 2), (3, 3)])
def test_oracle_equivalence(n, m, rng):
    for steps in range(5):
        u, v, rho, fseq, fam = random_instance(rng, n, m, 6)
        c = random_hermitian(m, rng) + 1j * random_hermitian(m, rng)
        f = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        for obs in (SliceObservable.identity(), SliceObservable(0, (f,))):
            a = heisenberg_expectation(obs, c, rho, fseq, fam, v, steps)
            b = tensor_oracle_expectation(obs, c, rho, fseq, u, v, steps)
            assert abs(a - b) <= 1e-9


def test_reduced_state_matches_oracle_chain(rng):
    u, v, rho, fseq, fam = random_instance(rng, 2, 2, 3)
    chain = TruncatedChain(fseq.window(0, 3), 2, rho)
    for j in range(1, 4):
        chain.apply_interaction(j, u, v)
    # the chain lives in the interaction frame; undo V^3 on the atom
    atom = matrix_power(v, 3) @ chain.reduced_atom() @ matrix_power(v, -3)
    np.testing.assert_allclose(atom, chain_pre_collapse(rho, fseq, fam, v, 3), atol=1e-9)
    assert chain.norm_squared() == pytest.approx(1.0, abs=1e-12)
    dens = chain.density()
    assert dens.shape == (16, 16)
    assert np.trace(dens).real == pytest.approx(1.0)


def test_one_step_diagonal_unitary_by_hand(rng):
    # U = Σ_a |a⟩⟨a| ⊗ diag(exp(iθ[a])) and k_0 = 0: only the a = 0 block acts
    n, m = 3, 2
    theta = rng.uniform(0, 2 * np.pi, size=(n, m))
    u = np.diag(np.exp(1j * theta.reshape(-1)))
    v = random_unitary(m, rng)
    rho = random_density(m, rng)
    fseq = FieldSequence.vacuum(n, 1)
    hand = np.zeros((m, m), dtype=complex)
    for i in range(m):
        for j in range(m):
            for a in range(m):
                for b in range(m):
                    hand[i, j] += (
                        v[i, a] * np.exp(1j * theta[0, a]) * rho[a, b] * np.exp(-1j * theta[0, b]) * np.conj(v[j, b])
                    )
    for i in range(m):
        for j in range(m):
            e = np.zeros((m, m))
            e[j, i] = 1.0
            val = tensor_oracle_expectation(SliceObservable.identity(), e, rho, fseq, u, v, 1)
            assert val == pytest.approx(hand[i, j], abs=1e-12)


def test_oracle_cap(monkeypatch, rng):
    u, v, rho, fseq, fam = random_instance(rng, 3, 3, 6)
    with pytest.raises(ResourceCapError):
        tensor_oracle_expectation(SliceObservable.identity(), np.eye(3), rho, fseq, u, v, 6, max_dim=1000)
    monkeypatch.setenv("ETHSIM_MAX_DIM", "20")
    with pytest.raises(ResourceCapError):
        tensor_oracle_expectation(SliceObservable.identity(), np.eye(3), rho, fseq, u, v, 2)
