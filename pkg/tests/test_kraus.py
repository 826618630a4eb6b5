import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ethsim.errors import ValidationError
from ethsim.kraus import KrausFamily, apply_single_kraus, kraus_from_unitary, verify_sum_rule
from ethsim.matcore import dagger, kron, random_density, random_unitary


def dilation_oracle(u, n, m, ell, v, rho):
    """Partial trace over the field of (1⊗V) U (|φ_ℓ⟩⟨φ_ℓ| ⊗ Ω) U† (1⊗V)†, by explicit loops."""
    phi = np.zeros((n, n))
    phi[ell, ell] = 1.0
    w = kron(np.eye(n), v) @ u
    joint = w @ kron(phi, rho) @ dagger(w)
    out = np.zeros((m, m), dtype=complex)
    for a in range(n):
        for i in range(m):
            for j in range(m):
                out[i, j] += joint[a * m + i, a * m + j]
    return out


def test_identity_interaction():
    fam = kraus_from_unitary(np.eye(4), 2, 2)
    for a in range(2):
        for ell in range(2):
            np.testing.assert_array_equal(fam.ops[a, ell], np.eye(2) * (a == ell))
    assert np.all(verify_sum_rule(fam) == 0.0)


def test_field_only_unitary(rng):
    t = random_unitary(3, rng)
    fam = kraus_from_unitary(kron(t, np.eye(2)), 3, 2)
    for a in range(3):
        for ell in range(3):
            np.testing.assert_allclose(fam.ops[a, ell], t[a, ell] * np.eye(2), atol=1e-15)


def test_block_extraction_index(rng):
    u = random_unitary(6, rng)
    fam = kraus_from_unitary(u, 3, 2)
    for a in range(3):
        for ell in range(3):
            for i in range(2):
                for j in range(2):
                    assert fam.ops[a, ell][i, j] == u[a * 2 + i, ell * 2 + j]


def test_random_sum_rule(rng):
    fam = kraus_from_unitary(random_unitary(4, rng), 2, 2)
    s = [sum(dagger(fam.ops[a, ell]) @ fam.ops[a, ell] for a in range(2)) for ell in range(2)]
    for x in s:
        np.testing.assert_allclose(x, np.eye(2), atol=1e-12)
    assert np.all(verify_sum_rule(fam) <= 1e-12)


def test_broken_family_detected(rng):
    fam = kraus_from_unitary(random_unitary(4, rng), 2, 2)
    ops = np.array(fam.ops)
    broken_norm = np.linalg.norm(dagger(ops[1, 0]) @ ops[1, 0], 2)
    ops[1, 0] = 0
    res = verify_sum_rule(KrausFamily(2, 2, ops))
    assert res[0] == pytest.approx(broken_norm, rel=1e-9)
    assert res[1] <= 1e-12


def test_rejects_bad_input(rng):
    with pytest.raises(ValidationError):
        kraus_from_unitary(random_unitary(4, rng), 2, 3)
    with pytest.raises(ValidationError):
        kraus_from_unitary(np.diag([1, 1, 1, 2.0]), 2, 2)
    fam = kraus_from_unitary(random_unitary(4, rng), 2, 2)
    with pytest.raises(ValidationError):
        apply_single_kraus(fam, 2, np.eye(2), np.eye(2) / 2)
    with pytest.raises(ValidationError):
        apply_single_kraus(fam, 0, np.eye(2), np.eye(3) / 3)


def test_identity_channel(rng):
    v = random_unitary(3, rng)
    rho = random_density(3, rng)
    fam = kraus_from_unitary(np.eye(6), 2, 3)
    np.testing.assert_allclose(apply_single_kraus(fam, 1, v, rho), v @ rho @ dagger(v), atol=1e-14)


def test_maximally_mixed_trace(rng):
    for n, m in [(2, 2), (3, 2), (2, 4)]:
        fam = kraus_from_unitary(random_unitary(n * m, rng), n, m)
        out = apply_single_kraus(fam, n - 1, random_unitary(m, rng), np.eye(m) / m)
        assert abs(np.trace(out) - 1) <= 1e-12


@pytest.mark.parametrize("n,m", [(2, 2), (2, 3), (3, 2), (3, 3)])
def test_dilation_oracle(n, m, rng):
    for _ in range(5):
        u = random_unitary(n * m, rng)
        v = random_unitary(m, rng)
        rho = random_density(m, rng)
        fam = kraus_from_unitary(u, n, m)
        for ell in range(n):
            ours = apply_single_kraus(fam, ell, v, rho)
            np.testing.assert_allclose(ours, dilation_oracle(u, n, m, ell, v, rho), atol=1e-10)


def test_unitary_covariance(rng):
    n, m = 3, 2
    u = random_unitary(n * m, rng)
    w = random_unitary(m, rng)
    fam = kraus_from_unitary(u, n, m)
    fam_w = kraus_from_unitary(kron(np.eye(n), w) @ u, n, m)
    for a in range(n):
        for ell in range(n):
            np.testing.assert_allclose(fam_w.ops[a, ell], w @ fam.ops[a, ell], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 4), st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_cptp(n, m, seed):
    r = np.random.default_rng(seed)
    fam = kraus_from_unitary(random_unitary(n * m, r), n, m)
    rho = random_density(m, r)
    out = apply_single_kraus(fam, int(r.integers(n)), random_unitary(m, r), rho)
    assert abs(np.trace(out) - 1) <= 1e-12
    assert np.linalg.eigvalsh(out).min() >= -1e-10
