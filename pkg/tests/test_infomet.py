import numpy as np
import pytest

from oracles import bures_qfim
from qbound.infomet import cfim, outcome_probabilities, qfim_ee_block, qfim_mixed, qfim_pure
from qbound.measures import POVM
from qbound.numkit import ValidationError, haar_unitary
from qbound.statemodel import builtin_family, linear_reparam, purify, spectral


def test_bloch3_qfim_against_bures_oracle():
    fam = builtin_family("bloch3")
    theta = np.array([0.0, 0.0, 0.5])
    oracle = bures_qfim(fam.rho_at, theta)
    assert np.allclose(oracle, np.diag([1, 1, 4 / 3]), atol=1e-4)
    assert np.allclose(qfim_mixed(spectral(fam, theta)), np.diag([1, 1, 4 / 3]), atol=1e-12)


@pytest.mark.parametrize("name", ["bloch3", "bloch2", "qutrit_embed", "simplex"])
def test_qfim_against_bures_oracle_random_points(name, rng):
    fam = builtin_family(name, d=3) if name == "simplex" else builtin_family(name)
    for _ in range(3):
        theta = fam.sample_theta(rng)
        j = qfim_mixed(spectral(fam, theta))
        oracle = bures_qfim(fam.rho_at, theta)
        assert np.allclose(j, oracle, atol=2e-4 * max(1.0, np.max(np.abs(j))))


def test_simplex_two_bernoulli():
    j = qfim_mixed(spectral(builtin_family("simplex", d=2), [0.3]))
    assert j[0, 0] == pytest.approx(1 / 0.21, rel=1e-12)


def test_pure_phase_rank_one_path_matches_pure_formula(rng):
    fam = builtin_family("pure_phase")
    for _ in range(5):
        theta = fam.sample_theta(rng)
        psi = np.array([np.cos(theta[0]), np.exp(1j * theta[1]) * np.sin(theta[0])])
        dpsi = np.array([[-np.sin(theta[0]), np.exp(1j * theta[1]) * np.cos(theta[0])],
                         [0, 1j * np.exp(1j * theta[1]) * np.sin(theta[0])]])
        assert np.allclose(qfim_mixed(spectral(fam, theta)), qfim_pure(psi, dpsi), atol=1e-9)


def test_pure_phase_hand_values(rng):
    t1 = np.pi / 4
    psi = np.array([np.cos(t1), np.sin(t1)])
    dpsi = np.array([[-np.sin(t1), np.cos(t1)], [0, 1j * np.sin(t1)]])
    assert np.allclose(qfim_pure(psi, dpsi), np.diag([4.0, 1.0]), atol=1e-12)
    fam = builtin_family("pure_phase")
    for _ in range(10):
        theta = fam.sample_theta(rng)
        j = qfim_mixed(spectral(fam, theta))
        assert abs(j[0, 1]) <= 1e-12
        assert j[1, 1] == pytest.approx(np.sin(2 * theta[0]) ** 2, abs=1e-12)


def test_constant_family_has_zero_qfim():
    psi = np.array([1.0, 0.0])
    assert np.allclose(qfim_pure(psi, np.zeros((2, 2))), 0)


def test_qfim_pure_rejects_unnormalized():
    with pytest.raises(ValidationError):
        qfim_pure(np.array([1.0, 1.0]), np.zeros((1, 2)))


@pytest.mark.parametrize("p", [0.49, 0.3])
def test_ee_block_near_maximally_mixed_support(p):
    # rho_E = diag(p, 1-p): <X^2>=<Y^2>=<Z^2>=1, <X>=<Y>=0, <Z>=2p-1, and the block is 4x the covariance
    fam = builtin_family("simplex", d=2)
    theta = np.array([p])
    pf = purify(fam, theta)
    block = qfim_ee_block(pf, theta)
    assert np.allclose(block, 4 * np.diag([1, 1, 1 - (2 * p - 1) ** 2]), atol=1e-12)
    psi, dpsi = pf.psi_and_derivatives(theta)
    assert np.allclose(qfim_pure(psi, dpsi)[1:, 1:], block, atol=1e-12)


def test_ee_block_matches_full_pure_qfim(rng):
    for name in ("bloch3", "qutrit_embed", "bloch2"):
        fam = builtin_family(name)
        theta = fam.sample_theta(rng)
        pf = purify(fam, theta, haar_unitary(fam.r, rng))
        for phi in (None, 0.2 * rng.standard_normal(fam.r**2 - 1)):
            psi, dpsi = pf.psi_and_derivatives(theta, phi)
            full = qfim_pure(psi, dpsi)
            block = qfim_ee_block(pf, theta, phi)
            assert np.max(np.abs(full[fam.m:, fam.m:] - block)) <= 1e-9
            assert np.linalg.eigvalsh(block)[0] > 0


def test_cfim_classical_model():
    fam = builtin_family("simplex", d=2)
    rho, drho = fam.rho_at([0.3]), fam.drho_at([0.3])
    info = cfim(POVM(vectors=np.eye(2, dtype=complex)), rho=rho, drho=drho)
    assert info[0, 0] == pytest.approx(1 / 0.21, rel=1e-12)
    plus = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
    assert np.allclose(cfim(POVM(vectors=plus), rho=rho, drho=drho), 0)


def test_cfim_rejects_incomplete_povm():
    with pytest.raises(ValidationError):
        cfim(POVM(vectors=np.array([[1.0, 0.0]], dtype=complex)), rho=np.eye(2) / 2, drho=np.zeros((1, 2, 2)))


def test_cfim_drops_vanishing_outcomes():
    psi = np.array([1.0, 0.0], dtype=complex)
    dpsi = np.array([[0.0, 1.0]], dtype=complex)
    info, dropped = cfim(POVM(vectors=np.eye(2, dtype=complex)), psi=psi, dpsi=dpsi, return_dropped=True)
    assert np.all(np.isfinite(info)) and dropped == 0


def test_cfim_below_qfim_for_random_povms(rng):
    fam = builtin_family("bloch3")
    theta = np.array([0.3, -0.2, 0.4])
    j = qfim_mixed(spectral(fam, theta))
    for _ in range(20):
        k = int(rng.integers(2, 6))
        u = haar_unitary(2 * k, rng)[:, :2]  # isometry -> rank-one POVM with 2k outcomes
        povm = POVM(vectors=u.conj())
        povm.check()
        info = cfim(povm, rho=fam.rho_at(theta), drho=fam.drho_at(theta))
        assert np.linalg.eigvalsh(j - info)[0] >= -1e-8


def test_reparameterisation_covariance(rng):
    fam = builtin_family("bloch3")
    theta = np.array([0.2, 0.3, 0.4])
    b = rng.standard_normal((3, 3)) + 2 * np.eye(3)
    rep = linear_reparam(fam, b)
    j = qfim_mixed(spectral(fam, theta))
    jr = qfim_mixed(spectral(rep, b @ theta))
    binv = np.linalg.inv(b)
    assert np.allclose(jr, binv.T @ j @ binv, atol=1e-8)


def test_embedding_invariance(rng):
    for _ in range(5):
        theta = builtin_family("bloch3").sample_theta(rng)
        a = qfim_mixed(spectral(builtin_family("bloch3"), theta))
        b = qfim_mixed(spectral(builtin_family("qutrit_embed"), theta))
        assert np.max(np.abs(a - b)) <= 1e-9


def test_outcome_probabilities_density_and_vector_paths_agree(rng):
    psi = haar_unitary(3, rng)[:, 0]
    dpsi = rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3))
    povm = POVM(vectors=haar_unitary(3, rng))
    p1, d1 = outcome_probabilities(povm, psi=psi, dpsi=dpsi)
    rho = np.outer(psi, psi.conj())
    drho = np.array([np.outer(x, psi.conj()) + np.outer(psi, x.conj()) for x in dpsi])
    p2, d2 = outcome_probabilities(povm, rho=rho, drho=drho)
    assert np.allclose(p1, p2) and np.allclose(d1, d2)
