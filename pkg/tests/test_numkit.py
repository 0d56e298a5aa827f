import numpy as np
import pytest

from qbound.numkit import (
    NotPSDError,
    ValidationError,
    abs_antisymmetric,
    as_herm,
    haar_unitaries,
    haar_unitary,
    herm_eig,
    is_unitary,
    partial_trace_env,
    psd_inv_sqrt,
    psd_sqrt,
    realify,
    trace_norm,
)

from conftest import random_herm


def test_haar_dim_one_is_a_phase(rng):
    u = haar_unitary(1, rng)
    assert u.shape == (1, 1)
    assert abs(abs(u[0, 0]) - 1) < 1e-14


def test_haar_rejects_zero_dimension(rng):
    with pytest.raises(ValidationError):
        haar_unitary(0, rng)


def test_haar_outputs_are_unitary(rng):
    for dim in (2, 3, 5, 8):
        u = haar_unitary(dim, rng)
        assert np.linalg.norm(u.conj().T @ u - np.eye(dim)) <= 1e-10
        assert is_unitary(u)


def test_haar_first_moment(rng):
    # E|U_00|^2 = 1/dim under the Haar measure
    us = haar_unitaries(100_000, 4, rng)
    assert abs(np.mean(np.abs(us[:, 0, 0]) ** 2) - 0.25) <= 0.005


def test_haar_second_moment(rng):
    # E|U_00|^4 = 2/(dim (dim + 1)); QR without phase correction fails this
    us = haar_unitaries(100_000, 3, rng)
    val = np.mean(np.abs(us[:, 0, 0]) ** 4)
    assert abs(val - 2 / 12) < 0.005


def test_haar_reproducible():
    a = haar_unitary(5, np.random.default_rng(3))
    b = haar_unitary(5, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()


def test_trace_norm_examples():
    assert trace_norm(np.eye(3)) == pytest.approx(3.0, abs=1e-14)
    assert trace_norm(np.array([[0.0, 1.0], [-1.0, 0.0]])) == pytest.approx(2.0, abs=1e-14)
    v = np.array([1.0, 1j])
    assert trace_norm(np.outer(v, v.conj())) == pytest.approx(2.0, abs=1e-14)


def test_trace_norm_properties(rng):
    for _ in range(20):
        m = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        u, v = haar_unitary(4, rng), haar_unitary(4, rng)
        assert trace_norm(m) >= abs(np.trace(m)) - 1e-9
        assert abs(trace_norm(u @ m @ v) - trace_norm(m)) <= 1e-9


def test_as_herm_rejects_non_hermitian():
    with pytest.raises(ValidationError):
        as_herm(np.array([[0, 1], [0, 0]]), tol=1e-12)
    with pytest.raises(ValidationError):
        as_herm(np.ones((2, 3)))


def test_herm_eig_examples(rng):
    w, v = herm_eig(np.diag([0.25, 0.75]))
    assert np.allclose(w, [0.25, 0.75], atol=1e-15)
    assert np.allclose(np.abs(v), np.eye(2), atol=1e-15)
    w, _ = herm_eig(np.array([[0, 1], [1, 0]]))
    assert np.allclose(w, [-1, 1], atol=1e-15)
    h = random_herm(rng, 6)
    w, v = herm_eig(h)
    assert np.linalg.norm(h @ v - v * w) <= 1e-10 * np.linalg.norm(h)
    assert np.all(np.diff(w) >= 0)


def test_herm_eig_characteristic_polynomial(rng):
    for n in (2, 3):
        h = random_herm(rng, n)
        roots = np.sort(np.roots(np.poly(h)).real)
        assert np.allclose(herm_eig(h)[0], roots, atol=1e-12)


def test_herm_eig_gauge():
    h = np.array([[2.0, 1j], [-1j, 2.0]])
    _, v = herm_eig(h)
    for col in v.T:
        first = col[np.flatnonzero(np.abs(col) > 1e-8)[0]]
        assert abs(first.imag) < 1e-15 and first.real > 0


def test_herm_eig_rejects_non_hermitian():
    with pytest.raises(ValidationError):
        herm_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_psd_sqrt_examples(rng):
    assert np.allclose(psd_sqrt(np.eye(3)), np.eye(3))
    assert np.allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    a = rng.standard_normal((5, 5)) + 1j * rng.standard_normal((5, 5))
    g = a.conj().T @ a
    r = psd_sqrt(g)
    assert np.max(np.abs(r @ r - g)) <= 1e-9
    assert np.linalg.eigvalsh(r)[0] >= -1e-12


def test_psd_sqrt_clamps_and_rejects():
    r = psd_sqrt(np.diag([1.0, -1e-11]))
    assert np.allclose(r, np.diag([1.0, 0.0]))
    with pytest.raises(NotPSDError):
        psd_sqrt(np.diag([1.0, -1e-6]))


def test_psd_inv_sqrt(rng):
    a = rng.standard_normal((4, 4))
    g = a @ a.T + np.eye(4)
    r = psd_inv_sqrt(g)
    assert np.allclose(r @ g @ r, np.eye(4), atol=1e-10)


def test_abs_antisymmetric_examples(rng):
    assert np.allclose(abs_antisymmetric(np.zeros((3, 3))), 0)
    assert np.allclose(abs_antisymmetric(np.array([[0.0, 2.0], [-2.0, 0.0]])), 2 * np.eye(2))
    for n in (2, 3, 5):
        a = rng.standard_normal((n, n))
        t = a - a.T
        at = abs_antisymmetric(t)
        assert np.allclose(at @ at, t.T @ t, atol=1e-10)
        assert np.linalg.eigvalsh(at + 1j * t)[0] >= -1e-10
        assert np.linalg.eigvalsh(at - 1j * t)[0] >= -1e-10


def test_abs_antisymmetric_rejects_symmetric():
    with pytest.raises(ValidationError):
        abs_antisymmetric(np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_realify_duplicates_spectrum(rng):
    h = random_herm(rng, 4)
    w = np.linalg.eigvalsh(h)
    wr = np.linalg.eigvalsh(realify(h))
    assert np.allclose(np.sort(np.repeat(w, 2)), wr, atol=1e-12)


def test_partial_trace_of_product_state(rng):
    a = haar_unitary(3, rng)[:, 0]
    b = haar_unitary(2, rng)[:, 0]
    rho = partial_trace_env(np.kron(a, b), 3, 2)
    assert np.allclose(rho, np.outer(a, a.conj()), atol=1e-14)
