import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from qbound.bounds import hcrb_mixed, qcrb
from qbound.infomet import cfim, qfim_pure
from qbound.measures import fisher_symmetric_povm, make_table
from qbound.numkit import abs_antisymmetric, realify, trace_norm
from qbound.protosim import split_copies
from qbound.statemodel import builtin_family

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def herm(rng, n):
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return a + a.conj().T


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(min_value=1, max_value=5))
def test_realify_is_a_star_homomorphism(seed, n):
    rng = np.random.default_rng(seed)
    a, b = herm(rng, n), herm(rng, n)
    assert np.allclose(realify(a @ b + b @ a), realify(a) @ realify(b) + realify(b) @ realify(a))
    ev = np.sort(np.linalg.eigvalsh(realify(a)))
    assert np.allclose(ev, np.sort(np.repeat(np.linalg.eigvalsh(a), 2)), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(min_value=1, max_value=6))
def test_abs_antisymmetric_dominates(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    a = a - a.T
    mod = abs_antisymmetric(a)
    assert np.allclose(mod, mod.T)
    assert np.linalg.eigvalsh(mod + 1j * a)[0] >= -1e-10
    assert abs(np.trace(mod) - trace_norm(a)) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.6, 0.6), st.floats(-0.6, 0.6), seeds)
def test_bloch2_sandwich(x, y, seed):
    fam = builtin_family("bloch2")
    theta = np.array([x, y])
    if not fam.contains(theta):
        return
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 2))
    w = a @ a.T + 0.1 * np.eye(2)
    cf = qcrb(fam, theta, w)
    ch = hcrb_mixed(fam, theta, w).value
    assert cf - 1e-7 <= ch <= 2 * cf + 1e-7


@settings(max_examples=200, deadline=None)
@given(st.integers(16, 10**7), st.floats(0.01, 0.33))
def test_split_copies_partition(n, delta):
    n1, n2 = split_copies(n, delta)
    assert n1 + n2 == n and n1 >= 1 and n2 >= 1


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(2, 6))
def test_fisher_symmetric_random_states(seed, n):
    rng = np.random.default_rng(seed)
    psi = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    psi /= np.linalg.norm(psi)
    dpsi = rng.standard_normal((2, n)) + 1j * rng.standard_normal((2, n))
    dpsi -= np.real(dpsi @ psi.conj())[:, None] * psi[None, :]
    povm = fisher_symmetric_povm(psi)
    assert povm.completeness_error() <= 1e-10
    j = qfim_pure(psi, dpsi)
    assert np.allclose(cfim(povm, psi=psi, dpsi=dpsi), j / 2, atol=1e-8 * max(1.0, np.max(np.abs(j))))


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(0.01, 10.0))
def test_clipping_never_exceeds_radius(seed, radius):
    rng = np.random.default_rng(seed)
    est = rng.standard_normal((7, 4)) * 5
    ref = rng.standard_normal(4)
    tab = make_table(est, ref, radius, m=2)
    assert np.all(np.linalg.norm(tab.theta - ref[:2], axis=1) <= radius * (1 + 1e-12))
    assert np.allclose(tab.estimates[:, 2:], est[:, 2:], rtol=0, atol=1e-12)
