import numpy as np
import pytest
from scipy.optimize import minimize

from qbound.bounds import embed_weight, qfim_inverse
from qbound.infomet import cfim, outcome_probabilities, qfim_pure
from qbound.measures import (
    POVM,
    canonical_from_state,
    debias_table,
    expected_sq_bias,
    fisher_symmetric_povm,
    make_table,
    matsumoto_from_state,
    matsumoto_povm,
    second_order_bias,
    shadow_fit_covariance,
    shadow_mean,
    shadow_outer_products,
    shadow_step,
)
from qbound.numkit import ValidationError, haar_unitary
from qbound.statemodel import builtin_family, purify


def toy_state(t):
    """Smooth two-parameter pure state on C^3."""
    v = np.array([1.0, 0.4 * t[0] + 0.3j * t[1] + 0.2, 0.5 * t[0] * t[1] + 0.6j * np.sin(t[0]) + 0.3 * np.cos(t[1])])
    return v / np.linalg.norm(v)


def toy_derivs(t, h=1e-5):
    t = np.asarray(t, float)
    eye = np.eye(2)
    d1 = np.array([(toy_state(t + h * e) - toy_state(t - h * e)) / (2 * h) for e in eye])
    d2 = np.empty((2, 2, 3), complex)
    hh = 1e-4
    for a in range(2):
        for b in range(2):
            ea, eb = hh * eye[a], hh * eye[b]
            d2[a, b] = (toy_state(t + ea + eb) - toy_state(t + ea - eb) - toy_state(t - ea + eb)
                        + toy_state(t - ea - eb)) / (4 * hh * hh)
    return toy_state(t), d1, d2


def unbiasedness_residual(povm, table, psi, dpsi):
    p, dp = outcome_probabilities(povm, psi=psi, dpsi=dpsi)
    dev = table.estimates - table.reference
    r0 = np.max(np.abs(p @ dev))
    r1 = np.max(np.abs(dp @ dev - np.eye(dev.shape[1])))
    return max(r0, r1)


@pytest.mark.parametrize("name,theta", [("bloch3", [0.1, -0.2, 0.4]), ("bloch2", [0.3, 0.2])])
@pytest.mark.parametrize("design", ["standard", "min_bias"])
def test_matsumoto_on_purifications(name, theta, design):
    fam = builtin_family(name)
    theta = np.array(theta)
    pf = purify(fam, theta, haar_unitary(2, np.random.default_rng(3)))
    ws = embed_weight(np.eye(fam.m), 2)
    res = matsumoto_povm(pf, theta, None, ws, design=design)
    res.povm.check()
    assert res.povm.completeness_error() <= 1e-8
    psi, dpsi = pf.psi_and_derivatives(theta)
    assert unbiasedness_residual(res.povm, res.table, psi, dpsi) <= 1e-5
    assert res.achieved == pytest.approx(res.bound.value, rel=1e-4)
    assert res.table.n_clipped == 0


def test_matsumoto_designs_share_second_moments():
    psi, dpsi, d2 = toy_derivs([0.2, -0.1])
    w = np.array([[1.0, 0.3], [0.3, 2.0]])
    a = matsumoto_from_state(psi, dpsi, w)
    b = matsumoto_from_state(psi, dpsi, w, design="min_bias", d2psi=d2)
    assert a.achieved == pytest.approx(b.achieved, rel=1e-9)
    sigma = qfim_inverse(qfim_pure(psi, dpsi))
    eb = []
    for res in (a, b):
        dev = res.table.estimates - res.table.reference
        eb.append(expected_sq_bias(second_order_bias(res.povm.vectors, dev, psi, dpsi, d2), sigma, w))
    assert eb[1] <= eb[0] + 1e-12


def test_matsumoto_validation():
    psi, dpsi, _ = toy_derivs([0.2, -0.1])
    with pytest.raises(ValidationError):
        matsumoto_from_state(psi, dpsi, np.eye(2), design="nope")
    with pytest.raises(ValidationError):
        matsumoto_from_state(psi, dpsi, np.eye(2), design="min_bias")


def test_clipping_bounds_estimates():
    psi, dpsi, _ = toy_derivs([0.2, -0.1])
    res = matsumoto_from_state(psi, dpsi, np.eye(2), clip_radius=0.5)
    dev = res.table.estimates - res.table.reference
    assert np.all(np.linalg.norm(dev, axis=1) <= 0.5 + 1e-12)
    assert res.table.n_clipped > 0


def test_make_table_clips_only_parameters_of_interest():
    est = np.array([[3.0, 4.0, 10.0], [0.1, 0.0, -7.0]])
    tab = make_table(est, np.zeros(3), 1.0, m=2)
    assert np.allclose(tab.estimates[0], [0.6, 0.8, 10.0])
    assert np.allclose(tab.estimates[1], est[1])
    assert tab.n_clipped == 1
    with pytest.raises(ValidationError):
        make_table([[np.nan, 0.0]], np.zeros(2), 1.0)


@pytest.mark.parametrize("n", [2, 3, 4, 8])
def test_fisher_symmetric_identities(n, rng):
    psi = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    psi /= np.linalg.norm(psi)
    m = min(2, 2 * n - 2)
    dpsi = rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))
    dpsi -= np.real(dpsi @ psi.conj())[:, None] * psi[None, :]  # tangents of a normalized curve
    povm = fisher_symmetric_povm(psi)
    assert povm.size == 2 * n - 1
    assert povm.completeness_error() <= 1e-12
    assert np.max(np.abs(povm.probabilities(psi) - 1 / (2 * n - 1))) <= 1e-12
    assert np.allclose(cfim(povm, psi=psi, dpsi=dpsi), qfim_pure(psi, dpsi) / 2, atol=1e-8, rtol=0)


def test_fisher_symmetric_min_bias_keeps_identities():
    psi, dpsi, d2 = toy_derivs([0.3, 0.1])
    povm = fisher_symmetric_povm(psi, design="min_bias", dpsi=dpsi, d2psi=d2, w=np.eye(2))
    assert np.max(np.abs(povm.probabilities(psi) - 0.2)) <= 1e-12
    assert np.allclose(cfim(povm, psi=psi, dpsi=dpsi), qfim_pure(psi, dpsi) / 2, atol=1e-8, rtol=0)
    sigma = qfim_inverse(qfim_pure(psi, dpsi))
    vals = []
    for pv in (fisher_symmetric_povm(psi), povm):
        tab = canonical_from_state(pv, psi, dpsi, np.zeros(2))
        vals.append(expected_sq_bias(second_order_bias(pv.vectors, tab.estimates, psi, dpsi, d2), sigma, np.eye(2)))
    assert vals[1] <= vals[0] + 1e-12


def test_fisher_symmetric_validation():
    psi = np.array([1.0, 0.0, 0.0], complex)
    with pytest.raises(ValidationError):
        fisher_symmetric_povm(np.array([1.0, 1.0]))
    with pytest.raises(ValidationError):
        fisher_symmetric_povm(psi, basis=np.eye(3)[:, :2])
    with pytest.raises(ValidationError):
        fisher_symmetric_povm(psi, design="min_bias")
    good = fisher_symmetric_povm(psi, basis=np.eye(3)[:, 1:])
    assert good.completeness_error() <= 1e-12


def test_canonical_estimator_covariance(rng):
    psi, dpsi, _ = toy_derivs([-0.4, 0.25])
    povm = fisher_symmetric_povm(psi)
    tab = canonical_from_state(povm, psi, dpsi, np.zeros(2))
    p = povm.probabilities(psi)
    dev = tab.estimates
    cov = np.einsum("l,li,lj->ij", p, dev, dev)
    assert np.allclose(cov, 2 * np.linalg.inv(qfim_pure(psi, dpsi)), atol=1e-8)
    assert unbiasedness_residual(povm, tab, psi, dpsi) <= 1e-8


def test_second_order_bias_matches_exact_expectation():
    t0 = np.array([0.2, -0.1])
    psi, dpsi, d2 = toy_derivs(t0)
    for res_povm, tab in [
        (lambda r: (r.povm, r.table))(matsumoto_from_state(psi, dpsi, np.eye(2), reference=t0)),
        (lambda pv: (pv, canonical_from_state(pv, psi, dpsi, t0)))(fisher_symmetric_povm(psi)),
    ]:
        dev = tab.estimates - t0
        tensor = second_order_bias(res_povm.vectors, dev, psi, dpsi, d2)
        direction = np.array([0.6, -0.8])
        for h in (1e-2, 5e-3):
            disp = h * direction
            p = res_povm.probabilities(toy_state(t0 + disp))
            exact = p @ tab.estimates - (t0 + disp)
            pred = 0.5 * np.einsum("a,iab,b->i", disp, tensor, disp)
            assert np.allclose(exact, pred, atol=5 * h**3)


def test_expected_sq_bias_monte_carlo(rng):
    tensor = rng.standard_normal((2, 3, 3))
    tensor = 0.5 * (tensor + tensor.transpose(0, 2, 1))
    sigma = np.array([[1.0, 0.2, 0.0], [0.2, 0.5, 0.1], [0.0, 0.1, 0.8]])
    w = np.array([[1.0, 0.4], [0.4, 2.0]])
    d = rng.multivariate_normal(np.zeros(3), sigma, size=400_000)
    b = 0.5 * np.einsum("ta,iab,tb->ti", d, tensor, d)
    mc = np.einsum("ti,ij,tj->t", b, w, b)
    exact = expected_sq_bias(tensor, sigma, w)
    assert abs(mc.mean() - exact) <= 5 * mc.std() / np.sqrt(mc.size)


def test_povm_check_rejects_incomplete():
    with pytest.raises(ValidationError):
        POVM(vectors=np.eye(3)[:2].astype(complex)).check()


@pytest.mark.parametrize("n", [2, 4])
def test_shadow_mean_unbiased(n, rng):
    psi = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    psi /= np.linalg.norm(psi)
    count = 100_000
    w = shadow_outer_products(psi, count, rng)
    samples = (n + 1) * np.einsum("ta,tb->tab", w, w.conj()) - np.eye(n)
    mean = samples.mean(axis=0)
    se_re = samples.real.std(axis=0) / np.sqrt(count)
    se_im = samples.imag.std(axis=0) / np.sqrt(count)
    target = np.outer(psi, psi.conj())
    assert np.all(np.abs(mean.real - target.real) <= 5 * se_re + 1e-12)
    assert np.all(np.abs(mean.imag - target.imag) <= 5 * se_im + 1e-12)
    assert np.max(np.linalg.norm(samples, ord=2, axis=(1, 2))) <= n + 1
    assert np.max(np.linalg.norm(samples, axis=(1, 2))) <= n + 1


def test_shadow_helpers_agree(rng):
    psi = np.array([0.6, 0.8j, 0.0])
    m = shadow_mean(psi, 5000, np.random.default_rng(1))
    assert np.trace(m).real == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(m, m.conj().T)
    s = shadow_step(psi, rng)
    assert np.trace(s.estimate).real == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(s.estimate, 2) <= psi.size + 1e-12
    with pytest.raises(ValidationError):
        shadow_mean(psi, 0, rng)
    with pytest.raises(ValidationError):
        shadow_step(np.array([1.0, 1.0]), rng)


def _fit_toy(v, t0):
    res = minimize(lambda t: 1.0 - abs(np.vdot(toy_state(t), v)) ** 2, t0, method="BFGS", options={"gtol": 1e-12})
    return res.x


def test_shadow_fit_covariance_monte_carlo(rng):
    t0 = np.array([0.3, -0.2])
    psi, dpsi, _ = toy_derivs(t0)
    copies, reps = 2000, 300
    errs = []
    for _ in range(reps):
        vec = np.linalg.eigh(shadow_mean(psi, copies, rng))[1][:, -1]
        errs.append(_fit_toy(vec, t0) - t0)
    emp = np.cov(np.array(errs).T)
    pred = shadow_fit_covariance(psi, dpsi, copies)
    assert np.all(np.abs(np.diag(emp) / np.diag(pred) - 1.0) <= 0.25)
    assert np.linalg.norm(emp - pred) <= 0.25 * np.linalg.norm(pred)


def test_debias_table_removes_mean_bias():
    t0 = np.array([0.2, -0.1])
    psi, dpsi, d2 = toy_derivs(t0)
    chol = np.linalg.cholesky(qfim_inverse(qfim_pure(psi, dpsi)))
    for povm, tab in [
        (lambda r: (r.povm, r.table))(matsumoto_from_state(psi, dpsi, np.eye(2), reference=t0)),
        (lambda pv: (pv, canonical_from_state(pv, psi, dpsi, t0)))(fisher_symmetric_povm(psi)),
    ]:
        h = 1e-2
        cov = h**2 * chol @ chol.T
        fixed = debias_table(tab, povm, psi, dpsi, d2, cov)
        assert np.allclose(fixed.estimates - tab.estimates, fixed.estimates[0] - tab.estimates[0], atol=1e-15)
        # symmetric sigma points integrate the quadratic term of the bias exactly
        pts = [s * h * np.sqrt(2.0) * chol[:, a] for a in range(2) for s in (1, -1)]
        raw, new = [], []
        for disp in pts:
            p = povm.probabilities(toy_state(t0 + disp))
            raw.append(p @ tab.estimates - (t0 + disp))
            new.append(p @ fixed.estimates - (t0 + disp))
        raw, new = np.mean(raw, axis=0), np.mean(new, axis=0)
        assert np.linalg.norm(raw) >= 1e-5
        assert np.linalg.norm(new) <= 50 * h**4
