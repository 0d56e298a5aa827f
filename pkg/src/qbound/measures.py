"""Single-copy measurements for pure families: HCRB-attaining, Fisher-symmetric and classical shadows."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from scipy.optimize import minimize

from .bounds import BoundResult, hcrb_pure_state, qfim_inverse
from .infomet import PROB_FLOOR, cfim, outcome_probabilities, qfim_pure
from .numkit import ValidationError, abs_antisymmetric, haar_unitaries, haar_unitary, psd_inv_sqrt, psd_sqrt
from .statemodel import PurifiedFamily

COMPLETENESS_TOL = 1e-8
EFFECT_TOL = 1e-10
IM_EPS = 1e-8
GS_DROP = 1e-10
DESIGNS = ("standard", "min_bias")
DESIGN_RESTARTS = 3


class CompletionError(ValidationError):
    pass


class SingularFisherError(ValidationError):
    pass


@dataclass(frozen=True)
class POVM:
    """Rank-one POVM ``{|v_l><v_l|}``; ``vectors[l]`` is ``v_l``."""

    vectors: np.ndarray

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def effects(self) -> np.ndarray:
        return np.einsum("la,lb->lab", self.vectors, self.vectors.conj())

    def completeness_error(self) -> float:
        tot = self.vectors.T @ self.vectors.conj()
        return float(np.max(np.abs(tot - np.eye(self.dim))))

    def check(self, tol: float = COMPLETENESS_TOL) -> None:
        if not np.all(np.isfinite(self.vectors)):
            raise ValidationError("POVM has non-finite entries")
        err = self.completeness_error()
        if err > tol:
            raise ValidationError(f"POVM effects do not sum to the identity (max deviation {err:.3e})")

    def probabilities(self, psi) -> np.ndarray:
        return np.abs(self.vectors.conj() @ np.asarray(psi)) ** 2


@dataclass(frozen=True)
class EstimatorTable:
    """Outcome-indexed estimates ``estimates[l]`` around ``reference``.

    Only the first ``m`` coordinates (the parameters of interest) are clipped to
    ``clip_radius``. Nuisance coordinates are never read by the protocol and are
    kept exact, so local unbiasedness holds for every coordinate of an unclipped row.
    """

    estimates: np.ndarray
    reference: np.ndarray
    clip_radius: float
    m: int
    n_clipped: int = 0

    @property
    def theta(self) -> np.ndarray:
        return self.estimates[:, : self.m]


def _clip_rows(dev: np.ndarray, radius: float) -> tuple[np.ndarray, int]:
    norms = np.linalg.norm(dev, axis=1)
    over = norms > radius
    if np.any(over):
        dev = dev.copy()
        dev[over] *= (radius / norms[over])[:, None]
    return dev, int(np.sum(over))


def make_table(estimates, reference, clip_radius: float, m: int | None = None) -> EstimatorTable:
    estimates = np.asarray(estimates, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if not np.all(np.isfinite(estimates)):
        raise ValidationError("estimator table has non-finite entries")
    m = estimates.shape[1] if m is None else m
    dev = estimates - reference
    d1, clipped = _clip_rows(dev[:, :m], clip_radius)
    out = reference + np.hstack([d1, dev[:, m:]])
    return EstimatorTable(estimates=out, reference=reference, clip_radius=float(clip_radius), m=m, n_clipped=clipped)


def default_clip_radius(purified: PurifiedFamily) -> float:
    return 10.0 * purified.family.diameter + 10.0


def _real_gram_schmidt(vectors: list[np.ndarray], dim: int) -> np.ndarray:
    """Orthonormal basis whose first columns span ``vectors`` with real mixing coefficients.

    Modified Gram-Schmidt with one re-orthogonalization pass; near-dependent
    vectors are dropped and the basis is completed with an orthonormal
    complement.
    """
    basis: list[np.ndarray] = []
    for v in vectors:
        w = v.astype(complex)
        for _ in range(2):
            for b in basis:
                w = w - np.real(np.vdot(b, w)) * b
        nrm = np.linalg.norm(w)
        if nrm < GS_DROP:
            continue
        basis.append(w / nrm)
    q = np.array(basis).T
    if q.shape[1] < dim:
        q = np.hstack([q, sla.null_space(q.conj().T)])
    return q


def _householder_uniform(dim: int) -> np.ndarray:
    """Real symmetric orthogonal matrix whose first row is the uniform vector ``1/sqrt(dim)``."""
    target = np.full(dim, 1.0 / np.sqrt(dim))
    u = -target
    u[0] += 1.0
    nrm = u @ u
    if nrm < 1e-30:
        return np.eye(dim)
    return np.eye(dim) - 2.0 * np.outer(u, u) / nrm


def second_order_bias(vectors, deviations, psi, dpsi, d2psi) -> np.ndarray:
    """Tensor ``B[i, a, b]`` such that the conditional bias is ``b_i = D^T B_i D / 2`` to second order.

    ``D`` is the chart displacement of the true state from the reference,
    ``vectors`` are rank-one POVM vectors (rows) and ``deviations`` the
    estimate minus reference per outcome. First-order terms vanish for a
    locally unbiased pair.
    """
    vc = np.asarray(vectors, dtype=complex).conj()
    s = vc @ np.asarray(psi, dtype=complex)
    g = vc @ np.atleast_2d(dpsi).T
    t = np.einsum("lk,abk->lab", vc, np.asarray(d2psi, dtype=complex))
    h = 2.0 * np.real(s.conj()[:, None, None] * t + g.conj()[:, :, None] * g[:, None, :])
    return np.einsum("li,lab->iab", np.asarray(deviations, dtype=float), h)


def expected_sq_bias(tensor, sigma, w) -> float:
    """``E[b^T W b]`` for ``b_i = D^T B_i D / 2`` and ``D ~ N(0, sigma)``."""
    tr = np.einsum("iab,ab->i", tensor, sigma)
    cross = np.einsum("iab,bc,jcd,da->ij", tensor, sigma, tensor, sigma)
    return float(0.25 * np.sum(w * (np.outer(tr, tr) + 2.0 * cross)))


def shadow_fit_covariance(psi, dpsi, copies: int) -> np.ndarray:
    """Leading chart covariance of the model state closest to the top eigenvector of a Haar-shadow mean.

    The outcome of one Haar shadow is drawn with weight ``|<b|psi>|^2``, which
    puts complex variance ``2 (N+1)/(N+2)`` on each direction orthogonal to
    ``psi``; projecting onto the tangent space gives ``4 (N+1) / ((N+2) copies) J^-1``.
    """
    psi = np.asarray(psi, dtype=complex)
    n = psi.size
    if copies < 1:
        raise ValidationError("copies must be positive")
    return 4.0 * (n + 1) / ((n + 2) * copies) * qfim_inverse(qfim_pure(psi, dpsi))


def debias_table(table: EstimatorTable, povm: POVM, psi, dpsi, d2psi, cov) -> EstimatorTable:
    """Subtract the mean second-order bias ``tr(B_i cov) / 2`` from every row of the parameters of interest.

    ``cov`` is the covariance of the reference point's chart error. The shift is
    the same for every outcome, so second moments are unchanged.
    """
    m = table.m
    dev = table.estimates[:, :m] - table.reference[:m]
    tensor = second_order_bias(povm.vectors, dev, psi, dpsi, d2psi)
    shift = 0.5 * np.einsum("iab,ab->i", tensor, np.asarray(cov, dtype=float))
    out = table.estimates.copy()
    out[:, :m] -= shift
    return EstimatorTable(estimates=out, reference=table.reference, clip_radius=table.clip_radius, m=m,
                          n_clipped=table.n_clipped)


def _cayley(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    eye = np.eye(a.shape[0])
    inv = np.linalg.inv(eye - a)
    return inv @ (eye + a), inv


def _min_bias_rotation(q, x_ext, dpsi_ext, d2psi_ext, w, sigma, restarts: int, seed: int = 0) -> np.ndarray:
    """Rotation ``R`` fixing the first basis vector that minimises the expected squared bias.

    The outcome basis is ``q @ R @ H`` with ``H`` the uniform Householder
    reflection, so completeness, outcome probabilities at the reference and
    local unbiasedness do not depend on ``R``. The search runs over a Cayley
    chart of ``SO(dim - 1)`` from the identity and a few fixed random starts.
    """
    dim = q.shape[0]
    k = w.shape[0]
    qh = q.conj().T
    house = _householder_uniform(dim)
    c = np.real(qh @ x_ext[:k].T)  # [p, i]
    gam = qh @ dpsi_ext.T  # [p, a]
    tau = np.einsum("pk,abk->pab", qh, d2psi_ext)
    sig0 = qh[:, 0].conj()  # coefficients of psi_ext
    root = np.sqrt(dim)
    iu = np.triu_indices(dim - 1, 1)

    def parts(o):
        dev = root * (o.T @ c)
        s = o.T @ sig0
        g = o.T @ gam
        t = np.einsum("pl,pab->lab", o, tau)
        h = 2.0 * np.real(s.conj()[:, None, None] * t + g.conj()[:, :, None] * g[:, None, :])
        return dev, s, g, t, h

    def fun(vec):
        a = np.zeros((dim - 1, dim - 1))
        a[iu] = vec
        a = a - a.T
        rot, inv = _cayley(a)
        big = np.eye(dim)
        big[1:, 1:] = rot
        o = big @ house
        dev, s, g, t, h = parts(o)
        tensor = np.einsum("li,lab->iab", dev, h)
        tr = np.einsum("iab,ab->i", tensor, sigma)
        sbs = np.einsum("ab,ibc,cd->iad", sigma, tensor, sigma)
        val = 0.25 * np.sum(w * (np.outer(tr, tr) + 2.0 * np.einsum("iab,jba->ij", tensor, sbs)))
        gt = 0.5 * np.einsum("ij,j,ab->iab", w, tr, sigma) + np.einsum("ij,jab->iab", w, sbs)
        hdev = np.einsum("iab,lab->li", gt, h)
        mix = np.einsum("li,iab->lab", dev, gt)
        go = root * c @ hdev.T
        go += 2.0 * np.real(np.einsum("p,lab,lab->pl", sig0.conj(), mix, t))
        go += 2.0 * np.real(np.einsum("lab,pab->pl", mix * s.conj()[:, None, None], tau))
        go += 4.0 * np.real(np.einsum("lab,pa,lb->pl", mix, gam.conj(), g))
        gq = (go @ house.T)[1:, 1:]
        xm = inv.T @ gq @ (np.eye(dim - 1) + rot).T
        return float(val), (xm - xm.T)[iu]

    rng = np.random.default_rng(seed)
    nvar = iu[0].size
    starts = [np.zeros(nvar)] + [0.5 * rng.standard_normal(nvar) for _ in range(restarts)]
    best = None
    for x0 in starts:
        res = minimize(fun, x0, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 400})
        if best is None or res.fun < best.fun:
            best = res
    a = np.zeros((dim - 1, dim - 1))
    a[iu] = best.x
    big = np.eye(dim)
    big[1:, 1:] = _cayley(a - a.T)[0]
    return big


@dataclass
class MatsumotoResult:
    povm: POVM
    table: EstimatorTable
    bound: BoundResult
    achieved: float
    info: dict = field(default_factory=dict)


def matsumoto_from_state(psi, dpsi, w_star, reference=None, m: int | None = None, clip_radius: float = np.inf,
                         eps: float = IM_EPS, design: str = "standard", d2psi=None,
                         restarts: int = DESIGN_RESTARTS) -> MatsumotoResult:
    """HCRB-attaining projective measurement on ``H (+) C^{m*}`` projected back onto ``H``.

    ``design`` picks the outcome basis inside the real span of the locally
    unbiased vectors. ``"standard"`` reflects the reference state onto the
    uniform vector. ``"min_bias"`` additionally rotates the complement to
    minimise the expected squared second-order bias for chart displacements
    distributed as ``N(0, J^-1)``; it needs ``d2psi``. Both give the same
    second moments at the reference.
    """
    if design not in DESIGNS:
        raise ValidationError(f"unknown measurement design {design!r}; expected one of {DESIGNS}")
    if design == "min_bias" and d2psi is None:
        raise ValidationError("the min_bias design needs second derivatives d2psi")
    psi = np.asarray(psi, dtype=complex)
    dpsi = np.atleast_2d(np.asarray(dpsi, dtype=complex))
    mstar, n = dpsi.shape
    reference = np.zeros(mstar) if reference is None else np.asarray(reference, dtype=float)
    w_star = np.asarray(w_star, dtype=float)
    bound = hcrb_pure_state(psi, dpsi, w_star)
    xops = bound.basis.operators(bound.X)
    x = np.einsum("iab,b->ia", xops, psi)
    x = x - np.einsum("a,ia->i", psi.conj(), x)[:, None] * psi[None, :]
    z = x.conj() @ x.T
    t = -z.imag
    t = 0.5 * (t - t.T)
    w_eps = w_star + eps * np.eye(mstar)
    sw = psd_sqrt(w_eps)
    a = sw @ t @ sw
    mm = abs_antisymmetric(a) + 1j * a
    v_anc = psd_sqrt(mm) @ psd_inv_sqrt(w_eps)
    resid = float(np.max(np.abs(np.imag(z + v_anc.conj().T @ v_anc))))
    if resid > 1e-6:
        raise CompletionError(f"ancilla completion leaves imaginary residual {resid:.3e}")
    dim = n + mstar
    psi_ext = np.concatenate([psi, np.zeros(mstar)])
    x_ext = np.hstack([x, v_anc.T])
    q = _real_gram_schmidt([psi_ext] + list(x_ext), dim)
    if design == "min_bias":
        m_eff = mstar if m is None else m
        dpsi_ext = np.hstack([dpsi, np.zeros((mstar, mstar))])
        d2 = np.asarray(d2psi, dtype=complex)
        d2_ext = np.concatenate([d2, np.zeros(d2.shape[:2] + (mstar,))], axis=2)
        sigma = qfim_inverse(qfim_pure(psi, dpsi))
        rot = _min_bias_rotation(q, x_ext, dpsi_ext, d2_ext, w_star[:m_eff, :m_eff], sigma, restarts)
        e = q @ rot @ _householder_uniform(dim)
    else:
        e = q @ _householder_uniform(dim)
    over = np.real(e.conj().T @ x_ext.T)  # [l, i] = <e_l|x_i>
    raw = reference + np.sqrt(dim) * over
    table = make_table(raw, reference, clip_radius, m=m)
    povm = POVM(vectors=e[:n, :].T.copy())
    p = povm.probabilities(psi)
    dev = table.estimates - reference
    achieved = float(np.einsum("l,li,ij,lj->", p, dev, w_star, dev))
    info = {"imag_residual": resid, "ancilla_gram": v_anc.conj().T @ v_anc, "overlaps": e.conj().T @ psi_ext}
    return MatsumotoResult(povm=povm, table=table, bound=bound, achieved=achieved, info=info)


def matsumoto_povm(purified: PurifiedFamily, theta_check, phi_check=None, w_star=None, eps: float = IM_EPS,
                   clip_radius: float | None = None, design: str = "standard") -> MatsumotoResult:
    theta_check = np.asarray(theta_check, dtype=float)
    phi = np.zeros(purified.r**2 - 1) if phi_check is None else np.asarray(phi_check, dtype=float)
    psi, dpsi = purified.psi_and_derivatives(theta_check, phi)
    if w_star is None:
        raise ValidationError("a weight matrix for all m* parameters is required")
    radius = default_clip_radius(purified) if clip_radius is None else clip_radius
    d2psi = purified.psi_hessian(theta_check, phi) if design == "min_bias" else None
    return matsumoto_from_state(psi, dpsi, w_star, reference=np.concatenate([theta_check, phi]),
                                m=purified.m, clip_radius=radius, eps=eps, design=design, d2psi=d2psi)


def _harmonic_vectors(psi: np.ndarray, u: np.ndarray) -> np.ndarray:
    n = psi.size
    size = 2 * n - 1
    j = np.arange(size)[:, None]
    k = np.arange(1, n)[None, :]
    phases = np.exp(2j * np.pi * j * k / size)  # [j, k]
    b = phases @ u.T  # [j, :] = sum_k w^{jk} u_k
    return (psi[None, :] + b) / np.sqrt(size)


def _hermitian_from(vec: np.ndarray, size: int) -> np.ndarray:
    iu = np.triu_indices(size, 1)
    k = iu[0].size
    h = np.zeros((size, size), dtype=complex)
    h[iu] = vec[:k] + 1j * vec[k:2 * k]
    h = h + h.conj().T
    h[np.diag_indices(size)] = vec[2 * k:]
    return h


def _min_bias_complement(psi, dpsi, d2psi, w, m: int, restarts: int, seed: int = 0) -> np.ndarray:
    """Complement basis whose harmonic frame minimises the expected squared second-order bias."""
    u0 = sla.null_space(psi.conj()[None, :])
    size = u0.shape[1]
    info = qfim_pure(psi, dpsi)
    sigma = qfim_inverse(info)
    inv_half = 2.0 * sigma

    def fun(vec):
        u = u0 @ sla.expm(1j * _hermitian_from(vec, size))
        vecs = _harmonic_vectors(psi, u)
        amp = vecs.conj() @ psi
        damp = vecs.conj() @ dpsi.T
        p = np.abs(amp) ** 2
        dp = 2.0 * np.real(amp.conj()[:, None] * damp)
        dev = (dp / np.maximum(p, PROB_FLOOR)[:, None]) @ inv_half[:m].T
        return expected_sq_bias(second_order_bias(vecs, dev, psi, dpsi, d2psi), sigma, w)

    rng = np.random.default_rng(seed)
    starts = [np.zeros(size * size)] + [rng.standard_normal(size * size) for _ in range(restarts)]
    best = None
    for x0 in starts:
        res = minimize(fun, x0, method="BFGS", options={"gtol": 1e-8, "maxiter": 400})
        if best is None or res.fun < best.fun:
            best = res
    return u0 @ sla.expm(1j * _hermitian_from(best.x, size))


def fisher_symmetric_povm(psi, basis=None, design: str = "standard", dpsi=None, d2psi=None, w=None,
                          restarts: int = DESIGN_RESTARTS) -> POVM:
    """``2N - 1`` rank-one effects ``a_j = (psi + b_j)/sqrt(2N-1)`` with a harmonic frame ``b_j`` on ``psi``'s complement.

    Any orthonormal basis of the complement gives a Fisher-symmetric
    measurement. By default it comes from ``null_space``; ``basis`` fixes it
    explicitly, and ``design="min_bias"`` searches for the basis with the
    smallest expected squared second-order bias of the canonical estimator
    for the first ``w.shape[0]`` parameters (needs ``dpsi`` and ``d2psi``).
    """
    psi = np.asarray(psi, dtype=complex)
    n = psi.size
    if n < 2:
        raise ValidationError("need a state of dimension >= 2")
    if abs(np.linalg.norm(psi) - 1.0) > 1e-8:
        raise ValidationError("state vector is not normalized")
    if design not in DESIGNS:
        raise ValidationError(f"unknown measurement design {design!r}; expected one of {DESIGNS}")
    if basis is not None:
        u = np.asarray(basis, dtype=complex)
        if u.shape != (n, n - 1) or np.max(np.abs(u.conj().T @ u - np.eye(n - 1))) > 1e-8 \
                or np.max(np.abs(psi.conj() @ u)) > 1e-8:
            raise ValidationError("basis must be an orthonormal basis of the complement of psi")
    elif design == "min_bias":
        if dpsi is None or d2psi is None:
            raise ValidationError("the min_bias design needs dpsi and d2psi")
        dpsi = np.atleast_2d(np.asarray(dpsi, dtype=complex))
        w = np.eye(dpsi.shape[0]) if w is None else np.atleast_2d(np.asarray(w, dtype=float))
        u = _min_bias_complement(psi, dpsi, np.asarray(d2psi, dtype=complex), w, w.shape[0], restarts)
    else:
        u = sla.null_space(psi.conj()[None, :])  # n x (n-1)
    return POVM(vectors=_harmonic_vectors(psi, u))


def canonical_from_state(povm: POVM, psi, dpsi, reference, m: int | None = None,
                         clip_radius: float = np.inf) -> EstimatorTable:
    """``reference + I^-1 dp_l / p_l`` with analytic outcome derivatives."""
    p, dp = outcome_probabilities(povm, psi=psi, dpsi=dpsi)
    info = cfim(povm, psi=psi, dpsi=dpsi)
    if np.linalg.eigvalsh(info)[0] <= 1e-8:
        raise SingularFisherError("classical Fisher information is singular for this measurement")
    inv = qfim_inverse(info)
    keep = p > PROB_FLOOR
    score = np.where(keep[None, :], dp / np.where(keep, p, 1.0)[None, :], 0.0)
    est = np.asarray(reference, dtype=float) + (inv @ score).T
    return make_table(est, reference, clip_radius, m=m)


def canonical_estimator(povm: POVM, purified: PurifiedFamily, theta_check, phi_check=None,
                        clip_radius: float | None = None) -> EstimatorTable:
    theta_check = np.asarray(theta_check, dtype=float)
    phi = np.zeros(purified.r**2 - 1) if phi_check is None else np.asarray(phi_check, dtype=float)
    psi, dpsi = purified.psi_and_derivatives(theta_check, phi)
    radius = default_clip_radius(purified) if clip_radius is None else clip_radius
    return canonical_from_state(povm, psi, dpsi, np.concatenate([theta_check, phi]), m=purified.m, clip_radius=radius)


# classical shadows -----------------------------------------------------------


@dataclass(frozen=True)
class ShadowSample:
    estimate: np.ndarray
    basis: np.ndarray
    outcome: int


def shadow_step(psi, rng: np.random.Generator) -> ShadowSample:
    """Measure one copy in a Haar-random basis; return ``(N+1) V^dag|s><s|V - 1``."""
    psi = np.asarray(psi, dtype=complex)
    n = psi.size
    if abs(np.linalg.norm(psi) - 1.0) > 1e-8:
        raise ValidationError("state vector is not normalized")
    v = haar_unitary(n, rng)
    p = np.abs(v @ psi) ** 2
    s = int(rng.choice(n, p=p / p.sum()))
    w = v[s].conj()
    est = (n + 1) * np.outer(w, w.conj()) - np.eye(n)
    return ShadowSample(estimate=est, basis=v, outcome=s)


@dataclass
class ShadowAccumulator:
    dim: int
    count: int = 0
    _sum: np.ndarray | None = None

    def __post_init__(self):
        if self._sum is None:
            self._sum = np.zeros((self.dim, self.dim), dtype=complex)

    def add(self, sample: ShadowSample | np.ndarray) -> None:
        est = sample.estimate if isinstance(sample, ShadowSample) else np.asarray(sample)
        self._sum += est
        self.count += 1

    @property
    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValidationError("no shadow samples recorded")
        m = self._sum / self.count
        return 0.5 * (m + m.conj().T)


def shadow_outer_products(psi, count: int, rng: np.random.Generator) -> np.ndarray:
    """Rank-one parts ``V^dag|s>`` of ``count`` shadows, shape ``(count, N)``."""
    psi = np.asarray(psi, dtype=complex)
    n = psi.size
    v = haar_unitaries(count, n, rng)
    p = np.abs(v @ psi) ** 2
    cdf = np.cumsum(p, axis=1)
    u = rng.random(count) * cdf[:, -1]
    s = np.minimum(np.sum(cdf < u[:, None], axis=1), n - 1)
    return v[np.arange(count), s].conj()


def shadow_mean(psi, count: int, rng: np.random.Generator, chunk: int = 4096) -> np.ndarray:
    """Mean of ``count`` independent single-copy shadows."""
    if count < 1:
        raise ValidationError("need at least one shadow")
    n = np.asarray(psi).size
    tot = np.zeros((n, n), dtype=complex)
    done = 0
    while done < count:
        k = min(chunk, count - done)
        w = shadow_outer_products(psi, k, rng)
        tot += w.T @ w.conj()
        done += k
    m = (n + 1) * tot / count - np.eye(n)
    return 0.5 * (m + m.conj().T)
