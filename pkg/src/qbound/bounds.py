"""Quantum and Holevo Cramer-Rao bounds, and numerical checks of the purification identities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .infomet import qfim_mixed, qfim_pure
from .numkit import TOL, ValidationError, psd_sqrt, trace_norm
from .sdpcore import SDPProblem, SDPSolution, realify_hermitian_block, solve_sdp
from .statemodel import PurifiedFamily, StateFamily, purify, spectral

COND_THRESHOLD = 1e-8
S_MIN_EIG = 1e-10
FORM_TOL = 1e-6


class ConditioningError(ValidationError):
    pass


class SolverError(RuntimeError):
    def __init__(self, solution: SDPSolution):
        super().__init__(f"SDP solver ended with status {solution.status!r} {solution.detail}".rstrip())
        self.solution = solution


@dataclass(frozen=True)
class HermBasis:
    """Hilbert-Schmidt orthonormal Hermitian operators ``G_i`` with ``P_perp G P_perp = 0``.

    ``local`` holds the operators in the eigenbasis of ``rho`` (support first);
    ``ops`` holds them in the original probe basis.
    """

    ops: np.ndarray
    local: np.ndarray
    eigbasis: np.ndarray
    r: int

    @property
    def K(self) -> int:
        return self.ops.shape[0]

    def operators(self, coeffs: np.ndarray) -> np.ndarray:
        """``X_j = sum_i coeffs[i, j] G_i``, shape ``(m, d, d)``."""
        return np.einsum("ij,iab->jab", np.asarray(coeffs), self.ops)


def herm_basis(eigbasis: np.ndarray, r: int) -> HermBasis:
    d = eigbasis.shape[0]
    s2 = 1.0 / np.sqrt(2.0)
    local = []
    for k in range(r):
        g = np.zeros((d, d), dtype=complex)
        g[k, k] = 1.0
        local.append(g)
    # pairs inside the support block and support/null pairs; K = 2dr - r^2
    for k in range(r):
        for l in range(k + 1, d):
            g = np.zeros((d, d), dtype=complex)
            g[k, l] = g[l, k] = s2
            local.append(g)
            g = np.zeros((d, d), dtype=complex)
            g[k, l], g[l, k] = -1j * s2, 1j * s2
            local.append(g)
    local = np.array(local)
    ops = np.einsum("ak,ikl,bl->iab", eigbasis, local, eigbasis.conj())
    return HermBasis(ops=ops, local=local, eigbasis=eigbasis, r=r)


@dataclass(frozen=True)
class HCRBData:
    S: np.ndarray
    D: np.ndarray
    basis: HermBasis
    lam: np.ndarray

    @property
    def K(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.D.shape[1]


@dataclass
class BoundResult:
    value: float
    X: np.ndarray
    Z: np.ndarray
    V: np.ndarray
    gap: float
    solution: SDPSolution | None = None
    basis: HermBasis | None = None
    extras: dict = field(default_factory=dict)

    def holevo_form(self, w) -> float:
        """``Tr(W Re Z) + ||sqrt(W) Im Z sqrt(W)||_1`` evaluated at the optimizer."""
        return holevo_function(self.Z, w)


def holevo_function(z, w) -> float:
    z = np.asarray(z)
    ws = psd_sqrt(np.asarray(w, dtype=float))
    return float(np.trace(w @ z.real)) + trace_norm(ws @ z.imag @ ws)


def hcrb_data(lam, eigbasis, drho) -> HCRBData:
    """``S_ij = Tr(G_i G_j rho)`` and ``D_ij = Tr(G_i d_j rho)`` from a support eigen-decomposition."""
    lam = np.asarray(lam, dtype=float)
    r = lam.size
    d = eigbasis.shape[0]
    hb = herm_basis(eigbasis, r)
    lam_full = np.concatenate([lam, np.zeros(d - r)])
    g = hb.local
    S = np.einsum("iab,jbc,c,ca->ij", g, g, lam_full, np.eye(d))
    S = 0.5 * (S + S.conj().T)
    dloc = np.einsum("ak,jab,bl->jkl", eigbasis.conj(), drho, eigbasis)
    D = np.real(np.einsum("iab,jba->ij", g, dloc))
    # S itself is singular when d > r (support/kernel pairs give complex-parallel
    # vectors G sqrt(rho)); its real part is the Gram matrix over the reals and must be definite
    smin = np.linalg.eigvalsh(S.real)[0]
    if smin <= S_MIN_EIG:
        raise ConditioningError(f"Re S is numerically singular (min eigenvalue {smin:.3e})")
    return HCRBData(S=S, D=D, basis=hb, lam=lam)


def mixed_data(family: StateFamily, theta) -> HCRBData:
    sd = spectral(family, theta)
    return hcrb_data(sd.lam, sd.basis, sd.drho)


def _complement(psi: np.ndarray) -> np.ndarray:
    q = sla.null_space(psi.conj()[None, :])
    return np.hstack([psi[:, None], q])


def pure_data(psi, dpsi) -> HCRBData:
    psi = np.asarray(psi, dtype=complex)
    dpsi = np.atleast_2d(np.asarray(dpsi, dtype=complex))
    drho = np.einsum("ia,b->iab", dpsi, psi.conj())
    drho = drho + drho.conj().transpose(0, 2, 1)
    return hcrb_data(np.ones(1), _complement(psi), drho)


def qfim_inverse(j: np.ndarray) -> np.ndarray:
    jmin = np.linalg.eigvalsh(j)[0]
    if jmin <= COND_THRESHOLD:
        raise ConditioningError(f"QFIM is near singular (min eigenvalue {jmin:.3e})")
    c = sla.cho_factor(j)
    inv = sla.cho_solve(c, np.eye(j.shape[0]))
    return 0.5 * (inv + inv.T)


def qcrb_from_qfim(j, w) -> float:
    return float(np.trace(np.asarray(w, dtype=float) @ qfim_inverse(j)))


def qcrb(family: StateFamily, theta, w) -> float:
    """``Tr(W J^-1)``."""
    w = check_weight(w, family.m)
    return qcrb_from_qfim(qfim_mixed(spectral(family, theta)), w)


def check_weight(w, m: int, allow_singular: bool = False) -> np.ndarray:
    w = np.atleast_2d(np.asarray(w, dtype=float))
    if w.shape != (m, m):
        raise ValidationError(f"weight must be {m}x{m}, got {w.shape}")
    if not np.all(np.isfinite(w)) or np.max(np.abs(w - w.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(w))):
        raise ValidationError("weight matrix must be finite and symmetric")
    w = 0.5 * (w + w.T)
    lmin = np.linalg.eigvalsh(w)[0]
    scale = max(1.0, float(np.max(np.abs(w))))
    if allow_singular:
        if lmin < -TOL.psd_fail * scale:
            raise ValidationError("weight matrix must be positive semidefinite")
    elif lmin <= 0:
        raise ValidationError("weight matrix must be positive definite")
    return w


def embed_weight(w, r: int) -> np.ndarray:
    """``W`` in the upper-left block of an ``(m + r^2 - 1)``-square zero matrix."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    if np.max(np.abs(w - w.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(w))):
        raise ValidationError("weight matrix must be symmetric")
    m = w.shape[0]
    out = np.zeros((m + r * r - 1, m + r * r - 1))
    out[:m, :m] = w
    return out


@dataclass
class HCRBProblem:
    """An assembled HCRB program plus what is needed to read the optimizer back."""

    sdp: SDPProblem
    data: HCRBData
    w_eff: np.ndarray  # weight on the reduced coordinates
    P: np.ndarray  # m x k, orthonormal columns spanning the weight range
    k: int
    real_only: bool = False

    def unpack(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k, K = self.k, self.data.K
        iu = np.triu_indices(k)
        v = np.zeros((k, k))
        v[iu] = x[: iu[0].size]
        v = v + v.T - np.diag(np.diag(v))
        y = x[iu[0].size :].reshape(K, k)
        return v, y


def _weight_range(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lam, vecs = np.linalg.eigh(w)
    scale = max(1.0, float(np.max(np.abs(lam))))
    keep = lam > 1e-12 * scale
    if np.all(keep):
        return np.eye(w.shape[0]), w
    p = vecs[:, keep]
    return p, np.diag(lam[keep])


def assemble_from_data(data: HCRBData, w, real_only: bool = False) -> HCRBProblem:
    """LMI ``[[V, Y^T R], [R Y, 1_K]] >= 0`` with ``R = sqrt(S)`` and ``Y^T D = P^T``.

    For positive definite ``W`` the reduced coordinates are the original ones
    (``P = 1``, ``Y = X``). For singular ``W`` only the range of ``W`` enters the
    objective, so ``V`` and ``Y = X P`` live on that range; the remaining columns
    of ``X`` are unconstrained by the objective and are filled in afterwards.
    With ``real_only`` the imaginary part of ``S`` is dropped.
    """
    K, m = data.K, data.m
    p, w_eff = _weight_range(w)
    k = p.shape[1]
    s = data.S.real if real_only else data.S
    rt = psd_sqrt(s)
    iu = np.triu_indices(k)
    nv = iu[0].size
    n = nv + K * k
    dim = k + K
    mats = np.zeros((n + 1, dim, dim), dtype=complex)
    mats[0, k:, k:] = np.eye(K)
    c = np.zeros(n)
    for idx, (a, b) in enumerate(zip(*iu)):
        mats[1 + idx, a, b] = mats[1 + idx, b, a] = 1.0
        c[idx] = w_eff[a, a] if a == b else 2.0 * w_eff[a, b]
    for i in range(K):
        for j in range(k):
            col = rt[:, i]  # R Y contributes Y[i, j] * R[:, i] in column j
            mt = np.zeros((dim, dim), dtype=complex)
            mt[k:, j] = col
            mt[j, k:] = col.conj()
            mats[1 + nv + i * k + j] = mt
    blocks = [realify_hermitian_block(mats)]
    # Y^T D = P^T : rows indexed by (j, l)
    A = np.zeros((k * m, n))
    b = np.zeros(k * m)
    for j in range(k):
        for l in range(m):
            row = j * m + l
            A[row, nv + np.arange(K) * k + j] = data.D[:, l]
            b[row] = p[l, j]
    sdp = SDPProblem(c=c, blocks=blocks, A=A, b=b, title="hcrb")
    return HCRBProblem(sdp=sdp, data=data, w_eff=w_eff, P=p, k=k, real_only=real_only)


def assemble_hcrb(family: StateFamily, theta, w, real_only: bool = False) -> HCRBProblem:
    w = check_weight(w, family.m)
    return assemble_from_data(mixed_data(family, theta), w, real_only=real_only)


def _complete_x(data: HCRBData, y: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Full ``X`` with ``X P = Y`` and ``X^T D = 1``; free columns take the S-weighted minimum-norm solution."""
    m = data.m
    k = p.shape[1]
    if k == m:
        return y @ p.T
    q = sla.null_space(p.T)
    # X = Y P^T + Xc Q^T with Xc^T D = Q^T
    sinv_d = np.linalg.solve(data.S.real, data.D)
    xc = sinv_d @ np.linalg.solve(data.D.T @ sinv_d, q)
    return y @ p.T + xc @ q.T


def solve_hcrb(prob: HCRBProblem, w) -> BoundResult:
    sol = solve_sdp(prob.sdp)
    if not sol.ok:
        raise SolverError(sol)
    v_eff, y = prob.unpack(sol.x)
    x = _complete_x(prob.data, y, prob.P)
    s = prob.data.S.real if prob.real_only else prob.data.S
    z = x.T @ s @ x
    z = 0.5 * (z + z.conj().T)
    value = float(sol.primal)
    full_rank = prob.k == prob.data.m
    v = prob.P @ v_eff @ prob.P.T if full_rank else v_eff
    res = BoundResult(value=value, X=x, Z=z, V=v, gap=float(sol.gap), solution=sol, basis=prob.data.basis)
    res.extras["relative_gap"] = abs(sol.gap) / max(1.0, abs(value))
    if not prob.real_only:
        hf = holevo_function(z, w)
        res.extras["holevo_form"] = hf
        if hf > value + FORM_TOL * max(1.0, abs(value)):
            raise SolverError(
                SDPSolution(x=sol.x, primal=value, dual=sol.dual, gap=sol.gap, status="inconsistent",
                            detail=f"closed-form value {hf:.10g} exceeds SDP value {value:.10g}")
            )
    return res


def hcrb_mixed(family: StateFamily, theta, w, real_only: bool = False) -> BoundResult:
    w = check_weight(w, family.m)
    prob = assemble_from_data(mixed_data(family, theta), w, real_only=real_only)
    return solve_hcrb(prob, w)


def hcrb_pure(purified: PurifiedFamily, theta, phi, w_star) -> BoundResult:
    """HCRB of the pure family at ``(theta, phi)`` for a positive semidefinite ``W*``."""
    w_star = check_weight(w_star, purified.m_star, allow_singular=True)
    psi, dpsi = purified.psi_and_derivatives(theta, phi)
    return hcrb_pure_state(psi, dpsi, w_star)


def hcrb_pure_state(psi, dpsi, w) -> BoundResult:
    data = pure_data(psi, dpsi)
    w = check_weight(w, data.m, allow_singular=True)
    return solve_hcrb(assemble_from_data(data, w), w)


@dataclass
class Theorem1Record:
    residual1: float
    residual2: float
    c_h_mixed: float
    c_h_pure: float
    jinv_mixed: np.ndarray
    jinv_pure_ss: np.ndarray


def verify_theorem1(family: StateFamily, theta, u_env, w, corrupt_derivative: bool = False) -> Theorem1Record:
    """Compare ``J(rho)^-1`` with ``(J(psi)^-1)_SS`` and ``C_H(rho, W)`` with ``C_H(psi, W*)`` at ``phi = 0``.

    ``corrupt_derivative`` perturbs the first pure-state derivative, as a negative control.
    """
    theta = np.asarray(theta, dtype=float)
    w = check_weight(w, family.m)
    pf = purify(family, theta, u_env)
    psi, dpsi = pf.psi_and_derivatives(theta)
    if corrupt_derivative:
        dpsi = dpsi.copy()
        dpsi[0] = 1.1 * dpsi[0] + 0.05 * psi
    jinv_mixed = qfim_inverse(qfim_mixed(spectral(family, theta)))
    jinv_pure = qfim_inverse(qfim_pure(psi, dpsi))
    m = family.m
    ss = jinv_pure[:m, :m]
    res1 = float(np.max(np.abs(jinv_mixed - ss)))
    ch_mixed = hcrb_mixed(family, theta, w).value
    ch_pure = hcrb_pure_state(psi, dpsi, embed_weight(w, family.r)).value
    res2 = abs(ch_mixed - ch_pure) / abs(ch_mixed)
    return Theorem1Record(
        residual1=res1,
        residual2=float(res2),
        c_h_mixed=ch_mixed,
        c_h_pure=ch_pure,
        jinv_mixed=jinv_mixed,
        jinv_pure_ss=ss,
    )
