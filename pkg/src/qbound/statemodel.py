"""Parameterized mixed-state families, their spectral calculus and purification.

Vectors on the purified space are ordered ``probe (x) env`` with the probe index
slow, i.e. ``psi[s * r + e]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm, expm_frechet

from .numkit import ValidationError

RANK_THRESHOLD = 1e-8
GAP_THRESHOLD = 1e-8

PAULI = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)


class DegeneracyError(ValidationError):
    """Two positive eigenvalues (or a positive one and zero) are closer than the gap threshold."""

    def __init__(self, i: int, j: int, gap: float):
        super().__init__(f"eigenvalues {i} and {j} collide (gap {gap:.3e} < {GAP_THRESHOLD:g})")
        self.pair = (i, j)
        self.gap = gap


class RankError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


@dataclass(frozen=True)
class StateFamily:
    """A smooth family ``theta -> rho_theta`` with analytic first derivatives.

    ``lower``/``upper`` bound the parameter domain; ``inside`` can carve a
    smaller open subset out of that box (the Bloch families use a shell).
    """

    name: str
    d: int
    r: int
    m: int
    lower: np.ndarray
    upper: np.ndarray
    rho_fn: Callable[[np.ndarray], np.ndarray]
    drho_fn: Callable[[np.ndarray], np.ndarray]
    inside: Callable[[np.ndarray], bool] | None = None
    params: dict = field(default_factory=dict)

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.m,) or not np.all(np.isfinite(theta)):
            return False
        if np.any(theta <= self.lower) or np.any(theta >= self.upper):
            return False
        return True if self.inside is None else bool(self.inside(theta))

    def _shape(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.m,):
            raise DomainError(f"{self.name}: expected {self.m} parameters, got shape {theta.shape}")
        return theta

    def require(self, theta) -> np.ndarray:
        """Return ``theta`` as an array, raising if it lies outside the domain."""
        theta = self._shape(theta)
        if not self.contains(theta):
            raise DomainError(f"{self.name}: theta={theta.tolist()} lies outside the parameter domain")
        return theta

    def rho_at(self, theta) -> np.ndarray:
        return np.asarray(self.rho_fn(self._shape(theta)), dtype=complex)

    def drho_at(self, theta) -> np.ndarray:
        """Stack of ``m`` Hermitian derivatives, shape ``(m, d, d)``."""
        return np.asarray(self.drho_fn(self._shape(theta)), dtype=complex)

    def sample_theta(self, rng: np.random.Generator, max_tries: int = 10_000) -> np.ndarray:
        for _ in range(max_tries):
            theta = rng.uniform(self.lower, self.upper)
            if self.contains(theta):
                return theta
        raise DomainError(f"{self.name}: rejection sampling of the domain failed")

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def validate_at(self, theta, tol: float = 1e-10) -> None:
        """Check the state invariants (trace, positivity, rank, spectral gaps)."""
        rho = self.rho_at(theta)
        drho = self.drho_at(theta)
        if abs(np.trace(rho) - 1) > tol:
            raise ValidationError(f"{self.name}: trace {np.trace(rho).real:.12f} != 1")
        if np.max(np.abs(rho - rho.conj().T)) > 1e-12:
            raise ValidationError(f"{self.name}: rho is not Hermitian")
        for j, dr in enumerate(drho):
            if abs(np.trace(dr)) > tol:
                raise ValidationError(f"{self.name}: derivative {j} is not traceless")
        w = np.linalg.eigvalsh(rho)
        if w[0] < -tol:
            raise ValidationError(f"{self.name}: rho has negative eigenvalue {w[0]:.3e}")
        spectral(self, theta)


def _bloch_rho(v: np.ndarray) -> np.ndarray:
    return 0.5 * (np.eye(2) + np.einsum("i,ijk->jk", v, PAULI))


def _shell(lo: float, hi: float, fixed: Sequence[float] = ()) -> Callable[[np.ndarray], bool]:
    def inside(theta: np.ndarray) -> bool:
        nrm = np.sqrt(np.sum(theta**2) + sum(f * f for f in fixed))
        return lo < nrm < hi

    return inside


def bloch3() -> StateFamily:
    return StateFamily(
        name="bloch3",
        d=2,
        r=2,
        m=3,
        lower=np.full(3, -0.85),
        upper=np.full(3, 0.85),
        rho_fn=_bloch_rho,
        drho_fn=lambda t: 0.5 * PAULI,
        inside=_shell(0.15, 0.85),
    )


def bloch2(z: float = 0.5) -> StateFamily:
    """``bloch3`` with the third Bloch coordinate frozen at ``z``."""
    radius = np.sqrt(0.85**2 - z * z)
    return StateFamily(
        name="bloch2",
        d=2,
        r=2,
        m=2,
        lower=np.full(2, -radius),
        upper=np.full(2, radius),
        rho_fn=lambda t: _bloch_rho(np.array([t[0], t[1], z])),
        drho_fn=lambda t: 0.5 * PAULI[:2],
        inside=_shell(0.15, 0.85, fixed=(z,)),
        params={"z": z},
    )


def simplex(d: int, margin: float = 0.02) -> StateFamily:
    """Diagonal ``rho = diag(p_1, ..., p_{d-1}, 1 - sum p)``.

    The domain keeps every probability above ``margin`` and every pair of
    probabilities at least ``margin`` apart, so the spectrum is regular.
    """
    if d < 2:
        raise ValidationError("simplex needs d >= 2")

    def probs(t):
        return np.append(t, 1.0 - np.sum(t))

    def inside(t):
        p = probs(t)
        if np.any(p <= margin):
            return False
        diffs = np.abs(p[:, None] - p[None, :])[np.triu_indices(d, 1)]
        return bool(np.all(diffs > margin))

    def drho(t):
        out = np.zeros((d - 1, d, d))
        for j in range(d - 1):
            out[j, j, j] = 1.0
            out[j, d - 1, d - 1] = -1.0
        return out

    return StateFamily(
        name="simplex",
        d=d,
        r=d,
        m=d - 1,
        lower=np.zeros(d - 1),
        upper=np.ones(d - 1),
        rho_fn=lambda t: np.diag(probs(t)).astype(complex),
        drho_fn=drho,
        inside=inside,
        params={"d": d},
    )


def qutrit_embed() -> StateFamily:
    """``bloch3`` placed in the upper 2x2 block of a qutrit (rank 2 < d = 3)."""

    def embed(m2):
        out = np.zeros(m2.shape[:-2] + (3, 3), dtype=complex)
        out[..., :2, :2] = m2
        return out

    return StateFamily(
        name="qutrit_embed",
        d=3,
        r=2,
        m=3,
        lower=np.full(3, -0.85),
        upper=np.full(3, 0.85),
        rho_fn=lambda t: embed(_bloch_rho(t)),
        drho_fn=lambda t: embed(0.5 * PAULI),
        inside=_shell(0.15, 0.85),
    )


def pure_phase() -> StateFamily:
    """``psi = (cos t1, e^{i t2} sin t1)``, a rank-one qubit family."""

    def vec(t):
        return np.array([np.cos(t[0]), np.exp(1j * t[1]) * np.sin(t[0])])

    def dvec(t):
        return np.array(
            [
                [-np.sin(t[0]), np.exp(1j * t[1]) * np.cos(t[0])],
                [0.0, 1j * np.exp(1j * t[1]) * np.sin(t[0])],
            ]
        )

    def rho(t):
        v = vec(t)
        return np.outer(v, v.conj())

    def drho(t):
        v, dv = vec(t), dvec(t)
        return np.array([np.outer(x, v.conj()) + np.outer(v, x.conj()) for x in dv])

    return StateFamily(
        name="pure_phase",
        d=2,
        r=1,
        m=2,
        lower=np.array([0.1, -3.0]),
        upper=np.array([np.pi / 2 - 0.1, 3.0]),
        rho_fn=rho,
        drho_fn=drho,
    )


BUILTINS = ("bloch3", "bloch2", "simplex", "qutrit_embed", "pure_phase")


def builtin_family(name: str, **params) -> StateFamily:
    if name == "bloch3":
        return bloch3()
    if name == "bloch2":
        return bloch2(**params)
    if name == "simplex":
        return simplex(**params)
    if name == "qutrit_embed":
        return qutrit_embed()
    if name == "pure_phase":
        return pure_phase()
    raise ValidationError(f"unknown family {name!r}; expected one of {', '.join(BUILTINS)}")


def linear_reparam(family: StateFamily, b: np.ndarray) -> StateFamily:
    """Family in the coordinates ``theta' = B theta`` (domain box is not tight)."""
    b = np.asarray(b, dtype=float)
    binv = np.linalg.inv(b)
    corners = np.array(np.meshgrid(*zip(family.lower, family.upper))).reshape(family.m, -1)
    mapped = b @ corners
    return replace(
        family,
        name=family.name + "_reparam",
        lower=mapped.min(axis=1) - 1e-9,
        upper=mapped.max(axis=1) + 1e-9,
        rho_fn=lambda t: family.rho_fn(binv @ t),
        drho_fn=lambda t: np.einsum("jk,jab->kab", binv, family.drho_fn(binv @ t)),
        inside=lambda t: family.contains(binv @ t),
    )


@dataclass(frozen=True)
class SpectralData:
    """Support eigen-decomposition of ``rho_theta`` and its first derivatives.

    ``vecs[:, j]`` is the eigenvector for ``lam[j]`` (descending). ``dvecs[i][:, j]``
    is its derivative along ``theta_i`` in the gauge ``<e_j|d e_j> = 0``.
    ``null`` completes ``vecs`` to an orthonormal basis of the probe space.
    """

    lam: np.ndarray
    vecs: np.ndarray
    null: np.ndarray
    dlam: np.ndarray
    dvecs: np.ndarray
    drho: np.ndarray

    @property
    def d(self) -> int:
        return self.vecs.shape[0]

    @property
    def r(self) -> int:
        return self.lam.shape[0]

    @property
    def m(self) -> int:
        return self.drho.shape[0]

    @property
    def basis(self) -> np.ndarray:
        return np.hstack([self.vecs, self.null])

    @property
    def lam_full(self) -> np.ndarray:
        return np.concatenate([self.lam, np.zeros(self.d - self.r)])

    @property
    def rho(self) -> np.ndarray:
        return (self.vecs * self.lam) @ self.vecs.conj().T

    def regauge(self, phases) -> "SpectralData":
        """Multiply each support eigenvector (and its derivative) by ``exp(i phase_j)``."""
        u = np.exp(1j * np.asarray(phases, dtype=float))
        return replace(self, vecs=self.vecs * u, dvecs=self.dvecs * u)


def _largest_real_positive(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    c = vecs[idx, np.arange(vecs.shape[1])]
    return vecs * (np.conj(c) / np.abs(c))


def support_eig(rho: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Descending support eigenvalues, support eigenvectors and a null-space basis."""
    w, v = np.linalg.eigh(rho)
    w, v = w[::-1], v[:, ::-1]
    npos = int(np.sum(w > RANK_THRESHOLD))
    if npos != r:
        raise RankError(f"expected rank {r}, found {npos} eigenvalues above {RANK_THRESHOLD:g}")
    for j in range(r - 1):
        if w[j] - w[j + 1] < GAP_THRESHOLD:
            raise DegeneracyError(j, j + 1, float(w[j] - w[j + 1]))
    return w[:r].copy(), _largest_real_positive(v[:, :r]), v[:, r:].copy()


def spectral(family: StateFamily, theta) -> SpectralData:
    rho = family.rho_at(theta)
    drho = family.drho_at(theta)
    lam, vecs, null = support_eig(rho, family.r)
    basis = np.hstack([vecs, null])
    lam_full = np.concatenate([lam, np.zeros(family.d - family.r)])
    # matrix elements <e_k| d_i rho |e_j> in the full eigenbasis
    a = np.einsum("ak,iab,bj->ikj", basis.conj(), drho, basis)
    dlam = np.real(np.einsum("ijj->ji", a[:, : family.r, : family.r]))
    denom = lam[None, :] - lam_full[:, None]  # [k, j] = lam_j - lam_k
    mask = np.ones_like(denom, dtype=bool)
    mask[np.arange(family.r), np.arange(family.r)] = False
    coef = np.where(mask, a[:, :, : family.r] / np.where(mask, denom, 1.0), 0.0)
    dvecs = np.einsum("ak,ikj->iaj", basis, coef)
    return SpectralData(lam=lam, vecs=vecs, null=null, dlam=dlam, dvecs=dvecs, drho=drho)


def gellmann_generators(r: int) -> np.ndarray:
    """Generalized Gell-Mann basis with ``Tr(H_i H_j) = 2 delta_ij``, shape ``(r^2-1, r, r)``.

    Order: symmetric off-diagonals, antisymmetric off-diagonals (pairwise
    interleaved per index pair), then the diagonal ones. For ``r = 2`` this is
    ``(X, Y, Z)``.
    """
    if r < 1:
        raise ValidationError("rank must be >= 1")
    gens = []
    for j in range(r):
        for k in range(j + 1, r):
            s = np.zeros((r, r), dtype=complex)
            s[j, k] = s[k, j] = 1.0
            a = np.zeros((r, r), dtype=complex)
            a[j, k], a[k, j] = -1j, 1j
            gens.extend([s, a])
    for l in range(1, r):
        diag = np.zeros(r)
        diag[:l] = 1.0
        diag[l] = -l
        gens.append(np.diag(diag * np.sqrt(2.0 / (l * (l + 1)))).astype(complex))
    return np.array(gens).reshape(r * r - 1, r, r)


def _env_unitary(generators: np.ndarray, phi: np.ndarray) -> np.ndarray:
    if generators.shape[0] == 0:
        return np.eye(generators.shape[1] if generators.ndim == 3 else 1, dtype=complex)
    h = np.einsum("i,ijk->jk", phi, generators)
    return expm(-1j * h)


def purified_state(family: StateFamily, theta, u: np.ndarray) -> np.ndarray:
    """``sum_j sqrt(lam_j) e_j (x) U|j>`` in the default eigenvector gauge."""
    lam, vecs, _ = support_eig(family.rho_at(theta), family.r)
    return ((vecs * np.sqrt(lam)) @ np.asarray(u).T).reshape(-1)


@dataclass(frozen=True)
class PurifiedFamily:
    """Pure family ``psi_{theta, phi}`` on ``probe (x) env`` with ``r^2 - 1`` nuisance parameters.

    Eigenvector phases follow the anchor ``theta_ref``: each ``e_j(theta)`` is
    rotated so that ``<e_j(theta_ref)|e_j(theta)>`` is real positive. At the
    anchor this coincides with the parallel-transport gauge, so analytic and
    finite-difference derivatives agree there.
    """

    family: StateFamily
    theta_ref: np.ndarray
    u_env: np.ndarray
    generators: np.ndarray
    ref_vecs: np.ndarray

    @property
    def d(self) -> int:
        return self.family.d

    @property
    def r(self) -> int:
        return self.family.r

    @property
    def m(self) -> int:
        return self.family.m

    @property
    def m_star(self) -> int:
        return self.family.m + self.family.r**2 - 1

    @property
    def dim(self) -> int:
        return self.family.d * self.family.r

    def _aligned(self, theta) -> tuple[SpectralData, np.ndarray, np.ndarray]:
        sd = spectral(self.family, theta)
        w = np.einsum("aj,aj->j", sd.vecs.conj(), self.ref_vecs)
        if np.any(np.abs(w) < 1e-6):
            raise ValidationError("eigenvectors rotated too far from the anchor to align phases")
        u = w / np.abs(w)
        dw = np.einsum("iaj,aj->ij", sd.dvecs.conj(), self.ref_vecs)
        dvecs = (sd.dvecs + 1j * np.imag(dw / w)[:, None, :] * sd.vecs[None]) * u
        return sd, sd.vecs * u, dvecs

    def _phi(self, phi) -> np.ndarray:
        if phi is None:
            return np.zeros(self.r**2 - 1)
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.r**2 - 1,):
            raise ValidationError(f"expected {self.r**2 - 1} nuisance parameters")
        return phi

    def effective_generators(self, phi=None) -> np.ndarray:
        """``i (d_k U_phi) U_phi^dagger``; equals the Gell-Mann generators at ``phi = 0``."""
        phi = self._phi(phi)
        if np.all(phi == 0) or self.r == 1:
            return self.generators
        h = np.einsum("i,ijk->jk", phi, self.generators)
        u = expm(-1j * h)
        return np.array([1j * expm_frechet(-1j * h, -1j * g, compute_expm=False) @ u.conj().T for g in self.generators])

    def psi_at(self, theta, phi=None) -> np.ndarray:
        phi = self._phi(phi)
        sd, vecs, _ = self._aligned(theta)
        uphi = _env_unitary(self.generators, phi) @ self.u_env
        return ((vecs * np.sqrt(sd.lam)) @ uphi.T).reshape(-1)

    def dpsi_at(self, theta, phi=None) -> np.ndarray:
        """Derivatives along ``(theta, phi)``, shape ``(m*, d*r)``."""
        return self.psi_and_derivatives(theta, phi)[1]

    def psi_and_derivatives(self, theta, phi=None) -> tuple[np.ndarray, np.ndarray]:
        phi = self._phi(phi)
        sd, vecs, dvecs = self._aligned(theta)
        sq = np.sqrt(sd.lam)
        uphi = _env_unitary(self.generators, phi) @ self.u_env
        mat = (vecs * sq) @ uphi.T
        dth = np.einsum("iaj,jb->iab", dvecs * sq + vecs[None] * (sd.dlam.T / (2 * sq))[:, None, :], uphi.T)
        if self.r > 1:
            h = np.einsum("i,ijk->jk", phi, self.generators)
            if np.all(phi == 0):
                dus = np.array([-1j * g for g in self.generators])
            else:
                dus = np.array([expm_frechet(-1j * h, -1j * g, compute_expm=False) for g in self.generators])
            dphi = np.einsum("aj,ibj->iab", vecs * sq, dus @ self.u_env)
            derivs = np.concatenate([dth, dphi])
        else:
            derivs = dth
        return mat.reshape(-1), derivs.reshape(derivs.shape[0], -1)

    def psi_hessian(self, theta, phi=None, step: float = 1e-5) -> np.ndarray:
        """Second derivatives along ``(theta, phi)``, shape ``(m*, m*, d*r)``, by central differences of the gradient."""
        theta = np.asarray(theta, dtype=float)
        phi = self._phi(phi)
        point = np.concatenate([theta, phi])
        m = self.m
        cols = []
        for b in range(point.size):
            shift = np.zeros_like(point)
            shift[b] = step
            hi, lo = point + shift, point - shift
            dp = self.psi_and_derivatives(hi[:m], hi[m:])[1]
            dm = self.psi_and_derivatives(lo[:m], lo[m:])[1]
            cols.append((dp - dm) / (2 * step))
        hess = np.stack(cols, axis=1)
        return 0.5 * (hess + hess.transpose(1, 0, 2))


def purify(family: StateFamily, theta, u_env=None) -> PurifiedFamily:
    theta = np.asarray(theta, dtype=float)
    u = np.eye(family.r, dtype=complex) if u_env is None else np.asarray(u_env, dtype=complex)
    if u.shape != (family.r, family.r):
        raise ValidationError(f"environment unitary must be {family.r}x{family.r}")
    sd = spectral(family, theta)
    return PurifiedFamily(
        family=family,
        theta_ref=theta,
        u_env=u,
        generators=gellmann_generators(family.r),
        ref_vecs=sd.vecs,
    )
