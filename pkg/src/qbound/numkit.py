"""Dense complex linear algebra helpers shared by every other module."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Tolerances:
    herm: float = 1e-12
    unitary: float = 1e-10
    psd_clamp: float = 1e-10
    psd_fail: float = 1e-8
    antisym: float = 1e-10
    eig_residual: float = 1e-10


TOL = Tolerances()


class ValidationError(ValueError):
    """Input matrix violates a structural precondition."""


class NotPSDError(ValidationError):
    pass


def as_herm(m, tol: float | None = None) -> np.ndarray:
    """Return ``(M + M^dagger)/2``; raise if ``M`` was not Hermitian to ``tol``."""
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("matrix has non-finite entries")
    if tol is not None:
        scale = max(1.0, float(np.max(np.abs(m), initial=0.0)))
        dev = float(np.max(np.abs(m - m.conj().T), initial=0.0))
        if dev > tol * scale:
            raise ValidationError(f"matrix is not Hermitian (max deviation {dev:.3e})")
    return 0.5 * (m + m.conj().T)


def haar_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random unitary from the QR decomposition of a complex Ginibre matrix.

    The phases of ``diag(R)`` are pushed into ``Q`` so the output distribution is
    exactly Haar rather than QR-convention dependent.
    """
    if dim < 1:
        raise ValidationError(f"invalid dimension {dim}")
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r)
    return q * (d / np.abs(d))


def haar_unitaries(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Stack of ``count`` independent Haar unitaries, shape ``(count, dim, dim)``."""
    if dim < 1:
        raise ValidationError(f"invalid dimension {dim}")
    z = (rng.standard_normal((count, dim, dim)) + 1j * rng.standard_normal((count, dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r, axis1=1, axis2=2)
    return q * (d / np.abs(d))[:, None, :]


def trace_norm(m) -> float:
    m = np.asarray(m)
    if not np.all(np.isfinite(m)):
        raise ValidationError("matrix has non-finite entries")
    return float(np.sum(np.linalg.svd(m, compute_uv=False)))


def _fix_phases(vecs: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    # first component with modulus above tol made real-positive, per column
    out = vecs.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        idx = np.flatnonzero(np.abs(col) > max(tol, 1e-8 * np.max(np.abs(col))))
        if idx.size:
            c = col[idx[0]]
            out[:, k] = col * (np.conj(c) / abs(c))
    return out


def herm_eig(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.

    Eigenvector phases are fixed so that the first non-negligible component of
    each column is real and positive.
    """
    h = as_herm(m, tol=TOL.herm)
    w, v = np.linalg.eigh(h)
    return w, _fix_phases(v)


def psd_sqrt(m) -> np.ndarray:
    """PSD square root; eigenvalues down to ``-1e-8`` (relative) are clamped to zero."""
    real_input = np.isrealobj(np.asarray(m))
    h = as_herm(m, tol=TOL.herm)
    w, v = np.linalg.eigh(h)
    scale = max(1.0, float(np.max(np.abs(w), initial=0.0)))
    if w.size and w[0] < -TOL.psd_fail * scale:
        raise NotPSDError(f"matrix has eigenvalue {w[0]:.3e} < 0")
    w = np.clip(w, 0.0, None)
    r = (v * np.sqrt(w)) @ v.conj().T
    r = 0.5 * (r + r.conj().T)
    return r.real if real_input else r


def psd_inv_sqrt(m, floor: float = 0.0) -> np.ndarray:
    h = as_herm(m, tol=TOL.herm)
    w, v = np.linalg.eigh(h)
    if w[0] <= floor:
        raise NotPSDError(f"matrix is not positive definite (min eigenvalue {w[0]:.3e})")
    r = (v / np.sqrt(w)) @ v.conj().T
    return 0.5 * (r + r.conj().T)


def abs_antisymmetric(t) -> np.ndarray:
    """``|T| = sqrt(T^T T)`` for real antisymmetric ``T``.

    ``iT`` is Hermitian, so ``|T|`` is the absolute value of ``iT`` and ``|T| + iT``
    and ``|T| - iT`` are both PSD (they keep only one sign of the spectrum of ``iT``).
    """
    t = np.asarray(t, dtype=float)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {t.shape}")
    scale = max(1.0, float(np.max(np.abs(t), initial=0.0)))
    if np.max(np.abs(t + t.T), initial=0.0) > TOL.antisym * scale:
        raise ValidationError("matrix is not antisymmetric")
    t = 0.5 * (t - t.T)
    w, v = np.linalg.eigh(1j * t)
    a = (v * np.abs(w)) @ v.conj().T
    return 0.5 * (a.real + a.real.T)


def realify(h) -> np.ndarray:
    """Real symmetric embedding ``[[Re H, -Im H], [Im H, Re H]]`` of a Hermitian matrix."""
    h = np.asarray(h)
    a, b = h.real, h.imag
    return np.block([[a, -b], [b, a]])


def partial_trace_env(psi: np.ndarray, d: int, r: int) -> np.ndarray:
    """Reduced state on the probe of a vector ordered ``probe (x) env``."""
    m = np.asarray(psi).reshape(d, r)
    return m @ m.conj().T


def partial_trace_probe(psi: np.ndarray, d: int, r: int) -> np.ndarray:
    m = np.asarray(psi).reshape(d, r)
    return (m.T @ m.conj())


def is_unitary(u, tol: float = TOL.unitary) -> bool:
    u = np.asarray(u)
    return bool(np.linalg.norm(u.conj().T @ u - np.eye(u.shape[1])) <= tol)
