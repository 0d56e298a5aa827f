"""Classical and quantum Fisher information matrices."""

from __future__ import annotations

import logging

import numpy as np

from .numkit import ValidationError, partial_trace_probe
from .statemodel import PurifiedFamily, SpectralData

log = logging.getLogger(__name__)

PAIR_THRESHOLD = 1e-12
PROB_FLOOR = 1e-12


def _sym(j: np.ndarray) -> np.ndarray:
    return 0.5 * (j + j.T)


def qfim_mixed(sd: SpectralData) -> np.ndarray:
    """QFIM from the eigen-decomposition, pairs with ``lam_k + lam_k' <= 1e-12`` skipped."""
    basis = sd.basis
    lam = sd.lam_full
    a = np.einsum("ak,iab,bl->ikl", basis.conj(), sd.drho, basis)
    denom = lam[:, None] + lam[None, :]
    keep = denom > PAIR_THRESHOLD
    w = np.where(keep, 1.0 / np.where(keep, denom, 1.0), 0.0)
    # sum_{k,l} A_i[k,l] A_j[l,k] w[k,l]
    j = 2.0 * np.real(np.einsum("ikl,jlk,kl->ij", a, a, w))
    return _sym(j)


def qfim_pure(psi, dpsi) -> np.ndarray:
    """``4 Re[<d_i psi|d_j psi> - <d_i psi|psi><psi|d_j psi>]``."""
    psi = np.asarray(psi)
    dpsi = np.atleast_2d(np.asarray(dpsi))
    if abs(np.vdot(psi, psi) - 1) > 1e-8:
        raise ValidationError("state vector is not normalized")
    g = dpsi.conj() @ dpsi.T
    ov = dpsi.conj() @ psi
    j = 4.0 * np.real(g - np.outer(ov, ov.conj()))
    return _sym(j)


def qfim_ee_block(purified: PurifiedFamily, theta, phi=None) -> np.ndarray:
    """Nuisance block of the purified QFIM from the environment covariance of the generators.

    With ``d psi / d phi_k = -i (1 (x) H_k) psi`` this is ``4 * (1/2 <{H_k, H_l}> - <H_k><H_l>)``
    on the reduced environment state. Away from ``phi = 0`` the effective
    generators ``H_k = i (d_k U) U^dagger`` replace the fixed Gell-Mann ones.
    """
    psi = purified.psi_at(theta, phi)
    sigma = partial_trace_probe(psi, purified.d, purified.r)
    h = purified.effective_generators(phi)
    mean = np.real(np.einsum("kab,ba->k", h, sigma))
    anti = np.einsum("kab,lbc,ca->kl", h, h, sigma)
    cov = np.real(anti) - np.outer(mean, mean)
    return _sym(4.0 * cov)


def outcome_probabilities(povm, rho=None, drho=None, psi=None, dpsi=None):
    """Outcome probabilities and their derivatives for a density matrix or a pure state."""
    if psi is not None:
        psi = np.asarray(psi)
        dpsi = np.atleast_2d(np.asarray(dpsi)) if dpsi is not None else np.zeros((0, psi.size))
        if povm.vectors is not None:
            amp = povm.vectors.conj() @ psi
            damp = dpsi @ povm.vectors.conj().T  # [i, l] = <b_l|d_i psi>
            p = np.abs(amp) ** 2
            dp = 2.0 * np.real(damp * amp.conj()[None, :])
            return p, dp
        rho = np.outer(psi, psi.conj())
        drho = np.array([np.outer(x, psi.conj()) + np.outer(psi, x.conj()) for x in dpsi])
    effects = povm.effects
    p = np.real(np.einsum("lab,ba->l", effects, rho))
    dp = np.real(np.einsum("lab,iba->il", effects, drho)) if drho is not None and len(drho) else np.zeros((0, len(p)))
    return p, dp


def cfim(povm, rho=None, drho=None, psi=None, dpsi=None, return_dropped: bool = False):
    """Classical Fisher information of ``povm`` on ``rho`` (or the pure state ``psi``).

    Outcomes with probability below ``1e-12`` contribute nothing; the count of
    such outcomes that still carry a nonzero derivative is logged and can be
    returned for diagnostics.
    """
    povm.check()
    p, dp = outcome_probabilities(povm, rho=rho, drho=drho, psi=psi, dpsi=dpsi)
    keep = p > PROB_FLOOR
    dropped = int(np.sum(~keep & np.any(np.abs(dp) > 1e-9, axis=0)))
    if dropped:
        log.warning("cfim: %d outcome(s) with vanishing probability but nonzero derivative", dropped)
    w = np.where(keep, 1.0 / np.where(keep, p, 1.0), 0.0)
    info = _sym((dp * w) @ dp.T)
    return (info, dropped) if return_dropped else info
