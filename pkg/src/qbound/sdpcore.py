"""Small dense semidefinite programs.

Problems have the linear-matrix-inequality form::

    minimize    c^T x + offset
    subject to  F0_b + sum_i x_i Fi_b  >= 0   for every block b
                A x = b

Equalities are removed by a null-space substitution, and the remaining
inequality-only problem is solved by an infeasible-start primal-dual
path-following method with Nesterov-Todd scaling and a Mehrotra
predictor-corrector step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .numkit import ValidationError, realify

MAX_ITER = 200
REL_GAP = 1e-9
FEAS_TOL = 1e-9
ACCEPT_TOL = 1e-8
STEP_FRACTION = 0.98


class InfeasibleError(ValidationError):
    pass


@dataclass
class SDPProblem:
    c: np.ndarray
    blocks: list[np.ndarray]  # each (n + 1, k, k): F0, F1, ..., Fn
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    offset: float = 0.0
    title: str = ""

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        blocks = []
        for blk in self.blocks:
            blk = np.asarray(blk, dtype=float)
            if blk.ndim != 3 or blk.shape[0] != n + 1 or blk.shape[1] != blk.shape[2] or blk.shape[1] < 1:
                raise ValidationError(f"block of shape {blk.shape} does not match {n} variables")
            if np.max(np.abs(blk - blk.transpose(0, 2, 1)), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(blk))):
                raise ValidationError("block matrices must be symmetric")
            blocks.append(0.5 * (blk + blk.transpose(0, 2, 1)))
        self.blocks = blocks
        if self.A is not None:
            self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
            self.b = np.asarray(self.b, dtype=float).reshape(-1)
            if self.A.shape != (self.b.size, n):
                raise ValidationError(f"equality matrix shape {self.A.shape} does not match")
            if self.A.shape[0] > n:
                raise ValidationError("more equalities than variables")
            if self.A.shape[0] == 0:
                self.A = self.b = None

    @property
    def n(self) -> int:
        return self.c.size

    def block_values(self, x) -> list[np.ndarray]:
        x = np.asarray(x, dtype=float)
        return [blk[0] + np.tensordot(x, blk[1:], axes=1) for blk in self.blocks]

    def min_eig(self, x) -> float:
        return min(float(np.linalg.eigvalsh(s)[0]) for s in self.block_values(x))


@dataclass
class AffineMap:
    """``x = x0 + N z``."""

    x0: np.ndarray
    N: np.ndarray

    def __call__(self, z) -> np.ndarray:
        return self.x0 + self.N @ np.asarray(z, dtype=float)


@dataclass
class SDPSolution:
    x: np.ndarray
    primal: float
    dual: float
    gap: float
    status: str  # "optimal" | "infeasible" | "max-iter"
    iterations: int = 0
    Z: list[np.ndarray] = field(default_factory=list)
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def eliminate_equalities(p: SDPProblem, tol: float = 1e-10) -> tuple[SDPProblem, AffineMap]:
    """Substitute ``x = x0 + N z`` with ``A N = 0`` and ``A x0 = b``."""
    n = p.n
    if p.A is None:
        return p, AffineMap(np.zeros(n), np.eye(n))
    A, b = p.A, p.b
    q, r, piv = sla.qr(A.T, pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > tol * max(1.0, diag[0] if diag.size else 0.0)))
    x0, *_ = np.linalg.lstsq(A, b, rcond=None)
    resid = np.linalg.norm(A @ x0 - b)
    if rank < A.shape[0]:
        if resid > 1e-9 * (1.0 + np.linalg.norm(b)):
            raise InfeasibleError(f"equality constraints are inconsistent (residual {resid:.3e})")
        raise ValidationError(f"equality matrix is rank deficient (rank {rank} < {A.shape[0]} rows)")
    N = q[:, rank:]
    blocks = []
    for blk in p.blocks:
        f0 = blk[0] + np.tensordot(x0, blk[1:], axes=1)
        fz = np.tensordot(N.T, blk[1:], axes=1)
        blocks.append(np.concatenate([f0[None], fz]))
    reduced = SDPProblem(
        c=N.T @ p.c,
        blocks=blocks,
        offset=p.offset + float(p.c @ x0),
        title=p.title,
    )
    return reduced, AffineMap(x0, N)


def realify_hermitian_block(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Map an affine family of Hermitian matrices to its real symmetric embedding.

    The embedding doubles every eigenvalue's multiplicity, so positivity is preserved
    in both directions.
    """
    return np.array([realify(np.asarray(mt)) for mt in mats])


def _sym(a):
    return 0.5 * (a + a.T)


def _scaling(s, z):
    """NT scaling ``R`` with ``R^{-1} S R^{-T} = R^T Z R = diag(lam)``."""
    ls = np.linalg.cholesky(s)
    lz = np.linalg.cholesky(z)
    u, lam, vt = np.linalg.svd(lz.T @ ls)
    r = ls @ vt.T / np.sqrt(lam)
    rinv = (np.sqrt(lam)[:, None] * vt) @ sla.solve_triangular(ls, np.eye(len(lam)), lower=True)
    return r, rinv, lam


def _max_step(lam, d):
    """Largest ``alpha`` with ``diag(lam) + alpha d >= 0``."""
    isq = 1.0 / np.sqrt(lam)
    e = np.linalg.eigvalsh(_sym(isq[:, None] * d * isq[None, :]))[0]
    return np.inf if e >= 0 else -1.0 / e


def _solve_lmi(c, blocks, max_iter=MAX_ITER):
    n = c.size
    kdims = [blk.shape[1] for blk in blocks]
    ktot = sum(kdims)
    f0norm = max(1.0, max(np.linalg.norm(blk[0]) for blk in blocks))
    cnorm = max(1.0, np.linalg.norm(c))
    bigm = 10.0 * (1.0 + max(np.max(np.abs(blk[0])) for blk in blocks))
    fnorms = np.array([max(np.linalg.norm(blk[i + 1]) for blk in blocks) for i in range(n)]) if n else np.zeros(0)

    x = np.zeros(n)
    # iterates are kept as NT scalings: S = R diag(lam) R^T, Z = R^-T diag(lam) R^-1
    scal = []
    zscale = max(1.0, np.max(np.abs(c) / np.maximum(fnorms, 1e-300), initial=0.0))
    for blk in blocks:
        f0 = blk[0]
        shift = max(0.0, -np.linalg.eigvalsh(f0)[0])
        scal.append(_scaling(f0 + (1.0 + shift) * np.eye(f0.shape[0]), zscale * np.eye(f0.shape[0])))

    def iterates():
        ss = [_sym((r * lam) @ r.T) for r, _, lam in scal]
        zz = [_sym((rinv.T * lam) @ rinv) for _, rinv, lam in scal]
        return ss, zz

    def fval(xv):
        return [blk[0] + np.tensordot(xv, blk[1:], axes=1) for blk in blocks]

    def adj(zs):
        out = np.zeros(n)
        for blk, zb in zip(blocks, zs):
            out += np.einsum("iab,ab->i", blk[1:], zb)
        return out

    best = None
    status, detail = "max-iter", ""
    it = 0
    for it in range(1, max_iter + 1):
        svals, zvals = iterates()
        fx = fval(x)
        rz = [s - f for s, f in zip(svals, fx)]
        rx = c - adj(zvals)
        pobj = float(c @ x)
        dobj = -float(sum(np.sum(blk[0] * zb) for blk, zb in zip(blocks, zvals)))
        gap = float(sum(np.sum(lam**2) for _, _, lam in scal))
        pres = np.sqrt(sum(np.sum(r * r) for r in rz)) / f0norm
        dres = np.linalg.norm(rx) / cnorm
        relgap = abs(pobj - dobj) / max(1.0, abs(pobj), abs(dobj))
        if best is None or max(pres, dres, relgap) < best[0]:
            best = (max(pres, dres, relgap), x.copy(), [zb.copy() for zb in zvals])
        if pres <= FEAS_TOL and dres <= FEAS_TOL and relgap <= REL_GAP and gap / max(1.0, abs(pobj)) <= REL_GAP:
            status = "optimal"
            break

        # certificates of infeasibility
        trz = sum(np.trace(zb) for zb in zvals)
        f0z = float(sum(np.sum(blk[0] * zb) for blk, zb in zip(blocks, zvals)))
        if f0z < 0 and np.linalg.norm(adj(zvals)) / (-f0z) <= 1e-8 and -f0z > 1e-8 * trz:
            status, detail = "infeasible", "primal infeasible: dual ray found"
            break
        if pobj < 0 and n:
            dirx = x / (-pobj)
            lin = [np.tensordot(dirx, blk[1:], axes=1) for blk in blocks]
            if min(np.linalg.eigvalsh(lm)[0] for lm in lin) >= -1e-8 and np.linalg.norm(x) > 1e6 * bigm:
                status, detail = "infeasible", "dual infeasible: primal unbounded"
                break
        if trz > 1e6 * bigm * max(1.0, zscale) * ktot or max(np.trace(s) for s in svals) > 1e12 * bigm:
            status, detail = "infeasible", "iterates diverged"
            break

        mu = gap / ktot
        gs = []
        for blk, (r, rinv, lam) in zip(blocks, scal):
            gs.append(np.einsum("ab,ibc,dc->iad", rinv, blk[1:], rinv))
        # Newton system G^T G dx = G^T v - rx, solved through a thin QR of G so the
        # conditioning is that of G rather than its square
        gmat = np.vstack([g.reshape(n, -1).T for g in gs])
        qg, rg = np.linalg.qr(gmat)
        rdiag = np.abs(np.diag(rg))
        use_qr = rdiag.size > 0 and rdiag.min() > 1e-13 * rdiag.max()
        chol = None
        if not use_qr:
            hmat = _sym(gmat.T @ gmat)
            try:
                chol = sla.cho_factor(hmat + 1e-14 * np.trace(hmat) / max(n, 1) * np.eye(n))
            except np.linalg.LinAlgError:
                detail = "Schur complement lost definiteness"
                break
        rzt = [rinv @ r @ rinv.T for r, (_, rinv, _) in zip(rz, scal)]

        def direction(ys):
            v = np.concatenate([(y + rt).ravel() for y, rt in zip(ys, rzt)])
            if use_qr:
                u = sla.solve_triangular(rg, rx, trans="T")
                dx = sla.solve_triangular(rg, qg.T @ v - u)
            else:
                dx = sla.cho_solve(chol, gmat.T @ v - rx)
            dzt = [y + rt - np.tensordot(dx, g, axes=1) for g, y, rt in zip(gs, ys, rzt)]
            dst = [y - dz for y, dz in zip(ys, dzt)]
            return dx, dst, dzt

        def steps(dst, dzt):
            ap = min(_max_step(lam, ds) for ds, (_, _, lam) in zip(dst, scal))
            ad = min(_max_step(lam, dz) for dz, (_, _, lam) in zip(dzt, scal))
            return ap, ad

        # predictor
        ys = [-np.diag(lam) for (_, _, lam) in scal]
        dx_a, dst_a, dzt_a = direction(ys)
        ap, ad = steps(dst_a, dzt_a)
        ap, ad = min(1.0, ap), min(1.0, ad)
        mu_aff = sum(
            np.sum((np.diag(lam) + ap * ds) * (np.diag(lam) + ad * dz))
            for ds, dz, (_, _, lam) in zip(dst_a, dzt_a, scal)
        ) / ktot
        sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3 if mu > 0 else 0.0

        # corrector: lam o Y = sigma mu I - lam^2 - (dS_a o dZ_a)
        ys = []
        for ds, dz, (_, _, lam) in zip(dst_a, dzt_a, scal):
            corr = _sym(ds @ dz)
            rhs = sigma * mu * np.eye(len(lam)) - np.diag(lam**2) - corr
            ys.append(2.0 * rhs / (lam[:, None] + lam[None, :]))
        dx, dst, dzt = direction(ys)
        ap, ad = steps(dst, dzt)
        ap = min(1.0, STEP_FRACTION * ap)
        ad = min(1.0, STEP_FRACTION * ad)

        # rescale in the current NT frame, where the updated pair is well conditioned
        try:
            new = []
            for ds, dz, (r, rinv, lam) in zip(dst, dzt, scal):
                rh, rhinv, lam_new = _scaling(_sym(np.diag(lam) + ap * ds), _sym(np.diag(lam) + ad * dz))
                new.append((r @ rh, rhinv @ rinv, lam_new))
        except np.linalg.LinAlgError:
            detail = "iterates lost definiteness"
            break
        x = x + ap * dx
        scal = new

    if status == "max-iter" and best is not None:
        # numerical breakdown near the optimum: keep the best iterate, accept it if close enough
        x, zvals = best[1], best[2]
        if best[0] <= ACCEPT_TOL:
            status = "optimal"
    pobj = float(c @ x)
    dobj = -float(sum(np.sum(blk[0] * zb) for blk, zb in zip(blocks, zvals)))
    return x, zvals, pobj, dobj, status, it, detail


def solve_sdp(p: SDPProblem, max_iter: int = MAX_ITER) -> SDPSolution:
    """Solve ``p``; equalities are eliminated first and the solution mapped back."""
    try:
        reduced, amap = eliminate_equalities(p)
    except InfeasibleError as exc:
        return SDPSolution(x=np.full(p.n, np.nan), primal=np.inf, dual=-np.inf, gap=np.inf, status="infeasible", detail=str(exc))
    if reduced.n == 0:
        x = amap.x0
        feasible = p.min_eig(x) >= -1e-9
        val = float(p.c @ x) + p.offset
        return SDPSolution(x=x, primal=val, dual=val, gap=0.0, status="optimal" if feasible else "infeasible")
    z, zvals, pobj, dobj, status, it, detail = _solve_lmi(reduced.c, reduced.blocks, max_iter=max_iter)
    x = amap(z)
    primal = pobj + reduced.offset
    dual = dobj + reduced.offset
    return SDPSolution(
        x=x,
        primal=primal,
        dual=dual,
        gap=primal - dual,
        status=status,
        iterations=it,
        Z=zvals,
        detail=detail,
    )


# plain-text problem files -------------------------------------------------
#
#   # comment lines start with '#'
#   title <free text>
#   vars <n>
#   objective <c_1> ... <c_n>
#   offset <value>                      (optional)
#   block <k>                           (starts a block; followed by n+1 matrix lines)
#   F0 <k*k numbers, row-major>
#   F1 ...
#   eq <a_1> ... <a_n> = <b>            (optional, any number)
#   expect <value> | expect infeasible  (optional reference answer)


def _fmt(v: float) -> str:
    return repr(float(v))


def dump_problem(p: SDPProblem, expect=None) -> str:
    lines = []
    if p.title:
        lines.append(f"title {p.title}")
    lines.append(f"vars {p.n}")
    lines.append("objective " + " ".join(_fmt(v) for v in p.c))
    if p.offset:
        lines.append(f"offset {_fmt(p.offset)}")
    for blk in p.blocks:
        lines.append(f"block {blk.shape[1]}")
        for i, mat in enumerate(blk):
            lines.append(f"F{i} " + " ".join(_fmt(v) for v in mat.reshape(-1)))
    if p.A is not None:
        for row, rhs in zip(p.A, p.b):
            lines.append("eq " + " ".join(_fmt(v) for v in row) + " = " + _fmt(rhs))
    if expect is not None:
        lines.append("expect " + (expect if isinstance(expect, str) else _fmt(expect)))
    return "\n".join(lines) + "\n"


def parse_problem(text: str) -> tuple[SDPProblem, float | str | None]:
    n = None
    c = None
    offset = 0.0
    title = ""
    blocks: list[list[np.ndarray]] = []
    sizes: list[int] = []
    eqs = []
    expect = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        try:
            if key == "title":
                title = rest.strip()
            elif key == "vars":
                n = int(rest)
            elif key == "objective":
                c = np.array(rest.split(), dtype=float)
            elif key == "offset":
                offset = float(rest)
            elif key == "block":
                sizes.append(int(rest))
                blocks.append([])
            elif key.startswith("F") and key[1:].isdigit():
                k = sizes[-1]
                vals = np.array(rest.split(), dtype=float)
                if vals.size != k * k or int(key[1:]) != len(blocks[-1]):
                    raise ValueError(f"bad matrix line {key}")
                blocks[-1].append(vals.reshape(k, k))
            elif key == "eq":
                lhs, _, rhs = rest.partition("=")
                eqs.append((np.array(lhs.split(), dtype=float), float(rhs)))
            elif key == "expect":
                expect = rest.strip() if rest.strip() == "infeasible" else float(rest)
            else:
                raise ValueError(f"unknown keyword {key!r}")
        except (ValueError, IndexError) as exc:
            raise ValidationError(f"line {lineno}: {exc}") from exc
    if n is None or c is None or c.size != n:
        raise ValidationError("problem file needs 'vars' and a matching 'objective'")
    A = np.array([e[0] for e in eqs]) if eqs else None
    b = np.array([e[1] for e in eqs]) if eqs else None
    prob = SDPProblem(c=c, blocks=[np.array(blk) for blk in blocks], A=A, b=b, offset=offset, title=title)
    return prob, expect


def load_problem(path) -> tuple[SDPProblem, float | str | None]:
    return parse_problem(Path(path).read_text())


def battery_dir() -> Path:
    return Path(__file__).parent / "data" / "battery"


def load_battery() -> list[tuple[str, SDPProblem, float | str | None]]:
    out = []
    for path in sorted(battery_dir().glob("*.sdp")):
        prob, expect = load_problem(path)
        out.append((path.stem, prob, expect))
    return out
