"""Regenerate the SDP regression battery under src/qbound/data/battery."""

import numpy as np

from qbound.sdpcore import SDPProblem, battery_dir, dump_problem, realify_hermitian_block


def sym_basis(k):
    out = []
    for i in range(k):
        for j in range(i, k):
            e = np.zeros((k, k))
            e[i, j] = e[j, i] = 1.0
            out.append(e)
    return out


def v_above_h(h, w):
    # min Tr(W V) over real symmetric V with V - H >= 0 (H complex Hermitian);
    # closed form Tr(W Re H) + ||sqrt(W) Im H sqrt(W)||_1
    k = h.shape[0]
    basis = sym_basis(k)
    c = [float(np.trace(w @ e)) for e in basis]
    blk = realify_hermitian_block([-h] + [e.astype(complex) for e in basis])
    ws = np.real(sqrtm_psd(w))
    val = float(np.trace(w @ h.real)) + float(np.sum(np.linalg.svd(ws @ h.imag @ ws, compute_uv=False)))
    return c, [blk], val


def sqrtm_psd(w):
    lam, v = np.linalg.eigh(w)
    return (v * np.sqrt(lam)) @ v.T


def problems():
    out = []
    out.append(("01_scalar", SDPProblem(c=[1.0], blocks=[np.array([[[-1.0]], [[1.0]]])], title="min x s.t. x >= 1"), 1.0))
    out.append(("02_two_by_two", SDPProblem(c=[1.0], blocks=[np.array([[[0, 1], [1, 0]], np.eye(2)], float)], title="min t s.t. [[t,1],[1,t]] >= 0"), 1.0))
    # LP as a diagonal block
    f = np.zeros((3, 3, 3))
    f[0] = np.diag([-2.0, -1.0, -0.5])
    f[1] = np.diag([1.0, 1.0, 0.0])
    f[2] = np.diag([1.0, 0.0, 1.0])
    out.append(("03_lp", SDPProblem(c=[1.0, 2.0], blocks=[f], title="min x1+2x2, x1+x2>=2, x1>=1, x2>=0.5"), 2.5))
    a = np.array([[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 1.0]])
    lam = np.linalg.eigvalsh(a)
    out.append(("04_lambda_max", SDPProblem(c=[1.0], blocks=[np.array([-a, np.eye(3)])], title="largest eigenvalue"), float(lam[-1])))
    # Ky Fan 2: min 2 t + Tr(Y) s.t. Y >= 0, Y + t I - A >= 0, variables t and sym Y
    b = np.array([[1.0, 0.5, 0.2, 0.0], [0.5, 2.0, -0.3, 0.1], [0.2, -0.3, -1.0, 0.4], [0.0, 0.1, 0.4, 0.5]])
    sb = sym_basis(4)
    c = [2.0] + [float(np.trace(e)) for e in sb]
    blk1 = np.array([-b, np.eye(4)] + sb)
    blk2 = np.array([np.zeros((4, 4)), np.zeros((4, 4))] + sb)
    lb = np.linalg.eigvalsh(b)
    out.append(("05_ky_fan", SDPProblem(c=c, blocks=[blk1, blk2], title="sum of two largest eigenvalues"), float(lb[-1] + lb[-2])))
    h = np.array([[1, 1j], [-1j, 1]])
    c, blocks, val = v_above_h(h, np.eye(2))
    out.append(("06_real_over_complex_2x2", SDPProblem(c=c, blocks=blocks, title="real V >= complex H, 2x2"), val))
    h3 = np.array([[2, 1j, 0.5], [-1j, 1, 0.3 - 0.2j], [0.5, 0.3 + 0.2j, 1.5]])
    w3 = np.array([[1.0, 0.2, 0.0], [0.2, 2.0, 0.1], [0.0, 0.1, 0.5]])
    c, blocks, val = v_above_h(h3, w3)
    out.append(("07_real_over_complex_3x3", SDPProblem(c=c, blocks=blocks, title="real V >= complex H, 3x3, non-identity weight"), val))
    # Lovasz theta of C5: min t s.t. t I - J - sum_{ij in E} x_ij E_ij >= 0, entries on edges free
    n5 = 5
    edges = [(i, (i + 1) % n5) for i in range(n5)]
    mats = [-np.ones((n5, n5)), np.eye(n5)]
    for i, j in edges:
        e = np.zeros((n5, n5))
        e[i, j] = e[j, i] = -1.0
        mats.append(e)
    out.append(("08_lovasz_c5", SDPProblem(c=[1.0] + [0.0] * n5, blocks=[np.array(mats)], title="Lovasz theta of the 5-cycle"), float(np.sqrt(5))))
    mats = [np.eye(3)]
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        e = np.zeros((3, 3))
        e[i, j] = e[j, i] = 1.0
        mats.append(e)
    out.append(("09_correlation_k3", SDPProblem(c=[1.0, 1.0, 1.0], blocks=[np.array(mats)], title="min sum of off-diagonals of a correlation matrix"), -1.5))
    m = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, -1.0]])
    big = np.zeros((5, 5))
    big[:2, 2:] = m
    big[2:, :2] = m.T
    out.append(("10_sigma_max", SDPProblem(c=[1.0], blocks=[np.array([big, np.eye(5)])], title="largest singular value of a 2x3 matrix"), float(np.linalg.svd(m, compute_uv=False)[0])))
    f = np.array([[[0, 1], [1, 0]], [[1, 0], [0, 0]], [[0, 0], [0, 1]]], float)
    out.append(("11_equality", SDPProblem(c=[1.0, 1.0], blocks=[f], A=[[1.0, -4.0]], b=[0.0], title="min x1+x2, [[x1,1],[1,x2]] >= 0, x1 = 4 x2"), 2.5))
    f = np.array([[[1, 0], [0, 0]], [[0, 1], [1, 0]], [[0, 0], [0, 1]]], float)
    out.append(("12_fixed_offdiag", SDPProblem(c=[0.0, 1.0], blocks=[f], A=[[1.0, 0.0]], b=[3.0], title="min t, [[1,x],[x,t]] >= 0, x = 3"), 9.0))
    infeas = SDPProblem(c=[1.0], blocks=[np.array([[[-1.0]], [[1.0]]]), np.array([[[0.0]], [[-1.0]]])], title="x >= 1 and x <= 0")
    out.append(("13_infeasible", infeas, "infeasible"))
    return out


if __name__ == "__main__":
    d = battery_dir()
    d.mkdir(parents=True, exist_ok=True)
    for name, prob, expect in problems():
        (d / f"{name}.sdp").write_text(dump_problem(prob, expect))
        print(name, expect)
