"""One-sided (Hestenes) Jacobi SVD for small dense matrices.

Column pairs are orthogonalised in round-robin order; each round touches
``n/2`` disjoint pairs, which are rotated together in one vectorised step.
"""

from __future__ import annotations

import numpy as np


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint pairings covering every (p, q) once per sweep (circle method)."""
    m = n + (n % 2)
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = idx[i], idx[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def jacobi_svd(a, tol: float = 1e-8, max_sweeps: int = 100, compute_v: bool = True):
    """Return ``(s, v, sweeps)`` with singular values sorted descending.

    ``v`` holds right singular vectors as columns (``a @ v[:, i] = s[i] u_i``).
    Convergence: every column pair has ``|cos| < tol`` in a full sweep.
    Raises RuntimeError if ``max_sweeps`` is exhausted.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"jacobi_svd needs a matrix, got shape {a.shape}")
    m, n = a.shape
    transposed = m < n and not compute_v
    if transposed:
        # singular values of a and a.T coincide; fewer columns is cheaper
        a = a.T
        m, n = n, m
    u = a.copy()
    v = np.eye(n) if compute_v else None
    if n == 1:
        s = np.sqrt((u * u).sum(axis=0))
        return s, v, 0
    rounds = _round_robin(n)
    scale = float((u * u).sum())
    tiny = (np.finfo(np.float64).eps ** 2) * max(scale, np.finfo(np.float64).tiny)
    for sweep in range(1, max_sweeps + 1):
        off = 0.0
        for ps, qs in rounds:
            up, uq = u[:, ps], u[:, qs]
            alpha = (up * up).sum(axis=0)
            beta = (uq * uq).sum(axis=0)
            gamma = (up * uq).sum(axis=0)
            denom = np.sqrt(alpha * beta)
            live = (alpha > tiny) & (beta > tiny)
            cosang = np.zeros_like(gamma)
            cosang[live] = np.abs(gamma[live]) / denom[live]
            if cosang.size:
                off = max(off, float(cosang.max()))
            rot = live & (cosang > tol)
            if not rot.any():
                continue
            ps, qs = ps[rot], qs[rot]
            up, uq = up[:, rot], uq[:, rot]
            alpha, beta, gamma = alpha[rot], beta[rot], gamma[rot]
            zeta = (beta - alpha) / (2 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1 + zeta * zeta))
            c = 1 / np.sqrt(1 + t * t)
            s = c * t
            u[:, ps] = c * up - s * uq
            u[:, qs] = s * up + c * uq
            if v is not None:
                vp, vq = v[:, ps], v[:, qs]
                v[:, ps] = c * vp - s * vq
                v[:, qs] = s * vp + c * vq
        if off < tol:
            break
    else:
        raise RuntimeError(f"Jacobi SVD did not converge in {max_sweeps} sweeps (off = {off:.3g})")
    sv = np.sqrt((u * u).sum(axis=0))
    order = np.argsort(-sv, kind="stable")
    sv = sv[order]
    if v is not None:
        v = v[:, order]
    return sv, v, sweep


def singular_values(a, tol: float = 1e-8, max_sweeps: int = 100) -> np.ndarray:
    return jacobi_svd(a, tol=tol, max_sweeps=max_sweeps, compute_v=False)[0]
