"""Truncated SVD via one-sided Jacobi, and the balanced low-rank split.

One-sided Jacobi rotates column pairs of a working copy until all columns
are mutually orthogonal; column norms are then the singular values and the
accumulated rotations give the right singular vectors. Chosen over faster
factorizations because at desk scale (min(m, n) <= 512) it converges to
working precision and is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_SIDE = 512
_COHERENCE_TOL = 1e-15
_MAX_SWEEPS = 60


@dataclass(frozen=True)
class TruncatedSvd:
    """Top-r factors: u (m x r), s (r,) nonincreasing, vt (r x n)."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def _one_sided_jacobi(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full SVD of a tall-or-square matrix: returns (g, norms, v).

    g's columns are u_j * sigma_j (unnormalized, mutually orthogonal),
    norms are the column norms, v holds right singular vectors as columns.
    """
    g = np.array(m, dtype=np.float64, order="F")
    n = g.shape[1]
    v = np.eye(n)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                gp = g[:, p]
                gq = g[:, q]
                app = gp @ gp
                aqq = gq @ gq
                apq = gp @ gq
                if abs(apq) <= _COHERENCE_TOL * np.sqrt(app * aqq):
                    continue
                rotated = True
                zeta = (aqq - app) / (2.0 * apq)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                if zeta == 0.0:
                    t = 1.0
                cs = 1.0 / np.hypot(1.0, t)
                sn = cs * t
                g[:, p], g[:, q] = cs * gp - sn * gq, sn * gp + cs * gq
                vp = v[:, p].copy()
                v[:, p] = cs * vp - sn * v[:, q]
                v[:, q] = sn * vp + cs * v[:, q]
        if not rotated:
            break
    norms = np.sqrt(np.einsum("ij,ij->j", g, g))
    return g, norms, v


def _complete_column(u: np.ndarray, j: int) -> None:
    """Fill column j with a unit vector orthogonal to columns < j."""
    m = u.shape[0]
    for basis in range(m):
        cand = np.zeros(m)
        cand[basis] = 1.0
        for _ in range(2):  # re-orthogonalize for stability
            cand -= u[:, :j] @ (u[:, :j].T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 0.5:
            u[:, j] = cand / norm
            return
    raise RuntimeError("orthonormal completion failed")  # pragma: no cover


def truncated_svd(m: np.ndarray, r: int) -> TruncatedSvd:
    """Best rank-r factorization of a dense binary64 matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("truncated_svd expects a 2-D matrix")
    rows, cols = m.shape
    if min(rows, cols) > MAX_SIDE:
        raise ValueError(
            f"min(m, n) = {min(rows, cols)} exceeds the supported "
            f"desk scale of {MAX_SIDE}")
    if not 1 <= r <= min(rows, cols):
        raise ValueError(f"rank {r} not in [1, {min(rows, cols)}]")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains NaN or infinite entries")

    transposed = rows < cols
    work = m.T if transposed else m
    g, norms, v = _one_sided_jacobi(work)

    order = np.argsort(-norms, kind="stable")[:r]
    s = norms[order]
    u = np.empty((work.shape[0], r))
    smax = norms.max(initial=0.0)
    for out_j, j in enumerate(order):
        if norms[j] > smax * 1e-13 and norms[j] > 0.0:
            u[:, out_j] = g[:, j] / norms[j]
        else:
            # numerically zero direction: deterministic orthonormal fill
            _complete_column(u, out_j)
    vt = v[:, order].T

    if transposed:
        u, vt = vt.T, u.T
    # canonical sign: first nonzero entry of each left column positive
    for j in range(r):
        col = u[:, j]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0.0:
            u[:, j] = -col
            vt[j, :] = -vt[j, :]
    return TruncatedSvd(u=np.ascontiguousarray(u), s=s,
                        vt=np.ascontiguousarray(vt))


def factor_to_lora(svd: TruncatedSvd) -> tuple[np.ndarray, np.ndarray]:
    """Balanced split of U S Vt into (B_hat, A_hat) with sqrt(S) each side.

    B_hat = U sqrt(S) is m x r, A_hat = sqrt(S) Vt is r x n, and
    B_hat @ A_hat reconstructs the truncated factorization. Zero singular
    values yield zero columns/rows.
    """
    root = np.sqrt(svd.s)
    return svd.u * root[np.newaxis, :], root[:, np.newaxis] * svd.vt
