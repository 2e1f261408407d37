"""Linear algebra and time integration kernels.

A hand-rolled Jacobi-preconditioned conjugate gradient (fixed, deterministic
iteration order) and the implicit average-acceleration Newmark update rewritten
as one SPD solve per step. Both operate on plain arrays / scipy sparse
matrices so the single-mass oscillator and the full FEM system share one path.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse


class SolverError(RuntimeError):
    """Linear or nonlinear solve failed; message carries the diagnostics."""


def pcg(
    matvec,
    b: np.ndarray,
    diag: np.ndarray,
    tol: float = 1e-8,
    max_iters: int | None = None,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned CG for SPD systems; tol is relative to ||b||.

    Raises SolverError with the final residual if max_iters is exhausted.
    """
    n = b.shape[0]
    if max_iters is None:
        max_iters = max(20 * n, 200)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), 0
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - matvec(x)
    target = tol * b_norm
    inv_diag = 1.0 / diag
    z = r * inv_diag
    p = z.copy()
    rz = float(r @ z)
    for it in range(max_iters):
        if np.linalg.norm(r) <= target:
            return x, it
        Ap = matvec(p)
        alpha = rz / float(p @ Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        z = r * inv_diag
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = float(np.linalg.norm(r))
    if res <= target:
        return x, max_iters
    raise SolverError(
        f"PCG did not converge in {max_iters} iterations: "
        f"residual {res:.3e} vs target {target:.3e}"
    )


def constrained_solve(
    A,
    b: np.ndarray,
    bc_dofs: np.ndarray,
    bc_vals: np.ndarray,
    tol: float,
    max_iters: int | None,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Solve A x = b with prescribed entries, by elimination on the free set.

    A may be a scipy sparse matrix or a dense array; the free-set operator is
    applied through the full matvec with constrained entries masked.
    """
    n = b.shape[0]
    free = np.ones(n, dtype=bool)
    free[bc_dofs] = False
    x_bc = np.zeros(n)
    x_bc[bc_dofs] = bc_vals

    rhs = (b - A @ x_bc)[free]
    diag = A.diagonal() if hasattr(A, "diagonal") else np.diag(A)
    scratch = np.zeros(n)

    def matvec(xf):
        scratch[free] = xf
        return (A @ scratch)[free]

    xf0 = x0[free] if x0 is not None else None
    xf, iters = pcg(matvec, rhs, diag[free], tol=tol, max_iters=max_iters, x0=xf0)
    out = x_bc
    out[free] = xf
    return out, iters


def newmark_linear_step(
    m_diag: np.ndarray,
    K,
    u: np.ndarray,
    v: np.ndarray,
    a: np.ndarray,
    dt: float,
    beta: float = 0.25,
    gamma: float = 0.5,
    bc_dofs: np.ndarray | None = None,
    bc_vals: np.ndarray | None = None,
    f_ext: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iters: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """One implicit Newmark step of M a + K u = f_ext.

    Solves (M/(beta dt^2) + K) u1 = f_ext + M utilde/(beta dt^2) with
    Dirichlet rows eliminated, then recovers acceleration and velocity from
    the standard Newmark relations (also on the prescribed dofs, so boundary
    velocities stay consistent with the ramp they follow).
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    c0 = 1.0 / (beta * dt * dt)
    u_tilde = u + dt * v + (0.5 - beta) * dt * dt * a
    v_tilde = v + (1.0 - gamma) * dt * a

    n = u.shape[0]
    if bc_dofs is None:
        bc_dofs = np.empty(0, dtype=np.int64)
        bc_vals = np.empty(0)
    b = c0 * (m_diag * u_tilde)
    if f_ext is not None:
        b = b + f_ext

    if sparse.issparse(K):
        A = K + sparse.diags(c0 * m_diag)
    else:
        A = K + np.diag(c0 * m_diag)

    u1, iters = constrained_solve(A, b, bc_dofs, bc_vals, tol=tol, max_iters=max_iters, x0=u)
    a1 = c0 * (u1 - u_tilde)
    v1 = v_tilde + gamma * dt * a1
    return u1, v1, a1, iters
