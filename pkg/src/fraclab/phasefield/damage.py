"""Damage field machinery: degradation, tensile energy split, history, solve.

The damage equation
    G_c (psi/w0 - w0 lap(psi)) = 2 (1 - psi) H+
rearranges to the linear elliptic system
    (G_c/w0 + 2 H+) psi - G_c w0 lap(psi) = 2 H+
with natural boundary conditions. The reaction and source terms are lumped
(row-sum) so the discrete operator is an M-matrix on square cells, which
guarantees 0 <= psi <= max(2H+ / (G_c/w0 + 2H+)) at the discrete level --
the maximum-principle bounds asserted by the solver.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse

from ..core import (
    Elastoplastic,
    Isotropic,
    MaterialSpec,
    TransverselyIsotropic,
    lame_parameters,
    plane_strain_stiffness,
)
from .fem import GridFEM
from .integrate import pcg


def degradation(psi, eta: float = 1e-6):
    """Stiffness multiplier (1 - eta)(1 - psi)^2 + eta.

    eta keeps fully damaged regions from losing all stiffness. psi must lie
    in [0, 1]; anything outside (beyond 1e-9 slack for solver round-off) is a
    caller bug and is rejected.
    """
    arr = np.asarray(psi, dtype=np.float64)
    if not (0.0 < eta < 1.0):
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
        raise ValueError("psi outside [0, 1]")
    clipped = np.clip(arr, 0.0, 1.0)
    out = (1.0 - eta) * (1.0 - clipped) ** 2 + eta
    return out if arr.ndim else float(out)


def _inplane_eigenvalues(exx, eyy, exy):
    """Closed-form eigenvalues of symmetric 2x2 strain (tensor shear exy)."""
    mid = 0.5 * (exx + eyy)
    rad = np.sqrt((0.5 * (exx - eyy)) ** 2 + exy**2)
    return mid + rad, mid - rad


def tensile_energy(eps: np.ndarray, material: MaterialSpec) -> float:
    """Tensile part of the elastic energy density of a 2x2 strain tensor.

    Spectral split: only positive principal strains (and positive trace, for
    the volumetric part) store tensile energy. Isotropic-family materials use
    0.5 lam <tr eps>+^2 + mu sum <eps_i>+^2; the transversely isotropic case
    forms the positive strain tensor from the positive eigenpairs and takes
    the full tensor energy 0.5 eps+ : C : eps+.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (2, 2):
        raise ValueError(f"strain must be 2x2, got shape {eps.shape}")
    scale = max(np.abs(eps).max(), 1.0)
    if abs(eps[0, 1] - eps[1, 0]) > 1e-12 * scale:
        raise ValueError("strain tensor must be symmetric")
    out = tensile_energy_qp(
        np.array([[[eps[0, 0], eps[1, 1], 2.0 * eps[0, 1]]]]), material
    )
    return float(out[0, 0])


def tensile_energy_qp(
    strain_eng: np.ndarray,
    material: MaterialSpec,
    eps_p: np.ndarray | None = None,
) -> np.ndarray:
    """Vectorized tensile energy density at quadrature points.

    strain_eng: (..., 3) engineering-Voigt total strain. For elastoplastic
    materials pass the committed plastic strain (..., 4) so the split acts on
    the elastic strain (including its out-of-plane component -eps_p_zz).
    """
    exx = strain_eng[..., 0]
    eyy = strain_eng[..., 1]
    exy = 0.5 * strain_eng[..., 2]
    ezz = np.zeros_like(exx)
    if eps_p is not None:
        exx = exx - eps_p[..., 0]
        eyy = eyy - eps_p[..., 1]
        ezz = ezz - eps_p[..., 2]
        exy = exy - eps_p[..., 3]

    el = material.elastic
    if isinstance(el, TransverselyIsotropic):
        e1, e2 = _inplane_eigenvalues(exx, eyy, exy)
        # positive strain tensor rebuilt from the positive eigenpairs
        p1, p2 = np.maximum(e1, 0.0), np.maximum(e2, 0.0)
        denom = np.where(np.abs(e1 - e2) > 0.0, e1 - e2, 1.0)
        # eps+ = a*eps + b*I with a=(p1-p2)/(e1-e2), b=(e2*p1-e1*p2)/(e2-e1)
        a = np.where(np.abs(e1 - e2) > 0.0, (p1 - p2) / denom, (e1 > 0.0).astype(float))
        b = np.where(np.abs(e1 - e2) > 0.0, (e2 * p1 - e1 * p2) / -denom, 0.0)
        pxx = a * exx + b
        pyy = a * eyy + b
        pxy = a * exy
        d = plane_strain_stiffness(el)
        return 0.5 * (
            d[0, 0] * pxx**2
            + 2.0 * d[0, 1] * pxx * pyy
            + d[1, 1] * pyy**2
            + d[2, 2] * (2.0 * pxy) ** 2
        )

    if isinstance(el, (Isotropic, Elastoplastic)):
        lam, mu = lame_parameters(el.E, el.nu)
        e1, e2 = _inplane_eigenvalues(exx, eyy, exy)
        tr = exx + eyy + ezz
        return (
            0.5 * lam * np.maximum(tr, 0.0) ** 2
            + mu
            * (
                np.maximum(e1, 0.0) ** 2
                + np.maximum(e2, 0.0) ** 2
                + np.maximum(ezz, 0.0) ** 2
            )
        )
    raise TypeError(f"unsupported elastic law {type(el).__name__}")


def update_history(h_plus: np.ndarray, psi_plus: np.ndarray) -> np.ndarray:
    """Pointwise running maximum; the irreversibility mechanism."""
    if h_plus.shape != psi_plus.shape:
        raise ValueError(f"history shape mismatch: {h_plus.shape} vs {psi_plus.shape}")
    return np.maximum(h_plus, psi_plus)


def solve_damage(
    fem: GridFEM,
    h_plus: np.ndarray,
    g_c: float,
    w0: float,
    cg_tol: float = 1e-12,
    cg_max_iters: int | None = None,
    seed_mask: np.ndarray | None = None,
    seed_value: float | None = None,
    laplacian: sparse.csr_matrix | None = None,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Solve the damage equation for nodal psi given quadrature-point H+.

    seed_mask (if given) floors H+ at seed_value on seeded points, which is
    how initial fractures are imposed without a separate Dirichlet path.
    The result must respect the maximum-principle bounds up to 1e-10; this is
    asserted, not clamped.
    """
    if np.any(h_plus < 0.0):
        raise ValueError("history field H+ must be nonnegative")
    h = h_plus
    if seed_mask is not None:
        if seed_value is None:
            raise ValueError("seed_mask requires seed_value")
        h = np.where(seed_mask, np.maximum(h_plus, seed_value), h_plus)
    lap = laplacian if laplacian is not None else fem.assemble_scalar_laplacian()
    reaction = fem.lumped_scalar(g_c / w0 + 2.0 * h)
    source = fem.lumped_scalar(2.0 * h)
    A = (g_c * w0) * lap + sparse.diags(reaction)
    psi, _iters = pcg(
        lambda x: A @ x, source, A.diagonal(), tol=cg_tol, max_iters=cg_max_iters, x0=x0
    )
    bound = float(np.max(2.0 * h / (g_c / w0 + 2.0 * h))) if h.size else 0.0
    if psi.min() < -1e-10 or psi.max() > bound + 1e-10:
        raise AssertionError(
            f"damage bounds violated: psi in [{psi.min():.3e}, {psi.max():.3e}], "
            f"maximum-principle bound {bound:.6f}"
        )
    return psi
