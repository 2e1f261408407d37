"""Coupled momentum / damage time stepping and the full fracture run.

Each time step is a staggered pass: (1) implicit Newmark momentum solve with
stiffness degraded by the current damage field (wrapped in Newton iterations
with radial-return stress updates for elastoplastic materials), (2) tensile
energy -> history field update, (3) linear damage solve. Initial fractures
enter through a large seeded history value at their quadrature points, which
drives the damage field to ~0.999 there through the same solve path as
everything else. A run ends when the psi >= 0.99 cells percolate across the
direction transverse to pulling, or at max_steps (censored).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from ..core import (
    CartesianGrid,
    Elastoplastic,
    FractureConfig,
    MaterialSpec,
    lame_parameters,
    plane_strain_stiffness,
    rasterize_config,
)
from ..dataset import PROGRESSION_POINTS
from ..rulebased import check_failure
from .damage import solve_damage, tensile_energy_qp, update_history
from .fem import GridFEM
from .integrate import SolverError, newmark_linear_step, pcg
from .plasticity import (
    consistent_tangent_eng,
    elastic_trial_stress,
    radial_return_batch,
)

LOADINGS = ("uniaxial", "biaxial")
SEED_HISTORY_FACTOR = 1.0e3  # H_seed = factor * G_c / (2 w0) -> psi ~ 0.999


@dataclass(frozen=True)
class PhaseFieldParams:
    w0: float | None = None  # regularization length; default 2 * cell size
    eta: float = 1e-6
    dt: float | None = None  # default 0.5 * cell / c_p
    newmark_beta: float = 0.25
    newmark_gamma: float = 0.5
    vbar: float = 1.0  # boundary speed, m/s
    loading: str = "uniaxial"
    max_steps: int = 400
    staggered_iters: int = 1
    cg_tol: float = 1e-8
    cg_max_iters: int | None = None
    damage_cg_tol: float = 1e-12
    newton_tol: float = 1e-8
    newton_max: int = 20
    snapshot_count: int = 10

    def __post_init__(self):
        if not (0.0 < self.eta < 1.0):
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if self.loading not in LOADINGS:
            raise ValueError(f"loading must be one of {LOADINGS}")
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.max_steps < 1 or self.staggered_iters < 1:
            raise ValueError("max_steps and staggered_iters must be >= 1")
        if self.snapshot_count != len(PROGRESSION_POINTS):
            raise ValueError(f"snapshot_count is fixed at {len(PROGRESSION_POINTS)}")

    def resolve(self, grid: CartesianGrid, material: MaterialSpec) -> "PhaseFieldParams":
        """Fill in grid/material-dependent defaults and check resolvability."""
        cell = min(grid.dx, grid.dy)
        w0 = 2.0 * cell if self.w0 is None else self.w0
        if w0 < 2.0 * cell - 1e-12:
            raise ValueError(
                f"w0 = {w0:g} under-resolves the mesh (needs >= 2 * cell = {2 * cell:g})"
            )
        dt = self.dt
        if dt is None:
            d = plane_strain_stiffness(material.elastic)
            c_p = math.sqrt(max(d[0, 0], d[1, 1]) / material.density)
            dt = 0.5 * cell / c_p
        return replace(self, w0=w0, dt=dt)


@dataclass
class PhaseFieldState:
    """Solver state: kinematics, damage, history, per-point plastic state."""

    u: np.ndarray  # (2 n_nodes,) displacement
    v: np.ndarray  # velocity
    a: np.ndarray  # acceleration
    psi: np.ndarray  # (n_nodes,) damage in [0, 1]
    h_plus: np.ndarray  # (n_elems, 4) history, J/m^3
    eps_p: np.ndarray | None  # (n_elems, 4, 4) plastic strain 4-vectors
    alpha: np.ndarray | None  # (n_elems, 4) accumulated plastic strain
    t: float = 0.0
    step: int = 0

    @classmethod
    def initial(cls, fem: GridFEM, material: MaterialSpec) -> "PhaseFieldState":
        n = fem.n_dofs
        plastic = isinstance(material.elastic, Elastoplastic)
        return cls(
            u=np.zeros(n),
            v=np.zeros(n),
            a=np.zeros(n),
            psi=np.zeros(fem.n_nodes),
            h_plus=np.zeros((fem.n_elems, 4)),
            eps_p=np.zeros((fem.n_elems, 4, 4)) if plastic else None,
            alpha=np.zeros((fem.n_elems, 4)) if plastic else None,
        )


@dataclass
class PhaseFieldResult:
    psi_final: np.ndarray
    failure_time: float | None
    failed_step: int | None
    snapshots: np.ndarray | None  # (10, n_nodes)
    energy_trace: list[tuple[int, float, float, float, float]]
    censored: bool
    steps_run: int
    psi_initial: np.ndarray | None = None  # seeded damage field at t = 0
    history: list[np.ndarray] | None = None  # per-step psi, when requested


def loading_pattern(fem: GridFEM, loading: str) -> tuple[np.ndarray, np.ndarray]:
    """(dofs, unit values): prescribed displacement = vbar * t * unit.

    Uniaxial pulls the top/bottom faces apart along y (tangential components
    stay free); biaxial additionally pulls left/right along x.
    """
    dofs, units = [], []
    top, bottom = fem.boundary_nodes("top"), fem.boundary_nodes("bottom")
    dofs += [2 * top + 1, 2 * bottom + 1]
    units += [np.ones(top.size), -np.ones(bottom.size)]
    if loading == "biaxial":
        left, right = fem.boundary_nodes("left"), fem.boundary_nodes("right")
        dofs += [2 * right, 2 * left]
        units += [np.ones(right.size), -np.ones(left.size)]
    return np.concatenate(dofs), np.concatenate(units)


def _degradation_at_qp(fem: GridFEM, psi: np.ndarray, eta: float) -> np.ndarray:
    psi_qp = np.clip(fem.nodal_at_qp(psi), 0.0, 1.0)
    return (1.0 - eta) * (1.0 - psi_qp) ** 2 + eta


def newmark_step(
    state: PhaseFieldState,
    material: MaterialSpec,
    params: PhaseFieldParams,
    fem: GridFEM,
    m_diag: np.ndarray,
    bc_dofs: np.ndarray,
    bc_vals: np.ndarray,
    psi: np.ndarray | None = None,
) -> PhaseFieldState:
    """Advance the momentum system one implicit step at fixed damage.

    Returns a new state with updated kinematics (and committed plastic state
    for elastoplastic materials); damage/history are carried over unchanged.
    bc_vals are the prescribed boundary displacements at the new time level.
    """
    if params.dt is None or params.w0 is None:
        raise ValueError("params must be resolved (use params.resolve(grid, material))")
    psi = state.psi if psi is None else psi
    if not np.all(np.isfinite(state.u)):
        raise SolverError(f"non-finite displacement entering step {state.step + 1}")
    g_qp = _degradation_at_qp(fem, psi, params.eta)
    dt, beta, gamma = params.dt, params.newmark_beta, params.newmark_gamma

    if not isinstance(material.elastic, Elastoplastic):
        d3 = plane_strain_stiffness(material.elastic)
        k = fem.assemble_stiffness(d3, g_qp)
        u1, v1, a1, _ = newmark_linear_step(
            m_diag, k, state.u, state.v, state.a, dt,
            beta=beta, gamma=gamma, bc_dofs=bc_dofs, bc_vals=bc_vals,
            tol=params.cg_tol, max_iters=params.cg_max_iters,
        )
        return replace(state, u=u1, v=v1, a=a1, t=state.t + dt, step=state.step + 1)

    # elastoplastic: Newton iterations around the radial return
    el = material.elastic
    lam, mu = lame_parameters(el.E, el.nu)
    c0 = 1.0 / (beta * dt * dt)
    u_tilde = state.u + dt * state.v + (0.5 - beta) * dt * dt * state.a
    v_tilde = state.v + (1.0 - gamma) * dt * state.a

    u1 = state.u.copy()
    u1[bc_dofs] = bc_vals
    free = np.ones(fem.n_dofs, dtype=bool)
    free[bc_dofs] = False

    r0_norm = None
    sig = dgamma = s_tr = q_tr = None
    for it in range(params.newton_max):
        strain = fem.strain_at_qp(u1)  # (e, q, 3)
        eps_e = np.empty(strain.shape[:2] + (4,))
        eps_e[..., 0] = strain[..., 0]
        eps_e[..., 1] = strain[..., 1]
        eps_e[..., 2] = 0.0
        eps_e[..., 3] = 0.5 * strain[..., 2]
        eps_e -= state.eps_p
        sig_tr = elastic_trial_stress(eps_e, lam, mu)
        sig, dgamma, s_tr, q_tr = radial_return_batch(
            sig_tr, state.alpha, mu, el.H_mod, el.sigma_y
        )
        sig_eng = g_qp[..., None] * sig[..., (0, 1, 3)]
        f_int = fem.internal_force(sig_eng)
        residual = c0 * m_diag * (u1 - u_tilde) + f_int
        r_norm = float(np.linalg.norm(residual[free]))
        if r0_norm is None:
            r0_norm = max(r_norm, 1e-30)
        if r_norm <= params.newton_tol * r0_norm or r_norm < 1e-14:
            break
        if it == params.newton_max - 1:
            raise SolverError(
                f"Newton did not converge at step {state.step + 1}: "
                f"residual {r_norm:.3e} after {params.newton_max} iterations"
            )
        d_ep = consistent_tangent_eng(lam, mu, dgamma, s_tr, q_tr, el.H_mod)
        k_t = fem.assemble_stiffness(d_ep, g_qp)
        a_mat = k_t + sparse.diags(c0 * m_diag)
        scratch = np.zeros(fem.n_dofs)

        def matvec(xf):
            scratch[free] = xf
            return (a_mat @ scratch)[free]

        du_f, _ = pcg(
            matvec, -residual[free], a_mat.diagonal()[free],
            tol=params.cg_tol, max_iters=params.cg_max_iters,
        )
        u1[free] += du_f

    # commit plastic state from the converged configuration
    plastic = dgamma > 0.0
    safe_q = np.where(q_tr > 0.0, q_tr, 1.0)
    flow = 1.5 * s_tr / safe_q[..., None]
    eps_p = state.eps_p + np.where(plastic[..., None], dgamma[..., None] * flow, 0.0)
    alpha = state.alpha + dgamma

    a1 = c0 * (u1 - u_tilde)
    v1 = v_tilde + gamma * dt * a1
    return replace(
        state, u=u1, v=v1, a=a1, eps_p=eps_p, alpha=alpha,
        t=state.t + dt, step=state.step + 1,
    )


def _energies(
    fem: GridFEM,
    state: PhaseFieldState,
    material: MaterialSpec,
    m_diag: np.ndarray,
    eta: float,
) -> tuple[float, float]:
    """(kinetic, stored strain) energy; strain part uses degraded moduli."""
    kinetic = 0.5 * float(state.v @ (m_diag * state.v))
    strain = fem.strain_at_qp(state.u)
    g_qp = _degradation_at_qp(fem, state.psi, eta)
    if isinstance(material.elastic, Elastoplastic):
        lam, mu = lame_parameters(material.elastic.E, material.elastic.nu)
        eps_e = np.empty(strain.shape[:2] + (4,))
        eps_e[..., 0] = strain[..., 0]
        eps_e[..., 1] = strain[..., 1]
        eps_e[..., 2] = 0.0
        eps_e[..., 3] = 0.5 * strain[..., 2]
        eps_e -= state.eps_p
        sig = elastic_trial_stress(eps_e, lam, mu)
        dens = 0.5 * (
            sig[..., 0] * eps_e[..., 0]
            + sig[..., 1] * eps_e[..., 1]
            + sig[..., 2] * eps_e[..., 2]
            + 2.0 * sig[..., 3] * eps_e[..., 3]
        )
    else:
        d3 = plane_strain_stiffness(material.elastic)
        sig = np.einsum("ab,eqb->eqa", d3, strain)
        dens = 0.5 * np.einsum("eqa,eqa->eq", sig, strain)
    stored = float(np.sum(g_qp * dens) * fem.w_q)
    return kinetic, stored


def damage_cell_mask(grid: CartesianGrid, psi: np.ndarray, threshold: float = 0.99) -> np.ndarray:
    """(ny, nx) bool cells whose center (corner average) damage >= threshold."""
    mat = psi.reshape(grid.ny + 1, grid.nx + 1)
    centers = 0.25 * (mat[:-1, :-1] + mat[:-1, 1:] + mat[1:, :-1] + mat[1:, 1:])
    return centers >= threshold


def _percolates(grid: CartesianGrid, psi: np.ndarray, loading: str) -> bool:
    mask = damage_cell_mask(grid, psi)
    if loading == "uniaxial":
        return check_failure(mask, "horizontal")
    return check_failure(mask, "horizontal") or check_failure(mask, "vertical")


def run_phasefield(
    config: FractureConfig,
    material: MaterialSpec,
    params: PhaseFieldParams,
    grid: CartesianGrid,
    record_snapshots: bool = True,
    keep_history: bool = False,
) -> PhaseFieldResult:
    """Full staggered run from a seeded configuration to percolation failure.

    Snapshots of psi are backfilled at the ten progression points of the
    failure time from the per-step history buffer once the failure step is
    known. A run that never percolates is returned censored, without
    failure_time or snapshots.
    """
    params = params.resolve(grid, material)
    fem = GridFEM(grid)
    m_diag = fem.lumped_mass(material.density)
    laplacian = fem.assemble_scalar_laplacian()
    bc_dofs, bc_unit = loading_pattern(fem, params.loading)

    seed_cells = rasterize_config(config, grid).values.astype(bool)  # (n_cells,)
    seed_mask = np.repeat(seed_cells[:, None], 4, axis=1)
    seed_value = SEED_HISTORY_FACTOR * material.G_c / (2.0 * params.w0)

    state = PhaseFieldState.initial(fem, material)
    state.h_plus = np.where(seed_mask, seed_value, 0.0)
    state.psi = solve_damage(
        fem, state.h_plus, material.G_c, params.w0,
        cg_tol=params.damage_cg_tol, cg_max_iters=params.cg_max_iters,
        laplacian=laplacian,
    )

    history: list[np.ndarray] = [state.psi.copy()]  # index s = psi after step s
    trace: list[tuple[int, float, float, float, float]] = []
    kin, stored = _energies(fem, state, material, m_diag, params.eta)
    trace.append((0, 0.0, kin, stored, float(state.psi.max())))

    failed_step: int | None = 0 if _percolates(grid, state.psi, params.loading) else None

    while failed_step is None and state.step < params.max_steps:
        t_next = state.t + params.dt
        bc_vals = params.vbar * t_next * bc_unit
        psi_iter = state.psi
        h_iter = state.h_plus
        stepped = None
        for _ in range(params.staggered_iters):
            stepped = newmark_step(
                state, material, params, fem, m_diag, bc_dofs, bc_vals, psi=psi_iter
            )
            strain = fem.strain_at_qp(stepped.u)
            psi_plus = tensile_energy_qp(strain, material, eps_p=stepped.eps_p)
            h_iter = update_history(state.h_plus, psi_plus)
            psi_iter = solve_damage(
                fem, h_iter, material.G_c, params.w0,
                cg_tol=params.damage_cg_tol, cg_max_iters=params.cg_max_iters,
                laplacian=laplacian, x0=psi_iter,
            )
        state = stepped
        if float((psi_iter - state.psi).min()) < -1e-6:
            raise SolverError(f"damage field regressed sharply at step {state.step}")
        state.psi = np.maximum(psi_iter, state.psi)  # irreversibility projection
        state.h_plus = h_iter
        if not np.all(np.isfinite(state.u)):
            raise SolverError(f"non-finite field at step {state.step}")
        history.append(state.psi.copy())
        kin, stored = _energies(fem, state, material, m_diag, params.eta)
        trace.append((state.step, state.t, kin, stored, float(state.psi.max())))
        if _percolates(grid, state.psi, params.loading):
            failed_step = state.step

    censored = failed_step is None
    failure_time = None if censored else failed_step * params.dt
    snapshots = None
    if record_snapshots and not censored:
        picks = np.rint(np.asarray(PROGRESSION_POINTS, dtype=np.float64) * failed_step)
        picks = np.clip(picks.astype(int), 0, failed_step)
        snapshots = np.stack([history[k] for k in picks])
    return PhaseFieldResult(
        psi_final=state.psi,
        failure_time=failure_time,
        failed_step=failed_step,
        snapshots=snapshots,
        energy_trace=trace,
        censored=censored,
        steps_run=state.step,
        psi_initial=history[0],
        history=history if keep_history else None,
    )


def energy_trace_csv(trace, path) -> None:
    """CSV rows (step, time, kinetic, strain, max_psi)."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "time", "kinetic", "strain", "max_psi"])
        for row in trace:
            writer.writerow([row[0]] + [f"{x:.10g}" for x in row[1:]])
