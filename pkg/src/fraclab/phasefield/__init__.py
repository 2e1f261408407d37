"""Desk-scale dynamic phase-field fracture solver.

Coupled momentum / damage system on a uniform bilinear-quad mesh with
implicit Newmark time stepping and a staggered (alternating) solve.
"""
from .damage import degradation, solve_damage, tensile_energy, update_history
from .integrate import SolverError, newmark_linear_step, pcg
from .plasticity import radial_return
from .solver import (
    PhaseFieldParams,
    PhaseFieldState,
    newmark_step,
    run_phasefield,
)

__all__ = [
    "PhaseFieldParams",
    "PhaseFieldState",
    "SolverError",
    "degradation",
    "newmark_linear_step",
    "newmark_step",
    "pcg",
    "radial_return",
    "run_phasefield",
    "solve_damage",
    "tensile_energy",
    "update_history",
]
