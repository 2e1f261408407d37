"""Rule-based surrogate fracture simulator.

Fracture tips march across a binary cell grid one cell per step. Tips arrest
permanently when they hit an existing fracture (T mode) or freeze for a fixed
number of steps and then punch through (X mode). Material failure is a
4-connected percolating path of fractured cells between opposite borders.

The simulator is purely topological: no physical units, just cells and steps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .core import (
    CartesianGrid,
    FractureConfig,
    SeededRng,
    _segment_cell_mask,
    clip_segment,
    rasterize_config,
)

ARRESTS = ("T", "X")
AXES = ("horizontal", "vertical")


@dataclass(frozen=True)
class GrowthMode:
    """One arrest rule and one growth axis per simulation."""

    arrest: str  # "T" | "X"
    axis: str  # "horizontal" | "vertical"
    freeze_steps: int = 1  # X mode only: steps a tip stays frozen per obstacle cell

    def __post_init__(self):
        if self.arrest not in ARRESTS:
            raise ValueError(f"arrest must be one of {ARRESTS}, got {self.arrest!r}")
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {self.axis!r}")
        if self.freeze_steps < 1:
            raise ValueError("freeze_steps must be >= 1")


@dataclass
class Tip:
    """An active fracture tip: grid cell plus a unit step direction."""

    cell: tuple[int, int]  # (i, j)
    direction: tuple[int, int]  # (+/-1, 0) or (0, +/-1)
    frozen_remaining: int = 0
    pending_pass: bool = False  # freeze already served; may enter one occupied cell
    alive: bool = True


@dataclass
class RuleSimState:
    occupancy: np.ndarray  # (ny, nx) bool
    tips: list[Tip]
    step: int = 0
    failed_at: int | None = None


def _segment_tips(config: FractureConfig, grid: CartesianGrid, axis: str) -> list[Tip]:
    """Two outward tips at the extremal cells of each axis-aligned segment.

    Only segments whose orientation equals the growth axis spawn tips; the
    rest act as static obstacles. Extremal cells are taken in the rasterized
    row (or column) closest to the segment center.
    """
    tips: list[Tip] = []
    for seg in config.segments:
        if seg.orientation != axis:
            continue
        clipped = clip_segment(seg, config.side_length)
        if clipped is None:
            continue
        mask = _segment_cell_mask(clipped, grid)
        if not mask.any():
            continue
        if axis == "horizontal":
            rows = np.flatnonzero(mask.any(axis=1))
            j_c = (clipped.center[1] / grid.dy) - 0.5
            j = int(rows[np.argmin(np.abs(rows - j_c))])
            cols = np.flatnonzero(mask[j])
            tips.append(Tip(cell=(int(cols[0]), j), direction=(-1, 0)))
            tips.append(Tip(cell=(int(cols[-1]), j), direction=(1, 0)))
        else:
            cols = np.flatnonzero(mask.any(axis=0))
            i_c = (clipped.center[0] / grid.dx) - 0.5
            i = int(cols[np.argmin(np.abs(cols - i_c))])
            rows = np.flatnonzero(mask[:, i])
            tips.append(Tip(cell=(i, int(rows[0])), direction=(0, -1)))
            tips.append(Tip(cell=(i, int(rows[-1])), direction=(0, 1)))
    return tips


def init_rule_sim(config: FractureConfig, grid: CartesianGrid, mode: GrowthMode) -> RuleSimState:
    """Rasterize the config and spawn tips on segments aligned with the axis."""
    occ = rasterize_config(config, grid).as_matrix().astype(bool)
    return RuleSimState(occupancy=occ, tips=_segment_tips(config, grid, mode.axis))


def step(state: RuleSimState, mode: GrowthMode) -> RuleSimState:
    """Advance every alive, unfrozen tip one cell (two-phase update).

    Targets are decided against the grid as of the start of the step, so tip
    processing order cannot matter and two tips may claim one cell together.
    Stepping a failed simulation is a no-op.
    """
    if state.failed_at is not None:
        return state
    old = state.occupancy.copy()
    ny, nx = old.shape
    for tip in state.tips:
        if not tip.alive:
            continue
        if tip.frozen_remaining > 0:
            tip.frozen_remaining -= 1
            if tip.frozen_remaining == 0:
                tip.pending_pass = True
            continue
        ti = tip.cell[0] + tip.direction[0]
        tj = tip.cell[1] + tip.direction[1]
        if not (0 <= ti < nx and 0 <= tj < ny):
            tip.alive = False
            continue
        if old[tj, ti] and not tip.pending_pass:
            if mode.arrest == "T":
                tip.alive = False
            else:
                tip.frozen_remaining = mode.freeze_steps
            continue
        tip.cell = (ti, tj)
        tip.pending_pass = False
        state.occupancy[tj, ti] = True
    state.step += 1
    return state


def check_failure(occupancy: np.ndarray, axis: str, connectivity: int = 4) -> bool:
    """True iff a connected path of fractured cells joins opposite borders.

    axis="horizontal" connects the left and right borders, axis="vertical"
    the top and bottom. Connectivity is 4 by default (edge-sharing neighbors);
    8 adds diagonals. Implemented as a vectorized frontier sweep: the reached
    set grows by one ring of neighbors per pass until it stops changing.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    occ = np.asarray(occupancy).astype(bool)
    if axis == "vertical":
        occ = occ.T  # reduce to the left-right case
    reach = np.zeros_like(occ)
    reach[:, 0] = occ[:, 0]
    while True:
        grown = reach.copy()
        grown[:, 1:] |= reach[:, :-1]
        grown[:, :-1] |= reach[:, 1:]
        grown[1:, :] |= reach[:-1, :]
        grown[:-1, :] |= reach[1:, :]
        if connectivity == 8:
            grown[1:, 1:] |= reach[:-1, :-1]
            grown[1:, :-1] |= reach[:-1, 1:]
            grown[:-1, 1:] |= reach[1:, :-1]
            grown[:-1, :-1] |= reach[1:, 1:]
        grown &= occ
        if np.array_equal(grown, reach):
            break
        reach = grown
    return bool(reach[:, -1].any())


def run_rule_sim(
    config: FractureConfig,
    grid: CartesianGrid,
    mode: GrowthMode,
    max_steps: int,
    rng: SeededRng | None = None,
    record_trajectory: bool = False,
    connectivity: int = 4,
) -> tuple[np.ndarray, int | None, list[np.ndarray] | None]:
    """Run to failure or max_steps; returns (occupancy, failed_at, trajectory).

    failed_at is the first step index at which the grid percolates (0 if the
    seed configuration already does). The dynamics are fully deterministic;
    rng is accepted for interface symmetry with the physics solvers and never
    drawn from.
    """
    del rng
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    state = init_rule_sim(config, grid, mode)
    trajectory: list[np.ndarray] | None = [state.occupancy.copy()] if record_trajectory else None
    if check_failure(state.occupancy, mode.axis, connectivity):
        state.failed_at = 0
        return state.occupancy, 0, trajectory
    for t in range(1, max_steps + 1):
        step(state, mode)
        if trajectory is not None:
            trajectory.append(state.occupancy.copy())
        if check_failure(state.occupancy, mode.axis, connectivity):
            state.failed_at = t
            break
        if not any(tip.alive for tip in state.tips):
            break  # static from here on; failure can no longer occur
    return state.occupancy, state.failed_at, trajectory


ALL_MODES = tuple(
    GrowthMode(arrest=a, axis=ax) for a in ARRESTS for ax in AXES
)

STREAM_MATERIALS = ("pbx", "shale", "tungsten", "aluminum", "steel")


def stream_records(
    rng: SeededRng,
    grid: CartesianGrid,
    sampler,
    modes: tuple[GrowthMode, ...] = ALL_MODES,
    max_steps: int | None = None,
    materials: tuple[str, ...] = STREAM_MATERIALS,
) -> Iterator:
    """Endless deterministic stream of (SampleRecord, GrowthMode) pairs.

    Growth modes are sampled uniformly over the given tuple (all four by
    default); the deck's boundary slot encodes the growth axis (horizontal ->
    axial, vertical -> biaxial) and the material slot is sampled uniformly,
    both purely as conditioning text. Restart from the same SeededRng to
    replay the stream.
    """
    from .dataset import SampleRecord
    from .deck import DeckMeta, render_deck
    from .initcond import sample_config

    if max_steps is None:
        max_steps = 2 * max(grid.nx, grid.ny)
    coords = (grid.cell_centers() / grid.side_length).astype(np.float32)
    index = 0
    while True:
        mode = modes[int(rng.integers(0, len(modes)))]
        material = materials[int(rng.integers(0, len(materials)))]
        config = sample_config(sampler, rng)
        initial = rasterize_config(config, grid).as_matrix().astype(bool)
        final, failed_at, _ = run_rule_sim(config, grid, mode, max_steps)
        boundary = "axial loading" if mode.axis == "horizontal" else "biaxial loading"
        meta = DeckMeta(
            simulation="rule-based",
            material=material,
            boundary=boundary,
            target="fracture pattern",
        )
        record = SampleRecord(
            deck_text=render_deck(meta),
            coords=coords,
            input_field=initial.ravel().astype(np.float32),
            final_field=final.ravel().astype(np.float32),
            failure_time=float(failed_at) if failed_at is not None else None,
            source="rulebased",
            seed=index,
            material=material,
            loading=boundary,
        )
        yield record, mode
        index += 1


def generate_stream(
    rng: SeededRng,
    grid: CartesianGrid,
    sampler,
    max_steps: int | None = None,
    materials: tuple[str, ...] = STREAM_MATERIALS,
) -> Iterator:
    """Endless deterministic stream of rule-based SampleRecords."""
    for record, _mode in stream_records(rng, grid, sampler, max_steps=max_steps,
                                        materials=materials):
        yield record


def dump_grid_text(matrix: np.ndarray) -> str:
    """Portable grayscale text dump: one grid row per line, 0..255 integers."""
    m = np.asarray(matrix, dtype=np.float64)
    scaled = np.clip(np.rint(m * 255.0), 0, 255).astype(int)
    return "\n".join(" ".join(str(v) for v in row) for row in scaled) + "\n"
