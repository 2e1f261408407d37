"""Rule-based simulator semantics, percolation oracle equivalence, streams."""
import itertools
from collections import deque

import numpy as np

from fraclab.core import CartesianGrid, FractureConfig, FractureSegment, SeededRng
from fraclab.initcond import ConfigSampler
from fraclab.rulebased import (
    ALL_MODES,
    GrowthMode,
    RuleSimState,
    Tip,
    check_failure,
    dump_grid_text,
    generate_stream,
    init_rule_sim,
    run_rule_sim,
    step,
)


# --------------------------------------------------------------------------- #
# Oracles
# --------------------------------------------------------------------------- #

def bfs_oracle(occ: np.ndarray, axis: str, connectivity: int = 4) -> bool:
    """Deque-based flood fill, written independently of the production sweep."""
    occ = np.asarray(occ, dtype=bool)
    ny, nx = occ.shape
    if axis == "horizontal":
        starts = [(0, j) for j in range(ny) if occ[j, 0]]
        done = lambda i, j: i == nx - 1
    else:
        starts = [(i, 0) for i in range(nx) if occ[0, i]]
        done = lambda i, j: j == ny - 1
    seen = set(starts)
    queue = deque(starts)
    nbrs = [(1, 0), (-1, 0), (0, 1), (0, -1)]
    if connectivity == 8:
        nbrs += [(1, 1), (1, -1), (-1, 1), (-1, -1)]
    while queue:
        i, j = queue.popleft()
        if done(i, j):
            return True
        for di, dj in nbrs:
            ni, nj = i + di, j + dj
            if 0 <= ni < nx and 0 <= nj < ny and occ[nj, ni] and (ni, nj) not in seen:
                seen.add((ni, nj))
                queue.append((ni, nj))
    return False


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb


def union_find_oracle(occ: np.ndarray, axis: str) -> bool:
    """Second independent route: cluster the grid, check border clusters meet."""
    occ = np.asarray(occ, dtype=bool)
    ny, nx = occ.shape
    uf = UnionFind(nx * ny + 2)  # two virtual border nodes
    left, right = nx * ny, nx * ny + 1
    for j in range(ny):
        for i in range(nx):
            if not occ[j, i]:
                continue
            idx = j * nx + i
            if i + 1 < nx and occ[j, i + 1]:
                uf.union(idx, idx + 1)
            if j + 1 < ny and occ[j + 1, i]:
                uf.union(idx, idx + nx)
            if axis == "horizontal":
                if i == 0:
                    uf.union(idx, left)
                if i == nx - 1:
                    uf.union(idx, right)
            else:
                if j == 0:
                    uf.union(idx, left)
                if j == ny - 1:
                    uf.union(idx, right)
    return uf.find(left) == uf.find(right)


def grid_9x9_with_segment():
    g = CartesianGrid(9, 9, 0.25)
    cell = g.dx
    seg = FractureSegment(center=(4.5 * cell, 4.5 * cell), length=3 * cell, aperture=0.9 * cell)
    return g, FractureConfig((seg,), 0.25)


# --------------------------------------------------------------------------- #
# init_rule_sim
# --------------------------------------------------------------------------- #

class TestInit:
    def test_tips_at_segment_endpoints(self):
        g, cfg = grid_9x9_with_segment()
        state = init_rule_sim(cfg, g, GrowthMode("T", "horizontal"))
        tips = {(t.cell, t.direction) for t in state.tips}
        assert tips == {((3, 4), (-1, 0)), ((5, 4), (1, 0))}

    def test_orthogonal_segments_spawn_no_tips(self):
        g = CartesianGrid(9, 9, 0.25)
        cell = g.dx
        seg = FractureSegment(
            center=(4.5 * cell, 4.5 * cell), length=3 * cell, aperture=0.9 * cell,
            angle=np.pi / 2,
        )
        state = init_rule_sim(FractureConfig((seg,), 0.25), g, GrowthMode("T", "horizontal"))
        assert state.tips == []
        assert state.occupancy.sum() > 0  # still an obstacle

    def test_tip_set_matches_endpoint_scan_oracle(self):
        # mixed config on 32x32: compare against a per-segment endpoint scan
        g = CartesianGrid(32, 32, 0.25)
        rng = SeededRng(7)
        segs = []
        for _ in range(12):
            horizontal = rng.integers(0, 2) == 0
            segs.append(
                FractureSegment(
                    center=(float(rng.uniform(0.02, 0.23)), float(rng.uniform(0.02, 0.23))),
                    length=float(rng.uniform(0.02, 0.06)),
                    aperture=float(rng.uniform(0.002, 0.006)),
                    angle=0.0 if horizontal else np.pi / 2,
                )
            )
        cfg = FractureConfig(tuple(segs), 0.25)
        state = init_rule_sim(cfg, g, GrowthMode("T", "horizontal"))

        from fraclab.core import _segment_cell_mask, clip_segment

        expected = set()
        for seg in segs:
            if seg.orientation != "horizontal":
                continue
            c = clip_segment(seg, 0.25)
            mask = _segment_cell_mask(c, g)
            if not mask.any():
                continue
            rows = np.flatnonzero(mask.any(axis=1))
            j = int(rows[np.argmin(np.abs(rows - (c.center[1] / g.dy - 0.5)))])
            cols = np.flatnonzero(mask[j])
            expected.add(((int(cols[0]), j), (-1, 0)))
            expected.add(((int(cols[-1]), j), (1, 0)))
        got = {(t.cell, t.direction) for t in state.tips}
        assert got == expected


# --------------------------------------------------------------------------- #
# step semantics
# --------------------------------------------------------------------------- #

def lone_tip_state(nx=15, ny=15, at=(7, 7), direction=(1, 0)):
    occ = np.zeros((ny, nx), dtype=bool)
    occ[at[1], at[0]] = True
    return RuleSimState(occupancy=occ, tips=[Tip(cell=at, direction=direction)])


class TestStep:
    def test_lone_tip_marches(self):
        state = lone_tip_state()
        mode = GrowthMode("T", "horizontal")
        for _ in range(3):
            step(state, mode)
        assert state.occupancy[7, 7:11].all()
        assert state.occupancy.sum() == 4
        assert state.step == 3

    def test_t_mode_arrest_at_obstacle(self):
        state = lone_tip_state(at=(5, 7))
        state.occupancy[:, 6] = True  # occupied vertical line
        before = state.occupancy.copy()
        step(state, GrowthMode("T", "horizontal"))
        assert not state.tips[0].alive
        # nothing beyond the line may ever be set
        for _ in range(5):
            step(state, GrowthMode("T", "horizontal"))
        assert not state.occupancy[:, 7:].any()
        assert np.array_equal(state.occupancy, before)

    def test_x_mode_freeze_then_pass(self):
        # hand-traced: obstacle one cell right; freeze_steps=1 delays arrival
        # at the far neighbor by exactly 2 steps vs the unobstructed baseline
        mode = GrowthMode("X", "horizontal", freeze_steps=1)

        free_state = lone_tip_state(at=(5, 7))
        blocked_state = lone_tip_state(at=(5, 7))
        blocked_state.occupancy[7, 6] = True

        def steps_until(state, target):
            for n in range(1, 20):
                step(state, mode)
                if state.occupancy[target[1], target[0]]:
                    return n
            raise AssertionError("never reached")

        free_steps = steps_until(free_state, (7, 7))
        blocked_steps = steps_until(blocked_state, (7, 7))
        assert free_steps == 2
        assert blocked_steps == free_steps + 2

    def test_x_mode_freezes_per_occupied_cell(self):
        mode = GrowthMode("X", "horizontal", freeze_steps=1)
        state = lone_tip_state(at=(4, 7))
        state.occupancy[7, 5] = True
        state.occupancy[7, 6] = True  # run of two obstacles
        # unobstructed baseline to (7,7) is 3 steps; each obstacle cell costs
        # freeze_steps + 1 = 2 extra (trigger + serve, then pass) => 7 total
        for n in range(1, 20):
            step(state, mode)
            if state.occupancy[7, 7]:
                break
        assert n == 7

    def test_tips_leaving_grid_die(self):
        state = lone_tip_state(nx=9, ny=9, at=(8, 4), direction=(1, 0))
        step(state, GrowthMode("T", "horizontal"))
        assert not state.tips[0].alive

    def test_two_tips_entering_one_cell_both_succeed(self):
        occ = np.zeros((9, 9), dtype=bool)
        occ[4, 3] = occ[4, 5] = True
        state = RuleSimState(
            occupancy=occ,
            tips=[Tip(cell=(3, 4), direction=(1, 0)), Tip(cell=(5, 4), direction=(-1, 0))],
        )
        step(state, GrowthMode("T", "horizontal"))
        assert state.occupancy[4, 4]
        assert all(t.alive for t in state.tips)
        assert all(t.cell == (4, 4) for t in state.tips)

    def test_step_after_failure_is_noop(self):
        state = lone_tip_state()
        state.failed_at = 3
        before = state.occupancy.copy()
        out = step(state, GrowthMode("T", "horizontal"))
        assert out.step == 0
        assert np.array_equal(out.occupancy, before)


# --------------------------------------------------------------------------- #
# check_failure vs oracles
# --------------------------------------------------------------------------- #

class TestCheckFailure:
    def test_full_row_percolates(self):
        occ = np.zeros((8, 8), dtype=bool)
        occ[4, :] = True
        assert check_failure(occ, "horizontal")
        assert not check_failure(occ, "vertical")

    def test_diagonal_staircase_not_4_connected(self):
        occ = np.eye(8, dtype=bool)
        assert not check_failure(occ, "horizontal")
        assert not check_failure(occ, "vertical")
        assert check_failure(occ, "horizontal", connectivity=8)

    def test_exhaustive_small_grids(self):
        # every occupancy pattern on grids up to 4x4, both axes
        for ny, nx in [(2, 2), (3, 3), (2, 4), (4, 4)]:
            n = nx * ny
            for bits in range(2**n):
                occ = np.array(
                    [(bits >> k) & 1 for k in range(n)], dtype=bool
                ).reshape(ny, nx)
                for axis in ("horizontal", "vertical"):
                    assert check_failure(occ, axis) == bfs_oracle(occ, axis), (occ, axis)

    def test_sampled_8x8_sparse_grids(self):
        # 8x8 grids with <= 12 occupied cells, 20k deterministic draws
        rng = SeededRng(99)
        for _ in range(20000):
            k = int(rng.integers(0, 13))
            occ = np.zeros(64, dtype=bool)
            occ[rng.gen.choice(64, size=k, replace=False)] = True
            occ = occ.reshape(8, 8)
            axis = "horizontal" if rng.integers(0, 2) == 0 else "vertical"
            assert check_failure(occ, axis) == bfs_oracle(occ, axis)

    def test_random_16x16_grids_both_oracles(self):
        rng = SeededRng(5)
        for _ in range(1000):
            occ = rng.uniform(size=(16, 16)) < float(rng.uniform(0.2, 0.8))
            for axis in ("horizontal", "vertical"):
                got = check_failure(occ, axis)
                assert got == bfs_oracle(occ, axis)
                assert got == union_find_oracle(occ, axis)


# --------------------------------------------------------------------------- #
# run_rule_sim
# --------------------------------------------------------------------------- #

class TestRun:
    def test_9x9_trace_fails_at_step_3(self):
        g, cfg = grid_9x9_with_segment()
        _, failed_at, _ = run_rule_sim(cfg, g, GrowthMode("T", "horizontal"), max_steps=20)
        assert failed_at == 3

    def test_already_percolating_fails_at_zero(self):
        g = CartesianGrid(9, 9, 0.25)
        seg = FractureSegment(center=(0.125, 0.125), length=0.25, aperture=g.dy * 0.9)
        cfg = FractureConfig((seg,), 0.25)
        _, failed_at, _ = run_rule_sim(cfg, g, GrowthMode("T", "horizontal"), max_steps=5)
        assert failed_at == 0

    def test_failed_at_is_minimal(self):
        g, cfg = grid_9x9_with_segment()
        mode = GrowthMode("T", "horizontal")
        _, failed_at, traj = run_rule_sim(cfg, g, mode, max_steps=20, record_trajectory=True)
        for t, occ in enumerate(traj):
            assert check_failure(occ, "horizontal") == (t >= failed_at)

    def test_monotone_growth(self):
        g = CartesianGrid(16, 16, 0.25)
        rng = SeededRng(3)
        sampler = ConfigSampler(n_per_direction=(2, 5))
        from fraclab.initcond import sample_config

        for mode in ALL_MODES:
            cfg = sample_config(sampler, rng)
            _, _, traj = run_rule_sim(cfg, g, mode, max_steps=32, record_trajectory=True)
            for a, b in zip(traj, traj[1:]):
                assert (a <= b).all()

    def test_determinism_100_seeded_runs(self):
        g = CartesianGrid(16, 16, 0.25)
        sampler = ConfigSampler(n_per_direction=(2, 6))
        from fraclab.initcond import sample_config

        def batch():
            rng = SeededRng(42)
            results = []
            for k in range(100):
                cfg = sample_config(sampler, rng)
                mode = ALL_MODES[k % 4]
                occ, failed, _ = run_rule_sim(cfg, g, mode, max_steps=32)
                results.append((occ.tobytes(), failed))
            return results

        assert batch() == batch()


# --------------------------------------------------------------------------- #
# generate_stream
# --------------------------------------------------------------------------- #

class TestStream:
    def grid(self):
        return CartesianGrid(12, 12, 0.25)

    def test_stream_determinism(self):
        sampler = ConfigSampler(n_per_direction=(2, 5))

        def first10(seed):
            out = []
            for rec in generate_stream(SeededRng(seed), self.grid(), sampler):
                out.append((rec.deck_text, rec.input_field.tobytes(), rec.final_field.tobytes()))
                if len(out) == 10:
                    break
            return out

        assert first10(7) == first10(7)
        assert first10(7) != first10(8)

    def test_mode_histogram_uniform(self):
        from fraclab.rulebased import stream_records

        sampler = ConfigSampler(n_per_direction=(2, 4))
        counts = {}
        stream = stream_records(SeededRng(0), self.grid(), sampler)
        n = 10000
        for _ in range(n):
            _, mode = next(stream)
            key = (mode.arrest, mode.axis)
            counts[key] = counts.get(key, 0) + 1
        # binomial(n, 1/4): 3 sigma band
        expect = n / 4
        sigma = np.sqrt(n * 0.25 * 0.75)
        for key in itertools.product(("T", "X"), ("horizontal", "vertical")):
            assert abs(counts[key] - expect) <= 3 * sigma, counts

    def test_final_contains_initial(self):
        sampler = ConfigSampler(n_per_direction=(2, 5))
        stream = generate_stream(SeededRng(11), self.grid(), sampler)
        for _ in range(50):
            rec = next(stream)
            assert np.all(rec.final_field >= rec.input_field)


def test_dump_grid_text():
    occ = np.array([[0, 1], [1, 0]], dtype=float)
    text = dump_grid_text(occ)
    assert text == "0 255\n255 0\n"
