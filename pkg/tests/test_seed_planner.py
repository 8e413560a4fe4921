import heapq
import math

import numpy as np
import pytest

from foci.bspline import sample
from foci.seed_planner import (
    GridSnapError,
    OccupancyGrid,
    SeedParams,
    UnreachableError,
    astar,
    grid_from_text,
    grid_to_text,
    seed_trajectory,
    voxelize,
)
from foci.splat_model import Pose, SplatScene, corridor_slabs, generate_synthetic_scene

SQRT2, SQRT3 = math.sqrt(2.0), math.sqrt(3.0)


def dijkstra_cost(grid, start_v, goal_v, connectivity=26):
    """Brute-force uniform-cost search; exact step-count cost accounting."""
    offsets = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                moves = abs(dx) + abs(dy) + abs(dz)
                if moves == 0 or (connectivity == 6 and moves > 1):
                    continue
                offsets.append(((dx, dy, dz), moves))
    step = {1: 1.0, 2: SQRT2, 3: SQRT3}
    best = {start_v: (0.0, (0, 0, 0))}
    heap = [(0.0, start_v, (0, 0, 0))]
    done = set()
    while heap:
        g, v, counts = heapq.heappop(heap)
        if v in done:
            continue
        done.add(v)
        if v == goal_v:
            n1, n2, n3 = counts
            return (n1 + n2 * SQRT2 + n3 * SQRT3) * grid.voxel_size
        for (dx, dy, dz), moves in offsets:
            nxt = (v[0] + dx, v[1] + dy, v[2] + dz)
            if nxt in done or not grid.is_free(nxt):
                continue
            g_new = g + step[moves] * grid.voxel_size
            if nxt not in best or g_new < best[nxt][0] - 1e-12:
                c = list(counts)
                c[moves - 1] += 1
                best[nxt] = (g_new, tuple(c))
                heapq.heappush(heap, (g_new, nxt, tuple(c)))
    return None


def empty_grid(n=16, voxel=0.5):
    return OccupancyGrid(
        origin=np.zeros(3), voxel_size=voxel, occupied=np.zeros((n, n, n), dtype=bool)
    )


class TestVoxelize:
    def test_single_gaussian_single_voxel(self):
        scene = SplatScene(np.zeros((1, 3)), 0.01 * np.eye(3)[None])
        grid = voxelize(scene, 0.5, inflation=0)
        assert int(grid.occupied.sum()) == 1
        assert grid.occupied[grid.voxel_of(np.zeros(3))]

    def test_empty_region_unoccupied(self):
        scene = SplatScene(np.zeros((1, 3)), 0.01 * np.eye(3)[None])
        grid = voxelize(scene, 0.5, inflation=0, extra_points=[np.array([5.0, 5, 5])])
        assert not grid.occupied[grid.voxel_of(np.array([5.0, 5.0, 5.0]))]

    def test_corridor_forms_two_slabs(self):
        scene = generate_synthetic_scene("corridor", opening=0.8, density=300.0)
        grid = voxelize(
            scene, 0.2, inflation=0, extra_points=[np.array([-0.6, 0.0, 0.75]), np.array([0.6, 0.0, 0.75])]
        )
        slabs = corridor_slabs(0.8)
        occ = np.argwhere(grid.occupied)
        centers = grid.origin + (occ + 0.5) * grid.voxel_size
        # every occupied voxel center is within half a voxel of a wall slab
        pad = grid.voxel_size
        ok = np.zeros(len(centers), dtype=bool)
        for lo, hi in slabs:
            ok |= np.all((centers >= lo - pad) & (centers <= hi + pad), axis=1)
        assert ok.all()
        # and a free channel crosses the gap
        for x in np.linspace(-0.4, 0.4, 9):
            assert grid.is_free(grid.voxel_of(np.array([x, 0.0, 0.75])))

    def test_dilation_grows_occupancy(self):
        scene = SplatScene(np.zeros((1, 3)), 0.01 * np.eye(3)[None])
        g0 = voxelize(scene, 0.5, inflation=0)
        g1 = voxelize(scene, 0.5, inflation=1)
        assert g1.occupied.sum() == 27

        del g0

    def test_voxel_cap(self):
        scene = SplatScene(
            np.array([[0.0, 0, 0], [100.0, 100, 100]]), np.tile(0.01 * np.eye(3), (2, 1, 1))
        )
        with pytest.raises(ResourceWarning):
            voxelize(scene, 0.01, max_voxels=10**6)

    def test_deterministic_and_idempotent(self):
        scene = generate_synthetic_scene("pillars", count=3, density=100.0)
        a = voxelize(scene, 0.25)
        b = voxelize(scene, 0.25)
        np.testing.assert_array_equal(a.occupied, b.occupied)


class TestAstar:
    def test_straight_line_cost_6_connected(self):
        grid = empty_grid()
        start, goal = np.array([0.25, 0.25, 0.25]), np.array([5.25, 0.25, 0.25])
        path = astar(grid, start, goal, connectivity=6)
        assert path.cost == pytest.approx(10 * 0.5)
        assert len(path.waypoints) == 11

    def test_walled_in_goal_unreachable(self):
        grid = empty_grid(8)
        grid.occupied[3:7, 3:7, 3:7] = True
        grid.occupied[4:6, 4:6, 4:6] = False
        with pytest.raises(UnreachableError):
            astar(grid, np.array([0.3, 0.3, 0.3]), np.array([2.3, 2.3, 2.3]))

    def test_snap_error_when_buried(self):
        grid = empty_grid(10)
        grid.occupied[0:7, 0:7, 0:7] = True
        with pytest.raises(GridSnapError):
            astar(grid, np.array([1.6, 1.6, 1.6]), np.array([4.6, 4.6, 4.6]))

    def test_wall_with_gap_matches_dijkstra(self):
        grid = empty_grid(12)
        grid.occupied[6, :, :] = True
        grid.occupied[6, 5, 4] = False
        start, goal = np.array([0.75, 2.75, 2.25]), np.array([5.25, 2.75, 2.25])
        path = astar(grid, start, goal)
        cost = dijkstra_cost(grid, grid.voxel_of(start), grid.voxel_of(goal))
        assert path.cost == cost
        xs = [wp[0] for wp in path.waypoints]
        assert max(xs) > 3.0  # crossed the wall plane through the gap

    @pytest.mark.parametrize("trial", range(6))
    def test_random_grids_match_dijkstra_exactly(self, trial):
        rng = np.random.default_rng(300 + trial)
        grid = empty_grid(20, voxel=0.3)
        grid.occupied[:] = rng.random((20, 20, 20)) < 0.3
        free = np.argwhere(~grid.occupied)
        start_v, goal_v = (tuple(free[i]) for i in rng.choice(len(free), 2, replace=False))
        want = dijkstra_cost(grid, start_v, goal_v)
        start = grid.center_of(start_v)
        goal = grid.center_of(goal_v)
        if want is None:
            with pytest.raises(UnreachableError):
                astar(grid, start, goal)
        else:
            assert astar(grid, start, goal).cost == want


class TestSeedTrajectory:
    def free_scene(self):
        # a single far-away splat so the space between start and goal is empty
        return SplatScene(np.array([[0.0, 8.0, 0.5]]), 0.02 * np.eye(3)[None])

    def test_free_space_straight_with_flat_yaw(self):
        scene = self.free_scene()
        params = SeedParams(height=0.5, v_max=1.0)
        sp = seed_trajectory(
            scene, Pose(np.array([0.0, 0, 0.5]), 0.0), Pose(np.array([5.0, 0, 0.5]), 0.0), params
        )
        _, X = sample(sp, 64)
        assert np.abs(X[:, 3]).max() < 1e-3
        assert np.abs(X[:, 2] - 0.5).max() < 1e-6
        assert np.abs(X[:, 1]).max() < 0.2

    def test_seed_velocity_within_fraction_of_limit(self):
        scene = self.free_scene()
        params = SeedParams(v_max=2.0, speed_fraction=0.8)
        sp = seed_trajectory(
            scene, Pose(np.array([0.0, 0, 0.5])), Pose(np.array([6.0, 1.0, 0.5])), params
        )
        _, V = sample(sp, 200, order=1, in_time=True)
        assert np.linalg.norm(V[:, :3], axis=1).max() <= 0.8 * 2.0 + 1e-9

    def test_corridor_seed_passes_through_opening(self):
        scene = generate_synthetic_scene("corridor", opening=0.6, density=200.0)
        params = SeedParams(voxel_size=0.15, inflation=1, height=0.5, control_points=16)
        sp = seed_trajectory(
            scene,
            Pose(np.array([-2.5, 0, 0.5]), math.pi / 2),
            Pose(np.array([2.5, 0, 0.5]), math.pi / 2),
            params,
        )
        grid = voxelize(
            scene, 0.15, inflation=0,
            extra_points=[np.array([-2.5, 0, 0.5]), np.array([2.5, 0, 0.5])],
        )
        _, X = sample(sp, 128)
        for x in X:
            assert grid.is_free(grid.voxel_of(x[:3]))
        # crossing happens inside the opening band
        crossing = X[np.abs(X[:, 0]) < 0.12]
        assert np.abs(crossing[:, 1]).max() < 0.3

    def test_reversed_goal_yaw_unwraps_without_jump(self):
        scene = self.free_scene()
        sp = seed_trajectory(
            scene,
            Pose(np.array([0.0, 0, 0.5]), 0.0),
            Pose(np.array([-5.0, 0.3, 0.5]), math.pi),
            SeedParams(),
        )
        _, X = sample(sp, 128)
        dpsi = np.abs(np.diff(X[:, 3]))
        assert dpsi.max() < 0.5
        assert abs(abs(X[-1, 3]) - math.pi) < 0.2


class TestGridText:
    def test_round_trip(self):
        rng = np.random.default_rng(31)
        grid = empty_grid(9, voxel=0.37)
        grid.occupied[:] = rng.random((9, 9, 9)) < 0.4
        back = grid_from_text(grid_to_text(grid))
        np.testing.assert_array_equal(back.occupied, grid.occupied)
        assert back.voxel_size == grid.voxel_size
        np.testing.assert_array_equal(back.origin, grid.origin)

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            grid_from_text("not a grid")
