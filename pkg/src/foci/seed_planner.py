"""Initial-guess planner: occupancy grid from splat means, A*, spline fit.

The grid marks a voxel occupied when at least one scene Gaussian mean falls
inside it, optionally dilated for safety. A* runs on the (3D) grid with
Euclidean edge costs; the resulting waypoints are flattened to the planning
height, given a tangent-aligned yaw profile, and least-squares fitted with a
spline whose time-regulation factor is set from the velocity hull.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bspline import TrajectorySpline, derivative_control_points, fit_spline_to_path
from .splat_model import Pose, SplatScene, wrap_angle

SQRT2 = math.sqrt(2.0)
SQRT3 = math.sqrt(3.0)
_YAW_SMOOTHING_PASSES = 3


class GridSnapError(ValueError):
    """Start or goal voxel is occupied with no free voxel nearby."""


class UnreachableError(RuntimeError):
    """No grid path exists between start and goal."""


@dataclass
class OccupancyGrid:
    """Dense voxel grid; a voxel is occupied iff it contains a scene mean
    (before dilation)."""

    origin: np.ndarray
    voxel_size: float
    occupied: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.occupied.shape

    def voxel_of(self, point: np.ndarray) -> tuple[int, int, int]:
        idx = np.floor((np.asarray(point) - self.origin) / self.voxel_size).astype(int)
        return tuple(idx)

    def center_of(self, voxel: tuple[int, int, int]) -> np.ndarray:
        return self.origin + (np.asarray(voxel, dtype=float) + 0.5) * self.voxel_size

    def in_bounds(self, voxel: tuple[int, int, int]) -> bool:
        return all(0 <= v < d for v, d in zip(voxel, self.occupied.shape))

    def is_free(self, voxel: tuple[int, int, int]) -> bool:
        return self.in_bounds(voxel) and not self.occupied[voxel]


@dataclass
class SeedPath:
    """Grid path as voxel centers with its exact edge-cost total."""

    waypoints: list[np.ndarray]
    cost: float


DEFAULT_MAX_VOXELS = 10**8


def voxelize(
    scene: SplatScene,
    voxel_size: float,
    inflation: int = 1,
    extra_points: list[np.ndarray] | None = None,
    max_voxels: int = DEFAULT_MAX_VOXELS,
) -> OccupancyGrid:
    """Occupancy grid over the scene bounds (padded by one voxel) plus any
    extra points that must be covered, dilated by `inflation` voxels."""
    if voxel_size <= 0.0:
        raise ValueError("voxel size must be positive")
    lo = scene.bounds[0].copy()
    hi = scene.bounds[1].copy()
    for p in extra_points or []:
        lo = np.minimum(lo, p)
        hi = np.maximum(hi, p)
    origin = lo - voxel_size
    dims = np.floor((hi - origin) / voxel_size).astype(int) + 2
    if int(np.prod(dims)) > max_voxels:
        raise ResourceWarning(
            f"grid of {np.prod(dims)} voxels exceeds the cap of {max_voxels}"
        )
    occupied = np.zeros(tuple(dims), dtype=bool)
    cells = np.floor((scene.means - origin) / voxel_size).astype(int)
    occupied[cells[:, 0], cells[:, 1], cells[:, 2]] = True
    if inflation > 0:
        occupied = ndimage.binary_dilation(
            occupied, structure=np.ones((3, 3, 3), dtype=bool), iterations=inflation
        )
    return OccupancyGrid(origin=origin, voxel_size=voxel_size, occupied=occupied)


def _neighbor_offsets(connectivity: int) -> list[tuple[tuple[int, int, int], int]]:
    """Step offsets with their axis-move count (1, 2, or 3)."""
    if connectivity not in (6, 26):
        raise ValueError("connectivity must be 6 or 26")
    offsets = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                moves = abs(dx) + abs(dy) + abs(dz)
                if moves == 0:
                    continue
                if connectivity == 6 and moves > 1:
                    continue
                offsets.append(((dx, dy, dz), moves))
    return offsets


_STEP_LENGTH = {1: 1.0, 2: SQRT2, 3: SQRT3}


def _snap_to_free(grid: OccupancyGrid, point: np.ndarray, what: str) -> tuple[int, int, int]:
    voxel = grid.voxel_of(point)
    if grid.is_free(voxel):
        return voxel
    best = None
    for dx in range(-2, 3):
        for dy in range(-2, 3):
            for dz in range(-2, 3):
                cand = (voxel[0] + dx, voxel[1] + dy, voxel[2] + dz)
                if not grid.is_free(cand):
                    continue
                d2 = dx * dx + dy * dy + dz * dz
                if best is None or (d2, cand) < best:
                    best = (d2, cand)
    if best is None:
        raise GridSnapError(f"{what} voxel {voxel} occupied with no free voxel within 2")
    return best[1]


def _path_cost(steps: list[int], voxel_size: float) -> float:
    """Exact cost from step-type counts: n1 + n2*sqrt(2) + n3*sqrt(3), scaled."""
    counts = {1: 0, 2: 0, 3: 0}
    for s in steps:
        counts[s] += 1
    return (counts[1] + counts[2] * SQRT2 + counts[3] * SQRT3) * voxel_size


def astar(
    grid: OccupancyGrid,
    start: np.ndarray,
    goal: np.ndarray,
    connectivity: int = 26,
) -> SeedPath:
    """Optimal grid path under Euclidean edge costs with a Euclidean heuristic.

    Ties in f are broken lexicographically by voxel index, which makes the
    search fully deterministic.
    """
    start_v = _snap_to_free(grid, start, "start")
    goal_v = _snap_to_free(grid, goal, "goal")
    offsets = _neighbor_offsets(connectivity)
    goal_arr = np.array(goal_v, dtype=float)

    def heuristic(v) -> float:
        return float(np.linalg.norm(goal_arr - v)) * grid.voxel_size

    g_score = {start_v: 0.0}
    parent: dict[tuple[int, int, int], tuple[tuple[int, int, int], int]] = {}
    open_heap = [(heuristic(np.array(start_v, dtype=float)), start_v)]
    closed = set()
    while open_heap:
        _, current = heapq.heappop(open_heap)
        if current in closed:
            continue
        if current == goal_v:
            break
        closed.add(current)
        g_here = g_score[current]
        for (dx, dy, dz), moves in offsets:
            nxt = (current[0] + dx, current[1] + dy, current[2] + dz)
            if nxt in closed or not grid.is_free(nxt):
                continue
            g_new = g_here + _STEP_LENGTH[moves] * grid.voxel_size
            if g_new < g_score.get(nxt, math.inf):
                g_score[nxt] = g_new
                parent[nxt] = (current, moves)
                heapq.heappush(open_heap, (g_new + heuristic(np.array(nxt, float)), nxt))
    else:
        raise UnreachableError(f"no path from {start_v} to {goal_v}")

    voxels = [goal_v]
    steps = []
    while voxels[-1] != start_v:
        prev, moves = parent[voxels[-1]]
        steps.append(moves)
        voxels.append(prev)
    voxels.reverse()
    return SeedPath(
        waypoints=[grid.center_of(v) for v in voxels],
        cost=_path_cost(steps, grid.voxel_size),
    )


@dataclass
class SeedParams:
    """Knobs of the seeding pipeline."""

    voxel_size: float = 0.25
    inflation: int = 1
    connectivity: int = 26
    height: float = 0.5
    control_points: int = 20
    v_max: float = 1.0
    speed_fraction: float = 0.8
    yaw_smoothing: int = 2
    max_voxels: int = DEFAULT_MAX_VOXELS


def _smooth_path(positions: np.ndarray, window: int, passes: int = 2) -> np.ndarray:
    """Moving-average path smoothing with pinned endpoints."""
    if window <= 0 or positions.shape[0] <= 2:
        return positions
    smoothed = positions.astype(float).copy()
    for _ in range(passes):
        out = smoothed.copy()
        for i in range(1, positions.shape[0] - 1):
            lo = max(i - window, 0)
            hi = min(i + window + 1, positions.shape[0])
            out[i] = smoothed[lo:hi].mean(axis=0)
        smoothed = out
    return smoothed


def _yaw_profile(
    positions: np.ndarray, start_yaw: float, goal_yaw: float, smoothing: int
) -> np.ndarray:
    """Unwrapped smoothed-tangent headings, ramped into the commanded end yaws."""
    n = positions.shape[0]
    smoothed_pos = _smooth_path(positions, smoothing)
    headings = np.empty(n)
    for i in range(n):
        a = smoothed_pos[max(i - 1, 0)]
        b = smoothed_pos[min(i + 1, n - 1)]
        d = b - a
        if np.hypot(d[0], d[1]) < 1e-12:
            headings[i] = headings[i - 1] if i else start_yaw
        else:
            headings[i] = math.atan2(d[1], d[0])
    headings = np.unwrap(headings)
    if smoothing > 0 and n > 2:
        smoothed = headings.copy()
        for i in range(1, n - 1):
            lo = max(i - smoothing, 0)
            hi = min(i + smoothing + 1, n)
            smoothed[i] = headings[lo:hi].mean()
        headings = smoothed
    # ramp the commanded start/goal yaws into the tangent profile over a few
    # waypoints (in the closest 2*pi winding) so the endpoints are met
    # exactly without a step the spline fit would have to chase
    ramp_len = max(2, min(6, (n - 1) // 2))
    start_fix = wrap_angle(start_yaw - headings[0])
    goal_fix = wrap_angle(goal_yaw - headings[-1])
    idx = np.arange(n)
    headings = headings + start_fix * np.maximum(0.0, 1.0 - idx / ramp_len)
    headings = headings + goal_fix * np.maximum(0.0, 1.0 - (n - 1 - idx) / ramp_len)
    return headings


def _resample_waypoints(waypoints: np.ndarray, count: int) -> np.ndarray:
    """Linear re-interpolation at `count` points equally spaced in arc length."""
    if waypoints.shape[0] >= count:
        return waypoints
    steps = np.linalg.norm(np.diff(waypoints[:, :3], axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    if arc[-1] <= 0.0:
        arc = np.arange(waypoints.shape[0], dtype=float)
    targets = np.linspace(0.0, arc[-1], count)
    return np.column_stack(
        [np.interp(targets, arc, waypoints[:, c]) for c in range(waypoints.shape[1])]
    )


def seed_trajectory(
    scene: SplatScene, start: Pose, goal: Pose, params: SeedParams | None = None
) -> TrajectorySpline:
    """A*-seeded spline: grid path, height-flattened, tangent yaw, fitted."""
    params = params or SeedParams()
    grid = voxelize(
        scene,
        params.voxel_size,
        params.inflation,
        extra_points=[start.position, goal.position],
        max_voxels=params.max_voxels,
    )
    path = astar(grid, start.position, goal.position, params.connectivity)
    positions = np.array(path.waypoints)
    if positions.shape[0] == 1:
        positions = np.vstack([positions, positions])
    # blend the sub-voxel endpoint corrections along the path so the exact
    # start/goal positions are hit without kinking the first/last segment
    ramp = np.linspace(0.0, 1.0, positions.shape[0])[:, None]
    positions[:, :2] += (1.0 - ramp) * (start.position[:2] - positions[0, :2])
    positions[:, :2] += ramp * (goal.position[:2] - positions[-1, :2])
    positions[:, 2] = params.height
    yaws = _yaw_profile(positions, start.yaw, goal.yaw, params.yaw_smoothing)
    waypoints = np.column_stack([positions, yaws])
    # dense resampling turns the fit into a regression over many points per
    # control point, which suppresses interpolation ringing at path kinks
    waypoints = _resample_waypoints(waypoints, 4 * params.control_points)
    spline = fit_spline_to_path(waypoints, params.control_points)

    d1 = derivative_control_points(spline.control_points, 1)
    top_speed = float(np.linalg.norm(d1[:, :3], axis=1).max())
    if top_speed > 1e-9:
        m = params.speed_fraction * params.v_max / top_speed
    else:
        m = 1.0
    return TrajectorySpline(spline.control_points, time_regulation=m)


def grid_to_text(grid: OccupancyGrid) -> str:
    """Debug dump: dims, voxel size, origin, run-length-encoded occupancy."""
    flat = grid.occupied.ravel(order="C").astype(np.int8)
    runs = []
    if flat.size:
        change = np.nonzero(np.diff(flat))[0] + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [flat.size]])
        runs = [f"{e - s}:{int(flat[s])}" for s, e in zip(starts, ends)]
    lines = [
        "occupancy-grid v1",
        "dims: " + " ".join(str(d) for d in grid.dims),
        f"voxel_size: {grid.voxel_size!r}",
        "origin: " + " ".join(repr(float(x)) for x in grid.origin),
        "rle: " + " ".join(runs),
    ]
    return "\n".join(lines) + "\n"


def grid_from_text(text: str) -> OccupancyGrid:
    lines = text.strip().splitlines()
    if not lines or lines[0] != "occupancy-grid v1":
        raise ValueError("not an occupancy grid dump")
    fields = dict(line.split(": ", 1) for line in lines[1:])
    dims = tuple(int(x) for x in fields["dims"].split())
    voxel_size = float(fields["voxel_size"])
    origin = np.array([float(x) for x in fields["origin"].split()])
    flat = np.empty(int(np.prod(dims)), dtype=bool)
    pos = 0
    rle = fields.get("rle", "").split()
    for token in rle:
        count, value = token.split(":")
        count = int(count)
        flat[pos : pos + count] = bool(int(value))
        pos += count
    if pos != flat.size:
        raise ValueError("run-length data does not match dims")
    return OccupancyGrid(
        origin=origin, voxel_size=voxel_size, occupied=flat.reshape(dims, order="C")
    )
