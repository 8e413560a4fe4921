"""Gaussian splat scene and robot models.

The environment is a set of anisotropic 3D Gaussians (a Gaussian splat used
as geometry only); the robot is a small set of body-frame Gaussians rigidly
attached to a base posed by (position, yaw). Both are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.special import expit

from . import ply_io
from .ply_io import SplatFileError

COVARIANCE_EIGENVALUE_FLOOR = 1e-8  # m^2; keeps joint covariances invertible
_SYMMETRY_RTOL = 1e-12
DEFAULT_OPACITY_THRESHOLD = 0.3


class EmptySceneError(ValueError):
    """Raised when a scene ends up with zero Gaussians."""


def wrap_angle(yaw: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = (float(yaw) + math.pi) % (2.0 * math.pi) - math.pi
    if wrapped == -math.pi:
        wrapped = math.pi
    return wrapped


def rot_z(yaw: float) -> np.ndarray:
    """World rotation about +z."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_z_deriv(yaw: float) -> np.ndarray:
    """d/dyaw of rot_z."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def _validate_covariances(covs: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrize, floor eigenvalues, and return (covariances, max eigenvalues)."""
    covs = np.asarray(covs, dtype=float)
    asym = np.abs(covs - covs.transpose(0, 2, 1)).max(axis=(1, 2))
    scale = np.maximum(np.abs(covs).max(axis=(1, 2)), 1e-30)
    bad = asym > _SYMMETRY_RTOL * scale
    if bad.any():
        raise ValueError(f"{what} covariance {int(np.argmax(bad))} is not symmetric")
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    eigvals, eigvecs = np.linalg.eigh(covs)
    if (eigvals <= 0.0).any():
        idx = int(np.argmax((eigvals <= 0.0).any(axis=1)))
        raise ValueError(f"{what} covariance {idx} is not positive definite")
    needs_floor = eigvals < COVARIANCE_EIGENVALUE_FLOOR
    if needs_floor.any():
        eigvals = np.maximum(eigvals, COVARIANCE_EIGENVALUE_FLOOR)
        covs = np.einsum("nij,nj,nkj->nik", eigvecs, eigvals, eigvecs)
        covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    return covs, eigvals[:, -1]


@dataclass
class Gaussian3:
    """One anisotropic 3D Gaussian: mean (m), SPD covariance (m^2), weight."""

    mean: np.ndarray
    covariance: np.ndarray
    weight: float = 1.0

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        cov, _ = _validate_covariances(
            np.asarray(self.covariance, dtype=float).reshape(1, 3, 3), "gaussian"
        )
        self.covariance = cov[0]
        if self.weight < 0.0:
            raise ValueError("weight must be nonnegative")


@dataclass
class Pose:
    """Planar robot pose: 3D position plus yaw about world +z."""

    position: np.ndarray
    yaw: float = 0.0

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.yaw = wrap_angle(self.yaw)


class UniformGridIndex:
    """Uniform-grid buckets over point locations for radius queries."""

    def __init__(self, points: np.ndarray, cell_size: float):
        points = np.asarray(points, dtype=float)
        self.cell_size = float(cell_size)
        self.origin = points.min(axis=0)
        cells = np.floor((points - self.origin) / self.cell_size).astype(np.int64)
        self.dims = cells.max(axis=0) + 1
        order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
        sorted_cells = cells[order]
        boundaries = np.nonzero(np.any(np.diff(sorted_cells, axis=0) != 0, axis=1))[0] + 1
        starts = np.concatenate([[0], boundaries])
        ends = np.concatenate([boundaries, [len(order)]])
        self._buckets = {
            tuple(sorted_cells[s]): order[s:e] for s, e in zip(starts, ends)
        }
        self._points = points

    @property
    def bucket_sizes(self) -> list[int]:
        return [len(v) for v in self._buckets.values()]

    def query_ball(self, center: np.ndarray, radius: float) -> np.ndarray:
        """Indices of points within `radius` of `center` (exact, via buckets)."""
        center = np.asarray(center, dtype=float)
        lo = np.floor((center - radius - self.origin) / self.cell_size).astype(np.int64)
        hi = np.floor((center + radius - self.origin) / self.cell_size).astype(np.int64)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, self.dims - 1)
        if np.any(lo > hi):
            return np.empty(0, dtype=np.int64)
        chunks = []
        for ix in range(lo[0], hi[0] + 1):
            for iy in range(lo[1], hi[1] + 1):
                for iz in range(lo[2], hi[2] + 1):
                    bucket = self._buckets.get((ix, iy, iz))
                    if bucket is not None:
                        chunks.append(bucket)
        if not chunks:
            return np.empty(0, dtype=np.int64)
        candidates = np.concatenate(chunks)
        d2 = ((self._points[candidates] - center) ** 2).sum(axis=1)
        return candidates[d2 <= radius * radius]


_INDEX_CELL_SIGMA_FACTOR = 3.0


class SplatScene:
    """Immutable environment splat: N Gaussians plus a uniform-grid index."""

    def __init__(
        self,
        means: np.ndarray,
        covariances: np.ndarray,
        weights: np.ndarray | None = None,
    ):
        means = np.asarray(means, dtype=float).reshape(-1, 3)
        if means.shape[0] < 1:
            raise EmptySceneError("a scene needs at least one Gaussian")
        covariances = np.asarray(covariances, dtype=float).reshape(-1, 3, 3)
        if covariances.shape[0] != means.shape[0]:
            raise ValueError("means and covariances disagree in length")
        covariances, eigmax = _validate_covariances(covariances, "scene")
        if weights is None:
            weights = np.ones(means.shape[0])
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if (weights < 0.0).any():
            raise ValueError("weights must be nonnegative")

        self.means = means
        self.covariances = covariances
        self.weights = weights
        self.cov_eigmax = eigmax
        self.bounds = np.stack([means.min(axis=0), means.max(axis=0)])
        sigma = math.sqrt(float(np.median(eigmax)))
        cell = max(_INDEX_CELL_SIGMA_FACTOR * sigma, 1e-6)
        # keep the bucket grid from exploding on huge scenes with tiny splats
        extent = float(np.max(self.bounds[1] - self.bounds[0]))
        cell = max(cell, extent / 512.0) if extent > 0 else max(cell, 1.0)
        self.index = UniformGridIndex(means, cell)
        for arr in (self.means, self.covariances, self.weights, self.cov_eigmax, self.bounds):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def gaussians(self) -> list[Gaussian3]:
        return [
            Gaussian3(self.means[i], self.covariances[i], float(self.weights[i]))
            for i in range(len(self))
        ]

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian3]) -> "SplatScene":
        if not gaussians:
            raise EmptySceneError("a scene needs at least one Gaussian")
        return cls(
            np.stack([g.mean for g in gaussians]),
            np.stack([g.covariance for g in gaussians]),
            np.array([g.weight for g in gaussians]),
        )


@dataclass
class RobotBody:
    """One rigid body-frame Gaussian of the robot model."""

    offset: np.ndarray
    covariance: np.ndarray
    weight: float = 1.0

    def __post_init__(self) -> None:
        self.offset = np.asarray(self.offset, dtype=float).reshape(3)
        cov, _ = _validate_covariances(
            np.asarray(self.covariance, dtype=float).reshape(1, 3, 3), "robot body"
        )
        self.covariance = cov[0]
        if self.weight < 0.0:
            raise ValueError("weight must be nonnegative")


@dataclass
class RobotModel:
    """Rigid robot as M body-frame Gaussians with offsets from the base."""

    bodies: list[RobotBody]
    name: str = "robot"
    offsets: np.ndarray = field(init=False, repr=False)
    body_covariances: np.ndarray = field(init=False, repr=False)
    body_weights: np.ndarray = field(init=False, repr=False)
    body_eigmax: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.bodies:
            raise ValueError("a robot model needs at least one body")
        self.offsets = np.stack([b.offset for b in self.bodies])
        self.body_covariances = np.stack([b.covariance for b in self.bodies])
        self.body_weights = np.array([b.weight for b in self.bodies])
        self.body_eigmax = np.linalg.eigvalsh(self.body_covariances)[:, -1]
        for arr in (self.offsets, self.body_covariances, self.body_weights, self.body_eigmax):
            arr.setflags(write=False)

    @property
    def num_bodies(self) -> int:
        return len(self.bodies)


def robot_pose_arrays(
    robot: RobotModel, position: np.ndarray, yaw: float
) -> tuple[np.ndarray, np.ndarray]:
    """Posed body means (M x 3) and world covariances (M x 3 x 3)."""
    R = rot_z(yaw)
    means = np.asarray(position, dtype=float) + robot.offsets @ R.T
    covs = np.einsum("ij,njk,lk->nil", R, robot.body_covariances, R)
    return means, covs


def robot_gaussians_at_pose(robot: RobotModel, pose: Pose) -> list[Gaussian3]:
    """World-frame Gaussians of the robot at a pose (length M)."""
    means, covs = robot_pose_arrays(robot, pose.position, pose.yaw)
    return [
        Gaussian3(means[j], covs[j], float(robot.body_weights[j]))
        for j in range(robot.num_bodies)
    ]


def load_robot_model(path: str) -> RobotModel:
    """Load a robot model from a YAML file with `name` and a `bodies` list."""
    with open(path, "r") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "bodies" not in doc:
        raise ValueError(f"{path}: expected a mapping with a 'bodies' list")
    entries = doc["bodies"]
    if not entries:
        raise ValueError(f"{path}: robot model has no bodies")
    bodies = [
        RobotBody(
            offset=np.array(entry["offset"], dtype=float),
            covariance=np.array(entry["cov"], dtype=float),
            weight=float(entry.get("weight", 1.0)),
        )
        for entry in entries
    ]
    return RobotModel(bodies=bodies, name=str(doc.get("name", "robot")))


def quaternions_to_rotations(quats_wxyz: np.ndarray) -> np.ndarray:
    """Batch of rotation matrices from w-first quaternions (normalized here)."""
    q = np.asarray(quats_wxyz, dtype=float)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    norm[norm == 0.0] = 1.0
    w, x, y, z = (q / norm).T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )


def load_splat_ply(
    path: str,
    opacity_threshold: float = DEFAULT_OPACITY_THRESHOLD,
    opacity_as_weight: bool = False,
) -> SplatScene:
    """Load a standard splat PLY into a SplatScene.

    Points whose sigmoid opacity falls below the threshold are dropped. By
    default retained weights are 1; with ``opacity_as_weight`` the opacity is
    carried into the Gaussian weight instead.
    """
    cols = ply_io.read_splat_arrays(path)
    opacity = expit(cols["opacity"].astype(float))
    keep = opacity >= opacity_threshold
    if not keep.any():
        raise EmptySceneError(
            f"{path}: no Gaussians left after opacity threshold {opacity_threshold}"
        )
    means = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(float)[keep]
    log_scales = np.stack(
        [cols["scale_0"], cols["scale_1"], cols["scale_2"]], axis=1
    ).astype(float)[keep]
    quats = np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1).astype(float)[keep]
    R = quaternions_to_rotations(quats)
    variances = np.exp(2.0 * log_scales)
    covariances = np.einsum("nij,nj,nkj->nik", R, variances, R)
    weights = opacity[keep] if opacity_as_weight else None
    return SplatScene(means, covariances, weights)


def save_scene_ply(path: str, scene: SplatScene) -> None:
    """Write a scene back to splat PLY (axes of each covariance, full opacity)."""
    eigvals, eigvecs = np.linalg.eigh(scene.covariances)
    log_scales = 0.5 * np.log(eigvals)
    quats = rotations_to_quaternions(eigvecs)
    logits = np.full(len(scene), 8.0, dtype=float)
    ply_io.write_splat_ply(path, scene.means, log_scales, quats, logits)


def rotations_to_quaternions(R: np.ndarray) -> np.ndarray:
    """Batch of w-first quaternions from rotation matrices (eigvecs may be
    improper; flips one axis to restore det +1 first)."""
    R = np.array(R, dtype=float)
    det = np.linalg.det(R)
    R[det < 0, :, 0] *= -1.0
    w = np.sqrt(np.maximum(1.0 + R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2], 1e-12)) / 2.0
    denom = np.maximum(4.0 * w, 1e-9)
    x = (R[:, 2, 1] - R[:, 1, 2]) / denom
    y = (R[:, 0, 2] - R[:, 2, 0]) / denom
    z = (R[:, 1, 0] - R[:, 0, 1]) / denom
    q = np.stack([w, x, y, z], axis=1)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


def corridor_slabs(
    opening: float,
    wall_length: float = 4.0,
    wall_thickness: float = 0.2,
    wall_height: float = 1.5,
    gap_center: float = 0.0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Axis-aligned (lo, hi) boxes of the two wall segments beside the opening.

    The wall lies in the x = 0 plane and runs along y; travel is along +x
    through the gap.
    """
    if opening <= 0.0:
        raise ValueError("opening width must be positive")
    if opening >= wall_length:
        raise ValueError("opening must be narrower than the wall")
    half_t = wall_thickness / 2.0
    lo_y, hi_y = gap_center - opening / 2.0, gap_center + opening / 2.0
    left = (
        np.array([-half_t, -wall_length / 2.0, 0.0]),
        np.array([half_t, lo_y, wall_height]),
    )
    right = (
        np.array([-half_t, hi_y, 0.0]),
        np.array([half_t, wall_length / 2.0, wall_height]),
    )
    return [left, right]


def _fill_slab(
    rng: np.random.Generator,
    lo: np.ndarray,
    hi: np.ndarray,
    density: float,
    sigma_normal: float,
    sigma_tangent: float,
    edge_margin: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Scatter pancake Gaussians inside a y/z slab face (normal along x)."""
    area = (hi[1] - lo[1]) * (hi[2] - lo[2])
    n = int(round(density * area))
    if n <= 0:
        return np.empty((0, 3)), np.empty((0, 3, 3))
    y = rng.uniform(lo[1] + edge_margin, hi[1] - edge_margin, size=n)
    z = rng.uniform(lo[2] + edge_margin, hi[2] - edge_margin, size=n)
    x = rng.uniform(lo[0] + sigma_normal, hi[0] - sigma_normal, size=n)
    means = np.stack([x, y, z], axis=1)
    cov = np.diag([sigma_normal**2, sigma_tangent**2, sigma_tangent**2])
    return means, np.tile(cov, (n, 1, 1))


def generate_corridor_scene(
    opening: float = 0.6,
    wall_length: float = 4.0,
    wall_thickness: float = 0.2,
    wall_height: float = 1.5,
    density: float = 200.0,
    sigma_normal: float = 0.04,
    sigma_tangent: float = 0.03,
    edge_margin: float = 0.05,
    gap_center: float = 0.0,
    seed: int = 0,
) -> SplatScene:
    """Wall with a single opening; Gaussians tile the two wall segments."""
    slabs = corridor_slabs(opening, wall_length, wall_thickness, wall_height, gap_center)
    rng = np.random.default_rng(seed)
    all_means, all_covs = [], []
    for lo, hi in slabs:
        means, covs = _fill_slab(
            rng, lo, hi, density, sigma_normal, sigma_tangent, edge_margin
        )
        all_means.append(means)
        all_covs.append(covs)
    means = np.concatenate(all_means)
    if means.shape[0] == 0:
        raise EmptySceneError("corridor density too low: zero Gaussians generated")
    return SplatScene(means, np.concatenate(all_covs))


def pillar_centers(count: int, spacing: float = 2.0) -> np.ndarray:
    """Deterministic pillar layout: a staggered grid centered at the origin."""
    cols = int(math.ceil(math.sqrt(count)))
    centers = []
    for i in range(count):
        gx, gy = divmod(i, cols)
        centers.append(
            [
                (gx - (count / cols - 1) / 2.0) * spacing,
                (gy - (cols - 1) / 2.0) * spacing + (0.25 * spacing if gx % 2 else 0.0),
            ]
        )
    return np.array(centers)


def generate_pillar_scene(
    count: int = 4,
    radius: float = 0.3,
    height: float = 1.5,
    spacing: float = 2.0,
    density: float = 200.0,
    sigma_normal: float = 0.03,
    sigma_tangent: float = 0.04,
    seed: int = 0,
) -> SplatScene:
    """Vertical cylinder shells; Gaussians tile each lateral surface."""
    if count < 1:
        raise ValueError("pillar count must be at least 1")
    if radius <= 0.0:
        raise ValueError("pillar radius must be positive")
    rng = np.random.default_rng(seed)
    centers = pillar_centers(count, spacing)
    per_pillar = int(round(density * 2.0 * math.pi * radius * height))
    if per_pillar <= 0:
        raise EmptySceneError("pillar density too low: zero Gaussians generated")
    means, covs = [], []
    local = np.diag([sigma_normal**2, sigma_tangent**2, sigma_tangent**2])
    for cx, cy in centers:
        theta = rng.uniform(0.0, 2.0 * math.pi, size=per_pillar)
        z = rng.uniform(sigma_tangent, height - sigma_tangent, size=per_pillar)
        r_mean = radius - sigma_normal
        c, s = np.cos(theta), np.sin(theta)
        means.append(np.stack([cx + r_mean * c, cy + r_mean * s, z], axis=1))
        # pancake normal points radially outward
        zeros, ones = np.zeros_like(c), np.ones_like(c)
        R = np.stack(
            [
                np.stack([c, -s, zeros], -1),
                np.stack([s, c, zeros], -1),
                np.stack([zeros, zeros, ones], -1),
            ],
            axis=1,
        )
        covs.append(np.einsum("nij,jk,nlk->nil", R, local, R))
    return SplatScene(np.concatenate(means), np.concatenate(covs))


def generate_synthetic_scene(kind: str, **params) -> SplatScene:
    """Seeded synthetic test scenes: 'corridor' or 'pillars'."""
    if kind == "corridor":
        return generate_corridor_scene(**params)
    if kind == "pillars":
        return generate_pillar_scene(**params)
    raise ValueError(f"unknown scene kind {kind!r}, expected 'corridor' or 'pillars'")
