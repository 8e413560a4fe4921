"""Overlap-integral collision measure between a posed robot and a splat scene.

The measure is the integral over space of the product of the environment and
robot Gaussian-mixture densities. For a pair of normalized Gaussians that
integral collapses to a single Gaussian density evaluated at one mean with
the summed covariances, so the full measure is a double sum of closed-form
terms, differentiable in the robot pose.

All evaluation routines are pure functions over immutable inputs;
batch_collision may partition the pose axis across worker threads and is
bitwise deterministic regardless of the thread count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .splat_model import (
    Gaussian3,
    Pose,
    RobotModel,
    SplatScene,
    rot_z,
    rot_z_deriv,
)

_GAUSS_NORM_3D = (2.0 * math.pi) ** -1.5
_YAW_GENERATOR = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


@dataclass
class CollisionEval:
    """Collision measure value and its gradient in (x, y, z, yaw)."""

    value: float
    grad: np.ndarray


@dataclass
class CullSet:
    """Retained (environment index, robot body index) pairs for evaluation.

    Built from a pose list with a Mahalanobis-style distance cutoff; any pair
    whose overlap could exceed exp(-cutoff^2 / 2) times its zero-separation
    peak at one of those poses is guaranteed to be retained.
    """

    pairs: np.ndarray
    cutoff: float

    def env_indices_for_body(self, j: int) -> np.ndarray:
        return self.pairs[self.pairs[:, 1] == j, 0]


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: explicit argument, else FOCI_THREADS, else all cores."""
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("FOCI_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _sym3_inv_det(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse and determinant of symmetric 3x3 matrices via the adjugate."""
    a, b, c = S[..., 0, 0], S[..., 0, 1], S[..., 0, 2]
    d, e, f = S[..., 1, 1], S[..., 1, 2], S[..., 2, 2]
    cof_a = d * f - e * e
    cof_b = c * e - b * f
    cof_c = b * e - c * d
    det = a * cof_a + b * cof_b + c * cof_c
    if not np.all(det > 0.0) or not np.all(np.isfinite(det)):
        raise np.linalg.LinAlgError("joint covariance is singular or indefinite")
    inv = np.empty_like(S)
    inv[..., 0, 0] = cof_a
    inv[..., 0, 1] = inv[..., 1, 0] = cof_b
    inv[..., 0, 2] = inv[..., 2, 0] = cof_c
    inv[..., 1, 1] = a * f - c * c
    inv[..., 1, 2] = inv[..., 2, 1] = b * c - a * e
    inv[..., 2, 2] = a * d - b * b
    inv /= det[..., None, None]
    return inv, det


def _pair_terms(
    env_means: np.ndarray,
    env_covs: np.ndarray,
    env_weights: np.ndarray,
    body_mean: np.ndarray,
    body_cov: np.ndarray,
    body_weight: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pair overlap values against one robot body.

    Returns (values, S_inv @ diff, S_inv) for gradient reuse.
    """
    S = env_covs + body_cov
    inv, det = _sym3_inv_det(S)
    diff = body_mean - env_means
    A = np.einsum("nij,nj->ni", inv, diff)
    mahal = np.einsum("ni,ni->n", diff, A)
    values = (
        env_weights * body_weight * _GAUSS_NORM_3D / np.sqrt(det) * np.exp(-0.5 * mahal)
    )
    return values, A, inv


def pair_overlap(env: Gaussian3, rob: Gaussian3) -> float:
    """Overlap integral of two weighted Gaussian densities (closed form)."""
    values, _, _ = _pair_terms(
        env.mean[None],
        env.covariance[None],
        np.array([env.weight]),
        rob.mean,
        rob.covariance,
        rob.weight,
    )
    return float(values[0])


def collision_measure(
    scene: SplatScene,
    robot_gaussians: list[Gaussian3],
    cull: CullSet | None = None,
) -> float:
    """Sum of pair overlaps between the scene and already-posed robot Gaussians."""
    if not robot_gaussians:
        raise ValueError("robot_gaussians must be nonempty")
    total = 0.0
    for j, g in enumerate(robot_gaussians):
        if cull is None:
            means, covs, weights = scene.means, scene.covariances, scene.weights
        else:
            idx = cull.env_indices_for_body(j)
            if idx.size == 0:
                continue
            means, covs, weights = scene.means[idx], scene.covariances[idx], scene.weights[idx]
        values, _, _ = _pair_terms(means, covs, weights, g.mean, g.covariance, g.weight)
        total += float(values.sum())
    return total


def _sym_components(covs: np.ndarray) -> tuple[np.ndarray, ...]:
    """Contiguous (a, b, c, d, e, f) components of symmetric matrices
    [[a, b, c], [b, d, e], [c, e, f]]."""
    return tuple(
        np.ascontiguousarray(covs[..., i, j])
        for i, j in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
    )


class _BodyEnvCache:
    """Per-body environment slices, gathered once per (scene, cull) pass."""

    def __init__(self, scene: SplatScene, num_bodies: int, cull: CullSet | None):
        self.slices = []
        for j in range(num_bodies):
            if cull is None:
                idx = None
                means, covs, weights = scene.means, scene.covariances, scene.weights
            else:
                idx = cull.env_indices_for_body(j)
                means, covs, weights = (
                    scene.means[idx],
                    scene.covariances[idx],
                    scene.weights[idx],
                )
            self.slices.append((means, _sym_components(covs), weights))


_PAIR_CHUNK_BUDGET = 250_000  # (pose, pair) entries per vectorized slab


def _eval_poses(
    robot: RobotModel,
    cache: _BodyEnvCache,
    positions: np.ndarray,
    yaws: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized collision values (K,) and pose gradients (K, 4).

    Runs on packed symmetric components so every array op is contiguous.
    Per-pose results are invariant to how the pose axis is chunked: every
    reduction runs along the pair axis of each pose row.
    """
    K = positions.shape[0]
    cos, sin = np.cos(yaws), np.sin(yaws)
    zero, one = np.zeros(K), np.ones(K)
    R = np.stack(
        [
            np.stack([cos, -sin, zero], -1),
            np.stack([sin, cos, zero], -1),
            np.stack([zero, zero, one], -1),
        ],
        axis=1,
    )
    Rd = np.stack(
        [
            np.stack([-sin, -cos, zero], -1),
            np.stack([cos, -sin, zero], -1),
            np.stack([zero, zero, zero], -1),
        ],
        axis=1,
    )
    values = np.zeros(K)
    grads = np.zeros((K, 4))
    for j in range(robot.num_bodies):
        env_means, env_comp, env_weights = cache.slices[j]
        P = env_means.shape[0]
        if P == 0:
            continue
        C = robot.body_covariances[j]
        body_means = positions + np.einsum("kij,j->ki", R, robot.offsets[j])
        body_comp = _sym_components(np.einsum("kij,jl,kml->kim", R, C, R))
        # dCov/dyaw = R (J C - C J) R^T, exactly zero for isotropic bodies
        commutator = _YAW_GENERATOR @ C - C @ _YAW_GENERATOR
        dcov_comp = _sym_components(np.einsum("kij,jl,kml->kim", R, commutator, R))
        dmeans = np.einsum("kij,j->ki", Rd, robot.offsets[j])
        w_j = float(robot.body_weights[j])

        chunk = max(1, _PAIR_CHUNK_BUDGET // P)
        for k0 in range(0, K, chunk):
            k1 = min(k0 + chunk, K)
            col = slice(None)
            sa, sb, sc, sd, se, sf = (
                b[k0:k1, None] + e[None, col]
                for b, e in zip(body_comp, env_comp)
            )
            cof_a = sd * sf - se * se
            cof_b = sc * se - sb * sf
            cof_c = sb * se - sc * sd
            det = sa * cof_a + sb * cof_b + sc * cof_c
            if not np.all(det > 0.0) or not np.all(np.isfinite(det)):
                raise np.linalg.LinAlgError("joint covariance is singular or indefinite")
            i00 = cof_a / det
            i01 = cof_b / det
            i02 = cof_c / det
            i11 = (sa * sf - sc * sc) / det
            i12 = (sb * sc - sa * se) / det
            i22 = (sa * sd - sb * sb) / det
            d0 = body_means[k0:k1, 0, None] - env_means[None, :, 0]
            d1 = body_means[k0:k1, 1, None] - env_means[None, :, 1]
            d2 = body_means[k0:k1, 2, None] - env_means[None, :, 2]
            A0 = i00 * d0 + i01 * d1 + i02 * d2
            A1 = i01 * d0 + i11 * d1 + i12 * d2
            A2 = i02 * d0 + i12 * d1 + i22 * d2
            mahal = d0 * A0 + d1 * A1 + d2 * A2
            vals = (
                env_weights[None, :]
                * w_j
                * _GAUSS_NORM_3D
                / np.sqrt(det)
                * np.exp(-0.5 * mahal)
            )
            values[k0:k1] += vals.sum(axis=1)
            # d value / d mean = -value * S^-1 diff, summed over pairs
            sA0 = (vals * A0).sum(axis=1)
            sA1 = (vals * A1).sum(axis=1)
            sA2 = (vals * A2).sum(axis=1)
            grads[k0:k1, 0] -= sA0
            grads[k0:k1, 1] -= sA1
            grads[k0:k1, 2] -= sA2
            # yaw moves the body mean and spins its covariance; the latter
            # enters via tr(G dS), G = -1/2 (S^-1 - S^-1 dd^T S^-1)
            dm = dmeans[k0:k1]
            grads[k0:k1, 3] -= sA0 * dm[:, 0] + sA1 * dm[:, 1] + sA2 * dm[:, 2]
            ga, gb, gc, gd, ge, gf = (g[k0:k1, None] for g in dcov_comp)
            tr_inv = i00 * ga + i11 * gd + i22 * gf + 2.0 * (i01 * gb + i02 * gc + i12 * ge)
            tr_outer = (
                ga * A0 * A0
                + gd * A1 * A1
                + gf * A2 * A2
                + 2.0 * (gb * A0 * A1 + gc * A0 * A2 + ge * A1 * A2)
            )
            grads[k0:k1, 3] += (-0.5 * vals * (tr_inv - tr_outer)).sum(axis=1)
    return values, grads


def collision_gradient(
    scene: SplatScene,
    robot: RobotModel,
    pose: Pose,
    cull: CullSet | None = None,
) -> CollisionEval:
    """Collision measure and its gradient with respect to (position, yaw)."""
    cache = _BodyEnvCache(scene, robot.num_bodies, cull)
    values, grads = _eval_poses(robot, cache, pose.position[None], np.array([pose.yaw]))
    return CollisionEval(value=float(values[0]), grad=grads[0])


def build_cull_set(
    scene: SplatScene,
    robot: RobotModel,
    poses: list[Pose],
    cutoff: float = 6.0,
) -> CullSet:
    """Pairs whose center distance, minimized over the poses, is within
    cutoff * sqrt(eigmax_env + eigmax_body)."""
    if cutoff < 3.0:
        raise ValueError("cull cutoff below 3 would visibly truncate the measure")
    n, m = len(scene), robot.num_bodies
    if math.isinf(cutoff):
        pairs = np.stack(np.meshgrid(np.arange(n), np.arange(m), indexing="ij"), -1)
        return CullSet(pairs=pairs.reshape(-1, 2), cutoff=cutoff)
    keep = np.zeros((n, m), dtype=bool)
    env_eigmax = scene.cov_eigmax
    max_env = float(env_eigmax.max())
    for j in range(m):
        query_radius = cutoff * math.sqrt(max_env + robot.body_eigmax[j])
        pair_radius2 = cutoff**2 * (env_eigmax + robot.body_eigmax[j])
        offset = robot.offsets[j]
        for pose in poses:
            center = pose.position + rot_z(pose.yaw) @ offset
            candidates = scene.index.query_ball(center, query_radius)
            if candidates.size == 0:
                continue
            d2 = ((scene.means[candidates] - center) ** 2).sum(axis=1)
            keep[candidates[d2 <= pair_radius2[candidates]], j] = True
    return CullSet(pairs=np.argwhere(keep), cutoff=cutoff)


def batch_collision(
    scene: SplatScene,
    robot: RobotModel,
    poses: list[Pose],
    cull: CullSet | None = None,
    threads: int | None = None,
) -> list[CollisionEval]:
    """Per-pose collision evaluations, optionally spread across worker threads.

    Element k equals collision_gradient at poses[k]; results do not depend on
    the thread count (each pose is evaluated by exactly one worker with the
    same reduction order).
    """
    if not poses:
        raise ValueError("poses must be nonempty")
    cache = _BodyEnvCache(scene, robot.num_bodies, cull)
    positions = np.stack([p.position for p in poses])
    yaws = np.array([p.yaw for p in poses])
    workers = resolve_threads(threads)
    if workers == 1 or len(poses) == 1:
        values, grads = _eval_poses(robot, cache, positions, yaws)
        return [CollisionEval(float(v), g) for v, g in zip(values, grads)]

    values = np.zeros(len(poses))
    grads = np.zeros((len(poses), 4))

    def run_chunk(indices):
        v, g = _eval_poses(robot, cache, positions[indices], yaws[indices])
        values[indices] = v
        grads[indices] = g

    chunks = np.array_split(np.arange(len(poses)), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_chunk, chunk) for chunk in chunks if chunk.size]
        for fut in futures:
            fut.result()
    return [CollisionEval(float(v), g) for v, g in zip(values, grads)]
