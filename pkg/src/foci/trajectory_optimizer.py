"""Spline trajectory optimization over a splat scene.

Minimizes weighted collision + jerk + goal-distance over the spline control
points, subject to the start pose (eliminated exactly), a fixed trajectory
height (z control points removed from the decision variables), and
velocity/acceleration bounds enforced on convex-hull control points of the
derivative splines. Inequalities are handled by an augmented-Lagrangian
outer loop around a limited-memory quasi-Newton inner solver.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.optimize import minimize

from . import bspline
from .bspline import HULL_BASES, TrajectorySpline, build_discretization, derivative_hull_matrix
from .collision_field import CullSet, batch_collision, build_cull_set, resolve_threads
from .seed_planner import SeedParams, seed_trajectory
from .splat_model import Pose, RobotModel, SplatScene, robot_pose_arrays, wrap_angle


@dataclass
class SolverSettings:
    """Tolerances and iteration caps of the augmented-Lagrangian solver."""

    eq_tol: float = 1e-6
    ineq_tol: float = 1e-6
    max_outer_iterations: int = 30
    max_inner_iterations: int = 200
    initial_penalty: float = 10.0
    penalty_growth: float = 10.0
    penalty_cap: float = 1e8
    violation_shrink: float = 0.25
    objective_tol: float = 1e-8
    merit_weight: float = 1e5
    norm_smoothing: float = 1e-6

    @classmethod
    def from_yaml(cls, path: str) -> "SolverSettings":
        with open(path, "r") as fh:
            doc = yaml.safe_load(fh) or {}
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown solver settings: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class PlanningProblem:
    """One full planning instance: scene, robot, endpoints, weights, bounds."""

    scene: SplatScene
    robot: RobotModel
    start: Pose
    goal: Pose
    weights: tuple[float, float, float] = (0.1, 40.0, 1.0)
    bounds: tuple[float, float, float, float] = (1.0, 2.0, 1.5, 3.0)
    height: float = 0.5
    control_points: int = 20
    samples: int = 64
    hull_basis: str = "minvo"
    optimize_yaw: bool = True
    cull_cutoff: float = 6.0
    settings: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be nonnegative")
        if any(b <= 0 for b in self.bounds):
            raise ValueError("bounds must be positive")
        if self.samples < self.control_points:
            raise ValueError("need at least as many samples as control points")
        if self.hull_basis not in HULL_BASES:
            raise ValueError(f"hull basis must be one of {HULL_BASES}")
        if abs(self.start.position[2] - self.height) > 1e-9:
            raise ValueError("start height must equal the planning height")

    @property
    def start_state(self) -> np.ndarray:
        return np.append(self.start.position, self.start.yaw)

    @property
    def goal_state(self) -> np.ndarray:
        return np.append(self.goal.position, self.goal.yaw)


@dataclass
class PlanResult:
    spline: TrajectorySpline
    objective_terms: tuple[float, float, float]
    constraint_report: dict[str, float]
    iterations: int
    converged: bool
    timings: dict[str, float]
    merit_history: list[float] = field(default_factory=list)


@dataclass
class ConstraintResiduals:
    """Signed residuals; equality entries want zero, inequalities want <= 0."""

    start: np.ndarray
    height: np.ndarray
    velocity_pos: np.ndarray
    velocity_yaw: np.ndarray
    accel_pos: np.ndarray
    accel_yaw: np.ndarray

    def inequalities(self) -> np.ndarray:
        return np.concatenate(
            [self.velocity_pos, self.velocity_yaw, self.accel_pos, self.accel_yaw]
        )

    def report(self) -> dict[str, float]:
        return {
            "start": float(np.abs(self.start).max()),
            "height": float(np.abs(self.height).max()),
            "velocity": float(self.velocity_pos.max()),
            "velocity_yaw": float(self.velocity_yaw.max()),
            "acceleration": float(self.accel_pos.max()),
            "acceleration_yaw": float(self.accel_yaw.max()),
        }


def _smooth_norm(u: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """sqrt(|u|^2 + eps^2) - eps and its gradient (zero value/grad at zero)."""
    sq = (u * u).sum(axis=-1)
    root = np.sqrt(sq + eps * eps)
    return root - eps, u / root[..., None]


def objective_and_grad(
    Q: np.ndarray,
    problem: PlanningProblem,
    time_regulation: float = 1.0,
    cull: CullSet | None = None,
    threads: int | None = None,
    goal_state: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Weighted collision + jerk + goal objective and its H x 4 gradient."""
    Q = np.asarray(Q, dtype=float)
    plan = build_discretization(Q.shape[0], problem.samples)
    w1, w2, w3 = problem.weights
    eps = problem.settings.norm_smoothing
    m = time_regulation
    goal = problem.goal_state if goal_state is None else goal_state

    X = plan.basis[0] @ Q
    grad = np.zeros_like(Q)

    poses = [Pose(x[:3], x[3]) for x in X]
    evals = batch_collision(problem.scene, problem.robot, poses, cull=cull, threads=threads)
    collision = w1 * float(sum(ev.value for ev in evals))
    sample_grads = np.stack([ev.grad for ev in evals])
    grad += w1 * plan.basis[0].T @ sample_grads

    jerk_samples = m**3 * (plan.basis[3] @ Q)
    norms, units = _smooth_norm(jerk_samples, eps)
    jerk = w2 * float(norms.sum())
    grad += w2 * m**3 * plan.basis[3].T @ units

    diff = X[-1] - goal
    goal_norm, goal_unit = _smooth_norm(diff[None], eps)
    goal_term = w3 * float(goal_norm[0])
    grad += w3 * np.outer(plan.basis[0][-1], goal_unit[0])

    return collision + jerk + goal_term, grad


def constraint_residuals(
    Q: np.ndarray, problem: PlanningProblem, time_regulation: float = 1.0
) -> ConstraintResiduals:
    """Start/height equality residuals and hull-based derivative bounds."""
    Q = np.asarray(Q, dtype=float)
    H = Q.shape[0]
    plan = build_discretization(H, problem.samples)
    X = plan.basis[0] @ Q
    v_max, a_max, w_max, alpha_max = problem.bounds
    m = time_regulation

    vel_pts = m * (derivative_hull_matrix(H, 1, problem.hull_basis) @ Q)
    acc_pts = m**2 * (derivative_hull_matrix(H, 2, problem.hull_basis) @ Q)
    return ConstraintResiduals(
        start=X[0] - problem.start_state,
        height=X[:, 2] - problem.height,
        velocity_pos=np.linalg.norm(vel_pts[:, :3], axis=1) - v_max,
        velocity_yaw=np.abs(vel_pts[:, 3]) - w_max,
        accel_pos=np.linalg.norm(acc_pts[:, :3], axis=1) - a_max,
        accel_yaw=np.abs(acc_pts[:, 3]) - alpha_max,
    )


class _Workspace:
    """Variable packing, start elimination, and constraint linear maps."""

    def __init__(self, problem: PlanningProblem, m: float, goal_state: np.ndarray):
        H = problem.control_points
        self.problem = problem
        self.m = m
        self.goal_state = goal_state
        self.free_cols = [0, 1, 3] if problem.optimize_yaw else [0, 1]
        self.H = H
        self.vel_map = derivative_hull_matrix(H, 1, problem.hull_basis)
        self.acc_map = derivative_hull_matrix(H, 2, problem.hull_basis)
        self.n_vel = self.vel_map.shape[0]
        self.n_acc = self.acc_map.shape[0]
        self.num_constraints = 2 * self.n_vel + 2 * self.n_acc

    def apply_elimination(self, Q: np.ndarray) -> None:
        """First spline sample is (q0 + 4 q1 + q2) / 6; solve it for q0."""
        Q[0] = 6.0 * self.problem.start_state - 4.0 * Q[1] - Q[2]
        Q[:, 2] = self.problem.height

    def pack(self, Q: np.ndarray) -> np.ndarray:
        return Q[1:, self.free_cols].ravel().copy()

    def unpack(self, theta: np.ndarray, template: np.ndarray) -> np.ndarray:
        Q = template.copy()
        Q[1:, self.free_cols] = theta.reshape(self.H - 1, len(self.free_cols))
        self.apply_elimination(Q)
        return Q

    def reduce_gradient(self, grad_Q: np.ndarray) -> np.ndarray:
        """Chain the q0 elimination into the free-variable gradient."""
        g = grad_Q.copy()
        g[1] += -4.0 * grad_Q[0]
        g[2] += -1.0 * grad_Q[0]
        return g[1:, self.free_cols].ravel()

    def inequality_values(self, Q: np.ndarray) -> np.ndarray:
        v_max, a_max, w_max, alpha_max = self.problem.bounds
        vel = self.m * (self.vel_map @ Q)
        acc = self.m**2 * (self.acc_map @ Q)
        return np.concatenate(
            [
                np.linalg.norm(vel[:, :3], axis=1) - v_max,
                np.abs(vel[:, 3]) - w_max,
                np.linalg.norm(acc[:, :3], axis=1) - a_max,
                np.abs(acc[:, 3]) - alpha_max,
            ]
        )

    def inequality_gradient(self, Q: np.ndarray, coeff: np.ndarray) -> np.ndarray:
        """Sum of coeff_i * d c_i / dQ for the stacked inequality vector."""
        grad = np.zeros_like(Q)
        vel = self.m * (self.vel_map @ Q)
        acc = self.m**2 * (self.acc_map @ Q)
        nv, na = self.n_vel, self.n_acc

        w = coeff[:nv]
        norms = np.maximum(np.linalg.norm(vel[:, :3], axis=1), 1e-12)
        grad[:, :3] += self.m * self.vel_map.T @ ((w / norms)[:, None] * vel[:, :3])
        w = coeff[nv : 2 * nv]
        grad[:, 3] += self.m * self.vel_map.T @ (w * np.sign(vel[:, 3]))
        w = coeff[2 * nv : 2 * nv + na]
        norms = np.maximum(np.linalg.norm(acc[:, :3], axis=1), 1e-12)
        grad[:, :3] += self.m**2 * self.acc_map.T @ ((w / norms)[:, None] * acc[:, :3])
        w = coeff[2 * nv + na :]
        grad[:, 3] += self.m**2 * self.acc_map.T @ (w * np.sign(acc[:, 3]))
        return grad


def _merit(objective: float, violations: np.ndarray, weight: float) -> float:
    return objective + weight * float(np.maximum(violations, 0.0).sum())


def optimize(
    problem: PlanningProblem,
    seed_spline: TrajectorySpline | None = None,
    seed_params: SeedParams | None = None,
    threads: int | None = None,
) -> PlanResult:
    """Solve the planning problem from an A* seed (or a caller-provided spline)."""
    settings = problem.settings
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    if seed_spline is None:
        if seed_params is None:
            seed_params = SeedParams(
                height=problem.height,
                control_points=problem.control_points,
                v_max=problem.bounds[0],
            )
        seed_spline = seed_trajectory(problem.scene, problem.start, problem.goal, seed_params)
    timings["seed"] = time.perf_counter() - t0
    if seed_spline.num_control_points != problem.control_points:
        raise ValueError("seed control-point count does not match the problem")

    m = seed_spline.time_regulation
    t0 = time.perf_counter()
    plan = build_discretization(problem.control_points, problem.samples)

    # express the goal yaw in the winding the seed profile ends in
    seed_end_yaw = float((plan.basis[0] @ seed_spline.control_points)[-1, 3])
    goal_state = problem.goal_state
    goal_state[3] = seed_end_yaw + wrap_angle(goal_state[3] - seed_end_yaw)

    workspace = _Workspace(problem, m, goal_state)
    Q = seed_spline.control_points.copy()
    workspace.apply_elimination(Q)
    theta = workspace.pack(Q)
    template = Q.copy()
    threads = resolve_threads(threads)

    lam = np.zeros(workspace.num_constraints)
    rho = settings.initial_penalty

    def make_cull(Q_now: np.ndarray) -> CullSet:
        X = plan.basis[0] @ Q_now
        poses = [Pose(x[:3], x[3]) for x in X]
        return build_cull_set(problem.scene, problem.robot, poses, problem.cull_cutoff)

    def objective_of(theta_now: np.ndarray, cull: CullSet):
        Q_now = workspace.unpack(theta_now, template)
        f, grad_Q = objective_and_grad(
            Q_now, problem, time_regulation=m, cull=cull,
            threads=threads, goal_state=goal_state,
        )
        return Q_now, f, grad_Q

    def augmented(theta_now: np.ndarray, cull: CullSet):
        Q_now, f, grad_Q = objective_of(theta_now, cull)
        c = workspace.inequality_values(Q_now)
        shifted = np.maximum(0.0, lam + rho * c)
        value = f + float(((shifted**2 - lam**2) / (2.0 * rho)).sum())
        grad_Q = grad_Q + workspace.inequality_gradient(Q_now, shifted)
        return value, workspace.reduce_gradient(grad_Q)

    best_theta = theta.copy()
    cull = make_cull(workspace.unpack(theta, template))
    Q0, f0, _ = objective_of(theta, cull)
    best_merit = _merit(f0, workspace.inequality_values(Q0), settings.merit_weight)
    merit_history = [best_merit]
    prev_objective = f0
    prev_violation = math.inf
    converged = False
    outer = 0

    for outer in range(1, settings.max_outer_iterations + 1):
        cull = make_cull(workspace.unpack(best_theta, template))
        res = minimize(
            augmented,
            best_theta,
            args=(cull,),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": settings.max_inner_iterations, "maxcor": 20},
        )
        candidate = res.x
        if not np.all(np.isfinite(candidate)):
            rho = min(rho * settings.penalty_growth, settings.penalty_cap)
            continue
        Q_cand, f_cand, _ = objective_of(candidate, cull)
        c = workspace.inequality_values(Q_cand)
        violation = float(np.maximum(c, 0.0).max(initial=0.0))
        merit = _merit(f_cand, c, settings.merit_weight)

        if merit <= best_merit * (1 + 1e-12) + 1e-12:
            best_theta = candidate
            best_merit = min(best_merit, merit)
            merit_history.append(best_merit)
            lam = np.maximum(0.0, lam + rho * c)
            if violation <= settings.ineq_tol:
                rel_change = abs(f_cand - prev_objective) / max(1.0, abs(f_cand))
                if rel_change <= settings.objective_tol or res.status == 0:
                    converged = True
                    prev_objective = f_cand
                    break
            prev_objective = f_cand
        if violation > settings.violation_shrink * prev_violation:
            rho = min(rho * settings.penalty_growth, settings.penalty_cap)
        prev_violation = min(prev_violation, violation)

    Q_final = workspace.unpack(best_theta, template)
    timings["solve"] = time.perf_counter() - t0

    cull = make_cull(Q_final)
    w1, w2, w3 = problem.weights
    X = plan.basis[0] @ Q_final
    poses = [Pose(x[:3], x[3]) for x in X]
    evals = batch_collision(problem.scene, problem.robot, poses, cull=cull, threads=threads)
    collision_term = w1 * float(sum(ev.value for ev in evals))
    eps = settings.norm_smoothing
    jerk_norms, _ = _smooth_norm(m**3 * (plan.basis[3] @ Q_final), eps)
    jerk_term = w2 * float(jerk_norms.sum())
    goal_norm, _ = _smooth_norm((X[-1] - goal_state)[None], eps)
    goal_term = w3 * float(goal_norm[0])

    residuals = constraint_residuals(Q_final, problem, time_regulation=m)
    return PlanResult(
        spline=TrajectorySpline(Q_final, time_regulation=m),
        objective_terms=(collision_term, jerk_term, goal_term),
        constraint_report=residuals.report(),
        iterations=outer,
        converged=converged,
        timings=timings,
        merit_history=merit_history,
    )


@dataclass
class ValidationThresholds:
    bound_tol: float = 1e-6
    height_tol: float = 1e-6
    min_mahalanobis: float = 4.0
    max_collision: float = math.inf


@dataclass
class ValidationReport:
    max_velocity: float
    max_acceleration: float
    max_yaw_rate: float
    max_yaw_accel: float
    max_height_error: float
    collision_profile: np.ndarray
    min_mahalanobis: float
    bounds_ok: bool
    height_ok: bool
    clearance_ok: bool
    collision_ok: bool

    @property
    def passed(self) -> bool:
        return self.bounds_ok and self.height_ok and self.clearance_ok and self.collision_ok


def _min_mahalanobis(
    scene: SplatScene, robot: RobotModel, X: np.ndarray
) -> float:
    """Exact min over samples and all pairs of the joint-covariance distance."""
    from .collision_field import _sym3_inv_det

    best = math.inf
    for x in X:
        means, covs = robot_pose_arrays(robot, x[:3], x[3])
        for j in range(robot.num_bodies):
            S = scene.covariances + covs[j]
            inv, _ = _sym3_inv_det(S)
            diff = means[j] - scene.means
            d = np.einsum("ni,nij,nj->n", diff, inv, diff)
            best = min(best, float(d.min()))
    return best


def validate_plan(
    result: PlanResult,
    problem: PlanningProblem,
    sampling: int = 512,
    thresholds: ValidationThresholds | None = None,
    threads: int | None = None,
) -> ValidationReport:
    """Dense-sampled constraint check, collision profile, and clearance."""
    thr = thresholds or ValidationThresholds()
    spline = result.spline
    m = spline.time_regulation
    Q = spline.control_points
    plan = build_discretization(Q.shape[0], sampling)
    X = plan.basis[0] @ Q
    V = m * (plan.basis[1] @ Q)
    A = m**2 * (plan.basis[2] @ Q)

    v_max, a_max, w_max, alpha_max = problem.bounds
    max_v = float(np.linalg.norm(V[:, :3], axis=1).max())
    max_a = float(np.linalg.norm(A[:, :3], axis=1).max())
    max_w = float(np.abs(V[:, 3]).max())
    max_alpha = float(np.abs(A[:, 3]).max())
    max_height = float(np.abs(X[:, 2] - problem.height).max())

    poses = [Pose(x[:3], x[3]) for x in X]
    cull = build_cull_set(problem.scene, problem.robot, poses, problem.cull_cutoff)
    evals = batch_collision(problem.scene, problem.robot, poses, cull=cull, threads=threads)
    profile = np.array([ev.value for ev in evals])
    min_dm = _min_mahalanobis(problem.scene, problem.robot, X)

    bounds_ok = (
        max_v <= v_max + thr.bound_tol
        and max_a <= a_max + thr.bound_tol
        and max_w <= w_max + thr.bound_tol
        and max_alpha <= alpha_max + thr.bound_tol
    )
    return ValidationReport(
        max_velocity=max_v,
        max_acceleration=max_a,
        max_yaw_rate=max_w,
        max_yaw_accel=max_alpha,
        max_height_error=max_height,
        collision_profile=profile,
        min_mahalanobis=min_dm,
        bounds_ok=bounds_ok,
        height_ok=max_height <= thr.height_tol,
        clearance_ok=min_dm >= thr.min_mahalanobis,
        collision_ok=float(profile.max()) <= thr.max_collision,
    )
