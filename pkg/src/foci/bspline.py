"""Uniform unclamped cubic B-splines in R^4 (x, y, z, yaw).

Splines are parameterized by a progress variable s on [0, H - 3) with unit
knot spacing, H control points, and a constant time-regulation factor
m = ds/dt that maps progress derivatives to time derivatives
(d^k x/dt^k = m^k d^k x/ds^k).

Besides evaluation and fitting, the module exposes per-segment convex-hull
control points in two polynomial bases: the native B-spline basis and the
minimum-volume (MINVO) basis, whose hulls are tighter and therefore give
less conservative derivative bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Cubic segment matrix: curve(u) = [1, u, u^2, u^3] @ SEGMENT_MATRIX_CUBIC @ Q[i:i+4]
# with u the local coordinate in [0, 1) of segment i.
SEGMENT_MATRIX_CUBIC = np.array(
    [
        [1.0, 4.0, 1.0, 0.0],
        [-3.0, 0.0, 3.0, 0.0],
        [3.0, -6.0, 3.0, 0.0],
        [-1.0, 3.0, -3.0, 1.0],
    ]
) / 6.0

# Quadratic and linear analogues, used for the derivative splines.
SEGMENT_MATRIX_QUADRATIC = np.array(
    [
        [1.0, 1.0, 0.0],
        [-2.0, 2.0, 0.0],
        [1.0, -2.0, 1.0],
    ]
) / 2.0

SEGMENT_MATRIX_LINEAR = np.array([[1.0, 0.0], [-1.0, 1.0]])


def _poly(*factors: tuple[float, ...]) -> np.ndarray:
    """Multiply polynomials given as coefficient tuples (increasing degree)."""
    out = np.array([1.0])
    for f in factors:
        out = np.polynomial.polynomial.polymul(out, np.asarray(f, dtype=float))
    return out


def _minvo_cubic_matrix() -> np.ndarray:
    """Degree-3 MINVO basis matrix on [0, 1], columns = basis polynomials.

    The four basis functions have the factored form
        l1 = a (u - r)^2 (1 - u),   l2 = b u (u - w)^2,
        l3(u) = l2(1 - u),          l4(u) = l1(1 - u),
    which makes them nonnegative on [0, 1] by construction. The parameters
    below solve the minimum-simplex-volume stationarity conditions under the
    partition-of-unity constraint.
    """
    a = 3.4416309550183682
    r = 0.5154412724495689
    b = 6.6792587661633054
    w = 0.8867742936731080
    l1 = a * _poly((-r, 1.0), (-r, 1.0), (1.0, -1.0))
    l2 = b * _poly((0.0, 1.0), (-w, 1.0), (-w, 1.0))
    l3 = b * _poly((1.0, -1.0), (w - 1.0, 1.0), (w - 1.0, 1.0))
    l4 = a * _poly((r - 1.0, 1.0), (r - 1.0, 1.0), (0.0, 1.0))
    return np.column_stack([l1, l2, l3, l4])


def _minvo_quadratic_matrix() -> np.ndarray:
    """Degree-2 MINVO basis matrix on [0, 1] (closed form, roots at (1±1/√3)/2)."""
    hi = 0.5 * (1.0 + 1.0 / math.sqrt(3.0))
    lo = 0.5 * (1.0 - 1.0 / math.sqrt(3.0))
    l1 = 1.5 * _poly((-hi, 1.0), (-hi, 1.0))
    l2 = _poly((0.0, 3.0), (1.0, -1.0))
    l3 = 1.5 * _poly((-lo, 1.0), (-lo, 1.0))
    return np.column_stack([l1, l2, l3])


MINVO_MATRIX_CUBIC = _minvo_cubic_matrix()
MINVO_MATRIX_QUADRATIC = _minvo_quadratic_matrix()

# Maps from B-spline segment control points to hull control points, per basis.
_HULL_TRANSFORMS = {
    3: {
        "bspline": np.eye(4),
        "minvo": np.linalg.solve(MINVO_MATRIX_CUBIC, SEGMENT_MATRIX_CUBIC),
    },
    2: {
        "bspline": np.eye(3),
        "minvo": np.linalg.solve(MINVO_MATRIX_QUADRATIC, SEGMENT_MATRIX_QUADRATIC),
    },
    # A degree-1 segment is its own minimal hull in either basis.
    1: {
        "bspline": np.eye(2),
        "minvo": np.eye(2),
    },
}

HULL_BASES = ("bspline", "minvo")


@dataclass
class TrajectorySpline:
    """Cubic B-spline trajectory with control points in R^4 = (x, y, z, yaw)."""

    control_points: np.ndarray
    time_regulation: float = 1.0

    def __post_init__(self) -> None:
        q = np.asarray(self.control_points, dtype=float)
        if q.ndim != 2 or q.shape[1] != 4:
            raise ValueError(f"control points must be H x 4, got {q.shape}")
        if q.shape[0] < 4:
            raise ValueError("a cubic spline needs at least 4 control points")
        if not self.time_regulation > 0.0:
            raise ValueError("time regulation factor must be positive")
        self.control_points = q

    @property
    def num_control_points(self) -> int:
        return self.control_points.shape[0]

    @property
    def num_segments(self) -> int:
        return self.control_points.shape[0] - 3

    @property
    def duration(self) -> float:
        """Trajectory duration in seconds: progress span divided by m."""
        return self.num_segments / self.time_regulation


@dataclass
class DiscretizationPlan:
    """Sampling matrices mapping control points to K discretized values.

    ``basis[d]`` is the K x H matrix of the d-th progress derivative, so the
    discretized derivative values are ``basis[d] @ Q`` (times m^d for time
    derivatives). Row k of ``basis[0]`` sums to 1 and has at most 4 nonzeros.
    """

    samples: int
    progress: np.ndarray
    basis: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] = field(repr=False)


_PROGRESS_END_MARGIN = 1e-9


def _monomial_row(u: float, order: int) -> np.ndarray:
    """Row [1, u, u^2, u^3] differentiated `order` times in u."""
    row = np.zeros(4)
    for k in range(order, 4):
        c = 1.0
        for j in range(order):
            c *= k - j
        row[k] = c * u ** (k - order)
    return row


def basis_row(s_local: float, order: int = 0) -> np.ndarray:
    """Weights of the 4 active control points at local coordinate s_local.

    `order` selects the derivative in the progress variable (0..3).
    """
    if not 0.0 <= s_local < 1.0:
        raise ValueError(f"local coordinate must lie in [0, 1), got {s_local}")
    if not 0 <= order <= 3:
        raise ValueError(f"derivative order must be 0..3, got {order}")
    return _monomial_row(float(s_local), order) @ SEGMENT_MATRIX_CUBIC


def build_discretization(H: int, K: int) -> DiscretizationPlan:
    """Equally spaced K-point discretization of the progress domain [0, H-3)."""
    if H < 4:
        raise ValueError("H must be at least 4")
    if K < 2:
        raise ValueError("K must be at least 2")
    s = np.linspace(0.0, (H - 3) - _PROGRESS_END_MARGIN, K)
    mats = [np.zeros((K, H)) for _ in range(4)]
    for k, sk in enumerate(s):
        i = min(int(math.floor(sk)), H - 4)
        u = sk - i
        for d in range(4):
            mats[d][k, i : i + 4] = basis_row(u, d)
    return DiscretizationPlan(samples=K, progress=s, basis=tuple(mats))


def evaluate(
    spline: TrajectorySpline, s: float, order: int = 0, in_time: bool = False
) -> np.ndarray:
    """Evaluate the spline (or a derivative) at progress s.

    With ``in_time`` the progress derivative is scaled by m^order to give the
    time derivative.
    """
    q = spline.control_points
    span = q.shape[0] - 3
    if not 0.0 <= s < span:
        raise ValueError(f"progress {s} outside [0, {span})")
    i = min(int(math.floor(s)), span - 1)
    value = basis_row(s - i, order) @ q[i : i + 4]
    if in_time:
        value = value * spline.time_regulation**order
    return value


def sample(
    spline: TrajectorySpline, K: int, order: int = 0, in_time: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized evaluation at K equally spaced progress values.

    Returns (progress values, K x 4 array of values).
    """
    plan = build_discretization(spline.num_control_points, K)
    values = plan.basis[order] @ spline.control_points
    if in_time:
        values = values * spline.time_regulation**order
    return plan.progress, values


def derivative_control_points(Q: np.ndarray, order: int) -> np.ndarray:
    """Control points of the derivative spline (unit knot spacing).

    Each differentiation is a first difference of the control points and
    lowers the spline degree by one; the result has H - order rows.
    """
    Q = np.asarray(Q, dtype=float)
    if not 1 <= order <= 3:
        raise ValueError("order must be 1..3")
    if Q.shape[0] - order < 1:
        raise ValueError("not enough control points for this order")
    return np.diff(Q, n=order, axis=0)


def segment_hull(Q: np.ndarray, segment: int, basis: str = "bspline") -> np.ndarray:
    """Convex-hull control points (4 x d) enclosing one cubic segment.

    ``basis="bspline"`` returns the segment's own control points;
    ``basis="minvo"`` returns the tighter minimum-volume simplex vertices.
    """
    Q = np.asarray(Q, dtype=float)
    n_seg = Q.shape[0] - 3
    if not 0 <= segment < n_seg:
        raise ValueError(f"segment {segment} outside 0..{n_seg - 1}")
    try:
        transform = _HULL_TRANSFORMS[3][basis]
    except KeyError:
        raise ValueError(f"unknown hull basis {basis!r}, expected one of {HULL_BASES}")
    return transform @ Q[segment : segment + 4]


def derivative_hull_matrix(H: int, derivative_order: int, basis: str) -> np.ndarray:
    """Linear map from Q to stacked per-segment hull points of a derivative spline.

    For order 1 (velocity, degree 2) each of the H - 3 segments contributes 3
    hull points; for order 2 (acceleration, degree 1) it contributes 2. The
    returned matrix A satisfies ``A @ Q = hull points`` stacked segment by
    segment, so norm bounds on the rows of ``A @ Q`` (scaled by m^order)
    bound the corresponding derivative along the entire spline.
    """
    if derivative_order not in (1, 2):
        raise ValueError("derivative order must be 1 or 2")
    if basis not in HULL_BASES:
        raise ValueError(f"unknown hull basis {basis!r}, expected one of {HULL_BASES}")
    degree = 3 - derivative_order
    transform = _HULL_TRANSFORMS[degree][basis]
    pts = degree + 1
    diff = np.eye(H)
    for _ in range(derivative_order):
        diff = np.diff(diff, axis=0)
    n_seg = H - 3
    out = np.zeros((n_seg * pts, H))
    for j in range(n_seg):
        out[j * pts : (j + 1) * pts] = transform @ diff[j : j + pts]
    return out


def _waypoint_progress(waypoints: np.ndarray, span: float) -> np.ndarray:
    """Progress values proportional to positional arc length along the waypoints."""
    steps = np.linalg.norm(np.diff(waypoints[:, :3], axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(steps)])
    total = cum[-1]
    if total <= 0.0:
        return np.linspace(0.0, span, waypoints.shape[0])
    return cum / total * span


_FIT_RIDGE = 1e-8


def fit_spline_to_path(
    waypoints: np.ndarray, H: int, progress: np.ndarray | None = None
) -> TrajectorySpline:
    """Least-squares fit of an H-control-point spline through R^4 waypoints.

    Waypoints get progress values proportional to normalized arc length unless
    explicit values are given; yaw is unwrapped before fitting so the spline
    never interpolates across a 2*pi seam. A small ridge term keeps the normal
    equations well posed when the fit is underdetermined.
    """
    W = np.array(waypoints, dtype=float)
    if W.ndim != 2 or W.shape[1] != 4:
        raise ValueError(f"waypoints must be n x 4, got {W.shape}")
    if W.shape[0] < 2:
        raise ValueError("need at least 2 waypoints")
    if H < 4:
        raise ValueError("H must be at least 4")
    W[:, 3] = np.unwrap(W[:, 3])
    span = (H - 3) - _PROGRESS_END_MARGIN
    if progress is None:
        progress = _waypoint_progress(W, span)
    else:
        progress = np.asarray(progress, dtype=float)
        if progress.shape != (W.shape[0],):
            raise ValueError("progress must have one value per waypoint")

    phi = np.zeros((W.shape[0], H))
    for k, sk in enumerate(progress):
        i = min(int(math.floor(sk)), H - 4)
        phi[k, i : i + 4] = basis_row(min(sk - i, 1.0 - 1e-12), 0)
    gram = phi.T @ phi + _FIT_RIDGE * np.eye(H)
    Q = np.linalg.solve(gram, phi.T @ W)
    # Refine against the unridged residual: removes the ridge bias on
    # well-posed fits while the regularized solve keeps rank-deficient
    # systems stable.
    for _ in range(3):
        Q = Q + np.linalg.solve(gram, phi.T @ (W - phi @ Q))
    return TrajectorySpline(control_points=Q, time_regulation=1.0)


def fit_residual(spline: TrajectorySpline, waypoints: np.ndarray) -> float:
    """Max positional deviation of the fitted spline from its waypoints."""
    W = np.asarray(waypoints, dtype=float)
    span = spline.num_segments - _PROGRESS_END_MARGIN
    progress = _waypoint_progress(W, span)
    fitted = np.stack([evaluate(spline, s) for s in progress])
    return float(np.max(np.linalg.norm(fitted[:, :3] - W[:, :3], axis=1)))
