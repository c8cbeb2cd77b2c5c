"""Rotations, rigid poses, and per-image camera trajectories.

Conventions used throughout the package:

- Quaternions are scalar-first ``(w, x, y, z)``, unit norm, canonicalized to
  ``w >= 0`` at construction.
- A twist is a plain 6-vector ``(rho, phi)``: translational part first,
  rotational part last, both in world units / radians.
- ``se3_exp`` / ``se3_log`` map twists to :class:`Pose` and back with the
  closed-form Rodrigues expressions and a second-order Taylor branch below
  ``SMALL_ANGLE``.
- Perturbations are always applied on the left: a knot delta ``eps`` turns a
  stored knot ``T`` into ``se3_exp(eps) @ T``, and every Jacobian in this
  module is taken with respect to such left perturbations.

A trajectory covers one image's exposure with parameter ``u`` in [0, 1].
Linear trajectories interpolate two knots along a constant twist. Cubic
trajectories evaluate a cumulative B-spline over four knots; ``u`` spans the
middle segment, so the spline passes near (not through) the inner knots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi, DomainError

# Below this rotation angle the closed-form Rodrigues coefficients are
# replaced by their Taylor expansions to avoid 0/0.
SMALL_ANGLE = 1e-8

# The rotation logarithm is rejected this close to pi, where the axis is
# numerically unstable.
NEAR_PI_MARGIN = 1e-6

TRAJECTORY_KINDS = ("linear", "cubic")
KNOTS_PER_KIND = {"linear": 2, "cubic": 4}


def skew(v: np.ndarray) -> np.ndarray:
    """Return the 3x3 cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two (w, x, y, z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit (w, x, y, z) quaternion."""
    w, x, y, z = q
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit (w, x, y, z) quaternion of a rotation matrix, w >= 0.

    Shepperd's method: pick the largest of the four squared components to
    avoid cancellation near 180-degree rotations.
    """
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    candidates = np.array([tr, m[0, 0], m[1, 1], m[2, 2]])
    case = int(np.argmax(candidates))
    if case == 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif case == 1:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif case == 2:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return _canonicalize(q / np.linalg.norm(q))


def _canonicalize(q: np.ndarray) -> np.ndarray:
    return -q if q[0] < 0.0 else q


@dataclass(frozen=True)
class Rotation:
    """A 3D rotation stored as a unit quaternion, canonical sign w >= 0."""

    wxyz: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.wxyz, dtype=float).reshape(4)
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise DomainError("quaternion norm too small to normalize")
        object.__setattr__(self, "wxyz", _canonicalize(q / norm))

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Rotation":
        return Rotation(matrix_to_quat(m))

    @staticmethod
    def from_axis_angle(phi: np.ndarray) -> "Rotation":
        """Rotation about axis phi/|phi| by angle |phi| (radians)."""
        phi = np.asarray(phi, dtype=float).reshape(3)
        angle = np.linalg.norm(phi)
        if angle < SMALL_ANGLE:
            half_sinc = 0.5
        else:
            half_sinc = math.sin(0.5 * angle) / angle
        return Rotation(np.concatenate(([math.cos(0.5 * angle)], phi * half_sinc)))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.wxyz)

    def inverse(self) -> "Rotation":
        w, x, y, z = self.wxyz
        return Rotation(np.array([w, -x, -y, -z]))

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.wxyz, other.wxyz))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return self.compose(other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Rotate one 3-vector or an (N, 3) stack."""
        return np.asarray(points, dtype=float) @ self.matrix().T

    def log(self) -> np.ndarray:
        """Axis-angle 3-vector; raises AngleNearPi within NEAR_PI_MARGIN of pi."""
        w = self.wxyz[0]
        v = self.wxyz[1:]
        s = np.linalg.norm(v)
        angle = 2.0 * math.atan2(s, w)
        if angle >= math.pi - NEAR_PI_MARGIN:
            raise AngleNearPi(f"rotation angle {angle:.9f} within {NEAR_PI_MARGIN} of pi")
        if s < SMALL_ANGLE:
            # sin(angle/2) ~ angle/2, so v ~ axis * angle / 2.
            return 2.0 * v
        return v * (angle / s)


@dataclass(frozen=True)
class Pose:
    """A rigid transform x -> R x + t (rotation then translation)."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        out = np.eye(4)
        out[:3, :3] = self.rotation.matrix()
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation.compose(other.rotation),
            self.rotation.apply(other.translation) + self.translation,
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.rotation.apply(points) + self.translation


def _rodrigues_v(phi: np.ndarray) -> np.ndarray:
    """The matrix V with t = V rho in the se(3) exponential."""
    angle = np.linalg.norm(phi)
    k = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    a = (1.0 - math.cos(angle)) / (angle * angle)
    b = (angle - math.sin(angle)) / (angle**3)
    return np.eye(3) + a * k + b * (k @ k)


def _rodrigues_v_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse of :func:`_rodrigues_v` in closed form."""
    angle = np.linalg.norm(phi)
    k = skew(phi)
    if angle < 1e-4:
        # Taylor of (1 - (angle/2) cot(angle/2)) / angle^2.
        c = 1.0 / 12.0 + angle * angle / 720.0
    else:
        half = 0.5 * angle
        c = (1.0 - half * math.cos(half) / math.sin(half)) / (angle * angle)
    return np.eye(3) - 0.5 * k + c * (k @ k)


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map of a twist (rho, phi) to a rigid pose."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    rotation = Rotation.from_axis_angle(phi)
    return Pose(rotation, _rodrigues_v(phi) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Principal logarithm of a pose; raises AngleNearPi near pi rotation."""
    phi = pose.rotation.log()
    rho = _rodrigues_v_inv(phi) @ pose.translation
    return np.concatenate([rho, phi])


def adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint: twists satisfy T exp(xi) T^-1 = exp(adjoint(T) xi)."""
    r = pose.rotation.matrix()
    out = np.zeros((6, 6))
    out[:3, :3] = r
    out[:3, 3:] = skew(pose.translation) @ r
    out[3:, 3:] = r
    return out


def ad_matrix(xi: np.ndarray) -> np.ndarray:
    """6x6 Lie bracket matrix of a twist: ad(a) b = [a, b]."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho_hat = skew(xi[:3])
    phi_hat = skew(xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = phi_hat
    out[:3, 3:] = rho_hat
    out[3:, 3:] = phi_hat
    return out


def left_jacobian(xi: np.ndarray) -> np.ndarray:
    """SE(3) left Jacobian: se3_exp(xi + d) ~ se3_exp(J d) @ se3_exp(xi).

    Evaluated as the series sum_k ad(xi)^k / (k+1)!, which converges for all
    twists in the working range (|phi| < pi) and has no singular branches.
    """
    a = ad_matrix(xi)
    total = np.eye(6)
    term = np.eye(6)
    for k in range(1, 60):
        term = (a @ term) / (k + 1.0)
        total = total + term
        if np.abs(term).max() < 1e-17:
            break
    return total


def left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return np.linalg.solve(left_jacobian(xi), np.eye(6))


def interpolate_linear(start: Pose, end: Pose, u: float) -> Pose:
    """Constant-twist interpolation: start @ exp(u * log(start^-1 @ end))."""
    omega = se3_log(start.inverse() @ end)
    return start @ se3_exp(u * omega)


def cubic_basis(u: float) -> np.ndarray:
    """Cumulative B-spline weights (b1, b2, b3) for the middle segment."""
    u2 = u * u
    u3 = u2 * u
    return np.array(
        [
            (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0,
            (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0,
            u3 / 6.0,
        ]
    )


def interpolate_cubic(knots: list[Pose], u: float) -> Pose:
    """Cumulative cubic B-spline over four knots, u on the middle segment.

    T(u) = T1 exp(b1 W1) exp(b2 W2) exp(b3 W3) with Wj = log(Tj^-1 Tj+1).
    When all inter-knot twists are equal this reduces to constant velocity
    with T(0) = T2 and T(1) = T3.
    """
    if len(knots) != 4:
        raise DomainError(f"cubic interpolation needs 4 knots, got {len(knots)}")
    weights = cubic_basis(u)
    pose = knots[0]
    for j in range(3):
        omega = se3_log(knots[j].inverse() @ knots[j + 1])
        pose = pose @ se3_exp(weights[j] * omega)
    return pose


@dataclass
class TrajectorySpline:
    """One image's camera motion over its exposure, u in [0, 1].

    ``knots`` are world-to-camera poses. ``knot_deltas`` are left-applied
    twist corrections, one 6-vector per knot; the optimizer steps them and
    then folds them back into the knots, so they are zero between steps.
    """

    kind: str
    knots: list[Pose]
    knot_deltas: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.kind not in TRAJECTORY_KINDS:
            raise DomainError(f"unknown trajectory kind {self.kind!r}")
        expected = KNOTS_PER_KIND[self.kind]
        if len(self.knots) != expected:
            raise DomainError(f"{self.kind} trajectory needs {expected} knots, got {len(self.knots)}")
        if self.knot_deltas is None:
            self.knot_deltas = np.zeros((expected, 6))
        else:
            self.knot_deltas = np.asarray(self.knot_deltas, dtype=float).reshape(expected, 6)

    @property
    def num_knots(self) -> int:
        return len(self.knots)

    def effective_knots(self) -> list[Pose]:
        """Knots with the current deltas applied on the left.

        A knot whose delta is exactly zero is returned unchanged (not
        recomposed with the identity), so converged poses stay bitwise
        stable across fold cycles.
        """
        return [
            k if not d.any() else se3_exp(d) @ k
            for d, k in zip(self.knot_deltas, self.knots)
        ]

    def pose_at(self, u: float) -> Pose:
        if not 0.0 <= u <= 1.0:
            raise DomainError(f"trajectory parameter u={u} outside [0, 1]")
        knots = self.effective_knots()
        if self.kind == "linear":
            return interpolate_linear(knots[0], knots[1], u)
        return interpolate_cubic(knots, u)

    def fold_deltas(self) -> "TrajectorySpline":
        """Absorb the deltas into the knots and reset them to zero."""
        return TrajectorySpline(self.kind, self.effective_knots())

    def copy(self) -> "TrajectorySpline":
        return TrajectorySpline(self.kind, list(self.knots), self.knot_deltas.copy())


def linear_to_cubic(traj: TrajectorySpline) -> TrajectorySpline:
    """Re-express a linear trajectory as an equivalent 4-knot cubic.

    Knots (Ts exp(-W), Ts, Te, Te exp(W)) with W = log(Ts^-1 Te) give equal
    inter-knot twists, so the cubic spline reproduces the linear path exactly.
    """
    if traj.kind != "linear":
        raise DomainError("linear_to_cubic expects a linear trajectory")
    start, end = traj.effective_knots()
    omega = se3_log(start.inverse() @ end)
    knots = [start @ se3_exp(-omega), start, end, end @ se3_exp(omega)]
    return TrajectorySpline("cubic", knots)


def pose_jacobian_wrt_knots(traj: TrajectorySpline, u: float) -> np.ndarray:
    """d(output pose twist) / d(knot twists) at knot_deltas = 0.

    Both sides are left-perturbation twists: column block m gives the twist
    eta with pose(u; eps_m) ~ se3_exp(eta) @ pose(u; 0) to first order.
    Shape (6, 6 * num_knots). The blocks sum to the identity because a common
    left offset of every knot shifts the interpolated pose by the same offset.
    """
    if not 0.0 <= u <= 1.0:
        raise DomainError(f"trajectory parameter u={u} outside [0, 1]")
    knots = traj.knots
    if traj.kind == "linear":
        start, end = knots
        omega = se3_log(start.inverse() @ end)
        ad_start = adjoint(start)
        ad_start_inv = adjoint(start.inverse())
        carry = ad_start @ (u * left_jacobian(u * omega) @ left_jacobian_inv(omega)) @ ad_start_inv
        out = np.zeros((6, 12))
        out[:, :6] = np.eye(6) - carry
        out[:, 6:] = carry
        return out

    weights = cubic_basis(u)
    omegas = [se3_log(knots[j].inverse() @ knots[j + 1]) for j in range(3)]
    # Pose prefix before each exp factor: G1 = T1, G_{j+1} = G_j exp(bj Wj).
    prefixes = [knots[0]]
    for j in range(3):
        prefixes.append(prefixes[j] @ se3_exp(weights[j] * omegas[j]))
    out = np.zeros((6, 24))
    out[:, :6] = np.eye(6)
    for j in range(3):
        # A perturbation dW of Wj moves the output by Ad(Gj) Jl(bj Wj) bj dW.
        carry = adjoint(prefixes[j]) @ left_jacobian(weights[j] * omegas[j]) * weights[j]
        # Wj = log(Tj^-1 Tj+1) responds to left knot twists through Jl^-1 Ad.
        sensitivity = left_jacobian_inv(omegas[j]) @ adjoint(knots[j].inverse())
        block = carry @ sensitivity
        out[:, 6 * j : 6 * j + 6] -= block
        out[:, 6 * (j + 1) : 6 * (j + 1) + 6] += block
    return out
