"""Rigid-body and similarity transforms plus trajectory alignment.

SE3 stores a unit quaternion internally (normalization is cheap and drift-free)
and exposes rotation matrices at the interface. Twists are ordered
``[omega, v]`` (rotation first). Trajectories are timestamped pose lists in
TUM text format: ``timestamp tx ty tz qx qy qz qw``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class AlignmentError(Exception):
    """Trajectory alignment cannot be computed (too few or degenerate points)."""


def _quat_mul(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    # quaternions as [x, y, z, w]
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array(
        [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ]
    )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method, numerically stable for all rotation matrices.
    t = np.trace(R)
    if t > 0:
        w = 0.5 * math.sqrt(1.0 + t)
        s = 0.25 / w
        q = np.array(
            [(R[2, 1] - R[1, 2]) * s, (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s, w]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0))
        q = np.zeros(4)
        q[i] = 0.5 * s
        s = 0.25 / (0.5 * s) if s > 0 else 0.0
        q[3] = (R[k, j] - R[j, k]) * s
        q[j] = (R[j, i] + R[i, j]) * s
        q[k] = (R[k, i] + R[i, k]) * s
    return q / np.linalg.norm(q)


def skew(w: np.ndarray) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < 1e-4:
        # Taylor form; the closed form cancels catastrophically near zero
        return np.eye(3) + W + 0.5 * (W @ W)
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * W
        + ((1.0 - math.cos(theta)) / theta**2) * (W @ W)
    )


def so3_log(R: np.ndarray) -> np.ndarray:
    cos_theta = max(-1.0, min(1.0, (np.trace(R) - 1.0) * 0.5))
    theta = math.acos(cos_theta)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if theta > math.pi - 1e-6:
        # near pi the standard formula loses precision; use the outer-product form
        A = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        i = int(np.argmax(axis))
        axis = A[:, i] / max(axis[i], 1e-12)
        axis = axis / np.linalg.norm(axis)
        # fix sign using the skew part
        sgn = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(sgn, axis) < 0:
            axis = -axis
        return axis * theta
    return (
        np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        * 0.5
        * theta
        / math.sin(theta)
    )


class SE3:
    """Rigid transform; acts on points as ``R @ x + t``.

    Instances are immutable by convention (operations return new objects),
    so the rotation matrix is computed once and cached.
    """

    __slots__ = ("q", "t", "_R")

    def __init__(self, q: np.ndarray | None = None, t: np.ndarray | None = None):
        self.q = np.array([0.0, 0.0, 0.0, 1.0]) if q is None else np.asarray(q, float).copy()
        self.q /= np.linalg.norm(self.q)
        self.t = np.zeros(3) if t is None else np.asarray(t, float).copy()
        self._R = None

    @staticmethod
    def identity() -> "SE3":
        return SE3()

    @staticmethod
    def from_matrix(T: np.ndarray) -> "SE3":
        T = np.asarray(T, float)
        return SE3(_matrix_to_quat(T[:3, :3]), T[:3, 3])

    @staticmethod
    def from_Rt(R: np.ndarray, t: np.ndarray) -> "SE3":
        return SE3(_matrix_to_quat(np.asarray(R, float)), t)

    @property
    def R(self) -> np.ndarray:
        if self._R is None:
            self._R = _quat_to_matrix(self.q)
        return self._R

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "SE3":
        q_inv = np.array([-self.q[0], -self.q[1], -self.q[2], self.q[3]])
        return SE3(q_inv, -(_quat_to_matrix(q_inv) @ self.t))

    def __matmul__(self, other: "SE3") -> "SE3":
        return SE3(_quat_mul(self.q, other.q), self.R @ other.t + self.t)

    def act(self, x: np.ndarray) -> np.ndarray:
        """Transform points of shape (3,) or (..., 3)."""
        x = np.asarray(x, float)
        return x @ self.R.T + self.t

    def copy(self) -> "SE3":
        return SE3(self.q, self.t)

    def __repr__(self) -> str:
        return f"SE3(q={np.round(self.q, 6)}, t={np.round(self.t, 6)})"


def se3_exp(xi: np.ndarray) -> SE3:
    """Exponential map; ``xi = [omega, v]``."""
    xi = np.asarray(xi, float)
    omega, v = xi[:3], xi[3:]
    theta = np.linalg.norm(omega)
    W = skew(omega)
    R = so3_exp(omega)
    if theta < 1e-4:
        V = np.eye(3) + 0.5 * W + (W @ W) / 6.0
    else:
        V = (
            np.eye(3)
            + ((1.0 - math.cos(theta)) / theta**2) * W
            + ((theta - math.sin(theta)) / theta**3) * (W @ W)
        )
    return SE3.from_Rt(R, V @ v)


def se3_log(T: SE3) -> np.ndarray:
    """Inverse of :func:`se3_exp`, valid for rotation angles below pi."""
    omega = so3_log(T.R)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < 1e-4:
        V_inv = np.eye(3) - 0.5 * W + (W @ W) / 12.0
    else:
        half = 0.5 * theta
        V_inv = (
            np.eye(3)
            - 0.5 * W
            + (1.0 / theta**2) * (1.0 - (half * math.cos(half) / math.sin(half))) * (W @ W)
        )
    return np.concatenate([omega, V_inv @ T.t])


def relative_pose(T_i: SE3, T_j: SE3) -> SE3:
    """Compose ``T_j @ T_i^-1``.

    With poses stored as world-to-camera (the convention used throughout the
    odometry window) this maps host-frame points into the target frame.
    """
    return T_j @ T_i.inverse()


@dataclass
class Sim3:
    """Similarity transform; acts on points as ``s * R @ x + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: float = 1.0

    def act(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        return self.s * (x @ self.R.T) + self.t

    def inverse(self) -> "Sim3":
        R_inv = self.R.T
        return Sim3(R_inv, -(R_inv @ self.t) / self.s, 1.0 / self.s)

    def __matmul__(self, other: "Sim3") -> "Sim3":
        return Sim3(self.R @ other.R, self.s * (self.R @ other.t) + self.t, self.s * other.s)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.s * self.R
        T[:3, 3] = self.t
        return T


@dataclass
class Trajectory:
    """Timestamped poses, strictly increasing timestamps.

    Poses here are camera-to-world, matching the TUM file convention.
    """

    timestamps: np.ndarray
    poses: list[SE3]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, float)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamp/pose count mismatch")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def transformed(self, sim: Sim3) -> "Trajectory":
        out = []
        for p in self.poses:
            out.append(SE3.from_Rt(sim.R @ p.R, sim.act(p.t)))
        return Trajectory(self.timestamps.copy(), out)

    def length(self) -> float:
        """Total path length in meters (sum of consecutive position steps)."""
        pos = self.positions()
        if len(pos) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(pos, axis=0), axis=1)))


def load_tum(path) -> Trajectory:
    times, poses = [], []
    with open(path, "r") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            vals = [float(x) for x in parts]
            times.append(vals[0])
            q = np.array(vals[4:8])  # qx qy qz qw
            poses.append(SE3(q, np.array(vals[1:4])))
    return Trajectory(np.array(times), poses)


def save_tum(path, traj: Trajectory) -> None:
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in zip(traj.timestamps, traj.poses):
            q, t = pose.q, pose.t
            f.write(
                f"{ts:.9f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )


def associate(t_a: np.ndarray, t_b: np.ndarray, max_dt: float = 0.02):
    """Match each timestamp in `t_a` to the nearest in `t_b` within `max_dt`.

    Returns (idx_a, idx_b) integer arrays.
    """
    t_a = np.asarray(t_a, float)
    t_b = np.asarray(t_b, float)
    if len(t_a) == 0 or len(t_b) == 0:
        return np.array([], int), np.array([], int)
    pos = np.searchsorted(t_b, t_a)
    pos = np.clip(pos, 1, len(t_b) - 1) if len(t_b) > 1 else np.zeros(len(t_a), int)
    left = np.clip(pos - 1, 0, len(t_b) - 1)
    right = np.clip(pos, 0, len(t_b) - 1)
    choose_right = np.abs(t_b[right] - t_a) < np.abs(t_b[left] - t_a)
    nearest = np.where(choose_right, right, left)
    ok = np.abs(t_b[nearest] - t_a) <= max_dt
    return np.nonzero(ok)[0], nearest[ok]


def umeyama(src: np.ndarray, dst: np.ndarray) -> Sim3:
    """Closed-form least-squares similarity with ``dst ~ s R src + t``."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    n = src.shape[0]
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / n
    var_s = np.sum(xs**2) / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if var_s < 1e-18:
        raise AlignmentError("source points are coincident")
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * (R @ mu_s)
    return Sim3(R, t, s)


def sim3_align(est: Trajectory, gt: Trajectory, max_dt: float = 0.02):
    """Align `est` to `gt` and return ``(Sim3, translational rmse)``.

    Association is nearest-timestamp within `max_dt` seconds. Raises
    :class:`AlignmentError` for fewer than 3 associations or collinear points.
    """
    ia, ib = associate(est.timestamps, gt.timestamps, max_dt)
    if len(ia) < 3:
        raise AlignmentError(f"only {len(ia)} timestamp associations (need >= 3)")
    P = est.positions()[ia]
    Q = gt.positions()[ib]
    centered = P - P.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1e-30):
        raise AlignmentError("associated positions are collinear; alignment is degenerate")
    sim = umeyama(P, Q)
    err = sim.act(P) - Q
    rmse = float(np.sqrt(np.mean(np.sum(err**2, axis=1))))
    return sim, rmse
