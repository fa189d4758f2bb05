"""Rigid poses and the twist exponential map, generic over the scalar type.

A twist is a 6-vector ``(phi, rho)``: rotation vector first, translation
parameter second.  Seeding any twist component with a perturbation and
pushing it through :func:`exp_map` yields pose derivatives by extraction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import csfd as C

SMALL_ANGLE = 1e-7


def _skew_real(v):
    x, y, z = v[0], v[1], v[2]
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew(v):
    """3x3 cross-product matrix ``[v]`` so that ``[v] @ p == v x p``."""
    if C.is_perturbed(v):
        # linear in v, so it acts channel by channel
        return type(v)._make(tuple(_skew_real(c) for c in v._full()))
    return _skew_real(np.asarray(v))


def _outer(a):
    return a.reshape(3, 1) * a.reshape(1, 3)


@dataclass
class PoseSE3:
    """``[R t; 0 1]``; ``R`` is 3x3 and ``t`` a 3-vector, real or perturbed."""

    R: object
    t: object

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "PoseSE3":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3].copy(), M[:3, 3].copy())

    @classmethod
    def from_quaternion(cls, t, q_xyzw) -> "PoseSE3":
        R = Rotation.from_quat(np.asarray(q_xyzw, dtype=float)).as_matrix()
        return cls(R, np.asarray(t, dtype=float).copy())

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` of the real rotation."""
        q = Rotation.from_matrix(C.real(self.R)).as_quat()
        return q if q[3] >= 0 else -q

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = C.real(self.R)
        M[:3, 3] = C.real(self.t)
        return M

    def real(self) -> "PoseSE3":
        return PoseSE3(np.array(C.real(self.R), dtype=float), np.array(C.real(self.t), dtype=float))

    @property
    def perturbed(self) -> bool:
        return C.is_perturbed(self.R) or C.is_perturbed(self.t)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return compose(self, other)

    def inverse(self) -> "PoseSE3":
        return inverse(self)

    def transform(self, p):
        return transform(self, p)

    def rotate(self, n):
        """Apply only the rotation to vectors shaped ``(..., 3)``."""
        return n @ self.R.T

    def center(self) -> np.ndarray:
        return np.array(C.real(self.t), dtype=float)


def exp_map(xi) -> PoseSE3:
    """Pose of twist ``xi = (phi, rho)``: Rodrigues rotation, ``t = J(phi) rho``.

    ``xi`` may be any length-6 sequence or vector of reals or perturbed
    numbers.  Below ``SMALL_ANGLE`` the coefficient functions switch to their
    Taylor expansions written in ``theta**2`` so perturbations seeded at
    ``phi = 0`` still propagate.
    """
    if not C.is_perturbed(xi):
        xi = np.asarray(xi, dtype=float)
    phi = xi[0:3]
    rho = xi[3:6]
    theta2 = C.dot(phi, phi, axis=0)
    eye = np.eye(3)
    if C.real(theta2) < SMALL_ANGLE ** 2:
        K = skew(phi)
        K2 = K @ K
        A = 1.0 - theta2 / 6.0
        B = 0.5 - theta2 / 24.0
        Cc = 1.0 / 6.0 - theta2 / 120.0
        R = eye + K * A + K2 * B
        J = eye + K * B + K2 * Cc
    else:
        theta = C.sqrt(theta2)
        a = phi / theta
        s = C.sin(theta)
        c = C.cos(theta)
        aaT = _outer(a)  # plain transpose: perturbations must not be conjugated
        Ka = skew(a)
        R = eye * c + aaT * (1.0 - c) + Ka * s
        sinc = s / theta
        J = eye * sinc + aaT * (1.0 - sinc) + Ka * ((1.0 - c) / theta)
    t = J @ rho
    return PoseSE3(R, t)


def log_angle(pose_or_R):
    """Rotation angle ``arccos((tr R - 1) / 2)`` in ``[0, pi]``."""
    R = pose_or_R.R if isinstance(pose_or_R, PoseSE3) else pose_or_R
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    return C.arccos(C.clip_real((tr - 1.0) / 2.0, -1.0, 1.0))


def log_map(pose: PoseSE3) -> np.ndarray:
    """Real twist whose :func:`exp_map` is ``pose``."""
    R = np.asarray(C.real(pose.R), dtype=float)
    t = np.asarray(C.real(pose.t), dtype=float)
    phi = Rotation.from_matrix(R).as_rotvec()
    # t is linear in rho, so probing with unit columns recovers J(phi).
    Jm = np.column_stack([exp_map(np.concatenate([phi, e])).t for e in np.eye(3)])
    rho = np.linalg.solve(Jm, t)
    return np.concatenate([phi, rho])


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """``a * b``: apply ``b`` first."""
    return PoseSE3(a.R @ b.R, a.R @ b.t + a.t)


def inverse(a: PoseSE3) -> PoseSE3:
    Rt = a.R.T
    return PoseSE3(Rt, -(Rt @ a.t))


def transform(a: PoseSE3, p):
    """Map points shaped ``(..., 3)``."""
    return p @ a.R.T + a.t


def project_rotation(M) -> np.ndarray:
    """Nearest rotation matrix to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_error_deg(a: PoseSE3, b: PoseSE3) -> float:
    Ra = np.asarray(C.real(a.R))
    Rb = np.asarray(C.real(b.R))
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error(a: PoseSE3, b: PoseSE3) -> float:
    return float(np.linalg.norm(np.asarray(C.real(a.t)) - np.asarray(C.real(b.t))))


def seeded_twist(xi0, i: int, j: int | None = None, h: float = C.DEFAULT_H):
    """Twist ``xi0`` with component ``i`` seeded (and ``j`` on ``i2`` if given)."""
    xi0 = np.asarray(xi0, dtype=float)
    s1 = np.zeros(6)
    s1[i] = h
    if j is None:
        return C.ComplexScalar(xi0, s1)
    s2 = np.zeros(6)
    s2[j] = h
    return C.BicomplexScalar(xi0, s1, s2, 0.0)


def random_pose(rng: np.random.Generator, max_deg: float, max_trans: float) -> PoseSE3:
    """Rotation of uniform angle in ``[-max_deg, max_deg]`` about a uniform axis,
    translation uniform per component in ``[-max_trans, max_trans]``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.radians(rng.uniform(-max_deg, max_deg))
    R = Rotation.from_rotvec(axis * ang).as_matrix()
    t = rng.uniform(-max_trans, max_trans, size=3)
    return PoseSE3(R, t)
