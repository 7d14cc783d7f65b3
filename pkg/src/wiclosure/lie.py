"""SE(3) arithmetic used throughout the pipeline.

Conventions
-----------
* Twists are ordered ``(omega, v)``: rotational part first (radians), then
  translational part (meters).
* Uncertainty is a right perturbation in the body frame,
  ``T_noisy = T @ exp(xi)``. Under this convention the translational block of
  a pose covariance is the covariance of the position, expressed in the body
  frame of the pose.
* ``Pose(R, t, frame_from, frame_to)`` maps coordinates in ``frame_to`` into
  ``frame_from`` (``T^{from}_{to}``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-7
LOG_ANGLE_LIMIT = np.pi - 1e-6


class FrameError(ValueError):
    """Composition of poses whose frames do not chain."""


class SingularityError(ValueError):
    """Logarithm requested at (or too close to) a rotation of pi."""


class ContractError(ValueError):
    """Input violates a documented precondition."""


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega):
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def so3_log(R):
    R = np.asarray(R, dtype=float)
    s = 0.5 * vee(R - R.T)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(np.linalg.norm(s), c)
    if theta > LOG_ANGLE_LIMIT:
        raise SingularityError(f"rotation angle {theta:.9f} too close to pi")
    if theta < SMALL_ANGLE:
        # theta/sin(theta) = 1 + theta^2/6 + ...
        return s * (1.0 + theta**2 / 6.0)
    return s * (theta / np.sin(theta))


def _left_jacobian(omega):
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * W
        + (theta - np.sin(theta)) / theta**3 * W @ W
    )


def _left_jacobian_inv(omega):
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    half = 0.5 * theta
    coeff = (1.0 - half / np.tan(half)) / theta**2
    return np.eye(3) - 0.5 * W + coeff * W @ W


def yaw_rotation(psi):
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(R):
    return float(np.arctan2(R[1, 0], R[0, 0]))


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``T^{frame_from}_{frame_to}``.

    Empty frame ids act as wildcards, so anonymous poses compose freely.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame_from: str = ""
    frame_to: str = ""

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, frame_from="", frame_to=""):
        return cls(np.eye(3), np.zeros(3), frame_from, frame_to)

    @classmethod
    def from_matrix(cls, m, frame_from="", frame_to=""):
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3], frame_from, frame_to)

    @classmethod
    def planar(cls, x, y, yaw, frame_from="", frame_to=""):
        return cls(yaw_rotation(yaw), [x, y, 0.0], frame_from, frame_to)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, self.frame_to, self.frame_from)

    def act(self, points):
        """Map points (shape (3,) or (n, 3)) from ``frame_to`` into ``frame_from``."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def with_frames(self, frame_from, frame_to):
        return Pose(self.rotation, self.translation, frame_from, frame_to)

    def __matmul__(self, other):
        return compose(self, other)

    def is_valid(self, tol=1e-9):
        R = self.rotation
        return (
            np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
        )


def compose(a: Pose, b: Pose) -> Pose:
    if a.frame_to and b.frame_from and a.frame_to != b.frame_from:
        raise FrameError(f"cannot compose {a.frame_from}->{a.frame_to} with "
                         f"{b.frame_from}->{b.frame_to}")
    R = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    return Pose(R, t, a.frame_from, b.frame_to)


def exp_map(xi) -> Pose:
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    return Pose(so3_exp(omega), _left_jacobian(omega) @ v)


def log_map(p: Pose) -> np.ndarray:
    omega = so3_log(p.rotation)
    v = _left_jacobian_inv(omega) @ p.translation
    return np.concatenate([omega, v])


def adjoint(p: Pose) -> np.ndarray:
    """Adjoint of ``p`` acting on ``(omega, v)`` twists."""
    R, t = p.rotation, p.translation
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[3:, :3] = skew(t) @ R
    return A


def adjoint_batch(R, t):
    """Stacked adjoints for rotations ``(n, 3, 3)`` and translations ``(n, 3)``."""
    n = R.shape[0]
    A = np.zeros((n, 6, 6))
    A[:, :3, :3] = R
    A[:, 3:, 3:] = R
    S = np.zeros((n, 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -t[:, 2], t[:, 1]
    S[:, 1, 0], S[:, 1, 2] = t[:, 2], -t[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -t[:, 1], t[:, 0]
    A[:, 3:, :3] = S @ R
    return A


def symmetrize(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def propagate_covariance(t: Pose, sigma, jacobian_side="right") -> np.ndarray:
    """Carry a 6x6 covariance through a rigid transform.

    ``jacobian_side="right"``: ``sigma`` is the body-frame covariance of some
    pose X; returns the body-frame covariance of ``X @ t`` (with t exact).

    ``jacobian_side="left"``: ``sigma`` is the body-frame covariance of ``t``
    itself; returns the same uncertainty as a perturbation applied on the
    left, ``exp(eta) @ t``, i.e. expressed in ``t.frame_from``.
    """
    sigma = np.asarray(sigma, dtype=float)
    if jacobian_side == "right":
        J = adjoint(t.inverse())
    elif jacobian_side == "left":
        J = adjoint(t)
    else:
        raise ValueError(f"unknown jacobian side {jacobian_side!r}")
    return symmetrize(J @ sigma @ J.T)


def max_eigenvalue(m) -> float:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractError("max_eigenvalue needs a square matrix")
    if not np.allclose(m, m.T, atol=1e-9, rtol=0.0):
        raise ContractError("max_eigenvalue needs a symmetric matrix")
    return float(np.linalg.eigvalsh(symmetrize(m))[-1])


def is_covariance(m, sym_tol=1e-12, psd_tol=1e-9) -> bool:
    m = np.asarray(m, dtype=float)
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if not np.allclose(m, m.T, atol=sym_tol * scale, rtol=0.0):
        return False
    return float(np.linalg.eigvalsh(symmetrize(m))[0]) >= -psd_tol * scale
