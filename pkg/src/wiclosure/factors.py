"""Probability factors for odometry, UWB ranging and angle-of-arrival.

The range factor keeps the exponent ``-(d - |x|)^2 / sigma^2`` (no factor of
two) unless ``standard_gaussian`` is set; its Fisher information is therefore
``2 / sigma^2`` by default. The AOA factor is a von Mises density over the
azimuth of the transmitter in the receiver's body frame, peaking when that
azimuth equals the measured angle.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import i0e, i1e

from .lie import Pose

KAPPA_FLOOR = 10.0


class DegenerateGeometryError(ValueError):
    """Relative translation too short to define a bearing."""


class RankDeficiencyError(ValueError):
    """Information matrix is singular; a prior is needed."""


@dataclass(frozen=True)
class OdometryFactor:
    from_index: int
    to_index: int
    measured: Pose
    noise: np.ndarray

    def __post_init__(self):
        if self.from_index >= self.to_index:
            raise ValueError("odometry factor must go forward in time")
        noise = np.array(self.noise, dtype=float).reshape(6, 6)
        object.__setattr__(self, "noise", noise)


@dataclass(frozen=True)
class RangeFactor:
    d: float
    sigma: float
    endpoints: Optional[tuple] = None
    standard_gaussian: bool = False

    def __post_init__(self):
        if self.d < 0:
            raise ValueError("range must be non-negative")
        if self.sigma <= 0:
            raise ValueError("range sigma must be positive")

    @property
    def information(self) -> float:
        """Fisher information of the range along the line of sight."""
        return (1.0 if self.standard_gaussian else 2.0) / self.sigma**2


@dataclass(frozen=True)
class AoaMode:
    phi: float
    kappa: float
    prior: Optional[float] = None

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.kappa <= KAPPA_FLOOR:
            warnings.warn(
                f"AOA concentration {self.kappa:.3g} is outside the operating "
                f"regime (kappa > {KAPPA_FLOOR:g})",
                stacklevel=3,
            )
        if self.prior is not None and not 0.0 <= self.prior <= 1.0:
            raise ValueError("mode prior must lie in [0, 1]")


@dataclass(frozen=True)
class CommMeasurement:
    """One range + multimodal bearing observation between two robots.

    ``receiver`` and ``transmitter`` are ``(robot_id, pose_index)`` tuples.
    ``heading`` optionally carries the yaw of the transmitter body relative to
    the receiver body from a shared heading reference (compass/AHRS), with
    standard deviation ``heading_std``; without it the relative yaw of the two
    robots is not observed by this measurement.
    """

    id: int
    receiver: tuple
    transmitter: tuple
    range: RangeFactor
    modes: tuple
    truth_direct_index: Optional[int] = None
    heading: Optional[float] = None
    heading_std: Optional[float] = None

    def __post_init__(self):
        modes = tuple(self.modes)
        if not modes:
            raise ValueError(f"measurement {self.id} has no AOA modes")
        object.__setattr__(self, "modes", modes)
        if sum(self.priors) > 1.0 + 1e-9:
            raise ValueError(f"mode priors of measurement {self.id} exceed 1")
        if self.heading is not None and not (self.heading_std and self.heading_std > 0):
            raise ValueError("heading reference needs a positive heading_std")

    @property
    def priors(self) -> tuple:
        n = len(self.modes)
        return tuple(1.0 / n if m.prior is None else m.prior for m in self.modes)

    def measured_translation(self, mode_index: int) -> np.ndarray:
        """Transmitter position in the receiver frame implied by one mode."""
        phi = self.modes[mode_index].phi
        return self.range.d * np.array([np.cos(phi), np.sin(phi), 0.0])


@dataclass
class Realization:
    """Selected direct-path mode per measurement id (absent = unused)."""

    selection: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.selection)

    def __contains__(self, mid):
        return mid in self.selection

    def __getitem__(self, mid):
        return self.selection[mid]

    def items(self):
        return sorted(self.selection.items())

    def to_json(self):
        return {str(k): int(v) for k, v in self.items()}

    @classmethod
    def from_json(cls, data):
        return cls({int(k): int(v) for k, v in data.items()})


def _as_vec(x):
    x = np.asarray(x, dtype=float).reshape(3)
    return x


def log_c1(m: RangeFactor) -> float:
    return -0.5 * np.log(2.0 * np.pi * m.sigma**2)


def log_c2(kappa: float) -> float:
    # log(2 pi I0(kappa)) with I0 computed in scaled form to avoid overflow
    return -(np.log(2.0 * np.pi) + np.log(i0e(kappa)) + kappa)


def log_f_uwb(m: RangeFactor, relative_translation) -> float:
    x = _as_vec(relative_translation)
    r = m.d - np.linalg.norm(x)
    scale = 0.5 if m.standard_gaussian else 1.0
    return log_c1(m) - scale * r**2 / m.sigma**2


def grad_log_f_uwb(m: RangeFactor, relative_translation) -> np.ndarray:
    x = _as_vec(relative_translation)
    n = np.linalg.norm(x)
    if n < 1e-12:
        raise DegenerateGeometryError("range gradient undefined at zero length")
    scale = 0.5 if m.standard_gaussian else 1.0
    return 2.0 * scale * (m.d - n) / m.sigma**2 * x / n


def bearing(relative_translation) -> float:
    x = _as_vec(relative_translation)
    if np.hypot(x[0], x[1]) < 1e-9:
        raise DegenerateGeometryError("bearing undefined for a vertical/zero vector")
    return float(np.arctan2(x[1], x[0]))


def log_f_aoa(m: AoaMode, relative_translation) -> float:
    theta = bearing(relative_translation)
    return log_c2(m.kappa) + m.kappa * np.cos(theta - m.phi)


def grad_log_f_aoa(m: AoaMode, relative_translation) -> np.ndarray:
    x = _as_vec(relative_translation)
    theta = bearing(x)
    rho2 = x[0] ** 2 + x[1] ** 2
    dtheta = np.array([-x[1], x[0], 0.0]) / rho2
    return -m.kappa * np.sin(theta - m.phi) * dtheta


def log_f_comm(range_factor: RangeFactor, mode: AoaMode, relative_translation) -> float:
    return log_f_uwb(range_factor, relative_translation) + log_f_aoa(mode, relative_translation)


def grad_log_f_comm(range_factor, mode, relative_translation) -> np.ndarray:
    return grad_log_f_uwb(range_factor, relative_translation) + grad_log_f_aoa(
        mode, relative_translation
    )


def f_multi(m: CommMeasurement, relative_translation) -> float:
    return float(
        sum(p * np.exp(log_f_aoa(mode, relative_translation))
            for mode, p in zip(m.modes, m.priors))
    )


def von_mises_information(kappa: float) -> float:
    """Expected negative second derivative of the von Mises log-density."""
    return kappa * i1e(kappa) / i0e(kappa)


def comm_information(range_factor: RangeFactor, mode: AoaMode, relative_translation):
    """2x2 Fisher information on the horizontal transmitter position."""
    x = _as_vec(relative_translation)
    rho = np.hypot(x[0], x[1])
    if rho < 1e-9:
        raise DegenerateGeometryError("comm factor needs a non-zero horizontal offset")
    u = x[:2] / rho
    t = np.array([-u[1], u[0]])
    return (range_factor.information * np.outer(u, u)
            + von_mises_information(mode.kappa) / rho**2 * np.outer(t, t))


def converted_position(m: CommMeasurement, mode_index: int):
    """Debiased horizontal position and covariance of one range + bearing mode.

    Converting (range, bearing) to Cartesian coordinates pulls the mean
    towards the receiver by ``exp(-var_phi / 2)`` and bends the error into a
    crescent. The unbiased converted-measurement moments undo the pull and
    widen the radial variance accordingly. As the noise goes to zero this
    tends to the plain conversion with the Fisher covariance.
    """
    d = m.range.d
    phi = m.modes[mode_index].phi
    var_phi = fisher_covariance(m.modes[mode_index])
    var_r = fisher_covariance(m.range)
    lam = np.exp(-0.5 * var_phi)
    lam4 = np.exp(-2.0 * var_phi)
    c, s = np.cos(phi), np.sin(phi)
    mean = d / lam * np.array([c, s])
    a = (np.exp(var_phi) - 2.0) * d * d
    b = 0.5 * (d * d + var_r)
    c2, s2 = np.cos(2 * phi), np.sin(2 * phi)
    cov = np.array([[a * c * c + b * (1 + lam4 * c2), a * c * s + b * lam4 * s2],
                    [a * c * s + b * lam4 * s2, a * s * s + b * (1 - lam4 * c2)]])
    return mean, 0.5 * (cov + cov.T)


def fisher_covariance(factor, linearization_point=None):
    """Gaussian approximation ``(-E[d^2 log f / dx^2])^-1`` of a factor.

    * ``RangeFactor`` -> variance of the range (scalar).
    * ``AoaMode`` -> variance of the bearing (scalar).
    * ``(RangeFactor, AoaMode)`` -> 2x2 covariance of the horizontal
      transmitter position at ``linearization_point``.
    * ``(CommMeasurement, mode_index)`` -> same, for the selected mode.
    * ``OdometryFactor`` -> its 6x6 noise.
    """
    if isinstance(factor, RangeFactor):
        return 1.0 / factor.information
    if isinstance(factor, AoaMode):
        return 1.0 / von_mises_information(factor.kappa)
    if isinstance(factor, OdometryFactor):
        return factor.noise.copy()
    if isinstance(factor, tuple) and len(factor) == 2:
        first, second = factor
        if isinstance(first, CommMeasurement):
            if second is None:
                raise RankDeficiencyError(
                    f"measurement {first.id} is multimodal; select a mode first")
            range_factor, mode = first.range, first.modes[second]
            if linearization_point is None:
                linearization_point = first.measured_translation(second)
        else:
            range_factor, mode = first, second
        if linearization_point is None:
            raise ValueError("combined factor needs a linearization point")
        info = comm_information(range_factor, mode, linearization_point)
        if np.linalg.eigvalsh(info)[0] <= 1e-15 * np.abs(info).max():
            raise RankDeficiencyError("singular comm information")
        return np.linalg.inv(info)
    raise TypeError(f"no Fisher covariance for {type(factor).__name__}")
