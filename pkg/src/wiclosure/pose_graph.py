"""Per-robot trajectory estimation and the single-link shared estimate.

Each robot's chain of odometry factors is solved independently (damped
Gauss-Newton with pose 0 held as the gauge). Two trajectories are then tied
together through one communication link at a time: the link only moves one
trajectory relative to the other and leaves both local solutions untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .factors import (CommMeasurement, DegenerateGeometryError, OdometryFactor, Realization,
                      converted_position, fisher_covariance)
from .lie import (
    Pose,
    adjoint,
    adjoint_batch,
    exp_map,
    log_map,
    skew,
    symmetrize,
    wrap_angle,
    yaw_of,
    yaw_rotation,
)

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.message = message
        self.residual = residual

    def __reduce__(self):
        return type(self), (self.message, self.residual)


class NoLinkError(ValueError):
    """No communication link is available to connect two trajectories."""


class StateError(RuntimeError):
    """Operation needs a solved trajectory."""


@dataclass
class Trajectory:
    robot: str
    poses: list
    odometry: list
    timestamps: Optional[np.ndarray] = None
    marginals: Optional[list] = None
    _prefix: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.poses) != len(self.odometry) + 1:
            raise ValueError("a trajectory needs exactly one more pose than odometry factors")
        for i, f in enumerate(self.odometry):
            if (f.from_index, f.to_index) != (i, i + 1):
                raise ValueError("odometry factors must form a chain 0-1-2-...")

    def __len__(self):
        return len(self.poses)

    @property
    def solved(self) -> bool:
        return self.marginals is not None

    @property
    def rotations(self) -> np.ndarray:
        return np.array([p.rotation for p in self.poses])

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    @property
    def arc_length(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def relative(self, i: int, j: int) -> Pose:
        """``T^i_j`` along this trajectory."""
        return (self.poses[i].inverse() @ self.poses[j]).with_frames(
            f"{self.robot}{i}", f"{self.robot}{j}")

    def _require_solved(self):
        if self._prefix is None:
            raise StateError(f"trajectory {self.robot!r} has not been solved")

    def leg_covariance(self, i: int, j: int) -> np.ndarray:
        """Body-frame covariance of ``T^i_j`` from the odometry between i and j."""
        self._require_solved()
        lo, hi = min(i, j), max(i, j)
        W = self._prefix[hi] - self._prefix[lo]
        J = adjoint(self.poses[j].inverse())
        return symmetrize(J @ W @ J.T)

    def left_leg_covariance(self, i, j):
        """Leg covariance as a left perturbation in the local frame (vectorised)."""
        self._require_solved()
        i = np.asarray(i)
        j = np.asarray(j)
        return self._prefix[np.maximum(i, j)] - self._prefix[np.minimum(i, j)]


def dead_reckon(odometry, start: Optional[Pose] = None) -> list:
    pose = start if start is not None else Pose.identity()
    poses = [pose]
    for f in odometry:
        pose = Pose(pose.rotation @ f.measured.rotation,
                    pose.rotation @ f.measured.translation + pose.translation)
        poses.append(pose)
    return poses


def _ad(xi):
    A = np.zeros((6, 6))
    W = skew(xi[:3])
    A[:3, :3] = W
    A[3:, 3:] = W
    A[3:, :3] = skew(xi[3:])
    return A


def _jr_inv(r):
    a = _ad(r)
    return np.eye(6) + 0.5 * a + a @ a / 12.0


def _residuals(poses, odometry):
    return [log_map(f.measured.inverse() @ poses[f.from_index].inverse() @ poses[f.to_index])
            for f in odometry]


def _nll(res, infos):
    return 0.5 * sum(float(r @ I @ r) for r, I in zip(res, infos))


def _retract(poses, delta):
    out = [poses[0]]
    for i, p in enumerate(poses[1:]):
        out.append(p @ exp_map(delta[6 * i:6 * i + 6]))
    return out


def solve_mle(traj: Trajectory, max_iters: int = 100, tol: float = 1e-8) -> Trajectory:
    """Maximum-likelihood poses of an odometry chain; fills marginals in place."""
    n = len(traj.poses)
    if n < 2:
        raise ValueError("solve_mle needs at least two poses")
    infos = [np.linalg.inv(f.noise) for f in traj.odometry]
    poses = [Pose(p.rotation, p.translation) for p in traj.poses]
    poses[0] = Pose.identity()
    lam = 1e-6
    res = _residuals(poses, traj.odometry)
    cost = _nll(res, infos)
    dim = 6 * (n - 1)
    info_arr = np.array(infos)
    fi = np.array([f.from_index for f in traj.odometry])
    fj = np.array([f.to_index for f in traj.odometry])
    grad_norm = np.inf
    converged = False
    for _ in range(max_iters + 1):
        Jj = np.array([_jr_inv(r) for r in res])
        Ji = -Jj @ np.array([adjoint(poses[j].inverse() @ poses[i]) for i, j in zip(fi, fj)])
        r_arr = np.array(res)
        IJi, IJj = info_arr @ Ji, info_arr @ Jj
        Ir = np.einsum("nab,nb->na", info_arr, r_arr)
        g = np.zeros((n, 6))
        np.add.at(g, fi, np.einsum("nba,nb->na", Ji, Ir))
        np.add.at(g, fj, np.einsum("nba,nb->na", Jj, Ir))
        g = g[1:].ravel()
        grad_norm = float(np.linalg.norm(g))
        if grad_norm < tol:
            converged = True
            break
        blocks = [(fi, fi, np.swapaxes(Ji, 1, 2) @ IJi), (fj, fj, np.swapaxes(Jj, 1, 2) @ IJj),
                  (fi, fj, np.swapaxes(Ji, 1, 2) @ IJj), (fj, fi, np.swapaxes(Jj, 1, 2) @ IJi)]
        rows, cols, vals = [], [], []
        off = np.arange(6)
        for a, b, blk in blocks:
            keep = (a > 0) & (b > 0)
            ra = (6 * (a[keep] - 1))[:, None, None] + off[None, :, None]
            cb = (6 * (b[keep] - 1))[:, None, None] + off[None, None, :]
            rows.append(np.broadcast_to(ra, (keep.sum(), 6, 6)).ravel())
            cols.append(np.broadcast_to(cb, (keep.sum(), 6, 6)).ravel())
            vals.append(blk[keep].ravel())
        H = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(dim, dim))
        accepted = False
        while lam < 1e12:
            damped = H + lam * sp.diags(H.diagonal() + 1e-12)
            delta = spla.spsolve(damped.tocsc(), -g)
            trial = _retract(poses, delta)
            trial_res = _residuals(trial, traj.odometry)
            trial_cost = _nll(trial_res, infos)
            if trial_cost <= cost:
                poses, res, cost = trial, trial_res, trial_cost
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if accepted and np.abs(delta).max() < tol:
            converged = True
            break
        if not accepted:
            # no decrease possible: converged only if already at the floor
            converged = np.abs(delta).max() < np.sqrt(tol)
            break
    if not converged:
        raise ConvergenceError(f"solve_mle did not converge for robot {traj.robot!r}", grad_norm)

    traj.poses = [p.with_frames(traj.robot, f"{traj.robot}{i}") for i, p in enumerate(poses)]
    _fill_marginals(traj)
    return traj


def _fill_marginals(traj: Trajectory):
    # On a chain the MLE has zero residuals, so the inverse information with a
    # fixed pose 0 equals the odometry noise propagated along the chain.
    n = len(traj.poses)
    R = traj.rotations
    t = traj.positions
    Ad = adjoint_batch(R, t)
    prefix = np.zeros((n, 6, 6))
    for s, f in enumerate(traj.odometry, start=1):
        prefix[s] = prefix[s - 1] + Ad[s] @ f.noise @ Ad[s].T
    traj._prefix = symmetrize(prefix)
    Adinv = adjoint_batch(np.swapaxes(R, 1, 2), -np.einsum("nji,nj->ni", R, t))
    traj.marginals = list(symmetrize(Adinv @ traj._prefix @ np.swapaxes(Adinv, 1, 2)))


def information_marginals(traj: Trajectory, gauge_sigma: float = 1e-9) -> list:
    """Marginals by inverting the dense information matrix (small chains only)."""
    n = len(traj.poses)
    H = np.zeros((6 * n, 6 * n))
    H[:6, :6] += np.eye(6) / gauge_sigma**2
    for f in traj.odometry:
        i, j = f.from_index, f.to_index
        info = np.linalg.inv(f.noise)
        r = log_map(f.measured.inverse() @ traj.poses[i].inverse() @ traj.poses[j])
        Jj = _jr_inv(r)
        Ji = -Jj @ adjoint(traj.poses[j].inverse() @ traj.poses[i])
        for a, Ja in ((i, Ji), (j, Jj)):
            for b, Jb in ((i, Ji), (j, Jj)):
                H[6 * a:6 * a + 6, 6 * b:6 * b + 6] += Ja.T @ info @ Jb
    C = np.linalg.inv(H)
    return [symmetrize(C[6 * i:6 * i + 6, 6 * i:6 * i + 6]) for i in range(n)]


@dataclass(frozen=True)
class LinkPriors:
    """Weak priors on what a range + azimuth link cannot observe."""

    z_std: float = 0.5
    tilt_std: float = 0.1
    unreferenced_heading_std: float = np.pi
    # debiased range/bearing conversion moments instead of the plain conversion
    # with its Fisher covariance (the pipeline turns this on)
    debiased: bool = False


@dataclass(frozen=True)
class LinkEstimate:
    """A communication link lifted to a full relative transform ``T^{c1}_{c2}``."""

    measurement_id: int
    mode_index: int
    c1: int
    c2: int
    transform: Pose
    covariance: np.ndarray
    range: float


@dataclass
class SharedEstimate:
    alpha: Trajectory
    beta: Trajectory
    anchor: LinkEstimate
    transform: Pose
    covariance: np.ndarray
    links: tuple
    heading_std: float

    @property
    def pair(self):
        return (self.alpha.robot, self.beta.robot)

    def frame_transform(self, link: LinkEstimate) -> Pose:
        """``T^alpha_beta`` implied by one link."""
        return (self.alpha.poses[link.c1] @ link.transform.with_frames("", "")
                @ self.beta.poses[link.c2].inverse()).with_frames(self.alpha.robot, self.beta.robot)

    def beta_in_alpha(self, link: Optional[LinkEstimate] = None) -> np.ndarray:
        return self.frame_transform(link or self.anchor).act(self.beta.positions)


def lift_link(ta: Trajectory, tb: Trajectory, m: CommMeasurement, mode_index: int,
              rotation: Optional[np.ndarray] = None, yaw_std: Optional[float] = None,
              priors: LinkPriors = LinkPriors()) -> LinkEstimate:
    """Turn one (measurement, mode) into ``T^{c1}_{c2}`` with a 6x6 covariance.

    The horizontal position comes from the range/bearing Fisher information;
    height, roll and pitch come from the weak priors. The relative rotation is
    ``rotation`` if given, otherwise the measurement's heading reference, and
    otherwise an uninformative yaw.
    """
    c1, c2 = m.receiver[1], m.transmitter[1]
    y = m.measured_translation(mode_index)
    if np.hypot(y[0], y[1]) < 1e-9:
        raise DegenerateGeometryError(f"measurement {m.id} has zero range")
    P = np.zeros((3, 3))
    if priors.debiased:
        y[:2], P[:2, :2] = converted_position(m, mode_index)
    else:
        P[:2, :2] = fisher_covariance((m, mode_index), y)
    if rotation is None:
        if m.heading is not None:
            rotation, yaw_std = yaw_rotation(m.heading), m.heading_std
        else:
            rotation, yaw_std = np.eye(3), priors.unreferenced_heading_std
    P[2, 2] = priors.z_std**2
    cov = np.zeros((6, 6))
    cov[:3, :3] = np.diag([priors.tilt_std**2, priors.tilt_std**2, yaw_std**2])
    cov[3:, 3:] = rotation.T @ P @ rotation
    T = Pose(rotation, y, f"{ta.robot}{c1}", f"{tb.robot}{c2}")
    return LinkEstimate(m.id, mode_index, c1, c2, T, symmetrize(cov), m.range.d)


def _frame_covariance(tb: Trajectory, link: LinkEstimate) -> np.ndarray:
    J = adjoint(tb.poses[link.c2])
    return symmetrize(J @ link.covariance @ J.T)


def anchor_shared(ta: Trajectory, tb: Trajectory, m: CommMeasurement, mode_index: int,
                  priors: LinkPriors = LinkPriors()) -> SharedEstimate:
    link = lift_link(ta, tb, m, mode_index, priors=priors)
    yaw_std = float(np.sqrt(link.covariance[2, 2]))
    s = SharedEstimate(ta, tb, link, Pose.identity(), np.zeros((6, 6)), (link,), yaw_std)
    s.transform = s.frame_transform(link)
    s.covariance = _frame_covariance(tb, link)
    return s


def fuse_heading(ta: Trajectory, tb: Trajectory, measurements, realization: Realization,
                 priors: LinkPriors = LinkPriors()):
    """Yaw of frame beta in frame alpha from all links of a realization.

    Combines per-link heading references with the yaw implied by the layout
    of the link endpoints (2-D Procrustes). Returns ``(yaw, std)``; the std is
    the prior's ``unreferenced_heading_std`` when nothing constrains the yaw.
    """
    by_id = {m.id: m for m in measurements}
    sins, coss, info = 0.0, 0.0, 0.0
    P, Q, w = [], [], []
    for mid, mode in realization.items():
        m = by_id[mid]
        c1, c2 = m.receiver[1], m.transmitter[1]
        Ra, Rb = ta.poses[c1].rotation, tb.poses[c2].rotation
        if m.heading is not None:
            psi = yaw_of(Ra @ yaw_rotation(m.heading) @ Rb.T)
            wi = 1.0 / m.heading_std**2
            sins += wi * np.sin(psi)
            coss += wi * np.cos(psi)
            info += wi
        link = lift_link(ta, tb, m, mode, rotation=np.eye(3), yaw_std=1.0, priors=priors)
        P.append(ta.poses[c1].act(link.transform.translation)[:2])
        Q.append(tb.poses[c2].translation[:2])
        pos_var = float(np.linalg.eigvalsh(link.covariance[3:5, 3:5])[-1])
        w.append(1.0 / pos_var)
    if len(P) >= 2:
        P, Q, w = np.array(P), np.array(Q), np.array(w)
        Pc = P - np.average(P, axis=0, weights=w)
        Qc = Q - np.average(Q, axis=0, weights=w)
        cross = np.sum(w * (Qc[:, 0] * Pc[:, 1] - Qc[:, 1] * Pc[:, 0]))
        dot = np.sum(w * np.sum(Qc * Pc, axis=1))
        geo_info = float(np.sum(w * np.sum(Qc**2, axis=1)))
        if geo_info > 0 and np.hypot(cross, dot) > 0:
            psi = np.arctan2(cross, dot)
            sins += geo_info * np.sin(psi)
            coss += geo_info * np.cos(psi)
            info += geo_info
    if info <= 0:
        return 0.0, priors.unreferenced_heading_std
    return float(np.arctan2(sins, coss)), float(1.0 / np.sqrt(info))


def shared_from_realization(ta: Trajectory, tb: Trajectory, measurements,
                            realization: Realization,
                            priors: LinkPriors = LinkPriors()) -> SharedEstimate:
    """Shared estimate carrying every realization link, with a common frame yaw.

    The anchor (used to place beta's trajectory for the overlap search) is the
    link with the smallest horizontal position uncertainty.
    """
    if len(realization) == 0:
        raise NoLinkError("realization is empty; trajectories cannot be related")
    if len(realization) < 2:
        log.warning("only one consistent link; relative heading rests on its heading prior")
    psi, psi_std = fuse_heading(ta, tb, measurements, realization, priors)
    RF = yaw_rotation(psi)
    by_id = {m.id: m for m in measurements}
    links = []
    for mid, mode in realization.items():
        m = by_id[mid]
        Ra = ta.poses[m.receiver[1]].rotation
        Rb = tb.poses[m.transmitter[1]].rotation
        links.append(lift_link(ta, tb, m, mode, rotation=Ra.T @ RF @ Rb,
                               yaw_std=psi_std, priors=priors))
    anchor = min(links, key=lambda l: (np.linalg.eigvalsh(l.covariance[3:, 3:])[-1],
                                       l.measurement_id))
    s = SharedEstimate(ta, tb, anchor, Pose.identity(), np.zeros((6, 6)), tuple(links), psi_std)
    s.transform = s.frame_transform(anchor)
    s.covariance = _frame_covariance(tb, anchor)
    return s


def route_lengths(links, ta: Trajectory, tb: Trajectory, p, k) -> np.ndarray:
    """Odometry + link route length from alpha pose p to beta pose k, per link."""
    sa, sb = ta.arc_length, tb.arc_length
    p = np.asarray(p)
    k = np.asarray(k)
    out = [np.abs(sa[p] - sa[l.c1]) + l.range + np.abs(sb[k] - sb[l.c2]) for l in links]
    return np.array(out)


def min_route(links, p_index: int, k_index: int, ta: Trajectory, tb: Trajectory) -> LinkEstimate:
    """Link giving the shortest route; ties go to the lowest measurement id."""
    if not links:
        raise NoLinkError("no communication link in the realization")
    ordered = sorted(links, key=lambda l: l.measurement_id)
    lengths = route_lengths(ordered, ta, tb, p_index, k_index)
    return ordered[int(np.argmin(lengths))]


def relative_pose_covariance(s: SharedEstimate, p_index: int, k_index: int,
                             link: Optional[LinkEstimate] = None):
    """``T^p_k`` and its body-frame covariance routed through one link."""
    ta, tb = s.alpha, s.beta
    if link is None:
        link = min_route(s.links, p_index, k_index, ta, tb)
    A = ta.relative(p_index, link.c1)
    B = link.transform.with_frames(A.frame_to, f"{tb.robot}{link.c2}")
    C = tb.relative(link.c2, k_index)
    BC = B @ C
    J_a = adjoint(BC.inverse())
    J_b = adjoint(C.inverse())
    cov = (J_a @ ta.leg_covariance(p_index, link.c1) @ J_a.T
           + J_b @ link.covariance @ J_b.T
           + tb.leg_covariance(link.c2, k_index))
    return A @ BC, symmetrize(cov)


def joint_frame_refinement(s: SharedEstimate, measurements, realization: Realization):
    """Validation-only: frame transform maximising all realization factors jointly.

    Optimises the planar frame transform (x, y, yaw) with both local
    trajectories held fixed; returns the refined ``T^alpha_beta``.
    """
    from scipy.optimize import least_squares

    by_id = {m.id: m for m in measurements}
    used = [(by_id[mid], mode) for mid, mode in realization.items()]
    F0 = s.transform

    def residual(params):
        F = Pose(yaw_rotation(params[2]), [params[0], params[1], F0.translation[2]])
        out = []
        for m, mode in used:
            pa = s.alpha.poses[m.receiver[1]]
            pb = F @ s.beta.poses[m.transmitter[1]].with_frames("", "")
            x = (pa.inverse().with_frames("", "") @ pb).translation
            rho = np.linalg.norm(x)
            out.append((rho - m.range.d) * np.sqrt(m.range.information))
            kappa = m.modes[mode].kappa
            out.append(wrap_angle(np.arctan2(x[1], x[0]) - m.modes[mode].phi) * np.sqrt(kappa))
            if m.heading is not None:
                rel = pa.rotation.T @ pb.rotation
                out.append(wrap_angle(yaw_of(rel) - m.heading) / m.heading_std)
        return np.array(out)

    x0 = [F0.translation[0], F0.translation[1], yaw_of(F0.rotation)]
    sol = least_squares(residual, x0, method="lm" if len(residual(x0)) >= 3 else "trf")
    return Pose(yaw_rotation(sol.x[2]), [sol.x[0], sol.x[1], F0.translation[2]],
                s.alpha.robot, s.beta.robot)
