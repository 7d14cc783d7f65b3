"""Mahalanobis gating of cross-robot position pairs and evaluation.

A pair (p, k) is admitted when the position of beta pose k seen from alpha
pose p is statistically within sensor range: the residual is the relative
translation shrunk by ``sensor_range`` along its own direction, and its
Mahalanobis norm under the positional covariance of the pair must be below
``D``. With ``sensor_range = 0`` this is the plain test of the relative
translation against zero.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .factors import Realization
from .lie import Pose, adjoint, adjoint_batch, symmetrize
from .overlap import cluster_pairs
from .pose_graph import SharedEstimate, route_lengths
from .sim_io import true_pair_matrix

log = logging.getLogger(__name__)

CHUNK = 200_000
MIN_EIG = 1e-12


def worker_count() -> int:
    """Worker cap from ``WICLOSURE_THREADS`` (default 1)."""
    raw = os.environ.get("WICLOSURE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer WICLOSURE_THREADS=%r", raw)
        return 1


class GatingError(ValueError):
    """Positional covariance of a pair is not positive definite."""


class AssociationError(ValueError):
    """Estimated and true trajectories cannot be associated pose by pose."""


@dataclass(frozen=True)
class CandidatePair:
    p_index: int
    k_index: int
    d_mh: float
    relative: Pose
    covariance: np.ndarray
    route_link: int

    def __post_init__(self):
        if not self.d_mh >= 0:
            raise ValueError("d_mh must be non-negative")


def shrink(x, sensor_range: float) -> np.ndarray:
    """Pull ``x`` towards zero by ``sensor_range`` (never past it)."""
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(n > sensor_range, 1.0 - sensor_range / np.where(n > 0, n, 1.0), 0.0)
    return x * scale


def mahalanobis_distance(x, cov, sensor_range: float = 0.0) -> float:
    """``sqrt(x' S^-1 x)`` for a 3-vector and its 3x3 covariance."""
    cov = np.asarray(cov, dtype=float)
    w = np.linalg.eigvalsh(symmetrize(cov))
    if w[0] <= MIN_EIG:
        raise GatingError(f"positional covariance not positive definite (min eig {w[0]:.3e})")
    r = shrink(x, sensor_range)
    return float(np.sqrt(max(r @ np.linalg.solve(cov, r), 0.0)))


def positional_covariance(relative: Pose, cov6) -> np.ndarray:
    """Covariance of ``relative.translation`` from a right-perturbation 6x6 covariance."""
    R = relative.rotation
    return symmetrize(R @ np.asarray(cov6)[3:, 3:] @ R.T)


def mahalanobis_gate(p_index: int, k_index: int, relative: Pose, cov, D: float,
                     sensor_range: float = 0.0, route_link: int = -1) -> Optional[CandidatePair]:
    """Admit the pair iff its Mahalanobis distance is below ``D``.

    ``cov`` is either the 6x6 body-frame covariance of ``relative`` or the
    3x3 covariance of its translation in the frame of ``relative.translation``.
    """
    cov = np.asarray(cov, dtype=float)
    pos = positional_covariance(relative, cov) if cov.shape == (6, 6) else cov
    d = mahalanobis_distance(relative.translation, pos, sensor_range)
    if d < D:
        return CandidatePair(int(p_index), int(k_index), d, relative,
                             cov if cov.shape == (6, 6) else np.full((6, 6), np.nan), route_link)
    return None


# ---------------------------------------------------------------------------
# vectorised gate


def _inv_adjoints(traj):
    R = traj.rotations
    return adjoint_batch(np.swapaxes(R, 1, 2), -np.einsum("nji,nj->ni", R, traj.positions))


def _skew_batch(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _quadform3(S, r):
    """``r' S^-1 r`` for batches of symmetric 3x3 matrices via the adjugate."""
    a, b, c = S[:, 0, 0], S[:, 0, 1], S[:, 0, 2]
    d, e, f = S[:, 1, 1], S[:, 1, 2], S[:, 2, 2]
    A, B, C = d * f - e * e, c * e - b * f, b * e - c * d
    D, E, F = a * f - c * c, b * c - a * e, a * d - b * b
    det = a * A + b * B + c * C
    x, y, z = r[:, 0], r[:, 1], r[:, 2]
    num = A * x * x + D * y * y + F * z * z + 2 * (B * x * y + C * x * z + E * y * z)
    return num, det


class _LinkGeometry:
    """Per-link quantities reused by every pair routed through that link."""

    def __init__(self, s: SharedEstimate, link):
        ta, tb = s.alpha, s.beta
        na, nb = len(ta), len(tb)
        pc1, pc2 = ta.poses[link.c1], tb.poses[link.c2]
        B = link.transform
        # alpha side, expressed in the c1 body frame
        J1 = adjoint(pc1.inverse())
        WA = ta.left_leg_covariance(np.arange(na), np.full(na, link.c1))
        self.sigma_a = J1 @ WA @ J1.T
        self.q = (ta.positions - pc1.translation) @ pc1.rotation
        # beta side: T^{c1}_k = B C_k
        Rc = pc2.rotation.T @ tb.rotations
        tc = (tb.positions - pc2.translation) @ pc2.rotation
        self.t_x = B.translation + tc @ B.rotation.T
        R_x = B.rotation @ Rc
        Jc = adjoint_batch(np.swapaxes(Rc, 1, 2), -np.einsum("nji,nj->ni", Rc, tc))
        WC = tb.left_leg_covariance(np.full(nb, link.c2), np.arange(nb))
        Jk = _inv_adjoints(tb)
        rest = (Jc @ link.covariance @ np.swapaxes(Jc, 1, 2)
                + Jk @ WC @ np.swapaxes(Jk, 1, 2))[:, 3:, 3:]
        self.Q = R_x @ rest @ np.swapaxes(R_x, 1, 2)

    def distances(self, P, K, sensor_range):
        d2 = np.empty(len(P))
        bad = np.zeros(len(P), dtype=bool)
        for lo in range(0, len(P), CHUNK):
            p, k = P[lo:lo + CHUNK], K[lo:lo + CHUNK]
            t = self.t_x[k]
            H = np.concatenate([-_skew_batch(t), np.broadcast_to(np.eye(3), t.shape[:1] + (3, 3))],
                               axis=2)
            S = H @ self.sigma_a[p] @ np.swapaxes(H, 1, 2) + self.Q[k]
            r = shrink(t - self.q[p], sensor_range)
            num, det = _quadform3(S, r)
            # lambda_min >= 4 det / trace^2; exact eigenvalues only where that is inconclusive
            tr = np.einsum("nii->n", S)
            ok = 4.0 * det > MIN_EIG * tr * tr
            unsure = np.flatnonzero(~ok)
            if len(unsure):
                ok[unsure] = np.linalg.eigvalsh(S[unsure])[:, 0] > MIN_EIG
            d2[lo:lo + CHUNK] = np.where(ok, num / np.where(ok, det, 1.0), np.inf)
            bad[lo:lo + CHUNK] = ~ok
        return np.sqrt(np.maximum(d2, 0.0)), bad


def route_links(s: SharedEstimate, P, K) -> np.ndarray:
    """Index into ``sorted(s.links by id)`` of the shortest route per pair."""
    ordered = sorted(s.links, key=lambda l: l.measurement_id)
    return np.argmin(route_lengths(ordered, s.alpha, s.beta, P, K), axis=0), ordered


def gate_distances(s: SharedEstimate, pairs, sensor_range: float = 0.0):
    """Mahalanobis distance and route link id for an ``(n, 2)`` array of pairs.

    Pairs whose positional covariance is singular get ``inf``.
    """
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    P, K = pairs[:, 0], pairs[:, 1]
    d = np.full(len(pairs), np.inf)
    link_ids = np.full(len(pairs), -1, dtype=int)
    if not len(pairs):
        return d, link_ids
    which, ordered = route_links(s, P, K)
    groups = [(link, np.flatnonzero(which == j)) for j, link in enumerate(ordered)]
    groups = [(link, sel) for link, sel in groups if len(sel)]

    def run(group):
        link, sel = group
        return _LinkGeometry(s, link).distances(P[sel], K[sel], sensor_range)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(run, groups))
    n_bad = 0
    for (link, sel), (dist, bad) in zip(groups, results):
        d[sel] = dist
        link_ids[sel] = link.measurement_id
        n_bad += int(bad.sum())
    if n_bad:
        log.warning("%d pair(s) skipped: singular positional covariance", n_bad)
    return d, link_ids


def relative_batch(s: SharedEstimate, P, K, link):
    """``T^p_k`` and its 6x6 covariance for many pairs routed through one link."""
    ta, tb = s.alpha, s.beta
    pc1, pc2 = ta.poses[link.c1], tb.poses[link.c2]
    Ra = pc1.rotation.T @ ta.rotations[P]
    ta_ = (ta.positions[P] - pc1.translation) @ pc1.rotation
    RA = np.swapaxes(Ra, 1, 2)                            # A = T^p_{c1}
    tA = -np.einsum("nji,nj->ni", Ra, ta_)
    B = link.transform
    Rc = pc2.rotation.T @ tb.rotations[K]                 # C = T^{c2}_k
    tc = (tb.positions[K] - pc2.translation) @ pc2.rotation
    R_bc = B.rotation @ Rc
    t_bc = B.translation + tc @ B.rotation.T
    R = RA @ R_bc
    t = tA + np.einsum("nij,nj->ni", RA, t_bc)
    J_a = adjoint_batch(np.swapaxes(R_bc, 1, 2), -np.einsum("nji,nj->ni", R_bc, t_bc))
    J_b = adjoint_batch(np.swapaxes(Rc, 1, 2), -np.einsum("nji,nj->ni", Rc, tc))
    JA = adjoint(pc1.inverse())
    S_A = JA @ ta.left_leg_covariance(P, np.full(len(P), link.c1)) @ JA.T
    JK = _inv_adjoints(tb)[K]
    S_C = JK @ tb.left_leg_covariance(np.full(len(K), link.c2), K) @ np.swapaxes(JK, 1, 2)
    cov = (J_a @ S_A @ np.swapaxes(J_a, 1, 2) + J_b @ link.covariance @ np.swapaxes(J_b, 1, 2)
           + S_C)
    return R, t, 0.5 * (cov + np.swapaxes(cov, 1, 2))


@dataclass
class CandidateSet:
    """Gated pair set G; the pair arrays are sorted by ``(p, k)``."""

    realization: Realization
    threshold: float
    sensor_range: float
    p_index: np.ndarray
    k_index: np.ndarray
    d_mh: np.ndarray
    route_link: np.ndarray
    shared: Optional[SharedEstimate] = field(default=None, repr=False)
    evaluated: int = 0

    def __len__(self):
        return len(self.p_index)

    def index_pairs(self) -> set:
        return set(zip(self.p_index.tolist(), self.k_index.tolist()))

    @cached_property
    def pairs(self) -> list:
        if not len(self):
            return []
        R = np.empty((len(self), 3, 3))
        t = np.empty((len(self), 3))
        cov = np.empty((len(self), 6, 6))
        by_id = {l.measurement_id: l for l in self.shared.links}
        for mid in np.unique(self.route_link):
            sel = np.flatnonzero(self.route_link == mid)
            R[sel], t[sel], cov[sel] = relative_batch(
                self.shared, self.p_index[sel], self.k_index[sel], by_id[int(mid)])
        a, b = self.shared.pair
        return [CandidatePair(int(p), int(k), float(d), Pose(R[i], t[i], f"{a}{p}", f"{b}{k}"),
                              cov[i], int(l))
                for i, (p, k, d, l) in enumerate(zip(self.p_index, self.k_index, self.d_mh,
                                                     self.route_link))]


def empty_candidate_set(realization, D, sensor_range, shared=None) -> CandidateSet:
    z = np.zeros(0, dtype=int)
    return CandidateSet(realization, D, sensor_range, z, z.copy(), np.zeros(0), z.copy(), shared)


def _gate_pairs(pairs, s, realization, D, sensor_range):
    if len(realization) == 0:
        raise ValueError("realization is empty")
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    d, links = gate_distances(s, pairs, sensor_range)
    keep = d < D
    order = np.lexsort((pairs[keep, 1], pairs[keep, 0]))
    kept = pairs[keep][order]
    return CandidateSet(realization, D, sensor_range, kept[:, 0], kept[:, 1], d[keep][order],
                        links[keep][order], s, evaluated=len(pairs))


def build_candidate_set(clusters, shared: SharedEstimate, realization: Realization,
                        D: float, sensor_range: float = 0.0) -> CandidateSet:
    """Gate every deduplicated pair covered by the clusters."""
    return _gate_pairs(cluster_pairs(clusters), shared, realization, D, sensor_range)


def brute_force_candidate_set(shared: SharedEstimate, realization: Realization, D: float,
                              sensor_range: float = 0.0) -> CandidateSet:
    """Gate every cross-robot pair."""
    na, nb = len(shared.alpha), len(shared.beta)
    p, k = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
    return _gate_pairs(np.stack([p.ravel(), k.ravel()], axis=1), shared, realization, D,
                       sensor_range)


# ---------------------------------------------------------------------------
# evaluation


def umeyama(src, dst):
    """Rigid ``(R, t)`` minimising ``|R src + t - dst|`` over point rows."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    U, _, Vt = np.linalg.svd((dst - mu_d).T @ (src - mu_s))
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def ate(shared: SharedEstimate, truth_alpha, truth_beta) -> float:
    """RMSE after one rigid alignment fitted on robot alpha; beta follows via the anchor."""
    est_a = shared.alpha.positions
    est_b = shared.beta_in_alpha()
    ga = np.array([p.translation for p in truth_alpha])
    gb = np.array([p.translation for p in truth_beta])
    if len(ga) != len(est_a) or len(gb) != len(est_b):
        raise AssociationError("estimated and true trajectories differ in length")
    R, t = umeyama(est_a, ga)
    err = np.vstack([est_a @ R.T + t - ga, est_b @ R.T + t - gb])
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


@dataclass
class EvalReport:
    total_pairs: int
    gated_pairs: int
    true_positives: int
    false_positives: int
    missed_true: int
    rejection_rate: float
    miss_rate: float
    ate: Optional[float]
    timings: dict = field(default_factory=dict)
    pair_evaluations: int = 0
    true_pairs: int = 0
    true_places: int = 0
    missed_places: int = 0
    seed: Optional[int] = None
    sigma_ub: Optional[float] = None

    def __post_init__(self):
        if self.gated_pairs != self.true_positives + self.false_positives:
            raise ValueError("gated pairs must equal true + false positives")

    def to_json(self, include_timings: bool = False) -> dict:
        """JSON-ready dict; timings are left out by default so reruns compare byte for byte."""
        data = asdict(self)
        for key in ("rejection_rate", "miss_rate", "ate"):
            data[key] = None if data[key] is None else float(data[key])
        if include_timings:
            data["timings"] = {k: float(v) for k, v in sorted(self.timings.items())}
        else:
            del data["timings"]
        return data

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        return cls(**data)


def evaluate(g: CandidateSet, truth_alpha, truth_beta, true_lc_radius: float,
             timings: Optional[dict] = None) -> EvalReport:
    """Confusion counts of G against ground-truth proximity, plus ATE.

    Pairs never evaluated count as rejected. ``true_places`` counts alpha
    poses with at least one true partner; a place is missed when none of its
    true pairs were gated.
    """
    if g.shared is not None and (len(truth_alpha) != len(g.shared.alpha)
                                 or len(truth_beta) != len(g.shared.beta)):
        raise AssociationError("ground truth does not match the estimated trajectories")
    truth = true_pair_matrix(truth_alpha, truth_beta, true_lc_radius)
    total = truth.size
    n_true = int(truth.sum())
    n_false = total - n_true
    hit = truth[g.p_index, g.k_index] if len(g) else np.zeros(0, dtype=bool)
    tp = int(hit.sum())
    fp = len(g) - tp
    gated = np.zeros_like(truth)
    if len(g):
        gated[g.p_index, g.k_index] = True
    places = truth.any(axis=1)
    found = (truth & gated).any(axis=1)
    return EvalReport(
        total_pairs=int(total), gated_pairs=len(g), true_positives=tp, false_positives=fp,
        missed_true=n_true - tp,
        rejection_rate=(n_false - fp) / n_false if n_false else 1.0,
        miss_rate=(n_true - tp) / n_true if n_true else 0.0,
        ate=None if g.shared is None else ate(g.shared, truth_alpha, truth_beta),
        timings=dict(timings or {}), pair_evaluations=int(g.evaluated), true_pairs=n_true,
        true_places=int(places.sum()), missed_places=int((places & ~found).sum()))


class Stopwatch:
    """Accumulates wall time per named stage."""

    def __init__(self):
        self.timings = {}

    def __call__(self, name):
        watch = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                watch.timings[name] = watch.timings.get(name, 0.0) + time.perf_counter() - self.t0
                return False

        return _Stage()
