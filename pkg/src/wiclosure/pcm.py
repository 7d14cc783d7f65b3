"""Direct-path selection by pairwise consistency maximization.

Every (measurement, mode) pair becomes a hypothesis: a relative transform
between the receiver pose of robot alpha and the transmitter pose of robot
beta. Two hypotheses from different measurements are consistent when the
loop they close with the two odometry backbones is near the identity in the
Mahalanobis sense. The realization is the maximum clique of the resulting
consistency graph.

A range + azimuth link does not observe height, roll or pitch, nor the
relative yaw when no heading reference is available. Those directions are
projected out of the loop residual before the Mahalanobis norm is taken, so
the test has ``6 - rank(nuisance)`` degrees of freedom.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np
from scipy.stats import chi2

from .factors import CommMeasurement, Realization
from .lie import Pose, SingularityError, adjoint, log_map, yaw_rotation
from .pose_graph import LinkPriors, Trajectory, lift_link

log = logging.getLogger(__name__)

# body-frame twist indices (omega, v) left unobserved by a link
_TILT_AND_HEIGHT = (0, 1, 5)
_YAW = 2


@dataclass(frozen=True)
class MeasurementHypothesis:
    measurement_id: int
    mode_index: int
    c1: int
    c2: int
    transform: Pose
    covariance: np.ndarray
    prior: float
    heading_known: bool

    @property
    def key(self):
        return (self.measurement_id, self.mode_index)


@dataclass(frozen=True)
class PairCheck:
    consistent: bool
    d_pcm: float
    dof: int
    singular: bool = False


@dataclass
class ConsistencyGraph:
    nodes: list
    edges: np.ndarray
    gamma: Optional[float]
    distances: Optional[np.ndarray] = None

    def neighbours(self):
        return [set(np.flatnonzero(row)) for row in self.edges]


def default_gamma(dof: int, confidence: float = 0.95) -> float:
    return float(np.sqrt(chi2.ppf(confidence, dof)))


def hypotheses(measurements, ta: Trajectory, tb: Trajectory,
               priors: LinkPriors = LinkPriors()) -> list:
    out = []
    for m in sorted(measurements, key=lambda m: m.id):
        for i, p in enumerate(m.priors):
            link = lift_link(ta, tb, m, i, priors=priors)
            out.append(MeasurementHypothesis(m.id, i, link.c1, link.c2, link.transform,
                                             link.covariance, p, m.heading is not None))
    return out


def _align_yaw(target, vec):
    """Yaw rotating ``vec`` to point along ``target`` in the x-y plane."""
    if np.hypot(*vec[:2]) < 1e-12 or np.hypot(*target[:2]) < 1e-12:
        return 0.0
    return float(np.arctan2(target[1], target[0]) - np.arctan2(vec[1], vec[0]))


def _loop_transforms(h1, h2, ta, tb):
    """Loop factors with any unknown link yaw chosen to best close the loop."""
    B = tb.relative(h1.c2, h2.c2).with_frames("", "")
    A = ta.relative(h2.c1, h1.c1).with_frames("", "")
    y1 = h1.transform.translation
    y2 = h2.transform.translation
    R1, R2 = h1.transform.rotation, h2.transform.rotation
    if not h1.heading_known and not h2.heading_known:
        # yaw of link 2 follows from closing the loop rotation
        c = y1 + A.rotation.T @ (A.translation - y2)
        R1 = yaw_rotation(_align_yaw(-c, B.translation))
        R2 = A.rotation @ R1 @ B.rotation
    elif not h1.heading_known:
        w = (B @ Pose(R2, y2).inverse() @ A).translation
        R1 = yaw_rotation(_align_yaw(-y1, w))
    elif not h2.heading_known:
        a = (R1 @ B.rotation).T @ (y1 + R1 @ B.translation)
        u = A.translation - y2
        R2 = yaw_rotation(-_align_yaw(-a, u))
    return Pose(R1, y1), B, Pose(R2, y2), A


def pairwise_consistent(h1: MeasurementHypothesis, h2: MeasurementHypothesis,
                        ta: Trajectory, tb: Trajectory,
                        gamma: Optional[float] = None) -> PairCheck:
    """Loop-closure Mahalanobis test between two hypotheses."""
    if h1.measurement_id == h2.measurement_id:
        return PairCheck(False, np.inf, 0)
    if h2.key < h1.key:
        h1, h2 = h2, h1
    T1, B, T2, A = _loop_transforms(h1, h2, ta, tb)
    T2inv = T2.inverse()
    loop = T1 @ B @ T2inv @ A
    try:
        xi = log_map(loop)
    except SingularityError:
        return PairCheck(False, np.inf, 0, singular=True)

    J1 = adjoint((B @ T2inv @ A).inverse())
    JB = adjoint((T2inv @ A).inverse())
    J2 = -adjoint(A.inverse()) @ adjoint(T2)

    nuisance = []
    rest = np.zeros((6, 6))
    for J, h in ((J1, h1), (J2, h2)):
        free = list(_TILT_AND_HEIGHT) + ([] if h.heading_known else [_YAW])
        keep = np.ones(6, dtype=bool)
        keep[free] = False
        cov = h.covariance * np.outer(keep, keep)
        rest += J @ cov @ J.T
        nuisance.append(J[:, free])
    rest += JB @ tb.leg_covariance(h1.c2, h2.c2) @ JB.T
    rest += ta.leg_covariance(h2.c1, h1.c1)

    G = np.hstack(nuisance)
    U, s, _ = np.linalg.svd(G)
    rank = int(np.sum(s > 1e-9 * max(1.0, s[0])))
    N = U[:, rank:]
    dof = N.shape[1]
    if dof == 0:
        return PairCheck(True, 0.0, 0)
    xo = N.T @ xi
    So = N.T @ rest @ N
    try:
        d2 = float(xo @ np.linalg.solve(So, xo))
    except np.linalg.LinAlgError:
        return PairCheck(False, np.inf, dof, singular=True)
    d = float(np.sqrt(max(d2, 0.0)))
    g = default_gamma(dof) if gamma is None else gamma
    return PairCheck(d < g, d, dof)


def consistency_graph(hyps, ta: Trajectory, tb: Trajectory,
                      gamma: Optional[float] = None) -> ConsistencyGraph:
    n = len(hyps)
    edges = np.zeros((n, n), dtype=bool)
    dist = np.full((n, n), np.inf)
    for i, j in combinations(range(n), 2):
        if hyps[i].measurement_id == hyps[j].measurement_id:
            continue
        check = pairwise_consistent(hyps[i], hyps[j], ta, tb, gamma)
        dist[i, j] = dist[j, i] = check.d_pcm
        edges[i, j] = edges[j, i] = check.consistent
    return ConsistencyGraph(list(hyps), edges, gamma, dist)


def _clique_key(clique, g):
    members = sorted(g.nodes[i].key for i in clique)
    prior = sum(g.nodes[i].prior for i in clique)
    spread = 0.0
    if g.distances is not None and len(clique) > 1:
        idx = sorted(clique)
        spread = float(np.sum(np.triu(g.distances[np.ix_(idx, idx)], 1) ** 2))
    return (len(clique), round(prior, 12), -round(spread, 9), [(-a, -b) for a, b in members])


def maximal_cliques(neighbours):
    """Bron-Kerbosch with pivoting; yields every maximal clique."""
    stack = [(set(), set(range(len(neighbours))), set())]
    while stack:
        R, P, X = stack.pop()
        if not P and not X:
            yield R
            continue
        if not P:
            continue
        pivot = max(P | X, key=lambda u: len(P & neighbours[u]))
        for v in list(P - neighbours[pivot]):
            stack.append((R | {v}, P & neighbours[v], X & neighbours[v]))
            P = P - {v}
            X = X | {v}


def max_consistent_set(g: ConsistencyGraph) -> Realization:
    """Maximum clique.

    Ties go to the larger summed prior, then the smaller summed squared
    loop distance, then the smaller sorted (id, mode) list.
    """
    if not g.nodes:
        return Realization()
    best, best_key = None, None
    for clique in maximal_cliques(g.neighbours()):
        key = _clique_key(clique, g)
        if best_key is None or key > best_key:
            best, best_key = clique, key
    return Realization({g.nodes[i].measurement_id: g.nodes[i].mode_index for i in best})


def build_realization(measurements, ta: Trajectory, tb: Trajectory,
                      gamma: Optional[float] = None,
                      priors: LinkPriors = LinkPriors()):
    """Returns ``(realization, graph)``."""
    hyps = hypotheses(measurements, ta, tb, priors)
    g = consistency_graph(hyps, ta, tb, gamma)
    r = max_consistent_set(g)
    if len(r) < 2:
        log.warning("realization has %d link(s); relative heading is weakly constrained", len(r))
    return r, g
