"""Branch-and-bound search for where two trajectories may overlap.

Robot beta's positions are placed in robot alpha's frame through the anchor
link. Each side is then pruned to the buffered bounding box of the other,
the larger side is split with k-means and the search recurses. Any pair that
the positional gate could admit lies within ``d_buffer`` (plus the spread of
link frame offsets) of each other, so it survives every pruning step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lie import adjoint, adjoint_batch
from .pose_graph import SharedEstimate, StateError, Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BoundingBox:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float).reshape(3)
        hi = np.asarray(self.max, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise ValueError("bounding box needs min <= max componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def of(cls, points, pad: float = 0.0) -> "BoundingBox":
        points = np.atleast_2d(points)
        return cls(points.min(axis=0) - pad, points.max(axis=0) + pad)

    def contains(self, points) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.min) & (points <= self.max), axis=1)

    def intersects(self, other: "BoundingBox") -> bool:
        return bool(np.all(self.min <= other.max) and np.all(other.min <= self.max))

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min


@dataclass
class Cluster:
    alpha: np.ndarray
    beta: np.ndarray
    box: BoundingBox
    depth: int
    alpha_xyz: Optional[np.ndarray] = field(default=None, repr=False)
    beta_xyz: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_pairs(self) -> int:
        return len(self.alpha) * len(self.beta)

    def pairs(self) -> np.ndarray:
        """Cross product of member indices as an ``(n, 2)`` array."""
        p, k = np.meshgrid(self.alpha, self.beta, indexing="ij")
        return np.stack([p.ravel(), k.ravel()], axis=1)


@dataclass
class SearchParams:
    D: float
    sensor_range: float
    sigma_ub: Optional[float] = None
    k_split: int = 2
    min_cluster: int = 16
    max_depth: int = 12

    def __post_init__(self):
        if self.D <= 0:
            raise ValueError("D must be positive")
        if self.sensor_range < 0:
            raise ValueError("sensor range must be non-negative")
        if self.k_split < 2:
            raise ValueError("k_split must be at least 2")
        if self.min_cluster < 1 or self.max_depth < 0:
            raise ValueError("min_cluster must be >= 1 and max_depth >= 0")


def _leg_blocks(traj: Trajectory, c: int, end_at_c: bool):
    """Largest positional and rotational eigenvalue over all legs touching c.

    Legs are expressed in the body frame of their end pose: pose c when
    ``end_at_c``, otherwise the far pose.
    """
    n = len(traj)
    W = traj.left_leg_covariance(np.arange(n), np.full(n, c))
    if end_at_c:
        J = adjoint(traj.poses[c].inverse())
    else:
        R = traj.rotations
        J = adjoint_batch(np.swapaxes(R, 1, 2), -np.einsum("nji,nj->ni", R, traj.positions))
    S = J @ W @ np.swapaxes(J, -1, -2)
    lam_w = np.linalg.eigvalsh(S[:, :3, :3])[:, -1]
    lam_v = np.linalg.eigvalsh(S[:, 3:, 3:])[:, -1]
    return max(float(lam_v.max()), 0.0), max(float(lam_w.max()), 0.0)


def _link_terms(ta: Trajectory, tb: Trajectory, link):
    lam_av, lam_aw = _leg_blocks(ta, link.c1, True)
    lam_cv, _ = _leg_blocks(tb, link.c2, False)
    reach = float(np.linalg.norm(tb.positions - tb.positions[link.c2], axis=1).max())
    cov = link.covariance
    s_w = np.sqrt(max(np.linalg.eigvalsh(cov[:3, :3])[-1], 0.0))
    s_v = np.sqrt(max(np.linalg.eigvalsh(cov[3:, 3:])[-1], 0.0))
    lever = float(np.linalg.norm(link.transform.translation)) + reach
    lam_a = (np.sqrt(lam_av) + np.sqrt(lam_aw) * lever) ** 2
    lam_b = (s_v + s_w * reach) ** 2
    return lam_a, lam_b, lam_cv


def sigma_upper_bound(ta: Trajectory, tb: Trajectory, s: SharedEstimate) -> float:
    """Bound on the positional standard deviation of every cross-robot pair.

    For each link the pair covariance is a sum of three congruence-transformed
    terms (alpha leg, link, beta leg). The largest eigenvalue of each is
    bounded with its rotational part acting over the longest lever arm, and
    the three bounds add (Weyl). The worst link over the realization is used,
    so the bound holds whichever link a pair is routed through.
    """
    for t in (ta, tb):
        if not t.solved:
            raise StateError(f"trajectory {t.robot!r} has no marginals")
    best = 0.0
    for link in s.links:
        best = max(best, sum(_link_terms(ta, tb, link)))
    return float(np.sqrt(best))


def buffer_distance(params: SearchParams) -> float:
    if params.sigma_ub is None:
        raise StateError("sigma_ub has not been computed")
    return params.D * params.sigma_ub + params.sensor_range


def link_spread(s: SharedEstimate) -> float:
    """Largest offset between the frame transforms implied by different links.

    All links share one frame rotation, so placing beta through any link
    differs from the anchor placement by a constant translation.
    """
    t0 = s.transform.translation
    return max((float(np.linalg.norm(s.frame_transform(l).translation - t0)) for l in s.links),
               default=0.0)


def kmeans(points, k: int, max_iters: int = 100):
    """Deterministic Lloyd iterations from a farthest-point initialisation.

    Returns ``(labels, centers)``; empty clusters are dropped and labels
    renumbered to ``0..m-1``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    k = max(1, min(k, n))
    first = int(np.argmax(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    centers = [points[first]]
    dist = np.linalg.norm(points - centers[0], axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dist))
        if dist[nxt] <= 0:
            break
        centers.append(points[nxt])
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    centers = np.array(centers)
    labels = None
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([points[labels == j].mean(axis=0) if np.any(labels == j) else centers[j]
                            for j in range(len(centers))])
    used = np.unique(labels)
    remap = {old: i for i, old in enumerate(used)}
    return np.array([remap[l] for l in labels]), centers[used]


def _box_of(ax, bx, pad):
    pts = [x for x in (ax, bx) if x is not None and len(x)]
    return BoundingBox.of(np.vstack(pts), pad)


def split_cluster(c: Cluster, k: int, buffer: float = 0.0) -> list:
    """Split the larger side of a cluster with k-means.

    The other side is handed to every child unchanged, so no pair of the
    parent is lost. Child boxes are the buffered bounding boxes of their
    members.
    """
    split_alpha = len(c.alpha) >= len(c.beta)
    idx, xyz = (c.alpha, c.alpha_xyz) if split_alpha else (c.beta, c.beta_xyz)
    if len(idx) == 0:
        return [c]
    labels, _ = kmeans(xyz, k)
    children = []
    for j in range(labels.max() + 1):
        sel = labels == j
        if split_alpha:
            a, ax, b, bx = c.alpha[sel], c.alpha_xyz[sel], c.beta, c.beta_xyz
        else:
            a, ax, b, bx = c.alpha, c.alpha_xyz, c.beta[sel], c.beta_xyz[sel]
        children.append(Cluster(a, b, _box_of(ax, bx, buffer), c.depth + 1, ax, bx))
    return children


def _prune(a, ax, b, bx, pad):
    # alternate until neither side shrinks
    while len(a) and len(b):
        keep_a = BoundingBox.of(bx, pad).contains(ax)
        a, ax = a[keep_a], ax[keep_a]
        if not len(a):
            break
        keep_b = BoundingBox.of(ax, pad).contains(bx)
        b, bx = b[keep_b], bx[keep_b]
        if keep_a.all() and keep_b.all():
            break
    return a, ax, b, bx


def find_overlap_clusters(ta: Trajectory, tb: Trajectory, s: SharedEstimate,
                          params: SearchParams) -> list:
    """Leaf clusters whose cross products contain every pair the gate can admit."""
    if params.sigma_ub is None:
        params.sigma_ub = sigma_upper_bound(ta, tb, s)
    pad = buffer_distance(params) + link_spread(s)
    pa = ta.positions
    pb = s.beta_in_alpha()
    stack = [Cluster(np.arange(len(pa)), np.arange(len(pb)), _box_of(pa, pb, pad), 0, pa, pb)]
    leaves = []
    while stack:
        c = stack.pop()
        a, ax, b, bx = _prune(c.alpha, c.alpha_xyz, c.beta, c.beta_xyz, pad)
        if not len(a) or not len(b):
            continue
        c = Cluster(a, b, _box_of(ax, bx, pad), c.depth, ax, bx)
        if max(len(a), len(b)) <= params.min_cluster or c.depth >= params.max_depth:
            leaves.append(c)
            continue
        children = split_cluster(c, params.k_split, pad)
        if len(children) == 1:
            leaves.append(c)
            continue
        stack.extend(reversed(children))
    log.debug("overlap search: %d leaf clusters, pad %.2f m", len(leaves), pad)
    return leaves


def cluster_pairs(clusters) -> np.ndarray:
    """Deduplicated ``(p, k)`` pairs covered by the clusters, sorted."""
    if not clusters:
        return np.zeros((0, 2), dtype=int)
    allp = np.vstack([c.pairs() for c in clusters])
    return np.unique(allp, axis=0)
