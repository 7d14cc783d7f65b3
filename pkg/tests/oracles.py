"""Independent reference computations used by the tests.

Nothing here imports the package's geometry code, so agreement between the
two is evidence rather than tautology.
"""

import numpy as np


# --- finite differences ---------------------------------------------------

def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def frobenius_error(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# --- batched SE(3) with (omega, v) twists ---------------------------------

def hat(w):
    w = np.atleast_2d(w)
    S = np.zeros((len(w), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -w[:, 2], w[:, 1]
    S[:, 1, 0], S[:, 1, 2] = w[:, 2], -w[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -w[:, 1], w[:, 0]
    return S


def se3_exp(xi):
    """``(n, 6)`` twists -> ``(n, 4, 4)`` homogeneous matrices (series-safe)."""
    xi = np.atleast_2d(xi)
    w, v = xi[:, :3], xi[:, 3:]
    th = np.linalg.norm(w, axis=1)[:, None, None]
    W = hat(w)
    W2 = W @ W
    small = th < 1e-4
    ths = np.where(small, 1.0, th)
    a = np.where(small, 1 - th**2 / 6, np.sin(ths) / ths)
    b = np.where(small, 0.5 - th**2 / 24, (1 - np.cos(ths)) / ths**2)
    c = np.where(small, 1 / 6 - th**2 / 120, (ths - np.sin(ths)) / ths**3)
    I = np.eye(3)[None]
    R = I + a * W + b * W2
    V = I + b * W + c * W2
    T = np.zeros((len(xi), 4, 4))
    T[:, :3, :3] = R
    T[:, :3, 3] = np.einsum("nij,nj->ni", V, v)
    T[:, 3, 3] = 1
    return T


def se3_log(T):
    """Inverse of :func:`se3_exp` for rotation angles well below pi."""
    R, t = T[:, :3, :3], T[:, :3, 3]
    cos = np.clip((np.trace(R, axis1=1, axis2=2) - 1) / 2, -1, 1)
    th = np.arccos(cos)
    small = th < 1e-4
    ths = np.where(small, 1.0, th)
    k = np.where(small, 0.5 + th**2 / 12, ths / (2 * np.sin(ths)))
    A = R - np.swapaxes(R, 1, 2)
    w = k[:, None] * np.stack([A[:, 2, 1], A[:, 0, 2], A[:, 1, 0]], axis=1)
    W = hat(w)
    th = th[:, None, None]
    ths = ths[:, None, None]
    d = np.where(small[:, None, None], 1 / 12 + th**2 / 720,
                 (1 - ths * np.sin(ths) / (2 * (1 - np.cos(ths)))) / ths**2)
    Vinv = np.eye(3)[None] - 0.5 * W + d * (W @ W)
    return np.concatenate([w, np.einsum("nij,nj->ni", Vinv, t)], axis=1)


def homogeneous(R, t):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_spd(rng, n, scales):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(np.asarray(scales) ** 2) @ Q.T


def sample_chain(steps, noise, rng, n):
    """Monte Carlo products of noisy steps ``prod_i step_i exp(eps_i)``.

    ``steps`` are 4x4 matrices; returns ``(n, 4, 4)``.
    """
    L = np.linalg.cholesky(noise)
    T = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
    for step in steps:
        eps = rng.normal(size=(n, 6)) @ L.T
        T = T @ step @ se3_exp(eps)
    return T


def sample_covariance(T_samples, T_mean):
    """Body-frame covariance of samples around a nominal transform."""
    xi = se3_log(np.linalg.inv(T_mean)[None] @ T_samples)
    return np.cov(xi.T)


# --- cliques --------------------------------------------------------------

def popcount(x):
    x = np.asarray(x, dtype=np.uint32)
    return np.bitwise_count(x) if hasattr(np, "bitwise_count") else np.array(
        [bin(int(v)).count("1") for v in x.ravel()]).reshape(x.shape)


def exhaustive_max_clique(adj):
    """Size of the largest clique by checking all ``2^n`` vertex subsets.

    ``clique[mask]`` is built bit by bit: a set containing its highest vertex
    ``i`` is a clique iff the rest is a clique adjacent to ``i``.
    """
    adj = np.asarray(adj, dtype=bool)
    n = len(adj)
    nbr = np.array([sum(1 << j for j in np.flatnonzero(adj[i])) for i in range(n)],
                   dtype=np.uint32)
    clique = np.ones(1, dtype=bool)
    best = 0
    for i in range(n):
        rest = np.arange(1 << i, dtype=np.uint32)
        ok = clique & ((rest & ~nbr[i]) == 0)
        if ok.any():
            best = max(best, int(popcount(rest[ok]).max()) + 1)
        clique = np.concatenate([clique, ok])
    return best
