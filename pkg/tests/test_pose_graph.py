import pickle

import numpy as np
import pytest

from oracles import frobenius_error, random_spd, sample_chain, sample_covariance, se3_exp
from wiclosure.factors import AoaMode, CommMeasurement, OdometryFactor, RangeFactor
from wiclosure.lie import Pose, exp_map, is_covariance, max_eigenvalue, yaw_rotation
from wiclosure.pose_graph import (ConvergenceError, DegenerateGeometryError, LinkEstimate,
                                  NoLinkError, SharedEstimate, StateError,
                                  Trajectory, anchor_shared, dead_reckon,
                                  information_marginals, min_route, relative_pose_covariance,
                                  solve_mle)

NOISE = np.diag([1e-4, 1e-4, 4e-4, 4e-3, 1e-3, 1e-4])


def chain(rng, n, noise=NOISE, name="a", perturb=0.0):
    steps = [exp_map(np.r_[rng.normal(0, [0.01, 0.01, 0.2]), rng.uniform(0.5, 1.5),
                           rng.normal(0, [0.1, 0.01])]) for _ in range(n - 1)]
    odo = [OdometryFactor(i, i + 1, z, noise) for i, z in enumerate(steps)]
    poses = dead_reckon(odo)
    if perturb:
        poses = [poses[0]] + [p @ exp_map(rng.normal(0, perturb, 6)) for p in poses[1:]]
    return Trajectory(name, poses, odo)


def straight(n, name, step=1.0, noise=NOISE):
    odo = [OdometryFactor(i, i + 1, Pose(np.eye(3), [step, 0, 0]), noise) for i in range(n - 1)]
    return Trajectory(name, dead_reckon(odo), odo)


def test_trajectory_shape_contract():
    t = chain(np.random.default_rng(0), 5)
    assert len(t) == 5 and np.allclose(t.poses[0].matrix(), np.eye(4))
    with pytest.raises(ValueError):
        Trajectory("x", t.poses[:3], t.odometry)


def test_noise_free_chain_is_fixed_point():
    t = chain(np.random.default_rng(1), 12)
    expected = [p.matrix() for p in t.poses]
    solve_mle(t)
    assert all(np.allclose(p.matrix(), e, atol=1e-12) for p, e in zip(t.poses, expected))


def test_single_factor_recovers_measurement():
    z = exp_map([0.1, -0.2, 0.3, 1.0, 2.0, -0.5])
    t = Trajectory("a", [Pose.identity(), z @ exp_map([0.2, 0.1, -0.1, 0.3, -0.2, 0.1])],
                   [OdometryFactor(0, 1, z, NOISE)])
    solve_mle(t)
    assert np.abs(t.poses[1].matrix() - z.matrix()).max() < 1e-8


def test_perturbed_chain_converges_to_dead_reckoning():
    rng = np.random.default_rng(2)
    t = chain(rng, 10, perturb=0.05)
    solve_mle(t)
    ref = dead_reckon(t.odometry)
    assert max(np.abs(a.matrix() - b.matrix()).max() for a, b in zip(t.poses, ref)) < 1e-8


def test_convergence_error_carries_residual_and_pickles():
    t = chain(np.random.default_rng(3), 10, perturb=0.3)
    with pytest.raises(ConvergenceError) as info:
        solve_mle(t, max_iters=1)
    err = pickle.loads(pickle.dumps(info.value))
    assert err.residual == info.value.residual


def test_last_marginal_matches_monte_carlo_dead_reckoning():
    rng = np.random.default_rng(4)
    noise = random_spd(rng, 6, [0.005, 0.006, 0.01, 0.03, 0.02, 0.01])
    t = chain(rng, 10, noise)
    solve_mle(t)
    T = sample_chain([f.measured.matrix() for f in t.odometry], noise, rng, 100_000)
    mc = sample_covariance(T, t.poses[-1].matrix())
    assert frobenius_error(t.marginals[-1], mc) < 0.1


def test_marginals_match_information_inverse():
    t = chain(np.random.default_rng(5), 8)
    solve_mle(t)
    for a, b in zip(t.marginals, information_marginals(t)):
        assert np.allclose(a, b, atol=1e-9)


def test_unsolved_trajectory_has_no_legs():
    t = chain(np.random.default_rng(6), 4)
    with pytest.raises(StateError):
        t.leg_covariance(0, 3)


def comm(d, phi, receiver=0, transmitter=0, kappa=1 / np.radians(10) ** 2, heading=None):
    return CommMeasurement(1, ("a", receiver), ("b", transmitter), RangeFactor(d, 0.5),
                           [AoaMode(phi, kappa, 1.0)], heading=heading,
                           heading_std=None if heading is None else 0.01)


@pytest.mark.parametrize("phi,expected", [(0.0, [5, 0, 0]), (np.pi / 2, [0, 5, 0])])
def test_anchor_places_transmitter(phi, expected):
    ta, tb = straight(3, "a"), straight(3, "b")
    s = anchor_shared(ta, tb, comm(5.0, phi), 0)
    assert np.allclose(s.anchor.transform.translation, expected, atol=1e-12)
    assert np.allclose(s.transform.translation, expected, atol=1e-12)
    assert is_covariance(s.covariance)


def test_anchor_zero_range_is_degenerate():
    ta, tb = straight(3, "a"), straight(3, "b")
    with pytest.raises(DegenerateGeometryError):
        anchor_shared(ta, tb, comm(0.0, 0.0), 0)


def test_anchor_range_variance_matches_resampling():
    rng = np.random.default_rng(7)
    ta, tb = straight(3, "a"), straight(3, "b")
    m = comm(5.0, 0.0)
    s = anchor_shared(ta, tb, m, 0)
    n = 100_000
    # resample (d, phi) from the factors' own densities and convert
    d = 5.0 + rng.normal(0, np.sqrt(0.125), n)
    phi = rng.vonmises(0.0, m.modes[0].kappa, n)
    assert s.covariance[3, 3] == pytest.approx(np.var(d * np.cos(phi)), rel=0.1)


def shared(ta, tb, link):
    return SharedEstimate(ta, tb, link, Pose.identity(), np.zeros((6, 6)), (link,), 0.1)


def test_relative_covariance_at_link_endpoints():
    rng = np.random.default_rng(8)
    ta, tb = chain(rng, 6, name="a"), chain(rng, 7, name="b")
    solve_mle(ta)
    solve_mle(tb)
    cov = random_spd(rng, 6, [0.01, 0.02, 0.03, 0.3, 0.2, 0.1])
    link = LinkEstimate(0, 0, 2, 4, exp_map(rng.normal(size=6)), cov, 3.0)
    T, S = relative_pose_covariance(shared(ta, tb, link), 2, 4)
    assert np.allclose(T.matrix(), link.transform.matrix())
    assert np.allclose(S, cov)


def test_relative_covariance_with_identity_transforms_adds():
    ident = [OdometryFactor(i, i + 1, Pose.identity(), NOISE) for i in range(3)]
    ta = Trajectory("a", dead_reckon(ident), ident)
    tb = Trajectory("b", dead_reckon(ident), ident)
    solve_mle(ta)
    solve_mle(tb)
    cov = np.diag([1.0, 2, 3, 4, 5, 6]) * 1e-3
    link = LinkEstimate(0, 0, 1, 1, Pose.identity(), cov, 1.0)
    _, S = relative_pose_covariance(shared(ta, tb, link), 3, 0)
    assert np.allclose(S, ta.leg_covariance(3, 1) + cov + tb.leg_covariance(1, 0))
    assert np.allclose(S, 2 * NOISE + cov + NOISE)


def test_relative_covariance_grows_with_steps():
    ta, tb = straight(30, "a"), straight(30, "b")
    solve_mle(ta)
    solve_mle(tb)
    link = LinkEstimate(0, 0, 0, 0, Pose(yaw_rotation(0.5), [4, 1, 0]), NOISE, 4.0)
    s = shared(ta, tb, link)
    lam = [max_eigenvalue(relative_pose_covariance(s, 0, k)[1]) for k in range(30)]
    assert np.all(np.diff(lam) > 0)
    assert is_covariance(relative_pose_covariance(s, 17, 23)[1])


def link_at(mid, c1, c2, rng=None, r=5.0):
    return LinkEstimate(mid, 0, c1, c2, Pose(np.eye(3), [r, 0, 0]), NOISE, r)


def test_min_route_single_and_adjacent():
    ta, tb = straight(50, "a"), straight(50, "b")
    only = link_at(3, 10, 10)
    assert min_route([only], 40, 2, ta, tb) is only
    near, far = link_at(1, 20, 31), link_at(2, 2, 45)
    assert min_route([far, near], 21, 30, ta, tb) is near
    with pytest.raises(NoLinkError):
        min_route([], 0, 0, ta, tb)


def test_min_route_ties_go_to_lowest_id():
    ta, tb = straight(20, "a"), straight(20, "b")
    a, b = link_at(7, 5, 5), link_at(4, 5, 5)
    assert min_route([a, b], 0, 0, ta, tb) is b


def test_min_route_matches_enumeration():
    rng = np.random.default_rng(9)
    for _ in range(20):
        ta, tb = chain(rng, 60, name="a"), chain(rng, 60, name="b")
        links = [link_at(i, *rng.integers(0, 60, 2), r=rng.uniform(1, 30)) for i in range(5)]
        p, k = rng.integers(0, 60, 2)

        def route(l):
            sa = np.linalg.norm(np.diff(ta.positions, axis=0), axis=1)
            sb = np.linalg.norm(np.diff(tb.positions, axis=0), axis=1)
            lo, hi = sorted((p, l.c1))
            lo2, hi2 = sorted((k, l.c2))
            return sa[lo:hi].sum() + l.range + sb[lo2:hi2].sum()

        best = min(links, key=lambda l: (route(l), l.measurement_id))
        assert min_route(links, p, k, ta, tb) is best
